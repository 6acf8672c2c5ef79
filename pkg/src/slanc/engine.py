"""Instrumented decoder forward pass in two precision modes.

The reference mode runs everything in double.  The reduced mode keeps
matmuls in double (wide MAC accumulators) but rounds every activation
to binary16 between ops and, crucially, runs each norm's sum-of-squares
accumulation in emulated FP16: that accumulation is the one step whose
dynamic range binary16 cannot cover, and every norm evaluation is
audited so overflow/underflow can be counted and histogrammed.

A norm with a scale entry multiplies its input by the precomputed
reciprocal first and swaps epsilon for epsilon/s^2; in exact arithmetic
the output is unchanged, in FP16 it moves the accumulated sum back into
range.  The norm epilogue (mean, divide, sqrt, gain) stays in double in
both modes so that any failure is attributable to the accumulation.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from . import fp16
from .fp16 import Fp16Tensor, accumulate_sum_of_squares
from .linalg import RealVector
from .model import (
    DecoderWeights,
    MlpKind,
    ModelConfig,
    ModelGraph,
    Nonlinearity,
    NormKind,
    ResidualPlacement,
)
from .scales import Formula, NormScale, ScaleTable, make_norm_scale


@dataclass(frozen=True)
class PrecisionPolicy:
    """What runs in FP16: the norm accumulation and/or activation storage."""

    norm_accumulation: str  # "FP64" or "FP16"
    activations: str  # "FP64" or "FP16storage"

    def __post_init__(self) -> None:
        if self.norm_accumulation not in ("FP64", "FP16"):
            raise ValueError(f"bad norm_accumulation {self.norm_accumulation!r}")
        if self.activations not in ("FP64", "FP16storage"):
            raise ValueError(f"bad activations {self.activations!r}")

    @property
    def fp16_storage(self) -> bool:
        return self.activations == "FP16storage"

    @property
    def fp16_accumulation(self) -> bool:
        return self.norm_accumulation == "FP16"


REFERENCE_POLICY = PrecisionPolicy(norm_accumulation="FP64", activations="FP64")
FP16_POLICY = PrecisionPolicy(norm_accumulation="FP16", activations="FP16storage")


@dataclass(frozen=True)
class NormAuditRecord:
    """One norm evaluation: what FP16 attempted and how it went."""

    norm_id: str
    token_index: int
    raw_sum_of_squares: float  # exact double value of the attempted sum
    fp16_sum: int
    overflowed: bool
    underflowed_to_zero: bool
    scale_applied: float


class NonPositiveVarianceError(Exception):
    """FP16 rounding pushed the variance at or below zero."""

    def __init__(self, record: NormAuditRecord, variance: float):
        self.record = record
        self.variance = variance
        super().__init__(
            f"non-positive variance {variance:.6g} at norm "
            f"{record.norm_id!r}, token {record.token_index}"
        )


class FingerprintMismatchError(Exception):
    """Supplied scale table was computed from different weights."""


# ── histograms ───────────────────────────────────────────────────────────

BUCKET_MIN_EXP = -30
BUCKET_MAX_EXP = 30
N_BUCKETS = BUCKET_MAX_EXP - BUCKET_MIN_EXP


@dataclass(frozen=True)
class Histogram:
    """log2-bucketed counts: bucket k covers [2^(k-30), 2^(k-29))."""

    below: int
    counts: tuple
    above: int

    @classmethod
    def from_values(cls, values) -> "Histogram":
        below = above = 0
        counts = [0] * N_BUCKETS
        for v in values:
            if math.isnan(v) or v >= 2.0**BUCKET_MAX_EXP:
                above += 1
            elif v < 2.0**BUCKET_MIN_EXP:
                below += 1
            else:
                mantissa, exponent = math.frexp(v)  # v = mantissa * 2^exponent
                counts[exponent - 1 - BUCKET_MIN_EXP] += 1
        return cls(below=below, counts=tuple(counts), above=above)

    @property
    def total(self) -> int:
        return self.below + sum(self.counts) + self.above


@dataclass(frozen=True)
class ForwardResult:
    output: np.ndarray  # n_tokens x d_model, double view
    audit: list
    histograms: dict  # norm_id -> Histogram of raw sums of squares


# ── pieces of the forward pass ───────────────────────────────────────────


def _store(x: np.ndarray, policy: PrecisionPolicy) -> np.ndarray:
    return fp16.round_array(x) if policy.fp16_storage else x


def _nonlinearity(z: np.ndarray, kind: Nonlinearity) -> np.ndarray:
    if kind is Nonlinearity.RELU:
        return np.maximum(z, 0.0)
    if kind is Nonlinearity.GELU:
        return 0.5 * z * (1.0 + erf(z / math.sqrt(2.0)))
    return z / (1.0 + np.exp(-z))  # SiLU


def norm_forward(
    x: np.ndarray,
    gamma: RealVector,
    beta: RealVector | None,
    epsilon: float,
    kind: NormKind,
    policy: PrecisionPolicy,
    scale: NormScale | None = None,
    norm_id: str = "norm",
    token_index: int = 0,
) -> tuple[np.ndarray, NormAuditRecord]:
    """Normalize one token row, auditing the sum-of-squares step.

    The input is multiplied by the scale reciprocal (1 when no scale),
    rounded to binary16 under FP16 storage, and its squares are summed
    either exactly or through the emulated FP16 accumulator.  Mean,
    variance, division and the gain/shift epilogue always run in double.
    """
    x = np.asarray(x, dtype=np.float64)
    d = gamma.length
    if x.ndim != 1 or x.size != d:
        raise ValueError(f"expected a length-{d} row, got shape {x.shape}")
    reciprocal = scale.reciprocal if scale is not None else 1.0
    eps_adjusted = scale.epsilon_adjusted if scale is not None else epsilon
    applied = scale.s if scale is not None else 1.0
    scaled = x * reciprocal
    bits = None
    if policy.fp16_storage:
        bits = fp16.encode_array(scaled)
        scaled = fp16.decode_array(bits)
    raw = float(np.dot(scaled, scaled))
    if policy.fp16_accumulation:
        if bits is None:
            bits = fp16.encode_array(scaled)
        trace = accumulate_sum_of_squares(Fp16Tensor(shape=(d,), data=bits))
        sum_sq = fp16.decode(trace.final_sum)
        record = NormAuditRecord(
            norm_id=norm_id,
            token_index=token_index,
            raw_sum_of_squares=raw,
            fp16_sum=trace.final_sum,
            overflowed=trace.overflowed,
            underflowed_to_zero=trace.underflowed_to_zero,
            scale_applied=applied,
        )
    else:
        sum_sq = raw
        record = NormAuditRecord(
            norm_id=norm_id,
            token_index=token_index,
            raw_sum_of_squares=raw,
            fp16_sum=fp16.encode(raw),
            overflowed=False,
            underflowed_to_zero=False,
            scale_applied=applied,
        )
    if kind is NormKind.LAYER_NORM:
        mean = float(np.mean(scaled))
        variance = sum_sq / d - mean * mean + eps_adjusted
    else:
        mean = 0.0
        variance = sum_sq / d + eps_adjusted
    if math.isnan(variance) or variance <= 0.0:
        raise NonPositiveVarianceError(record, variance)
    sigma = math.sqrt(variance)
    y = (scaled - mean) / sigma * gamma.as_array()
    if kind is NormKind.LAYER_NORM and beta is not None:
        y = y + beta.as_array()
    return _store(y, policy), record


def attention_forward(
    x: np.ndarray,
    weights: DecoderWeights,
    config: ModelConfig,
    policy: PrecisionPolicy,
) -> np.ndarray:
    """Causal multi-head attention on a token-by-d activation matrix."""
    x = np.asarray(x, dtype=np.float64)
    d, dh = config.d_model, config.head_dim
    if x.ndim != 2 or x.shape[1] != d:
        raise ValueError(f"expected n_tokens x {d} activations, got {x.shape}")
    n = x.shape[0]
    q = _store(x @ weights.w_q.as_array(), policy)
    k = _store(x @ weights.w_k.as_array(), policy)
    v = _store(x @ weights.w_v.as_array(), policy)
    mask = np.triu_indices(n, k=1)
    heads = []
    for h in range(config.n_heads):
        cols = slice(h * dh, (h + 1) * dh)
        scores = _store(q[:, cols] @ k[:, cols].T / math.sqrt(dh), policy)
        scores = scores.copy()
        scores[mask] = -math.inf
        # Max-subtraction softmax in double; rows are convex weights.
        peak = scores.max(axis=1, keepdims=True)
        weights_exp = np.exp(scores - peak)
        s = weights_exp / weights_exp.sum(axis=1, keepdims=True)
        s = _store(s, policy)
        heads.append(_store(s @ v[:, cols], policy))
    return _store(np.hstack(heads) @ weights.p.as_array(), policy)


def mlp_forward(
    x: np.ndarray,
    weights: DecoderWeights,
    mlp_kind: MlpKind,
    nonlinearity: Nonlinearity,
    policy: PrecisionPolicy,
) -> np.ndarray:
    """Standard F(xE)G or gated (F(xE) .* xB)G; no residual here."""
    x = np.asarray(x, dtype=np.float64)
    e = weights.e.as_array()
    if x.ndim != 2 or x.shape[1] != e.shape[0]:
        raise ValueError(f"expected n_tokens x {e.shape[0]} activations, got {x.shape}")
    gate = _store(_nonlinearity(_store(x @ e, policy), nonlinearity), policy)
    if mlp_kind is MlpKind.LLAMA_GATED:
        up = _store(x @ weights.b.as_array(), policy)
        gate = _store(gate * up, policy)
    return _store(gate @ weights.g.as_array(), policy)


# ── the full pass ────────────────────────────────────────────────────────


def forward(
    model: ModelGraph,
    x0: np.ndarray,
    policy: PrecisionPolicy,
    scales: ScaleTable | None = None,
) -> ForwardResult:
    """Run the decoder chain, auditing every norm evaluation.

    PostLN: sublayer, add residual, norm.  PreLN: norm, sublayer, add
    residual, with one final norm after the last decoder.
    """
    cfg = model.config
    x = np.asarray(x0, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.d_model or x.shape[0] < 1:
        raise ValueError(
            f"input activations must be n_tokens x {cfg.d_model}, got {x.shape}"
        )
    if not np.isfinite(x).all():
        raise ValueError("input activations must be finite")
    if scales is not None and scales.fingerprint != model.fingerprint():
        raise FingerprintMismatchError(
            "scale table fingerprint does not match the model weights"
        )
    audit: list[NormAuditRecord] = []
    raw_sums: dict[str, list[float]] = defaultdict(list)

    def run_norm(acts: np.ndarray, norm_id: str, gamma, beta) -> np.ndarray:
        entry = scales.entries.get(norm_id) if scales is not None else None
        if scales is not None and entry is None:
            raise ValueError(f"scale table has no entry for norm {norm_id!r}")
        rows = np.empty_like(acts)
        for t in range(acts.shape[0]):
            rows[t], record = norm_forward(
                acts[t], gamma, beta, cfg.epsilon, cfg.norm_kind, policy,
                scale=entry, norm_id=norm_id, token_index=t,
            )
            audit.append(record)
            raw_sums[norm_id].append(record.raw_sum_of_squares)
        return rows

    x = _store(x, policy)
    post_ln = cfg.residual_placement is ResidualPlacement.POST_LN
    for i, layer in enumerate(model.layers):
        if post_ln:
            attn = attention_forward(x, layer, cfg, policy)
            x = run_norm(_store(x + attn, policy), f"layer{i}.norm1",
                         layer.gamma1, layer.beta1)
            mlp = mlp_forward(x, layer, cfg.mlp_kind, cfg.nonlinearity, policy)
            x = run_norm(_store(x + mlp, policy), f"layer{i}.norm2",
                         layer.gamma2, layer.beta2)
        else:
            normed = run_norm(x, f"layer{i}.norm1", layer.gamma1, layer.beta1)
            x = _store(x + attention_forward(normed, layer, cfg, policy), policy)
            normed = run_norm(x, f"layer{i}.norm2", layer.gamma2, layer.beta2)
            x = _store(x + mlp_forward(normed, layer, cfg.mlp_kind,
                                       cfg.nonlinearity, policy), policy)
    if model.final_gamma is not None:
        x = run_norm(x, "final_norm", model.final_gamma, model.final_beta)
    histograms = {
        norm_id: Histogram.from_values(raw_sums[norm_id])
        for norm_id in model.norm_ids
    }
    return ForwardResult(output=x, audit=audit, histograms=histograms)


# ── dynamic calibration baseline ─────────────────────────────────────────


def calibrate_dynamic(
    model: ModelGraph,
    calibration_inputs: list,
    statistic: str = "Median",
) -> ScaleTable:
    """Per-norm scales from observed input norms on calibration data.

    Runs the double-precision forward over every calibration matrix,
    collects each norm's pre-scaling input Euclidean norm per token,
    and takes the chosen statistic (Mean or Median) as that norm's s.
    """
    if statistic not in ("Mean", "Median"):
        raise ValueError(f"statistic must be 'Mean' or 'Median', got {statistic!r}")
    if not calibration_inputs:
        raise ValueError("empty calibration set")
    observed: dict[str, list[float]] = defaultdict(list)
    for x in calibration_inputs:
        result = forward(model, x, REFERENCE_POLICY, scales=None)
        for record in result.audit:
            observed[record.norm_id].append(math.sqrt(record.raw_sum_of_squares))
    entries: dict[str, NormScale] = {}
    for norm_id in model.norm_ids:
        values = np.array(observed[norm_id])
        s = float(np.mean(values) if statistic == "Mean" else np.median(values))
        entries[norm_id] = make_norm_scale(
            s, model.config.epsilon, Formula.DYNAMIC,
            model.norm_layer(norm_id), norm_id,
        )
    return ScaleTable(fingerprint=model.fingerprint(), entries=entries)
