"""Model configuration, synthetic weight generation, and checkpoint
ingestion.

A model is a chain of identical decoder layers (attention sublayer +
MLP sublayer, each with its own norm) plus, for pre-norm residual
placement, one final norm after the last decoder.  Weights use the
row-vector convention throughout: activations are row vectors and every
projection multiplies from the right, so e is d_model x mlp_hidden and
a checkpoint storing the transposed convention is fixed up by the name
map's per-role transpose list.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import safetensors_io
from .linalg import RealMatrix, RealVector


class NormKind(str, Enum):
    LAYER_NORM = "LayerNorm"
    RMS_NORM = "RMSNorm"


class ResidualPlacement(str, Enum):
    POST_LN = "PostLN"
    PRE_LN = "PreLN"


class MlpKind(str, Enum):
    STANDARD = "Standard"
    LLAMA_GATED = "LlamaGated"


class Nonlinearity(str, Enum):
    RELU = "ReLU"
    GELU = "GeLU"
    SILU = "SiLU"


# Per-layer tensor roles, in canonical (generation and fingerprint) order.
VECTOR_ROLES = ("gamma1", "beta1", "gamma2", "beta2")
MATRIX_ROLES = ("w_q", "w_k", "w_v", "p", "e", "b", "g")
FINAL_ROLES = ("final_gamma", "final_beta")


class ModelError(Exception):
    """Configuration or checkpoint content that cannot form a model."""


@dataclass(frozen=True)
class ModelConfig:
    d_model: int
    n_heads: int
    head_dim: int
    mlp_hidden: int
    n_layers: int
    norm_kind: NormKind
    residual_placement: ResidualPlacement
    mlp_kind: MlpKind
    nonlinearity: Nonlinearity
    epsilon: float

    def __post_init__(self) -> None:
        for name in ("d_model", "n_heads", "head_dim", "mlp_hidden"):
            if getattr(self, name) <= 0:
                raise ModelError(f"{name} must be positive, got {getattr(self, name)}")
        # n_layers 0 is allowed: a bare embedding pass (plus the final
        # norm under pre-norm placement) is useful as a degenerate case.
        if self.n_layers < 0:
            raise ModelError(f"n_layers must be non-negative, got {self.n_layers}")
        if self.n_heads * self.head_dim != self.d_model:
            raise ModelError(
                f"n_heads x head_dim must equal d_model: "
                f"{self.n_heads} x {self.head_dim} != {self.d_model}"
            )
        if not (math.isfinite(self.epsilon) and self.epsilon > 0):
            raise ModelError(f"epsilon must be positive and finite, got {self.epsilon}")

    @property
    def has_final_norm(self) -> bool:
        return self.residual_placement is ResidualPlacement.PRE_LN

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "head_dim": self.head_dim,
            "mlp_hidden": self.mlp_hidden,
            "n_layers": self.n_layers,
            "norm_kind": self.norm_kind.value,
            "residual_placement": self.residual_placement.value,
            "mlp_kind": self.mlp_kind.value,
            "nonlinearity": self.nonlinearity.value,
            "epsilon": self.epsilon,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        try:
            return cls(
                d_model=int(doc["d_model"]),
                n_heads=int(doc["n_heads"]),
                head_dim=int(doc["head_dim"]),
                mlp_hidden=int(doc["mlp_hidden"]),
                n_layers=int(doc["n_layers"]),
                norm_kind=NormKind(doc["norm_kind"]),
                residual_placement=ResidualPlacement(doc["residual_placement"]),
                mlp_kind=MlpKind(doc["mlp_kind"]),
                nonlinearity=Nonlinearity(doc["nonlinearity"]),
                epsilon=float(doc["epsilon"]),
            )
        except (KeyError, ValueError) as err:
            raise ModelError(f"bad model config: {err}") from err


@dataclass(frozen=True)
class DecoderWeights:
    """One decoder layer.  beta* only for LayerNorm; b only for gated MLP."""

    gamma1: RealVector
    gamma2: RealVector
    w_q: RealMatrix
    w_k: RealMatrix
    w_v: RealMatrix
    p: RealMatrix
    e: RealMatrix
    g: RealMatrix
    beta1: RealVector | None = None
    beta2: RealVector | None = None
    b: RealMatrix | None = None

    def role(self, name: str):
        return getattr(self, name)


@dataclass(frozen=True)
class ModelGraph:
    """Immutable model: config, decoder weights, optional final norm."""

    config: ModelConfig
    layers: tuple[DecoderWeights, ...]
    final_gamma: RealVector | None = None
    final_beta: RealVector | None = None

    @property
    def norm_ids(self) -> list[str]:
        """Norm operator ids in execution order."""
        ids: list[str] = []
        for i in range(len(self.layers)):
            ids.append(f"layer{i}.norm1")
            ids.append(f"layer{i}.norm2")
        if self.final_gamma is not None:
            ids.append("final_norm")
        return ids

    def norm_layer(self, norm_id: str) -> int:
        """Decoder index a norm lives in; one past the last for the final norm."""
        if norm_id == "final_norm":
            return len(self.layers)
        prefix, _, _ = norm_id.partition(".")
        return int(prefix.removeprefix("layer"))

    def fingerprint(self) -> str:
        """SHA-256 over the canonical weight bytes (shape-tagged, float64 LE)."""
        digest = hashlib.sha256()
        for tag, array in self._canonical_tensors():
            digest.update(tag.encode("utf-8"))
            digest.update(b"\x00")
            digest.update(np.ascontiguousarray(array, dtype="<f8").tobytes())
        return digest.hexdigest()

    def _canonical_tensors(self):
        for i, layer in enumerate(self.layers):
            for role in VECTOR_ROLES:
                vec = layer.role(role)
                if vec is not None:
                    yield f"{i}:{role}:{vec.length}", vec.data
            for role in MATRIX_ROLES:
                mat = layer.role(role)
                if mat is not None:
                    yield f"{i}:{role}:{mat.rows}x{mat.cols}", mat.data
        if self.final_gamma is not None:
            yield f"final:gamma:{self.final_gamma.length}", self.final_gamma.data
        if self.final_beta is not None:
            yield f"final:beta:{self.final_beta.length}", self.final_beta.data


# ── synthetic generation ─────────────────────────────────────────────────


@dataclass(frozen=True)
class InitSpec:
    """Gaussian init: every matrix entry ~ N(0, std^2), norm gains ~ 1 +
    N(0, std^2), with an optional multiplicative amplification on chosen
    matrix roles (all layers unless amplify_layers narrows it)."""

    std: float = 0.02
    amplify: dict = field(default_factory=dict)
    amplify_layers: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if not (math.isfinite(self.std) and self.std >= 0):
            raise ModelError(f"std must be non-negative and finite, got {self.std}")
        for role, factor in self.amplify.items():
            if role not in MATRIX_ROLES:
                raise ModelError(f"unknown amplify role {role!r}")
            if not (math.isfinite(factor) and factor > 0):
                raise ModelError(f"amplify factor for {role!r} must be positive")

    def factor(self, role: str, layer: int) -> float:
        if role not in self.amplify:
            return 1.0
        if self.amplify_layers is not None and layer not in self.amplify_layers:
            return 1.0
        return float(self.amplify[role])


def overflow_amplification(config: ModelConfig, std: float = 0.02) -> float:
    """Amplification of the MLP projections at or above which the
    unscaled FP16 sum-of-squares accumulation is expected to overflow on
    standard-normal tokens.

    Conservative estimate: two amplified matmuls gain (std sqrt(m)) *
    (std sqrt(d)) per amplification step, discounted 8x for
    nonlinearity/gating losses; overflow needs per-entry std of
    sqrt(2 * 65520 / d).  Tests validate the guarantee empirically.
    """
    gain = std * math.sqrt(config.mlp_hidden) * std * math.sqrt(config.d_model)
    if gain <= 0:
        raise ModelError("zero init std cannot be amplified into overflow")
    target = math.sqrt(2.0 * 65520.0 / config.d_model)
    return math.sqrt(target / (gain * 0.125))


def _representable_in_float32(values: np.ndarray) -> np.ndarray:
    # Snap to float32 so an F32 checkpoint round-trips bit-exactly.
    return values.astype(np.float32).astype(np.float64)


def generate_synthetic(config: ModelConfig, init: InitSpec, seed: int) -> ModelGraph:
    """Deterministic synthetic weights: a pure function of (config, init, seed)."""
    rng = np.random.default_rng(seed)
    d, m = config.d_model, config.mlp_hidden
    layer_norm = config.norm_kind is NormKind.LAYER_NORM
    gated = config.mlp_kind is MlpKind.LLAMA_GATED

    def vec(offset: float) -> RealVector:
        draw = offset + rng.standard_normal(d) * init.std
        return RealVector.from_array(_representable_in_float32(draw))

    def mat(rows: int, cols: int, role: str, layer: int) -> RealMatrix:
        draw = rng.standard_normal((rows, cols)) * (init.std * init.factor(role, layer))
        return RealMatrix.from_array(_representable_in_float32(draw))

    layers = []
    for i in range(config.n_layers):
        gamma1 = vec(1.0)
        beta1 = vec(0.0) if layer_norm else None
        gamma2 = vec(1.0)
        beta2 = vec(0.0) if layer_norm else None
        layers.append(
            DecoderWeights(
                gamma1=gamma1,
                beta1=beta1,
                gamma2=gamma2,
                beta2=beta2,
                w_q=mat(d, d, "w_q", i),
                w_k=mat(d, d, "w_k", i),
                w_v=mat(d, d, "w_v", i),
                p=mat(d, d, "p", i),
                e=mat(d, m, "e", i),
                b=mat(d, m, "b", i) if gated else None,
                g=mat(m, d, "g", i),
            )
        )
    final_gamma = final_beta = None
    if config.has_final_norm:
        final_gamma = vec(1.0)
        final_beta = vec(0.0) if layer_norm else None
    return ModelGraph(
        config=config,
        layers=tuple(layers),
        final_gamma=final_gamma,
        final_beta=final_beta,
    )


# ── name maps and checkpoint IO ──────────────────────────────────────────


@dataclass(frozen=True)
class NameMap:
    """Mapping from canonical roles to checkpoint tensor names.

    Per-layer roles resolve as layer_template.format(i=layer) + "." +
    roles[role]; the final-norm roles are absolute names.  Roles listed
    in transpose are stored in the transposed (output x input)
    convention and flipped on load/save.
    """

    layer_template: str
    roles: dict
    transpose: frozenset

    def tensor_name(self, role: str, layer: int | None = None) -> str:
        if role not in self.roles:
            raise ModelError(f"name map has no entry for role {role!r}")
        if role in FINAL_ROLES:
            return self.roles[role]
        if layer is None:
            raise ModelError(f"role {role!r} needs a layer index")
        return f"{self.layer_template.format(i=layer)}.{self.roles[role]}"

    @classmethod
    def from_dict(cls, doc: dict) -> "NameMap":
        try:
            return cls(
                layer_template=str(doc["layer_template"]),
                roles=dict(doc["roles"]),
                transpose=frozenset(doc.get("transpose", [])),
            )
        except (KeyError, TypeError) as err:
            raise ModelError(f"bad name map: {err}") from err

    def to_dict(self) -> dict:
        return {
            "layer_template": self.layer_template,
            "roles": dict(self.roles),
            "transpose": sorted(self.transpose),
        }


def default_name_map() -> NameMap:
    """Llama-style checkpoint naming with transposed projections."""
    return NameMap(
        layer_template="model.layers.{i}",
        roles={
            "gamma1": "input_layernorm.weight",
            "beta1": "input_layernorm.bias",
            "gamma2": "post_attention_layernorm.weight",
            "beta2": "post_attention_layernorm.bias",
            "w_q": "self_attn.q_proj.weight",
            "w_k": "self_attn.k_proj.weight",
            "w_v": "self_attn.v_proj.weight",
            "p": "self_attn.o_proj.weight",
            "e": "mlp.gate_proj.weight",
            "b": "mlp.up_proj.weight",
            "g": "mlp.down_proj.weight",
            "final_gamma": "model.norm.weight",
            "final_beta": "model.norm.bias",
        },
        transpose=frozenset(["w_q", "w_k", "w_v", "p", "e", "b", "g"]),
    )


def to_tensor_dict(graph: ModelGraph, name_map: NameMap | None = None) -> dict:
    """Flatten a graph to {tensor name: array} in storage orientation."""
    nm = name_map or default_name_map()
    out: dict[str, np.ndarray] = {}
    for i, layer in enumerate(graph.layers):
        for role in VECTOR_ROLES:
            vec = layer.role(role)
            if vec is not None:
                out[nm.tensor_name(role, i)] = vec.as_array()
        for role in MATRIX_ROLES:
            mat = layer.role(role)
            if mat is not None:
                arr = mat.as_array()
                out[nm.tensor_name(role, i)] = arr.T if role in nm.transpose else arr
    if graph.final_gamma is not None:
        out[nm.tensor_name("final_gamma")] = graph.final_gamma.as_array()
    if graph.final_beta is not None:
        out[nm.tensor_name("final_beta")] = graph.final_beta.as_array()
    return out


def save_safetensors(graph: ModelGraph, path: str, name_map: NameMap | None = None,
                     dtype: str = "F32") -> None:
    safetensors_io.save_tensors(path, to_tensor_dict(graph, name_map), dtype=dtype)


def _infer_config(tensors: dict, nm: NameMap) -> ModelConfig:
    """Best-effort config from tensor names/shapes (real checkpoints).

    Head count is not recoverable from fused projection shapes, so it
    defaults to a single head; scale computation never consults it.
    """
    n_layers = 0
    while nm.tensor_name("gamma1", n_layers) in tensors:
        n_layers += 1
    if n_layers == 0:
        raise ModelError("cannot infer a configuration: no decoder layers found")
    d_model = int(tensors[nm.tensor_name("gamma1", 0)].size)
    e_name = nm.tensor_name("e", 0)
    if e_name not in tensors:
        raise ModelError(f"missing required tensor {e_name!r}")
    e_shape = tensors[e_name].shape
    mlp_hidden = int(e_shape[0] if "e" in nm.transpose else e_shape[1])
    layer_norm = nm.tensor_name("beta1", 0) in tensors
    gated = nm.tensor_name("b", 0) in tensors
    final = nm.tensor_name("final_gamma") in tensors
    return ModelConfig(
        d_model=d_model,
        n_heads=1,
        head_dim=d_model,
        mlp_hidden=mlp_hidden,
        n_layers=n_layers,
        norm_kind=NormKind.LAYER_NORM if layer_norm else NormKind.RMS_NORM,
        residual_placement=(
            ResidualPlacement.PRE_LN if final else ResidualPlacement.POST_LN
        ),
        mlp_kind=MlpKind.LLAMA_GATED if gated else MlpKind.STANDARD,
        nonlinearity=Nonlinearity.SILU,
        epsilon=1e-5,
    )


def load_safetensors(
    path: str,
    name_map: NameMap | None = None,
    config: ModelConfig | None = None,
) -> ModelGraph:
    """Load a checkpoint into a validated double-precision graph."""
    nm = name_map or default_name_map()
    tensors = safetensors_io.load_tensors(path)
    cfg = config if config is not None else _infer_config(tensors, nm)
    d, m = cfg.d_model, cfg.mlp_hidden
    layer_norm = cfg.norm_kind is NormKind.LAYER_NORM
    gated = cfg.mlp_kind is MlpKind.LLAMA_GATED
    matrix_shapes = {
        "w_q": (d, d), "w_k": (d, d), "w_v": (d, d), "p": (d, d),
        "e": (d, m), "b": (d, m), "g": (m, d),
    }

    def take_vector(role: str, layer: int | None, required: bool) -> RealVector | None:
        name = nm.tensor_name(role, layer)
        if name not in tensors:
            if required:
                raise ModelError(f"missing required tensor {name!r}")
            return None
        arr = tensors[name]
        if arr.ndim != 1 or arr.size != d:
            raise ModelError(
                f"shape mismatch for {name!r}: expected ({d},), got {arr.shape}"
            )
        try:
            return RealVector.from_array(arr)
        except ValueError as err:
            raise ModelError(f"bad tensor {name!r}: {err}") from err

    def take_matrix(role: str, layer: int, required: bool) -> RealMatrix | None:
        name = nm.tensor_name(role, layer)
        if name not in tensors:
            if required:
                raise ModelError(f"missing required tensor {name!r}")
            return None
        arr = tensors[name]
        if role in nm.transpose:
            arr = arr.T
        if arr.ndim != 2 or arr.shape != matrix_shapes[role]:
            raise ModelError(
                f"shape mismatch for {name!r}: expected {matrix_shapes[role]} "
                f"(after transpose handling), got {arr.shape}"
            )
        try:
            return RealMatrix.from_array(arr)
        except ValueError as err:
            raise ModelError(f"bad tensor {name!r}: {err}") from err

    layers = []
    for i in range(cfg.n_layers):
        layers.append(
            DecoderWeights(
                gamma1=take_vector("gamma1", i, required=True),
                beta1=take_vector("beta1", i, required=layer_norm),
                gamma2=take_vector("gamma2", i, required=True),
                beta2=take_vector("beta2", i, required=layer_norm),
                w_q=take_matrix("w_q", i, required=True),
                w_k=take_matrix("w_k", i, required=True),
                w_v=take_matrix("w_v", i, required=True),
                p=take_matrix("p", i, required=True),
                e=take_matrix("e", i, required=True),
                b=take_matrix("b", i, required=gated) if gated else None,
                g=take_matrix("g", i, required=True),
            )
        )
    final_gamma = final_beta = None
    if cfg.has_final_norm:
        final_gamma = take_vector("final_gamma", None, required=True)
        final_beta = take_vector("final_beta", None, required=layer_norm)
    graph = ModelGraph(
        config=cfg,
        layers=tuple(layers),
        final_gamma=final_gamma,
        final_beta=final_beta,
    )
    problems = validate(graph)
    if problems:
        raise ModelError("invalid model: " + "; ".join(problems))
    return graph


# ── validation ───────────────────────────────────────────────────────────


def validate(graph: ModelGraph) -> list[str]:
    """Check every structural invariant; empty list means valid.

    Re-checks finiteness too: the value types reject non-finite data at
    construction, but arrays are views and can be mutated afterwards.
    """
    cfg = graph.config
    d, m = cfg.d_model, cfg.mlp_hidden
    layer_norm = cfg.norm_kind is NormKind.LAYER_NORM
    gated = cfg.mlp_kind is MlpKind.LLAMA_GATED
    problems: list[str] = []
    if len(graph.layers) != cfg.n_layers:
        problems.append(
            f"graph has {len(graph.layers)} layers, config says {cfg.n_layers}"
        )
    if cfg.has_final_norm and graph.final_gamma is None:
        problems.append("pre-norm placement requires a final norm gamma")
    if not cfg.has_final_norm and graph.final_gamma is not None:
        problems.append("post-norm placement must not have a final norm")

    def check_finite(label: str, data: np.ndarray) -> None:
        bad = np.flatnonzero(~np.isfinite(data))
        if bad.size:
            first = int(bad[0])
            problems.append(
                f"{label}: non-finite entry at flat index {first} "
                f"({data.ravel()[first]!r})"
            )

    matrix_shapes = {
        "w_q": (d, d), "w_k": (d, d), "w_v": (d, d), "p": (d, d),
        "e": (d, m), "b": (d, m), "g": (m, d),
    }
    for i, layer in enumerate(graph.layers):
        for role in VECTOR_ROLES:
            vec = layer.role(role)
            expected = layer_norm or not role.startswith("beta")
            if vec is None:
                if expected:
                    problems.append(f"layer {i}: {role}: missing")
                continue
            if not expected:
                problems.append(f"layer {i}: {role}: present but norm kind has no beta")
            if vec.length != d:
                problems.append(
                    f"layer {i}: {role}: expected length {d}, got {vec.length}"
                )
            check_finite(f"layer {i}: {role}", vec.data)
        for role in MATRIX_ROLES:
            mat = layer.role(role)
            expected = gated or role != "b"
            if mat is None:
                if expected:
                    problems.append(f"layer {i}: {role}: missing")
                continue
            if not expected:
                problems.append(f"layer {i}: {role}: present but MLP kind has no b")
            if (mat.rows, mat.cols) != matrix_shapes[role]:
                problems.append(
                    f"layer {i}: {role}: expected shape "
                    f"{matrix_shapes[role][0]}x{matrix_shapes[role][1]}, "
                    f"got {mat.rows}x{mat.cols}"
                )
            check_finite(f"layer {i}: {role}", mat.data)
    if graph.final_gamma is not None:
        if graph.final_gamma.length != d:
            problems.append(
                f"final norm gamma: expected length {d}, got {graph.final_gamma.length}"
            )
        check_finite("final norm gamma", graph.final_gamma.data)
        if layer_norm and graph.final_beta is None:
            problems.append("final norm beta: missing")
    return problems


# ── config sidecar files ─────────────────────────────────────────────────


def config_sidecar_path(model_path: str) -> str:
    if model_path.endswith(".safetensors"):
        return model_path[: -len(".safetensors")] + ".config.json"
    return model_path + ".config.json"


def load_config(path: str) -> ModelConfig:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            doc = json.load(handle)
    except OSError as err:
        raise ModelError(f"cannot read config {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise ModelError(f"malformed config JSON in {path}: {err}") from err
    return ModelConfig.from_dict(doc)
