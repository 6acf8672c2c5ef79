"""Command-line front end.

    slanc gen-model --d 256 --layers 4 --seed 7 -o model.safetensors
    slanc scales model.safetensors -o scales.json
    slanc audit model.safetensors --policy fp16 --scales scales.json \
        --tokens 512 --seed 1 -o report.json
    slanc compare model.safetensors --scales scales.json --tokens 512 --seed 1

Exit codes: 0 success, 1 usage or IO error, 2 degenerate scale,
3 numerical failure, 4 overflows found under --fail-on-overflow.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import model as model_mod
from . import report as report_mod
from . import serialization
from .engine import (
    FP16_POLICY,
    REFERENCE_POLICY,
    FingerprintMismatchError,
    NonPositiveVarianceError,
    forward,
)
from .linalg import ConvergenceError
from .model import (
    InitSpec,
    MlpKind,
    ModelConfig,
    ModelError,
    NameMap,
    NormKind,
    Nonlinearity,
    ResidualPlacement,
)
from .safetensors_io import SafetensorsError
from .scales import DegenerateScaleError, ScaleTable, compute_scale_table

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DEGENERATE = 2
EXIT_NUMERICAL = 3
EXIT_OVERFLOWS = 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="slanc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-model", help="write a deterministic synthetic model")
    gen.add_argument("--d", type=int, required=True, help="model width d_model")
    gen.add_argument("--layers", type=int, required=True, help="decoder layer count")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--heads", type=int, default=None,
                     help="attention heads (default: d // 64 if that divides, else 4)")
    gen.add_argument("--mlp-hidden", type=int, default=None,
                     help="MLP hidden width (default: 4 * d)")
    gen.add_argument("--std", type=float, default=0.02, help="init Gaussian std")
    gen.add_argument("--norm-kind", choices=["layernorm", "rmsnorm"], default="rmsnorm")
    gen.add_argument("--placement", choices=["post-ln", "pre-ln"], default="post-ln")
    gen.add_argument("--mlp-kind", choices=["standard", "llama-gated"],
                     default="llama-gated")
    gen.add_argument("--nonlinearity", choices=["relu", "gelu", "silu"], default="silu")
    gen.add_argument("--epsilon", type=float, default=1e-5)
    gen.add_argument("--amplify", action="append", default=[], metavar="ROLES:FACTOR",
                     help="amplify matrix roles, e.g. e,g:8 (repeatable)")
    gen.add_argument("--amplify-layers", default=None, metavar="I,J,...",
                     help="restrict amplification to these layers (default all)")
    gen.add_argument("-o", "--out", required=True, help="output .safetensors path")

    scales = sub.add_parser("scales", help="compute the static scale table")
    scales.add_argument("model", help="model .safetensors path")
    scales.add_argument("--name-map", default=None, help="name-map JSON path")
    scales.add_argument("--config", default=None, help="config JSON path override")
    scales.add_argument("-o", "--out", required=True, help="output table JSON path")

    audit = sub.add_parser("audit", help="run a forward pass and report per-norm stats")
    audit.add_argument("model")
    audit.add_argument("--name-map", default=None)
    audit.add_argument("--config", default=None)
    audit.add_argument("--policy", choices=["fp16", "fp64"], default="fp16")
    audit.add_argument("--scales", default=None, help="scale table JSON path")
    audit.add_argument("--tokens", type=int, default=None, help="Gaussian token count")
    audit.add_argument("--seed", type=int, default=0, help="token generator seed")
    audit.add_argument("--inputs", default=None, help="activation .npy file instead")
    audit.add_argument("--format", choices=["json", "csv"], default="json")
    audit.add_argument("-o", "--out", required=True)
    audit.add_argument("--fail-on-overflow", action="store_true",
                       help="exit 4 if any norm overflowed")

    compare = sub.add_parser("compare", help="FP64 vs FP16 vs FP16+scales on one input")
    compare.add_argument("model")
    compare.add_argument("--name-map", default=None)
    compare.add_argument("--config", default=None)
    compare.add_argument("--scales", required=True)
    compare.add_argument("--tokens", type=int, default=None)
    compare.add_argument("--seed", type=int, default=0)
    compare.add_argument("--inputs", default=None)
    compare.add_argument("-o", "--out", default=None, help="also write report JSON here")
    return parser


# ── shared loading helpers ───────────────────────────────────────────────


def _load_name_map(path: str | None) -> NameMap | None:
    if path is None:
        return None
    try:
        with open(path, "r", encoding="utf-8") as handle:
            return NameMap.from_dict(json.load(handle))
    except OSError as err:
        raise UsageError(f"cannot read name map {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise UsageError(f"malformed name map JSON in {path}: {err}") from err


def _load_model(args):
    name_map = _load_name_map(args.name_map)
    config = None
    config_path = args.config or model_mod.config_sidecar_path(args.model)
    if args.config or os.path.exists(config_path):
        config = model_mod.load_config(config_path)
    return model_mod.load_safetensors(args.model, name_map=name_map, config=config)


def _load_scale_table(path: str) -> ScaleTable:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            return ScaleTable.from_json_text(handle.read())
    except OSError as err:
        raise UsageError(f"cannot read scale table {path}: {err}") from err
    except ValueError as err:
        raise UsageError(f"bad scale table {path}: {err}") from err


def _token_inputs(args, config: ModelConfig) -> tuple[np.ndarray, int | None]:
    if args.inputs is not None:
        try:
            acts = np.load(args.inputs)
        except (OSError, ValueError) as err:
            raise UsageError(f"cannot read activations {args.inputs}: {err}") from err
        acts = np.asarray(acts, dtype=np.float64)
        if acts.ndim != 2 or acts.shape[1] != config.d_model:
            raise UsageError(
                f"activations must be n_tokens x {config.d_model}, got {acts.shape}"
            )
        return acts, None
    if args.tokens is None:
        raise UsageError("either --tokens or --inputs is required")
    if args.tokens <= 0:
        raise UsageError(f"--tokens must be positive, got {args.tokens}")
    rng = np.random.default_rng(args.seed)
    return rng.standard_normal((args.tokens, config.d_model)), args.seed


def _parse_amplify(specs: list[str], layers_spec: str | None):
    amplify: dict[str, float] = {}
    for spec in specs:
        roles_part, sep, factor_part = spec.partition(":")
        if not sep:
            raise UsageError(f"bad --amplify {spec!r}, expected ROLES:FACTOR")
        try:
            factor = float(factor_part)
        except ValueError as err:
            raise UsageError(f"bad --amplify factor in {spec!r}") from err
        for role in roles_part.split(","):
            role = role.strip()
            if not role:
                raise UsageError(f"bad --amplify {spec!r}: empty role")
            amplify[role] = factor
    amplify_layers = None
    if layers_spec is not None:
        try:
            amplify_layers = tuple(int(i) for i in layers_spec.split(","))
        except ValueError as err:
            raise UsageError(f"bad --amplify-layers {layers_spec!r}") from err
    return amplify, amplify_layers


# ── commands ─────────────────────────────────────────────────────────────


def _cmd_gen_model(args) -> int:
    if args.d <= 0:
        raise UsageError(f"--d must be positive, got {args.d}")
    if args.layers < 0:
        raise UsageError(f"--layers must be non-negative, got {args.layers}")
    heads = args.heads
    if heads is None:
        heads = args.d // 64 if args.d % 64 == 0 else 4
    if heads <= 0 or args.d % heads != 0:
        raise UsageError(f"--heads {heads} must divide --d {args.d}")
    amplify, amplify_layers = _parse_amplify(args.amplify, args.amplify_layers)
    config = ModelConfig(
        d_model=args.d,
        n_heads=heads,
        head_dim=args.d // heads,
        mlp_hidden=args.mlp_hidden if args.mlp_hidden is not None else 4 * args.d,
        n_layers=args.layers,
        norm_kind={"layernorm": NormKind.LAYER_NORM,
                   "rmsnorm": NormKind.RMS_NORM}[args.norm_kind],
        residual_placement={"post-ln": ResidualPlacement.POST_LN,
                            "pre-ln": ResidualPlacement.PRE_LN}[args.placement],
        mlp_kind={"standard": MlpKind.STANDARD,
                  "llama-gated": MlpKind.LLAMA_GATED}[args.mlp_kind],
        nonlinearity={"relu": Nonlinearity.RELU, "gelu": Nonlinearity.GELU,
                      "silu": Nonlinearity.SILU}[args.nonlinearity],
        epsilon=args.epsilon,
    )
    init = InitSpec(std=args.std, amplify=amplify, amplify_layers=amplify_layers)
    graph = model_mod.generate_synthetic(config, init, args.seed)
    model_mod.save_safetensors(graph, args.out)
    serialization.atomic_write_text(
        model_mod.config_sidecar_path(args.out), serialization.dumps(config.to_dict())
    )
    print(graph.fingerprint())
    return EXIT_OK


def _cmd_scales(args) -> int:
    graph = _load_model(args)
    table = compute_scale_table(graph)
    serialization.atomic_write_text(args.out, table.to_json_text())
    print(f"wrote {len(table.entries)} scales to {args.out}")
    return EXIT_OK


def _cmd_audit(args) -> int:
    graph = _load_model(args)
    table = _load_scale_table(args.scales) if args.scales else None
    inputs, seed = _token_inputs(args, graph.config)
    policy = FP16_POLICY if args.policy == "fp16" else REFERENCE_POLICY
    result = forward(graph, inputs, policy, scales=table)
    audit_report = report_mod.build_audit_report(result, graph, args.policy, seed)
    if args.format == "csv":
        serialization.atomic_write_text(args.out, audit_report.to_csv_text())
    else:
        serialization.atomic_write_text(args.out, audit_report.to_json_text())
    print(
        f"{audit_report.total_overflows} overflows, "
        f"{audit_report.total_underflows} underflows over "
        f"{audit_report.tokens} tokens x {len(audit_report.norms)} norms"
    )
    if args.fail_on_overflow and audit_report.total_overflows > 0:
        return EXIT_OVERFLOWS
    return EXIT_OK


def _cmd_compare(args) -> int:
    graph = _load_model(args)
    table = _load_scale_table(args.scales)
    inputs, seed = _token_inputs(args, graph.config)
    compare_report = report_mod.run_compare(graph, inputs, table, seed=seed)
    sys.stdout.write(compare_report.to_text())
    if args.out:
        serialization.atomic_write_text(args.out, compare_report.to_json_text())
    return EXIT_OK


_COMMANDS = {
    "gen-model": _cmd_gen_model,
    "scales": _cmd_scales,
    "audit": _cmd_audit,
    "compare": _cmd_compare,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as err:
        print(f"slanc: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (ModelError, SafetensorsError, FingerprintMismatchError) as err:
        print(f"slanc: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as err:
        print(f"slanc: io error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except DegenerateScaleError as err:
        print(f"slanc: degenerate scale: {err}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (ConvergenceError, NonPositiveVarianceError) as err:
        print(f"slanc: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
