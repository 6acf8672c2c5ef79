"""Static scaling of normalization-layer inputs for overflow-free FP16
inference, plus the bit-exact binary16 emulator used to prove it works.

Submodules:
    fp16            binary16 soft-float and the audited accumulator
    linalg          double-precision matrices, Frobenius/spectral norms
    scales          the closed-form scale factors and the scale table
    model           configs, synthetic weights, safetensors ingestion
    engine          instrumented forward pass in both precision modes
    report          audit/compare reports
    cli             the `slanc` command-line tool
"""

__version__ = "0.1.0"

from .engine import FP16_POLICY, REFERENCE_POLICY, calibrate_dynamic, forward
from .model import (
    InitSpec,
    MlpKind,
    ModelConfig,
    ModelGraph,
    NormKind,
    Nonlinearity,
    ResidualPlacement,
    generate_synthetic,
    load_safetensors,
)
from .scales import (
    ScaleTable,
    adjust_epsilon,
    compute_scale_table,
    scale_attention,
    scale_llama_mlp,
    scale_standard_mlp,
)

__all__ = [
    "FP16_POLICY",
    "REFERENCE_POLICY",
    "InitSpec",
    "MlpKind",
    "ModelConfig",
    "ModelGraph",
    "NormKind",
    "Nonlinearity",
    "ResidualPlacement",
    "ScaleTable",
    "adjust_epsilon",
    "calibrate_dynamic",
    "compute_scale_table",
    "forward",
    "generate_synthetic",
    "load_safetensors",
    "scale_attention",
    "scale_llama_mlp",
    "scale_standard_mlp",
    "__version__",
]
