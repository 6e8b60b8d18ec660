"""Grouped safe rational activations with low-rank coefficient adapters."""

import os

# single-threaded BLAS keeps training trajectories bit-reproducible
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

from .adapter import NoraConfig, expand_groups, init_nora, merge, count_trainable, per_group_count  # noqa: E402
from .errors import ConfigError, ContractError, DimensionError, NumericError  # noqa: E402
from .fit import FitReport, FitSpec, fit_rational, rate_study  # noqa: E402
from .lora import LoraConfig, LoraLinear, compose_norapp  # noqa: E402
from .models import AdaptationPlan, ModelConfig, apply_plan, build, swap_activations  # noqa: E402
from .rational import GroupedRationalLayer, RationalCoeffs  # noqa: E402
from .tensor import Parameter, Tensor  # noqa: E402

__all__ = [
    "AdaptationPlan",
    "ConfigError",
    "ContractError",
    "DimensionError",
    "FitReport",
    "FitSpec",
    "GroupedRationalLayer",
    "LoraConfig",
    "LoraLinear",
    "ModelConfig",
    "NoraConfig",
    "NumericError",
    "Parameter",
    "RationalCoeffs",
    "Tensor",
    "apply_plan",
    "build",
    "compose_norapp",
    "count_trainable",
    "expand_groups",
    "fit_rational",
    "init_nora",
    "merge",
    "per_group_count",
    "rate_study",
    "swap_activations",
]
