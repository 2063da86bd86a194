"""Scalable vision transformer backbone on a small numpy autodiff core."""
from .attention import IwsaConfig, SsaConfig, TokenMap, iwsa_forward, ssa_forward, wsa_forward
from .backbone import Model, build_model, extract_feature_map, forward, forward_features
from .config import ModelSpec, StageSpec, toy_spec, variant
from .cost import CostReport, count_flops, count_params, instrument_forward, scaling_probe
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "CostReport", "IwsaConfig", "Model", "ModelSpec", "SsaConfig", "StageSpec", "Tensor", "TokenMap",
    "backward", "build_model", "count_flops", "count_params", "extract_feature_map", "forward",
    "forward_features", "instrument_forward", "iwsa_forward", "no_grad", "scaling_probe", "ssa_forward",
    "toy_spec", "variant", "wsa_forward",
]
