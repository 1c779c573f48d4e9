from .cost import CostReport, LayerSpec, count_cost
from .gradcheck import grad_check, grad_check_params
from .ops import (
    channel_layer_norm,
    check_finite,
    conv3d,
    depthwise_axial_conv3d,
    depthwise_conv3d,
    trilinear_resize,
)

__all__ = [
    "CostReport",
    "LayerSpec",
    "count_cost",
    "grad_check",
    "grad_check_params",
    "channel_layer_norm",
    "check_finite",
    "conv3d",
    "depthwise_axial_conv3d",
    "depthwise_conv3d",
    "trilinear_resize",
]
