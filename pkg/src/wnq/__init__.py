"""Weight normalization based quantization (WNQ) for low-bit neural network weights."""

from wnq.backward import BackwardContext, backward_lqnet, backward_wnq, fd_check
from wnq.baselines import MethodId, quantize_dorefa, quantize_layer, quantize_lqnet, quantize_residual
from wnq.metrics import LayerReport, distribution_report, relative_mse
from wnq.quantizer import (
    QuantConfig,
    alternate,
    level_set,
    normalize,
    optimize_alpha,
    optimize_codes,
    project,
    quantize_filter,
    residual_init,
)
from wnq.tensor_store import (
    FilterView,
    LayerKind,
    QuantizedFilter,
    QuantizedLayer,
    WeightTensor,
    filter_views,
    pack_filter,
    read_quantized,
    read_tensor,
    unpack_filter,
    write_quantized,
    write_tensor,
)

__version__ = "0.1.0"

__all__ = [
    "BackwardContext",
    "FilterView",
    "LayerKind",
    "LayerReport",
    "MethodId",
    "QuantConfig",
    "QuantizedFilter",
    "QuantizedLayer",
    "WeightTensor",
    "alternate",
    "backward_lqnet",
    "backward_wnq",
    "distribution_report",
    "fd_check",
    "filter_views",
    "level_set",
    "normalize",
    "optimize_alpha",
    "optimize_codes",
    "pack_filter",
    "project",
    "quantize_dorefa",
    "quantize_filter",
    "quantize_layer",
    "quantize_lqnet",
    "quantize_residual",
    "read_quantized",
    "read_tensor",
    "relative_mse",
    "residual_init",
    "unpack_filter",
    "write_quantized",
    "write_tensor",
]
