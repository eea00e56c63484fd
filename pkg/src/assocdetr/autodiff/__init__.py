from .tensor import AutodiffError, ShapeError, Tape, Tensor, backward, is_recording, no_grad
from .gradcheck import NonFiniteError, check_gradients, finite_diff, rel_error
from .module import BatchNorm2d, Conv2d, LayerNorm, Linear, Module, Parameter, count_params
from . import ops

__all__ = [
    "AutodiffError", "ShapeError", "Tape", "Tensor", "backward", "is_recording", "no_grad",
    "NonFiniteError", "check_gradients", "finite_diff", "rel_error",
    "BatchNorm2d", "Conv2d", "LayerNorm", "Linear", "Module", "Parameter", "count_params",
    "ops",
]
