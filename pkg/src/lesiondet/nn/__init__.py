from .autodiff import Tensor, constant, from_op, parameter
from .layers import Conv2d, Linear, flatten_params

__all__ = ["Tensor", "constant", "from_op", "parameter", "Conv2d", "Linear", "flatten_params"]
