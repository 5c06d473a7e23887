"""Meta-learning engine: vanilla and wormhole (multiplicative inner-loop) MAML.

Built on a self-contained tape autodiff core whose backward pass is itself
differentiable, which is what the second-order outer loop needs.
"""

from .backend import BACKEND_NAME
from .autodiff import (
    OpKind,
    Tape,
    Tensor,
    apply,
    check_gradient,
    detach,
    grad,
    no_grad,
    tensor_new,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND_NAME",
    "OpKind",
    "Tape",
    "Tensor",
    "apply",
    "check_gradient",
    "detach",
    "grad",
    "no_grad",
    "tensor_new",
    "__version__",
]
