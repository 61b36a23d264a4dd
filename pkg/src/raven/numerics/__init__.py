from . import ops
from .gradcheck import analytic_grads, grad_check
from .params import ParamStore
from .tensor import NonFiniteError, Tape, Tensor, as_tensor, no_grad, set_finite_checks

__all__ = [
    "ops",
    "Tensor",
    "Tape",
    "ParamStore",
    "NonFiniteError",
    "as_tensor",
    "no_grad",
    "set_finite_checks",
    "grad_check",
    "analytic_grads",
]
