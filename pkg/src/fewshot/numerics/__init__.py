from .tensor import (
    ContractError,
    DimensionError,
    TapeConsumedError,
    Tensor,
    as_tensor,
    backward,
    concat,
    grad,
    no_grad,
    precision,
    set_grad_enabled,
    stack,
)
from .optim import AdamState, adam_step, make_optimizer, sgd_step
from .gradcheck import finite_diff_grad

__all__ = [
    "AdamState", "ContractError", "DimensionError", "TapeConsumedError", "Tensor",
    "adam_step", "as_tensor", "backward", "concat", "finite_diff_grad", "grad",
    "make_optimizer", "no_grad", "precision", "set_grad_enabled", "sgd_step", "stack",
]
