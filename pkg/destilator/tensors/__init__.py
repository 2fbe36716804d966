from .autodiff import (
    ComputationTape,
    EmptyTape,
    NonFiniteValue,
    NonScalarLoss,
    ShapeError,
    Tensor,
    backward,
    current_tape,
    no_grad,
    recording,
)
from .gradcheck import GradCheckReport, NonDeterministicFunction, grad_check
from .ops import BatchNormState, forward_op
from .optim import MissingGradient, OptimizerState, optimizer_step, zero_grad
