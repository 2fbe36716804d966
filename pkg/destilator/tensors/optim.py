from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class MissingGradient(RuntimeError):
    pass


@dataclass
class OptimizerState:
    """
    Stanje optimizatorja: SGD z vztrajnostjo, po želji z razmerjem zaupanja po
    plasteh (kot pri LAMB). Oba načina uporabljata razpad uteži in rezanje norme
    gradienta.
    """

    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    max_grad_norm: Optional[float] = 5.0
    trust_ratio: bool = False
    step: int = 0
    buffers: dict = field(default_factory=dict)


def global_grad_norm(params):
    total = 0.0
    for param in params.values():
        total += float(np.sum(param.grad**2))
    return float(np.sqrt(total))


def zero_grad(params):
    for param in params.values():
        param.grad = None


def optimizer_step(state: OptimizerState, params: dict):
    """Posodobi parametre na mestu in vrne skupno normo gradienta pred rezanjem."""
    for name, param in params.items():
        if param.grad is None:
            raise MissingGradient(f"parameter {name!r} has no gradient")
    norm = global_grad_norm(params)
    scale = 1.0
    if state.max_grad_norm is not None and norm > state.max_grad_norm:
        scale = state.max_grad_norm / norm
    for name, param in params.items():
        grad = param.grad * scale + state.weight_decay * param.data
        buffer = state.buffers.get(name)
        if buffer is None:
            buffer = np.zeros_like(param.data)
        assert buffer.shape == param.shape, name
        buffer = state.momentum * buffer + grad
        state.buffers[name] = buffer
        ratio = 1.0
        if state.trust_ratio:
            weight_norm = float(np.linalg.norm(param.data))
            update_norm = float(np.linalg.norm(buffer))
            if weight_norm > 0 and update_norm > 0:
                ratio = weight_norm / update_norm
        param.data -= state.lr * ratio * buffer
    state.step += 1
    return norm
