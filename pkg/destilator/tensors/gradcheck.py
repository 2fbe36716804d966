from dataclasses import dataclass

import numpy as np

from .autodiff import no_grad, recording


class NonDeterministicFunction(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict
    coordinates: int

    def passed(self, tolerance=1e-4):
        return self.max_rel_error < tolerance


def _named(params):
    if isinstance(params, dict):
        return dict(params)
    return {param.name or f"p{i}": param for i, param in enumerate(params)}


def _evaluate(function):
    with no_grad():
        return float(function().data.sum())


def grad_check(function, params, epsilon=1e-5, sample=32, seed=0, floor=1e-8):
    """
    Primerja gradient vzvratnega prehoda s centralnimi diferencami.

    Pri parametrih z več kot `sample` elementi preveri naključen podvzorec
    koordinat. Relativna napaka je |a - b| / max(|a|, |b|, floor).
    """
    if not 0 < epsilon <= 1e-3:
        raise ValueError(f"epsilon must be in (0, 1e-3], got {epsilon}")
    params = _named(params)
    first, second = _evaluate(function), _evaluate(function)
    if first != second:
        raise NonDeterministicFunction(
            f"two forward passes differ: {first!r} != {second!r}"
        )

    for param in params.values():
        param.grad = None
    with recording() as tape:
        loss = function()
        tape.backward(loss)
    analytic = {
        name: np.zeros_like(param.data) if param.grad is None else param.grad.copy()
        for name, param in params.items()
    }

    rng = np.random.default_rng(seed)
    per_param = {}
    coordinates = 0
    for name, param in params.items():
        if param.size <= sample:
            chosen = np.arange(param.size)
        else:
            chosen = np.sort(rng.choice(param.size, size=sample, replace=False))
        worst = 0.0
        param.data = np.ascontiguousarray(param.data)
        flat = param.data.reshape(-1)
        for i in chosen:
            original = flat[i]
            flat[i] = original + epsilon
            plus = _evaluate(function)
            flat[i] = original - epsilon
            minus = _evaluate(function)
            flat[i] = original
            numeric = (plus - minus) / (2 * epsilon)
            exact = analytic[name].reshape(-1)[i]
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            worst = max(worst, error)
        per_param[name] = worst
        coordinates += len(chosen)
    return GradCheckReport(
        max_rel_error=max(per_param.values(), default=0.0),
        per_param=per_param,
        coordinates=coordinates,
    )
