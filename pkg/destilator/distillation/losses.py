"""Cilj destilacije: Pearsonova izguba podobnosti in MSE značilk."""
from dataclasses import dataclass, field

import numpy as np
from tensors import ops
from tensors.autodiff import Tensor

from .queue import SimilarityDistribution

MIN_VARIANCE = 1e-12


class LossError(ValueError):
    pass


def _probs(distribution):
    if isinstance(distribution, SimilarityDistribution):
        return distribution.probs
    return distribution if isinstance(distribution, Tensor) else Tensor(distribution)


def pearson_loss(p_t, p_s):
    """
    Vrne -rho(P^T, P^S), povprečeno po vrsticah paketa. Porazdelitev učitelja
    je konstanta, gradient teče le v P^S.
    """
    teacher = np.atleast_2d(_probs(p_t).data)
    student = _probs(p_s)
    if student.ndim == 1:
        student = student.reshape(1, -1)
    if teacher.shape != student.shape:
        raise LossError(
            f"pearson_loss: distributions of shape {teacher.shape} and {student.shape}"
        )
    if teacher.shape[-1] < 2:
        raise LossError("pearson_loss needs distributions of length >= 2")
    teacher_centered = teacher - teacher.mean(axis=-1, keepdims=True)
    student_centered = student - student.mean(axis=-1, keepdims=True)
    teacher_var = (teacher_centered**2).mean(axis=-1, keepdims=True)
    student_var = (student_centered**2).mean(axis=-1, keepdims=True)
    if np.any(teacher_var <= MIN_VARIANCE) or np.any(student_var.data <= MIN_VARIANCE):
        raise LossError("pearson_loss: correlation undefined for a constant distribution")
    covariance = (student_centered * teacher_centered).mean(axis=-1, keepdims=True)
    rho = covariance / (ops.sqrt(student_var) * np.sqrt(teacher_var))
    return -rho.mean()


def feature_mse(teacher_tokens, student_tokens):
    teacher = np.asarray(
        teacher_tokens.data if isinstance(teacher_tokens, Tensor) else teacher_tokens
    )
    if teacher.shape != student_tokens.shape:
        raise LossError(
            f"feature_mse: teacher tokens {teacher.shape} vs student {student_tokens.shape}"
        )
    return ((student_tokens - teacher) ** 2).mean()


@dataclass(eq=False)
class LossBreakdown:
    l_sim: float
    l_feat: float
    total: float
    weights: tuple = (1.0, 1.0)
    warmup: bool = False
    loss: Tensor = field(default=None, repr=False)

    @classmethod
    def combine(cls, l_sim, l_feat, weights=(1.0, 1.0)):
        """Utežena vsota; brez l_sim (ogrevanje vrste) je člen podobnosti 0."""
        weight_sim, weight_feat = weights
        if l_sim is None:
            loss = weight_feat * l_feat
            return cls(0.0, l_feat.item(), loss.item(), tuple(weights), True, loss)
        loss = weight_sim * l_sim + weight_feat * l_feat
        return cls(l_sim.item(), l_feat.item(), loss.item(), tuple(weights), False, loss)

    def is_finite(self):
        return bool(np.isfinite([self.l_sim, self.l_feat, self.total]).all())


def total_loss(p_t, p_s, t_t, t_s, weights=(1.0, 1.0)):
    l_sim = None if p_t is None or p_s is None else pearson_loss(p_t, p_s)
    return LossBreakdown.combine(l_sim, feature_mse(t_t, t_s), weights)
