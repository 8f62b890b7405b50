"""Knowledge-distillation loss: hardness-mixed CE + temperature-softened KL."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .model import Model
from .tensor import Tensor


@dataclass(frozen=True)
class KDConfig:
    """hardness h mixes CE and KL; temperature T softens both distributions.

    squared_temperature_scaling multiplies the KL term by T^2 (the standard
    convention that keeps its gradient magnitude comparable across
    temperatures); it can be turned off to get the bare KL mixing rule.
    """

    hardness: float = 1.0
    temperature: float = 5.5
    squared_temperature_scaling: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.hardness <= 1.0:
            raise ConfigError(f"hardness must be in [0, 1], got {self.hardness}")
        if self.temperature <= 0.0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")


def soften(logits: Tensor, temperature: float) -> Tensor:
    """softmax(logits / T): T=1 is plain softmax, large T approaches uniform."""
    if temperature <= 0.0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    return T.softmax(logits * (1.0 / temperature), axis=-1)


def kd_loss(
    student_logits: Tensor,
    teacher_logits: Tensor | np.ndarray,
    labels: np.ndarray,
    cfg: KDConfig,
) -> Tensor:
    """(1-h) * CE(student, labels) + h * [T^2] * KL(soften(teacher) || soften(student)).

    The teacher side is gradient-isolated: no graph is built through it.
    """
    teacher_data = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if teacher_data.shape != student_logits.data.shape:
        raise ShapeError(
            f"teacher logits shape {teacher_data.shape} != student shape {student_logits.data.shape}"
        )
    h = cfg.hardness
    # skip absent terms entirely so the boundary cases are bitwise exact
    if h == 0.0:
        return T.cross_entropy(student_logits, labels)
    teacher_probs = soften(Tensor(teacher_data), cfg.temperature)
    kl = T.kl_divergence(teacher_probs, soften(student_logits, cfg.temperature))
    if cfg.squared_temperature_scaling:
        kl = kl * (cfg.temperature**2)
    if h == 1.0:
        return kl
    return T.cross_entropy(student_logits, labels) * (1.0 - h) + kl * h


def make_teacher(model: Model) -> Model:
    """Frozen copy: parameters detached from training, dropout disabled."""
    params = {name: Tensor(t.data.copy(), requires_grad=False) for name, t in model.params.items()}
    return Model(
        model.spec, params, dict(model.tags), model.seed,
        dropout_rate=0.0, activation=model.activation,
    )
