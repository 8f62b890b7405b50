"""Sparsity schedules, learning-rate schedules, and the pruning-step timetable.

Everything here is a pure function of (spec, step index), so schedules can be
dumped, plotted, and unit-tested without touching a model.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .errors import ConfigError, ScheduleError


class SparsityKind(enum.Enum):
    LINEAR = "linear"
    CUBIC = "cubic"


class LRKind(enum.Enum):
    RECURRING_LINEAR = "recurring_linear"
    SINGLE_LINEAR = "single_linear"
    LINEAR_WITH_WARMUP = "linear_with_warmup"


@dataclass(frozen=True)
class SparsityScheduleSpec:
    """Sparsity target as a function of pruning-step index.

    An "accelerated" schedule is one with s_init > 0: the very first pruning
    step jumps straight to a high sparsity (e.g. 0.5 or 0.7) instead of
    ramping up from zero. s_init = 0 recovers the conventional shape.
    """

    kind: SparsityKind
    s_init: float
    s_final: float
    num_pruning_steps: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.s_init < 1.0:
            raise ConfigError(f"s_init must be in [0, 1), got {self.s_init}")
        if not 0.0 < self.s_final <= 1.0:
            raise ConfigError(f"s_final must be in (0, 1], got {self.s_final}")
        if self.s_init > self.s_final:
            raise ConfigError(f"s_init {self.s_init} exceeds s_final {self.s_final}")
        if self.num_pruning_steps < 1:
            raise ConfigError(f"num_pruning_steps must be >= 1, got {self.num_pruning_steps}")


@dataclass(frozen=True)
class LRScheduleSpec:
    """Learning rate as a function of global training step.

    RECURRING_LINEAR replays one short linear-decay fine-tuning schedule per
    cycle: within each cycle of cycle_epochs * steps_per_epoch steps the rate
    falls affinely from lr_init toward lr_final, then rewinds to lr_init at
    the next cycle start. SINGLE_LINEAR decays once over the whole run.
    LINEAR_WITH_WARMUP ramps up over warmup_steps, then decays to the end.
    """

    kind: LRKind
    lr_init: float
    lr_final: float
    total_epochs: int
    steps_per_epoch: int
    cycle_epochs: int = 2
    warmup_steps: int = 0

    def __post_init__(self) -> None:
        if self.lr_init < 0.0:
            # lr_init = 0 (with lr_final = 0) is the frozen-weights degenerate case
            raise ConfigError(f"lr_init must be >= 0, got {self.lr_init}")
        if self.lr_final < 0.0:
            raise ConfigError(f"lr_final must be >= 0, got {self.lr_final}")
        if self.lr_final > self.lr_init:
            raise ConfigError(f"lr_final {self.lr_final} exceeds lr_init {self.lr_init}")
        if self.total_epochs < 1 or self.steps_per_epoch < 1:
            raise ConfigError("total_epochs and steps_per_epoch must be >= 1")
        if self.kind is LRKind.RECURRING_LINEAR:
            if self.cycle_epochs < 1:
                raise ConfigError(f"cycle_epochs must be >= 1, got {self.cycle_epochs}")
            if self.total_epochs % self.cycle_epochs != 0:
                raise ConfigError(
                    f"total_epochs {self.total_epochs} not divisible by cycle_epochs {self.cycle_epochs}"
                )
        if self.kind is LRKind.LINEAR_WITH_WARMUP:
            if not 0 < self.warmup_steps < self.total_epochs * self.steps_per_epoch:
                raise ConfigError(f"warmup_steps must be in (0, total steps), got {self.warmup_steps}")

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch


@dataclass(frozen=True)
class Timetable:
    """Global step indices at which pruning fires, plus the phase layout.

    No pruning steps fall inside the first or last stabilization_epochs; the
    final pruning step lands exactly at the start of the last stabilization
    window, so the model gets a full window of pure fine-tuning at the final
    sparsity with masks fixed.
    """

    prune_steps: tuple[int, ...]
    stabilization_epochs: int = 2
    prune_frequency: int = 10
    steps_per_epoch: int = field(default=0)
    total_epochs: int = field(default=0)

    @property
    def num_pruning_steps(self) -> int:
        return len(self.prune_steps)


def sparsity_at(spec: SparsityScheduleSpec, k: int) -> float:
    """Sparsity target for pruning step k (0-based), in [s_init, s_final]."""
    K = spec.num_pruning_steps
    if not 0 <= k <= K - 1:
        raise ScheduleError(f"pruning-step index {k} outside [0, {K - 1}]")
    if K == 1 or k == K - 1:
        return spec.s_final
    if k == 0:
        # returned directly: the interpolation forms can lose the endpoint to
        # float cancellation when s_init is tiny relative to s_final
        return spec.s_init
    progress = k / (K - 1)
    if spec.kind is SparsityKind.CUBIC:
        return spec.s_final + (spec.s_init - spec.s_final) * (1.0 - progress) ** 3
    return spec.s_init + (spec.s_final - spec.s_init) * progress


def lr_at(spec: LRScheduleSpec, global_step: int) -> float:
    """Learning rate for the given global step (0-based)."""
    if not 0 <= global_step < spec.total_steps:
        raise ScheduleError(f"step {global_step} outside [0, {spec.total_steps})")
    if spec.kind is LRKind.RECURRING_LINEAR:
        cycle_len = spec.cycle_epochs * spec.steps_per_epoch
        c = global_step % cycle_len
        return spec.lr_init + (spec.lr_final - spec.lr_init) * (c / cycle_len)
    if spec.kind is LRKind.SINGLE_LINEAR:
        return spec.lr_init + (spec.lr_final - spec.lr_init) * (global_step / spec.total_steps)
    # warmup: affine lr_final -> lr_init over warmup_steps, then affine decay
    if global_step < spec.warmup_steps:
        up = (global_step + 1) / spec.warmup_steps
        return spec.lr_final + (spec.lr_init - spec.lr_final) * up
    span = spec.total_steps - spec.warmup_steps
    down = (global_step - spec.warmup_steps + 1) / span
    return spec.lr_init + (spec.lr_final - spec.lr_init) * down


def pruning_timetable(
    total_epochs: int,
    steps_per_epoch: int,
    prune_frequency: int = 10,
    stabilization_epochs: int = 2,
) -> Timetable:
    """Evenly spaced pruning steps between the two stabilization windows.

    K = prune_frequency * (total_epochs - 2 * stabilization_epochs) steps at
    interval steps_per_epoch / prune_frequency, starting one interval after
    the first stabilization window ends. Pruning fires before the training
    step of the same index, so the last step (at the boundary of the final
    window) still leaves the whole window mask-fixed.
    """
    if stabilization_epochs < 1:
        # with no trailing window the last pruning step would land past the
        # final training step and never fire
        raise ConfigError(f"stabilization_epochs must be >= 1, got {stabilization_epochs}")
    if total_epochs <= 2 * stabilization_epochs:
        raise ConfigError(
            f"total_epochs {total_epochs} must exceed 2 * stabilization_epochs {stabilization_epochs}"
        )
    if prune_frequency < 1 or steps_per_epoch < prune_frequency:
        raise ConfigError(
            f"prune_frequency must be in [1, steps_per_epoch], got {prune_frequency} with {steps_per_epoch} steps/epoch"
        )
    if steps_per_epoch % prune_frequency != 0:
        raise ConfigError(
            f"steps_per_epoch {steps_per_epoch} not divisible by prune_frequency {prune_frequency}"
        )
    K = prune_frequency * (total_epochs - 2 * stabilization_epochs)
    interval = steps_per_epoch // prune_frequency
    start = stabilization_epochs * steps_per_epoch
    steps = tuple(start + k * interval for k in range(1, K + 1))
    return Timetable(
        prune_steps=steps,
        stabilization_epochs=stabilization_epochs,
        prune_frequency=prune_frequency,
        steps_per_epoch=steps_per_epoch,
        total_epochs=total_epochs,
    )
