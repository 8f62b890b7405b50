"""Training orchestration: synthetic task, dense fine-tuning, gradual pruning.

The synthetic task is a sequence-classification stand-in sized so that full
runs take seconds: the label is (count of the marker token in the first half
of the sequence + index of the first marker occurrence) mod num_labels, so
solving it requires both token content and token positions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .distillation import KDConfig, kd_loss
from .errors import ConfigError, RunError
from .model import Model, forward
from .pruning import (
    MaskSet,
    Pruner,
    ScopePolicy,
    all_ones_masks,
    apply_masks,
    fisher_scores,
    magnitude_score_set,
    select_prune,
)
from .accounting import Group, sparsity_report
from .schedules import (
    LRScheduleSpec,
    SparsityScheduleSpec,
    Timetable,
    lr_at,
    pruning_timetable,
    sparsity_at,
)
from .tensor import Adam, Tensor, backward

MARKER_TOKEN = 1
EVAL_BATCH = 256

# rng stream tags so shuffle/dropout/init draws never collide
_SHUFFLE_TAG = 101
_DROPOUT_TAG = 202


@dataclass(frozen=True)
class TaskSpec:
    vocab_size: int = 64
    sequence_length: int = 16
    num_labels: int = 4
    train_size: int = 8000
    eval_size: int = 2000
    seed: int = 0

    def __post_init__(self) -> None:
        if self.vocab_size < 4 or self.sequence_length < 4:
            raise ConfigError("task needs vocab_size >= 4 and sequence_length >= 4")
        if self.num_labels < 2:
            raise ConfigError("task needs at least 2 labels")
        if self.train_size < 1 or self.eval_size < 1:
            raise ConfigError("train_size and eval_size must be >= 1")


@dataclass(frozen=True)
class Dataset:
    token_ids: np.ndarray
    segment_ids: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def _labels_from_tokens(tokens: np.ndarray, num_labels: int) -> np.ndarray:
    half = tokens.shape[1] // 2
    is_marker = tokens == MARKER_TOKEN
    count_first_half = is_marker[:, :half].sum(axis=1)
    first_index = np.argmax(is_marker, axis=1)
    return (count_first_half + first_index) % num_labels


def gen_task(spec: TaskSpec) -> tuple[Dataset, Dataset]:
    """Deterministic disjoint train/eval sets; every sequence is unique."""
    rng = np.random.default_rng(spec.seed)
    need = spec.train_size + spec.eval_size
    seq = spec.sequence_length
    seen: set[bytes] = set()
    rows: list[np.ndarray] = []
    while len(rows) < need:
        chunk = max(need - len(rows), 256)
        # fillers uniform over the vocab minus the marker token
        tokens = rng.integers(0, spec.vocab_size - 1, size=(chunk, seq), dtype=np.int64)
        tokens[tokens >= MARKER_TOKEN] += 1
        num_markers = rng.integers(1, 3, size=chunk)  # one or two markers per row
        for r in range(chunk):
            pos = rng.choice(seq, size=int(num_markers[r]), replace=False)
            tokens[r, pos] = MARKER_TOKEN
            key = tokens[r].tobytes()
            if key in seen:
                continue
            seen.add(key)
            rows.append(tokens[r].copy())
            if len(rows) == need:
                break
    all_tokens = np.stack(rows)
    labels = _labels_from_tokens(all_tokens, spec.num_labels)
    half = seq // 2
    segments = np.zeros((need, seq), dtype=np.int64)
    segments[:, half:] = 1

    def cut(lo: int, hi: int) -> Dataset:
        return Dataset(all_tokens[lo:hi], segments[lo:hi], labels[lo:hi])

    return cut(0, spec.train_size), cut(spec.train_size, need)


# ---------------------------------------------------------------------------
# run logging


@dataclass(frozen=True)
class StepRecord:
    step: int
    epoch: int
    lr: float
    encoder_sparsity: float
    train_loss: float


@dataclass(frozen=True)
class EvalRecord:
    step: int
    accuracy: float


@dataclass
class RunLog:
    steps: list[StepRecord] = field(default_factory=list)
    evals: list[EvalRecord] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        """One row per training step; eval accuracy lands on its step's row."""
        eval_at = {e.step: e.accuracy for e in self.evals}
        lines = ["step,epoch,lr,encoder_sparsity,train_loss,eval_accuracy"]
        for r in self.steps:
            acc = repr(eval_at[r.step]) if r.step in eval_at else ""
            lines.append(
                f"{r.step},{r.epoch},{repr(r.lr)},{repr(r.encoder_sparsity)},{repr(r.train_loss)},{acc}"
            )
        return "\n".join(lines) + "\n"

    @property
    def final_accuracy(self) -> float:
        if not self.evals:
            raise RunError("run produced no evaluations")
        return self.evals[-1].accuracy


# ---------------------------------------------------------------------------
# evaluation


def _forward_batched(model: Model, ds: Dataset) -> np.ndarray:
    outs = []
    for lo in range(0, len(ds), EVAL_BATCH):
        logits = forward(model, ds.token_ids[lo : lo + EVAL_BATCH], ds.segment_ids[lo : lo + EVAL_BATCH])
        outs.append(logits.data)
    return np.concatenate(outs, axis=0)


def evaluate(model: Model, masks: MaskSet | None, eval_ds: Dataset) -> float:
    """Argmax accuracy; verifies masked weights are exactly zero first."""
    if masks is not None:
        for name, mask in masks.items():
            if np.any(model.params[name].data[~mask] != 0.0):
                raise RunError(f"masked weights of {name!r} are nonzero at evaluation")
    logits = _forward_batched(model, eval_ds)
    return float(np.mean(np.argmax(logits, axis=1) == eval_ds.labels))


def model_copy(model: Model) -> Model:
    params = {
        name: Tensor(t.data.copy(), requires_grad=t.requires_grad) for name, t in model.params.items()
    }
    return Model(
        model.spec, params, dict(model.tags), model.seed,
        dropout_rate=model.dropout_rate, activation=model.activation,
    )


# ---------------------------------------------------------------------------
# dense training


def _check_finite(loss_value: float, step: int) -> None:
    if not np.isfinite(loss_value):
        raise RunError(f"training loss diverged to {loss_value} at step {step}")


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, _SHUFFLE_TAG, epoch]).permutation(n)


def _dropout_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, _DROPOUT_TAG, step])


def train_dense(
    model: Model,
    task: tuple[Dataset, Dataset],
    epochs: int,
    lr_schedule: LRScheduleSpec,
    batch_size: int = 32,
    seed: int = 0,
) -> RunLog:
    """Plain Adam + cross-entropy fine-tuning; eval at the end of each epoch."""
    train_ds, eval_ds = task
    steps_per_epoch = len(train_ds) // batch_size
    if epochs > 0:
        if lr_schedule.steps_per_epoch != steps_per_epoch:
            raise ConfigError(
                f"lr schedule steps_per_epoch {lr_schedule.steps_per_epoch} != dataset's {steps_per_epoch}"
            )
        if lr_schedule.total_epochs < epochs:
            raise ConfigError(f"lr schedule covers {lr_schedule.total_epochs} epochs, need {epochs}")
    log = RunLog()
    opt = Adam(model.params)
    step = 0
    for epoch in range(epochs):
        order = _epoch_order(seed, epoch, len(train_ds))
        for b in range(steps_per_epoch):
            idx = order[b * batch_size : (b + 1) * batch_size]
            logits = forward(
                model, train_ds.token_ids[idx], train_ds.segment_ids[idx],
                dropout_rng=_dropout_rng(seed, step),
            )
            loss = T.cross_entropy(logits, train_ds.labels[idx])
            loss_value = float(loss.data)
            _check_finite(loss_value, step)
            backward(loss)
            lr = lr_at(lr_schedule, step)
            opt.step(lr)
            opt.zero_grad()
            log.steps.append(StepRecord(step, epoch, lr, 0.0, loss_value))
            step += 1
        log.evals.append(EvalRecord(step - 1, evaluate(model, None, eval_ds)))
    log.summary = {
        "final_accuracy": log.evals[-1].accuracy if log.evals else None,
        "epochs": epochs,
        "steps": step,
    }
    return log


# ---------------------------------------------------------------------------
# gradual pruning


@dataclass(frozen=True)
class PruningRecipe:
    scope: ScopePolicy
    pruner: Pruner
    sparsity_schedule: SparsityScheduleSpec
    lr_schedule: LRScheduleSpec
    prune_frequency: int = 10
    stabilization_epochs: int = 2
    kd: KDConfig | None = None
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    batch_size: int = 32
    fisher_samples: int = 32

    @property
    def total_epochs(self) -> int:
        return self.lr_schedule.total_epochs


def _build_timetable(recipe: PruningRecipe, steps_per_epoch: int) -> Timetable:
    if recipe.lr_schedule.steps_per_epoch != steps_per_epoch:
        raise ConfigError(
            f"lr schedule steps_per_epoch {recipe.lr_schedule.steps_per_epoch} != dataset's {steps_per_epoch}"
        )
    timetable = pruning_timetable(
        recipe.total_epochs, steps_per_epoch, recipe.prune_frequency, recipe.stabilization_epochs
    )
    want = recipe.sparsity_schedule.num_pruning_steps
    if timetable.num_pruning_steps != want:
        raise ConfigError(
            f"sparsity schedule has {want} pruning steps but the timetable produces {timetable.num_pruning_steps}"
        )
    return timetable


def gradual_prune(
    dense_model: Model,
    teacher: Model | None,
    recipe: PruningRecipe,
    task: tuple[Dataset, Dataset],
    on_prune: Callable[[int, int, MaskSet], None] | None = None,
    on_eval: Callable[[int, float, Model, MaskSet], None] | None = None,
) -> tuple[Model, MaskSet, RunLog]:
    """Prune-while-fine-tuning per the recipe; returns the sparse model in place.

    Pruning events fire before the training step of the same index, so the
    final event at the boundary of the last stabilization window leaves that
    whole window mask-fixed.
    """
    if (teacher is None) == (recipe.kd is not None):
        raise ConfigError("teacher must be provided exactly when the recipe has a KD config")
    train_ds, eval_ds = task
    steps_per_epoch = len(train_ds) // recipe.batch_size
    timetable = _build_timetable(recipe, steps_per_epoch)
    prune_index = {s: k for k, s in enumerate(timetable.prune_steps)}

    model = dense_model
    # the teacher is frozen and dropout-free, so its logits per example are
    # constants of the run; compute them once instead of once per epoch
    teacher_logits_all = _forward_batched(teacher, train_ds) if recipe.kd is not None else None
    masks = all_ones_masks(model, recipe.scope)
    opt = Adam(
        model.params,
        beta1=recipe.adam_beta1, beta2=recipe.adam_beta2,
        eps=recipe.adam_eps, weight_decay=recipe.weight_decay,
    )
    log = RunLog()
    encoder_sparsity = sparsity_report(model, masks).encoder_sparsity
    total_steps = recipe.total_epochs * steps_per_epoch

    def fisher_data() -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = min(recipe.fisher_samples, len(train_ds))
        return train_ds.token_ids[:n], train_ds.segment_ids[:n], train_ds.labels[:n]

    for step in range(total_steps):
        epoch = step // steps_per_epoch
        if step in prune_index:
            k = prune_index[step]
            target = sparsity_at(recipe.sparsity_schedule, k)
            if recipe.pruner is Pruner.MAGNITUDE:
                scores = magnitude_score_set(model, recipe.scope, masks)
            else:
                scores = fisher_scores(
                    model, fisher_data(), recipe.fisher_samples, recipe.scope, masks
                )
            masks = select_prune(scores, masks, target, recipe.scope)
            apply_masks(model, masks)
            for name, mask in masks.items():
                opt.zero_state_where(name, ~mask)
            encoder_sparsity = sparsity_report(model, masks).encoder_sparsity
            if on_prune is not None:
                on_prune(step, k, masks)

        if step % steps_per_epoch == 0:
            order = _epoch_order(recipe.seed, epoch, len(train_ds))
        b = step % steps_per_epoch
        idx = order[b * recipe.batch_size : (b + 1) * recipe.batch_size]
        ids, segs = train_ds.token_ids[idx], train_ds.segment_ids[idx]
        logits = forward(model, ids, segs, dropout_rng=_dropout_rng(recipe.seed, step))
        if recipe.kd is not None:
            loss = kd_loss(logits, teacher_logits_all[idx], train_ds.labels[idx], recipe.kd)
        else:
            loss = T.cross_entropy(logits, train_ds.labels[idx])
        loss_value = float(loss.data)
        _check_finite(loss_value, step)
        backward(loss)
        for name, mask in masks.items():
            g = model.params[name].grad
            if g is not None:
                model.params[name].grad = g * mask
        opt.step(lr_at(recipe.lr_schedule, step))
        opt.zero_grad()
        log.steps.append(StepRecord(step, epoch, lr_at(recipe.lr_schedule, step), encoder_sparsity, loss_value))

        if (step + 1) % steps_per_epoch == 0:
            acc = evaluate(model, masks, eval_ds)
            log.evals.append(EvalRecord(step, acc))
            if on_eval is not None:
                on_eval(step, acc, model, masks)

    report = sparsity_report(model, masks)
    log.summary = {
        "final_accuracy": log.evals[-1].accuracy if log.evals else None,
        "encoder_sparsity": report.encoder_sparsity,
        "in_scope_sparsity": masks.sparsity(),
        "density": {g.value: report.density[g] for g in Group},
        "steps": total_steps,
    }
    return model, masks, log
