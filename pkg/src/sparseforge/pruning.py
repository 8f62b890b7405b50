"""Mask management and weight scoring: magnitude and diagonal-Fisher pruners.

Masks are boolean arrays (True = weight kept) keyed by parameter name.
Scores for already-masked weights are forced to -inf so they always rank
lowest and can never be resurrected, which makes gradual masks monotone.

The diagonal-Fisher pruner is a desk-scale, optimal-brain-damage style
approximation of second-order saliency: score = w^2 * F_ii / 2 with F_ii
the mean squared per-example gradient. It is not a blockwise-inverse
second-order method and is never presented as one.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .errors import ConfigError, ScheduleError, ShapeError
from .model import EMBEDDING_TAGS, ComponentTag, Model, forward
from .tensor import Tensor, backward

FISHER_DAMPENING = 1e-8


class Granularity(enum.Enum):
    GLOBAL = "global"
    PER_LAYER_UNIFORM = "per_layer_uniform"


class Pruner(enum.Enum):
    MAGNITUDE = "magnitude"
    DIAGONAL_FISHER = "diagonal_fisher"


@dataclass(frozen=True)
class ScopePolicy:
    """Which component tags are prunable and how thresholds are applied."""

    included_tags: frozenset[ComponentTag]
    granularity: Granularity = Granularity.GLOBAL

    def __post_init__(self) -> None:
        banned = {ComponentTag.LAYER_NORM_PARAM, ComponentTag.BIAS}
        if self.included_tags & banned:
            raise ConfigError("layer-norm parameters and biases are never prunable")
        if not self.included_tags:
            raise ConfigError("scope must include at least one component tag")


ENCODER_ONLY = ScopePolicy(frozenset({ComponentTag.ENCODER_LINEAR}))
SMC_STYLE = ScopePolicy(
    frozenset(EMBEDDING_TAGS | {ComponentTag.ENCODER_LINEAR, ComponentTag.CLASSIFICATION_HEAD}),
    granularity=Granularity.PER_LAYER_UNIFORM,
)
SCOPE_PRESETS = {"encoder-only": ENCODER_ONLY, "smc-style": SMC_STYLE}


class MaskSet(dict):
    """name -> bool array (True = kept). Plain mapping plus small helpers."""

    def copy(self) -> "MaskSet":
        return MaskSet({k: v.copy() for k, v in self.items()})

    def num_total(self) -> int:
        return sum(m.size for m in self.values())

    def num_kept(self) -> int:
        return sum(int(m.sum()) for m in self.values())

    def sparsity(self) -> float:
        n = self.num_total()
        return 1.0 - self.num_kept() / n if n else 0.0


def scoped_params(model: Model, policy: ScopePolicy) -> dict[str, Tensor]:
    return {n: t for n, t in model.params.items() if model.tags[n] in policy.included_tags}


def all_ones_masks(model: Model, policy: ScopePolicy) -> MaskSet:
    return MaskSet(
        {n: np.ones(t.data.shape, dtype=bool) for n, t in scoped_params(model, policy).items()}
    )


# ---------------------------------------------------------------------------
# scoring


def magnitude_scores(weights: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """|w|, with masked entries at -inf so they stay pruned."""
    scores = np.abs(np.asarray(weights, dtype=np.float64))
    if mask is not None:
        scores = np.where(mask, scores, -np.inf)
    return scores


def diagonal_fisher(
    params: dict[str, Tensor],
    example_losses: Iterable[Callable[[], Tensor]],
) -> dict[str, np.ndarray]:
    """Mean squared per-example gradient for each parameter (empirical Fisher diag)."""
    acc = {n: np.zeros_like(t.data, dtype=np.float64) for n, t in params.items()}
    count = 0
    for loss_fn in example_losses:
        for t in params.values():
            t.zero_grad()
        backward(loss_fn())
        for n, t in params.items():
            if t.grad is not None:
                acc[n] += np.asarray(t.grad, dtype=np.float64) ** 2
        count += 1
    if count == 0:
        raise ConfigError("diagonal_fisher needs at least one example")
    for t in params.values():
        t.zero_grad()
    return {n: a / count for n, a in acc.items()}


def obd_scores(
    weights: np.ndarray,
    fisher_diag: np.ndarray,
    mask: np.ndarray | None = None,
    dampening: float = FISHER_DAMPENING,
) -> np.ndarray:
    """Optimal-brain-damage saliency w^2 * F / 2, Fisher dampened for tie stability."""
    w = np.asarray(weights, dtype=np.float64)
    scores = w * w * (np.asarray(fisher_diag, dtype=np.float64) + dampening) / 2.0
    if mask is not None:
        scores = np.where(mask, scores, -np.inf)
    return scores


def fisher_scores(
    model: Model,
    data: tuple[np.ndarray, np.ndarray, np.ndarray],
    num_samples: int,
    policy: ScopePolicy = ENCODER_ONLY,
    masks: MaskSet | None = None,
    dampening: float = FISHER_DAMPENING,
) -> dict[str, np.ndarray]:
    """OBD saliencies over the in-scope parameters of a classifier model.

    data = (token_ids, segment_ids, labels); the first num_samples examples
    feed one single-example cross-entropy backward pass each (dropout off).
    """
    if num_samples < 1:
        raise ConfigError(f"num_samples must be >= 1, got {num_samples}")
    token_ids, segment_ids, labels = data
    if len(token_ids) == 0:
        raise ConfigError("fisher_scores given empty data")
    n = min(num_samples, len(token_ids))
    params = scoped_params(model, policy)

    def example(i: int) -> Callable[[], Tensor]:
        return lambda: T.cross_entropy(
            forward(model, token_ids[i : i + 1], segment_ids[i : i + 1]), labels[i : i + 1]
        )

    fisher = diagonal_fisher(params, (example(i) for i in range(n)))
    return {
        name: obd_scores(
            params[name].data, fisher[name], None if masks is None else masks.get(name), dampening
        )
        for name in params
    }


def magnitude_score_set(model: Model, policy: ScopePolicy, masks: MaskSet | None = None) -> dict[str, np.ndarray]:
    return {
        n: magnitude_scores(t.data, None if masks is None else masks.get(n))
        for n, t in scoped_params(model, policy).items()
    }


# ---------------------------------------------------------------------------
# selection


def select_prune(
    scores: dict[str, np.ndarray],
    masks: MaskSet,
    target: float,
    policy: ScopePolicy,
) -> MaskSet:
    """New masks with the lowest-scored in-scope weights zeroed to hit `target`.

    The number of zeros after selection is exactly floor(target * N) for the
    global granularity (per tensor for PER_LAYER_UNIFORM). Already-masked
    weights are ranked at -inf, so they are always re-selected first and the
    result is monotone w.r.t. the input masks. Ties break by (parameter name,
    flat index) ascending via a stable sort over name-sorted concatenation.
    """
    if not 0.0 <= target <= 1.0:
        raise ScheduleError(f"target sparsity {target} outside [0, 1]")
    missing = set(masks) - set(scores)
    if missing:
        raise ConfigError(f"scores missing for masked parameters: {sorted(missing)}")
    for name, mask in masks.items():
        if scores[name].shape != mask.shape:
            raise ShapeError(f"score shape {scores[name].shape} != mask shape {mask.shape} for {name!r}")

    current = masks.sparsity()
    new_masks = masks.copy()
    names = sorted(masks)

    if policy.granularity is Granularity.GLOBAL:
        total = masks.num_total()
        budget = int(np.floor(target * total))
        zeros_now = total - masks.num_kept()
        if budget < zeros_now:
            raise ScheduleError(
                f"target {target} below current sparsity {current:.6f} (masks are monotone)"
            )
        if budget == zeros_now:
            return new_masks
        flat = np.concatenate(
            [np.where(masks[n].ravel(), scores[n].ravel(), -np.inf) for n in names]
        )
        order = np.argsort(flat, kind="stable")
        kill = order[:budget]
        keep_flat = np.ones(total, dtype=bool)
        keep_flat[kill] = False
        offset = 0
        for n in names:
            size = masks[n].size
            new_masks[n] = keep_flat[offset : offset + size].reshape(masks[n].shape)
            offset += size
    else:
        for n in names:
            size = masks[n].size
            budget = int(np.floor(target * size))
            zeros_now = size - int(masks[n].sum())
            if budget < zeros_now:
                raise ScheduleError(
                    f"target {target} below current sparsity of tensor {n!r} (masks are monotone)"
                )
            if budget == zeros_now:
                continue
            flat = np.where(masks[n].ravel(), scores[n].ravel(), -np.inf)
            order = np.argsort(flat, kind="stable")
            keep = np.ones(size, dtype=bool)
            keep[order[:budget]] = False
            new_masks[n] = keep.reshape(masks[n].shape)
    return new_masks


def apply_masks(model: Model, masks: MaskSet) -> None:
    """Zero masked weights in place. Gradients are masked by the training loop."""
    for name, mask in masks.items():
        if name not in model.params:
            raise ShapeError(f"mask for unknown parameter {name!r}")
        t = model.params[name]
        if mask.shape != t.data.shape:
            raise ShapeError(f"mask shape {mask.shape} != parameter shape {t.data.shape} for {name!r}")
        t.data = np.where(mask, t.data, np.zeros((), dtype=t.data.dtype))


def one_shot_prune(
    model: Model,
    pruner: Pruner,
    target: float,
    policy: ScopePolicy,
    fisher_data: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
    num_samples: int = 128,
    dampening: float = FISHER_DAMPENING,
) -> MaskSet:
    """Single selection from all-ones masks; no training happens here."""
    masks = all_ones_masks(model, policy)
    if pruner is Pruner.MAGNITUDE:
        scores = magnitude_score_set(model, policy, masks)
    else:
        if fisher_data is None:
            raise ConfigError("diagonal-Fisher one-shot pruning needs fisher_data")
        scores = fisher_scores(model, fisher_data, num_samples, policy, masks, dampening)
    return select_prune(scores, masks, target, policy)


# ---------------------------------------------------------------------------
# bit-packed mask checkpoints


def save_masks(
    masks: MaskSet,
    path: str | Path,
    policy: ScopePolicy,
    step: int = 0,
) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, mask in masks.items():
        fname = name.replace(".", "_") + ".mask.bin"
        (out / fname).write_bytes(np.packbits(mask.ravel()).tobytes())
        entries[name] = {"file": fname, "shape": list(mask.shape)}
    manifest = {
        "format": 1,
        "step": step,
        "achieved_sparsity": masks.sparsity(),
        "policy": {
            "included_tags": sorted(t.value for t in policy.included_tags),
            "granularity": policy.granularity.value,
        },
        "masks": entries,
    }
    (out / "masks.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load_masks(path: str | Path) -> tuple[MaskSet, dict]:
    src = Path(path)
    manifest = json.loads((src / "masks.json").read_text())
    masks = MaskSet()
    for name, entry in manifest["masks"].items():
        packed = np.frombuffer((src / entry["file"]).read_bytes(), dtype=np.uint8)
        size = int(np.prod(entry["shape"]))
        masks[name] = np.unpackbits(packed, count=size).astype(bool).reshape(entry["shape"])
    return masks, manifest
