"""Per-component parameter and FLOP accounting, plus live sparsity reports.

Counting convention: linear weights only (biases, layer-norm excluded);
one multiply-accumulate = 2 FLOPs, forward pass, per token; embedding
lookups cost 0 FLOPs. Attention score/context products are excluded since
they carry no weights.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import ShapeError
from .model import EMBEDDING_TAGS, ArchitectureSpec, ComponentTag, Model


class Group(enum.Enum):
    EMBEDDINGS = "embeddings"
    ENCODER = "encoder"
    HEAD = "head"


_GROUP_TAGS = {
    Group.EMBEDDINGS: EMBEDDING_TAGS,
    Group.ENCODER: frozenset({ComponentTag.ENCODER_LINEAR}),
    Group.HEAD: frozenset({ComponentTag.CLASSIFICATION_HEAD}),
}


def group_of(tag: ComponentTag) -> Group | None:
    """Accounting group for a tag; None for biases and layer-norm params."""
    for group, tags in _GROUP_TAGS.items():
        if tag in tags:
            return group
    return None


def param_count(spec: ArchitectureSpec, group: Group) -> int:
    if group is Group.EMBEDDINGS:
        return (spec.vocab_size + spec.max_positions + spec.num_segments) * spec.hidden_dim
    if group is Group.ENCODER:
        H, F = spec.hidden_dim, spec.ffn_dim
        return spec.num_layers * (4 * H * H + 2 * H * F)
    return spec.hidden_dim * spec.num_labels


def flop_count(spec: ArchitectureSpec, group: Group) -> int:
    if group is Group.EMBEDDINGS:
        return 0
    return 2 * param_count(spec, group)


@dataclass(frozen=True)
class ComponentReport:
    component: Group
    param_count: int
    flops_per_token: int
    fraction_of_total_params: float
    fraction_of_total_flops: float


def component_reports(spec: ArchitectureSpec) -> list[ComponentReport]:
    """One row per group, fractions normalized over the three groups."""
    params = {g: param_count(spec, g) for g in Group}
    flops = {g: flop_count(spec, g) for g in Group}
    total_p = sum(params.values())
    total_f = sum(flops.values())
    return [
        ComponentReport(
            component=g,
            param_count=params[g],
            flops_per_token=flops[g],
            fraction_of_total_params=params[g] / total_p,
            fraction_of_total_flops=flops[g] / total_f,
        )
        for g in Group
    ]


@dataclass(frozen=True)
class SparsityReport:
    density: dict[Group, float]
    encoder_sparsity: float
    effective_flops: dict[Group, int]


def sparsity_report(model: Model, masks: Mapping[str, np.ndarray]) -> SparsityReport:
    """Per-group density from masks; tensors without a mask count as dense."""
    for name, mask in masks.items():
        if name not in model.params:
            raise ShapeError(f"mask for unknown parameter {name!r}")
        if mask.shape != model.params[name].data.shape:
            raise ShapeError(
                f"mask shape {mask.shape} != parameter shape {model.params[name].data.shape} for {name!r}"
            )
    kept: dict[Group, int] = {g: 0 for g in Group}
    total: dict[Group, int] = {g: 0 for g in Group}
    for name, t in model.params.items():
        group = group_of(model.tags[name])
        if group is None:
            continue
        n = t.data.size
        total[group] += n
        kept[group] += int(masks[name].sum()) if name in masks else n
    density = {g: (kept[g] / total[g] if total[g] else 1.0) for g in Group}
    effective = {
        g: int(round(flop_count(model.spec, g) * density[g])) for g in Group
    }
    return SparsityReport(
        density=density,
        encoder_sparsity=1.0 - density[Group.ENCODER],
        effective_flops=effective,
    )


# ---------------------------------------------------------------------------
# rendering


def report_csv(rows: list[ComponentReport]) -> str:
    lines = ["component,param_count,flops_per_token,fraction_of_total_params,fraction_of_total_flops"]
    for r in rows:
        lines.append(
            f"{r.component.value},{r.param_count},{r.flops_per_token},"
            f"{repr(r.fraction_of_total_params)},{repr(r.fraction_of_total_flops)}"
        )
    return "\n".join(lines) + "\n"


def report_table(rows: list[ComponentReport]) -> str:
    """Aligned text table with millions-scaled counts for eyeballing."""
    header = f"{'component':<12} {'params':>14} {'params(M)':>10} {'flops/token':>14} {'flops(M)':>10}"
    out = [header, "-" * len(header)]
    for r in rows:
        out.append(
            f"{r.component.value:<12} {r.param_count:>14,} {r.param_count / 1e6:>10.3f} "
            f"{r.flops_per_token:>14,} {r.flops_per_token / 1e6:>10.3f}"
        )
    return "\n".join(out) + "\n"
