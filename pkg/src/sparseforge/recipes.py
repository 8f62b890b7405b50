"""Recipe files: a JSON document describing one full run, plus named presets.

A recipe file pins everything a run needs — architecture, task, the dense
fine-tuning phase, and the pruning phase — so results are reproducible from
the file alone. Parsing is strict: unknown keys are rejected with the full
key path, and every preset round-trips parse -> serialize -> parse exactly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .distillation import KDConfig
from .errors import ConfigError
from .model import ARCH_PRESETS, ArchitectureSpec
from .pruning import SCOPE_PRESETS, Pruner, ScopePolicy
from .schedules import LRKind, LRScheduleSpec, SparsityKind, SparsityScheduleSpec
from .trainer import PruningRecipe, TaskSpec


@dataclass(frozen=True)
class DensePhase:
    """The plain fine-tuning stage that produces the dense model (and teacher)."""

    epochs: int = 10
    lr_init: float = 3e-3
    lr_final: float = 3e-5

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ConfigError(f"dense epochs must be >= 0, got {self.epochs}")

    def schedule(self, steps_per_epoch: int) -> LRScheduleSpec:
        return LRScheduleSpec(
            LRKind.SINGLE_LINEAR,
            self.lr_init,
            self.lr_final,
            max(self.epochs, 1),
            steps_per_epoch,
        )


@dataclass(frozen=True)
class RunConfig:
    """Everything one run needs; maps one-to-one onto the recipe file."""

    name: str
    arch: ArchitectureSpec
    task: TaskSpec
    dense: DensePhase
    recipe: PruningRecipe

    @property
    def steps_per_epoch(self) -> int:
        return self.task.train_size // self.recipe.batch_size


# ---------------------------------------------------------------------------
# strict dict <-> dataclass plumbing


def _take(section: dict, path: str, allowed: dict):
    """Pop known keys with defaults; reject anything left over.

    Unknown keys are reported before missing ones — a typo'd key is usually
    the reason a required one appears missing.
    """
    out = {}
    data = dict(section)
    missing = []
    for key, default in allowed.items():
        if key in data:
            out[key] = data.pop(key)
        elif default is _REQUIRED:
            missing.append(key)
        else:
            out[key] = default
    if data:
        raise ConfigError(f"{path}: unknown key '{sorted(data)[0]}'")
    if missing:
        raise ConfigError(f"{path}: missing required key '{missing[0]}'")
    return out


_REQUIRED = object()


def _enum_from(value: str, enum_cls, path: str):
    for member in enum_cls:
        if member.value == value:
            return member
    options = ", ".join(m.value for m in enum_cls)
    raise ConfigError(f"{path}: '{value}' is not one of {options}")


def _parse_arch(raw, path: str) -> ArchitectureSpec:
    if isinstance(raw, str):
        if raw not in ARCH_PRESETS:
            raise ConfigError(f"{path}: unknown architecture preset '{raw}'")
        return ARCH_PRESETS[raw]
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a preset name or a field mapping")
    fields = {f.name: _REQUIRED for f in dataclasses.fields(ArchitectureSpec)}
    return ArchitectureSpec(**_take(raw, path, fields))


def _serialize_arch(arch: ArchitectureSpec):
    for name, preset in ARCH_PRESETS.items():
        if preset == arch:
            return name
    return dataclasses.asdict(arch)


def _parse_scope(raw, path: str) -> ScopePolicy:
    if not isinstance(raw, str) or raw not in SCOPE_PRESETS:
        options = ", ".join(sorted(SCOPE_PRESETS))
        raise ConfigError(f"{path}: scope must be one of {options}")
    return SCOPE_PRESETS[raw]


def _serialize_scope(scope: ScopePolicy) -> str:
    for name, preset in SCOPE_PRESETS.items():
        if preset == scope:
            return name
    raise ConfigError("only named scope presets can be written to a recipe file")


def parse_recipe(raw: dict) -> RunConfig:
    """Strictly validate a recipe document and build the run configuration."""
    if not isinstance(raw, dict):
        raise ConfigError("recipe document must be a JSON object")
    top = _take(
        raw,
        "recipe",
        {
            "name": _REQUIRED,
            "seed": 0,
            "arch": "tiny",
            "task": {},
            "dense": {},
            "prune": _REQUIRED,
        },
    )
    arch = _parse_arch(top["arch"], "arch")
    task = TaskSpec(**_take(top["task"], "task", {f.name: getattr(TaskSpec, f.name) for f in dataclasses.fields(TaskSpec)}))
    dense = DensePhase(
        **_take(top["dense"], "dense", {f.name: getattr(DensePhase, f.name) for f in dataclasses.fields(DensePhase)})
    )

    p = _take(
        top["prune"],
        "prune",
        {
            "scope": _REQUIRED,
            "pruner": "magnitude",
            "sparsity": _REQUIRED,
            "lr": _REQUIRED,
            "prune_frequency": 10,
            "stabilization_epochs": 2,
            "kd": None,
            "batch_size": 32,
            "fisher_samples": 32,
            "weight_decay": 0.0,
            "adam": {},
        },
    )
    sp = _take(
        p["sparsity"],
        "prune.sparsity",
        {"kind": "cubic", "s_init": _REQUIRED, "s_final": _REQUIRED, "num_pruning_steps": _REQUIRED},
    )
    sparsity = SparsityScheduleSpec(
        _enum_from(sp["kind"], SparsityKind, "prune.sparsity.kind"),
        sp["s_init"],
        sp["s_final"],
        sp["num_pruning_steps"],
    )
    steps_per_epoch = task.train_size // p["batch_size"]
    lr = _take(
        p["lr"],
        "prune.lr",
        {
            "kind": _REQUIRED,
            "lr_init": _REQUIRED,
            "lr_final": _REQUIRED,
            "total_epochs": _REQUIRED,
            "cycle_epochs": 2,
            "warmup_steps": 0,
        },
    )
    lr_schedule = LRScheduleSpec(
        _enum_from(lr["kind"], LRKind, "prune.lr.kind"),
        lr["lr_init"],
        lr["lr_final"],
        lr["total_epochs"],
        steps_per_epoch,
        cycle_epochs=lr["cycle_epochs"],
        warmup_steps=lr["warmup_steps"],
    )
    kd = None
    if p["kd"] is not None:
        kd = KDConfig(
            **_take(
                p["kd"],
                "prune.kd",
                {f.name: getattr(KDConfig, f.name) for f in dataclasses.fields(KDConfig)},
            )
        )
    adam = _take(p["adam"], "prune.adam", {"beta1": 0.9, "beta2": 0.999, "eps": 1e-8})
    recipe = PruningRecipe(
        scope=_parse_scope(p["scope"], "prune.scope"),
        pruner=_enum_from(p["pruner"], Pruner, "prune.pruner"),
        sparsity_schedule=sparsity,
        lr_schedule=lr_schedule,
        prune_frequency=p["prune_frequency"],
        stabilization_epochs=p["stabilization_epochs"],
        kd=kd,
        adam_beta1=adam["beta1"],
        adam_beta2=adam["beta2"],
        adam_eps=adam["eps"],
        weight_decay=p["weight_decay"],
        seed=top["seed"],
        batch_size=p["batch_size"],
        fisher_samples=p["fisher_samples"],
    )
    return RunConfig(name=top["name"], arch=arch, task=task, dense=dense, recipe=recipe)


def serialize_recipe(cfg: RunConfig) -> dict:
    """Inverse of parse_recipe for any config built from named presets."""
    r = cfg.recipe
    doc = {
        "name": cfg.name,
        "seed": r.seed,
        "arch": _serialize_arch(cfg.arch),
        "task": dataclasses.asdict(cfg.task),
        "dense": dataclasses.asdict(cfg.dense),
        "prune": {
            "scope": _serialize_scope(r.scope),
            "pruner": r.pruner.value,
            "sparsity": {
                "kind": r.sparsity_schedule.kind.value,
                "s_init": r.sparsity_schedule.s_init,
                "s_final": r.sparsity_schedule.s_final,
                "num_pruning_steps": r.sparsity_schedule.num_pruning_steps,
            },
            "lr": {
                "kind": r.lr_schedule.kind.value,
                "lr_init": r.lr_schedule.lr_init,
                "lr_final": r.lr_schedule.lr_final,
                "total_epochs": r.lr_schedule.total_epochs,
                "cycle_epochs": r.lr_schedule.cycle_epochs,
                "warmup_steps": r.lr_schedule.warmup_steps,
            },
            "prune_frequency": r.prune_frequency,
            "stabilization_epochs": r.stabilization_epochs,
            "kd": None if r.kd is None else dataclasses.asdict(r.kd),
            "batch_size": r.batch_size,
            "fisher_samples": r.fisher_samples,
            "weight_decay": r.weight_decay,
            "adam": {"beta1": r.adam_beta1, "beta2": r.adam_beta2, "eps": r.adam_eps},
        },
    }
    return doc


def recipe_to_json(cfg: RunConfig) -> str:
    return json.dumps(serialize_recipe(cfg), indent=2) + "\n"


def load_recipe(path: str | Path) -> RunConfig:
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None
    return parse_recipe(raw)


def save_recipe(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(recipe_to_json(cfg))


# ---------------------------------------------------------------------------
# presets


def _gmp_star(name: str, total_epochs: int) -> RunConfig:
    task = TaskSpec()
    steps_per_epoch = task.train_size // 32
    return RunConfig(
        name=name,
        arch=ARCH_PRESETS["tiny"],
        task=task,
        dense=DensePhase(),
        recipe=PruningRecipe(
            scope=SCOPE_PRESETS["encoder-only"],
            pruner=Pruner.MAGNITUDE,
            sparsity_schedule=SparsityScheduleSpec(
                SparsityKind.CUBIC, 0.7, 0.9, 10 * (total_epochs - 4)
            ),
            lr_schedule=LRScheduleSpec(
                LRKind.RECURRING_LINEAR, 1e-4, 1e-6, total_epochs, steps_per_epoch, cycle_epochs=2
            ),
            kd=KDConfig(hardness=1.0, temperature=5.5),
        ),
    )


def _smc_style() -> RunConfig:
    task = TaskSpec()
    steps_per_epoch = task.train_size // 32
    return RunConfig(
        name="smc-style",
        arch=ARCH_PRESETS["tiny"],
        task=task,
        dense=DensePhase(),
        recipe=PruningRecipe(
            scope=SCOPE_PRESETS["smc-style"],
            pruner=Pruner.MAGNITUDE,
            sparsity_schedule=SparsityScheduleSpec(SparsityKind.CUBIC, 0.0, 0.9, 10),
            lr_schedule=LRScheduleSpec(
                LRKind.SINGLE_LINEAR, 3e-3, 3e-5, 3, steps_per_epoch
            ),
            stabilization_epochs=1,
            kd=None,
        ),
    )


def _one_shot() -> RunConfig:
    task = TaskSpec()
    steps_per_epoch = task.train_size // 32
    return RunConfig(
        name="one-shot",
        arch=ARCH_PRESETS["tiny"],
        task=task,
        dense=DensePhase(),
        recipe=PruningRecipe(
            scope=SCOPE_PRESETS["encoder-only"],
            pruner=Pruner.MAGNITUDE,
            sparsity_schedule=SparsityScheduleSpec(SparsityKind.CUBIC, 0.9, 0.9, 1),
            lr_schedule=LRScheduleSpec(
                LRKind.SINGLE_LINEAR, 0.0, 0.0, 3, steps_per_epoch
            ),
            prune_frequency=1,
            stabilization_epochs=1,
            kd=None,
        ),
    )


def preset(name: str) -> RunConfig:
    """Named presets, rebuilt fresh on every call."""
    builders = {
        "gmp-star-10ep": lambda: _gmp_star("gmp-star-10ep", 10),
        "gmp-star-30ep": lambda: _gmp_star("gmp-star-30ep", 30),
        "smc-style": _smc_style,
        "one-shot": _one_shot,
    }
    if name not in builders:
        raise ConfigError(f"unknown preset '{name}'; options: {', '.join(sorted(builders))}")
    return builders[name]()


PRESET_NAMES = ("gmp-star-10ep", "gmp-star-30ep", "smc-style", "one-shot")
