"""Command-line front end: analysis tables, runs, sweeps, and schedule dumps.

Every command is deterministic per (config, seed) and writes only inside its
run directory. The default output root is ./runs, overridable with --out or
the SPARSEFORGE_OUT environment variable. All tabular output is plain CSV
with a header row so results can be diffed and plotted directly.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import statistics
import sys
from pathlib import Path

import numpy as np

from .accounting import component_reports, report_csv, report_table, sparsity_report
from .distillation import make_teacher
from .errors import ConfigError, RunError, SparseforgeError
from .model import ARCH_PRESETS, build_model, save_checkpoint
from .pruning import SCOPE_PRESETS, Pruner, apply_masks, one_shot_prune, save_masks
from .recipes import PRESET_NAMES, RunConfig, load_recipe, preset, recipe_to_json, save_recipe
from .schedules import lr_at, pruning_timetable, sparsity_at
from .trainer import evaluate, gen_task, gradual_prune, model_copy, train_dense

_DTYPES = {"single": np.float32, "double": np.float64}


def _out_root(args) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get("SPARSEFORGE_OUT", "runs"))


def _load_config(args) -> RunConfig:
    if args.recipe in PRESET_NAMES:
        cfg = preset(args.recipe)
    else:
        cfg = load_recipe(args.recipe)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, recipe=dataclasses.replace(cfg.recipe, seed=args.seed))
    return cfg


def _seeds(args, cfg: RunConfig) -> list[int]:
    if getattr(args, "seeds", None):
        return [int(s) for s in args.seeds.split(",")]
    return [cfg.recipe.seed]


def _train_dense_model(cfg: RunConfig, task, dtype, seed: int | None = None):
    run_seed = cfg.recipe.seed if seed is None else seed
    model = build_model(cfg.arch, seed=run_seed, dropout_rate=0.1, dtype=dtype)
    log = train_dense(
        model,
        task,
        cfg.dense.epochs,
        cfg.dense.schedule(cfg.steps_per_epoch),
        batch_size=cfg.recipe.batch_size,
        seed=run_seed,
    )
    return model, log


def _write_run_dir(run_dir: Path, cfg: RunConfig) -> Path:
    run_dir.mkdir(parents=True, exist_ok=True)
    save_recipe(cfg, run_dir / "recipe.json")
    return run_dir


# ---------------------------------------------------------------------------
# commands


def cmd_analyze(args) -> int:
    if args.arch not in ARCH_PRESETS:
        raise ConfigError(f"unknown architecture '{args.arch}'; options: {', '.join(ARCH_PRESETS)}")
    rows = component_reports(ARCH_PRESETS[args.arch])
    print(report_table(rows))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"analyze_{args.arch}.csv").write_text(report_csv(rows))
        print(f"wrote {out / f'analyze_{args.arch}.csv'}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    dtype = _DTYPES[args.precision]
    task = gen_task(cfg.task)
    model, log = _train_dense_model(cfg, task, dtype)
    run_dir = _write_run_dir(_out_root(args) / f"{cfg.name}-dense-seed{cfg.recipe.seed}", cfg)
    (run_dir / "runlog.csv").write_text(log.to_csv())
    save_checkpoint(model, run_dir / "checkpoint", step=len(log.steps))
    (run_dir / "summary.json").write_text(json.dumps(log.summary, indent=2) + "\n")
    print(f"dense accuracy {log.final_accuracy:.4f}; run directory {run_dir}")
    return 0


def cmd_prune(args) -> int:
    cfg = _load_config(args)
    dtype = _DTYPES[args.precision]
    task = gen_task(cfg.task)
    dense, dense_log = _train_dense_model(cfg, task, dtype)
    teacher = make_teacher(dense) if cfg.recipe.kd is not None else None
    student = model_copy(dense)
    model, masks, log = gradual_prune(student, teacher, cfg.recipe, task)

    run_dir = _write_run_dir(_out_root(args) / f"{cfg.name}-seed{cfg.recipe.seed}", cfg)
    (run_dir / "dense_runlog.csv").write_text(dense_log.to_csv())
    (run_dir / "runlog.csv").write_text(log.to_csv())
    save_checkpoint(model, run_dir / "checkpoint", step=len(log.steps))
    save_masks(masks, run_dir / "masks", cfg.recipe.scope)
    summary = dict(log.summary)
    summary["dense_accuracy"] = dense_log.final_accuracy if dense_log.evals else None
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(
        f"final sparsity {log.summary['encoder_sparsity']:.4f} "
        f"accuracy {log.final_accuracy:.4f}; run directory {run_dir}"
    )
    return 0


def cmd_one_shot(args) -> int:
    cfg = _load_config(args)
    dtype = _DTYPES[args.precision]
    task = gen_task(cfg.task)
    dense, dense_log = _train_dense_model(cfg, task, dtype)
    target = cfg.recipe.sparsity_schedule.s_final
    n = min(cfg.recipe.fisher_samples, len(task[0]))
    fisher_data = (task[0].token_ids[:n], task[0].segment_ids[:n], task[0].labels[:n])
    masks = one_shot_prune(
        dense, cfg.recipe.pruner, target, cfg.recipe.scope,
        fisher_data=fisher_data, num_samples=cfg.recipe.fisher_samples,
    )
    apply_masks(dense, masks)
    acc = evaluate(dense, masks, task[1])

    run_dir = _write_run_dir(_out_root(args) / f"{cfg.name}-oneshot-seed{cfg.recipe.seed}", cfg)
    save_checkpoint(dense, run_dir / "checkpoint")
    save_masks(masks, run_dir / "masks", cfg.recipe.scope)
    report = sparsity_report(dense, masks)
    summary = {
        "dense_accuracy": dense_log.final_accuracy if dense_log.evals else None,
        "one_shot_accuracy": acc,
        "encoder_sparsity": report.encoder_sparsity,
        "in_scope_sparsity": masks.sparsity(),
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"one-shot sparsity {report.encoder_sparsity:.4f} accuracy {acc:.4f}; run directory {run_dir}")
    return 0


_SWEEP_AXES = ("hardness", "temperature", "init_step", "lr")


def _apply_axis(cfg: RunConfig, axis: str, value: float) -> RunConfig:
    r = cfg.recipe
    if axis in ("hardness", "temperature"):
        if r.kd is None:
            raise ConfigError(f"axis '{axis}' needs a recipe with a kd section")
        kd = dataclasses.replace(r.kd, **{axis: value})
        r = dataclasses.replace(r, kd=kd)
    elif axis == "init_step":
        sched = dataclasses.replace(r.sparsity_schedule, s_init=value)
        r = dataclasses.replace(r, sparsity_schedule=sched)
    else:  # lr: move lr_init, keep the init/final ratio
        ratio = r.lr_schedule.lr_final / r.lr_schedule.lr_init if r.lr_schedule.lr_init else 0.0
        lr = dataclasses.replace(r.lr_schedule, lr_init=value, lr_final=value * ratio)
        r = dataclasses.replace(r, lr_schedule=lr)
    return dataclasses.replace(cfg, recipe=r)


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    dtype = _DTYPES[args.precision]
    values = [float(v) for v in args.values.split(",")] if args.values else []
    if not values:
        raise ConfigError("sweep needs a non-empty --values list")
    seeds = _seeds(args, cfg)
    task = gen_task(cfg.task)
    # the dense stage depends only on the seed, so share it across sweep points
    dense_by_seed = {seed: _train_dense_model(cfg, task, dtype, seed=seed)[0] for seed in seeds}

    rows = []
    for value in values:
        point_cfg = _apply_axis(cfg, args.axis, value)
        accs = []
        for seed in seeds:
            recipe = dataclasses.replace(point_cfg.recipe, seed=seed)
            dense = dense_by_seed[seed]
            teacher = make_teacher(dense) if recipe.kd is not None else None
            _, _, log = gradual_prune(model_copy(dense), teacher, recipe, task)
            accs.append((log.final_accuracy, seed))
        med = statistics.median(acc for acc, _ in accs)
        for acc, seed in accs:
            rows.append((value, seed, acc, med))

    out = _out_root(args)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"sweep_{args.axis}.csv"
    lines = [f"{args.axis},seed,final_accuracy,median_accuracy"]
    lines += [f"{v!r},{s},{a!r},{m!r}" for v, s, a, m in rows]
    path.write_text("\n".join(lines) + "\n")
    print(f"wrote {path} ({len(rows)} rows)")
    return 0


def cmd_sensitivity(args) -> int:
    cfg = _load_config(args)
    dtype = _DTYPES[args.precision]
    scopes = args.scopes.split(",") if args.scopes else []
    targets = [float(t) for t in args.targets.split(",")] if args.targets else []
    if not scopes or not targets:
        raise ConfigError("sensitivity needs non-empty --scopes and --targets")
    for scope in scopes:
        if scope not in SCOPE_PRESETS:
            raise ConfigError(f"unknown scope '{scope}'; options: {', '.join(sorted(SCOPE_PRESETS))}")
    pruners = (
        [Pruner.MAGNITUDE, Pruner.DIAGONAL_FISHER] if args.one_shot and args.compare_pruners
        else [cfg.recipe.pruner]
    )
    seeds = _seeds(args, cfg)
    task = gen_task(cfg.task)

    rows = []
    for seed in seeds:
        dense, _ = _train_dense_model(cfg, task, dtype, seed=seed)
        for scope_name in scopes:
            scope = SCOPE_PRESETS[scope_name]
            for target in targets:
                for pruner in pruners:
                    if args.one_shot:
                        model = model_copy(dense)
                        n = min(cfg.recipe.fisher_samples, len(task[0]))
                        masks = one_shot_prune(
                            model, pruner, target, scope,
                            fisher_data=(task[0].token_ids[:n], task[0].segment_ids[:n], task[0].labels[:n]),
                            num_samples=cfg.recipe.fisher_samples,
                        )
                        apply_masks(model, masks)
                        acc = evaluate(model, masks, task[1])
                    else:
                        point = dataclasses.replace(
                            cfg.recipe,
                            scope=scope,
                            pruner=pruner,
                            sparsity_schedule=dataclasses.replace(
                                cfg.recipe.sparsity_schedule, s_final=max(target, 1e-12)
                            ),
                            seed=seed,
                        )
                        teacher = make_teacher(dense) if point.kd is not None else None
                        _, _, log = gradual_prune(model_copy(dense), teacher, point, task)
                        acc = log.final_accuracy
                    rows.append((scope_name, target, seed, pruner.value, acc))

    out = _out_root(args)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "sensitivity.csv"
    lines = ["scope,target,seed,pruner,accuracy"]
    lines += [f"{sc},{t!r},{se},{p},{a!r}" for sc, t, se, p, a in rows]
    path.write_text("\n".join(lines) + "\n")
    print(f"wrote {path} ({len(rows)} rows)")
    return 0


def cmd_schedule_dump(args) -> int:
    cfg = _load_config(args)
    r = cfg.recipe
    spe = cfg.steps_per_epoch
    timetable = pruning_timetable(
        r.total_epochs, spe, r.prune_frequency, r.stabilization_epochs
    )
    prune_index = {s: k for k, s in enumerate(timetable.prune_steps)}
    lines = ["step,lr,sparsity"]
    sparsity = 0.0
    for step in range(r.total_epochs * spe):
        if step in prune_index:
            sparsity = sparsity_at(r.sparsity_schedule, prune_index[step])
        lines.append(f"{step},{lr_at(r.lr_schedule, step)!r},{sparsity!r}")
    out = _out_root(args)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"schedule_{cfg.name}.csv"
    path.write_text("\n".join(lines) + "\n")
    print(f"wrote {path}")
    return 0


def cmd_preset_dump(args) -> int:
    cfg = preset(args.preset)
    text = recipe_to_json(cfg)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{cfg.name}.json").write_text(text)
        print(f"wrote {out / f'{cfg.name}.json'}")
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p: argparse.ArgumentParser, recipe_required: bool = True) -> None:
    p.add_argument("--recipe", required=recipe_required,
                   help="recipe file path or preset name "
                        f"({', '.join(PRESET_NAMES)})")
    p.add_argument("--seed", type=int, default=None, help="override the recipe seed")
    p.add_argument("--seeds", default=None, help="comma-separated seeds for multi-seed commands")
    p.add_argument("--out", default=None, help="output root (default $SPARSEFORGE_OUT or ./runs)")
    p.add_argument("--precision", choices=("single", "double"), default="double")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparseforge",
        description="Gradual-pruning runs, ablation sweeps, and accounting tables.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="parameter/FLOP accounting for an architecture preset")
    p.add_argument("arch", help=f"one of: {', '.join(ARCH_PRESETS)}")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("train", help="dense fine-tuning only")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("prune", help="dense fine-tune, then gradual pruning per the recipe")
    _add_common(p)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("one-shot", help="prune once at the target sparsity, no fine-tuning")
    _add_common(p)
    p.set_defaults(func=cmd_one_shot)

    p = sub.add_parser("sweep", help="ablation sweep over one recipe axis")
    p.add_argument("axis", choices=_SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma-separated axis values")
    _add_common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("sensitivity", help="accuracy vs. pruning scope and target sparsity")
    p.add_argument("--scopes", required=True, help="comma-separated scope presets")
    p.add_argument("--targets", required=True, help="comma-separated sparsity targets")
    p.add_argument("--one-shot", action="store_true", dest="one_shot",
                   help="prune once with no retraining instead of the full recipe")
    p.add_argument("--compare-pruners", action="store_true",
                   help="with --one-shot: emit magnitude and diagonal-Fisher rows")
    _add_common(p)
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("schedule-dump", help="per-step (lr, sparsity) trajectory as CSV")
    _add_common(p)
    p.set_defaults(func=cmd_schedule_dump)

    p = sub.add_parser("preset-dump", help="write a named preset as a recipe file")
    p.add_argument("preset", choices=PRESET_NAMES)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_preset_dump)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SparseforgeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
