"""Training-loop tests: task generation, dense training, gradual pruning.

Most cases run on a deliberately small task (256 train / 128 eval rows,
8 steps per epoch) so the whole file stays in the seconds range; accuracy
claims that need the full-size task live in test_acceptance.py.
"""

from __future__ import annotations

import numpy as np
import pytest

from sparseforge.distillation import KDConfig, make_teacher
from sparseforge.errors import ConfigError, RunError
from sparseforge.model import TINY, build_model
from sparseforge.pruning import ENCODER_ONLY, Pruner, all_ones_masks, one_shot_prune
from sparseforge.schedules import (
    LRKind,
    LRScheduleSpec,
    SparsityKind,
    SparsityScheduleSpec,
    sparsity_at,
)
from sparseforge.trainer import (
    Dataset,
    MARKER_TOKEN,
    PruningRecipe,
    TaskSpec,
    evaluate,
    gen_task,
    gradual_prune,
    model_copy,
    train_dense,
)

MINI_TASK = TaskSpec(train_size=256, eval_size=128)


def mini_lr(kind=LRKind.SINGLE_LINEAR, lr0=1e-3, lr1=1e-5, epochs=3, cycle_epochs=1):
    return LRScheduleSpec(kind, lr0, lr1, epochs, steps_per_epoch=8, cycle_epochs=cycle_epochs)


def mini_recipe(**overrides):
    defaults = dict(
        scope=ENCODER_ONLY,
        pruner=Pruner.MAGNITUDE,
        sparsity_schedule=SparsityScheduleSpec(SparsityKind.CUBIC, 0.5, 0.9, 4),
        lr_schedule=mini_lr(epochs=4),
        prune_frequency=2,
        stabilization_epochs=1,
        seed=0,
    )
    defaults.update(overrides)
    return PruningRecipe(**defaults)


# ---------------------------------------------------------------------------
# task generation


class TestGenTask:
    def test_same_seed_identical(self):
        a_train, a_eval = gen_task(MINI_TASK)
        b_train, b_eval = gen_task(MINI_TASK)
        np.testing.assert_array_equal(a_train.token_ids, b_train.token_ids)
        np.testing.assert_array_equal(a_train.labels, b_train.labels)
        np.testing.assert_array_equal(a_eval.token_ids, b_eval.token_ids)

    def test_different_seed_differs(self):
        a_train, _ = gen_task(MINI_TASK)
        b_train, _ = gen_task(TaskSpec(train_size=256, eval_size=128, seed=7))
        assert not np.array_equal(a_train.token_ids, b_train.token_ids)

    def test_shapes_and_sizes(self):
        train, eval_ds = gen_task(MINI_TASK)
        assert train.token_ids.shape == (256, 16)
        assert eval_ds.token_ids.shape == (128, 16)
        assert train.segment_ids.shape == (256, 16)
        assert train.labels.shape == (256,)

    def test_train_eval_disjoint(self):
        train, eval_ds = gen_task(TaskSpec(train_size=2000, eval_size=500))
        train_keys = {row.tobytes() for row in train.token_ids}
        eval_keys = {row.tobytes() for row in eval_ds.token_ids}
        assert not (train_keys & eval_keys)

    def test_all_rows_unique(self):
        train, eval_ds = gen_task(MINI_TASK)
        rows = np.concatenate([train.token_ids, eval_ds.token_ids])
        assert len({r.tobytes() for r in rows}) == len(rows)

    def test_label_distribution_within_20pct_of_uniform(self):
        # [oracle: empirical count at N=10000]
        train, eval_ds = gen_task(TaskSpec(train_size=8000, eval_size=2000))
        labels = np.concatenate([train.labels, eval_ds.labels])
        counts = np.bincount(labels, minlength=4)
        expected = len(labels) / 4
        assert counts.min() >= 0.8 * expected
        assert counts.max() <= 1.2 * expected

    def test_label_formula(self):
        # label = (marker count in first half + first marker index) mod num_labels
        train, eval_ds = gen_task(MINI_TASK)
        for ds in (train, eval_ds):
            half = ds.token_ids.shape[1] // 2
            is_marker = ds.token_ids == MARKER_TOKEN
            expect = (is_marker[:, :half].sum(axis=1) + np.argmax(is_marker, axis=1)) % 4
            np.testing.assert_array_equal(ds.labels, expect)

    def test_every_row_has_a_marker(self):
        train, eval_ds = gen_task(MINI_TASK)
        assert np.all((train.token_ids == MARKER_TOKEN).any(axis=1))
        assert np.all((eval_ds.token_ids == MARKER_TOKEN).any(axis=1))

    def test_labels_depend_on_position(self):
        # same multiset of tokens, marker moved -> label changes
        tokens = np.array([[MARKER_TOKEN, 5, 6, 7, 8, 9, 10, 11],
                           [5, MARKER_TOKEN, 6, 7, 8, 9, 10, 11]])
        from sparseforge.trainer import _labels_from_tokens

        labels = _labels_from_tokens(tokens, 4)
        assert labels[0] != labels[1]

    def test_segments_split_at_half(self):
        train, _ = gen_task(MINI_TASK)
        assert np.all(train.segment_ids[:, :8] == 0)
        assert np.all(train.segment_ids[:, 8:] == 1)

    def test_invalid_specs_rejected(self):
        with pytest.raises(ConfigError):
            TaskSpec(vocab_size=2)
        with pytest.raises(ConfigError):
            TaskSpec(num_labels=1)
        with pytest.raises(ConfigError):
            TaskSpec(train_size=0)


# ---------------------------------------------------------------------------
# evaluation


class TestEvaluate:
    def test_random_model_near_chance(self):
        task = gen_task(TaskSpec(train_size=8, eval_size=2000))
        model = build_model(TINY, seed=3)
        acc = evaluate(model, None, task[1])
        assert abs(acc - 0.25) < 0.05

    def test_deterministic(self):
        task = gen_task(MINI_TASK)
        model = build_model(TINY, seed=0)
        assert evaluate(model, None, task[1]) == evaluate(model, None, task[1])

    def test_nonzero_masked_weight_rejected(self):
        task = gen_task(MINI_TASK)
        model = build_model(TINY, seed=0)
        masks = all_ones_masks(model, ENCODER_ONLY)
        name = next(iter(masks))
        masks[name] = masks[name].copy()
        masks[name].flat[0] = False  # weight itself still nonzero
        with pytest.raises(RunError, match="masked weights"):
            evaluate(model, masks, task[1])

    def test_model_copy_is_deep(self):
        model = build_model(TINY, seed=0)
        clone = model_copy(model)
        clone.params["head.w"].data += 1.0
        assert not np.array_equal(clone.params["head.w"].data, model.params["head.w"].data)


# ---------------------------------------------------------------------------
# dense training


class TestTrainDense:
    def test_zero_epochs_leaves_model_unchanged(self):
        task = gen_task(MINI_TASK)
        model = build_model(TINY, seed=0)
        before = {n: p.data.copy() for n, p in model.params.items()}
        log = train_dense(model, task, 0, mini_lr(), seed=0)
        for n, p in model.params.items():
            np.testing.assert_array_equal(p.data, before[n])
        assert log.steps == [] and log.evals == []

    def test_fixed_seed_bit_identical_runlog(self):
        task = gen_task(MINI_TASK)
        log_a = train_dense(build_model(TINY, seed=0), task, 2, mini_lr(epochs=2), seed=0)
        log_b = train_dense(build_model(TINY, seed=0), task, 2, mini_lr(epochs=2), seed=0)
        assert log_a.to_csv() == log_b.to_csv()

    def test_loss_decreases(self):
        task = gen_task(MINI_TASK)
        model = build_model(TINY, seed=0, dropout_rate=0.0)
        log = train_dense(model, task, 3, mini_lr(), seed=0)
        first = np.mean([r.train_loss for r in log.steps[:8]])
        last = np.mean([r.train_loss for r in log.steps[-8:]])
        assert last < first

    def test_divergence_raises_run_error(self):
        # layer norm keeps activations bounded at any sane rate, so force an
        # overflow-scale step: weights land near 1e200 and the matmuls go inf
        task = gen_task(MINI_TASK)
        model = build_model(TINY, seed=0)
        with np.errstate(all="ignore"), pytest.raises(RunError, match="diverged"):
            train_dense(model, task, 3, mini_lr(lr0=1e200, lr1=1e200), seed=0)

    def test_schedule_shorter_than_epochs_rejected(self):
        task = gen_task(MINI_TASK)
        model = build_model(TINY, seed=0)
        with pytest.raises(ConfigError):
            train_dense(model, task, 5, mini_lr(epochs=3), seed=0)

    def test_schedule_steps_per_epoch_mismatch_rejected(self):
        task = gen_task(MINI_TASK)
        model = build_model(TINY, seed=0)
        bad = LRScheduleSpec(LRKind.SINGLE_LINEAR, 1e-3, 1e-5, 3, steps_per_epoch=99)
        with pytest.raises(ConfigError):
            train_dense(model, task, 3, bad, seed=0)

    def test_eval_cadence_once_per_epoch(self):
        task = gen_task(MINI_TASK)
        log = train_dense(build_model(TINY, seed=0), task, 3, mini_lr(), seed=0)
        assert [e.step for e in log.evals] == [7, 15, 23]


# ---------------------------------------------------------------------------
# gradual pruning


class TestGradualPrune:
    def test_teacher_iff_kd(self):
        task = gen_task(MINI_TASK)
        model = build_model(TINY, seed=0)
        with pytest.raises(ConfigError, match="teacher"):
            gradual_prune(model, make_teacher(model), mini_recipe(kd=None), task)
        with pytest.raises(ConfigError, match="teacher"):
            gradual_prune(model, None, mini_recipe(kd=KDConfig()), task)

    def test_mask_monotone_and_tracks_schedule(self):
        task = gen_task(MINI_TASK)
        model = build_model(TINY, seed=0)
        recipe = mini_recipe()
        snapshots: list[tuple[int, int, dict]] = []
        numel = sum(m.params[n].data.size for n, m in [(n, model) for n in all_ones_masks(model, ENCODER_ONLY)])

        def on_prune(step, k, masks):
            snapshots.append((step, k, {n: m.copy() for n, m in masks.items()}))

        _, masks, log = gradual_prune(model, None, recipe, task, on_prune=on_prune)
        assert len(snapshots) == 4
        for (s_a, _, m_a), (s_b, _, m_b) in zip(snapshots, snapshots[1:]):
            assert s_a < s_b
            for name in m_a:
                # once pruned, never revived
                assert not np.any(~m_a[name] & m_b[name])
        for _, k, snap in snapshots:
            kept = sum(m.sum() for m in snap.values())
            total = sum(m.size for m in snap.values())
            achieved = 1.0 - kept / total
            assert abs(achieved - sparsity_at(recipe.sparsity_schedule, k)) <= 1.0 / numel

    def test_prune_steps_avoid_stabilization_windows(self):
        task = gen_task(MINI_TASK)
        model = build_model(TINY, seed=0)
        recipe = mini_recipe()  # 4 epochs, stab 1, 8 steps/epoch
        seen = []
        gradual_prune(model, None, recipe, task, on_prune=lambda s, k, m: seen.append(s))
        assert seen == [12, 16, 20, 24]
        assert all(8 <= s <= 24 for s in seen)  # inside (first window, last-window boundary]

    def test_final_sparsity_within_one_element(self):
        task = gen_task(MINI_TASK)
        model = build_model(TINY, seed=0)
        _, masks, log = gradual_prune(model, None, mini_recipe(), task)
        numel = sum(m.size for m in masks.values())
        assert abs(log.summary["encoder_sparsity"] - 0.9) <= 1.0 / numel
        assert abs(masks.sparsity() - 0.9) <= 1.0 / numel

    def test_excluded_components_stay_dense(self):
        task = gen_task(MINI_TASK)
        model = build_model(TINY, seed=0)
        _, _, log = gradual_prune(model, None, mini_recipe(), task)
        density = log.summary["density"]
        assert density["embeddings"] == 1.0
        assert density["head"] == 1.0

    def test_logged_sparsity_nondecreasing(self):
        task = gen_task(MINI_TASK)
        model = build_model(TINY, seed=0)
        _, _, log = gradual_prune(model, None, mini_recipe(), task)
        series = [r.encoder_sparsity for r in log.steps]
        assert all(a <= b for a, b in zip(series, series[1:]))

    def test_masked_weights_zero_after_run(self):
        task = gen_task(MINI_TASK)
        model = build_model(TINY, seed=0)
        model, masks, _ = gradual_prune(model, None, mini_recipe(), task)
        for name, mask in masks.items():
            assert np.all(model.params[name].data[~mask] == 0.0)

    def test_bitwise_reproducible(self):
        task = gen_task(MINI_TASK)
        log_a = gradual_prune(build_model(TINY, seed=0), None, mini_recipe(), task)[2]
        log_b = gradual_prune(build_model(TINY, seed=0), None, mini_recipe(), task)[2]
        assert log_a.to_csv() == log_b.to_csv()

    def test_no_kd_matches_train_dense_losses_bitwise(self):
        # with KD off and the sparsity target at zero, the pruning loop is
        # plain dense training: per-step losses must agree bitwise
        task = gen_task(MINI_TASK)
        recipe = mini_recipe(
            sparsity_schedule=SparsityScheduleSpec(SparsityKind.CUBIC, 0.0, 1e-12, 2),
            lr_schedule=mini_lr(epochs=4),
            prune_frequency=1,
        )
        dense_log = train_dense(build_model(TINY, seed=0), task, 4, mini_lr(epochs=4), seed=0)
        _, masks, prune_log = gradual_prune(build_model(TINY, seed=0), None, recipe, task)
        assert masks.sparsity() == 0.0
        assert [r.train_loss for r in prune_log.steps] == [r.train_loss for r in dense_log.steps]
        assert [e.accuracy for e in prune_log.evals] == [e.accuracy for e in dense_log.evals]

    def test_kd_run_uses_teacher(self):
        # same seeds, same recipe: a KD run and a CE run must differ
        task = gen_task(MINI_TASK)
        dense = build_model(TINY, seed=0)
        train_dense(dense, task, 2, mini_lr(epochs=2), seed=0)
        ce = gradual_prune(model_copy(dense), None, mini_recipe(), task)[2]
        kd = gradual_prune(model_copy(dense), make_teacher(dense), mini_recipe(kd=KDConfig()), task)[2]
        assert [r.train_loss for r in ce.steps] != [r.train_loss for r in kd.steps]

    def test_fisher_pruner_runs(self):
        task = gen_task(MINI_TASK)
        model = build_model(TINY, seed=0)
        _, masks, log = gradual_prune(model, None, mini_recipe(pruner=Pruner.DIAGONAL_FISHER), task)
        numel = sum(m.size for m in masks.values())
        assert abs(masks.sparsity() - 0.9) <= 1.0 / numel

    def test_schedule_mismatch_fails_before_training(self):
        task = gen_task(MINI_TASK)
        model = build_model(TINY, seed=0)
        before = {n: p.data.copy() for n, p in model.params.items()}
        bad = mini_recipe(sparsity_schedule=SparsityScheduleSpec(SparsityKind.CUBIC, 0.5, 0.9, 99))
        with pytest.raises(ConfigError, match="pruning steps"):
            gradual_prune(model, None, bad, task)
        for n, p in model.params.items():
            np.testing.assert_array_equal(p.data, before[n])

    def test_one_shot_equals_gradual_k1_frozen(self):
        # prune-once-then-freeze: K=1 with lr pinned to zero must select the
        # same mask as a direct one-shot call on the same weights
        task = gen_task(MINI_TASK)
        dense = build_model(TINY, seed=0)
        train_dense(dense, task, 2, mini_lr(epochs=2), seed=0)
        oneshot = one_shot_prune(model_copy(dense), Pruner.MAGNITUDE, 0.9, ENCODER_ONLY)
        recipe = mini_recipe(
            sparsity_schedule=SparsityScheduleSpec(SparsityKind.CUBIC, 0.9, 0.9, 1),
            lr_schedule=mini_lr(lr0=0.0, lr1=0.0),
            prune_frequency=1,
            stabilization_epochs=1,
        )
        model = model_copy(dense)
        _, gradual_masks, _ = gradual_prune(model, None, recipe, task)
        assert set(oneshot) == set(gradual_masks)
        for name in oneshot:
            np.testing.assert_array_equal(oneshot[name], gradual_masks[name])

    def test_degenerate_constant_schedule_prunes_once(self):
        task = gen_task(MINI_TASK)
        model = build_model(TINY, seed=0)
        recipe = mini_recipe(
            sparsity_schedule=SparsityScheduleSpec(SparsityKind.CUBIC, 0.9, 0.9, 1),
            lr_schedule=mini_lr(epochs=3),
            prune_frequency=1,
        )
        events = []
        gradual_prune(model, None, recipe, task, on_prune=lambda s, k, m: events.append((s, k)))
        assert events == [(16, 0)]

    def test_run_log_csv_shape(self):
        task = gen_task(MINI_TASK)
        model = build_model(TINY, seed=0)
        _, _, log = gradual_prune(model, None, mini_recipe(), task)
        lines = log.to_csv().strip().split("\n")
        assert lines[0] == "step,epoch,lr,encoder_sparsity,train_loss,eval_accuracy"
        assert len(lines) == 1 + 32  # header + 4 epochs * 8 steps
        # eval rows carry an accuracy in the last column
        eval_rows = [ln for ln in lines[1:] if ln.split(",")[5]]
        assert len(eval_rows) == 4
