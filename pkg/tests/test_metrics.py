import numpy as np
import numpy.testing as npt
import pytest

from apd.metrics import (
    CapacityReport,
    aopd,
    base_network_count,
    capacity,
    evaluate,
    forget_task,
    forgetting,
    mopd,
    opd,
    path_length,
    pca2d,
)
from apd.params import (
    DecomposedLayer,
    DecomposedState,
    Head,
    LayerShared,
    build_state,
    forward,
    init_task,
)
from apd.rng import rng_for
from apd.trainer import HyperParams, Variant, train_task

from helpers import forgetting_oracle, random_state, toy_dataset


class TestEvaluate:
    def test_all_zero_logits_tie_break_to_class_zero(self):
        state = DecomposedState(
            layers=[DecomposedLayer(LayerShared(np.zeros((3, 2)), np.zeros(2)))]
        )
        state.heads[0] = Head(np.zeros((2, 4)), np.zeros(4))
        x = np.ones((10, 3))
        assert evaluate(state, 0, x, np.zeros(10, dtype=int)) == 1.0
        assert evaluate(state, 0, x, np.ones(10, dtype=int)) == 0.0

    def test_memorizer_reaches_one(self):
        ds = toy_dataset(task_id=0, classes=2, per_class=5, d=4, seed=21,
                         noise=0.3, ratios=(1.0, 0.0, 0.0))
        state = build_state(4, (12,), seed=21)
        from apd.trainer import _init_plain_task

        _init_plain_task(state, 0, 2, rng_for(21, "head", 0))
        hp = HyperParams(lambda1=0.0, lambda2=0.0, lr0=0.3, lr_decay=0.99,
                         epochs=200, batch_size=4, weight_decay=0.0, seed=21)
        train_task(state, ds, hp, Variant(kind="APD1"))
        assert evaluate(state, 0, *ds.split_arrays("train")) == 1.0

    def test_random_labels_near_chance(self):
        state = random_state(d=6, widths=(8, 8), tasks=1, classes=4, seed=22)
        rng = rng_for(22, "random-labels")
        x = rng.standard_normal((4000, 6))
        y = rng.integers(0, 4, 4000)
        acc = evaluate(state, 0, x, y)
        p = 0.25
        assert abs(acc - p) <= 3 * np.sqrt(p * (1 - p) / 4000)

    def test_empty_rejected(self):
        state = random_state(tasks=1)
        with pytest.raises(ValueError, match="empty"):
            evaluate(state, 0, np.empty((0, 4)), np.empty(0, dtype=int))


class TestOrderDisparity:
    def test_identical_performance_gives_zero(self):
        final = np.full((4, 3), 0.8)
        assert aopd(final) == 0.0
        assert mopd(final) == 0.0

    def test_hand_values(self):
        assert opd(np.array([0.8, 0.6, 0.7])) == pytest.approx(0.2)
        final = np.array([[0.8, 0.6, 0.7], [0.5, 0.6, 0.55]])
        assert aopd(final) == pytest.approx(0.15)
        assert mopd(final) == pytest.approx(0.2)

    def test_needs_two_orders(self):
        with pytest.raises(ValueError):
            opd(np.array([0.5]))
        with pytest.raises(ValueError):
            aopd(np.full((3, 1), 0.5))
        with pytest.raises(ValueError):
            mopd(np.full((3, 1), 0.5))

    def test_non_negative_and_mopd_dominates_aopd(self):
        rng = np.random.default_rng(23)
        for _ in range(25):
            final = rng.random((int(rng.integers(1, 6)), int(rng.integers(2, 6))))
            a, m = aopd(final), mopd(final)
            assert 0 <= a <= m

    def test_invariant_to_order_permutation(self):
        rng = np.random.default_rng(24)
        final = rng.random((4, 5))
        shuffled = final[:, rng.permutation(5)]
        assert aopd(final) == pytest.approx(aopd(shuffled))
        assert mopd(final) == pytest.approx(mopd(shuffled))


class TestForgetting:
    def test_monotone_columns_give_zero(self):
        acc = np.array([
            [0.5, np.nan, np.nan],
            [0.6, 0.7, np.nan],
            [0.7, 0.8, 0.9],
        ])
        avg, worst = forgetting(acc)
        assert avg == 0.0 and worst == 0.0

    def test_hand_case(self):
        acc = np.array([[0.9, np.nan], [0.7, 0.8]])
        avg, worst = forgetting(acc)
        assert avg == pytest.approx(0.2)
        assert worst == pytest.approx(0.2)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(25)
        for _ in range(30):
            T = int(rng.integers(2, 8))
            acc = np.full((T, T), np.nan)
            for c in range(T):
                acc[c, : c + 1] = rng.random(c + 1)
            got = forgetting(acc)
            want = forgetting_oracle(acc)
            assert got == want
            assert got[0] <= got[1]

    def test_too_few_tasks(self):
        with pytest.raises(ValueError):
            forgetting(np.array([[0.5]]))

    def test_missing_entries_rejected(self):
        acc = np.array([[0.5, np.nan], [np.nan, 0.8]])
        with pytest.raises(ValueError, match="missing"):
            forgetting(acc)


class TestCapacity:
    def test_fresh_single_task_counts(self):
        # plainly trained first task: dense shared + dense head, zero mask
        # logits and zero delta; percent slightly above 100 once the mask
        # logits move
        state = build_state(6, (8, 8), seed=30)
        init_task(state, 0, 4, rng_for(30, "head", 0), mode="zeros")
        base = base_network_count(6, (8, 8), 4)
        report = capacity(state, base)
        shared_expected = 6 * 8 + 8 * 8  # biases are zero at init
        assert report.shared == shared_expected
        assert report.taus[0] == 0
        assert report.masks[0] == 0
        assert report.heads[0] == 8 * 4  # head bias zero at init
        # give every mask logit a value: per-task overhead appears
        for layer in state.layers:
            layer.mask_logits[0].v += 0.1
        report2 = capacity(state, base)
        assert report2.total == report.total + 16
        assert report2.percent == pytest.approx(100.0 * report2.total / base)

    def test_zeroed_deltas_contribute_nothing(self):
        state = random_state(tasks=2, seed=31)
        for layer in state.layers:
            layer.taus[1].weight_delta[:] = 0.0
            layer.taus[1].bias_delta[:] = 0.0
        assert capacity(state, 100).taus[1] == 0

    def test_new_zero_task_changes_only_head_and_mask(self):
        state = random_state(tasks=1, seed=32)
        base = base_network_count(4, (5, 4), 3)
        before = capacity(state, base)
        init_task(state, 7, 3, rng_for(32, "head", 7), mode="zeros")
        after = capacity(state, base)
        assert after.taus[7] == 0 and after.masks[7] == 0
        assert after.total == before.total + after.heads[7]

    def test_invariant_under_task_relabeling(self):
        a = random_state(tasks=2, seed=33)
        b = random_state(tasks=2, seed=33)
        # relabel task 1 -> 9 in b
        for layer in b.layers:
            layer.taus[9] = layer.taus.pop(1)
            layer.mask_logits[9] = layer.mask_logits.pop(1)
        b.heads[9] = b.heads.pop(1)
        base = base_network_count(4, (5, 4), 3)
        assert capacity(a, base).percent == capacity(b, base).percent

    def test_base_count_positive(self):
        with pytest.raises(ValueError):
            capacity(random_state(tasks=1), 0)


class TestForgetTask:
    def test_forgotten_task_cannot_be_evaluated(self):
        state = random_state(tasks=3, seed=34)
        out = forget_task(state, 1)
        x = np.zeros((2, 4))
        with pytest.raises(KeyError):
            forward(out, x, 1)

    def test_other_tasks_bit_identical(self):
        state = random_state(tasks=3, seed=35)
        x = rng_for(35, "probe").standard_normal((6, 4))
        before = {j: forward(state, x, j) for j in (0, 2)}
        out = forget_task(state, 1)
        for j in (0, 2):
            npt.assert_array_equal(before[j], forward(out, x, j))
        # original untouched
        assert 1 in state.heads

    def test_capacity_strictly_decreases(self):
        state = random_state(tasks=2, seed=36)
        base = base_network_count(4, (5, 4), 3)
        assert capacity(forget_task(state, 1), base).total < capacity(state, base).total

    def test_group_membership_removed_but_locals_kept(self):
        state = random_state(tasks=2, seed=37)
        from apd.params import LocalShared

        state.groups[0] = LocalShared(
            0,
            [np.ones(l.shared.weight.shape) for l in state.layers],
            [np.ones(l.shared.bias.shape) for l in state.layers],
        )
        state.assignment = {0: 0, 1: 0}
        out = forget_task(state, 0)
        assert 0 not in out.assignment
        assert 0 in out.groups

    def test_unknown_task(self):
        with pytest.raises(KeyError):
            forget_task(random_state(tasks=1), 5)


class TestPca2d:
    def test_collinear_points_have_flat_second_coordinate(self):
        rng = np.random.default_rng(38)
        direction = rng.standard_normal(5)
        pts = np.outer(np.linspace(-2, 2, 9), direction)
        out = pca2d(pts)
        assert np.max(np.abs(out[:, 1])) < 1e-8

    def test_planar_data_preserves_pairwise_distances(self):
        rng = np.random.default_rng(39)
        basis = np.linalg.qr(rng.standard_normal((7, 2)))[0]
        coords = rng.standard_normal((10, 2))
        pts = coords @ basis.T
        out = pca2d(pts)
        d_in = np.linalg.norm(pts[:, None] - pts[None, :], axis=2)
        d_out = np.linalg.norm(out[:, None] - out[None, :], axis=2)
        npt.assert_allclose(d_in, d_out, atol=1e-8)

    def test_explained_variance_matches_eigendecomposition(self):
        rng = np.random.default_rng(40)
        pts = rng.standard_normal((10, 6)) * np.array([3, 2, 1, 1, 0.5, 0.2])
        out = pca2d(pts)
        cov = np.cov(pts, rowvar=False, ddof=1)
        eigvals = np.sort(np.linalg.eigvalsh(cov))[::-1]
        got = np.var(out, axis=0, ddof=1)
        npt.assert_allclose(got, eigvals[:2], rtol=1e-6)

    def test_sign_convention(self):
        rng = np.random.default_rng(41)
        pts = rng.standard_normal((12, 4))
        out1 = pca2d(pts)
        out2 = pca2d(-pts + 2.0)  # reflected and shifted input
        # components are deterministic; projections of reflected data flip
        npt.assert_allclose(np.abs(out1), np.abs(out2), atol=1e-6)

    def test_rank_zero_rejected(self):
        with pytest.raises(ValueError, match="rank-0"):
            pca2d(np.ones((5, 3)))

    def test_too_few_vectors(self):
        with pytest.raises(ValueError):
            pca2d(np.ones((2, 3)))


def test_path_length():
    pts = np.array([[0.0, 0.0], [3.0, 4.0], [3.0, 4.0]])
    assert path_length(pts) == pytest.approx(5.0)
    assert path_length(pts[:1]) == 0.0
