"""Triplet loss, analytic gradients vs finite differences, and training."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from triplet_meta import (DivergenceError, TrainConfig, train, triplet_error,
                          triplet_loss, triplet_loss_grad)
from triplet_meta.embedding import load_embedding, save_embedding
from triplet_meta.oracle import TripletJudgment
from triplet_meta.triplets import Triplet, TripletSet


def finite_difference_grads(xa, xp, xn, margin, step=1e-6):
    """Central finite differences of the hinge loss, the independent oracle."""
    vectors = [np.asarray(v, dtype=float) for v in (xa, xp, xn)]
    grads = []
    for which in range(3):
        g = np.zeros_like(vectors[which])
        for i in range(len(g)):
            plus = [v.copy() for v in vectors]
            minus = [v.copy() for v in vectors]
            plus[which][i] += step
            minus[which][i] -= step
            g[i] = (triplet_loss(*plus, margin) - triplet_loss(*minus, margin)) / (2 * step)
        grads.append(g)
    return grads


def make_tset(keys, m=None):
    j = TripletJudgment("a", "b", "c", "A")
    return TripletSet(tuple(Triplet(a, p, n, j) for a, p, n in keys))


class TestTripletLoss:
    def test_anchor_equals_positive(self):
        assert triplet_loss([1.0, 2.0], [1.0, 2.0], [1.0, 0.0], margin=1.0) == 0.0

    def test_active_hinge_value(self):
        # dap = 2, dan = 2.5 -> max(0, 1 + 2 - 2.5) = 0.5
        assert triplet_loss([0.0], [2.0], [-2.5], margin=1.0) == pytest.approx(0.5)

    def test_total_collapse_gives_margin(self):
        x = [0.3, -0.7]
        assert triplet_loss(x, x, x, margin=1.0) == 1.0

    def test_nonfinite_input_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            triplet_loss([np.nan], [0.0], [1.0])

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape"):
            triplet_loss([0.0, 1.0], [0.0], [1.0])

    @given(st.lists(st.floats(-3, 3), min_size=2, max_size=2),
           st.lists(st.floats(-3, 3), min_size=2, max_size=2),
           st.lists(st.floats(-3, 3), min_size=2, max_size=2),
           st.floats(-5, 5), st.floats(-5, 5))
    @settings(max_examples=60, deadline=None)
    def test_translation_invariance(self, xa, xp, xn, tx, ty):
        shift = np.array([tx, ty])
        base = triplet_loss(xa, xp, xn, 1.0)
        moved = triplet_loss(np.add(xa, shift), np.add(xp, shift),
                             np.add(xn, shift), 1.0)
        assert moved == pytest.approx(base, abs=1e-9)
        g0 = triplet_loss_grad(xa, xp, xn, 1.0)
        g1 = triplet_loss_grad(np.add(xa, shift), np.add(xp, shift),
                               np.add(xn, shift), 1.0)
        for a, b in zip(g0, g1):
            np.testing.assert_allclose(a, b, atol=1e-7)

    def test_rotation_invariance(self):
        rng = np.random.default_rng(3)
        theta = 0.7
        rot = np.array([[np.cos(theta), -np.sin(theta)],
                        [np.sin(theta), np.cos(theta)]])
        for _ in range(20):
            xa, xp, xn = rng.normal(size=(3, 2))
            assert triplet_loss(rot @ xa, rot @ xp, rot @ xn, 1.0) == \
                pytest.approx(triplet_loss(xa, xp, xn, 1.0), abs=1e-12)


class TestTripletLossGrad:
    def test_inactive_triplet_has_zero_gradients(self):
        ga, gp, gn = triplet_loss_grad([0.0], [0.1], [9.0], margin=1.0)
        assert not ga.any() and not gp.any() and not gn.any()

    def test_known_active_example_1d(self):
        ga, gp, gn = triplet_loss_grad([0.0], [2.0], [-2.5], margin=1.0)
        assert gp == pytest.approx([1.0])
        assert gn == pytest.approx([1.0])
        assert ga == pytest.approx([-2.0])

    def test_matches_finite_differences_in_2d(self):
        rng = np.random.default_rng(0)
        checked = 0
        while checked < 25:
            xa, xp, xn = rng.normal(size=(3, 2), scale=1.5)
            dap = np.linalg.norm(xa - xp)
            dan = np.linalg.norm(xa - xn)
            if abs(1.0 + dap - dan) < 1e-3 or min(dap, dan) < 1e-3:
                continue
            if 1.0 + dap - dan <= 0:
                continue
            analytic = triplet_loss_grad(xa, xp, xn, 1.0)
            numeric = finite_difference_grads(xa, xp, xn, 1.0)
            for a, n in zip(analytic, numeric):
                np.testing.assert_allclose(a, n, rtol=1e-4, atol=1e-7)
            checked += 1

    def test_coincident_pair_contributes_zero_branch(self):
        # xa == xp: the positive branch is zero, the negative branch remains
        ga, gp, gn = triplet_loss_grad([1.0, 1.0], [1.0, 1.0], [1.5, 1.0], 1.0)
        assert gp == pytest.approx([0.0, 0.0])
        assert gn == pytest.approx([-1.0, 0.0])  # (xa - xn) / ||xa - xn||
        assert ga == pytest.approx([1.0, 0.0])


class TestTripletError:
    def test_all_satisfied(self):
        coords = np.array([[0.0], [0.5], [5.0]])
        assert triplet_error(coords, make_tset([(0, 1, 2)])) == 0.0

    def test_identical_rows_all_violated(self):
        coords = np.zeros((4, 2))
        tset = make_tset([(0, 1, 2), (1, 2, 3), (0, 2, 3)])
        assert triplet_error(coords, tset) == 1.0

    def test_quarter_violated(self):
        coords = np.array([[0.0], [1.0], [3.0], [-0.5]])
        tset = make_tset([(0, 1, 2), (0, 3, 1), (1, 0, 2), (0, 2, 1)])
        assert triplet_error(coords, tset) == 0.25

    def test_empty_set_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            triplet_error(np.zeros((3, 2)), TripletSet(()))


class TestTrain:
    def test_single_triplet_converges(self):
        tset = make_tset([(0, 1, 2)])
        hist = train(tset, m=3, d=1, cfg=TrainConfig(seed=1, epochs=500))
        assert hist.records[-1].mean_loss == pytest.approx(0.0, abs=1e-9)
        assert hist.best_error == 0.0

    def test_zero_epochs_returns_initial_coords(self):
        tset = make_tset([(0, 1, 2)])
        cfg = TrainConfig(seed=4, epochs=0)
        hist = train(tset, m=3, d=2, cfg=cfg)
        assert hist.records == []
        assert hist.best_epoch is None and hist.best_error is None
        expected = np.random.default_rng(4).normal(0.0, cfg.init_scale, (3, 2))
        np.testing.assert_array_equal(hist.best_coords, expected)
        np.testing.assert_array_equal(hist.final_coords, expected)

    def test_bit_identical_reruns(self):
        tset = make_tset([(0, 1, 2), (1, 2, 3), (3, 0, 2), (2, 3, 1)])
        cfg = TrainConfig(seed=9, epochs=40, batch_size=2)
        h1 = train(tset, 4, 2, cfg)
        h2 = train(tset, 4, 2, cfg)
        assert np.array_equal(h1.best_coords, h2.best_coords)
        assert np.array_equal(h1.final_coords, h2.final_coords)
        assert h1.records == h2.records
        assert h1.best_epoch == h2.best_epoch

    def test_rows_outside_batches_untouched(self):
        # triplets only involve rows 0..2; rows 3..5 must stay at initialization
        tset = make_tset([(0, 1, 2), (1, 0, 2)])
        cfg = TrainConfig(seed=2, epochs=3, batch_size=2)
        hist = train(tset, 6, 2, cfg)
        init = np.random.default_rng(2).normal(0.0, cfg.init_scale, (6, 2))
        np.testing.assert_array_equal(hist.final_coords[3:], init[3:])
        assert not np.array_equal(hist.final_coords[:3], init[:3])

    def test_best_checkpoint_matches_recorded_minimum(self):
        tset = make_tset([(0, 1, 2), (1, 2, 0), (2, 0, 1), (0, 2, 1)])
        hist = train(tset, 3, 2, TrainConfig(seed=5, epochs=30))
        errors = [r.triplet_error for r in hist.records]
        assert hist.best_error == min(errors)
        assert hist.best_epoch == errors.index(min(errors))  # earliest tie
        assert triplet_error(hist.best_coords, tset) == hist.best_error

    def test_divergence_raises_with_epoch_and_lr(self):
        tset = make_tset([(0, 1, 2)])
        cfg = TrainConfig(seed=0, epochs=5, init_scale=1e200)
        with pytest.raises(DivergenceError, match="epoch 0.*learning_rate"):
            train(tset, 3, 2, cfg)

    def test_index_range_checked(self):
        with pytest.raises(ValueError, match="out of range"):
            train(make_tset([(0, 1, 5)]), m=3, d=2)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(margin=0.0)
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=-0.1)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)


def test_embedding_json_round_trip(tmp_path):
    tset = make_tset([(0, 1, 2), (1, 2, 0)])
    hist = train(tset, 3, 2, TrainConfig(seed=8, epochs=12))
    path = tmp_path / "embedding.json"
    save_embedding(hist, path)
    coords, doc = load_embedding(path)
    np.testing.assert_array_equal(coords, hist.best_coords)  # full precision
    assert doc["best_epoch"] == hist.best_epoch
    assert len(doc["history"]) == 12
    assert doc["config"]["learning_rate"] == 0.01
