import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from gaze_align.losses import (
    LossConfig, ensemble_logit, focal_loss, gaze_loss, gaze_loss_multiscale, info_nce,
    total_loss,
)
from gaze_align.saliency import MapShapeError, multiscale

positive_maps = arrays(np.float64, (6, 6), elements=st.floats(0.0, 5.0))


def check_grad(f, analytic, x, h=1e-5, rtol=1e-4):
    numeric = oracles.central_difference(f, x.copy(), h)
    mask = np.abs(analytic) > 1e-8
    rel = np.abs(analytic - numeric)[mask] / np.maximum(np.abs(analytic), np.abs(numeric))[mask]
    assert rel.max(initial=0.0) < rtol


class TestGazeLoss:
    def test_identity_is_zero(self, rng):
        g = rng.random((10, 12))
        b = gaze_loss(g, g, 9, 0.7)
        assert (b.mse, b.kl, b.corr, b.com, b.gaze_total) == (0.0, 0.0, 0.0, 0.0, 0.0)

    def test_zero_fixations_zero_weight(self, rng):
        b = gaze_loss(rng.random((8, 8)), rng.random((8, 8)), 0, 1.0)
        assert b.w_q == 0.0 and b.gaze_total == 0.0

    def test_two_by_two_hand_values(self):
        m = np.array([[1.0, 0.0], [0.0, 0.0]])
        g = np.array([[0.0, 0.0], [0.0, 1.0]])
        b = gaze_loss(m, g, 4, 1.0)
        e = math.e
        assert b.mse == pytest.approx(0.5, abs=1e-15)
        assert b.com == pytest.approx(0.5, abs=1e-15)
        assert b.kl == pytest.approx((e - 1) / (3 + e), abs=1e-14)
        assert b.corr == pytest.approx(4 / 3, abs=1e-14)
        assert b.w_q == 2.0
        ref = oracles.gaze_terms(m.tolist(), g.tolist(), 4, 1.0)
        for key in ("mse", "kl", "corr", "com", "w_q"):
            assert getattr(b, key) == pytest.approx(ref[key], abs=1e-12)
        assert b.gaze_total == pytest.approx(ref["total"], abs=1e-12)

    def test_matches_oracle_random(self, rng):
        for _ in range(25):
            h, w = rng.integers(3, 9, size=2)
            m, g = rng.random((h, w)) * 3, rng.random((h, w)) * 3
            n, q = int(rng.integers(0, 50)), float(rng.random())
            b = gaze_loss(m, g, n, q)
            ref = oracles.gaze_terms(m.tolist(), g.tolist(), n, q)
            assert b.gaze_total == pytest.approx(ref["total"], abs=1e-10)
            assert b.kl == pytest.approx(ref["kl"], abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(MapShapeError):
            gaze_loss(np.zeros((4, 4)), np.zeros((4, 5)), 1, 1.0)

    def test_constant_model_corr_convention(self, rng):
        b = gaze_loss(np.full((5, 5), 0.3), rng.random((5, 5)), 1, 1.0)
        assert b.corr == 1.0
        assert not b.term_grads["corr"].any()

    def test_gradient_matches_finite_differences(self, rng):
        for _ in range(5):
            m, g = rng.uniform(0.1, 1.0, (8, 8)), rng.uniform(0.1, 1.0, (8, 8))

            def f(x):
                return gaze_loss(x, g, 16, 0.9).gaze_total

            check_grad(f, gaze_loss(m, g, 16, 0.9).grad, m)

    def test_per_term_gradients(self, rng):
        m, g = rng.uniform(0.1, 1.0, (5, 7)), rng.uniform(0.1, 1.0, (5, 7))
        b = gaze_loss(m, g, 1, 1.0)
        for term in ("mse", "kl", "corr", "com"):
            check_grad(lambda x: getattr(gaze_loss(x, g, 1, 1.0), term),
                       b.term_grads[term], m)

    @given(positive_maps, positive_maps, st.integers(0, 400), st.floats(0, 1))
    @settings(max_examples=60)
    def test_term_ranges_and_weighting(self, m, g, n, q):
        b = gaze_loss(m, g, n, q)
        assert b.mse >= 0 and b.kl >= 0 and b.com >= 0
        assert 0.0 <= b.corr <= 2.0
        assert 0.0 <= b.com <= 1.0
        parts = b.w_q * (b.mse + b.kl + b.corr + b.com)
        assert b.gaze_total == pytest.approx(parts, rel=1e-9, abs=1e-300)

    def test_minimized_only_at_identity(self, rng):
        g = rng.random((6, 6))
        assert gaze_loss(g, g, 4, 1.0).gaze_total == 0.0
        for _ in range(10):
            m = g + rng.normal(0, 0.05, g.shape)
            assert gaze_loss(np.abs(m), g, 4, 1.0).gaze_total > 0

    def test_json_keys(self, rng):
        d = gaze_loss(rng.random((4, 4)), rng.random((4, 4)), 1, 1.0).to_json()
        assert set(d) == {"mse", "kl", "corr", "com", "w_q", "total"}


class TestMultiscaleLoss:
    def test_identical_pyramids(self, rng):
        p = multiscale(rng.random((224, 224)))
        assert gaze_loss_multiscale(p, p, 10, 1.0).gaze_total == 0.0

    def test_only_finest_differs(self, rng):
        base = rng.random((224, 224))
        pm = multiscale(base)
        pg = list(pm)
        pg[0] = rng.random((224, 224))
        b = gaze_loss_multiscale(pm, pg, 10, 0.5)
        fine = gaze_loss(pm[0], pg[0], 10, 0.5).gaze_total
        assert b.gaze_total == pytest.approx(fine / 3, rel=1e-12)
        assert len(b.scales) == 3

    def test_constant_vs_constant(self):
        pm = multiscale(np.full((224, 224), 0.2))
        pg = multiscale(np.full((224, 224), 0.2))
        b = gaze_loss_multiscale(pm, pg, 1, 1.0)
        for s in b.scales:
            assert (s.corr, s.mse, s.kl, s.com) == (1.0, 0.0, 0.0, 0.0)

    def test_mismatch_rejected(self, rng):
        p = multiscale(rng.random((224, 224)))
        with pytest.raises(MapShapeError):
            gaze_loss_multiscale(p[:2], p[:2], 1, 1.0)

    def test_finest_gradient(self, rng):
        g = rng.uniform(0.1, 1.0, (224, 224))
        m = rng.uniform(0.1, 1.0, (224, 224))
        gp = multiscale(g)
        grad = gaze_loss_multiscale(multiscale(m), gp, 4, 1.0).grad
        for idx in [(0, 0), (17, 200), (223, 5), (100, 101)]:
            h = 1e-5
            up, dn = m.copy(), m.copy()
            up[idx] += h
            dn[idx] -= h
            num = (gaze_loss_multiscale(multiscale(up), gp, 4, 1.0).gaze_total
                   - gaze_loss_multiscale(multiscale(dn), gp, 4, 1.0).gaze_total) / (2 * h)
            assert grad[idx] == pytest.approx(num, rel=1e-4)


class TestInfoNCE:
    def test_orthogonal_pair(self):
        e = np.eye(2)
        assert info_nce(e, e, 0.07) == pytest.approx(math.log1p(math.exp(-1 / 0.07)), rel=1e-9)
        assert info_nce(e, e, 0.07) == pytest.approx(6.2e-7, rel=0.02)

    def test_identical_vectors_log_n(self):
        for n in (2, 5, 9):
            v = np.ones((n, 3))
            assert info_nce(v, v, 0.07) == pytest.approx(math.log(n), abs=1e-12)

    def test_scale_invariance(self, rng):
        a, b = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
        scales = rng.uniform(0.1, 10, size=(6, 1))
        assert info_nce(a * scales, b, 0.07) == pytest.approx(info_nce(a, b, 0.07), rel=1e-12)

    def test_permutation(self, rng):
        a, b = rng.normal(size=(7, 5)), rng.normal(size=(7, 5))
        perm = rng.permutation(7)
        assert info_nce(a[perm], b[perm]) == pytest.approx(info_nce(a, b), rel=1e-12)

    def test_zero_norm_rejected(self):
        with pytest.raises(ValueError):
            info_nce(np.array([[0.0, 0.0], [1.0, 0.0]]), np.eye(2))

    def test_needs_batch_of_two(self):
        with pytest.raises(ValueError):
            info_nce(np.ones((1, 3)), np.ones((1, 3)))

    def test_matches_definition(self, rng):
        a, b = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        tau = 0.2
        total = 0.0
        for i in range(5):
            sims = [float(a[i] @ b[k] / (np.linalg.norm(a[i]) * np.linalg.norm(b[k])))
                    for k in range(5)]
            total -= math.log(math.exp(sims[i] / tau) / sum(math.exp(s / tau) for s in sims))
        assert info_nce(a, b, tau) == pytest.approx(total / 5, rel=1e-10)

    def test_gradients(self, rng):
        a, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        _, da, db = info_nce(a, b, 0.5, return_grad=True)
        check_grad(lambda x: info_nce(x, b, 0.5), da, a)
        check_grad(lambda x: info_nce(a, x, 0.5), db, b)


class TestFocal:
    def test_perfect_prediction(self):
        assert focal_loss([1e3] * 8, [1] * 8) == pytest.approx(0.0, abs=1e-300)

    def test_reduces_to_bce(self, rng):
        cfg = LossConfig(focal_gamma=0.0)
        for _ in range(20):
            z = rng.normal(0, 3, 8)
            t = rng.integers(0, 2, 8)
            ref = sum(oracles.bce(float(zi), int(ti)) for zi, ti in zip(z, t)) / 8
            assert focal_loss(z, t, cfg) == pytest.approx(ref, abs=1e-10)

    def test_hand_value(self):
        assert focal_loss([0.0] * 8, [1] * 8) == pytest.approx(0.25 * math.log(2), abs=1e-12)
        assert 0.25 * math.log(2) == pytest.approx(0.1733, abs=1e-4)

    def test_positive_weights(self):
        cfg = LossConfig(class_pos_weights=(2.0,) + (1.0,) * 7)
        base = focal_loss([0.0] * 8, [1] + [0] * 7)
        weighted = focal_loss([0.0] * 8, [1] + [0] * 7, cfg)
        assert weighted - base == pytest.approx(0.25 * math.log(2) / 8, abs=1e-12)

    def test_non_binary_rejected(self):
        with pytest.raises(ValueError):
            focal_loss([0.0] * 8, [0.5] + [0] * 7)

    def test_wrong_length_rejected(self):
        with pytest.raises(ValueError):
            focal_loss([0.0] * 3, [0] * 3)


class TestEnsembleAndTotal:
    def test_ensemble_hand_value(self):
        out = ensemble_logit([1.0] * 8, [0.0] * 8, 0.7)
        np.testing.assert_allclose(out, 0.7)

    def test_alpha_one_returns_global(self, rng):
        g = rng.normal(size=8)
        assert np.array_equal(ensemble_logit(g, rng.normal(size=8), 1.0), g)

    def test_fixed_point(self, rng):
        g = rng.normal(size=8)
        np.testing.assert_allclose(ensemble_logit(g, g, 0.3), g, rtol=1e-15)

    @given(st.lists(st.floats(-10, 10), min_size=8, max_size=8),
           st.lists(st.floats(-10, 10), min_size=8, max_size=8),
           st.floats(-100, 100), st.floats(0, 1))
    def test_argmax_shift_invariant(self, g, s, c, alpha):
        base = ensemble_logit(g, s, alpha)
        shifted = ensemble_logit(np.add(g, c), np.add(s, c), alpha)
        np.testing.assert_allclose(shifted - base, c, atol=1e-9)

    def test_total_values(self):
        assert total_loss(0, 0, 0, 0) == 0
        assert total_loss(1, 1, 1, 1) == pytest.approx(1.55, abs=1e-15)
        cfg = LossConfig(lambda2=0.0)
        assert total_loss(1, 2, 100.0, 3, cfg) == total_loss(1, 2, -7.0, 3, cfg)

    @given(*[st.floats(-1e3, 1e3)] * 8)
    def test_total_superposition(self, a1, b1, c1, d1, a2, b2, c2, d2):
        lhs = total_loss(a1 + a2, b1 + b2, c1 + c2, d1 + d2)
        rhs = total_loss(a1, b1, c1, d1) + total_loss(a2, b2, c2, d2)
        assert lhs == pytest.approx(rhs, abs=1e-8)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            LossConfig(tau=0)
        with pytest.raises(ValueError):
            LossConfig(alpha=1.5)
        with pytest.raises(ValueError):
            LossConfig(class_pos_weights=(0.0,) * 8)
