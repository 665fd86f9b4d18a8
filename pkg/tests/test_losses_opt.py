"""Loss values against scalar oracles, gradient consistency, optimizers."""

import numpy as np
import pytest

from fieldshift.errors import ConfigError, DataError, NumericFloorWarning, StatsError, TrainingError
from fieldshift.losses_opt import (
    ClassWeights,
    LrSchedule,
    OptState,
    TflConfig,
    dynamic_class_weights,
    lr_at,
    optimizer_step,
    sam_step,
    soft_dice_loss,
    tversky_focal_loss,
    weighted_ce_loss,
)
from fieldshift.raster import IGNORE


def scalar_tfl_oracle(probs, targets, alpha, beta, gamma, smooth, weights):
    """Pure-Python re-derivation with explicit loops, no shared code."""
    n, k, h, w = probs.shape
    loss = 0.0
    for c in range(k):
        tp = fn = fp = 0.0
        for ni in range(n):
            for r in range(h):
                for cc in range(w):
                    if targets[ni, r, cc] == IGNORE:
                        continue
                    p = probs[ni, c, r, cc]
                    g = 1.0 if targets[ni, r, cc] == c else 0.0
                    tp += p * g
                    fn += (1 - p) * g
                    fp += p * (1 - g)
        ti = (tp + smooth) / (tp + alpha * fn + beta * fp + smooth)
        loss += weights[c] * (1.0 - ti) ** gamma
    return loss


def scalar_ce_oracle(probs, targets, weights):
    n, k, h, w = probs.shape
    total, count = 0.0, 0
    for ni in range(n):
        for r in range(h):
            for cc in range(w):
                t = targets[ni, r, cc]
                if t == IGNORE:
                    continue
                total += weights[t] * -np.log(max(probs[ni, t, r, cc], 1e-12))
                count += 1
    return total / count


def random_fixture(seed=0, n=1, side=4):
    rng = np.random.default_rng(seed)
    raw = rng.uniform(0.05, 1.0, (n, 3, side, side))
    probs = raw / raw.sum(axis=1, keepdims=True)
    targets = rng.integers(0, 3, (n, side, side)).astype(np.uint8)
    targets[:, 0, 0] = IGNORE
    return probs, targets


class TestDynamicClassWeights:
    def test_balanced_batch_gives_unit_weights(self):
        targets = np.repeat(np.arange(3, dtype=np.uint8), 100).reshape(1, 10, 30)
        cw = dynamic_class_weights(targets)
        assert np.allclose(cw.weights, 1.0)

    def test_inverse_frequency_arithmetic(self):
        targets = np.concatenate(
            [np.zeros(900), np.ones(90), np.full(10, 2)]
        ).astype(np.uint8).reshape(1, 10, 100)
        cw = dynamic_class_weights(targets)
        assert np.allclose(cw.weights, [1000 / 2700, 1000 / 270, 1000 / 30])

    def test_absent_class_gets_cap(self):
        targets = np.zeros((1, 8, 8), dtype=np.uint8)
        cw = dynamic_class_weights(targets)
        assert cw.weights[1] == 100.0
        assert cw.weights[2] == 100.0

    def test_ignore_pixels_excluded(self):
        targets = np.zeros((1, 4, 4), dtype=np.uint8)
        targets[0, 0] = IGNORE
        with_ignore = dynamic_class_weights(targets)
        without = dynamic_class_weights(np.zeros((1, 3, 4), dtype=np.uint8))
        assert np.array_equal(with_ignore.weights, without.weights)

    def test_fully_ignored_batch_rejected(self):
        with pytest.raises(StatsError):
            dynamic_class_weights(np.full((1, 4, 4), IGNORE, dtype=np.uint8))


class TestTverskyFocal:
    def test_perfect_prediction_zero_loss_finite_grad(self):
        targets = np.array([[[0, 1], [2, 1]]], dtype=np.uint8)
        probs = np.zeros((1, 3, 2, 2))
        for r in range(2):
            for c in range(2):
                probs[0, targets[0, r, c], r, c] = 1.0
        loss, grad = tversky_focal_loss(probs, targets)
        assert loss == pytest.approx(0.0, abs=1e-12)
        assert np.isfinite(grad).all()

    def test_matches_scalar_oracle(self):
        probs, targets = random_fixture(3)
        cfg = TflConfig()
        weights = np.array([0.8, 1.3, 2.0])
        loss, _ = tversky_focal_loss(probs, targets, cfg=cfg, weights=weights)
        ref = scalar_tfl_oracle(probs, targets, cfg.alpha, cfg.beta, cfg.gamma, cfg.smooth, weights)
        assert loss == pytest.approx(ref, abs=1e-10)

    def test_reduces_to_soft_dice(self):
        probs, targets = random_fixture(4)
        cfg = TflConfig(alpha=0.5, beta=0.5, gamma=1.0)
        tfl, _ = tversky_focal_loss(probs, targets, cfg=cfg)

        def dice_oracle():
            total = 0.0
            for c in range(3):
                inter = pred_sum = ref_sum = 0.0
                for idx in np.ndindex(targets.shape):
                    if targets[idx] == IGNORE:
                        continue
                    p = probs[idx[0], c, idx[1], idx[2]]
                    g = 1.0 if targets[idx] == c else 0.0
                    inter += p * g
                    pred_sum += p
                    ref_sum += g
                total += 1.0 - (2 * (inter + cfg.smooth)) / (pred_sum + ref_sum + 2 * cfg.smooth)
            return total

        assert tfl == pytest.approx(dice_oracle(), abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        probs, targets = random_fixture(5, side=3)
        cfg = TflConfig()
        weights = np.array([1.0, 2.0, 0.5])
        _, grad = tversky_focal_loss(probs, targets, cfg=cfg, weights=weights)
        eps = 1e-7
        for idx in np.ndindex(probs.shape):
            p = probs.copy()
            p[idx] += eps
            lp = scalar_tfl_oracle(p, targets, cfg.alpha, cfg.beta, cfg.gamma, cfg.smooth, weights)
            p[idx] -= 2 * eps
            lm = scalar_tfl_oracle(p, targets, cfg.alpha, cfg.beta, cfg.gamma, cfg.smooth, weights)
            fd = (lp - lm) / (2 * eps)
            assert abs(fd - grad[idx]) < 1e-6

    def test_ignore_pixels_are_exactly_inert(self):
        probs, targets = random_fixture(6)
        loss, grad = tversky_focal_loss(probs, targets)
        perturbed = probs.copy()
        perturbed[:, :, 0, 0] = 1.0 / 3.0  # the ignored pixel
        loss2, grad2 = tversky_focal_loss(perturbed, targets)
        assert loss == loss2
        assert np.array_equal(grad, grad2)
        assert np.abs(grad[:, :, 0, 0]).max() == 0.0

    def test_raising_alpha_increases_loss_with_false_negatives(self):
        targets = np.ones((1, 4, 4), dtype=np.uint8)
        probs = np.zeros((1, 3, 4, 4))
        probs[0, 1] = 0.6  # imperfect recall on the interior class
        probs[0, 0] = 0.3
        probs[0, 2] = 0.1
        lo, _ = tversky_focal_loss(probs, targets, cfg=TflConfig(alpha=0.5, beta=0.5, gamma=1.0))
        hi, _ = tversky_focal_loss(probs, targets, cfg=TflConfig(alpha=0.7, beta=0.3, gamma=1.0))
        assert hi > lo

    def test_weight_scaling_scales_loss(self):
        probs, targets = random_fixture(8)
        w = np.array([1.0, 1.0, 1.0])
        base, _ = tversky_focal_loss(probs, targets, weights=w)
        scaled, _ = tversky_focal_loss(probs, targets, weights=3.0 * w)
        assert scaled == pytest.approx(3.0 * base, rel=1e-12)

    def test_alpha_beta_sum_enforced_unless_relaxed(self):
        with pytest.raises(ConfigError):
            TflConfig(alpha=0.7, beta=0.5)
        cfg = TflConfig(alpha=0.7, beta=0.5, relax_sum=True)
        assert cfg.alpha == 0.7

    def test_inverse_gamma_convention(self):
        probs, targets = random_fixture(9)
        direct = tversky_focal_loss(probs, targets, cfg=TflConfig(gamma=0.9))[0]
        inverse = tversky_focal_loss(probs, targets, cfg=TflConfig(gamma=0.9, inverse_gamma=True))[0]
        assert direct != pytest.approx(inverse)

    def test_unnormalized_probs_rejected(self):
        probs, targets = random_fixture(10)
        with pytest.raises(DataError):
            tversky_focal_loss(probs * 1.2, targets)

    def test_per_sample_mode_averages(self):
        probs, targets = random_fixture(11, n=3)
        pooled, _ = tversky_focal_loss(probs, targets)
        per_sample, _ = tversky_focal_loss(probs, targets, cfg=TflConfig(per_sample=True))
        singles = [
            tversky_focal_loss(probs[i : i + 1], targets[i : i + 1])[0] for i in range(3)
        ]
        assert per_sample == pytest.approx(np.mean(singles), abs=1e-12)
        assert pooled != pytest.approx(per_sample)


class TestWeightedCe:
    def test_perfect_prediction_tiny_loss(self):
        targets = np.array([[[0, 1], [2, 1]]], dtype=np.uint8)
        probs = np.full((1, 3, 2, 2), 1e-15)
        for r in range(2):
            for c in range(2):
                probs[0, targets[0, r, c], r, c] = 1.0
        probs /= probs.sum(axis=1, keepdims=True)
        loss, _ = weighted_ce_loss(probs, targets)
        assert loss <= 1e-11

    def test_uniform_probs_give_ln3(self):
        probs = np.full((1, 3, 4, 4), 1.0 / 3.0)
        targets = np.random.default_rng(0).integers(0, 3, (1, 4, 4)).astype(np.uint8)
        loss, _ = weighted_ce_loss(probs, targets)
        assert loss == pytest.approx(np.log(3.0), abs=1e-12)

    def test_matches_scalar_oracle(self):
        probs, targets = random_fixture(12)
        weights = np.array([0.5, 2.0, 1.5])
        loss, _ = weighted_ce_loss(probs, targets, weights=weights)
        assert loss == pytest.approx(scalar_ce_oracle(probs, targets, weights), abs=1e-10)

    def test_gradient_matches_finite_differences(self):
        probs, targets = random_fixture(13, side=3)
        weights = np.array([1.0, 2.0, 0.7])
        _, grad = weighted_ce_loss(probs, targets, weights=weights)
        eps = 1e-7
        for idx in np.ndindex(probs.shape):
            p = probs.copy()
            p[idx] += eps
            lp = scalar_ce_oracle(p, targets, weights)
            p[idx] -= 2 * eps
            lm = scalar_ce_oracle(p, targets, weights)
            fd = (lp - lm) / (2 * eps)
            assert abs(fd - grad[idx]) < 1e-6

    def test_floor_warning_on_vanishing_target_prob(self):
        targets = np.zeros((1, 2, 2), dtype=np.uint8)
        probs = np.zeros((1, 3, 2, 2))
        probs[0, 1] = 1.0  # target class 0 has probability 0
        with pytest.warns(NumericFloorWarning):
            loss, _ = weighted_ce_loss(probs, targets)
        assert np.isfinite(loss)

    def test_ignore_pixels_inert(self):
        probs, targets = random_fixture(14)
        loss, grad = weighted_ce_loss(probs, targets)
        perturbed = probs.copy()
        perturbed[:, :, 0, 0] = np.array([0.98, 0.01, 0.01])
        loss2, grad2 = weighted_ce_loss(perturbed, targets)
        assert loss == loss2
        assert np.array_equal(grad, grad2)


class TestLrSchedule:
    def test_initial_value(self):
        assert lr_at(LrSchedule(), 0) == pytest.approx(0.003)

    def test_endpoint_zero(self):
        assert lr_at(LrSchedule(), 120) == 0.0

    def test_midpoint_value(self):
        assert lr_at(LrSchedule(), 60) == pytest.approx(0.003 * 0.5**0.8, abs=1e-15)

    def test_monotone_decreasing_and_convex(self):
        sched = LrSchedule(total_epochs=50)
        values = [lr_at(sched, e) for e in range(51)]
        diffs = np.diff(values)
        assert (diffs < 0).all()
        assert (np.diff(diffs) < 1e-12).all()  # concave in epoch for power < 1

    def test_out_of_range_rejected(self):
        with pytest.raises(ConfigError):
            lr_at(LrSchedule(), 121)
        with pytest.raises(ConfigError):
            lr_at(LrSchedule(), -1)


class TestOptimizers:
    def test_zero_grads_fixed_point(self):
        params = {"w": np.array([1.0, -2.0])}
        grads = {"w": np.zeros(2)}
        for kind in ("sgd", "momentum", "nesterov", "adam"):
            out, _ = optimizer_step(dict(params), dict(grads), OptState(kind=kind), 0.1)
            assert np.array_equal(out["w"], params["w"])

    def test_sgd_geometric_decay_on_quadratic(self):
        w = {"w": np.array([1.0])}
        state = OptState(kind="sgd")
        seq = []
        for _ in range(3):
            w, state = optimizer_step(w, {"w": w["w"].copy()}, state, 0.1)
            seq.append(float(w["w"][0]))
        assert seq == pytest.approx([0.9, 0.81, 0.729], abs=1e-15)

    def test_nesterov_matches_hand_stepped_recurrence(self):
        w = {"w": np.array([1.0])}
        state = OptState(kind="nesterov", momentum=0.9)
        got = []
        for _ in range(5):
            w, state = optimizer_step(w, {"w": w["w"].copy()}, state, 0.1)
            got.append(float(w["w"][0]))
        # scalar oracle: v' = mu v + g; w' = w - lr (g + mu v')
        wv, vv = 1.0, 0.0
        ref = []
        for _ in range(5):
            g = wv
            vv = 0.9 * vv + g
            wv = wv - 0.1 * (g + 0.9 * vv)
            ref.append(wv)
        assert got == pytest.approx(ref, abs=1e-12)

    def test_momentum_matches_hand_stepped_recurrence(self):
        w = {"w": np.array([1.0])}
        state = OptState(kind="momentum", momentum=0.9)
        got = []
        for _ in range(4):
            w, state = optimizer_step(w, {"w": w["w"].copy()}, state, 0.1)
            got.append(float(w["w"][0]))
        wv, vv = 1.0, 0.0
        ref = []
        for _ in range(4):
            g = wv
            vv = 0.9 * vv + g
            wv = wv - 0.1 * vv
            ref.append(wv)
        assert got == pytest.approx(ref, abs=1e-12)

    def test_adam_matches_hand_stepped_recurrence(self):
        w = {"w": np.array([1.0])}
        state = OptState(kind="adam")
        got = []
        for _ in range(3):
            w, state = optimizer_step(w, {"w": w["w"].copy()}, state, 0.01)
            got.append(float(w["w"][0]))
        wv, m, v = 1.0, 0.0, 0.0
        ref = []
        for t in range(1, 4):
            g = wv
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mh = m / (1 - 0.9**t)
            vh = v / (1 - 0.999**t)
            wv = wv - 0.01 * mh / (np.sqrt(vh) + 1e-8)
            ref.append(wv)
        assert got == pytest.approx(ref, abs=1e-12)

    def test_nan_grads_identify_layer(self):
        params = {"good": np.ones(2), "bad": np.ones(2)}
        grads = {"good": np.ones(2), "bad": np.array([np.nan, 1.0])}
        with pytest.raises(TrainingError, match="bad"):
            optimizer_step(params, grads, OptState(kind="sgd"), 0.1)


class TestSam:
    def test_rho_zero_equals_inner_step(self):
        params = {"w": np.array([1.0])}

        def grad_fn(p):
            return {"w": p["w"].copy()}

        sam_out, _ = sam_step(dict(params), grad_fn, OptState(kind="sam", rho=0.0, inner_kind="sgd"), 0.1)
        sgd_out, _ = optimizer_step(dict(params), grad_fn(params), OptState(kind="sgd"), 0.1)
        assert np.array_equal(sam_out["w"], sgd_out["w"])

    def test_quadratic_perturb_and_update_arithmetic(self):
        params = {"w": np.array([1.0])}

        def grad_fn(p):
            return {"w": p["w"].copy()}

        out, _ = sam_step(params, grad_fn, OptState(kind="sam", rho=0.1, inner_kind="sgd"), 0.1)
        # perturbed point 1.1, gradient there 1.1, update 1 - 0.11
        assert out["w"][0] == pytest.approx(0.89, abs=1e-15)

    def test_double_well_update_differs_from_sgd_by_sharpness_term(self):
        # f(w) = (w^2 - 1)^2 / 4, f'(w) = w^3 - w
        def grad_fn(p):
            w = p["w"]
            return {"w": w**3 - w}

        w0 = 1.5
        params = {"w": np.array([w0])}
        sam_out, _ = sam_step(dict(params), grad_fn, OptState(kind="sam", rho=0.2, inner_kind="sgd"), 0.05)
        g = w0**3 - w0
        eps = 0.2 * np.sign(g)
        expected = w0 - 0.05 * ((w0 + eps) ** 3 - (w0 + eps))
        assert sam_out["w"][0] == pytest.approx(expected, abs=1e-12)
        sgd_out, _ = optimizer_step(dict(params), grad_fn(params), OptState(kind="sgd"), 0.05)
        assert sam_out["w"][0] != pytest.approx(sgd_out["w"][0])

    def test_zero_gradient_falls_back_to_inner_step(self):
        params = {"w": np.array([2.0])}

        def grad_fn(p):
            return {"w": np.zeros(1)}

        out, _ = sam_step(params, grad_fn, OptState(kind="sam", rho=0.1, inner_kind="sgd"), 0.1)
        assert out["w"][0] == 2.0


def test_class_weights_normalized_view():
    cw = ClassWeights(weights=np.array([1.0, 3.0, 8.0]))
    norm = cw.normalized()
    assert norm.sum() == pytest.approx(3.0)
