import numpy as np
import pytest

from featrestore.schedule import (
    DdimPlan,
    NoiseSchedule,
    build_linear_schedule,
    ddim_step,
    estimate_x0,
    forward_diffuse,
    make_ddim_plan,
)


def make_sched(alpha_bar):
    """Hand-built schedule table for boundary cases the builder forbids."""
    alpha_bar = np.asarray(alpha_bar, dtype=np.float64)
    T = len(alpha_bar)
    alpha = np.empty(T)
    alpha[0] = alpha_bar[0]
    alpha[1:] = alpha_bar[1:] / alpha_bar[:-1]
    return NoiseSchedule(T=T, beta=1.0 - alpha, alpha=alpha, alpha_bar=alpha_bar)


class TestBuildLinearSchedule:
    def test_single_step_product(self):
        sched = build_linear_schedule(1, 1e-4, 1e-4)
        np.testing.assert_allclose(sched.alpha_bar, [0.9999])

    def test_paper_start_value(self):
        sched = build_linear_schedule(1000, 1e-4, 2e-2)
        assert sched.beta[0] == 1e-4

    def test_two_step_hand_product(self):
        # beta [0.1, 0.2] -> alpha [0.9, 0.8] -> alpha_bar [0.9, 0.9*0.8]
        sched = build_linear_schedule(2, 0.1, 0.2)
        np.testing.assert_allclose(sched.beta, [0.1, 0.2])
        np.testing.assert_allclose(sched.alpha_bar, [0.9, 0.72])

    def test_monotone_and_finite(self):
        sched = build_linear_schedule(1000)
        assert np.all(np.diff(sched.alpha_bar) < 0)
        for arr in (sched.beta, sched.alpha, sched.alpha_bar):
            assert np.all(np.isfinite(arr))
        assert 0 < sched.alpha_bar[-1] < sched.alpha_bar[0] < 1

    def test_cumprod_consistency(self):
        sched = build_linear_schedule(500)
        assert np.all(sched.alpha_bar[1:] == sched.alpha_bar[:-1] * sched.alpha[1:])

    @pytest.mark.parametrize(
        "args", [(0, 1e-4, 2e-2), (10, 0.0, 0.5), (10, 0.5, 0.1), (10, 0.5, 1.0), (10, -0.1, 0.5)]
    )
    def test_invalid_range_rejected(self, args):
        with pytest.raises(ValueError):
            build_linear_schedule(*args)


class TestForwardDiffuse:
    def test_zero_noise_boundary(self):
        sched = make_sched([1.0])
        x0 = np.array([1.5, -2.0, 0.25])
        eps = np.array([3.0, 3.0, 3.0])
        np.testing.assert_array_equal(forward_diffuse(x0, eps, 0, sched), x0)

    def test_pure_noise_boundary(self):
        sched = make_sched([1e-300])
        x0 = np.array([123.0, -7.0])
        eps = np.array([0.5, -0.5])
        np.testing.assert_allclose(forward_diffuse(x0, eps, 0, sched), eps, atol=1e-140)

    def test_scalar_hand_value(self):
        # 0.8 * 2.0 + 0.6 * (-1.0) = 1.0
        sched = make_sched([0.64])
        out = forward_diffuse(np.array([2.0]), np.array([-1.0]), 0, sched)
        np.testing.assert_allclose(out, [1.0])

    def test_shape_mismatch(self):
        sched = build_linear_schedule(10)
        with pytest.raises(ValueError):
            forward_diffuse(np.zeros(3), np.zeros(4), 2, sched)

    def test_batched_per_row_timesteps(self):
        sched = build_linear_schedule(100)
        rng = np.random.default_rng(0)
        x0 = rng.standard_normal((5, 8))
        eps = rng.standard_normal((5, 8))
        t = np.array([0, 10, 50, 77, 99])
        batched = forward_diffuse(x0, eps, t, sched)
        for i in range(5):
            np.testing.assert_array_equal(batched[i], forward_diffuse(x0[i], eps[i], int(t[i]), sched))


class TestEstimateX0:
    def test_inverts_forward_exactly(self):
        sched = build_linear_schedule(1000)
        rng = np.random.default_rng(1)
        x0 = rng.standard_normal(64)
        eps = rng.standard_normal(64)
        for t in (0, 1, 499, 999):
            x_t = forward_diffuse(x0, eps, t, sched)
            rec = estimate_x0(x_t, eps, t, sched)
            np.testing.assert_allclose(rec, x0, rtol=1e-10)

    def test_zero_prediction_case(self):
        sched = make_sched([0.25])
        x_t = np.array([1.0, 2.0])
        np.testing.assert_allclose(estimate_x0(x_t, np.zeros(2), 0, sched), x_t / 0.5)

    def test_scalar_hand_value(self):
        # 1.0/0.8 - sqrt(1/0.64 - 1) * (-1.0) = 1.25 + 0.75 = 2.0
        sched = make_sched([0.64])
        out = estimate_x0(np.array([1.0]), np.array([-1.0]), 0, sched)
        np.testing.assert_allclose(out, [2.0])

    def test_singular_alpha_bar(self):
        sched = make_sched([1.0])
        sched.alpha_bar = np.array([0.0])
        with pytest.raises(ValueError):
            estimate_x0(np.array([1.0]), np.array([0.0]), 0, sched)


class TestDdimStep:
    def test_equal_noise_level_is_identity(self):
        abar = np.array([0.81, 0.81])  # same level at t=0 and t=1
        sched = NoiseSchedule(T=2, beta=np.zeros(2), alpha=np.ones(2), alpha_bar=abar)
        x_t = np.array([0.3, -1.2, 5.0])
        eps_hat = np.array([0.1, 0.2, -0.4])
        out = ddim_step(x_t, eps_hat, 1, 0, sched)
        np.testing.assert_allclose(out, x_t, rtol=1e-12)

    def test_scalar_hand_value(self):
        # x0_hat = 2.0; 0.9 * 2.0 + sqrt(0.19) * (-1.0) = 1.36411010...
        sched = make_sched([0.81, 0.64])
        out = ddim_step(np.array([1.0]), np.array([-1.0]), 1, 0, sched)
        np.testing.assert_allclose(out, [1.8 - np.sqrt(0.19)])
        np.testing.assert_allclose(out, [1.364110105], atol=1e-9)

    def test_ordering_error(self):
        sched = build_linear_schedule(10)
        with pytest.raises(ValueError):
            ddim_step(np.zeros(2), np.zeros(2), 3, 3, sched)

    def test_terminal_step_returns_clean_estimate(self):
        sched = build_linear_schedule(100)
        rng = np.random.default_rng(2)
        x_t = rng.standard_normal(16)
        eps_hat = rng.standard_normal(16)
        out = ddim_step(x_t, eps_hat, 5, -1, sched)
        np.testing.assert_array_equal(out, estimate_x0(x_t, eps_hat, 5, sched))


def oracle_eps(x_t, t, x0_target, sched):
    """Closed-form noise predictor that always points at a fixed target."""
    abar = sched.alpha_bar[t]
    return (x_t - np.sqrt(abar) * x0_target) / np.sqrt(1.0 - abar)


class TestOracleConvergence:
    def test_full_plan_hits_target(self):
        sched = build_linear_schedule(1000)
        plan = make_ddim_plan(sched, 50)
        rng = np.random.default_rng(3)
        x0_target = rng.standard_normal(32)
        x = rng.standard_normal(32) * 3.0
        steps = list(plan.steps[::-1]) + [-1]
        dists = [np.linalg.norm(x - x0_target)]
        for t, t_prev in zip(steps[:-1], steps[1:]):
            x = ddim_step(x, oracle_eps(x, t, x0_target, sched), int(t), int(t_prev), sched)
            dists.append(np.linalg.norm(x - x0_target))
        assert dists[-1] <= 1e-4 * np.linalg.norm(x0_target)
        assert all(b <= a + 1e-12 for a, b in zip(dists[:-1], dists[1:]))


class TestMakeDdimPlan:
    def test_paper_default_stride(self):
        sched = build_linear_schedule(1000)
        plan = make_ddim_plan(sched, 50)
        assert plan.count == 50
        assert plan.steps[-1] == 999
        assert np.all(np.diff(plan.steps) == 20)

    def test_identity_plan(self):
        sched = build_linear_schedule(17)
        plan = make_ddim_plan(sched, 17)
        np.testing.assert_array_equal(plan.steps, np.arange(17))

    def test_two_step_stride_rule(self):
        # stride = floor(9/1) = 9 -> [0, 9]
        sched = build_linear_schedule(10)
        plan = make_ddim_plan(sched, 2)
        np.testing.assert_array_equal(plan.steps, [0, 9])

    def test_count_bounds(self):
        sched = build_linear_schedule(10)
        with pytest.raises(ValueError):
            make_ddim_plan(sched, 11)
        with pytest.raises(ValueError):
            make_ddim_plan(sched, 0)

    def test_deterministic(self):
        sched = build_linear_schedule(777)
        np.testing.assert_array_equal(make_ddim_plan(sched, 31).steps, make_ddim_plan(sched, 31).steps)

    def test_plan_validation(self):
        with pytest.raises(ValueError):
            DdimPlan(steps=np.array([5, 3]))
        with pytest.raises(ValueError):
            DdimPlan(steps=np.array([-1, 3]))
