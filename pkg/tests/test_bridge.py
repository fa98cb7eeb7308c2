import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gsbridge.bridge import (
    BridgeBatch,
    BridgeSchedule,
    DenoiserNet,
    GaussianPriorScore,
    LatentScaler,
    MLPDenoiser,
    TWO_CLUSTER_CENTERS,
    bridge_loss,
    bridge_marginal,
    bridge_score,
    cluster_fractions,
    compare_on_two_clusters,
    forward_kernel,
    h_transform,
    occupancy_binarize,
    rectified_flow_interpolant,
    rectified_flow_loss,
    sample_bridge,
    sample_probability_flow_ode,
    sample_rectified_flow,
    sample_reverse_sde,
    train_bridge,
    two_cluster_pairs,
)
from gsbridge.core import LatentGrid
from gsbridge.gradcheck import sampled_parameter_errors

SCHED = BridgeSchedule()


def simulate_pinned_sde(x0, y, t_end, n=100_000, steps=1000, seed=0):
    """Euler-Maruyama on dx = g^2 (y - x) / (sigma_T^2 - sigma^2) dt + g dW, stepped evenly in sigma^2."""
    rng = np.random.default_rng(seed)
    x = np.full(n, float(x0))
    s = np.linspace(0.0, t_end ** 2, steps + 1)
    for k in range(steps):
        ds = s[k + 1] - s[k]
        x = x + ds * (y - x) / (1.0 - s[k]) + math.sqrt(ds) * rng.standard_normal(n)
    return x


def gaussian_logpdf(x, mean, var):
    return -0.5 * (x - mean) ** 2 / var - 0.5 * np.log(2 * np.pi * var)


class TestSchedule:
    def test_sigma_increasing_and_gap_positive(self):
        t = np.linspace(SCHED.t_min, SCHED.T, 1000)
        assert np.all(np.diff(SCHED.sigma(t)) > 0)
        assert np.all(SCHED.sigma2(SCHED.T) - SCHED.sigma2(t[:-1]) > 0)

    def test_time_grids(self):
        for grid in (SCHED.times(7), SCHED.ode_times(7)):
            assert len(grid) == 8 and np.all(np.diff(grid) < 0)
            assert grid[0] == SCHED.T - SCHED.t_min and grid[-1] == SCHED.t_min
        assert len(SCHED.times()) == 41

    def test_validation(self):
        with pytest.raises(ValueError):
            BridgeSchedule(t_min=0.0)
        with pytest.raises(ValueError):
            BridgeSchedule(steps=0)
        with pytest.raises(ValueError):
            BridgeSchedule.from_dict({"kind": "vp"})
        assert BridgeSchedule.from_dict(SCHED.to_dict()) == SCHED


class TestPreconditioning:
    def test_limits(self):
        a, b, var, c_in, c_skip, c_out = SCHED.coefficients(0.0)
        assert c_skip == 1.0 and c_out == 0.0 and c_in == pytest.approx(1 / SCHED.sigma_data)
        assert np.all(np.isfinite(SCHED.coefficients(np.array([1.0 - 1e-9]))))
        assert np.all(np.isfinite(SCHED.weight(np.array([0.0, 0.5, 1.0]))))

    @pytest.mark.parametrize("t", [0.05, 0.5, 0.95])
    def test_unit_scale_input_and_target(self, t):
        """With x0 ~ N(0, sigma_data^2) the network input and its target both have unit variance."""
        n = 200_000
        rng = np.random.default_rng(int(100 * t))
        x0 = SCHED.sigma_data * rng.standard_normal(n)
        y = rng.standard_normal(n)
        x_t = sample_bridge(x0, y, t, rng, SCHED)
        a, b, var, c_in, c_skip, c_out = SCHED.coefficients(t)
        z = x_t - b * y
        assert np.var(c_in * z) == pytest.approx(1.0, abs=0.02)
        assert np.var((x0 - c_skip * z) / c_out) == pytest.approx(1.0, abs=0.02)

    def test_weight_matches_definition(self):
        t = np.linspace(0.01, 0.99, 9)
        a, _, var, _, _, c_out = SCHED.coefficients(t)
        np.testing.assert_allclose(SCHED.weight(t), var ** 2 / (a * c_out) ** 2, rtol=1e-10)


class TestMarginal:
    def test_endpoints_pinned(self):
        x0, y = np.array([0.3, -2.0]), np.array([1.0, 4.0])
        mean, var = bridge_marginal(x0, y, 0.0, SCHED)
        np.testing.assert_array_equal(mean, x0)
        assert np.all(var == 0.0)
        mean, var = bridge_marginal(x0, y, SCHED.T, SCHED)
        np.testing.assert_array_equal(mean, y)
        assert np.all(var == 0.0)

    def test_scalar_closed_form(self):
        mean, var = bridge_marginal(0.0, 1.0, 0.5, SCHED)
        assert mean == pytest.approx(0.25) and var == pytest.approx(0.1875)

    def test_time_out_of_range(self):
        with pytest.raises(ValueError):
            bridge_marginal(0.0, 1.0, 1.5, SCHED)

    @pytest.mark.parametrize("t", [0.1, 0.5, 0.9])
    def test_pinned_sde_simulation(self, t):
        x = simulate_pinned_sde(0.0, 1.0, t, seed=int(10 * t))
        mean, var = bridge_marginal(0.0, 1.0, t, SCHED)
        n = len(x)
        assert abs(x.mean() - mean) < 3 * math.sqrt(var / n)
        assert abs(x.var() - var) < 3 * var * math.sqrt(2 / n)

    def test_per_batch_times(self):
        x0, y = np.zeros((3, 2)), np.ones((3, 2))
        mean, var = bridge_marginal(x0, y, np.array([0.0, 0.5, 1.0]), SCHED)
        np.testing.assert_allclose(mean[:, 0], [0.0, 0.25, 1.0])
        np.testing.assert_allclose(var[:, 0], [0.0, 0.1875, 0.0])


class TestSampleBridge:
    def test_endpoints(self):
        x0, y = np.array([0.5, 1.5]), np.array([-1.0, 2.0])
        np.testing.assert_array_equal(sample_bridge(x0, y, 0.0, 3, SCHED), x0)
        np.testing.assert_array_equal(sample_bridge(x0, y, 1.0, 3, SCHED), y)

    def test_monte_carlo_moments(self):
        n = 200_000
        x = sample_bridge(np.full(n, 0.2), np.full(n, -1.0), 0.7, 11, SCHED)
        mean, var = bridge_marginal(0.2, -1.0, 0.7, SCHED)
        assert abs(x.mean() - mean) < 3 * math.sqrt(var / n)
        assert abs(x.var() - var) < 3 * var * math.sqrt(2 / n)

    def test_seed(self):
        a = sample_bridge(np.zeros(5), np.ones(5), 0.4, 7, SCHED)
        np.testing.assert_array_equal(a, sample_bridge(np.zeros(5), np.ones(5), 0.4, 7, SCHED))
        assert not np.array_equal(a, sample_bridge(np.zeros(5), np.ones(5), 0.4, 8, SCHED))


class TestScore:
    def test_zero_at_mean(self):
        mean, _ = bridge_marginal(0.3, 2.0, 0.6, SCHED)
        assert bridge_score(mean, 0.3, 2.0, 0.6, SCHED) == pytest.approx(0.0, abs=1e-15)

    def test_scalar_closed_form(self):
        assert bridge_score(0.0, 0.0, 1.0, 0.5, SCHED) == pytest.approx(4 / 3)

    def test_endpoints_rejected(self):
        for t in (0.0, 1.0):
            with pytest.raises(ValueError):
                bridge_score(0.0, 0.0, 1.0, t, SCHED)

    def test_finite_difference_log_density(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            x0, y, x = rng.normal(scale=2.0, size=3)
            t = rng.uniform(0.05, 0.95)
            mean, var = bridge_marginal(x0, y, t, SCHED)
            eps = 1e-5 * max(1.0, abs(x))
            fd = (gaussian_logpdf(x + eps, mean, var) - gaussian_logpdf(x - eps, mean, var)) / (2 * eps)
            score = bridge_score(x, x0, y, t, SCHED)
            assert abs(score - fd) / max(abs(fd), 1e-3) < 1e-4


class TestHTransform:
    def test_zero_at_endpoint_value(self):
        assert h_transform(1.3, 0.4, 1.3, SCHED) == 0.0

    def test_closed_form_at_zero(self):
        assert h_transform(0.25, 0.0, 2.0, SCHED) == pytest.approx(1.75)

    def test_undefined_at_T(self):
        with pytest.raises(ValueError):
            h_transform(0.0, 1.0, 1.0, SCHED)

    def test_forward_simulation_lands_on_y(self):
        rng = np.random.default_rng(1)
        n, steps = 20_000, 2000
        x = np.full(n, -0.5)
        t = np.linspace(0.0, 1.0, steps + 1)
        for k in range(steps):
            dt = t[k + 1] - t[k]
            g2 = 2 * t[k]
            x = x + g2 * h_transform(x, t[k], 2.0, SCHED) * dt + math.sqrt(g2 * dt) * rng.standard_normal(n)
        assert abs(x.mean() - 2.0) < 0.01 and x.std() < 0.05

    def test_forward_kernel_matches_marginal(self):
        # Pushing the t-marginal forward to t' must give the t'-marginal.
        rng = np.random.default_rng(2)
        n = 200_000
        x = sample_bridge(np.zeros(n), np.ones(n), 0.3, rng, SCHED)
        x = forward_kernel(x, 0.3, 0.6, np.ones(n), SCHED, rng)
        mean, var = bridge_marginal(0.0, 1.0, 0.6, SCHED)
        assert abs(x.mean() - mean) < 3 * math.sqrt(var / n)
        assert abs(x.var() - var) < 3 * var * math.sqrt(2 / n)


class OracleNet:
    """Stand-in network whose output reproduces x0 exactly through the preconditioning."""

    def __init__(self, x0):
        self.x0 = x0

    def forward(self, x_in, t, context):
        a, b, var, c_in, c_skip, c_out = (c[:, None, None, None, None] for c in SCHED.coefficients(t))
        z = x_in / c_in
        return (self.x0 - c_skip * z) / c_out

    def backward(self, grad):
        pass


def toy_latents(rng, n=2, r=4, c=3):
    x0 = rng.normal(size=(n, r, r, r, c))
    y = 0.5 * x0 + 0.3 * rng.normal(size=x0.shape)
    cond = rng.normal(size=x0.shape)
    return x0, y, cond


class TestTrainLoss:
    def test_oracle_network_zero_loss(self):
        x0, y, cond = toy_latents(np.random.default_rng(0))
        loss = bridge_loss(OracleNet(x0), BridgeBatch(x0, y, cond), SCHED, np.random.default_rng(1))
        assert loss == pytest.approx(0.0, abs=1e-20)

    def test_loss_is_weighted_score_error(self):
        rng = np.random.default_rng(2)
        x0, y, cond = toy_latents(rng)
        net = DenoiserNet(3, rng, width=8)
        for p in net.parameters().values():
            p.value[...] = rng.normal(scale=0.2, size=p.value.shape)
        t = np.array([0.3, 0.8])
        loss = bridge_loss(net, BridgeBatch(x0, y, cond), SCHED, np.random.default_rng(5), backward=False, t=t)
        r2 = np.random.default_rng(5)
        x_t = sample_bridge(x0, y, t, r2, SCHED)
        a, b, var, c_in, c_skip, c_out = (c[:, None, None, None, None] for c in SCHED.coefficients(t))
        out = net.forward(c_in * (x_t - b * y), t, (y, cond))
        x0_hat = c_skip * (x_t - b * y) + c_out * out
        score = bridge_score(x_t, x0_hat, y, t, SCHED)
        target = bridge_score(x_t, x0, y, t, SCHED)
        w = SCHED.weight(t)[:, None, None, None, None]
        assert loss == pytest.approx(np.mean(w * (score - target) ** 2), rel=1e-10)
        # the weight makes the objective a unit-weight regression of the raw output
        f_target = (x0 - c_skip * (x_t - b * y)) / c_out
        assert loss == pytest.approx(np.mean((out - f_target) ** 2), rel=1e-10)

    def test_gradient_finite_difference(self):
        rng = np.random.default_rng(3)
        x0, y, cond = toy_latents(rng, n=2, r=4, c=2)
        net = DenoiserNet(2, rng, width=8)
        net.head.weight.value[...] = rng.normal(scale=0.1, size=net.head.weight.shape)
        batch = BridgeBatch(x0, y, cond)

        def loss():
            return bridge_loss(net, batch, SCHED, np.random.default_rng(9), backward=False)

        net.zero_grad()
        bridge_loss(net, batch, SCHED, np.random.default_rng(9))
        errors = sampled_parameter_errors(net, loss, np.random.default_rng(4))
        assert max(errors.values()) < 1e-4, errors

    def test_non_finite_loss_aborts(self):
        class NanNet(OracleNet):
            def forward(self, x_t, t, context):
                return np.full(x_t.shape, np.nan)

        x0, y, cond = toy_latents(np.random.default_rng(0))
        net = MLPDenoiser(4, np.random.default_rng(0))
        net.forward = NanNet(x0).forward
        data = [BridgeBatch(x0[:1], y[:1], cond[:1])]
        with pytest.raises(FloatingPointError, match="step 0"):
            train_bridge(net, data, SCHED, steps=3)

    def test_shape_mismatch(self):
        x0, y, cond = toy_latents(np.random.default_rng(0))
        with pytest.raises(ValueError):
            bridge_loss(OracleNet(x0), BridgeBatch(x0, y[:, :2], cond), SCHED, np.random.default_rng(0))


@pytest.fixture(scope="module")
def trained_toy():
    rng = np.random.default_rng(10)
    x0, y, cond = toy_latents(rng, n=2, r=4, c=3)
    net = DenoiserNet(3, np.random.default_rng(11), width=8)
    data = [BridgeBatch(x0[i:i + 1], y[i:i + 1], cond[i:i + 1]) for i in range(2)]
    history = train_bridge(net, data, SCHED, steps=500, lr=3e-3)
    return net, x0, y, cond, history


class TestTraining:
    def test_smoothed_loss_decreases(self, trained_toy):
        history = np.array(trained_toy[4])
        blocks = history.reshape(5, 100).mean(axis=1)
        assert np.all(np.diff(blocks) < 0), blocks

    def test_condition_is_consumed(self, trained_toy):
        net, x0, y, cond, _ = trained_toy
        t = np.full(2, 0.5)
        a = net.forward(y, t, (y, cond))
        b = net.forward(y, t, (y, cond[::-1]))
        assert not np.allclose(a, b)


class TestSamplers:
    def test_sde_reproduces_gaussian_posterior(self):
        mu0, s2, n = 0.3, 0.25, 10_000
        sched = BridgeSchedule(steps=200)
        x = sample_reverse_sde(GaussianPriorScore(mu0, s2, sched), np.full(n, 1.0), None, sched, seed=4)
        assert abs(x.mean() - mu0) < 3 * math.sqrt(s2 / n)
        assert abs(x.var() - s2) < 3 * s2 * math.sqrt(2 / n)

    def test_sde_weak_order_one(self):
        mu0, s2 = 0.3, 0.25
        errors = []
        for n_steps in (10, 20, 40):
            sched = BridgeSchedule(steps=n_steps)
            x = sample_reverse_sde(GaussianPriorScore(mu0, s2, sched), np.full(400_000, 1.0), None, sched,
                                   churn_ratio=0.0, seed=1)
            errors.append(abs(x.var() - s2))
        ratios = np.array(errors[:-1]) / np.array(errors[1:])
        assert np.all((ratios > 1.5) & (ratios < 3.0)), ratios

    def test_zero_churn_is_plain_euler_maruyama(self):
        sched = BridgeSchedule(steps=12)
        stub = GaussianPriorScore(-0.4, 0.5, sched)
        y = np.array([1.0, 0.2, -0.3])
        out = sample_reverse_sde(stub, y, None, sched, churn_ratio=0.0, seed=5)
        rng = np.random.default_rng([5, 0])
        x = y.copy()
        times = np.linspace(1 - 1e-4, 1e-4, 13)
        for t, tn in zip(times[:-1], times[1:]):
            ds = t * t - tn * tn
            x = x + (stub(x, t, y) - (y - x) / (1 - t * t)) * ds + math.sqrt(ds) * rng.standard_normal(3)
        np.testing.assert_array_equal(out, x)
        assert not np.array_equal(out, sample_reverse_sde(stub, y, None, sched, churn_ratio=0.5, seed=5))

    def test_single_step_finite(self):
        sched = BridgeSchedule(steps=1)
        for stub in (GaussianPriorScore(0.0, 1.0, sched), GaussianPriorScore(3.0, 1e-4, sched)):
            y = np.linspace(-5, 5, 7)
            assert np.all(np.isfinite(sample_reverse_sde(stub, y, None, sched, seed=0)))
            assert np.all(np.isfinite(sample_probability_flow_ode(stub, y, None, sched)))

    def test_guidance_scales_score(self):
        sched = BridgeSchedule(steps=8)
        stub = GaussianPriorScore(0.1, 0.3, sched)
        doubled = lambda x, t, y, c: 2.0 * stub(x, t, y, c)
        y = np.array([0.7, -0.2])
        np.testing.assert_array_equal(sample_reverse_sde(stub, y, None, sched, guidance=2.0, seed=2),
                                      sample_reverse_sde(doubled, y, None, sched, guidance=1.0, seed=2))

    def test_divergence_aborts(self):
        sched = BridgeSchedule(steps=5, max_norm=10.0)
        with pytest.raises(FloatingPointError, match="diverged at step"):
            sample_reverse_sde(lambda x, t, y, c: np.full_like(x, 1e6), np.zeros(3), None, sched, seed=0)

    def test_ode_deterministic(self):
        sched = BridgeSchedule(steps=10)
        stub = GaussianPriorScore(0.2, 0.4, sched)
        y = np.array([1.0, -1.0])
        np.testing.assert_array_equal(sample_probability_flow_ode(stub, y, None, sched),
                                      sample_probability_flow_ode(stub, y, None, sched))

    def test_ode_follows_conditional_mean(self):
        stub = GaussianPriorScore(0.3, 0.25, SCHED)
        y = np.array([1.0])
        start = stub.moments(SCHED.T - SCHED.t_min, y)[0]
        end = stub.moments(SCHED.t_min, y)[0]
        for n in (3, 10, 40):
            x = sample_probability_flow_ode(stub, y, None, BridgeSchedule(steps=n), x_start=start)
            assert abs(x[0] - end[0]) < 1e-10

    def test_ode_second_order(self):
        stub = GaussianPriorScore(0.3, 0.25, SCHED)
        y = np.array([1.0])
        start = stub.moments(0.5, y)[0] + 0.5
        ref = sample_probability_flow_ode(stub, y, None, BridgeSchedule(steps=20_000), x_start=start, t_start=0.5)
        errors = [abs(sample_probability_flow_ode(stub, y, None, BridgeSchedule(steps=n), x_start=start,
                                                  t_start=0.5) - ref)[0] for n in (10, 20, 40)]
        assert errors[0] / errors[1] > 3.5 and errors[1] / errors[2] > 3.5, errors

    def test_ode_population_matches_sde(self):
        mu0, s2, n = -0.2, 0.3, 10_000
        sched = BridgeSchedule(steps=200)
        stub = GaussianPriorScore(mu0, s2, sched)
        y = np.full(n, 0.8)
        m, v = stub.moments(0.5, y)
        start = m + np.sqrt(v) * np.random.default_rng(3).standard_normal(n)
        ode = sample_probability_flow_ode(stub, y, None, BridgeSchedule(steps=40), x_start=start, t_start=0.5)
        sde = sample_reverse_sde(stub, y, None, sched, seed=6)
        se = math.sqrt(s2 / n)
        assert abs(ode.mean() - mu0) < 3 * se
        assert abs(ode.mean() - sde.mean()) < 3 * math.sqrt(2) * se
        assert abs(ode.var() - s2) < 3 * s2 * math.sqrt(2 / n)


class TestRectifiedFlow:
    def test_interpolant_midpoint(self):
        assert rectified_flow_interpolant(np.array([0.0]), np.array([2.0]), 0.5)[0] == 1.0

    @pytest.mark.parametrize("steps", [1, 3, 17])
    def test_perfect_velocity_recovers_x0(self, steps):
        x0 = np.array([[0.3, -1.0, 2.0]])
        y = np.array([[1.0, 1.0, -4.0]])
        x = sample_rectified_flow(lambda x, t, c: x0 - y, y, None, steps=steps)
        np.testing.assert_allclose(x, x0, atol=1e-14)

    def test_loss_gradient(self):
        rng = np.random.default_rng(0)
        net = MLPDenoiser(3, rng, hidden=8, n_context=0)
        net.out.weight.value[...] = rng.normal(scale=0.3, size=net.out.weight.shape)
        batch = BridgeBatch(rng.normal(size=(4, 3)), rng.normal(size=(4, 3)), None)
        net.zero_grad()
        rectified_flow_loss(net, batch, np.random.default_rng(1))
        p = net.fc2.weight
        for idx in [(0, 0), (3, 5), (7, 2)]:
            old = p.value[idx]
            p.value[idx] = old + 1e-6
            hi = rectified_flow_loss(net, batch, np.random.default_rng(1), backward=False)
            p.value[idx] = old - 1e-6
            lo = rectified_flow_loss(net, batch, np.random.default_rng(1), backward=False)
            p.value[idx] = old
            assert p.grad[idx] == pytest.approx((hi - lo) / 2e-6, rel=1e-5, abs=1e-10)


class TestTwoClusterToy:
    def test_pairs(self):
        data = two_cluster_pairs(5000, np.random.default_rng(0), weight=0.3)
        x0 = np.concatenate([d.x0 for d in data])
        y = np.concatenate([d.y for d in data])
        assert abs(cluster_fractions(x0, TWO_CLUSTER_CENTERS)[0] - 0.3) < 0.02
        assert abs(y.std() - 0.5) < 0.02 and all(d.cond is None for d in data)

    def test_both_samplers_recover_proportions(self):
        report = compare_on_two_clusters(seed=0)
        assert abs(report["bridge"] - 0.3) < 0.05, report
        assert abs(report["rectified_flow"] - 0.3) < 0.05, report


class TestLatentPlumbing:
    def test_binarize_trivial(self):
        state = np.ones((2, 2, 2, 3))
        state[..., -1] = 0.9
        grid, empty = occupancy_binarize(state)
        assert not empty and np.all(grid.occupancy == 1)
        state[..., -1] = 0.1
        grid, empty = occupancy_binarize(state)
        assert empty and np.all(grid.features == 0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_binarize_scan_oracle(self, seed):
        state = np.random.default_rng(seed).uniform(size=(3, 3, 3, 4))
        grid, empty = occupancy_binarize(state)
        for idx in np.ndindex(3, 3, 3):
            active = state[idx][-1] > 0.5
            assert grid.occupancy[idx] == float(active)
            np.testing.assert_array_equal(grid.features[idx], state[idx][:-1] if active else 0.0)
        assert empty == (not (state[..., -1] > 0.5).any())

    def test_scaler_round_trip(self):
        rng = np.random.default_rng(0)
        occ = (rng.uniform(size=(4, 4, 4)) > 0.5).astype(float)
        grid = LatentGrid(np.where(occ[..., None] > 0, rng.normal(3.0, 2.0, size=(4, 4, 4, 4)), 0.0), occ)
        scaler = LatentScaler.fit([grid])
        state = scaler.encode(grid)
        assert np.all(state[occ == 0] == 0)
        active = state[occ > 0][:, :-1]
        np.testing.assert_allclose(active.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(active.std(axis=0), 1.0, atol=1e-12)
        back = scaler.decode(state)
        np.testing.assert_allclose(back.features[occ > 0], grid.features[occ > 0], atol=1e-12)

    def test_cluster_fractions(self):
        pts = np.array([[-0.9, 0.1], [1.2, 0.0], [0.8, -0.3], [-2.0, 0.0]])
        np.testing.assert_array_equal(cluster_fractions(pts, TWO_CLUSTER_CENTERS), [0.5, 0.5])
