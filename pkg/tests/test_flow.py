"""Unit tests for the closed-form flow-matching engine."""
import numpy as np
import pytest

from latentzone import tensor as T
from latentzone.flow import (
    FULL_TAPE,
    RECOMPUTE,
    AnchorSet,
    FlowConfig,
    FlowError,
    assign_zone,
    assign_zones,
    compute_latents,
    integrate_backward,
    integrate_forward,
    uniform_grid,
    velocity,
)
from latentzone.gradcheck import grad_check
from latentzone.tensor import Tensor


def setup_function(_):
    T.reset_tape()


def _cfg(g=1e-3, steps=100, **kw):
    return FlowConfig(g=g, grid=uniform_grid(g, steps), **kw)


def _direct_velocity(s, t, anchors, weights=None):
    """Naive-domain evaluation of the printed velocity formula."""
    s = np.asarray(s, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    n = anchors.shape[0]
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights)
    expo = np.array([np.exp(-np.sum((s - t * a) ** 2) / (2.0 * (1.0 - t) ** 2)) for a in anchors])
    num = sum(w[i] * (anchors[i] - s) * expo[i] for i in range(n))
    return num / ((1.0 - t) * np.sum(w * expo))


class TestAnchorSet:
    def test_rejects_empty(self):
        with pytest.raises(FlowError):
            AnchorSet(np.zeros((0, 2)))

    def test_rejects_nonfinite(self):
        with pytest.raises(FlowError):
            AnchorSet(np.array([[np.nan, 0.0]]))

    def test_rejects_bad_weights(self):
        with pytest.raises(FlowError):
            AnchorSet(np.zeros((2, 1)), weights=np.array([0.7, 0.7]))
        with pytest.raises(FlowError):
            AnchorSet(np.zeros((2, 1)), weights=np.array([-0.5, 1.5]))

    def test_uniform_weights_match_unweighted_bitwise(self):
        rng = np.random.default_rng(0)
        anchors = rng.standard_normal((5, 2))
        s = rng.standard_normal(2)
        plain = velocity(s, 0.3, AnchorSet(anchors))
        weighted = velocity(s, 0.3, AnchorSet(anchors, weights=np.full(5, 0.2)))
        assert np.array_equal(plain.data, weighted.data)
        T.reset_tape()


class TestFlowConfig:
    def test_guard_range(self):
        with pytest.raises(FlowError):
            _cfg(g=0.0)
        with pytest.raises(FlowError):
            _cfg(g=1.0)

    def test_grid_monotonic(self):
        with pytest.raises(FlowError):
            FlowConfig(g=0.1, grid=np.array([0.0, 0.5, 0.5]))

    def test_cutoff_range(self):
        with pytest.raises(FlowError):
            FlowConfig(g=0.1, grid=uniform_grid(0.1, 10), cutoff_u=11)

    def test_unknown_solver(self):
        with pytest.raises(FlowError):
            _cfg(solver="rk4")


class TestVelocity:
    def test_single_anchor(self):
        v = velocity(np.array([0.0]), 0.5, AnchorSet(np.array([[2.0]])))
        assert v.data == pytest.approx([4.0], abs=1e-12)
        T.reset_tape()

    def test_t_zero_is_mean_anchor_pull(self):
        v = velocity(np.array([0.3]), 0.0, AnchorSet(np.array([[-1.0], [1.0]])))
        assert v.data == pytest.approx([-0.3], abs=1e-12)
        T.reset_tape()

    def test_log_domain_matches_direct_formula(self):
        anchors = np.array([[-1.0], [1.0]])
        v = velocity(np.array([0.5]), 0.5, AnchorSet(anchors))
        oracle = _direct_velocity(np.array([0.5]), 0.5, anchors)
        assert abs(v.data[0] - oracle[0]) < 1e-12
        T.reset_tape()

    def test_log_domain_matches_direct_random(self):
        rng = np.random.default_rng(5)
        anchors = rng.standard_normal((4, 3))
        weights = rng.uniform(0.1, 1.0, 4)
        weights /= weights.sum()
        for t in (0.0, 0.4, 0.9):
            s = rng.standard_normal(3)
            v = velocity(s, t, AnchorSet(anchors, weights=weights))
            oracle = _direct_velocity(s, t, anchors, weights)
            assert np.max(np.abs(v.data - oracle)) < 1e-10
        T.reset_tape()

    def test_rejects_t_at_one(self):
        with pytest.raises(FlowError):
            velocity(np.zeros(1), 1.0, AnchorSet(np.array([[1.0]])))


class TestIntegrateForward:
    def test_single_anchor_linear_interpolation(self):
        a = np.array([[1.5, -0.5]])
        cfg = _cfg(steps=100)
        s0 = np.array([0.2, 0.8])
        with T.no_grad():
            end = integrate_forward(s0, AnchorSet(a), cfg)
        expected = (1.0 - cfg.grid[-1]) * s0 + cfg.grid[-1] * a[0]
        assert np.max(np.abs(end.data - expected)) < 1e-3

    def test_symmetric_anchors_fixed_point(self):
        cfg = _cfg(steps=50)
        with T.no_grad():
            traj = integrate_forward(np.array([0.0]), AnchorSet(np.array([[-2.0], [2.0]])), cfg, record=True)
        assert np.max(np.abs(traj.as_array())) < 1e-12

    def test_two_anchor_endpoint_vs_dense_grid(self):
        anchors = AnchorSet(np.array([[-1.0], [1.0]]))
        with T.no_grad():
            end = integrate_forward(np.array([0.1]), anchors, _cfg(steps=100))
            oracle = integrate_forward(np.array([0.1]), anchors, _cfg(steps=10000))
        assert abs(end.data[0] - oracle.data[0]) < 1e-2
        assert abs(end.data[0] - 1.0) < 1e-2

    def test_trajectory_shape_and_grid(self):
        cfg = _cfg(steps=10)
        with T.no_grad():
            traj = integrate_forward(np.zeros((3, 2)), AnchorSet(np.eye(2)), cfg, record=True)
        assert len(traj.states) == 10
        assert traj.as_array().shape == (10, 3, 2)
        assert np.array_equal(traj.grid, cfg.grid)


class TestIntegrateBackward:
    def test_single_anchor_gives_scaled_noise(self):
        # single-anchor backward flow is the reverse linear interpolation
        cfg = _cfg(steps=100, alpha=0.7)
        a = np.array([1.0, -2.0])
        eps = np.array([0.3, 0.4])
        with T.no_grad():
            z = integrate_backward(a, eps, AnchorSet(a.reshape(1, 2)), cfg)
        assert np.max(np.abs(z.data - cfg.alpha * eps)) < 1e-6

    def test_alpha_zero_symmetry(self):
        cfg = _cfg(steps=100, alpha=0.0)
        A = AnchorSet(np.array([[-1.5], [1.5]]))
        with T.no_grad():
            z_neg = integrate_backward(np.array([-1.5]), np.zeros(1), A, cfg)
            z_pos = integrate_backward(np.array([1.5]), np.zeros(1), A, cfg)
        assert z_neg.data[0] == pytest.approx(-z_pos.data[0], abs=1e-10)

    def test_misassignment_matches_normal_cdf(self):
        from scipy.stats import norm

        g = 0.5
        cfg = FlowConfig(g=g, alpha=1.0, grid=uniform_grid(g, 100))
        A = AnchorSet(np.array([[-1.0], [1.0]]))
        rng = np.random.default_rng(123)
        draws = 20000
        rep = np.repeat(A.anchors.data, draws, axis=0)
        truth = np.repeat([0, 1], draws)
        with T.no_grad():
            z = compute_latents(rep, A, cfg, rng)
            zones = assign_zones(z.data, A, cfg)
        rate = (zones != truth).mean()
        p = norm.cdf((g - 1.0) / g)
        se = np.sqrt(p * (1 - p) / (2 * draws))
        assert abs(rate - p) < 3 * se


class TestComputeLatents:
    def test_n1_latent_is_scaled_eps(self):
        cfg = _cfg(steps=100, alpha=1.0)
        a = np.array([[0.5, 0.5]])
        rng = np.random.default_rng(9)
        eps_expected = np.random.default_rng(9).standard_normal((1, 2))
        with T.no_grad():
            z = compute_latents(a, AnchorSet(a), cfg, rng)
        assert np.max(np.abs(z.data - cfg.alpha * eps_expected)) < 1e-6

    def test_alpha_zero_deterministic(self):
        cfg = _cfg(steps=50, alpha=0.0)
        anchors = np.array([[1.0, 0.0], [-1.0, 0.0]])
        A = AnchorSet(anchors)
        with T.no_grad():
            z1 = compute_latents(anchors, A, cfg, np.random.default_rng(1))
            z2 = compute_latents(anchors, A, cfg, np.random.default_rng(999))
        assert np.array_equal(z1.data, z2.data)

    def test_pooled_latents_pass_moment_test(self):
        # 16 circle anchors, alpha=1: pooled latents approach N(0, I)
        cfg = _cfg(steps=50)
        angles = 2.0 * np.pi * np.arange(16) / 16
        anchors = 2.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        A = AnchorSet(anchors)
        rng = np.random.default_rng(42)
        draws = 1000  # smaller than the acceptance run; looser bounds
        rep = np.repeat(anchors, draws, axis=0)
        outs = []
        with T.no_grad():
            for lo in range(0, rep.shape[0], 4000):
                outs.append(compute_latents(rep[lo : lo + 4000], A, cfg, rng).data)
        z = np.concatenate(outs)
        assert np.linalg.norm(z.mean(axis=0)) < 0.08
        assert np.max(np.abs(np.cov(z, rowvar=False) - np.eye(2))) < 0.08

    def test_gradient_reaches_anchor_producer(self):
        cfg = _cfg(steps=10)
        rng_data = np.random.default_rng(2)

        def f(theta):
            A = AnchorSet(theta)
            z = compute_latents(theta, A, cfg, np.random.default_rng(7))
            return T.squared_norm(z)

        report = grad_check(f, Tensor(rng_data.standard_normal((3, 2))), h=1e-6, tol=1e-4)
        assert report.passed


class TestAssignZone:
    def test_round_trip_alpha_zero(self):
        cfg = _cfg(steps=100, alpha=0.0)
        anchors = np.array([[2.0, 0.0], [-2.0, 0.0], [0.0, 2.0]])
        A = AnchorSet(anchors)
        with T.no_grad():
            for i in range(3):
                z = integrate_backward(anchors[i], np.zeros(2), A, cfg)
                assert assign_zone(z.data, A, cfg) == i

    def test_1d_zones_split_at_zero(self):
        cfg = _cfg(steps=100)
        A = AnchorSet(np.array([[-1.0], [1.0]]))
        assert assign_zone(np.array([-0.3]), A, cfg) == 0
        assert assign_zone(np.array([0.3]), A, cfg) == 1

    def test_agrees_with_dense_grid_oracle(self):
        rng = np.random.default_rng(17)
        anchors = np.array([[2.0, 0.0], [-1.0, 1.5], [-1.0, -1.5]])
        A = AnchorSet(anchors)
        z = rng.standard_normal((1000, 2))
        coarse = assign_zones(z, A, _cfg(steps=100))
        dense = assign_zones(z, A, _cfg(steps=10000))
        assert (coarse == dense).mean() >= 0.99


class TestCheckpointModes:
    def test_modes_agree_small(self):
        cfg = _cfg(steps=10)
        rng = np.random.default_rng(3)
        theta0 = rng.standard_normal((2, 2))
        eps = rng.standard_normal((2, 2))
        grads = {}
        for mode in (FULL_TAPE, RECOMPUTE):
            theta = Tensor(theta0.copy(), requires_grad=True)
            z = integrate_backward(theta, eps, AnchorSet(theta), cfg, policy=mode)
            T.backward(T.squared_norm(z))
            grads[mode] = theta.grad.copy()
            T.reset_tape()
        assert np.max(np.abs(grads[FULL_TAPE] - grads[RECOMPUTE])) < 1e-12

    def test_n1_modes_agree(self):
        cfg = _cfg(steps=10)
        grads = {}
        for mode in (FULL_TAPE, RECOMPUTE):
            theta = Tensor(np.array([[0.5, -0.5]]), requires_grad=True)
            z = integrate_backward(theta, np.array([[0.1, 0.2]]), AnchorSet(theta), cfg, policy=mode)
            T.backward(T.squared_norm(z))
            grads[mode] = theta.grad.copy()
            T.reset_tape()
        assert np.array_equal(grads[FULL_TAPE], grads[RECOMPUTE])

    def test_recompute_retains_fewer_floats(self):
        cfg = _cfg(steps=20)
        rng = np.random.default_rng(4)
        theta0 = rng.standard_normal((8, 2))
        eps = rng.standard_normal((8, 2))
        counts = {}
        for mode in (FULL_TAPE, RECOMPUTE):
            tape = T.current_tape()
            theta = Tensor(theta0.copy(), requires_grad=True)
            z = integrate_backward(theta, eps, AnchorSet(theta), cfg, policy=mode)
            counts[mode] = tape.retained_floats
            T.reset_tape()
        assert counts[RECOMPUTE] < counts[FULL_TAPE]
