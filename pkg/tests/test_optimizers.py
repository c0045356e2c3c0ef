import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from subcurve.curvature import LowRankHessian, apply_pinv, project_complement
from subcurve.data import generate_blobs
from subcurve.model import ModelSpec, init_params
from subcurve.optimizers import (
    DivergenceError,
    MomentumState,
    OptimizerConfig,
    TrainState,
    qn_delta,
    qn_step,
    sgd_step,
    train_epoch,
)


def orthonormal(n, c, seed):
    q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((n, c)))
    return q.T.copy()


def no_momentum(method="sgd", eta=0.1, **kw):
    return OptimizerConfig(method=method, eta=eta, momentum_beta=0.0, **kw)


class TestSgd:
    def test_plain_step(self):
        rng = np.random.default_rng(0)
        theta, g = rng.standard_normal(5), rng.standard_normal(5)
        new, _ = sgd_step(theta, g, MomentumState.zeros(5), no_momentum(eta=0.3))
        np.testing.assert_array_equal(new, theta - 0.3 * g)

    def test_zero_gradient_fixed(self):
        theta = np.array([1.0, -2.0])
        m = MomentumState.zeros(2)
        cfg = OptimizerConfig(eta=0.5, momentum_beta=0.9)
        for _ in range(10):
            new, m = sgd_step(theta, np.zeros(2), m, cfg)
            np.testing.assert_array_equal(new, theta)

    def test_heavy_ball_recursion(self):
        cfg = OptimizerConfig(eta=0.1, momentum_beta=0.5)
        theta, m = np.zeros(1), MomentumState.zeros(1)
        theta, m = sgd_step(theta, np.array([1.0]), m, cfg)
        theta, m = sgd_step(theta, np.array([1.0]), m, cfg)
        # velocities 1 then 1.5
        np.testing.assert_allclose(theta, [-0.25], rtol=1e-15)

    def test_quadratic_contraction(self):
        lam = 3.0
        cfg = no_momentum(eta=1.9 / lam)
        theta, m = np.array([1.0]), MomentumState.zeros(1)
        for _ in range(20):
            new, m = sgd_step(theta, lam * theta, m, cfg)
            assert abs(abs(new[0]) / abs(theta[0]) - 0.9) < 1e-12
            theta = new

    @pytest.mark.parametrize("factor, grows", [(1.9, False), (2.1, True)])
    def test_divergence_boundary(self, factor, grows):
        rng = np.random.default_rng(1)
        q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
        eig = np.array([5.0, 2.0, 1.0, 0.5, 0.2, 0.1])
        h = (q * eig) @ q.T
        cfg = no_momentum(eta=factor / eig[0])
        theta, m = rng.standard_normal(6), MomentumState.zeros(6)
        dist = [np.linalg.norm(theta)]
        for _ in range(100):
            theta, m = sgd_step(theta, h @ theta, m, cfg)
            dist.append(np.linalg.norm(theta))
        diffs = np.diff(dist)
        if grows:
            assert dist[-1] > 1e3 * dist[0]
        else:
            assert np.all(diffs < 0)

    def test_non_finite_raises(self):
        with pytest.raises(DivergenceError):
            sgd_step(np.zeros(2), np.array([np.inf, 0.0]), MomentumState.zeros(2), no_momentum())


class TestQuasiNewton:
    def test_lambda_inverse_eta_reduces_to_sgd(self):
        eta = 0.25
        dirs = orthonormal(8, 3, 2)
        h = LowRankHessian(dirs, np.full(3, 1.0 / eta), (0, 1, 2), True)
        g = np.random.default_rng(3).standard_normal(8)
        np.testing.assert_allclose(qn_delta(g, h, eta), -eta * g, atol=1e-15)

    def test_pure_newton_along_direction(self):
        dirs = orthonormal(6, 2, 4)
        h = LowRankHessian(dirs, np.array([2.0, 7.0]), (0, 1), True)
        np.testing.assert_allclose(qn_delta(dirs[0], h, 0.1), -0.5 * dirs[0], atol=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 5), st.floats(1e-3, 1.0), st.integers(0, 2**31))
    def test_decomposition(self, c, eta, seed):
        n = 2 * c + 4
        rng = np.random.default_rng(seed)
        h = LowRankHessian(orthonormal(n, c, seed), rng.uniform(0.1, 10, c), tuple(range(c)), True)
        g = rng.standard_normal(n)
        expected = -apply_pinv(h, g) - eta * project_complement(h, g)
        assert np.max(np.abs(qn_delta(g, h, eta) - expected)) < 1e-12

    @settings(max_examples=20, deadline=None)
    @given(st.floats(0.0, 0.95), st.integers(0, 2**31))
    def test_no_directions_equals_sgd(self, beta, seed):
        rng = np.random.default_rng(seed)
        cfg = OptimizerConfig(method="quasi_newton", eta=0.07, momentum_beta=beta)
        h = LowRankHessian(np.empty((0, 5)), np.empty(0))
        theta = rng.standard_normal(5)
        m_sgd = m_qn = MomentumState(rng.standard_normal(5))
        a, b = theta, theta
        for _ in range(5):
            g = rng.standard_normal(5)
            a, m_sgd = sgd_step(a, g, m_sgd, cfg)
            b, m_qn = qn_step(b, g, h, m_qn, cfg)
            np.testing.assert_array_equal(a, b)

    def test_subspace_one_step_convergence(self):
        n, c = 12, 3
        rng = np.random.default_rng(5)
        dirs = orthonormal(n, c, 5)
        lam = np.array([40.0, 15.0, 6.0])
        lam_small = 0.3
        proj = dirs.T @ dirs
        hess = (dirs.T * lam) @ dirs + lam_small * (np.eye(n) - proj)
        minimum = rng.standard_normal(n)
        theta = rng.standard_normal(n)
        eta = 0.5
        h = LowRankHessian(dirs, lam, (0, 1, 2), True)
        new, _ = qn_step(theta, hess @ (theta - minimum), h, MomentumState.zeros(n),
                         no_momentum("quasi_newton", eta))
        err0, err1 = theta - minimum, new - minimum
        assert np.max(np.abs(dirs @ err1)) < 1e-10
        comp0, comp1 = err0 - proj @ err0, err1 - proj @ err1
        np.testing.assert_allclose(comp1, (1 - eta * lam_small) * comp0, atol=1e-12)

    def test_momentum_modes(self):
        dirs = orthonormal(4, 1, 6)
        h = LowRankHessian(dirs, np.array([2.0]), (0,), True)
        g = np.array([1.0, -1.0, 0.5, 2.0])
        theta = np.zeros(4)
        base = dict(method="quasi_newton", eta=0.1, momentum_beta=0.5)
        v0 = MomentumState(np.ones(4))
        comb, _ = qn_step(theta, g, h, v0, OptimizerConfig(**base))
        proj, _ = qn_step(theta, g, h, v0, OptimizerConfig(**base, momentum_applies_to="projected_only"))
        delta = qn_delta(g, h, 0.1)
        np.testing.assert_allclose(comb, delta - 0.1 * 0.5 * np.ones(4), atol=1e-15)
        np.testing.assert_allclose(proj, comb, atol=1e-15)  # same first step from equal velocity
        pg = project_complement(h, g)
        _, m = qn_step(theta, g, h, MomentumState.zeros(4),
                       OptimizerConfig(**base, momentum_applies_to="projected_only"))
        np.testing.assert_allclose(m.velocity, pg, atol=1e-15)

    def test_newton_step_cap(self):
        dirs = orthonormal(4, 1, 7)
        h = LowRankHessian(dirs, np.array([1e-8]), (0,), True)
        g = dirs[0].copy()
        capped = qn_delta(g, h, 0.1, cap=2.0)
        np.testing.assert_allclose(capped, -0.1 * g - 2.0 * dirs[0], atol=1e-12)

    def test_non_finite_dump(self):
        h = LowRankHessian(np.array([[1.0, 0.0]]), np.array([1e-300]), (3,), True)
        with np.errstate(over="ignore", invalid="ignore"), \
                pytest.raises(DivergenceError, match="class 3"):
            qn_step(np.zeros(2), np.array([1e10, 0.0]), h, MomentumState.zeros(2),
                    no_momentum("quasi_newton"))


class TestConfig:
    @pytest.mark.parametrize("kw", [
        dict(method="adam"), dict(eta=0.0), dict(momentum_beta=1.0), dict(gamma=1.0),
        dict(momentum_applies_to="both"), dict(lambda_floor=0.0),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            OptimizerConfig(**kw)

    def test_defaults(self):
        cfg = OptimizerConfig()
        assert (cfg.eta, cfg.momentum_beta, cfg.gamma, cfg.weight_decay) == (0.1, 0.9, 0.9, 0.0)
        assert cfg.momentum_applies_to == "combined_update" and not cfg.orthonormalize


class TestTrainEpoch:
    def setup_method(self):
        self.ds = generate_blobs(3, 10, 4, sigma=0.5, seed=0)
        self.spec = ModelSpec((4, 8, 3))

    def run(self, method, batch_size, seed=3, epochs=1):
        # the cap keeps tiny-batch quasi-Newton runs finite; these tests are about bookkeeping
        cfg = OptimizerConfig(method=method, eta=0.05, max_newton_step=1.0)
        state = TrainState.fresh(init_params(self.spec, 1), 3, cfg)
        rows = []
        for e in range(epochs):
            state, metrics = train_epoch(self.spec, self.ds, cfg, state, batch_size, seed + e)
            rows.extend(metrics)
        return state, rows

    @pytest.mark.parametrize("method", ["sgd", "quasi_newton"])
    @pytest.mark.parametrize("batch_size", [1, 4, 7, 30, 64])
    def test_row_count(self, method, batch_size):
        _, rows = self.run(method, batch_size)
        assert len(rows) == math.ceil(30 / batch_size)
        assert [r.step for r in rows] == list(range(1, len(rows) + 1))

    @pytest.mark.parametrize("method", ["sgd", "quasi_newton"])
    def test_deterministic(self, method):
        a_state, a = self.run(method, 8, epochs=3)
        b_state, b = self.run(method, 8, epochs=3)
        assert a == b
        assert a_state.theta.tobytes() == b_state.theta.tobytes()

    def test_full_batch_one_step(self):
        state, rows = self.run("quasi_newton", 30, epochs=4)
        assert len(rows) == 4 and state.step == 4 and state.epoch == 4
        assert len(rows[0].eigenvalues) == 3

    def test_observer_sees_every_step(self):
        seen = []
        cfg = OptimizerConfig(method="sgd", eta=0.05)
        state = TrainState.fresh(init_params(self.spec, 1), 3, cfg)
        train_epoch(self.spec, self.ds, cfg, state, 10, 0,
                    observer=lambda step, grads, h: seen.append((step, len(grads), h)))
        assert [s[0] for s in seen] == [1, 2, 3]
        assert all(n == 3 and h is None for _, n, h in seen)

    def test_divergence_carries_partial_metrics(self):
        cfg = OptimizerConfig(method="sgd", eta=1e9, momentum_beta=0.0)
        state = TrainState.fresh(init_params(self.spec, 1), 3, cfg)
        with pytest.raises(DivergenceError) as info:
            for e in range(5):
                state, _ = train_epoch(self.spec, self.ds, cfg, state, 5, e)
        assert info.value.step >= 0
        assert isinstance(info.value.metrics, list)
