import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from subcurve.autodiff import Tape, fd_hessian, grad_fn
from subcurve.curvature import LowRankHessian, batch_class_gradients, batch_eigenvalues
from subcurve.diagnostics import (
    QuadraticProblem,
    eigenspectrum_report,
    gauss_newton_from_jacobian,
    gauss_newton_hessian,
    kink_free_inputs,
    logit_residuals,
    low_rank_error,
    quadratic_closed_form,
    quadratic_gd_trajectory,
    random_cosine_stats,
    rank_trace,
    subspace_overlap,
    to_json,
)
from subcurve.linalg import EigenSystem
from subcurve.model import ModelSpec, param_count


def softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def looped_gauss_newton(jac, probs):
    """Term-by-term double sum over classes, no tensor contractions."""
    b, c, n = jac.shape
    h = np.zeros((n, n))
    for mu in range(b):
        for k in range(c):
            for l in range(c):
                w = probs[mu, k] * ((k == l) - probs[mu, l])
                h += w * np.outer(jac[mu, k], jac[mu, l])
    return h / b


def orthonormal_columns(n, c, seed):
    q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((n, c)))
    return q


class TestQuadratic:
    def test_one_step_convergence(self):
        p = QuadraticProblem(np.eye(1), np.array([2.0]))
        d = quadratic_gd_trajectory(p, [5.0], 1.0, 3)
        assert d[0] == 3.0
        assert np.all(d[1:] == 0.0)

    def test_growth_factor(self):
        p = QuadraticProblem(np.diag([4.0, 1.0]), np.zeros(2))
        d = quadratic_gd_trajectory(p, [1.0, 0.0], 0.6, 10)
        np.testing.assert_allclose(d[1:] / d[:-1], 1.4, rtol=1e-12)
        d2 = quadratic_gd_trajectory(p, [0.0, 1.0], 0.6, 10)
        np.testing.assert_allclose(d2[1:] / d2[:-1], 0.4, rtol=1e-12)

    def test_fifty_random_problems_match_closed_form(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            p = QuadraticProblem.random(6, rng)
            eta = rng.uniform(0.1, 1.9) / p.lambda_max
            theta0 = rng.standard_normal(6)
            traj = quadratic_gd_trajectory(p, theta0, eta, 30)
            # independent closed form from numpy's eigensolver
            lam, vec = np.linalg.eigh(p.hessian)
            coords = vec.T @ (theta0 - p.minimum)
            expected = [math.sqrt(sum((1 - eta * l) ** (2 * t) * c * c for l, c in zip(lam, coords)))
                        for t in range(31)]
            assert np.max(np.abs(traj - expected)) < 1e-9
            assert np.max(np.abs(quadratic_closed_form(p, theta0, eta, 30) - traj)) < 1e-9

    def test_stability_boundary(self):
        rng = np.random.default_rng(1)
        p = QuadraticProblem.random(5, rng)
        theta0 = p.minimum + rng.standard_normal(5)
        assert np.all(np.diff(quadratic_gd_trajectory(p, theta0, 1.9 / p.lambda_max, 100)) < 0)
        assert quadratic_gd_trajectory(p, theta0, 2.1 / p.lambda_max, 100)[-1] > 10.0

    def test_validation(self):
        with pytest.raises(ValueError):
            QuadraticProblem(np.array([[1.0, 2.0], [0.0, 1.0]]), np.zeros(2))
        with pytest.raises(ValueError):
            QuadraticProblem(np.diag([1.0, -1.0]), np.zeros(2))
        with pytest.raises(ValueError):
            quadratic_gd_trajectory(QuadraticProblem(np.eye(1), np.zeros(1)), [1.0], 0.1, 0)


class TestGaussNewton:
    def test_uniform_axis_case(self):
        c = 3
        jac = np.eye(c)[None, :, :]  # logit gradients are axis vectors
        h = gauss_newton_from_jacobian(jac, np.full((1, c), 1 / c))
        np.testing.assert_allclose(h, (np.eye(c) - np.ones((c, c)) / c) / c, atol=1e-15)

    def test_matches_looped_assembly(self):
        rng = np.random.default_rng(2)
        jac = rng.standard_normal((5, 3, 7))
        p = softmax(rng.standard_normal((5, 3)))
        np.testing.assert_allclose(gauss_newton_from_jacobian(jac, p), looped_gauss_newton(jac, p),
                                   atol=1e-13)

    def test_linear_softmax_equals_fd_hessian(self):
        rng = np.random.default_rng(3)
        spec = ModelSpec((4, 3))
        theta = rng.standard_normal(param_count(spec))
        x = rng.standard_normal((6, 4))
        labels = rng.integers(0, 3, 6)
        gn = gauss_newton_hessian(spec, theta, x, labels)
        fd = fd_hessian(grad_fn(spec, x, labels), theta)
        assert np.max(np.abs(gn - fd)) < 1e-6

    @pytest.mark.parametrize("seed", range(3))
    def test_relu_mlp_hessian_decomposition(self, seed):
        # a multi-layer ReLU net is bilinear across layers, so the residual term
        # (1/|B|) sum (p - y) grad^2 z survives off the diagonal layer blocks
        rng = np.random.default_rng(seed + 10)
        spec = ModelSpec((3, 5, 3))
        theta = 0.7 * rng.standard_normal(param_count(spec))
        x = kink_free_inputs(spec, theta, rng.standard_normal((5, 3)), seed=seed)
        labels = rng.integers(0, 3, 5)
        tape = Tape(spec, theta, x, labels)
        weights = (tape.forward.probs - tape.forward.labels) / x.shape[0]
        residual = fd_hessian(lambda t: Tape(spec, t, x).seeded_logit_gradient(weights), theta)
        gn = gauss_newton_hessian(spec, theta, x, labels)
        fd = fd_hessian(grad_fn(spec, x, labels), theta)
        scale = np.max(np.abs(fd))
        assert np.max(np.abs(fd - gn - residual)) / scale < 1e-4
        for slot in spec.layout():
            block = np.r_[slot.weight, slot.bias]
            sub = np.ix_(block, block)
            assert np.max(np.abs(fd[sub] - gn[sub])) / scale < 1e-4
        assert np.linalg.eigvalsh(gn)[0] >= -1e-9

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 6), st.integers(2, 4), st.integers(1, 12), st.integers(0, 2**31))
    def test_psd(self, b, c, n, seed):
        rng = np.random.default_rng(seed)
        jac = rng.standard_normal((b, c, n))
        p = softmax(3 * rng.standard_normal((b, c)))
        assert np.linalg.eigvalsh(gauss_newton_from_jacobian(jac, p))[0] >= -1e-9

    def test_dense_cap(self):
        with pytest.raises(ValueError):
            gauss_newton_hessian(ModelSpec((10, 10)), np.zeros(110), np.zeros((1, 10)), [0], cap=100)


class TestLowRankError:
    def test_vanishing_residuals_exact(self):
        # each logit gradient is y_k c_k with orthogonal c_k, so every residual is zero
        rng = np.random.default_rng(4)
        b, c, n = 9, 3, 10
        cols = orthonormal_columns(n, c, 4).T * np.array([1.0, 2.5, 0.7])[:, None]
        labels = np.arange(b) % c
        jac = np.zeros((b, c, n))
        for mu, k in enumerate(labels):
            jac[mu, k] = cols[k]
        probs = softmax(rng.standard_normal((b, c)))
        gn = gauss_newton_from_jacobian(jac, probs)
        grads = batch_class_gradients(jac, labels, c)
        lam = batch_eigenvalues(probs, np.eye(c)[labels], grads)
        dirs = np.vstack([g / np.linalg.norm(g) for g in grads])
        err = low_rank_error(gn, LowRankHessian(dirs, lam, (0, 1, 2), True))
        assert err["frobenius_rel_error"] < 1e-10
        assert err["top_subspace_angle"] < 1e-6

    def test_matches_direct_reassembly(self):
        rng = np.random.default_rng(5)
        spec = ModelSpec((3, 4, 3))
        theta = rng.standard_normal(param_count(spec))
        x = rng.standard_normal((6, 3))
        labels = np.array([0, 1, 2, 0, 1, 2])
        tape = Tape(spec, theta, x, labels)
        jac = tape.jacobian()
        gn = looped_gauss_newton(jac, tape.forward.probs)
        dirs = rng.standard_normal((3, param_count(spec)))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        lam = np.array([0.3, 1.2, 0.05])
        low = np.zeros_like(gn)
        for l, v in zip(lam, dirs):
            low += l * np.outer(v, v)
        expected = np.linalg.norm(low - gn) / np.linalg.norm(gn)
        got = low_rank_error(gauss_newton_from_jacobian(jac, tape.forward.probs),
                             LowRankHessian(dirs, lam))
        assert abs(got["frobenius_rel_error"] - expected) < 1e-12

    def test_single_direction_coinciding_span(self):
        h = np.diag([5.0, 1.0, 0.5])
        err = low_rank_error(h, LowRankHessian(np.array([[-1.0, 0.0, 0.0]]), np.array([5.0])))
        assert err["top_subspace_angle"] == pytest.approx(0.0, abs=1e-7)


class TestResiduals:
    def test_identities(self):
        rng = np.random.default_rng(6)
        b, c, n = 10, 3, 8
        jac = rng.standard_normal((b, c, n))
        labels = np.array([0, 1, 2, 0, 0, 1, 2, 2, 0, 1])
        # make all class-1 examples share their class-1 logit gradient
        jac[labels == 1, 1] = jac[np.flatnonzero(labels == 1)[0], 1]
        grads = batch_class_gradients(jac, labels, c)
        stats = logit_residuals(jac, labels, grads)["per_class"]
        assert stats[1]["within_max"] < 1e-15
        for k in range(c):
            assert stats[k]["within_mean_residual_norm"] < 1e-12
            other = np.flatnonzero(labels != k)
            rel = np.linalg.norm(jac[other, k], axis=1) / np.linalg.norm(grads[k])
            assert stats[k]["other_max"] == pytest.approx(rel.max(), rel=1e-14)
            assert stats[k]["other_mean"] == pytest.approx(rel.mean(), rel=1e-14)

    def test_absent_class(self):
        jac = np.ones((2, 2, 3))
        grads = batch_class_gradients(jac, [0, 0], 2)
        assert logit_residuals(jac, [0, 0], grads)["per_class"][1] is None


class TestOverlap:
    def test_permuted_eigenvectors(self):
        v = orthonormal_columns(20, 4, 7)
        perm = [2, 0, 3, 1]
        extra = orthonormal_columns(20, 6, 8)
        eig = EigenSystem(np.arange(10.0)[::-1], np.hstack([v[:, perm], extra]))
        rep = subspace_overlap(list(v.T), eig, 1e-6)
        assert rep.assignment_score == pytest.approx(1.0, abs=1e-12)
        assert rep.combined_rank == 4
        for k, j in enumerate(rep.assignment):
            assert perm[j] == k
        assert all(0.0 <= x <= 1.0 + 1e-12 for row in rep.cosine_matrix for x in row)

    def test_independent_sets(self):
        v = orthonormal_columns(200, 5, 9)
        e = orthonormal_columns(200, 5, 10)
        rep = subspace_overlap(list(v.T), EigenSystem(np.ones(5), e), 1e-6)
        assert rep.combined_rank == 10
        assert rep.assignment_score < 0.5

    def test_requires_enough_eigenvectors(self):
        with pytest.raises(ValueError):
            subspace_overlap([np.ones(3), np.arange(3.0)], EigenSystem(np.ones(1), np.ones((3, 1))))

    def test_rank_trace_skips_absent(self):
        v = orthonormal_columns(12, 3, 11)
        eig = EigenSystem(np.ones(3), v)
        trace = rank_trace([(1, [v[:, 0], None, v[:, 2]]), (2, [None, None, None])], eig)
        assert trace[0]["rank"] == 3 and trace[0]["present"] == 2
        assert set(trace[0]) >= {"sigma_3", "sigma_4", "sigma_6"}
        assert trace[1]["rank"] == 0

    def test_random_cosine_monte_carlo(self):
        d = 10_000
        stats = random_cosine_stats(d, 10_000, seed=0)
        assert stats["expected"] == pytest.approx(math.sqrt(2 / (math.pi * d)))
        assert abs(stats["mean"] - stats["expected"]) < 3 * stats["stderr"]


class TestSpectrum:
    def test_linear_softmax_closed_form(self):
        # at theta = 0 the Hessian is a Kronecker product of the uniform-softmax
        # block with the second-moment matrix of the augmented inputs
        c, d = 3, 4
        spec = ModelSpec((d, c))
        x = 2.0 * np.eye(d)
        labels = [0, 1, 2, 0]
        gn = gauss_newton_hessian(spec, np.zeros(param_count(spec)), x, labels)
        aug = np.hstack([x, np.ones((d, 1))])
        second = aug.T @ aug / d
        block = (np.eye(c) - 1.0 / c) / c
        expected = np.sort(np.outer(np.linalg.eigvalsh(block), np.linalg.eigvalsh(second)).ravel())[::-1]
        rep = eigenspectrum_report(gn, 100, c)
        assert len(rep["top_eigenvalues"]) == param_count(spec)
        np.testing.assert_allclose(rep["top_eigenvalues"], expected, atol=1e-8)
        assert min(rep["top_eigenvalues"]) >= -1e-9

    def test_gap_ratio_and_fd(self):
        h = np.diag([8.0, 4.0, 1.0, 0.5])
        rep = eigenspectrum_report(h, 2, 2, fd_hessian=h)
        assert rep["top_eigenvalues"] == [8.0, 4.0]
        assert rep["gap_ratio"] == 4.0
        assert rep["fd_top_eigenvalues"] == [8.0, 4.0]

    def test_json_schema(self):
        doc = json.loads(to_json({"a": 1}))
        assert doc == {"schema": "diag-v1", "a": 1}
