from dataclasses import replace

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from conftest import random_dense_problem, random_state, small_problem
from vardct.projector import ImageGrid, SystemMatrix
from vardct.simulate import Sinogram
from vardct.transforms import build_transform
from vardct.vard import (PosteriorState, Problem, VardConfig, compute_workspace, gamma_update,
                         mean_update, objective, objective_gradient, run_vard, surrogate_value,
                         variance_update)


def one_pixel(y, eta, kind="identity"):
    A = SystemMatrix(sp.csr_matrix(np.array([[1.0]])))
    T = build_transform(ImageGrid(1, 1, 1.0), kind)
    return Problem(A, T, Sinogram(np.array([y]), eta))


def dense_objective(state, prob, dense):
    D = prob.T.toarray()
    w = 1.0 / prob.T.expand(state.gamma)
    p = dense @ state.m
    pt = (dense ** 2) @ state.v
    F1 = prob.y @ p + np.sum(prob.sino.eta * np.exp(-p + pt / 2))
    F2 = 0.5 * np.sum((D @ state.m) ** 2 * w)
    F3 = 0.5 * (np.sum((D ** 2 @ state.v) * w) - np.log(state.v).sum() + np.log(state.gamma).sum())
    return F1 + F2 + F3


def full_surrogate(m, v, state_t, ws_t):
    return surrogate_value(m, v, state_t, ws_t) + ws_t.h + 0.5 * np.log(state_t.gamma).sum()


class TestHandExamples:
    def test_objective_value(self):
        prob = one_pixel(0, 10.0)
        F = objective(PosteriorState(np.zeros(1), np.ones(1), np.ones(1)), prob)
        np.testing.assert_allclose(F.F, 10 * np.exp(0.5) + 0.5, rtol=1e-14)
        np.testing.assert_allclose([F.F1, F.F2, F.F3], [10 * np.exp(0.5), 0.0, 0.5], rtol=1e-14)

    def test_fast_newton_step(self):
        # b = 4, b_y = 1, f = 0, g = 1/2, Z1 = 3/2
        prob = one_pixel(1, 4 * np.exp(-0.5))
        st_ = PosteriorState(np.zeros(1), np.ones(1), np.ones(1))
        ws = compute_workspace(st_, prob)
        assert ws.Z1 == 1.5
        np.testing.assert_allclose(mean_update(st_, ws), [3.0 / 7.0], rtol=1e-14)

    def test_variance_fixed_point(self):
        # b~ = 1, xi = 2: stationary at v = 1/4
        prob = one_pixel(0, 2 * np.exp(-0.125))
        st_ = PosteriorState(np.zeros(1), np.array([0.25]), np.array([0.5]))
        ws = compute_workspace(st_, prob)
        np.testing.assert_allclose([ws.b_tilde[0], ws.xi[0]], [1.0, 2.0], rtol=1e-14)
        np.testing.assert_allclose(variance_update(st_, ws), [0.25], rtol=1e-10)

    def test_variance_without_data(self):
        rng = np.random.default_rng(0)
        prob, _ = random_dense_problem(rng)
        st_ = random_state(rng, prob)
        ws = replace(compute_workspace(st_, prob), b_tilde=np.zeros(4))
        np.testing.assert_allclose(variance_update(st_, ws), 1.0 / ws.xi, rtol=1e-14)

    def test_gamma_identity(self):
        T = build_transform(ImageGrid(1, 1, 1.0), "identity")
        np.testing.assert_allclose(gamma_update(np.array([2.0]), np.array([3.0]), T), [7.0])

    def test_gamma_floor(self):
        T = build_transform(ImageGrid(2, 2, 1.0), "overcomplete")
        g = gamma_update(np.zeros(4), np.zeros(4), T)
        assert np.all(g > 0)


class TestDenseOracles:
    @pytest.mark.parametrize("kind", ["identity", "complete", "overcomplete"])
    def test_objective(self, kind):
        rng = np.random.default_rng(1)
        prob, dense = random_dense_problem(rng, kind=kind)
        st_ = random_state(rng, prob)
        np.testing.assert_allclose(objective(st_, prob).F, dense_objective(st_, prob, dense),
                                   rtol=1e-12)

    @pytest.mark.parametrize("kind", ["complete", "overcomplete"])
    def test_workspace_coefficients(self, kind):
        rng = np.random.default_rng(2)
        prob, dense = random_dense_problem(rng, kind=kind)
        st_ = random_state(rng, prob)
        ws = compute_workspace(st_, prob)
        D = prob.T.toarray()
        w = 1.0 / st_.gamma
        mu = prob.sino.eta * np.exp(-dense @ st_.m + (dense ** 2) @ st_.v / 2)
        np.testing.assert_allclose(ws.b, dense.T @ mu, rtol=1e-12)
        np.testing.assert_allclose(ws.b_tilde, 0.5 * (dense ** 2).T @ mu, rtol=1e-12)
        np.testing.assert_allclose(ws.f, D.T @ ((D @ st_.m) * w), rtol=1e-12)
        np.testing.assert_allclose(ws.g, 0.5 * prob.T.Z2 * np.abs(D).T @ w, rtol=1e-12)
        np.testing.assert_allclose(ws.xi, (D ** 2).T @ w, rtol=1e-12)

    def test_exact_mean_matches_grid_search(self):
        rng = np.random.default_rng(3)
        prob, _ = random_dense_problem(rng)
        st_ = random_state(rng, prob)
        ws = compute_workspace(st_, prob)
        _, m_bar = mean_update(st_, ws, "exact_1d", return_unconstrained=True)
        Z1 = ws.Z1
        for j in range(prob.A.p):
            t = np.linspace(st_.m[j] - 5, st_.m[j] + 5, 400001)
            dm = t - st_.m[j]
            s = ws.b_y[j] * t + ws.b[j] / Z1 * np.exp(-Z1 * dm) + ws.f[j] * dm + ws.g[j] * dm ** 2
            assert abs(m_bar[j] - t[np.argmin(s)]) < 1e-4

    def test_gradient_finite_difference(self):
        rng = np.random.default_rng(4)
        prob, _ = random_dense_problem(rng, kind="overcomplete")
        st_ = random_state(rng, prob)
        gm, gv, gg = objective_gradient(st_, prob)
        h = 1e-6
        for name, grad in (("m", gm), ("v", gv), ("gamma", gg)):
            base = getattr(st_, name)
            fd = np.empty_like(base)
            for k in range(base.size):
                up, dn = st_.copy(), st_.copy()
                getattr(up, name)[k] += h
                getattr(dn, name)[k] -= h
                fd[k] = (objective(up, prob).F - objective(dn, prob).F) / (2 * h)
            np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-6)


class TestSurrogate:
    @pytest.mark.parametrize("kind", ["complete", "overcomplete"])
    def test_equality_at_expansion_point(self, kind):
        rng = np.random.default_rng(5)
        prob, _ = random_dense_problem(rng, kind=kind)
        st_ = random_state(rng, prob)
        ws = compute_workspace(st_, prob)
        np.testing.assert_allclose(full_surrogate(st_.m, st_.v, st_, ws), objective(st_, prob).F,
                                   rtol=1e-12)

    @pytest.mark.parametrize("kind", ["identity", "complete", "overcomplete"])
    def test_majorizes(self, kind):
        rng = np.random.default_rng(6)
        prob, _ = random_dense_problem(rng, kind=kind)
        st_ = random_state(rng, prob)
        ws = compute_workspace(st_, prob)
        for _ in range(1000):
            m = st_.m + rng.normal(0, 1.5, 4)
            v = rng.uniform(1e-3, 3.0, 4)
            F = objective(PosteriorState(m, v, st_.gamma), prob).F
            S = full_surrogate(m, v, st_, ws)
            assert S >= F - 1e-10 * abs(F)


class TestObjectiveProperties:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_midpoint_convexity(self, seed):
        rng = np.random.default_rng(seed)
        prob, _ = random_dense_problem(rng, kind="complete")
        s1, s2 = random_state(rng, prob), random_state(rng, prob)
        s2.gamma = s1.gamma
        mid = PosteriorState((s1.m + s2.m) / 2, (s1.v + s2.v) / 2, s1.gamma)
        F = lambda s: objective(s, prob).F
        assert F(mid) <= 0.5 * (F(s1) + F(s2)) + 1e-10 * abs(F(s1) + F(s2))

    @pytest.mark.parametrize("kw", [{"kind": "complete"}, {"kind": "overcomplete"},
                                    {"kind": "overcomplete", "tied": True}])
    def test_gamma_step_is_stationary(self, scenario8, kw):
        prob = small_problem(scenario8, **kw)
        rng = np.random.default_rng(7)
        m, v = rng.uniform(0, 2, 64), rng.uniform(0.1, 1, 64)
        st_ = PosteriorState(m, v, gamma_update(m, v, prob.T))
        _, _, gg = objective_gradient(st_, prob)
        np.testing.assert_allclose(gg * st_.gamma, 0.0, atol=1e-12)


class TestRunVard:
    def test_zero_iterations(self, scenario8):
        prob = small_problem(scenario8)
        res = run_vard(prob, VardConfig(n_iters=0))
        assert len(res.trace) == 1
        np.testing.assert_array_equal(res.state.m, 0.0)
        np.testing.assert_array_equal(res.state.gamma, 100.0)

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            VardConfig(solver_mode="slow")
        with pytest.raises(ValueError):
            VardConfig(n_iters=-1)

    def test_mismatched_problem(self, scenario8):
        with pytest.raises(ValueError):
            Problem(scenario8.A, build_transform(ImageGrid(2, 2, 1.0), "identity"),
                    scenario8.sample(1e3, 0))

    @pytest.mark.parametrize("kw", [{"kind": "identity"}, {"kind": "complete"},
                                    {"kind": "overcomplete"},
                                    {"kind": "overcomplete", "tied": True}])
    def test_monotone_and_positive(self, scenario8, kw):
        prob = small_problem(scenario8, **kw)
        res = run_vard(prob, VardConfig(n_iters=40, check_level="monotone"))
        F = [r["F"] for r in res.trace]
        assert np.all(np.diff(F) <= 1e-9 * np.abs(F[:-1]))
        assert res.state.m.min() >= 0 and res.state.v.min() > 0 and res.state.gamma.min() > 0

    def test_full_bound_exact(self, scenario8):
        prob = small_problem(scenario8)
        res = run_vard(prob, VardConfig(n_iters=15, solver_mode="exact_1d",
                                        check_level="full_bound"))
        assert len(res.bounds) == 15
        assert all(b.satisfied for b in res.bounds)

    def test_callback_and_resume(self, scenario8):
        prob = small_problem(scenario8)
        seen = []
        a = run_vard(prob, VardConfig(n_iters=6), callback=lambda t, s, o: seen.append(t))
        assert seen == list(range(1, 7))
        b = run_vard(prob, VardConfig(n_iters=3))
        c = run_vard(prob, VardConfig(n_iters=3), state=b.state)
        np.testing.assert_allclose(c.state.m, a.state.m, rtol=1e-12)

    def test_deterministic(self, scenario8):
        prob = small_problem(scenario8)
        a = run_vard(prob, VardConfig(n_iters=5))
        b = run_vard(prob, VardConfig(n_iters=5))
        np.testing.assert_array_equal(a.state.m, b.state.m)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from(["identity", "complete", "overcomplete"]))
    def test_exact_iteration_never_increases(self, seed, kind):
        rng = np.random.default_rng(seed)
        prob, _ = random_dense_problem(rng, kind=kind)
        st_ = random_state(rng, prob)
        res = run_vard(prob, VardConfig(n_iters=3, solver_mode="exact_1d"), state=st_)
        F = [r["F"] for r in res.trace]
        assert np.all(np.diff(F) <= 1e-10 * np.abs(F[:-1]))
