"""Acceptance criteria 1-12.

Each test records one PASS/FAIL line (echoed in the terminal summary) and
then asserts. Criterion 11 is the full-scale reproduction and runs only with
``VARDCT_FULL_SCALE=1``.
"""

import math
import os
import time

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from conftest import ACCEPTANCE_LINES
from vardct.baselines import Rewl2Config, fbp_reconstruct, run_mle, run_rewl2
from vardct.diagnostics import kkt_residuals, nrmse
from vardct.projector import ImageGrid, build_system_matrix
from vardct.sbl import SblConfig, run_sbl
from vardct.scenarios import desk_scenario, make_geometry, make_grid
from vardct.simulate import letters, sample_sinogram
from vardct.transforms import build_transform
from vardct.vard import (PosteriorState, Problem, VardConfig, compute_workspace, gamma_update,
                         objective, objective_gradient, run_vard, surrogate_value)

SEEDS = range(5)


def verdict(number, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion #{number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def fve_terms(state, prob):
    """Every additive term of F from dense matrices, for exact differencing."""
    D, P = prob.A.matrix.toarray(), prob.T.toarray()
    w = 1.0 / prob.T.expand(state.gamma)
    p, pt = D @ state.m, (D * D) @ state.v
    return np.concatenate([prob.y * p, prob.sino.eta * np.exp(-p + pt / 2),
                           0.5 * (P @ state.m) ** 2 * w, 0.5 * ((P * P) @ state.v) * w,
                           -0.5 * np.log(state.v), 0.5 * np.log(state.gamma)])


def fve_difference(s1, s2, prob):
    """F(s1) - F(s2); terms that agree cancel exactly before the exact sum."""
    return math.fsum(fve_terms(s1, prob) - fve_terms(s2, prob))


def vard_nrmse(scenario, sino, kind, iters, **kw):
    T = build_transform(scenario.grid, kind, **kw)
    res = run_vard(Problem(scenario.A, T, sino), VardConfig(n_iters=iters))
    return nrmse(res.state.m, scenario.truth)


@pytest.fixture(scope="module")
def s4():
    return desk_scenario(4)


@pytest.fixture(scope="module")
def s32():
    return desk_scenario(32)


@pytest.fixture(scope="module")
def s64():
    return desk_scenario(64)


@pytest.fixture(scope="module")
def exact_run_32(s32):
    """200 exact iterations with bound reports; raising is disabled so every check is reported."""
    prob = Problem(s32.A, build_transform(s32.grid, "complete"), s32.sample(1e4, 0))
    cfg = VardConfig(n_iters=200, solver_mode="exact_1d", check_level="full_bound",
                     monotone_tol=np.inf, bound_tol=np.inf)
    t0 = time.perf_counter()
    res = run_vard(prob, cfg)
    return res, time.perf_counter() - t0


class TestAcceptance:
    def test_01_majorization(self, s4):
        t0 = time.perf_counter()
        rng = np.random.default_rng(0)
        worst_gap, worst_eq = -np.inf, 0.0
        for kind in ("complete", "overcomplete"):
            prob = Problem(s4.A, build_transform(s4.grid, kind), s4.sample(1e4, 0))
            for _ in range(500):
                st_t = PosteriorState(rng.uniform(0, 2, 16), rng.uniform(0.01, 2, 16),
                                      rng.uniform(0.01, 5, prob.T.n_slots))
                ws = compute_workspace(st_t, prob)
                const = ws.h + 0.5 * np.log(st_t.gamma).sum()
                F_t = objective(st_t, prob).F
                S_t = surrogate_value(st_t.m, st_t.v, st_t, ws) + const
                worst_eq = max(worst_eq, abs(S_t - F_t) / abs(F_t))
                # perturbation scales from 1e-4 to 1 probe the tight region as well
                scale = 10 ** rng.uniform(-4, 0)
                m = st_t.m + scale * rng.normal(0, 1, 16)
                v = st_t.v * np.exp(scale * rng.normal(0, 1, 16))
                F = objective(PosteriorState(m, v, st_t.gamma), prob).F
                S = surrogate_value(m, v, st_t, ws) + const
                worst_gap = max(worst_gap, (F - S) / abs(F))
        elapsed = time.perf_counter() - t0
        ok = worst_gap <= 1e-9 and worst_eq <= 1e-10 and elapsed < 10
        verdict(1, ok, f"max (F-S)/|F| = {worst_gap:.2e}, equality rel err = {worst_eq:.2e}, "
                       f"{elapsed:.1f} s")

    def test_02_monotone_descent(self, exact_run_32):
        res, elapsed = exact_run_32
        F = np.array([r["F"] for r in res.trace])
        rise = np.max((F[1:] - F[:-1]) / np.abs(F[:-1]))
        ok = rise <= 1e-9 and len(F) == 201 and elapsed < 120
        verdict(2, ok, f"max relative rise {rise:.2e} over 200 exact iterations, {elapsed:.1f} s")

    def test_03_decrease_bound(self, exact_run_32):
        res, _ = exact_run_32
        F = np.array([r["F"] for r in res.trace])
        slack = min((b.f_decrease - b.bound_rhs) / abs(F[t]) for t, b in enumerate(res.bounds))
        terms = min(min(b.i_div_mean, b.i_div_var, b.quad_term, b.is_div_gamma)
                    for b in res.bounds)
        ok = len(res.bounds) == 200 and slack >= -1e-8 and terms >= 0
        verdict(3, ok, f"min (decrease - rhs)/|F| = {slack:.2e}, min rhs term = {terms:.2e}")

    def test_04_gamma_closed_form(self, s4):
        worst = 0.0
        rng = np.random.default_rng(1)
        for kw in ({"kind": "complete"}, {"kind": "overcomplete"},
                   {"kind": "overcomplete", "tied": True}):
            T = build_transform(s4.grid, **kw)
            prob = Problem(s4.A, T, s4.sample(1e4, 1))
            m, v = rng.uniform(0, 2, 16), rng.uniform(0.05, 1, 16)
            g_star = gamma_update(m, v, T)
            base = PosteriorState(m, v, g_star)
            for k in range(T.n_slots):
                def F_k(log_g):
                    g = g_star.copy()
                    g[k] = np.exp(log_g)
                    return fve_difference(PosteriorState(m, v, g), base, prob)
                c = np.log(g_star[k])
                r = minimize_scalar(F_k, bracket=(c - 3, c + 3), method="brent",
                                    options={"xtol": 1e-12})
                worst = max(worst, abs(np.exp(r.x) - g_star[k]) / g_star[k])
        verdict(4, worst <= 1e-6, f"max rel diff numeric vs closed-form gamma = {worst:.2e}")

    def test_05_kkt(self, s32):
        prob = Problem(s32.A, build_transform(s32.grid, "complete"), s32.sample(1e4, 0))
        res = run_vard(prob, VardConfig(n_iters=2000, solver_mode="exact_1d"))
        rep = kkt_residuals(res.state, prob)
        # informational: per-pixel relative variance stationarity away from pruned pixels
        ws = compute_workspace(res.state, prob)
        v = res.state.v
        rel = np.abs(2 * ws.b_tilde * v + ws.xi * v - 1.0)
        kept = gamma_update(res.state.m, v, prob.T) > 1e-8
        info = float(rel[kept].max()) if kept.any() else float("nan")
        print(f"  per-pixel |2 b~ v + xi v - 1| on unpruned pixels: {info:.2e}")
        verdict(5, rep.max_residual() <= 1e-4,
                f"mean {rep.mean_residual:.2e}, variance {rep.variance_residual:.2e}, "
                f"gamma {rep.gamma_residual:.2e} (limit 1e-4)")

    def test_06_gradient(self, s4):
        rng = np.random.default_rng(2)
        worst = 0.0
        h = 1e-5
        for kind in ("complete", "overcomplete"):
            prob = Problem(s4.A, build_transform(s4.grid, kind), s4.sample(1e4, 2))
            st_ = PosteriorState(rng.uniform(0.5, 2, 16), rng.uniform(0.2, 1, 16),
                                 rng.uniform(0.5, 3, prob.T.n_slots))
            grads = objective_gradient(st_, prob)
            for name, g in zip(("m", "v", "gamma"), grads):
                fd = np.empty_like(g)
                for k in range(g.size):
                    up, dn = st_.copy(), st_.copy()
                    getattr(up, name)[k] += h
                    getattr(dn, name)[k] -= h
                    fd[k] = fve_difference(up, dn, prob) / (2 * h)
                worst = max(worst, np.max(np.abs(g - fd)) / np.max(np.abs(g)))
            # the oracle must agree with the package objective itself
            np.testing.assert_allclose(math.fsum(fve_terms(st_, prob)), objective(st_, prob).F,
                                       rtol=1e-12)
        verdict(6, worst <= 1e-5, f"max rel err analytic vs central differences = {worst:.2e}")

    def test_07_adjoints_and_oracles(self):
        grid = ImageGrid(5, 5, 1.0)
        A = build_system_matrix(make_geometry(grid, 7, 6), grid)
        D = A.matrix.toarray()
        rng = np.random.default_rng(3)
        worst_adj, worst_dense = 0.0, 0.0
        for _ in range(100):
            x, w = rng.standard_normal(25), rng.standard_normal(A.n)
            for fwd, back, M in ((A.forward, A.back, D), (A.forward_sq, A.back_sq, D * D)):
                lhs, rhs = fwd(x) @ w, x @ back(w)
                worst_adj = max(worst_adj, abs(lhs - rhs) / (np.abs(M) @ np.abs(x) @ np.abs(w)))
                worst_dense = max(worst_dense,
                                  np.max(np.abs(fwd(x) - M @ x)) / np.max(np.abs(M @ x)),
                                  np.max(np.abs(back(w) - M.T @ w)) / np.max(np.abs(M.T @ w)))
            for kind in ("identity", "complete", "overcomplete"):
                T = build_transform(grid, kind)
                P = T.toarray()
                u = rng.standard_normal(T.K)
                lhs, rhs = (T.matrix @ x) @ u, x @ (T._t @ u)
                worst_adj = max(worst_adj, abs(lhs - rhs) / (np.abs(P) @ np.abs(x) @ np.abs(u)))
                for op, M, arg in ((T.matrix, P, x), (T.squared, P * P, x), (T._t, P.T, u),
                                   (T._t_sq, (P * P).T, u), (T._t_abs, np.abs(P).T, u)):
                    ref = M @ arg
                    worst_dense = max(worst_dense, np.max(np.abs(op @ arg - ref)) / np.max(np.abs(ref)))
        ok = worst_adj <= 1e-12 and worst_dense <= 1e-12
        verdict(7, ok, f"adjoint rel err {worst_adj:.2e}, dense oracle rel err {worst_dense:.2e}")

    def test_08_nrmse_ordering(self, s64):
        t0 = time.perf_counter()
        rows = []
        for seed in SEEDS:
            sino = s64.sample(1e4, seed)
            mle = nrmse(run_mle(s64.A, sino, 1000).x, s64.truth)
            c = vard_nrmse(s64, sino, "complete", 1000)
            o = vard_nrmse(s64, sino, "overcomplete", 1000, tied=True)
            rows.append((mle, c, o))
            print(f"  seed {seed}: MLE {mle:.4%}  VARD-C {c:.4%}  VARD-O {o:.4%}")
        elapsed = time.perf_counter() - t0
        wins = sum(m > c > o for m, c, o in rows)
        verdict(8, wins >= 4 and elapsed < 1800,
                f"MLE > VARD-C > VARD-O in {wins}/5 seeds, {elapsed / 60:.1f} min")

    def test_09_rewl2_sensitivity(self, s64):
        sino = s64.sample(1e4, 0)
        T = build_transform(s64.grid, "overcomplete", tied=True)
        err = {}
        for eps in (1e-8, 1e-6):
            res = run_rewl2(s64.A, T, sino, Rewl2Config(eps, n_iters=1000))
            err[eps] = nrmse(res.x, s64.truth)
        ratio = err[1e-8] / err[1e-6]
        verdict(9, ratio >= 3, f"NRMSE eps=1e-8 {err[1e-8]:.4%} vs eps=1e-6 {err[1e-6]:.4%}, "
                               f"ratio {ratio:.2f}")

    def test_10_sbl_vs_vard(self, s64):
        T = build_transform(s64.grid, "complete")
        wins = 0
        for seed in SEEDS:
            sino = s64.sample(1e3, seed)
            sbl = nrmse(run_sbl(s64.A, T, sino, SblConfig(n_em_iters=100)).m, s64.truth)
            c = vard_nrmse(s64, sino, "complete", 1000)
            wins += sbl > c
            print(f"  eta 1e3 seed {seed}: SBL {sbl:.4%}  VARD-C {c:.4%}")
        sino = s64.sample(1e5, 0)
        sbl_hi = nrmse(run_sbl(s64.A, T, sino, SblConfig(n_em_iters=100)).m, s64.truth)
        c_hi = vard_nrmse(s64, sino, "complete", 1000)
        ok = wins >= 4 and sbl_hi <= 2 * c_hi
        verdict(10, ok, f"SBL worse in {wins}/5 seeds at eta=1e3; at eta=1e5 SBL {sbl_hi:.4%} "
                        f"vs VARD-C {c_hi:.4%}")

    @pytest.mark.skipif(os.environ.get("VARDCT_FULL_SCALE") != "1",
                        reason="full-scale run; set VARDCT_FULL_SCALE=1")
    def test_11_full_scale(self):
        sc = desk_scenario(256)
        T = build_transform(sc.grid, "overcomplete", tied=True)
        got = {}
        for eta in (1e5, 1e4):
            res = run_vard(Problem(sc.A, T, sc.sample(eta, 0)), VardConfig(n_iters=2000))
            got[eta] = nrmse(res.state.m, sc.truth)
        ok = abs(got[1e5] - 0.0068) <= 0.0030 and abs(got[1e4] - 0.0176) <= 0.0050
        verdict(11, ok, f"VARD-O at eta=1e5 {got[1e5]:.3%} (target 0.68 +- 0.30), "
                        f"eta=1e4 {got[1e4]:.3%} (target 1.76 +- 0.50)")

    def test_12_missing_data(self):
        grid = make_grid(128)
        full = make_geometry(grid, 360, 256)
        truth = letters(grid)
        sino = sample_sinogram(build_system_matrix(full, grid), truth, 1e4, 0)
        sub_geom = full.subsample_views(8)
        sub = sino.subsample_views(full.n_detectors, 8)
        A = build_system_matrix(sub_geom, grid)
        res = run_vard(Problem(A, build_transform(grid, "identity"), sub), VardConfig(n_iters=500))
        e_vard = nrmse(res.state.m, truth)
        e_fbp = nrmse(fbp_reconstruct(sub, sub_geom, grid), truth)
        verdict(12, e_vard < e_fbp, f"{sub_geom.n_views} views: VARD {e_vard:.4%} vs FBP {e_fbp:.4%}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
