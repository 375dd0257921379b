"""Variational ARD reconstruction with parallel separable surrogates.

The posterior is a factorized Gaussian with means ``m`` and variances ``v``;
``gamma`` holds the prior variances of the transform coefficients ``Psi x``.
Each iteration minimizes a per-pixel surrogate of the free variational
energy ``F`` over ``(m, v)`` and then sets ``gamma`` to its closed-form
minimizer.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, NamedTuple

import numpy as np

from .projector import SystemMatrix
from .simulate import Sinogram
from .solvers import TrustRegionParams, exp_quadratic_root, trust_region_newton
from .transforms import SparsifyingTransform

__all__ = [
    "Problem",
    "PosteriorState",
    "Workspace",
    "VardConfig",
    "ObjectiveValue",
    "VardResult",
    "MonotonicityError",
    "BoundViolationError",
    "initial_state",
    "objective",
    "objective_gradient",
    "compute_workspace",
    "mean_update",
    "variance_update",
    "gamma_update",
    "surrogate_value",
    "run_vard",
]

GAMMA_FLOOR = 1e-30


class MonotonicityError(AssertionError):
    def __init__(self, iteration, F_old, F_new):
        super().__init__(f"objective increased at iteration {iteration}: "
                         f"{F_old!r} -> {F_new!r} (+{F_new - F_old:.3e})")
        self.iteration, self.F_old, self.F_new = iteration, F_old, F_new


class BoundViolationError(AssertionError):
    def __init__(self, iteration, report):
        super().__init__(f"decrease bound violated at iteration {iteration}: "
                         f"decrease {report.f_decrease!r} < bound {report.bound_rhs!r}")
        self.iteration, self.report = iteration, report


@dataclass
class Problem:
    """System matrix, transform and data of one reconstruction."""

    A: SystemMatrix
    T: SparsifyingTransform
    sino: Sinogram

    def __post_init__(self):
        if self.sino.n != self.A.n:
            raise ValueError(f"sinogram has {self.sino.n} rays, matrix has {self.A.n}")
        if self.T.p != self.A.p:
            raise ValueError("transform and system matrix disagree on the pixel count")

    @cached_property
    def y(self) -> np.ndarray:
        return np.asarray(self.sino.y, dtype=float)

    @cached_property
    def b_y(self) -> np.ndarray:
        return self.A.back(self.y)

    @cached_property
    def dummy_weight(self) -> np.ndarray:
        """Per-ray slack ``1 - sum_j (phi + phi^2/2) / Z1`` left to the dummy variable."""
        rs = np.asarray(self.A.matrix.sum(axis=1)).ravel()
        rs_sq = np.asarray(self.A.squared.sum(axis=1)).ravel()
        return 1.0 - (rs + 0.5 * rs_sq) / self.A.Z1


@dataclass
class PosteriorState:
    m: np.ndarray
    v: np.ndarray
    gamma: np.ndarray

    def copy(self) -> "PosteriorState":
        return PosteriorState(self.m.copy(), self.v.copy(), self.gamma.copy())


@dataclass
class Workspace:
    p: np.ndarray
    p_tilde: np.ndarray
    mu: np.ndarray
    b_y: np.ndarray
    b: np.ndarray
    b_tilde: np.ndarray
    d: np.ndarray
    f: np.ndarray
    g: np.ndarray
    xi: np.ndarray
    h: float
    Z1: float
    Z2: float
    dummy: float


@dataclass
class VardConfig:
    n_iters: int = 100
    solver_mode: str = "fast_newton"
    trust_region: TrustRegionParams = field(default_factory=TrustRegionParams)
    m_init: float = 0.0
    v_init: float = 1.0
    gamma_init: float = 100.0
    check_level: str = "none"
    n_inner: int = 1
    monotone_tol: float = 1e-9
    bound_tol: float = 1e-8

    def __post_init__(self):
        if self.n_iters < 0:
            raise ValueError("n_iters must be nonnegative")
        if self.solver_mode not in ("fast_newton", "exact_1d"):
            raise ValueError(f"unknown solver_mode {self.solver_mode!r}")
        if self.check_level not in ("none", "monotone", "full_bound"):
            raise ValueError(f"unknown check_level {self.check_level!r}")
        if self.n_inner < 1:
            raise ValueError("n_inner must be at least 1")


class ObjectiveValue(NamedTuple):
    F: float
    F1: float
    F2: float
    F3: float


@dataclass
class VardResult:
    state: PosteriorState
    trace: list[dict]
    bounds: list = field(default_factory=list)
    fallbacks: list[int] = field(default_factory=list)

    @property
    def objective(self) -> float:
        return self.trace[-1]["F"]


def initial_state(prob: Problem, config: VardConfig = VardConfig()) -> PosteriorState:
    p = prob.A.p
    return PosteriorState(np.full(p, float(config.m_init)), np.full(p, float(config.v_init)),
                          np.full(prob.T.n_slots, float(config.gamma_init)))


def _projections(prob: Problem, m, v):
    p = prob.A.forward(m)
    pt = prob.A.forward_sq(v)
    mu = prob.sino.eta * np.exp(0.5 * pt - p)
    return p, pt, mu


def _objective_parts(prob: Problem, state: PosteriorState, p, pt, mu) -> ObjectiveValue:
    T = prob.T
    w = 1.0 / T.expand(state.gamma)
    d = T.matrix @ state.m
    F1 = float(np.dot(prob.y, p) + mu.sum())
    F2 = 0.5 * float(np.dot(d * d, w))
    F3 = 0.5 * float(np.dot(T.squared @ state.v, w) - np.log(state.v).sum()
                     + np.log(state.gamma).sum())
    return ObjectiveValue(F1 + F2 + F3, F1, F2, F3)


def objective(state: PosteriorState, prob: Problem) -> ObjectiveValue:
    """Free variational energy ``F = F1 + F2 + F3`` (constants dropped)."""
    return _objective_parts(prob, state, *_projections(prob, state.m, state.v))


def compute_workspace(state: PosteriorState, prob: Problem, proj=None) -> Workspace:
    """Projections, backprojections and prior coefficients at ``state``."""
    p, pt, mu = proj if proj is not None else _projections(prob, state.m, state.v)
    T = prob.T
    w = 1.0 / T.expand(state.gamma)
    d = T.matrix @ state.m
    return Workspace(
        p=p, p_tilde=pt, mu=mu, b_y=prob.b_y,
        b=prob.A.back(mu),
        b_tilde=0.5 * prob.A.back_sq(mu),
        d=d,
        f=T._t @ (d * w),
        g=0.5 * T.Z2 * (T._t_abs @ w),
        xi=T._t_sq @ w,
        h=0.5 * float(np.dot(d * d, w)),
        Z1=prob.A.Z1, Z2=T.Z2,
        dummy=float(np.dot(mu, prob.dummy_weight)),
    )


def objective_gradient(state: PosteriorState, prob: Problem):
    """Analytic gradient of ``F`` with respect to ``(m, v, gamma)``."""
    ws = compute_workspace(state, prob)
    T = prob.T
    rows = T.expand(state.gamma)
    a = ws.d ** 2 + T.squared @ state.v
    gm = ws.b_y - ws.b + ws.f
    gv = ws.b_tilde + 0.5 * ws.xi - 0.5 / state.v
    gg = -0.5 * T.reduce(a / rows ** 2) + 0.5 / state.gamma
    return gm, gv, gg


def mean_update(state: PosteriorState, ws: Workspace, mode: str = "fast_newton",
                support=None, return_unconstrained: bool = False):
    """Per-pixel minimization of the mean surrogate, thresholded at zero.

    ``fast_newton`` takes one Newton step from ``m``; ``exact_1d`` returns the
    exact minimizer. With ``return_unconstrained`` the exact unconstrained
    minimizers are returned as well.
    """
    m = state.m
    if mode == "fast_newton":
        m_new = m - (ws.b_y - ws.b + ws.f) / (ws.Z1 * ws.b + 2.0 * ws.g)
        m_bar = None
    elif mode == "exact_1d":
        m_bar = m + exp_quadratic_root(ws.b_y + ws.f, ws.b, ws.g, ws.Z1)
        m_new = m_bar
    else:
        raise ValueError(f"unknown mode {mode!r}")
    m_new = np.maximum(m_new, 0.0)
    if support is not None:
        m_new = np.where(support, m_new, 0.0)
    if return_unconstrained:
        return m_new, m_bar
    return m_new


def variance_update(state: PosteriorState, ws: Workspace,
                    params: TrustRegionParams = TrustRegionParams(), tol: float = 1e-10):
    """Trust-region Newton minimization of the per-pixel variance surrogate."""
    vt, bt, xi, Z1 = state.v, ws.b_tilde, ws.xi, ws.Z1
    v_new = 1.0 / xi
    act = np.flatnonzero(bt > 0)
    if act.size == 0:
        return v_new
    vt_a, bt_a, xi_a = vt[act], bt[act], xi[act]

    def fun(x, s):
        return (bt_a[s] / Z1) * np.exp(Z1 * (x - vt_a[s])) + 0.5 * xi_a[s] * x - 0.5 * np.log(x)

    def grad(x, s):
        return bt_a[s] * np.exp(Z1 * (x - vt_a[s])) + 0.5 * xi_a[s] - 0.5 / x

    def hess(x, s):
        return Z1 * bt_a[s] * np.exp(Z1 * (x - vt_a[s])) + 0.5 / (x * x)

    # the derivative is increasing, so these bracket the root
    right = bt_a + 0.5 * xi_a - 0.5 / vt_a < 0
    lo = np.where(right, vt_a, 1.0 / (2.0 * bt_a + xi_a))
    hi = np.where(right, 1.0 / xi_a, vt_a)
    scale = 0.5 / vt_a + 0.5 * xi_a + bt_a
    v_new[act], _ = trust_region_newton(fun, grad, hess, vt_a, lo, hi, scale, tol, params)
    return v_new


def gamma_update(m, v, T: SparsifyingTransform):
    """Closed-form minimizer ``gamma = (Psi m)^2 + (Psi*Psi) v``, summed per slot."""
    d = T.matrix @ m
    return np.maximum(T.reduce(d * d + T.squared @ v), GAMMA_FLOOR)


def surrogate_value(m, v, state_t: PosteriorState, ws_t: Workspace) -> float:
    """Separable surrogate built at ``state_t``.

    Includes the constant left to the dummy variable of the convex
    decomposition, so that ``F(m_t, v_t, gamma_t) = S + h + sum(log gamma_t)/2``.
    """
    dm = m - state_t.m
    Z1 = ws_t.Z1
    s_m = (ws_t.b_y * m + (ws_t.b / Z1) * np.exp(-Z1 * dm) + ws_t.f * dm + ws_t.g * dm * dm)
    s_v = ((ws_t.b_tilde / Z1) * np.exp(Z1 * (v - state_t.v)) + 0.5 * ws_t.xi * v
           - 0.5 * np.log(v))
    return float(s_m.sum() + s_v.sum() + ws_t.dummy)


def _b_step(state, ws, prob, config, mode):
    m_new, m_bar = mean_update(state, ws, mode, prob.A.col_support, return_unconstrained=True)
    v_new = variance_update(state, ws, config.trust_region)
    return m_new, v_new, m_bar


def run_vard(prob: Problem, config: VardConfig = VardConfig(),
             state: PosteriorState | None = None,
             callback: Callable | None = None) -> VardResult:
    """Alternate the surrogate B-step and the closed-form F-step.

    ``callback(t, state, objective_value)`` is called after every iteration.
    With ``check_level`` ``monotone`` or ``full_bound`` a violation raises
    :class:`MonotonicityError` or :class:`BoundViolationError`.
    """
    from .diagnostics import decrease_bound

    state = initial_state(prob, config) if state is None else state.copy()
    t0 = time.perf_counter()
    proj = _projections(prob, state.m, state.v)
    obj = _objective_parts(prob, state, *proj)
    trace = [dict(iteration=0, F=obj.F, F1=obj.F1, F2=obj.F2, F3=obj.F3, wall_ms=0.0)]
    result = VardResult(state, trace)

    for t in range(1, config.n_iters + 1):
        mode = config.solver_mode
        while True:
            cur, cur_proj = state, proj
            for _ in range(config.n_inner):
                ws = compute_workspace(cur, prob, cur_proj)
                m_new, v_new, m_bar = _b_step(cur, ws, prob, config, mode)
                nxt = PosteriorState(m_new, v_new, cur.gamma)
                cur_proj = _projections(prob, m_new, v_new)
                cur = nxt
            new = PosteriorState(cur.m, cur.v, gamma_update(cur.m, cur.v, prob.T))
            new_obj = _objective_parts(prob, new, *cur_proj)
            increased = new_obj.F > obj.F + config.monotone_tol * abs(obj.F)
            if mode == "fast_newton" and increased:
                mode = "exact_1d"
                result.fallbacks.append(t)
                continue
            break
        if mode == "exact_1d" and config.check_level != "none" and increased:
            raise MonotonicityError(t, obj.F, new_obj.F)
        if config.check_level == "full_bound" and mode == "exact_1d" and config.n_inner == 1:
            report = decrease_bound(state, new, ws, obj.F, new_obj.F, m_bar, prob.T)
            result.bounds.append(report)
            if report.f_decrease < report.bound_rhs - config.bound_tol * abs(obj.F):
                raise BoundViolationError(t, report)
        state, proj, obj = new, cur_proj, new_obj
        trace.append(dict(iteration=t, F=obj.F, F1=obj.F1, F2=obj.F2, F3=obj.F3,
                          wall_ms=1e3 * (time.perf_counter() - t0)))
        if callback is not None:
            callback(t, state, obj)
    result.state = state
    return result
