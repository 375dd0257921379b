"""Reference reconstructors: MLE, Huber-penalized MAP, reweighted l2 and FBP.

The iterative methods share the separable-surrogate machinery of the VARD
module with the variances fixed at zero, so the likelihood surrogate uses
the row-sum constant ``Z_mle`` instead of ``Z1``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from .projector import FanBeamGeometry, ImageGrid, SystemMatrix
from .simulate import Sinogram, post_log
from .solvers import TrustRegionParams, exp_quadratic_root, trust_region_newton
from .transforms import SparsifyingTransform

__all__ = [
    "MapPenaltyConfig",
    "Rewl2Config",
    "BaselineResult",
    "huber_penalty",
    "huber_derivative",
    "neg_log_likelihood",
    "mle_update",
    "run_mle",
    "map_update",
    "map_surrogate",
    "map_objective",
    "run_map",
    "rewl2_step",
    "rewl2_objective",
    "rewl2_map_objective",
    "run_rewl2",
    "fbp_reconstruct",
]

BY_FLOOR = 1e-300
X_MAX = 20.0


@dataclass(frozen=True)
class MapPenaltyConfig:
    beta: float
    delta: float

    def __post_init__(self):
        if self.beta < 0 or self.delta <= 0:
            raise ValueError("need beta >= 0 and delta > 0")


@dataclass(frozen=True)
class Rewl2Config:
    epsilon: float
    n_iters: int = 100
    safeguard: bool = True

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


@dataclass
class BaselineResult:
    x: np.ndarray
    trace: list[dict]
    gamma: np.ndarray | None = None
    fallbacks: list[int] = field(default_factory=list)

    @property
    def objective(self) -> float:
        return self.trace[-1]["objective"]


def huber_penalty(x, delta):
    """``delta^2 (|x/delta| - log(1 + |x/delta|))``."""
    a = np.abs(np.asarray(x, dtype=float)) / delta
    return delta * delta * (a - np.log1p(a))


def huber_derivative(x, delta):
    x = np.asarray(x, dtype=float)
    return x / (1.0 + np.abs(x) / delta)


def huber_curvature(x, delta):
    return 1.0 / (1.0 + np.abs(np.asarray(x, dtype=float)) / delta) ** 2


def neg_log_likelihood(x, A: SystemMatrix, sino: Sinogram) -> float:
    """``sum y p + eta exp(-p)`` with ``p = A x``; the ``log y!`` terms are dropped."""
    p = A.forward(x)
    return float(np.dot(np.asarray(sino.y, dtype=float), p) + np.sum(sino.eta * np.exp(-p)))


def _likelihood_terms(x, A, sino):
    p = A.forward(x)
    mu = sino.eta * np.exp(-p)
    y = np.asarray(sino.y, dtype=float)
    return float(np.dot(y, p) + mu.sum()), A.back(mu)


def mle_update(x, b, b_y, Z_mle, support=None, x_max=X_MAX):
    """``[x + log(b / b_y) / Z_mle]_+`` with ``b_y`` floored and the result capped."""
    with np.errstate(divide="ignore"):
        x_new = x + np.log(b / np.maximum(b_y, BY_FLOOR)) / Z_mle
    x_new = np.clip(x_new, 0.0, x_max)
    if support is not None:
        x_new = np.where(support, x_new, 0.0)
    return x_new


def run_mle(A: SystemMatrix, sino: Sinogram, n_iters: int, x0=None, callback=None) -> BaselineResult:
    x = np.zeros(A.p) if x0 is None else np.array(x0, dtype=float)
    b_y = A.back(np.asarray(sino.y, dtype=float))
    t0 = time.perf_counter()
    obj, b = _likelihood_terms(x, A, sino)
    trace = [dict(iteration=0, objective=obj, wall_ms=0.0)]
    for t in range(1, n_iters + 1):
        x = mle_update(x, b, b_y, A.Z_mle, A.col_support)
        obj, b = _likelihood_terms(x, A, sino)
        trace.append(dict(iteration=t, objective=obj, wall_ms=1e3 * (time.perf_counter() - t0)))
        if callback is not None:
            callback(t, x, obj)
    return BaselineResult(x, trace)


class _PenaltyEntries:
    """Nonzeros of the penalty transform grouped for per-pixel surrogates."""

    def __init__(self, T: SparsifyingTransform):
        coo = T.matrix.tocoo()
        self.rows, self.cols, self.vals = coo.row, coo.col, coo.data
        self.T = T
        self.p = T.p

    def sums(self, x_trial, x_t, u_t, beta, delta, sel):
        """Penalty-surrogate value, derivative and curvature at ``x_trial[sel]``."""
        Z2 = self.T.Z2
        X = x_t.copy()
        X[sel] = x_trial
        arg = u_t[self.rows] + Z2 * np.sign(self.vals) * (X[self.cols] - x_t[self.cols])
        w = np.abs(self.vals)
        val = np.bincount(self.cols, w / Z2 * huber_penalty(arg, delta), self.p)
        der = np.bincount(self.cols, self.vals * huber_derivative(arg, delta), self.p)
        cur = np.bincount(self.cols, w * Z2 * huber_curvature(arg, delta), self.p)
        return beta * val[sel], beta * der[sel], beta * cur[sel]


def map_surrogate(x, x_t, b, b_y, Z_mle, T_pen: SparsifyingTransform, cfg: MapPenaltyConfig):
    """Per-pixel MAP surrogate values at ``x`` built around ``x_t``."""
    ent = _PenaltyEntries(T_pen)
    u_t = T_pen.matrix @ x_t
    pen, _, _ = ent.sums(x, x_t, u_t, cfg.beta, cfg.delta, np.arange(x.size))
    d = x - x_t
    return b_y * x + (b / Z_mle) * np.exp(-Z_mle * d) + pen


def map_update(x_t, b, b_y, Z_mle, T_pen: SparsifyingTransform, cfg: MapPenaltyConfig,
               support=None, params: TrustRegionParams = TrustRegionParams(),
               tol: float = 1e-10, _entries=None):
    """Trust-region Newton minimization of each pixel's MAP surrogate on ``[0, x_max]``."""
    if cfg.beta == 0:
        return mle_update(x_t, b, b_y, Z_mle, support)
    ent = _entries or _PenaltyEntries(T_pen)
    u_t = T_pen.matrix @ x_t
    by = np.maximum(b_y, BY_FLOOR)
    act = np.flatnonzero(b > 0 if support is None else support & (b > 0))
    xa, ba, bya = x_t[act], b[act], by[act]

    def parts(x, s):
        return ent.sums(x, x_t, u_t, cfg.beta, cfg.delta, act[s])

    def fun(x, s):
        return bya[s] * x + (ba[s] / Z_mle) * np.exp(-Z_mle * (x - xa[s])) + parts(x, s)[0]

    def grad(x, s):
        return bya[s] - ba[s] * np.exp(-Z_mle * (x - xa[s])) + parts(x, s)[1]

    def hess(x, s):
        return Z_mle * ba[s] * np.exp(-Z_mle * (x - xa[s])) + parts(x, s)[2]

    scale = bya + ba + cfg.beta * cfg.delta * np.bincount(ent.cols, np.abs(ent.vals), ent.p)[act]
    x_new = np.zeros_like(x_t)
    x_new[act], _ = trust_region_newton(fun, grad, hess, xa, 0.0, X_MAX, scale, tol, params,
                                        closed_lower=True)
    return x_new


def map_objective(x, A: SystemMatrix, T_pen: SparsifyingTransform, sino: Sinogram,
                  cfg: MapPenaltyConfig) -> float:
    return neg_log_likelihood(x, A, sino) + cfg.beta * float(
        huber_penalty(T_pen.matrix @ x, cfg.delta).sum())


def run_map(A: SystemMatrix, T_pen: SparsifyingTransform, sino: Sinogram, cfg: MapPenaltyConfig,
            n_iters: int, x0=None, callback=None) -> BaselineResult:
    x = np.zeros(A.p) if x0 is None else np.array(x0, dtype=float)
    b_y = A.back(np.asarray(sino.y, dtype=float))
    ent = _PenaltyEntries(T_pen)
    t0 = time.perf_counter()

    def total(x, nll):
        return nll + cfg.beta * float(huber_penalty(T_pen.matrix @ x, cfg.delta).sum())

    nll, b = _likelihood_terms(x, A, sino)
    trace = [dict(iteration=0, objective=total(x, nll), wall_ms=0.0)]
    for t in range(1, n_iters + 1):
        x = map_update(x, b, b_y, A.Z_mle, T_pen, cfg, A.col_support, _entries=ent)
        nll, b = _likelihood_terms(x, A, sino)
        trace.append(dict(iteration=t, objective=total(x, nll),
                          wall_ms=1e3 * (time.perf_counter() - t0)))
        if callback is not None:
            callback(t, x, trace[-1]["objective"])
    return BaselineResult(x, trace)


def rewl2_objective(x, gamma, A: SystemMatrix, T: SparsifyingTransform, sino: Sinogram,
                    epsilon: float) -> float:
    """``-log p(y|x) + 1/2 sum((Psi x)^2 + eps)/gamma + 1/2 sum log gamma``."""
    d = T.matrix @ x
    return (neg_log_likelihood(x, A, sino) + 0.5 * float(np.sum((d * d + epsilon) / T.expand(gamma)))
            + 0.5 * float(np.log(gamma).sum()))


def rewl2_map_objective(x, A: SystemMatrix, T: SparsifyingTransform, sino: Sinogram,
                        epsilon: float) -> float:
    """``-log p(y|x) + 1/2 sum log((Psi x)^2 + eps)``, the objective with gamma eliminated."""
    d = T.matrix @ x
    return neg_log_likelihood(x, A, sino) + 0.5 * float(np.log(T.reduce(d * d + epsilon)).sum())


def rewl2_step(x_t, gamma_t, A: SystemMatrix, T: SparsifyingTransform, sino: Sinogram,
               cfg: Rewl2Config, b=None, b_y=None, exact: bool = False):
    """One surrogate step on ``x`` (single Newton step unless ``exact``) then ``gamma``."""
    if b is None:
        b = A.back(sino.eta * np.exp(-A.forward(x_t)))
    if b_y is None:
        b_y = A.back(np.asarray(sino.y, dtype=float))
    w = T.expand(1.0 / gamma_t)
    d = T.matrix @ x_t
    f = T._t @ (d * w)
    g = 0.5 * T.Z2 * (T._t_abs @ w)
    Z = A.Z_mle
    if exact:
        x_new = x_t + exp_quadratic_root(b_y + f, b, g, Z)
    else:
        x_new = x_t - (b_y - b + f) / (Z * b + 2.0 * g)
    x_new = np.where(A.col_support, np.maximum(x_new, 0.0), 0.0)
    d_new = T.matrix @ x_new
    return x_new, T.reduce(d_new * d_new + cfg.epsilon)


def run_rewl2(A: SystemMatrix, T: SparsifyingTransform, sino: Sinogram, cfg: Rewl2Config,
              x0=None, gamma0: float = 100.0, callback=None) -> BaselineResult:
    """Reweighted l2; with ``cfg.safeguard`` an iteration whose objective rises is redone exactly."""
    x = np.zeros(A.p) if x0 is None else np.array(x0, dtype=float)
    gamma = np.full(T.n_slots, gamma0)
    b_y = A.back(np.asarray(sino.y, dtype=float))
    t0 = time.perf_counter()

    def q(x, gamma, nll):
        d = T.matrix @ x
        return (nll + 0.5 * float(np.sum((d * d + cfg.epsilon) / T.expand(gamma)))
                + 0.5 * float(np.log(gamma).sum()))

    nll, b = _likelihood_terms(x, A, sino)
    obj = q(x, gamma, nll)
    trace = [dict(iteration=0, objective=obj, wall_ms=0.0)]
    fallbacks = []
    for t in range(1, cfg.n_iters + 1):
        x_new, g_new = rewl2_step(x, gamma, A, T, sino, cfg, b, b_y)
        nll_new, b_new = _likelihood_terms(x_new, A, sino)
        obj_new = q(x_new, g_new, nll_new)
        if cfg.safeguard and obj_new > obj + 1e-12 * abs(obj):
            fallbacks.append(t)
            x_new, g_new = rewl2_step(x, gamma, A, T, sino, cfg, b, b_y, exact=True)
            nll_new, b_new = _likelihood_terms(x_new, A, sino)
            obj_new = q(x_new, g_new, nll_new)
        x, gamma, b, obj = x_new, g_new, b_new, obj_new
        trace.append(dict(iteration=t, objective=obj, wall_ms=1e3 * (time.perf_counter() - t0)))
        if callback is not None:
            callback(t, x, obj)
    return BaselineResult(x, trace, gamma, fallbacks)


def _ramp_kernel(n: int, tau: float) -> np.ndarray:
    """Band-limited ramp filter taps for offsets ``-(n-1)..(n-1)``."""
    k = np.arange(-(n - 1), n)
    h = np.zeros(k.size)
    h[k == 0] = 1.0 / (4.0 * tau * tau)
    odd = (k % 2) == 1
    h[odd] = -1.0 / (np.pi * k[odd] * tau) ** 2
    return h


def fbp_reconstruct(sino: Sinogram, geom: FanBeamGeometry, grid: ImageGrid) -> np.ndarray:
    """Fan-beam filtered backprojection for a flat detector over a full rotation.

    Uses post-log data, cosine pre-weighting, a Ram-Lak filter on the
    detector rescaled to the isocentre, and distance-weighted backprojection
    with linear interpolation. Returns dimensionless values (divided by
    ``mu_ref``).
    """
    line, _ = post_log(sino)
    proj = line.reshape(geom.n_views, geom.n_detectors)
    D = geom.source_to_isocenter
    mag = geom.source_to_detector / D
    s = geom.detector_positions() / mag
    tau = geom.detector_pitch / mag
    weighted = proj * (D / np.sqrt(D * D + s * s))[None, :]
    h = _ramp_kernel(geom.n_detectors, tau)
    n = geom.n_detectors
    filtered = fftconvolve(weighted, h[None, :], mode="full", axes=1)[:, n - 1:2 * n - 1] * tau

    X, Y = grid.pixel_centers()
    image = np.zeros(grid.p)
    angles = np.asarray(geom.view_angles)
    dtheta = 2.0 * np.pi / angles.size
    for view, theta in enumerate(angles):
        c, sn = np.cos(theta), np.sin(theta)
        along = X * c + Y * sn
        U = (D - along) / D
        lateral = -X * sn + Y * c
        s_pix = lateral / U
        image += np.interp(s_pix, s, filtered[view], left=0.0, right=0.0) / (U * U)
    return 0.5 * dtheta * image / grid.mu_ref
