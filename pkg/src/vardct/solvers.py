"""Vectorized one-dimensional minimizers for separable surrogates.

Every pixel carries its own convex 1D problem, so the routines here work on
whole coefficient arrays at once and never loop over pixels in Python.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import lambertw

__all__ = ["TrustRegionParams", "exp_quadratic_root", "trust_region_newton"]


@dataclass(frozen=True)
class TrustRegionParams:
    initial_radius: float = 1.0
    shrink: float = 0.5
    expand: float = 2.0
    accept_low: float = 0.25
    accept_high: float = 0.75
    max_iter: int = 200


def _lambertw_exp(L):
    """Principal-branch W(exp(L)) without overflowing exp(L)."""
    L = np.asarray(L, dtype=float)
    out = np.empty_like(L)
    small = L < 600.0
    out[small] = lambertw(np.exp(L[small])).real
    if np.any(~small):
        Lb = L[~small]
        t = np.log(Lb - np.log(Lb))
        for _ in range(50):
            et = np.exp(t)
            step = (et + t - Lb) / (et + 1.0)
            t -= step
            if np.all(np.abs(step) <= 1e-15 * np.abs(t)):
                break
        out[~small] = np.exp(t)
    return out


def exp_quadratic_root(a, b, g, Z, tol=1e-13, max_polish=8):
    """Root ``delta`` of ``a + 2 g delta - b exp(-Z delta) = 0``.

    This is the stationarity condition of ``a d + (b/Z) exp(-Z d) + g d^2``.
    Requires ``b >= 0`` and ``g > 0``. A closed form through the Lambert W
    function gives the starting point; Newton steps then remove the
    cancellation error of that form.
    """
    a, b, g = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (a, b, g)))
    shape = a.shape
    a, b, g = (np.atleast_1d(v) for v in (a, b, g))
    delta = -a / (2.0 * g)
    pos = b > 0
    if np.any(pos):
        ap, bp, gp = a[pos], b[pos], g[pos]
        L = np.log(Z * bp / (2.0 * gp)) + Z * ap / (2.0 * gp)
        delta[pos] = _lambertw_exp(L) / Z - ap / (2.0 * gp)
        scale = np.maximum.reduce([np.abs(ap), bp, np.full_like(ap, np.finfo(float).tiny)])
        d = delta[pos]
        with np.errstate(over="ignore"):
            for _ in range(max_polish):
                e = bp * np.exp(-Z * d)
                r = ap + 2.0 * gp * d - e
                if np.all(np.abs(r) <= tol * np.maximum(scale, e)):
                    break
                step = r / (2.0 * gp + Z * e)
                d = np.where(np.isfinite(step), d - step, d)
        delta[pos] = d
    return delta.reshape(shape)


def trust_region_newton(fun, grad, hess, x0, lo, hi, scale, tol, params=TrustRegionParams(),
                        closed_lower=False):
    """Minimize independent convex 1D functions on intervals.

    ``fun``, ``grad`` and ``hess`` take ``(x, sel)`` where ``sel`` indexes the
    coefficient arrays the caller closed over. ``lo``/``hi`` bracket the
    minimizer; ``lo`` is attainable only when ``closed_lower`` is set (for
    nonnegativity constraints), otherwise it is a strict barrier such as
    ``v > 0``. Each step is the Newton step clipped to a radius that shrinks
    or expands with the ratio of actual to predicted decrease. Since the
    derivative is monotone, every evaluated point also tightens the bracket.
    Returns the minimizers and the number of iterations used.
    """
    x = np.array(x0, dtype=float)
    lo = np.array(np.broadcast_to(lo, x.shape), dtype=float)
    hi = np.array(np.broadcast_to(hi, x.shape), dtype=float)
    scale = np.broadcast_to(np.asarray(scale, dtype=float), x.shape)
    all_idx = np.arange(x.size)
    f = fun(x, all_idx)
    gr = grad(x, all_idx)
    radius = np.full(x.shape, np.inf)
    it = 0
    with np.errstate(over="ignore", invalid="ignore"):
        h = hess(x, all_idx)
        newton = np.abs(gr / h)
        radius = params.initial_radius * np.maximum(np.abs(x), newton)
        radius[~(radius > 0)] = 1.0
        for it in range(1, params.max_iter + 1):
            at_bound = closed_lower & (x <= lo) & (gr >= 0)
            done = (np.abs(gr) <= tol * scale) | at_bound
            done |= (hi - lo) <= 4 * np.finfo(float).eps * np.maximum(np.abs(x), np.finfo(float).tiny)
            act = np.flatnonzero(~done)
            if act.size == 0:
                break
            xa, ga = x[act], gr[act]
            ha = hess(xa, act)
            hi[act] = np.where(ga > 0, np.minimum(hi[act], xa), hi[act])
            lo[act] = np.where(ga < 0, np.maximum(lo[act], xa), lo[act])
            s = np.clip(-ga / ha, -radius[act], radius[act])
            s = np.where(np.isfinite(s), s, -np.sign(ga) * radius[act])
            xt = xa + s
            lo_a, hi_a = lo[act], hi[act]
            over = xt >= hi_a
            xt = np.where(over, 0.5 * (xa + hi_a), xt)
            if closed_lower:
                xt = np.maximum(xt, lo_a)
            else:
                under = xt <= lo_a
                xt = np.where(under, 0.5 * (xa + lo_a), xt)
            s = xt - xa
            pred = -(ga * s + 0.5 * ha * s * s)
            ft = fun(xt, act)
            gt = grad(xt, act)
            ared = f[act] - ft
            noise = 64 * np.finfo(float).eps * (np.abs(f[act]) + np.abs(ft))
            rho = np.where(pred > noise, ared / np.where(pred > 0, pred, 1.0),
                           np.where(np.abs(gt) < np.abs(ga), 1.0, -1.0))
            rho = np.where(np.isfinite(ft), rho, -1.0)
            accept = rho > 0
            # the derivative sign at the trial point brackets the root either way
            fin = np.isfinite(gt)
            hi[act] = np.where(fin & (gt > 0), np.minimum(hi[act], xt), hi[act])
            lo[act] = np.where(fin & (gt < 0), np.maximum(lo[act], xt), lo[act])
            step = np.abs(s)
            r = radius[act]
            r = np.where(rho < params.accept_low, params.shrink * np.maximum(step, 1e-300), r)
            r = np.where((rho > params.accept_high) & (step >= 0.99 * r), params.expand * r, r)
            radius[act] = r
            x[act] = np.where(accept, xt, xa)
            f[act] = np.where(accept, ft, f[act])
            gr[act] = np.where(accept, gt, ga)
            # a stalled radius falls back to bisection of the bracket
            stall = (radius[act] <= 1e-15 * np.maximum(np.abs(x[act]), 1e-300)) & np.isfinite(hi[act])
            if np.any(stall):
                sa = act[stall]
                mid = 0.5 * (lo[sa] + hi[sa])
                x[sa] = mid
                f[sa] = fun(mid, sa)
                gr[sa] = grad(mid, sa)
                radius[sa] = 0.25 * (hi[sa] - lo[sa])
    return x, it
