"""Small projected-gradient toolkit shared by the stage solvers.

Nothing here knows about power systems: box projection, capped-simplex
projection, central finite differences, and a Barzilai-Borwein projected
descent with Armijo backtracking.
"""

from __future__ import annotations

import numpy as np


def project_box(u, lo, hi):
    return np.minimum(np.maximum(u, lo), hi)


def project_capped_simplex(y, cap):
    """Euclidean projection onto {y in [0,1]^n : sum(y) <= cap}.

    If clipping to the box already satisfies the budget, that is the
    projection; otherwise shift by the smallest tau >= 0 with
    sum(clip(y - tau, 0, 1)) <= cap (bisection, conservative end so the
    budget holds exactly).
    """
    y = np.asarray(y, dtype=float)
    clipped = np.clip(y, 0.0, 1.0)
    if clipped.sum() <= cap:
        return clipped
    lo, hi = 0.0, float(np.max(y))
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if np.clip(y - mid, 0.0, 1.0).sum() > cap:
            lo = mid
        else:
            hi = mid
    return np.clip(y - hi, 0.0, 1.0)


def central_diff_grad(f, u, h=1e-6):
    u = np.asarray(u, dtype=float)
    g = np.zeros_like(u)
    for i in range(u.size):
        up = u.copy()
        um = u.copy()
        up[i] += h
        um[i] -= h
        g[i] = (f(up) - f(um)) / (2.0 * h)
    return g


def projected_gradient_norm(u, g, project):
    return float(np.linalg.norm(u - project(u - g)))


def projected_descent(f, u0, project, grad=None, *, max_iter=200, pg_tol=1e-6,
                      fd_step=1e-6, armijo=1e-4, max_backtracks=40):
    """Minimize f over {u : u == project(u)} with BB-stepped projected
    gradient descent and Armijo backtracking along the projection arc.

    Returns (u, f(u), pg_norm).  grad defaults to central differences.
    """
    if grad is None:
        grad = lambda v: central_diff_grad(f, v, h=fd_step)
    u = project(np.asarray(u0, dtype=float))
    fu = f(u)
    g = grad(u)
    gmax = float(np.max(np.abs(g)))
    step = 1.0 / gmax if gmax > 0 else 1.0
    pg = projected_gradient_norm(u, g, project)
    for _ in range(max_iter):
        if pg <= pg_tol:
            break
        s = step
        u_new, f_new = u, fu
        for _ in range(max_backtracks):
            cand = project(u - s * g)
            f_cand = f(cand)
            decrease = float(np.dot(g, u - cand))
            if f_cand <= fu - armijo * decrease and not np.array_equal(cand, u):
                u_new, f_new = cand, f_cand
                break
            s *= 0.5
        else:
            break  # no acceptable step: stationary up to line-search resolution
        g_new = grad(u_new)
        du = u_new - u
        dg = g_new - g
        denom = float(np.dot(du, dg))
        step = float(np.dot(du, du)) / denom if denom > 1e-300 else min(step * 2.0, 1e6)
        step = float(np.clip(step, 1e-12, 1e6))
        u, fu, g = u_new, f_new, g_new
        pg = projected_gradient_norm(u, g, project)
    return u, fu, pg


def box_projector(lo, hi):
    return lambda u: project_box(u, lo, hi)
