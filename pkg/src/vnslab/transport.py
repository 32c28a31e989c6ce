"""Wasserstein-1 distances between weighted point clouds in phase space."""
from __future__ import annotations

import math

import numpy as np
from scipy import optimize, sparse, special

EXACT_LIMIT = 256
DEFAULT_PROJECTIONS = 512


def _mean_abs_coordinate(d):
    """E|theta_1| for theta uniform on the unit sphere in R^d."""
    return math.exp(special.gammaln(d / 2) - special.gammaln((d + 1) / 2)) / math.sqrt(math.pi)


def w1_line(a, wa, b, wb):
    """Exact W_1 between weighted measures on the line: int |F_a - F_b|."""
    pts = np.concatenate([a, b])
    mass = np.concatenate([wa, -wb])
    order = np.argsort(pts, kind="stable")
    pts, mass = pts[order], mass[order]
    cdf = np.cumsum(mass)[:-1]
    return float(np.sum(np.abs(cdf) * np.diff(pts)))


def sliced_w1(X, wx, Y, wy, n_proj=DEFAULT_PROJECTIONS, seed=0):
    """Average of 1D W_1 over random directions, rescaled by 1/E|theta_1| so
    that the estimate is exact for a pair of Dirac masses (and for rigid
    translations of a cloud)."""
    d = X.shape[1]
    rng = np.random.default_rng(seed)
    theta = rng.standard_normal((n_proj, d))
    theta /= np.linalg.norm(theta, axis=1, keepdims=True)
    px, py = X @ theta.T, Y @ theta.T
    vals = [w1_line(px[:, k], wx, py[:, k], wy) for k in range(n_proj)]
    return float(np.mean(vals)) / _mean_abs_coordinate(d)


def exact_w1(X, wx, Y, wy):
    """Exact W_1 as a transportation linear program (HiGHS)."""
    n, m = len(X), len(Y)
    cost = np.sqrt(np.sum((X[:, None, :] - Y[None, :, :]) ** 2, axis=-1)).ravel()
    rows = sparse.kron(sparse.eye(n), np.ones((1, m)))
    cols = sparse.kron(np.ones((1, n)), sparse.eye(m))
    A = sparse.vstack([rows, cols]).tocsr()
    # the two marginals share their total, so one constraint is redundant
    b = np.concatenate([wx, wy * (wx.sum() / wy.sum())])
    res = optimize.linprog(cost, A_eq=A[:-1], b_eq=b[:-1], bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun)


def phase_points(ens):
    """Phase-space coordinates (x, v) with unwrapped positions."""
    return np.concatenate([ens.x, ens.v], axis=1)


def wasserstein1(ens1, ens2, method="auto", n_proj=DEFAULT_PROJECTIONS, seed=0, weights=None):
    """W_1 between two particle ensembles in phase space.

    ``method`` is ``exact``, ``sliced`` or ``auto`` (exact up to 256 particles
    per cloud).  ``weights`` optionally overrides the weights of the two
    clouds as a pair of arrays.
    """
    w1, w2 = (ens1.w, ens2.w) if weights is None else weights
    m1, m2 = float(np.sum(w1)), float(np.sum(w2))
    if abs(m1 - m2) > 1e-8 * max(m1, m2, 1e-300):
        raise ValueError(f"W1 needs equal masses, got {m1} and {m2}")
    X, Y = phase_points(ens1), phase_points(ens2)
    if method == "auto":
        method = "exact" if max(len(X), len(Y)) <= EXACT_LIMIT else "sliced"
    if method == "exact":
        return exact_w1(X, w1, Y, w2)
    if method == "sliced":
        return sliced_w1(X, w1, Y, w2, n_proj, seed)
    raise ValueError(f"unknown method {method!r}")
