"""Duhamel formula and Picard iteration for forced Navier-Stokes in the
Kato-type space with norm L~4 B^{-1/2+3/p}_{p,inf}."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .spectral import (SpectralField, Trajectory, bp_norm, kp_norm, leray_project,
                       lp_norm, tensor_divergence)


@dataclass
class MildProblem:
    """Data for v' - Lap v + P div(v (x) v) = P G on [0, T].

    ``forcing`` is a list of fields on the uniform lattice of ``nt`` + 1 times,
    or None for G = 0.
    """

    u_in: SpectralField
    T: float
    nt: int
    p: float = 6.0
    forcing: list | None = None

    def __post_init__(self):
        if not 3 < self.p < math.inf:
            raise ValueError("p must lie in (3, inf)")
        if not self.T > 0 or self.nt < 1:
            raise ValueError("need T > 0 and at least one time step")
        if self.forcing is not None and len(self.forcing) != self.nt + 1:
            raise ValueError("forcing must have one snapshot per lattice time")
        k = self.u_in.grid.deriv_wavevectors
        kdot = np.abs(np.sum(k * self.u_in.modes, axis=0)).max()
        scale = np.abs(self.u_in.modes).max() * np.sqrt(np.sum(k ** 2, axis=0)).max()
        if scale > 0 and kdot > 1e-10 * scale:
            raise ValueError("initial data must be divergence-free")

    @property
    def times(self):
        return np.linspace(0.0, self.T, self.nt + 1)

    @property
    def ds(self):
        return self.T / self.nt


def _duhamel_integral(integrand, times):
    """int_0^t e^{(t-s)Lap} H(s) ds on the lattice; the integrand is averaged
    to each cell midpoint and carried by the exact heat factor."""
    grid = integrand[0].grid
    ds = times[1] - times[0]
    full = np.exp(-grid.ksq * ds)
    half = np.exp(-grid.ksq * ds / 2)
    acc = np.zeros_like(integrand[0].modes)
    out = [integrand[0].with_modes(acc.copy(), solenoidal=True)]
    for m in range(len(times) - 1):
        mid = 0.5 * (integrand[m].modes + integrand[m + 1].modes)
        acc = full * acc + ds * half * mid
        out.append(integrand[0].with_modes(acc.copy(), solenoidal=True))
    return out


def duhamel_source(prob):
    """S(u_in, G)(t) = e^{t Lap} u_in + int_0^t e^{(t-s)Lap} P G(s) ds."""
    times = prob.times
    grid = prob.u_in.grid
    free = [prob.u_in.with_modes(prob.u_in.modes * np.exp(-grid.ksq * t)) for t in times]
    if prob.forcing is None:
        return Trajectory(times, free)
    forced = _duhamel_integral([leray_project(g) for g in prob.forcing], times)
    return Trajectory(times, [a + b for a, b in zip(free, forced)])


def bilinear_B(w, v):
    """B(w, v)(t) = int_0^t e^{(t-s)Lap} P div(w (x) v)(s) ds."""
    if len(w) != len(v) or not np.allclose(w.times, v.times):
        raise ValueError("trajectories must share a time lattice")
    integrand = [leray_project(tensor_divergence(a, b)) for a, b in zip(w, v)]
    return Trajectory(w.times, _duhamel_integral(integrand, w.times))


def combine(a, b, ca=1.0, cb=1.0):
    """Pointwise-in-time linear combination ca*a + cb*b of trajectories."""
    return Trajectory(a.times, [x.with_modes(ca * x.modes + cb * y.modes) for x, y in zip(a, b)])


def scale(a, c):
    return Trajectory(a.times, [x * c for x in a])


@dataclass
class PicardReport:
    norms: list = field(default_factory=list)
    increments: list = field(default_factory=list)
    ratios: list = field(default_factory=list)
    converged: bool = False
    diverged: bool = False
    residual: float = math.inf
    iterations: int = 0
    gate_held: bool = True
    stayed_in_ball: bool = True
    source_norm: float = 0.0
    alpha_p: float = 0.0

    @property
    def flags(self):
        out = []
        if not self.gate_held:
            out.append("outside smallness regime")
        if not self.stayed_in_ball:
            out.append("left the ball of radius 2 alpha_p")
        if self.diverged:
            out.append("diverged")
        return out


def picard_solve(prob, alpha_p, max_iter=50, tol=1e-8, source=None):
    """Iterate v_{n+1} = S - B(v_n, v_n) from v_0 = S.

    Each iteration costs one evaluation of B; the residual of iterate v_n is
    ||v_n - S + B(v_n, v_n)|| = ||v_n - v_{n+1}||, so the iteration stops at
    the first v_n with residual <= tol (1 + ||v_n||) and returns it.
    """
    if not alpha_p > 0:
        raise ValueError("alpha_p must be positive")
    p = prob.p
    S = source if source is not None else duhamel_source(prob)
    normS = kp_norm(S, p)
    rep = PicardReport(source_norm=normS, alpha_p=alpha_p, gate_held=normS <= alpha_p)
    v, norm_v = S, normS
    rep.norms.append(normS)
    rep.stayed_in_ball = normS <= 2 * alpha_p
    for it in range(1, max_iter + 1):
        nxt = combine(S, bilinear_B(v, v), 1.0, -1.0)
        inc = kp_norm(combine(nxt, v, 1.0, -1.0), p)
        rep.iterations = it
        if rep.increments:
            rep.ratios.append(inc / rep.increments[-1] if rep.increments[-1] > 0 else 0.0)
        rep.increments.append(inc)
        if inc <= tol * (1 + norm_v):
            rep.converged = True
            rep.residual = inc
            return rep, v
        v = nxt
        norm_v = kp_norm(v, p)
        rep.norms.append(norm_v)
        if norm_v > 2 * alpha_p:
            rep.stayed_in_ball = False
        if not math.isfinite(norm_v) or norm_v > 10 * alpha_p:
            rep.diverged = True
            rep.residual = inc
            return rep, v
    rep.residual = rep.increments[-1]
    return rep, v


def contraction_fails(prob, probe_iter=12):
    """True when Picard from this data does not contract within probe_iter steps."""
    S = duhamel_source(prob)
    normS = kp_norm(S, prob.p)
    if normS == 0:
        return False
    rep, _ = picard_solve(prob, alpha_p=normS, max_iter=probe_iter, tol=1e-12, source=S)
    if rep.diverged:
        return True
    return bool(rep.ratios) and max(rep.ratios) >= 1.0


def calibrate_alpha(u_shape, T, nt, p=6.0, forcing=None, lo=1e-3, hi=1e3, rel_tol=0.02, probe_iter=12):
    """Bisect (in log scale) the amplitude of ``u_shape`` at which Picard stops
    contracting; returns alpha_p = ||S||_K at the threshold and the amplitude."""
    def fails(a):
        return contraction_fails(MildProblem(u_shape * a, T, nt, p, forcing), probe_iter)

    if fails(lo):
        raise ValueError("contraction already fails at the lower amplitude bracket")
    if not fails(hi):
        raise ValueError("contraction still holds at the upper amplitude bracket")
    while hi / lo > 1 + rel_tol:
        mid = math.sqrt(lo * hi)
        if fails(mid):
            hi = mid
        else:
            lo = mid
    S = duhamel_source(MildProblem(u_shape * lo, T, nt, p, forcing))
    return kp_norm(S, p), lo


def brinkman_heat_bound(forcing, times, p=6.0):
    """Both sides of the heat bound for a Brinkman force F:
    ||int e^{(t-s)Lap} P F||_{B_p(T)} against (int ||F||_{3/2}^2)^{1/2} + int ||F||_3."""
    times = np.asarray(times, dtype=float)
    heat = Trajectory(times, _duhamel_integral([leray_project(F) for F in forcing], times))
    lhs = bp_norm(heat, p)
    n32 = np.array([lp_norm(F, 1.5) for F in forcing])
    n3 = np.array([lp_norm(F, 3.0) for F in forcing])
    rhs = math.sqrt(np.trapezoid(n32 ** 2, times)) + float(np.trapezoid(n3, times))
    return lhs, rhs
