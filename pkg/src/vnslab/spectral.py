"""Fourier representation of periodic fields and Littlewood-Paley analysis.

Fields are stored as Fourier-series coefficients ``c_k = fftn(u) / N`` so that
``int |u|^2 dx = L^d * sum |c_k|^2``.  Every operation returns a fresh field;
inputs are never modified.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np


class TruncationWarning(UserWarning):
    """A dyadic shell was requested outside the range resolved by the grid."""


@dataclass(frozen=True)
class TorusGrid:
    """Uniform grid on the periodic box [0, L)^dim with n points per axis."""

    n: int
    L: float = 2 * math.pi
    dim: int = 3

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError("dim must be 2 or 3")
        if self.n < 2 or self.n & (self.n - 1):
            raise ValueError(f"n_per_axis must be a power of two >= 2, got {self.n}")
        if not self.L > 0:
            raise ValueError("box length must be positive")

    @property
    def spacing(self):
        return self.L / self.n

    @property
    def shape(self):
        return (self.n,) * self.dim

    @property
    def npoints(self):
        return self.n ** self.dim

    @property
    def volume(self):
        return self.L ** self.dim

    @property
    def cell_volume(self):
        return self.spacing ** self.dim

    @cached_property
    def _k1d(self):
        return np.fft.fftfreq(self.n, d=1.0 / self.n)

    @cached_property
    def wavevectors(self):
        """Physical wavevectors 2 pi k / L, shape (dim, n, ..., n)."""
        k = 2 * np.pi / self.L * self._k1d
        return np.stack(np.meshgrid(*([k] * self.dim), indexing="ij"))

    @cached_property
    def deriv_wavevectors(self):
        """Wavevectors with the Nyquist component zeroed, used for derivatives
        and the Leray projection so that real fields stay real."""
        k = 2 * np.pi / self.L * self._k1d
        k[self.n // 2] = 0.0
        return np.stack(np.meshgrid(*([k] * self.dim), indexing="ij"))

    @cached_property
    def ksq(self):
        return np.sum(self.wavevectors ** 2, axis=0)

    @cached_property
    def kmag(self):
        return np.sqrt(self.ksq)

    @cached_property
    def dealias_mask(self):
        """2/3-rule mask: keep modes with |k_i| < n/3 on every axis."""
        keep = np.abs(self._k1d) < self.n / 3.0
        m = keep
        for _ in range(self.dim - 1):
            m = np.multiply.outer(m, keep)
        return m

    def coordinates(self):
        x = np.arange(self.n) * self.spacing
        return np.stack(np.meshgrid(*([x] * self.dim), indexing="ij"))


def _spatial_axes(grid):
    return tuple(range(1, grid.dim + 1))


def _hermitian(modes, grid):
    """Project mode arrays onto Hermitian-symmetric ones (real physical values)."""
    axes = _spatial_axes(grid)
    rev = np.roll(np.flip(modes, axis=axes), 1, axis=axes)
    return 0.5 * (modes + np.conj(rev))


def _to_modes(values, grid):
    return np.fft.fftn(values, axes=_spatial_axes(grid)) / grid.npoints


def _to_values(modes, grid):
    return np.fft.ifftn(modes * grid.npoints, axes=_spatial_axes(grid)).real


@dataclass(frozen=True, eq=False)
class SpectralField:
    """Real scalar (1 component) or vector (dim components) field held as modes."""

    grid: TorusGrid
    modes: np.ndarray
    solenoidal: bool = False

    def __post_init__(self):
        m = self.modes
        if m.ndim != self.grid.dim + 1 or m.shape[1:] != self.grid.shape:
            raise ValueError(f"mode array shape {m.shape} does not match grid {self.grid.shape}")
        if m.shape[0] not in (1, self.grid.dim):
            raise ValueError("a field has 1 or dim components")
        m.flags.writeable = False

    @classmethod
    def from_values(cls, grid, values, solenoidal=False):
        values = np.asarray(values, dtype=float)
        if values.ndim == grid.dim:
            values = values[None]
        return cls(grid, _to_modes(values, grid), solenoidal)

    @classmethod
    def zeros(cls, grid, components=3):
        return cls(grid, np.zeros((components,) + grid.shape, dtype=complex), components > 1)

    @property
    def components(self):
        return self.modes.shape[0]

    @cached_property
    def values(self):
        v = _to_values(self.modes, self.grid)
        v.flags.writeable = False
        return v

    def with_modes(self, modes, solenoidal=None):
        return SpectralField(self.grid, modes, self.solenoidal if solenoidal is None else solenoidal)

    def __add__(self, other):
        _check_same_grid(self, other)
        return self.with_modes(self.modes + other.modes, self.solenoidal and other.solenoidal)

    def __sub__(self, other):
        _check_same_grid(self, other)
        return self.with_modes(self.modes - other.modes, self.solenoidal and other.solenoidal)

    def __mul__(self, scalar):
        return self.with_modes(self.modes * float(scalar))

    __rmul__ = __mul__

    def __neg__(self):
        return self.with_modes(-self.modes)

    def mean(self):
        return self.modes[(slice(None),) + (0,) * self.grid.dim].real.copy()

    def l2_norm(self):
        """L^2 norm computed in mode space (Parseval)."""
        return math.sqrt(self.grid.volume * float(np.sum(np.abs(self.modes) ** 2)))

    def inner(self, other):
        _check_same_grid(self, other)
        return self.grid.volume * float(np.sum(np.conj(self.modes) * other.modes).real)


def _check_same_grid(a, b):
    if a.grid != b.grid:
        raise ValueError(f"grid mismatch: {a.grid} vs {b.grid}")
    if a.components != b.components:
        raise ValueError("component count mismatch")


def pointwise_magnitude(values):
    """Euclidean magnitude over the component axis of a physical array."""
    if values.shape[0] == 1:
        return np.abs(values[0])
    return np.sqrt(np.sum(values ** 2, axis=0))


def refined_values(v, factor=2):
    """Physical values on a grid refined by zero padding in spectrum."""
    g = v.grid
    n2 = g.n * factor
    fine = TorusGrid(n2, g.L, g.dim)
    big = np.zeros((v.components,) + fine.shape, dtype=complex)
    idx = np.fft.fftfreq(g.n, d=1.0 / g.n).astype(int)
    sel = np.ix_(*([idx % n2] * g.dim))
    for c in range(v.components):
        big[c][sel] = v.modes[c]
    return _to_values(big, fine)


def lp_norm(v, p, refine=False):
    """Spatial L^p norm by grid quadrature; p=inf gives the grid maximum.

    With ``refine`` the maximum is taken on a 2x zero-padded grid (the plain
    grid maximum is only a lower bound for the true supremum).
    """
    if p == math.inf or p == "inf":
        vals = refined_values(v) if refine else v.values
        return float(np.max(pointwise_magnitude(vals)))
    if p < 1:
        raise ValueError("p must be >= 1")
    mag = pointwise_magnitude(v.values)
    return float((v.grid.cell_volume * np.sum(mag ** p)) ** (1.0 / p))


def hminus1_norm(v):
    """Homogeneous H^{-1} norm; the zero mode is dropped."""
    g = v.grid
    ksq = g.ksq
    inv = np.zeros_like(ksq)
    inv[ksq > 0] = 1.0 / ksq[ksq > 0]
    return math.sqrt(g.volume * float(np.sum(np.abs(v.modes) ** 2 * inv)))


def hs_norm(v, s):
    """Homogeneous H^s norm (zero mode dropped)."""
    g = v.grid
    w = np.zeros_like(g.ksq)
    nz = g.ksq > 0
    w[nz] = g.ksq[nz] ** s
    return math.sqrt(g.volume * float(np.sum(np.abs(v.modes) ** 2 * w)))


# --- linear operators --------------------------------------------------------

def leray_project(v):
    """Project a vector field onto divergence-free fields; zero mode untouched."""
    g = v.grid
    if v.components != g.dim:
        raise ValueError("Leray projection needs a vector field")
    k = g.deriv_wavevectors
    ksq = np.sum(k ** 2, axis=0)
    inv = np.zeros_like(ksq)
    inv[ksq > 0] = 1.0 / ksq[ksq > 0]
    kdotv = np.sum(k * v.modes, axis=0)
    return v.with_modes(v.modes - k * (kdotv * inv), solenoidal=True)


def heat_propagate(v, t):
    """Apply the heat semigroup exp(t Laplacian)."""
    if t < 0:
        raise ValueError("heat_propagate needs t >= 0")
    return v.with_modes(v.modes * np.exp(-v.grid.ksq * t))


def grad(v):
    """Gradient of a scalar field, or the Jacobian rows d_j v_i of a vector field.

    For a vector field the result is a list of dim vector fields, entry j
    being the derivative along axis j.
    """
    k = v.grid.deriv_wavevectors
    if v.components == 1:
        return v.with_modes(1j * k * v.modes[0], solenoidal=False)
    return [v.with_modes(1j * k[j] * v.modes, solenoidal=False) for j in range(v.grid.dim)]


def div(v):
    k = v.grid.deriv_wavevectors
    if v.components != v.grid.dim:
        raise ValueError("divergence needs a vector field")
    return SpectralField(v.grid, np.sum(1j * k * v.modes, axis=0)[None])


def dealias(v):
    return v.with_modes(v.modes * v.grid.dealias_mask)


def from_physical_product(grid, values, solenoidal=False):
    """Turn a physical-space product into a dealiased Hermitian field."""
    modes = _to_modes(values, grid) * grid.dealias_mask
    return SpectralField(grid, _hermitian(modes, grid), solenoidal)


def multiply(a, b):
    """Dealiased pointwise product; a scalar times a field, or two scalars."""
    if a.grid != b.grid:
        raise ValueError("grid mismatch")
    if a.components != 1 and b.components != 1:
        raise ValueError("multiply needs at least one scalar factor")
    return from_physical_product(a.grid, a.values * b.values)


def advect(u, v):
    """Dealiased (u . grad) v for a vector field u and any field v."""
    if u.grid != v.grid:
        raise ValueError("grid mismatch")
    if u.components != u.grid.dim:
        raise ValueError("advecting field must be a vector field")
    k = u.grid.deriv_wavevectors
    uval = u.values
    out = np.zeros((v.components,) + u.grid.shape)
    for j in range(u.grid.dim):
        dj = _to_values(1j * k[j] * v.modes, u.grid)
        out += uval[j] * dj
    return from_physical_product(u.grid, out)


def tensor_divergence(w, v):
    """Dealiased div(w (x) v), component i = sum_j d_j (w_j v_i)."""
    if w.grid != v.grid:
        raise ValueError("grid mismatch")
    g = w.grid
    k = g.deriv_wavevectors
    wv, vv = w.values, v.values
    modes = np.zeros((g.dim,) + g.shape, dtype=complex)
    for j in range(g.dim):
        prod = _to_modes(wv[j] * vv, g) * g.dealias_mask
        modes += 1j * k[j] * prod
    return SpectralField(g, _hermitian(modes, g))


# --- Littlewood-Paley machinery ---------------------------------------------

CHI_INNER = 0.75
CHI_OUTER = 4.0 / 3.0


def chi_profile(r):
    """Radial cutoff: 1 for r <= 3/4, 0 for r >= 4/3, septic smoothstep between."""
    s = np.clip((np.asarray(r, dtype=float) - CHI_INNER) / (CHI_OUTER - CHI_INNER), 0.0, 1.0)
    step = s ** 4 * (35 - 84 * s + 70 * s ** 2 - 20 * s ** 3)
    return 1.0 - step


def phi_profile(r):
    """Annulus profile chi(r/2) - chi(r), supported in 3/4 < r < 8/3."""
    r = np.asarray(r, dtype=float)
    return chi_profile(r / 2) - chi_profile(r)


class DyadicLadder:
    """Dyadic blocks phi(xi / 2^j) bound to a grid, for the shells it resolves."""

    def __init__(self, grid):
        self.grid = grid
        kmag = grid.kmag
        nonzero = kmag[kmag > 0]
        kmin, kmax = float(nonzero.min()), float(nonzero.max())
        lo = math.floor(math.log2(kmin * 3 / 8)) - 1
        hi = math.ceil(math.log2(kmax * 4 / 3)) + 1
        shells = [j for j in range(lo, hi + 1) if np.any(phi_profile(nonzero / 2.0 ** j) > 0)]
        self.j_min, self.j_max = shells[0], shells[-1]

    @property
    def shells(self):
        return range(self.j_min, self.j_max + 1)

    def phi(self, j):
        return phi_profile(self.grid.kmag / 2.0 ** j)

    def chi(self, j):
        return chi_profile(self.grid.kmag / 2.0 ** j)

    def __contains__(self, j):
        return self.j_min <= j <= self.j_max


_ladders = {}


def ladder_for(grid):
    if grid not in _ladders:
        _ladders[grid] = DyadicLadder(grid)
    return _ladders[grid]


def dyadic_block(v, j, ladder=None):
    """Littlewood-Paley block: modes multiplied by phi(xi / 2^j)."""
    ladder = ladder or ladder_for(v.grid)
    if j not in ladder:
        warnings.warn(f"shell {j} outside resolved range [{ladder.j_min}, {ladder.j_max}]",
                      TruncationWarning, stacklevel=2)
        return v.with_modes(np.zeros_like(v.modes))
    return v.with_modes(v.modes * ladder.phi(j))


def low_pass(v, j, ladder=None):
    """Low-frequency cutoff S_j: modes multiplied by chi(xi / 2^j)."""
    ladder = ladder or ladder_for(v.grid)
    return v.with_modes(v.modes * ladder.chi(j))


@dataclass(frozen=True)
class BesovIndex:
    s: float
    p: float
    q: float
    r: float | None = None

    def __post_init__(self):
        for name in ("p", "q", "r"):
            val = getattr(self, name)
            if val is not None and not (1 <= val <= math.inf):
                raise ValueError(f"Besov index {name} must lie in [1, inf], got {val}")


def _lq(values, q):
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return 0.0
    if q == math.inf:
        return float(values.max())
    return float(np.sum(values ** q) ** (1.0 / q))


def block_norms(v, p, ladder=None):
    """Spatial L^p norm of every resolved block, keyed by shell index."""
    ladder = ladder or ladder_for(v.grid)
    return {j: lp_norm(v.with_modes(v.modes * ladder.phi(j)), p) for j in ladder.shells}


def besov_seminorm(v, idx, ladder=None):
    """l^q over resolved shells of 2^{js} ||Delta_j v||_p."""
    norms = block_norms(v, idx.p, ladder)
    return _lq([2.0 ** (j * idx.s) * n for j, n in norms.items()], idx.q)


def _time_lr(samples, times, r):
    samples = np.asarray(samples, dtype=float)
    if r == math.inf:
        return float(samples.max())
    return float(np.trapezoid(samples ** r, times) ** (1.0 / r))


class Trajectory:
    """Uniformly sampled sequence of fields on [0, T]; frames may be lazy."""

    def __init__(self, times, frames):
        self.times = np.asarray(times, dtype=float)
        self._frames = frames
        if len(self.times) != len(frames):
            raise ValueError("times and frames differ in length")

    def __len__(self):
        return len(self.times)

    def __getitem__(self, i):
        f = self._frames[i]
        return f() if callable(f) else f

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    @property
    def grid(self):
        return self[0].grid

    @property
    def T(self):
        return float(self.times[-1] - self.times[0])

    @classmethod
    def heat_flow(cls, u0, T, nsteps):
        """Lazily evaluated heat flow of u0 on nsteps+1 uniform times."""
        times = np.linspace(0.0, T, nsteps + 1)
        return cls(times, [lambda t=t: heat_propagate(u0, t) for t in times])


def block_time_series(traj, p, ladder=None):
    """Array of shape (nt, nshells) of ||Delta_j u(t)||_p."""
    ladder = ladder or ladder_for(traj.grid)
    phis = [ladder.phi(j) for j in ladder.shells]
    out = np.empty((len(traj), len(phis)))
    for i, u in enumerate(traj):
        for b, phi in enumerate(phis):
            out[i, b] = lp_norm(u.with_modes(u.modes * phi), p)
    return out


def chemin_lerner_norm(traj, idx, ladder=None, series=None):
    """Chemin-Lerner norm: time L^r per block first (trapezoid), then l^q over j."""
    if len(traj) < 2:
        raise ValueError("a Chemin-Lerner norm needs at least two snapshots")
    if idx.r is None:
        raise ValueError("BesovIndex needs a time index r")
    ladder = ladder or ladder_for(traj.grid)
    if series is None:
        series = block_time_series(traj, idx.p, ladder)
    vals = [2.0 ** (j * idx.s) * _time_lr(series[:, b], traj.times, idx.r)
            for b, j in enumerate(ladder.shells)]
    return _lq(vals, idx.q)


def bp_norm(traj, p, ladder=None):
    """Norm of the critical space: L~inf B^{-1+d/p}_{p,inf} + L~1 B^{1+d/p}_{p,inf}."""
    d = traj.grid.dim
    series = block_time_series(traj, p, ladder)
    a = chemin_lerner_norm(traj, BesovIndex(-1 + d / p, p, math.inf, math.inf), ladder, series)
    b = chemin_lerner_norm(traj, BesovIndex(1 + d / p, p, math.inf, 1), ladder, series)
    return a + b


def kp_norm(traj, p, ladder=None):
    """Norm L~4 B^{-1/2+d/p}_{p,inf} used for the fixed-point ball."""
    d = traj.grid.dim
    return chemin_lerner_norm(traj, BesovIndex(-0.5 + d / p, p, math.inf, 4), ladder)


def fit_heat_decay_rate(v, j, times, p=2, ladder=None):
    """Least-squares rate c in ||e^{t Lap} Delta_j v||_p ~ C exp(-c t 4^j)."""
    block = dyadic_block(v, j, ladder)
    base = lp_norm(block, p)
    x = np.asarray(times, dtype=float) * 4.0 ** j
    y = np.array([math.log(lp_norm(heat_propagate(block, t), p) / base) for t in times])
    slope, intercept = np.polyfit(x, y, 1)
    return -slope, math.exp(intercept)
