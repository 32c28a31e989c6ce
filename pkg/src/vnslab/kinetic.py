"""Particle representation of the kinetic density and its moments."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import integrate, interpolate, optimize, special
from scipy.stats import qmc

from . import _kernels
from .spectral import SpectralField, TorusGrid

DEPOSITION_TOLERANCE = 1e-12


class TailMassWarning(UserWarning):
    """The velocity truncation drops more than 1e-6 of the mass."""


class LowDecayWarning(UserWarning):
    """Velocity decay exponent q lies in (4, 5]."""


@dataclass(frozen=True)
class InitialKineticData:
    """Separable initial density f(x, v) = rho0(x) g(v - drift).

    rho0 is uniform or ``mean * (1 + amplitude * cos(2 pi mode . x / L))``;
    g is a Maxwellian of width ``sigma`` or a kappa profile
    ``(1 + |v|^2 / sigma^2)^(-kappa)``, normalised to unit mass.
    ``v_cut`` is the radius of the velocity ball (about the drift) kept by
    the sampler; by default it is chosen to drop less than 1e-7 of the mass.
    """

    mass: float = 1.0
    L: float = 2 * math.pi
    spatial: str = "uniform"
    amplitude: float = 0.0
    mode: tuple = (1, 0, 0)
    velocity: str = "maxwellian"
    sigma: float = 1.0
    drift: tuple = (0.0, 0.0, 0.0)
    kappa: float = 6.0
    q_decay: float = 6.0
    v_cut: float | None = None

    def __post_init__(self):
        if self.mass < 0:
            raise ValueError("mass must be nonnegative")
        if self.q_decay <= 4:
            raise ValueError(f"q_decay must exceed 4, got {self.q_decay}")
        if self.q_decay <= 5:
            warnings.warn(f"q_decay={self.q_decay} <= 5", LowDecayWarning, stacklevel=3)
        if self.spatial not in ("uniform", "cosine"):
            raise ValueError(f"unknown spatial profile {self.spatial!r}")
        if self.velocity not in ("maxwellian", "kappa"):
            raise ValueError(f"unknown velocity profile {self.velocity!r}")
        if self.spatial == "cosine" and abs(self.amplitude) > 1:
            raise ValueError("cosine amplitude above 1 makes the density negative")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.velocity == "kappa" and 2 * self.kappa < max(self.q_decay, 9.0 + 1e-9):
            raise ValueError("kappa profile needs 2*kappa >= q_decay and 2*kappa > 9 (finite M6)")

    # -- profiles ----------------------------------------------------------
    @property
    def mean_density(self):
        return self.mass / self.L ** 3

    def spatial_density(self, x):
        """rho0 at points x of shape (..., 3)."""
        x = np.asarray(x, dtype=float)
        base = np.full(x.shape[:-1], self.mean_density)
        if self.spatial == "uniform" or self.amplitude == 0:
            return base
        k = 2 * np.pi / self.L * np.asarray(self.mode, dtype=float)
        return base * (1 + self.amplitude * np.cos(x @ k))

    def radial_profile(self, r):
        """g as a function of |v - drift|, normalised so that int g dv = 1."""
        r = np.asarray(r, dtype=float)
        s = self.sigma
        if self.velocity == "maxwellian":
            return (2 * np.pi * s * s) ** -1.5 * np.exp(-0.5 * (r / s) ** 2)
        norm = s ** 3 * np.pi ** 1.5 * math.exp(special.gammaln(self.kappa - 1.5) - special.gammaln(self.kappa))
        return (1 + (r / s) ** 2) ** (-self.kappa) / norm

    def density(self, x, v):
        v = np.asarray(v, dtype=float)
        r = np.linalg.norm(v - np.asarray(self.drift, dtype=float), axis=-1)
        return self.spatial_density(x) * self.radial_profile(r)

    # -- closed-form functionals ------------------------------------------
    def radial_cdf(self, r):
        if self.velocity == "maxwellian":
            z = r / self.sigma
            return float(special.erf(z / math.sqrt(2)) - math.sqrt(2 / math.pi) * z * math.exp(-z * z / 2))
        val, _ = integrate.quad(lambda s: 4 * np.pi * s * s * self.radial_profile(s), 0, r, limit=200)
        return min(1.0, val)

    @property
    def cutoff(self):
        if self.v_cut is not None:
            return float(self.v_cut)
        if self.velocity == "maxwellian":
            return 7.0 * self.sigma
        f = lambda r: (1 - self.radial_cdf(r)) - 1e-7
        hi = 100 * self.sigma
        if f(hi) > 0:
            return hi
        return optimize.brentq(f, self.sigma, hi)

    def tail_mass(self):
        return self.mass * max(0.0, 1.0 - self.radial_cdf(self.cutoff))

    def velocity_moment(self, k):
        """M_k / mass = int g(v - drift) |v|^k dv, by quadrature."""
        V = float(np.linalg.norm(self.drift))

        def integrand(mu, r):
            return 2 * np.pi * r * r * self.radial_profile(r) * (V * V + r * r + 2 * V * r * mu) ** (k / 2)

        scale = self.sigma
        val, _ = integrate.dblquad(integrand, 0, 60 * scale if self.velocity == "maxwellian" else np.inf,
                                   -1, 1, epsabs=1e-13, epsrel=1e-11)
        return val

    def moment(self, k):
        """Total velocity moment M_k of f^in."""
        return self.mass * self.velocity_moment(k)

    def nq_value(self, q=None):
        """sup over (x, v) of (1 + |v|^q) f(x, v)."""
        q = self.q_decay if q is None else q
        rho_max = self.mean_density * (1 + (abs(self.amplitude) if self.spatial == "cosine" else 0.0))
        V = float(np.linalg.norm(self.drift))
        # along the drift direction the profile is largest for a given |v|
        h = lambda r: (1 + r ** q) * self.radial_profile(abs(r - V))
        rs = np.linspace(0, V + 60 * self.sigma, 20001)
        vals = h(rs)
        i = int(np.argmax(vals))
        lo, hi = rs[max(i - 1, 0)], rs[min(i + 1, len(rs) - 1)]
        res = optimize.minimize_scalar(lambda r: -h(r), bounds=(lo, hi), method="bounded",
                                       options={"xatol": 1e-12})
        return rho_max * max(vals[i], -res.fun)

    def with_(self, **kw):
        return replace(self, **kw)


@dataclass(frozen=True, eq=False)
class ParticleEnsemble:
    """Weighted particles; positions are kept unwrapped (continuous paths)."""

    x: np.ndarray
    v: np.ndarray
    w: np.ndarray
    ids: np.ndarray
    time: float = 0.0
    L: float = 2 * math.pi
    tail_mass: float = 0.0

    def __post_init__(self):
        for a in (self.x, self.v, self.w, self.ids):
            a.flags.writeable = False

    def __len__(self):
        return len(self.w)

    @property
    def mass(self):
        return float(np.sum(self.w))

    def wrapped(self):
        return np.mod(self.x, self.L)

    def kinetic_energy(self):
        return 0.5 * float(np.dot(self.w, np.sum(self.v ** 2, axis=1)))

    def momentum(self):
        return self.w @ self.v

    def reweighted(self, w):
        return replace(self, w=np.array(w, dtype=float))

    def evolve(self, x, v, time):
        return replace(self, x=x, v=v, time=time)


def _lattice_side(n):
    side = 1
    while (2 * side) ** 3 <= n:
        side *= 2
    return side


def sample_particles(data, n, seed=0):
    """Tensorised quadrature of f^in.

    Positions sit on a cubic lattice of side ``2^m`` (the largest with at most
    n sites) shifted by a seeded offset; each site carries ``n // 2^(3m)``
    velocities drawn from a scrambled Sobol sequence through the inverse radial
    CDF.  Weights are density x cell volume, normalised so that they sum to the
    mass exactly.  The ensemble therefore holds the largest tensor product that
    fits in n particles.
    """
    if n < 1:
        raise ValueError("need at least one particle")
    rng = np.random.default_rng(seed)
    side = _lattice_side(n)
    per_site = n // side ** 3
    cell = data.L / side
    offset = rng.random(3) * cell
    axis = np.arange(side) * cell
    sites = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3) + offset
    x = np.repeat(sites, per_site, axis=0)

    count = len(x)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        u = qmc.Sobol(d=3, scramble=True, seed=rng).random(count)
    vcut = data.cutoff
    radii = _inverse_radial_cdf(data, vcut, u[:, 0])
    mu = 2 * u[:, 1] - 1
    ang = 2 * np.pi * u[:, 2]
    st = np.sqrt(np.clip(1 - mu * mu, 0, None))
    dirs = np.stack([st * np.cos(ang), st * np.sin(ang), mu], axis=1)
    v = np.asarray(data.drift, dtype=float) + radii[:, None] * dirs

    dens = data.spatial_density(x)
    if np.any(dens < 0):
        raise ValueError("initial density is negative somewhere")
    w = dens * cell ** 3 / per_site
    total = w.sum()
    if total > 0:
        w = w * (data.mass / total)
    tail = data.tail_mass()
    if tail > 1e-6 * data.mass:
        warnings.warn(f"velocity truncation at {vcut:g} drops mass {tail:.3e}", TailMassWarning, stacklevel=2)
    return ParticleEnsemble(x, v, w, np.arange(count, dtype=np.int64), 0.0, data.L, tail)


def _inverse_radial_cdf(data, vcut, u):
    rs = np.linspace(0.0, vcut, 4097)
    if data.velocity == "maxwellian":
        z = rs / data.sigma
        cdf = special.erf(z / math.sqrt(2)) - np.sqrt(2 / np.pi) * z * np.exp(-z * z / 2)
    else:
        dens = 4 * np.pi * rs ** 2 * data.radial_profile(rs)
        cdf = integrate.cumulative_simpson(dens, x=rs, initial=0.0)
    cdf = np.maximum.accumulate(cdf / cdf[-1])
    inv = interpolate.PchipInterpolator(cdf, rs) if np.all(np.diff(cdf) > 0) else None
    if inv is None:
        keep = np.concatenate([[True], np.diff(cdf) > 0])
        inv = interpolate.PchipInterpolator(cdf[keep], rs[keep])
    return np.clip(inv(u), 0.0, vcut)


# -- characteristics ------------------------------------------------------------

def _field_array(u):
    if u is None:
        return None
    if isinstance(u, SpectralField):
        if u.grid.dim != 3 or u.components != 3:
            raise ValueError("particle push needs a 3D vector field")
        return np.ascontiguousarray(u.values), u.grid.spacing
    return u


def interpolate_velocity(u, x):
    """TSC interpolation of a vector SpectralField at (unwrapped) positions."""
    arr, h = _field_array(u)
    return _kernels.gather(np.ascontiguousarray(x), arr, h)


def push_particles(ens, u_start, dt, u_end=None):
    """One exponential-midpoint step of X' = V, V' = u(t, X) - V.

    The fluid velocity is linear in time between ``u_start`` (at ens.time) and
    ``u_end`` (at ens.time + dt; defaults to ``u_start``).  It is frozen at
    its value at a midpoint predictor and the linear ODE is then solved
    exactly, so the drag factor exp(-dt) is exact.  ``u_start=None`` means
    u = 0.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    decay = math.exp(-dt)
    lag = -math.expm1(-dt)  # 1 - exp(-dt)
    x0, v0 = ens.x, ens.v
    if u_start is None:
        return ens.evolve(x0 + lag * v0, decay * v0, ens.time + dt)
    a0, h = _field_array(u_start)
    if u_end is None:
        amid = a0
    else:
        a1, _ = _field_array(u_end)
        amid = 0.5 * (a0 + a1)
    half = dt / 2
    hlag = -math.expm1(-half)
    u_pred = _kernels.gather(np.ascontiguousarray(x0), amid, h)
    x_half = x0 + hlag * v0 + (half - hlag) * u_pred
    ubar = _kernels.gather(np.ascontiguousarray(x_half), amid, h)
    x1 = x0 + lag * v0 + (dt - lag) * ubar
    v1 = decay * v0 + lag * ubar
    return ens.evolve(x1, v1, ens.time + dt)


def drag_only_flow(x, v, t):
    """Exact free-drag characteristics from time 0 to t."""
    return x + (-math.expm1(-t)) * v, math.exp(-t) * v


def drag_only_density(data, grid, t):
    """Spatial density at time t of f^in pushed by the drag-only flow (Maxwellian family)."""
    if data.velocity != "maxwellian":
        raise ValueError("closed form available for the Maxwellian family only")
    s = -math.expm1(-t)
    xs = np.moveaxis(grid.coordinates(), 0, -1)
    if data.spatial == "uniform" or data.amplitude == 0:
        return np.full(grid.shape, data.mean_density)
    k = 2 * np.pi / data.L * np.asarray(data.mode, dtype=float)
    damp = math.exp(-0.5 * float(k @ k) * (s * data.sigma) ** 2)
    phase = xs @ k - s * float(k @ np.asarray(data.drift, dtype=float))
    return data.mean_density * (1 + data.amplitude * damp * np.cos(phase))


# -- moments --------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MomentFields:
    """Deposited velocity moments on a grid; physical arrays plus field views."""

    grid: TorusGrid
    arrays: dict = field(repr=False)

    @property
    def rho(self):
        return SpectralField.from_values(self.grid, self.arrays["rho"])

    @property
    def current(self):
        return SpectralField.from_values(self.grid, self.arrays["j"])

    @property
    def m1(self):
        return SpectralField.from_values(self.grid, self.arrays["m1"])

    @property
    def m2(self):
        return SpectralField.from_values(self.grid, self.arrays["m2"])

    def integral(self, name):
        return np.sum(self.arrays[name], axis=(-3, -2, -1)) * self.grid.cell_volume


def deposit_moments(ens, grid, weights=None):
    """TSC deposition of w, w v, w|v|, w|v|^2 divided by the cell volume."""
    if grid.dim != 3:
        raise ValueError("particle deposition is implemented in 3D")
    if abs(grid.L - ens.L) > 1e-12 * grid.L:
        raise ValueError("ensemble and grid boxes differ")
    w = ens.w if weights is None else np.asarray(weights, dtype=float)
    raw = _kernels.deposit(ens.x, ens.v, w, grid.n, grid.spacing) / grid.cell_volume
    arrays = {"rho": raw[0], "j": raw[1:4], "m1": raw[4], "m2": raw[5]}
    for a in arrays.values():
        a.flags.writeable = False
    return MomentFields(grid, arrays)


def sup_moment_norms(m):
    """Grid L^1 and L^inf norms of the moment densities.

    ``*_L1_Linf`` is the L^1 + L^inf norm of the intersection space.
    """
    dv = m.grid.cell_volume
    out = {}
    for name in ("rho", "m1"):
        a = np.abs(m.arrays[name])
        out[f"{name}_L1"] = float(a.sum() * dv)
        out[f"{name}_Linf"] = float(a.max()) if a.size else 0.0
        out[f"{name}_L1_Linf"] = out[f"{name}_L1"] + out[f"{name}_Linf"]
    out["m2_Linf"] = float(np.abs(m.arrays["m2"]).max())
    return out


def particle_dissipation(ens, u):
    """sum_i w_i sum_g S(x_i - x_g) |v_i - u(x_g)|^2: the kernel quadrature of
    int int f |v - u|^2 for the deposited particle density."""
    arr, h = _field_array(u)
    per = _kernels.kernel_relative_sq(ens.x, ens.v, arr, h)
    return float(np.dot(ens.w, per))
