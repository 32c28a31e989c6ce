"""Coupled fluid-particle time stepping with an energy/dissipation ledger.

One step is a kinetic-fluid-kinetic Strang splitting:

* half push of the particles in the current fluid field,
* fluid step with the particle moments frozen: drag half step, exponential
  RK2 step for the Navier-Stokes part, drag half step,
* half push of the particles in the new fluid field.

The drag sub-steps solve the Crank-Nicolson system for du/dt = P[j - rho u]
by a fixed-point iteration preconditioned with the pointwise semi-implicit
factor 1/(1 + rho dt/2), which stays stable where rho is large.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .kinetic import (InitialKineticData, ParticleEnsemble, deposit_moments,
                      push_particles, sample_particles)
from .spectral import (SpectralField, TorusGrid, _hermitian, _to_modes, advect,
                       leray_project, lp_norm, pointwise_magnitude)

CFL_LIMIT = 0.5
DRAG_TOL = 1e-13
DRAG_MAX_ITER = 50


class CFLViolation(RuntimeError):
    pass


class NumericalAbort(RuntimeError):
    """Raised on non-finite values; carries the last good state."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


@dataclass(frozen=True)
class FluidProfile:
    """Initial fluid velocity.

    kinds: ``zero``; ``shear`` (amplitude * sin(mode * y) e_x, an exact
    Navier-Stokes solution); ``taylor_green``; ``random`` (divergence-free,
    band-limited to |k| <= kmax with energy spectrum ~ |k|^-slope, scaled to
    the given rms amplitude).
    """

    kind: str = "zero"
    amplitude: float = 0.0
    mode: int = 1
    kmax: float = 4.0
    slope: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("zero", "shear", "taylor_green", "random"):
            raise ValueError(f"unknown fluid profile {self.kind!r}")


def initial_velocity(profile, grid):
    xs = grid.coordinates()
    k = 2 * np.pi / grid.L * profile.mode
    A = profile.amplitude
    vals = np.zeros((3,) + grid.shape)
    if profile.kind == "shear":
        vals[0] = A * np.sin(k * xs[1])
    elif profile.kind == "taylor_green":
        vals[0] = A * np.sin(k * xs[0]) * np.cos(k * xs[1]) * np.cos(k * xs[2])
        vals[1] = -A * np.cos(k * xs[0]) * np.sin(k * xs[1]) * np.cos(k * xs[2])
    elif profile.kind == "random":
        return random_solenoidal(grid, A, profile.kmax, profile.slope, profile.seed)
    return leray_project(SpectralField.from_values(grid, vals))


def random_solenoidal(grid, rms, kmax, slope=2.0, seed=0):
    """Mean-zero divergence-free field with modes in 0 < |xi| <= kmax."""
    rng = np.random.default_rng(seed)
    modes = rng.standard_normal((3,) + grid.shape) + 1j * rng.standard_normal((3,) + grid.shape)
    kmag = grid.kmag
    amp = np.zeros_like(kmag)
    band = (kmag > 0) & (kmag <= kmax)
    amp[band] = kmag[band] ** (-(slope + 2) / 2)
    modes = modes * amp * grid.dealias_mask
    u = leray_project(SpectralField(grid, _hermitian(modes, grid)))
    norm = u.l2_norm() / math.sqrt(grid.volume)
    return u * (rms / norm) if norm > 0 else u


@dataclass(frozen=True)
class SimConfig:
    n: int = 32
    L: float = 2 * math.pi
    n_particles: int = 0
    dt: float = 2e-3
    T: float = 0.5
    fluid: FluidProfile = field(default_factory=FluidProfile)
    kinetic: InitialKineticData | None = None
    seed: int = 0
    snapshot_every: int = 0

    def __post_init__(self):
        if not self.dt > 0 or not self.T > 0:
            raise ValueError("dt and T must be positive")
        if self.kinetic is not None and abs(self.kinetic.L - self.L) > 1e-12:
            raise ValueError("kinetic data and grid use different box lengths")

    @property
    def grid(self):
        return TorusGrid(self.n, self.L, 3)

    @property
    def nsteps(self):
        return int(round(self.T / self.dt))


@dataclass(frozen=True, eq=False)
class State:
    time: float
    u: SpectralField
    ens: ParticleEnsemble


def empty_ensemble(L):
    z = np.zeros((0, 3))
    return ParticleEnsemble(z, z.copy(), np.zeros(0), np.zeros(0, dtype=np.int64), 0.0, L)


def initial_state(config, fluid_override=None, kinetic_override=None):
    grid = config.grid
    u = fluid_override if fluid_override is not None else initial_velocity(config.fluid, grid)
    data = kinetic_override if kinetic_override is not None else config.kinetic
    if data is None or config.n_particles == 0:
        ens = empty_ensemble(config.L)
    else:
        ens = sample_particles(data, config.n_particles, config.seed)
    return State(0.0, u, ens)


# -- fluid operators ----------------------------------------------------------------

def brinkman_force(m, u):
    """F = j - rho u, formed pointwise on the grid, dealiased and symmetrised."""
    if m.grid != u.grid:
        raise ValueError("grid mismatch")
    F = m.arrays["j"] - m.arrays["rho"] * u.values
    g = u.grid
    return SpectralField(g, _hermitian(_to_modes(F, g) * g.dealias_mask, g))


def _nonlinear(u):
    return -leray_project(advect(u, u)).modes


def _phi_functions(z):
    """phi1(z) = (e^z - 1)/z and phi2(z) = (e^z - 1 - z)/z^2, stable near 0."""
    small = np.abs(z) < 1e-3
    zs = np.where(small, 1.0, z)
    phi1 = np.where(small, 1 + z / 2 + z * z / 6, np.expm1(zs) / zs)
    phi2 = np.where(small, 0.5 + z / 6 + z * z / 24, (np.expm1(zs) - zs) / zs ** 2)
    return phi1, phi2


_etd_cache = {}


def _etd_coefficients(grid, dt):
    key = (grid, dt)
    if key not in _etd_cache:
        z = -grid.ksq * dt
        phi1, phi2 = _phi_functions(z)
        _etd_cache.clear()
        _etd_cache[key] = (np.exp(z), phi1 * dt, phi2 * dt)
    return _etd_cache[key]


def navier_stokes_step(u, dt):
    """Exponential RK2 (Cox-Matthews) for du/dt = Lap u - P[u . grad u]."""
    E, p1, p2 = _etd_coefficients(u.grid, dt)
    n0 = _nonlinear(u)
    a = E * u.modes + p1 * n0
    n1 = _nonlinear(u.with_modes(a))
    return u.with_modes(a + p2 * (n1 - n0), solenoidal=True)


def _project_physical(values, g):
    return leray_project(SpectralField(g, _hermitian(_to_modes(values, g) * g.dealias_mask, g)))


def drag_step(u, rho, j, tau):
    """Crank-Nicolson step of du/dt = P[j - rho u] with rho, j frozen."""
    g = u.grid
    if not np.any(rho) and not np.any(j):
        return u
    half = 0.5 * tau
    precond = 1.0 / (1.0 + half * rho)
    u0 = u.values
    base = tau * j - half * rho * u0  # explicit half of the CN system
    cur = u
    for _ in range(DRAG_MAX_ITER):
        cv = cur.values
        resid = _project_physical(u0 + base - half * rho * cv - cv, g)
        incr = _project_physical(precond * resid.values, g)
        cur = cur + incr
        if np.max(np.abs(incr.modes)) <= DRAG_TOL * max(np.max(np.abs(cur.modes)), 1e-300):
            break
    return cur.with_modes(cur.modes, solenoidal=True)


def step(state, dt):
    """Advance one Strang step; returns the new state."""
    u, ens = state.u, state.ens
    grid = u.grid
    umax = float(np.max(pointwise_magnitude(u.values)))
    if dt * umax / grid.spacing > CFL_LIMIT:
        raise CFLViolation(f"CFL number {dt * umax / grid.spacing:.3f} exceeds {CFL_LIMIT} at t={state.time:g}")
    has_particles = len(ens) > 0
    if has_particles:
        ens = push_particles(ens, u, dt / 2)
        mom = deposit_moments(ens, grid)
        rho, j = mom.arrays["rho"], mom.arrays["j"]
        u = drag_step(u, rho, j, dt / 2)
    u = navier_stokes_step(u, dt)
    if has_particles:
        u = drag_step(u, rho, j, dt / 2)
        ens = push_particles(ens, u, dt / 2)
    return State(state.time + dt, u, ens)


# -- ledger -------------------------------------------------------------------------

LEDGER_COLUMNS = ("t", "E", "cumD", "residual", "F_L1", "F_L2", "rho_inf", "u_inf",
                  "D", "brinkman_ratio", "div_rel")


@dataclass(frozen=True)
class StepRecord:
    t: float
    E: float
    D: float
    F_L1: float
    F_L2: float
    rho_inf: float
    u_inf: float
    brinkman_ratio: float
    div_rel: float
    momentum: tuple
    D_fluid: float
    D_particles: float


def gradient_energy(u):
    """||grad u||_2^2 from the modes."""
    return u.grid.volume * float(np.sum(u.grid.ksq * np.abs(u.modes) ** 2))


def divergence_ratio(u):
    k = u.grid.deriv_wavevectors
    kdot = np.abs(np.sum(k * u.modes, axis=0)).max()
    scale = (np.sqrt(np.sum(k ** 2, axis=0)) * np.sqrt(np.sum(np.abs(u.modes) ** 2, axis=0))).max()
    return float(kdot / scale) if scale > 0 else 0.0


def measure(state):
    """Energy, dissipation and force diagnostics at one time level."""
    u, ens = state.u, state.ens
    g = u.grid
    uval = u.values
    Df = gradient_energy(u)
    E = 0.5 * u.l2_norm() ** 2 + ens.kinetic_energy()
    if len(ens):
        m = deposit_moments(ens, g)
        rho, j, m2 = m.arrays["rho"], m.arrays["j"], m.arrays["m2"]
        # sum_i w_i sum_g S |v_i - u_g|^2 rewritten with the deposited moments
        Dp = float(np.sum(m2 - 2 * np.sum(j * uval, axis=0) + rho * np.sum(uval ** 2, axis=0)) * g.cell_volume)
        Dp = max(Dp, 0.0)
        F = brinkman_force(m, u)
        F_L1, F_L2 = lp_norm(F, 1), F.l2_norm()
        rho_inf = float(rho.max())
        ratio = F_L2 ** 2 / (rho_inf * Dp) if rho_inf * Dp > 0 else 0.0
        pmom = ens.momentum()
    else:
        Dp = F_L1 = F_L2 = rho_inf = ratio = 0.0
        pmom = np.zeros(3)
    fmom = u.mean() * g.volume
    return StepRecord(state.time, E, Df + Dp, F_L1, F_L2, rho_inf,
                      float(np.max(pointwise_magnitude(uval))), ratio, divergence_ratio(u),
                      tuple(fmom + pmom), Df, Dp)


class EnergyLedger:
    """Per-step energy E, cumulative dissipation (trapezoid) and the residual
    E(t) + int_0^t D - E(0)."""

    def __init__(self):
        self.records = []
        self.cumD = []

    def append(self, rec):
        if self.records:
            prev = self.records[-1]
            self.cumD.append(self.cumD[-1] + 0.5 * (rec.t - prev.t) * (rec.D + prev.D))
        else:
            self.cumD.append(0.0)
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    @property
    def E_in(self):
        return self.records[0].E

    def column(self, name):
        if name == "cumD":
            return np.array(self.cumD)
        if name == "residual":
            return self.residual()
        return np.array([getattr(r, name) for r in self.records])

    def residual(self):
        E = np.array([r.E for r in self.records])
        return E + np.array(self.cumD) - self.E_in

    def rows(self):
        res = self.residual()
        for i, r in enumerate(self.records):
            yield (r.t, r.E, self.cumD[i], res[i], r.F_L1, r.F_L2, r.rho_inf, r.u_inf,
                   r.D, r.brinkman_ratio, r.div_rel)

    def decay_diagnostics(self):
        """sup_t t^{5/4} ||F||_1 and int t^{9/4} ||F||_2^2 dt over the record."""
        t = self.column("t")
        return {"sup_t54_F_L1": float(np.max(t ** 1.25 * self.column("F_L1"))),
                "int_t94_F_L2sq": float(np.trapezoid(t ** 2.25 * self.column("F_L2") ** 2, t))}


@dataclass
class RunResult:
    config: SimConfig
    ledger: EnergyLedger
    snapshots: list
    final: State
    diagnostics: dict


def run(config, state=None, on_step=None):
    """Integrate to config.T, recording the ledger every step.

    Snapshots (time, u, ensemble) are kept every ``snapshot_every`` steps
    (0 keeps the first and last only).
    """
    state = state or initial_state(config)
    ledger = EnergyLedger()
    ledger.append(measure(state))
    snaps = [state]
    every = config.snapshot_every
    for k in range(1, config.nsteps + 1):
        try:
            new = step(state, config.dt)
            rec = measure(new)
        except FloatingPointError as exc:
            raise NumericalAbort(str(exc), state) from exc
        if not (math.isfinite(rec.E) and math.isfinite(rec.D)):
            raise NumericalAbort(f"non-finite energy at t={new.time:g}", state)
        state = new
        ledger.append(rec)
        if on_step is not None:
            on_step(state, rec)
        if (every and k % every == 0) or k == config.nsteps:
            if snaps[-1] is not state:
                snaps.append(state)
    diag = ledger.decay_diagnostics()
    diag["max_abs_residual"] = float(np.max(np.abs(ledger.residual())))
    diag["max_brinkman_ratio"] = float(np.max(ledger.column("brinkman_ratio")))
    diag["max_div_rel"] = float(np.max(ledger.column("div_rel")))
    return RunResult(config, ledger, snaps, state, diag)
