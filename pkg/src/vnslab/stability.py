"""Comparison functionals for pairs of runs and the well-approximation
diagnostics of a velocity trajectory."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft
from scipy import stats

from .kinetic import (InitialKineticData, ParticleEnsemble, deposit_moments, push_particles,
                      sample_particles)
from .spectral import (SpectralField, TorusGrid, advect, chi_profile, grad,
                       hminus1_norm, ladder_for, low_pass, multiply, pointwise_magnitude)
from .solver import brinkman_force, step
from .transport import wasserstein1


class StabilityError(ValueError):
    pass


# -- Q functional ---------------------------------------------------------------------

def minimal_image(dx, L):
    return dx - L * np.round(dx / L)


def _pair_order(ens1, ens2):
    """Index arrays putting both ensembles in a common id order."""
    if len(ens1) != len(ens2):
        raise StabilityError("ensembles hold different numbers of particles")
    if np.array_equal(ens1.ids, ens2.ids):
        idx = np.arange(len(ens1))
        return idx, idx
    o1, o2 = np.argsort(ens1.ids, kind="stable"), np.argsort(ens2.ids, kind="stable")
    if not np.array_equal(ens1.ids[o1], ens2.ids[o2]):
        raise StabilityError("particle ids are not paired")
    return o1, o2


def _selected_weights(ens1, ens2, weights_from, o1, o2):
    if isinstance(weights_from, str):
        weights_from = {"ens1": 1, "ens2": 2, "f1": 1, "f2": 2}.get(weights_from, weights_from)
    if weights_from == 1:
        return ens1.w[o1]
    if weights_from == 2:
        return ens2.w[o2]
    w = np.asarray(weights_from, dtype=float)
    if w.shape != (len(ens1),):
        raise StabilityError("weight array does not match the ensembles")
    return w[o1]


def q_functional(ens1, ens2, weights_from=2):
    """sum_i w_i (|x1_i - x2_i|_torus^2 + |v1_i - v2_i|^2) over id-paired particles.

    ``weights_from`` is 1 or 2 (which ensemble's initial weights to use) or an
    explicit weight array in the id order of ``ens1``.
    """
    o1, o2 = _pair_order(ens1, ens2)
    w = _selected_weights(ens1, ens2, weights_from, o1, o2)
    dx = minimal_image(ens1.x[o1] - ens2.x[o2], ens1.L)
    dv = ens1.v[o1] - ens2.v[o2]
    return float(np.dot(w, np.sum(dx ** 2, axis=1) + np.sum(dv ** 2, axis=1)))


def phase_gap_sup(ens1, ens2):
    """max over paired particles of |Z1 - Z2| (positions by minimal image)."""
    o1, o2 = _pair_order(ens1, ens2)
    if len(o1) == 0:
        return 0.0
    dx = minimal_image(ens1.x[o1] - ens2.x[o2], ens1.L)
    dv = ens1.v[o1] - ens2.v[o2]
    return float(np.sqrt(np.max(np.sum(dx ** 2, axis=1) + np.sum(dv ** 2, axis=1))))


# -- well-approximation diagnostics --------------------------------------------------

_PAIRS = [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)]


class _RealLayout:
    """Real-FFT wavevectors on a grid of side n * pad."""

    def __init__(self, grid, pad):
        M = grid.n * pad
        self.M, self.pad, self.grid = M, pad, grid
        base = 2 * np.pi / grid.L
        kx = np.fft.fftfreq(M, 1.0 / M) * base
        kz = np.fft.rfftfreq(M, 1.0 / M) * base
        self.k = np.stack(np.meshgrid(kx, kx, kz, indexing="ij"))
        self.kmag = np.sqrt(np.sum(self.k ** 2, axis=0))
        w = np.full(kz.shape, 2.0)
        w[0] = 1.0
        if M % 2 == 0:
            w[-1] = 1.0
        self.parseval = w  # multiplicity of each rfft column in the full spectrum

    def coefficients(self, u):
        """Fourier coefficients of u in this layout (zero padded)."""
        g = self.grid
        if self.pad == 1:
            return u.modes[..., : g.n // 2 + 1]
        big = np.zeros((u.components,) + (self.M,) * 3, dtype=complex)
        idx = np.fft.fftfreq(g.n, d=1.0 / g.n).astype(int) % self.M
        big[(slice(None),) + np.ix_(idx, idx, idx)] = u.modes
        return big[..., : self.M // 2 + 1]

    def to_values(self, coef):
        return sfft.irfftn(coef, s=(self.M,) * 3, axes=(-3, -2, -1), norm="forward")

    def to_coef(self, values):
        return sfft.rfftn(values, axes=(-3, -2, -1), norm="forward")

    def energy(self, coef):
        return self.grid.volume * float(np.sum(self.parseval * np.abs(coef) ** 2))


def _band_limited(u, quarter):
    """True when all modes with |k_i| >= quarter vanish, so quadratic products
    are alias-free on the native grid."""
    n = u.grid.n
    k1 = np.abs(np.fft.fftfreq(n, 1.0 / n))
    outside = (k1[:, None, None] >= quarter) | (k1[None, :, None] >= quarter) | (k1[None, None, :] >= quarter)
    return not np.any(np.abs(u.modes[:, outside]) > 0)


def _shell_quantities(u, layout, chis):
    """Per shell j: ||S_j u||_inf^2, ||grad S_j u||_inf and ||[S_j, (x)] u||_2^2."""
    U = layout.coefficients(u)
    vals = layout.to_values(U)
    P = layout.to_coef(np.stack([vals[a] * vals[b] for a, b in _PAIRS]))
    out = np.empty((len(chis), 3))
    for b, chi in enumerate(chis):
        S = chi * U
        s = layout.to_values(S)
        out[b, 0] = float(np.max(np.sum(s ** 2, axis=0)))
        gsq = np.zeros(s.shape[1:])
        for i in range(3):
            d = layout.to_values(1j * layout.k[i] * S)
            gsq += np.sum(d ** 2, axis=0)
        out[b, 1] = math.sqrt(float(np.max(gsq)))
        C = layout.to_coef(np.stack([s[a] * s[c] for a, c in _PAIRS])) - chi * P
        # off-diagonal tensor entries appear twice in the Frobenius norm
        out[b, 2] = sum((1.0 if a == c else 2.0) * layout.energy(C[m]) for m, (a, c) in enumerate(_PAIRS))
    return out


@dataclass
class WellApproxReport:
    shells: list
    T: float
    sup_integral: np.ndarray
    grad_integral: np.ndarray
    cumulative: np.ndarray
    a: np.ndarray
    commutator: np.ndarray
    alpha: float
    alpha_stderr: float
    fit_shells: list
    B: np.ndarray
    flags: list = field(default_factory=list)

    @property
    def norm_exponent(self):
        """Decay exponent of the L^2_t L^2_x commutator norm (half of alpha)."""
        return self.alpha / 2

    @property
    def tail_ratio(self):
        return float(self.a[-1] / self.a[0]) if self.a[0] > 0 else 0.0

    @property
    def decreasing(self):
        return bool(np.all(np.diff(self.a) <= 0))

    @property
    def summable(self):
        """Verdict on a_j -> 0: decreasing and down to 1% of a_0 at the top shell."""
        return self.decreasing and self.tail_ratio <= 1e-2


def fit_log2_slope(js, values):
    """Least squares log2(values) = c - alpha j; returns (alpha, stderr)."""
    js = np.asarray(js, dtype=float)
    y = np.log2(np.asarray(values, dtype=float))
    if len(js) < 2:
        return math.nan, math.nan
    if len(js) == 2:
        return float(-(y[1] - y[0]) / (js[1] - js[0])), math.nan
    res = stats.linregress(js, y)
    return float(-res.slope), float(res.stderr)


def well_approx_report(traj, ladder=None, j_range=None, fit_range=None, pad=None):
    """Increments a_j of the cumulative integrals
    I_j = int ||S_j u||_inf^2 + int ||grad S_j u||_inf, commutator energies
    int ||S_j u (x) S_j u - S_j(u (x) u)||_2^2, and their log2 decay rate.

    a_j are increments of the running maximum of I_j, the smallest
    nonnegative sequence whose partial sums dominate I_j.  Quadratic products
    are formed on a 2x padded grid unless the field is band-limited to
    |k_i| < n/4 (``pad`` forces either choice).
    """
    times = np.asarray(traj.times, dtype=float)
    if len(times) < 2:
        raise ValueError("need at least two snapshots")
    dt = np.diff(times)
    if not np.allclose(dt, dt[0], rtol=1e-9, atol=0):
        raise ValueError("trajectory must be uniformly sampled")
    grid = traj.grid
    if grid.dim != 3:
        raise ValueError("well-approximation diagnostics are 3D")
    ladder = ladder or ladder_for(grid)
    shells = list(j_range) if j_range is not None else list(ladder.shells)
    if pad is None:
        pad = 1 if all(_band_limited(u, grid.n // 4) for u in traj) else 2
    layout = _RealLayout(grid, pad)
    chis = [chi_profile(layout.kmag / 2.0 ** j) for j in shells]
    per_t = np.stack([_shell_quantities(u, layout, chis) for u in traj])
    sup_int = np.trapezoid(per_t[:, :, 0], times, axis=0)
    grad_int = np.trapezoid(per_t[:, :, 1], times, axis=0)
    comm = np.trapezoid(per_t[:, :, 2], times, axis=0)
    I = sup_int + grad_int
    cumulative = np.maximum.accumulate(I)
    a = np.diff(cumulative, prepend=0.0)
    if np.any(np.diff(cumulative) < 0) or np.any(a < 0):
        raise RuntimeError("cumulative sums are not monotone: quadrature bug")
    flags = []
    fit_js = [j for j in (fit_range if fit_range is not None else shells) if j in shells]
    fit_js = [j for j in fit_js if comm[shells.index(j)] > 0]
    if len(fit_js) < 2:
        alpha, err = math.nan, math.nan
        flags.append("alpha undefined: fewer than two nonzero commutator energies")
    else:
        alpha, err = fit_log2_slope(fit_js, [comm[shells.index(j)] for j in fit_js])
    T = float(times[-1] - times[0])
    return WellApproxReport(shells, T, sup_int, grad_int, cumulative, a, comm, alpha, err,
                            fit_js, 1.0 + T + cumulative, flags)


# -- synthetic critical trajectory -------------------------------------------------

def critical_wavelets(grid, p=6.0, shells=None, amplitude=1.0, mean_flow=(0.0, 0.0, 0.0), seed=0,
                      carrier=1.5, width=1.0, packets=1.0, focus=True):
    """Divergence-free field built from self-similar wave packets.

    Shell j holds round(packets 2^{j p/(p-2)}) packets of width ``width`` 2^-j and
    carrier frequency ``carrier`` 2^j at random places, scaled so that
    2^{j(-1+3/p)} ||Delta_j u||_p equals ``amplitude``.  That packet count
    also keeps ||Delta_j u||_2 independent of j, so the field sits on the
    borderline of both L^2 and the critical Besov space.  The field is
    band-limited to |k_i| < n/4, so quadratic products are alias free.  A
    constant ``mean_flow`` is invisible to the homogeneous Besov seminorm
    and to the commutator.

    With ``focus`` the first packet of every shell sits at the box centre
    with a shared orientation and a sine phase, so the velocity gradients of
    all shells add up at one point.  The sup norms of the low-pass
    approximations are then attained there, which keeps the increments of
    their time integrals from being dominated by where random packets
    happen to overlap.
    """
    from .spectral import leray_project, lp_norm
    rng = np.random.default_rng(seed)
    ladder = ladder_for(grid)
    n = grid.n
    base = 2 * np.pi / grid.L
    k1 = np.abs(np.fft.fftfreq(n, 1.0 / n))
    band = (k1[:, None, None] < n // 4) & (k1[None, :, None] < n // 4) & (k1[None, None, :] < n // 4)
    if shells is None:
        shells = [j for j in ladder.shells if j >= 0 and carrier * 2.0 ** j < (n // 4) * base]
    xs = grid.coordinates()
    focal_dir = rng.standard_normal(3)
    focal_dir /= np.linalg.norm(focal_dir)
    focal_pol = np.cross(focal_dir, rng.standard_normal(3))
    total = np.zeros((3,) + grid.shape, dtype=complex)
    for j in shells:
        count = max(1, int(round(packets * 2.0 ** (j * p / (p - 2)))))
        vals = np.zeros((3,) + grid.shape)
        for i in range(count):
            if focus and i == 0:
                centre, direction, pol, phase = np.full(3, grid.L / 2), focal_dir, focal_pol, -np.pi / 2
            else:
                centre = rng.random(3) * grid.L
                direction = rng.standard_normal(3)
                direction /= np.linalg.norm(direction)
                pol = np.cross(direction, rng.standard_normal(3))
                phase = 2 * np.pi * rng.random()
            d = minimal_image(xs - centre[:, None, None, None], grid.L)
            env = np.exp(-np.sum(d ** 2, axis=0) * (4.0 ** j / (2 * width ** 2)))
            wave = np.cos(np.tensordot(carrier * 2.0 ** j * direction, d, axes=1) + phase)
            vals += pol[:, None, None, None] * (env * wave)
        f = SpectralField.from_values(grid, vals)
        f = leray_project(f.with_modes(f.modes * ladder.phi(j) * band))
        norm = lp_norm(f, p)
        if norm > 0:
            total += f.modes * (amplitude * 2.0 ** (j * (1 - 3 / p)) / norm)
    total[:, 0, 0, 0] = np.asarray(mean_flow, dtype=float)
    return SpectralField(grid, total, solenoidal=True)


# -- twin runs ------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CouplingSnapshot:
    """Fields of run 1 needed by the G_j and H_j diagnostics at one time.

    ``aux_rho``/``aux_j`` are the moments of the auxiliary ensemble (f2^in
    pushed by run 1's fluid), or None.
    """

    time: float
    u: SpectralField
    rho: SpectralField
    current: SpectralField
    F: SpectralField
    aux_rho: SpectralField | None = None
    aux_current: SpectralField | None = None


def coupling_snapshot(state, aux=None):
    grid = state.u.grid
    m = deposit_moments(state.ens, grid)
    extra = {}
    if aux is not None:
        ma = deposit_moments(aux, grid)
        extra = {"aux_rho": ma.rho, "aux_current": ma.current}
    return CouplingSnapshot(state.time, state.u, m.rho, m.current, brinkman_force(m, state.u), **extra)


def gradient_sup(u):
    """Grid maximum of the Frobenius norm of grad u."""
    acc = np.zeros(u.grid.shape)
    for d in grad(u):
        acc += np.sum(d.values ** 2, axis=0)
    return math.sqrt(float(acc.max()))


def _sup_norm(u):
    return float(np.max(pointwise_magnitude(u.values)))


def _cumtrapz(y, t):
    y, t = np.asarray(y, dtype=float), np.asarray(t, dtype=float)
    out = np.zeros_like(y)
    if len(y) > 1:
        out[1:] = np.cumsum(0.5 * np.diff(t) * (y[1:] + y[:-1]))
    return out


@dataclass
class TwinRunReport:
    times: np.ndarray
    w_sq: np.ndarray
    grad_w_sq: np.ndarray
    cum_grad_w: np.ndarray
    Q: np.ndarray
    Z_sup: np.ndarray
    m0_1: np.ndarray
    m0_2: np.ndarray
    m2_1: np.ndarray
    m2_2: np.ndarray
    u1_sup: np.ndarray
    grad_u1_sup: np.ndarray
    w1_times: np.ndarray
    w1: np.ndarray
    w1_exact_check: list
    fluid_gap: float
    kinetic_gaps: dict
    snapshots: list = field(default_factory=list, repr=False)
    exponent: float | None = None

    @property
    def output_gap(self):
        """sup_t (||w||_2^2 + int_0^t ||grad w||_2^2)."""
        return float(np.max(self.w_sq + self.cum_grad_w))

    @property
    def A_T(self):
        """1 + sup_t (|Z1 - Z2|_inf^2 + sup m2 + sup m0 of both runs), sampled."""
        return 1.0 + float(np.max(self.Z_sup ** 2 + self.m2_1 + self.m2_2 + self.m0_1 + self.m0_2))

    def series(self):
        """Column name -> array for CSV output."""
        return {"t": self.times, "w_sq": self.w_sq, "grad_w_sq": self.grad_w_sq,
                "cum_grad_w": self.cum_grad_w, "Q": self.Q, "Z_sup": self.Z_sup,
                "m0_1": self.m0_1, "m0_2": self.m0_2, "m2_1": self.m2_1, "m2_2": self.m2_2,
                "u1_sup": self.u1_sup, "grad_u1_sup": self.grad_u1_sup}


def _subsample_w1(e1, e2, idx, weights, method, seed):
    """W1 between the particles ``idx`` of both ensembles, each rescaled to
    the total mass of run 1 so that the masses agree exactly."""
    w1, w2 = weights
    a, b = w1[idx], w2[idx]
    total = float(np.sum(w1))
    a = a * (total / a.sum())
    b = b * (total / b.sum())
    s1 = ParticleEnsemble(e1.x[idx], e1.v[idx], a, e1.ids[idx], e1.time, e1.L)
    s2 = ParticleEnsemble(e2.x[idx], e2.v[idx], b, e2.ids[idx], e2.time, e2.L)
    return wasserstein1(s1, s2, method=method, seed=seed)


def twin_run(config, u2_in=None, kinetic2=None, snapshot_every=0, w1_every=0,
             w1_particles=4096, w1_exact_particles=0, track_aux=None, q_weights=2, seed=0):
    """Run two copies of the coupled system in lockstep.

    Run 1 starts from ``config``; run 2 replaces the fluid data by ``u2_in``
    and/or the kinetic data by ``kinetic2``.  Both ensembles use the same
    sampling seed, so particles are paired by id.  When the kinetic data
    differ an auxiliary ensemble (f2^in pushed by run 1's fluid) is carried
    along for the H_j diagnostic.  W1 is sampled every ``w1_every`` steps on
    ``w1_particles`` paired particles (sliced), and optionally also compared
    with the exact solver on ``w1_exact_particles`` of them.
    """
    from .solver import initial_state
    s1 = initial_state(config)
    s2 = initial_state(config, fluid_override=u2_in, kinetic_override=kinetic2)
    if track_aux is None:
        track_aux = kinetic2 is not None
    aux = s2.ens if track_aux else None
    grid = config.grid
    dt = config.dt
    rng = np.random.default_rng(seed)
    npart = len(s1.ens)
    sub = np.sort(rng.choice(npart, size=min(w1_particles, npart), replace=False)) if npart else None
    exact_sub = (np.sort(rng.choice(npart, size=min(w1_exact_particles, npart), replace=False))
                 if npart and w1_exact_particles else None)
    w_in = (s1.ens.w, s2.ens.w)

    rows = []
    w1_t, w1_v, exact_checks, snaps = [], [], [], []

    def record(k, a, b, x):
        w = a.u - b.u
        if len(a.ens):
            ma, mb = deposit_moments(a.ens, grid), deposit_moments(b.ens, grid)
            m0a, m2a = float(ma.arrays["rho"].max()), float(ma.arrays["m2"].max())
            m0b, m2b = float(mb.arrays["rho"].max()), float(mb.arrays["m2"].max())
            q = q_functional(a.ens, b.ens, q_weights)
            zs = phase_gap_sup(a.ens, b.ens)
        else:
            m0a = m2a = m0b = m2b = q = zs = 0.0
        from .solver import gradient_energy
        rows.append((a.time, w.l2_norm() ** 2, gradient_energy(w), q, zs, m0a, m0b, m2a, m2b,
                     _sup_norm(a.u), gradient_sup(a.u)))
        if w1_every and npart and k % w1_every == 0:
            w1_t.append(a.time)
            w1_v.append(_subsample_w1(a.ens, b.ens, sub, w_in, "sliced", seed))
            if exact_sub is not None:
                ex = _subsample_w1(a.ens, b.ens, exact_sub, w_in, "exact", seed)
                sl = _subsample_w1(a.ens, b.ens, exact_sub, w_in, "sliced", seed)
                exact_checks.append((a.time, ex, sl))
        if snapshot_every and k % snapshot_every == 0:
            snaps.append(coupling_snapshot(a, x))

    record(0, s1, s2, aux)
    for k in range(1, config.nsteps + 1):
        if aux is not None:
            aux = push_particles(aux, s1.u, dt / 2)
        n1 = step(s1, dt)
        n2 = step(s2, dt)
        if aux is not None:
            aux = push_particles(aux, n1.u, dt / 2)
        s1, s2 = n1, n2
        record(k, s1, s2, aux)

    cols = np.array(rows).T
    t, wsq, gw = cols[0], cols[1], cols[2]
    kin_gaps = kinetic_gap_norms(config.kinetic, kinetic2) if kinetic2 is not None and config.kinetic else {}
    return TwinRunReport(t, wsq, gw, _cumtrapz(gw, t), cols[3], cols[4], cols[5], cols[6], cols[7],
                         cols[8], cols[9], cols[10], np.array(w1_t), np.array(w1_v), exact_checks,
                         float(math.sqrt(wsq[0])), kin_gaps, snaps)


def kinetic_gap_norms(f1, f2, q=None, n_nodes=32768, seed=0):
    """Quadrature estimates of ||f1 - f2||_{L^1}, M_1(|f1 - f2|) and
    N_q(|f1 - f2|) on a reference node set."""
    nodes, s = _signed_nodes(f1, f2, n_nodes, seed)
    q = f1.q_decay if q is None else q
    absf = np.abs(f1.density(nodes.x, nodes.v) - f2.density(nodes.x, nodes.v))
    speed = np.linalg.norm(nodes.v, axis=1)
    return {"L1": float(np.sum(np.abs(s))), "M1": float(np.sum(np.abs(s) * speed)),
            "Nq": float(np.max((1 + speed ** q) * absf)) if len(absf) else 0.0}


# -- error terms G_j and H_j ------------------------------------------------------------

@dataclass
class ErrorTermSeries:
    times: np.ndarray
    parts: dict
    total: np.ndarray
    mean_violation: np.ndarray
    extra: dict = field(default_factory=dict)

    def time_integral_sq(self, key=None):
        """int ||term||_{H^-1}^2 dt for the total or one part."""
        vals = self.total if key is None else self.parts[key]
        return float(np.trapezoid(vals ** 2, self.times)) if len(self.times) > 1 else 0.0


def _mean_violation(f):
    """|mean| relative to the L^2 norm (0 for a vanishing field)."""
    nrm = f.l2_norm()
    mean = float(np.linalg.norm(f.mean())) * math.sqrt(f.grid.volume)
    return mean / nrm if nrm > 0 else 0.0


def gj_terms(snap, j, ladder=None):
    """The three parts of G_j at one snapshot, as spectral fields."""
    u, F, rho = snap.u, snap.F, snap.rho
    Su = low_pass(u, j, ladder)
    part1 = low_pass(F, j, ladder) - F
    part2 = -multiply(rho, u - Su)
    part3 = advect(Su, Su) - low_pass(advect(u, u), j, ladder)
    return {"force": part1, "drag": part2, "transport": part3}


def gj_diagnostic(snapshots, j, ladder=None):
    """H^-1 norms of G_j = (S_j F - F) - rho (u - S_j u) + S_j u . grad S_j u - S_j(u . grad u)
    along run 1's snapshots, per part and in total."""
    times, parts, total, viol = [], {"force": [], "drag": [], "transport": []}, [], []
    for snap in snapshots:
        terms = gj_terms(snap, j, ladder)
        G = terms["force"] + terms["drag"] + terms["transport"]
        times.append(snap.time)
        for key, f in terms.items():
            parts[key].append(hminus1_norm(f))
        total.append(hminus1_norm(G))
        viol.append(_mean_violation(G))
    return ErrorTermSeries(np.array(times), {k: np.array(v) for k, v in parts.items()},
                           np.array(total), np.array(viol))


def hj_term(snap, j, ladder=None):
    if snap.aux_rho is None or snap.aux_current is None:
        raise StabilityError("H_j needs the auxiliary ensemble moments")
    Su = low_pass(snap.u, j, ladder)
    return (snap.current - snap.aux_current) - multiply(snap.rho - snap.aux_rho, Su)


def hj_diagnostic(snapshots, j, ladder=None):
    """H^-1 (and L^{6/5}) norms of H_j = j1 - j_{1#2} - (rho1 - rho_{1#2}) S_j u1."""
    from .spectral import lp_norm
    times, total, viol, l65 = [], [], [], []
    for snap in snapshots:
        H = hj_term(snap, j, ladder)
        times.append(snap.time)
        total.append(hminus1_norm(H))
        l65.append(lp_norm(H, 1.2))
        viol.append(_mean_violation(H))
    return ErrorTermSeries(np.array(times), {}, np.array(total), np.array(viol),
                           {"L6_5": np.array(l65)})


# -- Gronwall residuals ----------------------------------------------------------------

def _ratio(lhs, rhs, tol):
    out = np.zeros_like(lhs)
    violations = 0
    for i, (a, b) in enumerate(zip(lhs, rhs)):
        if b > 0:
            out[i] = a / b
        elif a > tol:
            out[i] = math.inf
            violations += 1
    return out, violations


def gronwall_residual(rep, tol=1e-14):
    """LHS/RHS of the two energy-type estimates for a twin pair, with u1 as
    the smooth field and constant 1 in front of every term.

    estimate_21: ||w||^2 + int ||grad w||^2 against
        ||w(0)||^2 + A int (1 + ||grad u1||_inf) ||w||^2
        + A^2 int (1 + ||u1||_inf^2 + ||grad u1||_inf) Q
    estimate_22: Q against int (1 + ||grad u1||_inf) Q + int ||m0 f2||_inf ||w||^2

    0/0 counts as 0; a zero RHS under a nonzero LHS is a violation.
    """
    t, A = rep.times, rep.A_T
    lhs1 = rep.w_sq + rep.cum_grad_w
    rhs1 = (rep.w_sq[0] + A * _cumtrapz((1 + rep.grad_u1_sup) * rep.w_sq, t)
            + A ** 2 * _cumtrapz((1 + rep.u1_sup ** 2 + rep.grad_u1_sup) * rep.Q, t))
    lhs2 = rep.Q
    rhs2 = _cumtrapz((1 + rep.grad_u1_sup) * rep.Q, t) + _cumtrapz(rep.m0_2 * rep.w_sq, t)
    r1, v1 = _ratio(lhs1, rhs1, tol)
    r2, v2 = _ratio(lhs2, rhs2, tol)
    return {"ratio_21": r1, "ratio_22": r2, "max_21": float(np.max(r1)), "max_22": float(np.max(r2)),
            "violations": v1 + v2, "A_T": A}


# -- exponent fit ---------------------------------------------------------------------

@dataclass
class ExponentFit:
    slope: float
    intercept: float
    stderr: float
    band: tuple
    residuals: np.ndarray
    gaps: np.ndarray
    outputs: np.ndarray
    monotone: bool
    zero_gap_outputs: list
    flags: list = field(default_factory=list)


def stability_exponent_fit(gaps_sq, outputs, level=0.95):
    """Least squares of log(output) against log(squared initial gap).

    Zero gaps are excluded from the fit (their outputs are reported for the
    consistency check).  Needs at least four nonzero gaps whose square roots
    span two decades.
    """
    g = np.asarray(gaps_sq, dtype=float)
    y = np.asarray(outputs, dtype=float)
    zero = [float(v) for v in y[g == 0]]
    keep = g > 0
    g, y = g[keep], y[keep]
    if len(g) < 4:
        raise ValueError("need at least four nonzero gaps")
    if math.sqrt(g.max() / g.min()) < 100 * (1 - 1e-9):
        raise ValueError("gaps must span at least two decades")
    if np.any(y <= 0):
        raise ValueError("outputs must be positive for nonzero gaps")
    order = np.argsort(g)
    g, y = g[order], y[order]
    monotone = bool(np.all(np.diff(y) > 0))
    flags = [] if monotone else ["non-monotone sweep"]
    if any(v != 0 for v in zero):
        flags.append("zero-gap twin has a nonzero output")
    lx, ly = np.log(g), np.log(y)
    res = stats.linregress(lx, ly)
    tq = stats.t.ppf(0.5 + level / 2, len(g) - 2)
    resid = ly - (res.intercept + res.slope * lx)
    return ExponentFit(float(res.slope), float(res.intercept), float(res.stderr),
                       (float(res.slope - tq * res.stderr), float(res.slope + tq * res.stderr)),
                       resid, g, y, monotone, zero, flags)


def fit_twin_sweep(reports):
    """Exponent fit over a sweep of twin reports (input gap: fluid gap squared
    plus the squared kinetic L^1 + M_1 gap when present)."""
    gaps = []
    for r in reports:
        kin = r.kinetic_gaps.get("L1", 0.0) + r.kinetic_gaps.get("M1", 0.0) if r.kinetic_gaps else 0.0
        gaps.append(r.fluid_gap ** 2 + kin ** 2)
    fit = stability_exponent_fit(gaps, [r.output_gap for r in reports])
    for r in reports:
        r.exponent = fit.slope
    return fit


# -- N_{T,R} lower bound -------------------------------------------------------------

def _reference_data(f1, f2):
    sigma = 1.25 * max(f1.sigma, f2.sigma)
    if "kappa" in (f1.velocity, f2.velocity):
        sigma *= 2.0
    drift = tuple(0.5 * (np.asarray(f1.drift, dtype=float) + np.asarray(f2.drift, dtype=float)))
    return InitialKineticData(mass=f1.L ** 3, L=f1.L, velocity="maxwellian", sigma=sigma, drift=drift)


def _signed_nodes(f1, f2, n_nodes, seed):
    """Reference nodes and signed weights (f1 - f2)(z_i) * (node volume)."""
    ref = _reference_data(f1, f2)
    nodes = sample_particles(ref, n_nodes, seed)
    s = nodes.w * (f1.density(nodes.x, nodes.v) - f2.density(nodes.x, nodes.v)) / ref.density(nodes.x, nodes.v)
    return nodes, s


def _candidate_field(cand, t):
    if cand is None:
        return None
    if isinstance(cand, SpectralField):
        return cand
    times = cand.times
    if t <= times[0]:
        return cand[0]
    if t >= times[-1]:
        return cand[len(times) - 1]
    i = int(np.searchsorted(times, t) - 1)
    lam = (t - times[i]) / (times[i + 1] - times[i])
    a, b = cand[i], cand[i + 1]
    return a.with_modes((1 - lam) * a.modes + lam * b.modes)


def _candidate_linf_integral(cand, T, nsteps):
    if cand is None:
        return 0.0
    ts = np.linspace(0.0, T, nsteps + 1)
    return float(np.trapezoid([_sup_norm(_candidate_field(cand, t)) for t in ts], ts))


@dataclass
class NtrEstimate:
    value: float
    per_candidate: list
    best: int
    series: list


def n_tr_estimate(f1, f2, T, R, candidates=(None,), grid=None, n_nodes=32768, dt=0.01, seed=0):
    """Candidate lower bound for sup_{u in B_R} sup_t (||m0|f_u|||_{L1 cap Linf} + ||m1|f_u|||_{L1 cap Linf}).

    |f1 - f2| is represented by reference nodes with signed weights; each
    candidate field (None for u = 0, a steady SpectralField or a Trajectory)
    pushes the nodes and the moments of the absolute weights are deposited
    on ``grid`` at every step.
    """
    grid = grid or TorusGrid(32, f1.L)
    nsteps = max(1, int(math.ceil(T / dt - 1e-12)))
    h = T / nsteps
    nodes, s = _signed_nodes(f1, f2, n_nodes, seed)
    absw = np.abs(s)
    if not np.any(absw > 0):
        return NtrEstimate(0.0, [0.0 for _ in candidates], 0, [np.zeros(nsteps + 1) for _ in candidates])
    base = ParticleEnsemble(nodes.x, nodes.v, absw, nodes.ids, 0.0, nodes.L)
    values, series = [], []
    from .kinetic import sup_moment_norms
    for cand in candidates:
        if _candidate_linf_integral(cand, T, nsteps) > R * (1 + 1e-12):
            raise StabilityError("candidate field lies outside the ball B_R")
        ens, vals = base, []
        for k in range(nsteps + 1):
            m = sup_moment_norms(deposit_moments(ens, grid))
            vals.append(m["rho_L1_Linf"] + m["m1_L1_Linf"])
            if k < nsteps:
                t0 = k * h
                ens = push_particles(ens, _candidate_field(cand, t0), h, _candidate_field(cand, t0 + h))
        values.append(max(vals))
        series.append(np.array(vals))
    best = int(np.argmax(values))
    return NtrEstimate(values[best], values, best, series)


def random_band_limited(grid, sup, kmax=3, seed=0):
    """Random divergence-free field with modes |k| <= kmax scaled to sup norm ``sup``."""
    from .solver import random_solenoidal
    u = random_solenoidal(grid, 1.0, kmax, 0.0, seed)
    return u * (sup / _sup_norm(u))


# -- perturbations and sweeps -------------------------------------------------------------

def perturbed_fluid(u, delta, seed=1, kmax=4.0):
    """u + delta * psi with psi a fixed random divergence-free field of unit
    L^2 norm, so that the initial gap is exactly delta."""
    from .solver import random_solenoidal
    psi = random_solenoidal(u.grid, 1.0, kmax, 2.0, seed)
    psi = psi * (1.0 / psi.l2_norm())
    return u + psi * delta


def perturbed_kinetic(f, delta):
    """Same-mass kinetic data whose cosine amplitude is shifted by delta."""
    return f.with_(spatial="cosine", amplitude=(f.amplitude if f.spatial == "cosine" else 0.0) + delta)


def twin_sweep(config, deltas, perturbation="fluid", **kw):
    """Twin runs for each delta; returns (reports, exponent fit or None)."""
    from .solver import initial_velocity
    reports = []
    for d in deltas:
        if perturbation == "fluid":
            u1 = initial_velocity(config.fluid, config.grid)
            rep = twin_run(config, u2_in=perturbed_fluid(u1, d), **kw)
        elif perturbation == "kinetic":
            if config.kinetic is None:
                raise ValueError("kinetic perturbation needs kinetic data")
            rep = twin_run(config, kinetic2=perturbed_kinetic(config.kinetic, d), **kw)
        else:
            raise ValueError(f"unknown perturbation {perturbation!r}")
        reports.append(rep)
    fit = None
    if sum(1 for d in deltas if d > 0) >= 4:
        fit = fit_twin_sweep(reports)
    return reports, fit
