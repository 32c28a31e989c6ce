import math

import numpy as np
import pytest

from vnslab.kinetic import InitialKineticData, ParticleEnsemble
from vnslab.solver import FluidProfile, SimConfig, initial_state, random_solenoidal
from vnslab.spectral import SpectralField, TorusGrid, Trajectory, hminus1_norm, ladder_for
from vnslab.stability import (CouplingSnapshot, StabilityError, coupling_snapshot, gj_diagnostic,
                              gj_terms, gronwall_residual, hj_diagnostic, n_tr_estimate,
                              perturbed_kinetic, q_functional, random_band_limited,
                              stability_exponent_fit, twin_run, well_approx_report)

L = 2 * math.pi
G16 = TorusGrid(16)


def cloud(n, seed):
    rng = np.random.default_rng(seed)
    return ParticleEnsemble(rng.random((n, 3)) * L, rng.standard_normal((n, 3)), rng.random(n) + 0.1,
                            np.arange(n, dtype=np.int64), 0.0, L)


def q_oracle(a, b):
    """Plain loop over id-matched particles with the minimal-image rule."""
    pos = {int(i): k for k, i in enumerate(b.ids)}
    total = 0.0
    for k, i in enumerate(a.ids):
        m = pos[int(i)]
        d = 0.0
        for c in range(3):
            dx = (a.x[k, c] - b.x[m, c]) % L
            dx = min(dx, L - dx)
            d += dx * dx + (a.v[k, c] - b.v[m, c]) ** 2
        total += b.w[m] * d
    return total


# -- Q functional ----------------------------------------------------------------------

def test_q_identical_and_rigid_shift():
    a = cloud(300, 0)
    assert q_functional(a, a) == 0.0
    b = ParticleEnsemble((a.x + [0.2, 0, 0]) % L, a.v, a.w, a.ids, 0.0, L)
    assert abs(q_functional(a, b) - a.mass * 0.04) <= 1e-12 * a.mass


def test_q_matches_loop_oracle_and_is_symmetric():
    a, b = cloud(200, 1), cloud(200, 2)
    perm = np.random.default_rng(3).permutation(200)
    bp = ParticleEnsemble(b.x[perm], b.v[perm], a.w[perm], b.ids[perm], 0.0, L)
    assert abs(q_functional(a, bp) - q_oracle(a, bp)) <= 1e-10 * q_oracle(a, bp)
    ap = ParticleEnsemble(a.x, a.v, a.w, a.ids, 0.0, L)
    assert abs(q_functional(ap, bp) - q_functional(bp, ap, weights_from=1)) <= 1e-12 * q_functional(ap, bp)


def test_q_rejects_unpaired_ensembles():
    a, b = cloud(10, 0), cloud(10, 1)
    b2 = ParticleEnsemble(b.x, b.v, b.w, b.ids + 100, 0.0, L)
    with pytest.raises(StabilityError):
        q_functional(a, b2)
    with pytest.raises(StabilityError):
        q_functional(a, cloud(11, 1))


# -- well-approximation ------------------------------------------------------------------

def test_zero_field_has_no_commutator_exponent():
    g = TorusGrid(16)
    zero = SpectralField.zeros(g, 3)
    rep = well_approx_report(Trajectory([0.0, 0.1, 0.2], [zero] * 3))
    assert np.all(rep.a == 0.0)
    assert math.isnan(rep.alpha)
    assert rep.flags


def test_steady_lipschitz_field_has_vanishing_increments():
    g = TorusGrid(32)
    u = random_solenoidal(g, 1.0, 3.0, seed=2)
    rep = well_approx_report(Trajectory(np.linspace(0, 0.5, 6), [u] * 6))
    # S_j u = u once 2^j * 3/4 exceeds the top mode, so a_j is exactly zero from there on
    top = [j for j in rep.shells if 0.75 * 2.0 ** j > 3.0 * math.sqrt(3)]
    assert all(rep.a[rep.shells.index(j)] == 0.0 for j in top)
    assert rep.cumulative[-1] > 0
    assert rep.a[-1] == 0.0 and rep.tail_ratio == 0.0


def test_well_approx_rejects_nonuniform_sampling():
    u = SpectralField.zeros(G16, 3)
    with pytest.raises(ValueError):
        well_approx_report(Trajectory([0.0, 0.1, 0.3], [u] * 3))


# -- G_j and H_j -------------------------------------------------------------------------

def single_mode_snapshot(k, g=G16):
    xs = g.coordinates()
    vals = np.zeros((3,) + g.shape)
    vals[2] = np.cos(k * xs[0])
    F = SpectralField.from_values(g, vals)
    zero = SpectralField.zeros(g, 3)
    return CouplingSnapshot(0.0, zero, SpectralField.zeros(g, 1), zero, F)


def test_gj_force_part_for_single_mode():
    snap = single_mode_snapshot(4.0)
    F = snap.F
    # 4 <= 3/4 * 2^3, so S_3 F = F; 4 >= 4/3 * 2^1, so S_1 F = 0
    assert hminus1_norm(gj_terms(snap, 3)["force"]) <= 1e-14 * hminus1_norm(F)
    assert abs(hminus1_norm(gj_terms(snap, 1)["force"]) - hminus1_norm(F)) <= 1e-14 * hminus1_norm(F)


def small_snapshot(seed=0):
    cfg = SimConfig(n=16, n_particles=4096, dt=0.01, T=0.01, fluid=FluidProfile("random", 0.7, kmax=5.0, seed=seed),
                    kinetic=InitialKineticData(1.0, L, "cosine", 0.4, (1, 1, 0), drift=(0.3, 0, 0)), seed=seed)
    return coupling_snapshot(initial_state(cfg))


def test_gj_parts_sum_to_total_and_vanish_beyond_resolution():
    snap = small_snapshot()
    terms = gj_terms(snap, 2)
    total = terms["force"] + terms["drag"] + terms["transport"]
    series = gj_diagnostic([snap], 2)
    assert abs(series.total[0] - hminus1_norm(total)) <= 1e-14 * series.total[0]
    assert series.total[0] > 0
    top = ladder_for(G16).j_max + 2
    far = gj_diagnostic([snap], top)
    assert far.total[0] <= 1e-12 * series.total[0]


def kinetic_twin(delta, T=0.03):
    cfg = SimConfig(n=16, n_particles=4096, dt=0.01, T=T, fluid=FluidProfile("random", 0.5, kmax=3.0, seed=1),
                    kinetic=InitialKineticData(1.0, L, "cosine", 0.3, (1, 0, 0)), seed=0)
    return cfg, twin_run(cfg, kinetic2=perturbed_kinetic(cfg.kinetic, delta), snapshot_every=1)


def test_hj_zero_for_equal_data_and_linear_in_delta():
    _, r0 = kinetic_twin(0.0)
    h0 = hj_diagnostic(r0.snapshots, 2)
    assert np.all(h0.total == 0.0)
    _, r1 = kinetic_twin(0.01)
    _, r2 = kinetic_twin(0.02)
    h1, h2 = hj_diagnostic(r1.snapshots, 2), hj_diagnostic(r2.snapshots, 2)
    assert np.all(h1.total[1:] > 0)
    assert np.max(np.abs(h2.total[1:] / h1.total[1:] - 2.0)) < 1e-6
    snap = small_snapshot()
    with pytest.raises(StabilityError):
        hj_diagnostic([snap], 2)


# -- Gronwall residuals --------------------------------------------------------------------

def test_gronwall_zero_gap_twin_gives_zero_ratios():
    _, rep = kinetic_twin(0.0, T=0.02)
    res = gronwall_residual(rep)
    assert res["max_21"] == 0.0 and res["max_22"] == 0.0
    assert res["violations"] == 0


def test_gronwall_ratios_are_finite_for_a_fluid_twin():
    cfg = SimConfig(n=16, n_particles=4096, dt=0.01, T=0.05, fluid=FluidProfile("random", 0.5, kmax=3.0, seed=1),
                    kinetic=InitialKineticData(1.0, L, "cosine", 0.3, (1, 0, 0)), seed=0)
    u1 = initial_state(cfg).u
    rep = twin_run(cfg, u2_in=u1 + random_solenoidal(cfg.grid, 1e-3, 3.0, seed=9))
    res = gronwall_residual(rep)
    assert 0 < res["max_21"] < math.inf and 0 < res["max_22"] < math.inf
    assert res["violations"] == 0


# -- exponent fit ------------------------------------------------------------------------

def test_exponent_fit_recovers_synthetic_slope():
    rng = np.random.default_rng(0)
    gaps = np.logspace(-8, -2, 7)
    out = 3.0 * gaps ** 0.87 * np.exp(1e-3 * rng.standard_normal(7))
    fit = stability_exponent_fit(np.concatenate([[0.0], gaps]), np.concatenate([[0.0], out]))
    assert round(fit.slope, 2) == 0.87
    assert fit.band[0] < 0.87 < fit.band[1]
    assert fit.monotone and not fit.flags
    assert fit.zero_gap_outputs == [0.0]


def test_exponent_fit_input_checks():
    with pytest.raises(ValueError):
        stability_exponent_fit([1e-4, 1e-3, 1e-2], [1, 2, 3])
    with pytest.raises(ValueError):
        stability_exponent_fit([1e-3, 2e-3, 4e-3, 8e-3], [1, 2, 3, 4])
    fit = stability_exponent_fit([0, 1e-6, 1e-4, 1e-2, 1], [1e-9, 1e-6, 1e-3, 1e-4, 1])
    assert "non-monotone sweep" in fit.flags
    assert any("zero-gap" in f for f in fit.flags)


# -- N_{T,R} -----------------------------------------------------------------------------

def test_ntr_zero_for_equal_data():
    f = InitialKineticData(1.0, L, "cosine", 0.3)
    est = n_tr_estimate(f, f, 0.2, 1.0, n_nodes=4096, dt=0.05)
    assert est.value == 0.0


def test_ntr_drag_only_candidate_matches_closed_form_at_start():
    sigma, delta = 0.8, 0.1
    f1 = InitialKineticData(1.0, L, "cosine", 0.2, sigma=sigma)
    f2 = f1.with_(amplitude=0.3)
    est = n_tr_estimate(f1, f2, 0.2, 1.0, grid=TorusGrid(16), n_nodes=32768, dt=0.05)
    mean = f1.mean_density
    speed = sigma * 2 * math.sqrt(2 / math.pi)
    # |f1 - f2| = delta * mean * |cos x| * Maxwellian(v)
    l1 = delta * mean * L ** 3 * 2 / math.pi
    linf = delta * mean
    expected = l1 * (1 + speed) + linf * (1 + speed)
    assert abs(est.series[0][0] / expected - 1) < 0.05
    assert est.value >= est.series[0][0]


def test_ntr_candidate_outside_ball_raises():
    f1 = InitialKineticData(1.0, L, "cosine", 0.2)
    f2 = f1.with_(amplitude=0.3)
    u = random_band_limited(G16, 1.0, seed=0)
    with pytest.raises(StabilityError):
        n_tr_estimate(f1, f2, 1.0, 0.5, candidates=(u,), n_nodes=1024, dt=0.1)
    est = n_tr_estimate(f1, f2, 0.2, 0.5, candidates=(None, u), grid=G16, n_nodes=4096, dt=0.05)
    assert len(est.per_candidate) == 2 and est.value == max(est.per_candidate)
