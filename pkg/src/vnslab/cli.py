"""Command-line entry point ``vns``.

Exit codes: 0 success, 2 invalid configuration or input, 3 numerical abort
(CFL violation or non-finite values).
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import io, plotting
from .solver import CFLViolation, NumericalAbort, initial_velocity, run

log = logging.getLogger("vnslab")

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL = 0, 2, 3


def _set_threads(n):
    if n:
        import numba
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    return n or 1


def _load(args):
    overrides = {"run": {"seed": args.seed}} if getattr(args, "seed", None) is not None else None
    return io.parse_config(Path(args.config).read_text(), overrides)


def _prepare_out(out, spec, command, threads):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(spec.canonical)
    return out, io.new_manifest(spec, command, threads)


def _finish(manifest, out, outputs):
    manifest.outputs = sorted(str(Path(p).relative_to(out)) for p in outputs)
    manifest.finished = time.time()
    manifest.save(out / "manifest.json")


def _write_summary(path, diag):
    path = Path(path)
    path.write_text(json.dumps(diag, indent=2, sort_keys=True))
    return path


def cmd_run(args):
    spec = _load(args)
    threads = _set_threads(args.threads)
    out, manifest = _prepare_out(args.out, spec, " ".join(sys.argv), threads)
    log.info("run: %d^3 grid, %d particles, dt=%g, %d steps", spec.sim.n, spec.sim.n_particles,
             spec.sim.dt, spec.sim.nsteps)
    res = run(spec.sim)
    outputs = [io.write_ledger(out / "ledger.csv", res.ledger)]
    snapdir = out / "snapshots"
    snapdir.mkdir(exist_ok=True)
    steps, times = [], []
    for s in res.snapshots:
        k = int(round(s.time / spec.sim.dt))
        f = io.write_field(snapdir / f"u_{k:06d}.vnsf", s.u)
        p = io.write_particles(snapdir / f"p_{k:06d}.vnsp", s.ens)
        steps.append(k)
        times.append(s.time)
        outputs += [f, p]
    outputs.append(io.write_table(out / "snapshots.csv",
                                  {"step": np.array(steps, dtype=float), "t": np.array(times)}, "snapshots"))
    outputs.append(_write_summary(out / "summary.json", res.diagnostics))
    outputs += _ledger_figures(out, io.read_ledger(out / "ledger.csv"))
    _finish(manifest, out, outputs)
    log.info("max |residual| = %.3e", res.diagnostics["max_abs_residual"])
    return EXIT_OK


def _ledger_figures(out, cols):
    return [plotting.plot_ledger(cols, out / "energy.png"),
            plotting.plot_brinkman(cols, out / "brinkman.png")]


def cmd_twin(args):
    from .stability import twin_sweep
    spec = _load(args)
    threads = _set_threads(args.threads)
    tw = spec.twin or io.DEFAULTS_DOC["twin"]
    deltas = tuple(args.delta) if args.delta else tuple(tw["deltas"])
    if any(d < 0 for d in deltas):
        raise ValueError("deltas must be nonnegative")
    out, manifest = _prepare_out(args.out, spec, " ".join(sys.argv), threads)
    reports, fit = twin_sweep(spec.sim, deltas, tw["perturbation"], w1_every=tw["w1_every"],
                              w1_particles=tw["w1_particles"],
                              w1_exact_particles=tw["w1_exact_particles"],
                              snapshot_every=tw["snapshot_every"], seed=spec.sim.seed)
    outputs = []
    gaps_sq, outs = [], []
    for i, (d, rep) in enumerate(zip(deltas, reports)):
        outputs.append(io.write_table(out / f"twin_{i:02d}.csv", rep.series(), "twin"))
        if len(rep.w1):
            outputs.append(io.write_table(out / f"twin_{i:02d}_w1.csv", {"t": rep.w1_times, "w1": rep.w1}, "w1"))
        gap = rep.fluid_gap ** 2 if tw["perturbation"] == "fluid" else (
            rep.kinetic_gaps["L1"] + rep.kinetic_gaps["M1"]) ** 2
        gaps_sq.append(gap)
        outs.append(rep.output_gap)
    from .stability import gronwall_residual
    gr = [gronwall_residual(r) for r in reports]
    outputs.append(io.write_table(out / "sweep.csv", {
        "delta": np.array(deltas), "gap_sq": np.array(gaps_sq), "output_gap": np.array(outs),
        "A_T": np.array([r.A_T for r in reports]),
        "max_ratio_21": np.array([g["max_21"] for g in gr]),
        "max_ratio_22": np.array([g["max_22"] for g in gr])}, "sweep"))
    if fit is not None:
        outputs.append(io.write_table(out / "fit.csv", {
            "slope": np.array([fit.slope]), "intercept": np.array([fit.intercept]),
            "stderr": np.array([fit.stderr]), "band_lo": np.array([fit.band[0]]),
            "band_hi": np.array([fit.band[1]])}, "fit"))
        for flag in fit.flags:
            log.warning("fit: %s", flag)
        log.info("fitted exponent %.4f +- %.4f", fit.slope, fit.stderr)
    outputs.append(plotting.plot_twin_sweep(gaps_sq, outs, fit, out / "sweep.png"))
    if reports:
        outputs.append(plotting.plot_twin_series(reports[-1].series(), out / "twin_last.png"))
    _finish(manifest, out, outputs)
    return EXIT_OK


def cmd_mild(args):
    from .mild import MildProblem, calibrate_alpha, picard_solve
    spec = _load(args)
    threads = _set_threads(args.threads)
    md = spec.mild or io.DEFAULTS_DOC["mild"]
    sim = spec.sim
    shape = initial_velocity(sim.fluid, sim.grid)
    if shape.l2_norm() == 0:
        raise ValueError("mild solve needs a nonzero fluid profile")
    out, manifest = _prepare_out(args.out, spec, " ".join(sys.argv), threads)
    alpha, threshold = calibrate_alpha(shape, sim.T, md["time_steps"], md["p"])
    u_in = shape * (md["amplitude_fraction"] * threshold)
    prob = MildProblem(u_in, sim.T, md["time_steps"], md["p"])
    rep, _ = picard_solve(prob, alpha, md["max_iter"], md["tol"])
    k = len(rep.increments)
    outputs = [io.write_table(out / "picard.csv", {
        "iteration": np.arange(1, k + 1, dtype=float), "norm": np.array(rep.norms[:k]),
        "increment": np.array(rep.increments),
        "ratio": np.array([math.nan] + rep.ratios[:k - 1])}, "picard")]  # no ratio at the first iteration
    outputs.append(_write_summary(out / "summary.json", {
        "alpha_p": alpha, "threshold_amplitude": threshold, "source_norm": rep.source_norm,
        "converged": rep.converged, "iterations": rep.iterations, "residual": rep.residual,
        "flags": rep.flags}))
    outputs.append(plotting.plot_picard(rep, out / "picard.png"))
    _finish(manifest, out, outputs)
    for flag in rep.flags:
        log.warning("picard: %s", flag)
    return EXIT_OK


def _snapshot_trajectory(rundir):
    from .spectral import Trajectory
    rundir = Path(rundir)
    _, idx = io.read_table(rundir / "snapshots.csv", "snapshots")
    frames = [io.read_field(rundir / "snapshots" / f"u_{int(k):06d}.vnsf") for k in idx["step"]]
    return Trajectory(np.asarray(idx["t"]), frames)


def cmd_wellapprox(args):
    from .stability import well_approx_report
    rundir = Path(args.run)
    traj = _snapshot_trajectory(rundir)
    jr = range(args.jmin, args.jmax + 1) if args.jmax is not None else None
    rep = well_approx_report(traj, j_range=jr)
    outputs = [io.write_table(rundir / "wellapprox.csv", {
        "j": np.array(rep.shells, dtype=float), "sup_integral": np.asarray(rep.sup_integral),
        "grad_integral": np.asarray(rep.grad_integral), "a": np.asarray(rep.a),
        "commutator": np.asarray(rep.commutator)}, "wellapprox")]
    outputs.append(_write_summary(rundir / "wellapprox.json", {
        "alpha": rep.alpha, "alpha_stderr": rep.alpha_stderr, "norm_exponent": rep.norm_exponent,
        "B": float(rep.B[-1]), "decreasing": bool(rep.decreasing), "flags": rep.flags}))
    outputs.append(plotting.plot_wellapprox(rep, rundir / "wellapprox.png"))
    for flag in rep.flags:
        log.warning("well-approximation: %s", flag)
    return EXIT_OK


def cmd_analyze(args):
    rundir = Path(args.run)
    cols = io.read_ledger(rundir / "ledger.csv")
    e_in = float(cols["E"][0])
    t = np.asarray(cols["t"])
    diag = {"E_in": e_in,
            "max_rel_residual": float(np.max(np.abs(cols["residual"])) / e_in) if e_in else 0.0,
            "max_brinkman_ratio": float(np.max(cols["brinkman_ratio"])),
            "max_div_rel": float(np.max(cols["div_rel"])),
            "sup_t54_F_L1": float(np.max(t ** 1.25 * cols["F_L1"])),
            "int_t94_F_L2sq": float(np.trapezoid(t ** 2.25 * np.asarray(cols["F_L2"]) ** 2, t))}
    _write_summary(rundir / "analysis.json", diag)
    _ledger_figures(rundir, cols)
    if (rundir / "sweep.csv").exists():
        _, sw = io.read_table(rundir / "sweep.csv", "sweep")
        plotting.plot_twin_sweep(sw["gap_sq"], sw["output_gap"], None, rundir / "sweep.png")
    for k in sorted(diag):
        print(f"{k} = {diag[k]:.6g}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="vns", description="Vlasov-Navier-Stokes numerical laboratory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def runner(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int, default=0)
        sp.set_defaults(func=func)
        return sp

    runner("run", cmd_run, "integrate the coupled system and write the ledger")
    tw = runner("twin", cmd_twin, "twin-run stability sweep")
    tw.add_argument("--delta", type=float, nargs="+")
    runner("mild", cmd_mild, "Picard iteration for the mild formulation")
    wa = sub.add_parser("wellapprox", help="well-approximation diagnostics of a run")
    wa.add_argument("--run", required=True)
    wa.add_argument("--jmin", type=int, default=-1)
    wa.add_argument("--jmax", type=int)
    wa.set_defaults(func=cmd_wellapprox)
    an = sub.add_parser("analyze", help="summaries and figures from a run directory")
    an.add_argument("--run", required=True)
    an.set_defaults(func=cmd_analyze)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (NumericalAbort, CFLViolation, FloatingPointError) as exc:
        log.error("numerical abort: %s", exc)
        return EXIT_NUMERICAL
    except (io.ConfigError, io.FormatError, ValueError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
