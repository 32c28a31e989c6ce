"""Report figures, written as PNG files next to the CSV tables."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 4.0),
    "figure.dpi": 110,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.5,
    "font.size": 10,
}


def _save(fig, path):
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_ledger(cols, path):
    """Energy, cumulative dissipation and residual against time."""
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(2, 1, sharex=True, figsize=(6.4, 5.6))
        t = cols["t"]
        ax1.plot(t, cols["E"], label="E(t)")
        ax1.plot(t, cols["cumD"], label="cumulative dissipation")
        ax1.plot(t, cols["E"] + cols["cumD"], "k--", lw=1, label="sum")
        ax1.set_ylabel("energy")
        ax1.legend(frameon=False)
        e_in = cols["E"][0] if cols["E"][0] != 0 else 1.0
        ax2.plot(t, np.abs(cols["residual"]) / abs(e_in))
        ax2.set_yscale("symlog", linthresh=1e-12)
        ax2.set_xlabel("t")
        ax2.set_ylabel("|residual| / E(0)")
        return _save(fig, path)


def plot_brinkman(cols, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(cols["t"], cols["brinkman_ratio"])
        ax.axhline(1.0, color="k", ls="--", lw=1)
        ax.set_xlabel("t")
        ax.set_ylabel(r"$\|F\|_2^2 / (\|\rho\|_\infty D_p)$")
        return _save(fig, path)


def plot_twin_sweep(gaps_sq, outputs, fit, path):
    """Output gap against squared input gap on log axes, with the fitted line."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        g, y = np.asarray(gaps_sq), np.asarray(outputs)
        keep = g > 0
        ax.loglog(g[keep], y[keep], "o", label="twins")
        if fit is not None:
            xs = np.geomspace(g[keep].min(), g[keep].max(), 50)
            ax.loglog(xs, np.exp(fit.intercept) * xs ** fit.slope, "k--", lw=1,
                      label=f"slope {fit.slope:.3f}")
        ax.set_xlabel("squared initial gap")
        ax.set_ylabel(r"$\sup_t\, \|w\|_2^2 + \int \|\nabla w\|_2^2$")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_twin_series(series, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        t = series["t"]
        for key, label in (("w_sq", r"$\|w\|_2^2$"), ("cum_grad_w", r"$\int\|\nabla w\|_2^2$"), ("Q", "Q")):
            vals = np.asarray(series[key])
            if np.any(vals > 0):
                ax.semilogy(t[vals > 0], vals[vals > 0], label=label)
        ax.set_xlabel("t")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_wellapprox(report, path):
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.8, 3.6))
        js = np.asarray(report.shells)
        a = np.asarray(report.a)
        ax1.semilogy(js[a > 0], a[a > 0], "o-")
        ax1.set_xlabel("j")
        ax1.set_ylabel(r"$a_j$")
        c = np.asarray(report.commutator)
        ax2.semilogy(js[c > 0], c[c > 0], "o-", label="commutator energy")
        if np.isfinite(report.alpha) and report.fit_shells:
            fj = np.asarray(report.fit_shells, dtype=float)
            ref = c[list(js).index(report.fit_shells[0])]
            ax2.semilogy(fj, ref * 2.0 ** (-report.alpha * (fj - fj[0])), "k--", lw=1,
                         label=f"alpha = {report.alpha:.3f}")
        ax2.set_xlabel("j")
        ax2.legend(frameon=False)
        return _save(fig, path)


def plot_picard(report, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        inc = np.asarray(report.increments)
        ax.semilogy(np.arange(1, len(inc) + 1), inc, "o-", label="increment")
        ax.set_xlabel("iteration")
        ax.set_ylabel("K-norm of the increment")
        ax.legend(frameon=False)
        return _save(fig, path)
