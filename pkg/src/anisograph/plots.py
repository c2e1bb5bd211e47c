"""Static SVG figures; needs the optional matplotlib dependency."""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "anisograph"
    import matplotlib.pyplot as plt
    return plt


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})


def phase_plane(traj, path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(traj.W, traj.Z, lw=1.2)
    ax.plot([1], [1], "k+", ms=10)
    if traj.anisotropic:
        w = np.linspace(min(traj.W.min(), 0.9), max(traj.W.max(), 2.0), 50)
        ax.plot(w, 1.5 - 0.5 * w, "r--", lw=0.8, label="z = 3/2 - w/2")
        ax.legend()
    ax.set_xlabel("w = sigma / tau")
    ax.set_ylabel("z = sigma'")
    _save(fig, path)
    plt.close(fig)


def leaves(curve, pair, path):
    plt = _pyplot()
    t = np.geomspace(1e-2, curve.tau_max, 400)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.loglog(t, curve.evaluate(t)[4], label="sigma - tau")
    if pair is not None:
        for sign, name in ((1, "upper"), (-1, "lower")):
            ex = pair.side(sign, t)[3]
            ax.loglog(t[ex > 0], ex[ex > 0], lw=0.8, label=f"{name} leaf")
    ax.set_xlabel("tau")
    ax.legend()
    _save(fig, path)
    plt.close(fig)


def barrier_sections(bp, path, radii=(1.0, 10.0, 100.0)):
    plt = _pyplot()
    th = np.linspace(math.pi / 4, math.pi / 2, 200)[1:]
    fig, ax = plt.subplots(figsize=(5, 4))
    for r in radii:
        for b, style in ((bp.upper, "-"), (bp.lower, "--")):
            s, lv = b.log_eval_reduced(r * np.cos(th), r * np.sin(th))
            lv = np.where(s > 0, lv, np.nan)
            ax.plot(th, lv / math.log(10), style, lw=1, label=f"r={r:g}")
    ax.set_xlabel("theta")
    ax.set_ylabel("log10 u (solid upper, dashed lower)")
    _save(fig, path)
    plt.close(fig)


def contours(sol, path):
    plt = _pyplot()
    g = sol.grid
    fig, ax = plt.subplots(figsize=(5, 5))
    cs = ax.contour(g.XI, g.ZETA, sol.U, levels=15, linewidths=0.8)
    ax.clabel(cs, fontsize=6)
    ax.set_aspect("equal")
    ax.set_xlabel("xi")
    ax.set_ylabel("zeta")
    ax.set_title(f"R = {g.R_ball:g}, u / exp({sol.log_scale:.3g})")
    _save(fig, path)
    plt.close(fig)


def emit_stage(stage: str, art, out):
    """Figures for one stage artifact; returns the written paths."""
    out = Path(out)
    if art is None:
        return []
    paths = []
    if stage == "foliate":
        paths.append(out / "phase_plane.svg")
        phase_plane(art["trajectory"], paths[-1])
        paths.append(out / "leaves.svg")
        leaves(art["curve"], None, paths[-1])
    elif stage == "perturb":
        paths.append(out / "leaves.svg")
        leaves(art["curve"], art["pair"], paths[-1])
    elif stage == "barrier":
        paths.append(out / "barriers.svg")
        barrier_sections(art["barriers"], paths[-1])
    elif stage == "solve":
        for sol in art["solutions"]:
            paths.append(out / f"contours_R{sol.grid.R_ball:g}.svg")
            contours(sol, paths[-1])
    return paths


def emit_all(arts: dict, report, out):
    paths = []
    for stage, art in arts.items():
        paths += emit_stage(stage, art, out)
    return paths
