"""Vector-graphic figures of velocity deviations and inter-vehicle gaps."""
from __future__ import annotations

import os
import tempfile
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLES = {"cacc": "-", "acc": "--"}


def _style(name: str) -> str:
    return STYLES.get(name, ":")


def velocity_figure(trajectories: dict):
    fig, ax = plt.subplots(figsize=(9, 4))
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for name, traj in trajectories.items():
        for i in range(traj.errors.shape[1]):
            ax.plot(traj.t, traj.errors[:, i, 1], _style(name), color=colors[i % len(colors)], lw=0.8,
                    label=f"{name.upper()} vehicle {i + 1}")
    ax.axhline(0.0, color="k", lw=0.6)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("velocity deviation (m/s)")
    ax.legend(ncol=2, fontsize=7)
    fig.tight_layout()
    return fig


def gap_figure(trajectories: dict, h_star: float):
    fig, ax = plt.subplots(figsize=(9, 4))
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for name, traj in trajectories.items():
        for i in range(1, traj.errors.shape[1]):
            ax.plot(traj.t, traj.errors[:, i, 0] + h_star, _style(name), color=colors[i % len(colors)], lw=0.8,
                    label=f"{name.upper()} gap {i}-{i + 1}")
    ax.axhline(h_star, color="k", lw=0.8, label=f"desired gap {h_star:g} m")
    ax.set_xlabel("time (s)")
    ax.set_ylabel("inter-vehicle distance (m)")
    ax.legend(ncol=2, fontsize=7)
    fig.tight_layout()
    return fig


def emit_plots(trajectories: dict, h_star: float, outdir, fmt: str = "svg") -> list[Path]:
    """Writes ``velocity_deviation.<fmt>`` and ``gaps.<fmt>``.

    Figures are rendered to temporary files first, so a failure leaves no
    partial output behind.
    """
    if not trajectories or any(len(t) == 0 for t in trajectories.values()):
        raise ValueError("nothing to plot: empty trajectory")
    if fmt not in ("svg", "pdf"):
        raise ValueError("fmt must be 'svg' or 'pdf'")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    targets = {"velocity_deviation": velocity_figure(trajectories), "gaps": gap_figure(trajectories, h_star)}
    written, temps = [], []
    try:
        for stem, fig in targets.items():
            fd, tmp = tempfile.mkstemp(suffix=f".{fmt}", dir=outdir)
            os.close(fd)
            temps.append(tmp)
            fig.savefig(tmp, format=fmt)
        for (stem, _), tmp in zip(targets.items(), temps):
            final = outdir / f"{stem}.{fmt}"
            os.replace(tmp, final)
            written.append(final)
    finally:
        for fig in targets.values():
            plt.close(fig)
        for tmp in temps:
            if os.path.exists(tmp):
                os.remove(tmp)
    return written
