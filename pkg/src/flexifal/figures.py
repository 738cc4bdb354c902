"""PNG figures for CLI reports (matplotlib, non-interactive backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no timestamps, so reruns produce identical files
_META = {"Software": None}


def trajectories(outdir, trajs, stem: str) -> list[str]:
    """One panel per state variable, every trajectory overlaid."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    names = trajs[0].var_names
    fig, axes = plt.subplots(len(names), 1, figsize=(6, 1.8 * len(names) + 0.6), sharex=True, squeeze=False)
    for ax, j in zip(axes[:, 0], range(len(names))):
        for r, tr in enumerate(trajs):
            ax.plot(tr.times, tr.states[:, j], lw=1, label=f"run {r}" if j == 0 and len(trajs) > 1 else None)
        ax.set_ylabel(names[j])
        ax.grid(alpha=0.3)
    axes[-1, 0].set_xlabel("time")
    if len(trajs) > 1 and len(trajs) <= 10:
        axes[0, 0].legend(fontsize="small", loc="best")
    fig.tight_layout()
    path = out / f"{stem}.png"
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return [str(path)]


def robustness_histogram(outdir, rho, stem: str = "robustness") -> list[str]:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    rho = np.asarray(rho, dtype=float)
    rho = rho[np.isfinite(rho)]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.hist(rho, bins=40, color="0.6", edgecolor="0.3")
    ax.axvline(0.0, color="C3", lw=1.5)
    ax.set_xlabel("robustness")
    ax.set_ylabel("runs")
    fig.tight_layout()
    path = out / f"{stem}.png"
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return [str(path)]
