from __future__ import annotations

import warnings
from pathlib import Path

import numpy as np


def error_curve_svg(result, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "rsucoop"

    fig, ax = plt.subplots(figsize=(9, 4))
    edges = result.trials[0].report.bin_edges
    mids = (edges[:-1] + edges[1:]) / 2
    for tr in result.trials:
        ax.plot(mids, tr.report.baseline_min, color="tab:blue", alpha=0.2, lw=0.8)
        ax.plot(mids, tr.report.fused_min, color="tab:orange", alpha=0.2, lw=0.8)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # bins never visited by any trial
        base = np.nanmean([t.report.baseline_min for t in result.trials], axis=0)
        fused = np.nanmean([t.report.fused_min for t in result.trials], axis=0)
    ax.plot(mids, base, color="tab:blue", lw=1.6, label="onboard only")
    ax.plot(mids, fused, color="tab:orange", lw=1.6, label="with roadside")
    for reg in result.trials[0].report.regions:
        if reg.name == "coverage":
            ax.axvspan(reg.start, reg.end, color="tab:green", alpha=0.08, label="roadside coverage")
    ax.set_xlabel("arc length (m)")
    ax.set_ylabel("min planar error per 2 m bin (m)")
    ax.legend(loc="upper left")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
