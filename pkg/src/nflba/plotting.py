"""Figures for the evaluation report (matplotlib, non-interactive backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evalkit import MetricsReport, align_rigid, centers  # noqa: E402

STYLE = {
    "figure.dpi": 120,
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}

TABLE_COLUMNS = ("ate_t_mm", "ate_r_deg", "chamfer_mm", "psnr_db_mean", "ssim_mean", "depth_rmse_mm")


def trajectories(path, gt, runs: Dict[str, Sequence]) -> Path:
    """Top view (x/z) and side view (y/z) of camera centers after rigid alignment."""
    G = centers(gt)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(7.5, 3.2))
        for ax, (a, b) in zip(axes, ((0, 2), (1, 2))):
            ax.plot(G[:, b], G[:, a], "k-", lw=1.5, label="ground truth")
            for name, est in runs.items():
                al = align_rigid(est, gt)
                E = al.apply(centers(est))
                ax.plot(E[:, b], E[:, a], "-", lw=1, marker=".", ms=3, label=name)
            ax.set_xlabel("z (mm)")
            ax.set_ylabel("xyz"[a] + " (mm)")
        axes[0].legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def per_frame_errors(path, reports: Dict[str, MetricsReport]) -> Path:
    with plt.rc_context(STYLE):
        fig, (ax_t, ax_r) = plt.subplots(1, 2, figsize=(7.5, 3.0))
        for name, rep in reports.items():
            idx = [f.frame_index for f in rep.per_frame]
            ax_t.plot(idx, [f.ate_t_mm for f in rep.per_frame], label=name)
            ax_r.plot(idx, [f.ate_r_deg for f in rep.per_frame], label=name)
        ax_t.set_xlabel("frame")
        ax_t.set_ylabel("translation error (mm)")
        ax_r.set_xlabel("frame")
        ax_r.set_ylabel("rotation error (deg)")
        ax_t.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def metric_bars(path, reports: Dict[str, MetricsReport],
                columns: Sequence[str] = ("ate_t_mm", "ate_r_deg", "chamfer_mm")) -> Path:
    names = list(reports)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(columns), figsize=(2.6 * len(columns), 2.8))
        for ax, col in zip(np.atleast_1d(axes), columns):
            vals = [getattr(reports[n], col) for n in names]
            ax.bar(range(len(names)), vals, color="0.45")
            ax.set_xticks(range(len(names)))
            ax.set_xticklabels(names, rotation=30, ha="right")
            ax.set_title(col)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def format_table(reports: Dict[str, MetricsReport], sep: str = "  ") -> str:
    """Side-by-side table, one row per run."""
    header = ["run"] + list(TABLE_COLUMNS)
    rows = [[name] + [f"{getattr(rep, c):.4g}" for c in TABLE_COLUMNS]
            for name, rep in reports.items()]
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    fmt = lambda r: sep.join(v.ljust(w) for v, w in zip(r, widths)).rstrip()  # noqa: E731
    return "\n".join([fmt(header)] + [fmt(r) for r in rows])


def write_table(path, reports: Dict[str, MetricsReport]) -> Path:
    """Tab-separated version of ``format_table``."""
    lines = ["\t".join(("run",) + TABLE_COLUMNS)]
    for name, rep in reports.items():
        lines.append("\t".join([name] + [repr(float(getattr(rep, c))) for c in TABLE_COLUMNS]))
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)
