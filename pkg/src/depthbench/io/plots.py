"""Figure output: a deterministic SVG boxplot plus matplotlib renderings.

The SVG writer lays out horizontal boxes (median as a vertical stripe,
whiskers, outlier dots) on a linear axis whose mapping is declared in the root
element (``data-vmin``, ``data-vmax``, ``data-x0``, ``data-plot-width``), so
every coordinate can be recomputed from the payload itself.
"""

from __future__ import annotations

import os
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from ..errors import DataError

SVG_MARGIN_LEFT = 140.0
SVG_MARGIN_RIGHT = 30.0
SVG_ROW_HEIGHT = 46.0
SVG_BOX_HEIGHT = 22.0
SVG_TOP = 34.0
SVG_WIDTH = 640.0


def _axis_range(stats) -> tuple[float, float]:
    lo = min(min(s.whisker_lo, *(s.outlier_values or [s.whisker_lo])) for s in stats)
    hi = max(max(s.whisker_hi, *(s.outlier_values or [s.whisker_hi])) for s in stats)
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def render_boxplot_svg(stats: Sequence, path) -> None:
    """Write per-category box/median/whisker/outlier geometry as SVG."""
    if not stats:
        raise DataError("render_boxplot_svg: no category statistics")
    vmin, vmax = _axis_range(stats)
    plot_w = SVG_WIDTH - SVG_MARGIN_LEFT - SVG_MARGIN_RIGHT
    height = SVG_TOP + SVG_ROW_HEIGHT * len(stats) + 20.0

    def x(value: float) -> float:
        return SVG_MARGIN_LEFT + (value - vmin) / (vmax - vmin) * plot_w

    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_WIDTH:.1f}" '
        f'height="{height:.1f}" data-vmin="{vmin!r}" data-vmax="{vmax!r}" '
        f'data-x0="{SVG_MARGIN_LEFT!r}" data-plot-width="{plot_w!r}">',
        f'<line class="axis" x1="{SVG_MARGIN_LEFT:.2f}" y1="{SVG_TOP - 14:.2f}" '
        f'x2="{SVG_MARGIN_LEFT + plot_w:.2f}" y2="{SVG_TOP - 14:.2f}" '
        'stroke="#444" stroke-width="1"/>',
    ]
    for i, s in enumerate(stats):
        cy = SVG_TOP + SVG_ROW_HEIGHT * i + SVG_ROW_HEIGHT / 2.0
        top = cy - SVG_BOX_HEIGHT / 2.0
        parts.append(
            f'<text class="label" x="8" y="{cy + 4:.2f}" font-size="12" '
            f'font-family="sans-serif">{s.category}</text>')
        parts.append(
            f'<line class="whisker" data-category="{s.category}" '
            f'x1="{x(s.whisker_lo):.4f}" y1="{cy:.4f}" x2="{x(s.q1):.4f}" '
            f'y2="{cy:.4f}" stroke="#333" stroke-width="1"/>')
        parts.append(
            f'<line class="whisker" data-category="{s.category}" '
            f'x1="{x(s.q3):.4f}" y1="{cy:.4f}" x2="{x(s.whisker_hi):.4f}" '
            f'y2="{cy:.4f}" stroke="#333" stroke-width="1"/>')
        parts.append(
            f'<rect class="box" data-category="{s.category}" x="{x(s.q1):.4f}" '
            f'y="{top:.4f}" width="{x(s.q3) - x(s.q1):.4f}" '
            f'height="{SVG_BOX_HEIGHT:.2f}" fill="#9ecae1" stroke="#333"/>')
        parts.append(
            f'<line class="median" data-category="{s.category}" '
            f'x1="{x(s.median):.4f}" y1="{top:.4f}" x2="{x(s.median):.4f}" '
            f'y2="{top + SVG_BOX_HEIGHT:.4f}" stroke="#08306b" stroke-width="2"/>')
        for value in s.outlier_values:
            parts.append(
                f'<circle class="outlier" data-category="{s.category}" '
                f'cx="{x(value):.4f}" cy="{cy:.4f}" r="2.5" fill="#b30000"/>')
    parts.append("</svg>")
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write("\n".join(parts) + "\n")
    os.replace(tmp, path)


def render_boxplot_png(stats: Sequence, path, *, metric: str = "delta1") -> None:
    """Matplotlib rendering of the same statistics, for quick viewing."""
    if not stats:
        raise DataError("render_boxplot_png: no category statistics")
    fig, ax = plt.subplots(figsize=(7, 0.6 * len(stats) + 1.4))
    boxes = [
        {"label": s.category, "med": s.median, "q1": s.q1, "q3": s.q3,
         "whislo": s.whisker_lo, "whishi": s.whisker_hi, "fliers": s.outlier_values}
        for s in stats
    ]
    try:
        ax.bxp(boxes, orientation="horizontal", showfliers=True)
    except TypeError:  # matplotlib < 3.10
        ax.bxp(boxes, vert=False, showfliers=True)
    ax.set_xlabel(metric)
    ax.grid(axis="x", alpha=0.3)
    fig.tight_layout()
    fig.savefig(os.fspath(path), metadata={"Software": None})
    plt.close(fig)


def render_loss_curves(history, path) -> None:
    """Per-step loss components from a training run."""
    steps = range(len(history))
    fig, ax = plt.subplots(figsize=(7, 4))
    for name in ("total", "ssi", "dice", "focal"):
        ax.plot(steps, [getattr(h, name) for h in history], label=name)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(os.fspath(path), metadata={"Software": None})
    plt.close(fig)


def render_bench_plot(rows, path) -> None:
    """Median wall time with IQR bars per benchmarked resolution."""
    fig, ax = plt.subplots(figsize=(6, 4))
    labels = [str(r["latent"]) for r in rows]
    med = [r["median_s"] for r in rows]
    err = [r["iqr_s"] / 2.0 for r in rows]
    ax.errorbar(range(len(rows)), med, yerr=err, fmt="o-", capsize=4)
    ax.set_xticks(range(len(rows)), labels)
    ax.set_xlabel("latent resolution")
    ax.set_ylabel("seconds / forward")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(os.fspath(path), metadata={"Software": None})
    plt.close(fig)
