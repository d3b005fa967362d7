"""Plot emission: log-log runtime curves (SVG) and density-map renderings."""

from __future__ import annotations

import csv
import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .bench import BenchRecord, slopes_by_mechanism
from .errors import DataError
from .scenes import write_pgm

__all__ = ["bench_plot_svg", "density_csv_to_pgm", "density_to_csv"]


def bench_plot_svg(records: list[BenchRecord], out_path) -> None:
    """One SVG, one line per mechanism, fitted slope in the legend."""
    slopes = slopes_by_mechanism(records)
    fig, ax = plt.subplots(figsize=(6, 4))
    for mech in sorted({r.mechanism for r in records}):
        rs = sorted((r for r in records if r.mechanism == mech),
                    key=lambda r: r.n_tokens)
        ns = [r.n_tokens for r in rs]
        med = [r.median_ns / 1e6 for r in rs]
        lo = [r.p10_ns / 1e6 for r in rs]
        hi = [r.p90_ns / 1e6 for r in rs]
        ax.plot(ns, med, marker="o", label=f"{mech} (slope {slopes[mech]:.2f})")
        ax.fill_between(ns, lo, hi, alpha=0.2)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("tokens N")
    ax.set_ylabel("median runtime (ms)")
    ax.set_title("attention mechanism scaling")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)


def density_to_csv(grid: np.ndarray) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    for row in np.asarray(grid):
        writer.writerow([f"{v:g}" for v in row])
    return buf.getvalue()


def density_csv_to_pgm(csv_path, out_path) -> None:
    """Grayscale PGM of a density grid: linear map, max cell -> 255."""
    rows = []
    with open(csv_path) as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise DataError(f"{csv_path}: line {lineno}: {exc}") from exc
    if not rows:
        raise DataError(f"{csv_path}: empty density grid")
    grid = np.array(rows)
    peak = grid.max()
    img = np.zeros_like(grid, dtype=np.uint8) if peak <= 0 else \
        np.round(grid / peak * 255.0).astype(np.uint8)
    write_pgm(Path(out_path), img)
