"""Render log-log convergence figures from converge CSV files.

Read-only post-processing: every number shown is taken from the CSV (the
slope line is fitted to those numbers, never to recomputed errors).  One panel
per input file; within a panel one series per p value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

REQUIRED_COLUMNS = ("n", "p", "error", "stderr")


class SchemaError(ValueError):
    """Input file does not match the documented converge CSV schema."""


@dataclass(frozen=True)
class LadderRow:
    n: int
    p: float
    error: float
    stderr: float
    raw: tuple[str, str, str, str]  # original text of (n, p, error, stderr)


@dataclass
class FigureSpec:
    csv_paths: list[str]
    out_path: str
    p_filter: float | None = None
    title: str | None = None
    dpi: int = 150


@dataclass
class PanelSummary:
    source: str
    p: float
    slope: float
    intercept: float
    rows: list[LadderRow] = field(default_factory=list)


def read_convergence_csv(path: str) -> list[LadderRow]:
    """Parse one converge CSV, validating the documented header."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise SchemaError(f"{path}: empty file")
    header = lines[0].split(",")
    index: dict[str, int] = {}
    for column in REQUIRED_COLUMNS:
        if column not in header:
            raise SchemaError(f"{path}: missing required column {column!r}")
        index[column] = header.index(column)
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != len(header):
            raise SchemaError(f"{path}:{lineno}: expected {len(header)} cells, got {len(cells)}")
        raw = tuple(cells[index[c]] for c in REQUIRED_COLUMNS)
        try:
            rows.append(
                LadderRow(
                    n=int(raw[0]),
                    p=float(raw[1]),
                    error=float(raw[2]),
                    stderr=float(raw[3]),
                    raw=raw,
                )
            )
        except ValueError as exc:
            raise SchemaError(f"{path}:{lineno}: {exc}") from exc
    if not rows:
        raise SchemaError(f"{path}: no data rows")
    return rows


def fit_loglog(points: list[tuple[int, float]]) -> tuple[float, float]:
    """Ordinary least squares of log(error) on log(n); returns (slope, intercept)."""
    if len(points) < 3:
        raise ValueError(f"need at least 3 ladder points, got {len(points)}")
    if any(err <= 0 for _, err in points):
        raise ValueError("errors must be strictly positive for a log-log fit")
    x = np.log([float(n) for n, _ in points])
    y = np.log([err for _, err in points])
    slope, intercept = np.polyfit(x, y, 1)
    return float(slope), float(intercept)


def render_convergence(spec: FigureSpec) -> list[PanelSummary]:
    """Write the figure and its sidecar summary; returns one entry per series."""
    per_file: list[tuple[str, dict[float, list[LadderRow]]]] = []
    for path in spec.csv_paths:
        rows = read_convergence_csv(path)
        by_p: dict[float, list[LadderRow]] = {}
        for row in rows:
            by_p.setdefault(row.p, []).append(row)
        if spec.p_filter is not None:
            by_p = {p: r for p, r in by_p.items() if p == spec.p_filter}
            if not by_p:
                raise SchemaError(f"{path}: no rows with p = {spec.p_filter:g}")
        per_file.append((path, by_p))

    summaries: list[PanelSummary] = []
    n_panels = len(per_file)
    fig, axes = plt.subplots(1, n_panels, figsize=(5.0 * n_panels, 4.0), squeeze=False)
    for ax, (path, by_p) in zip(axes[0], per_file):
        annotations = []
        for p_value in sorted(by_p):
            rows = sorted(by_p[p_value], key=lambda r: r.n)
            slope, intercept = fit_loglog([(r.n, r.error) for r in rows])
            ns = np.array([r.n for r in rows], dtype=float)
            errs = np.array([r.error for r in rows])
            ses = np.array([r.stderr for r in rows])
            ax.errorbar(ns, errs, yerr=ses, fmt="o", capsize=3, label=f"p={p_value:g}")
            grid = np.geomspace(ns[0], ns[-1], 50)
            ax.plot(grid, np.exp(intercept) * grid**slope, "-", linewidth=1.2)
            annotations.append(f"slope p={p_value:g}: {slope:.3f}")
            summaries.append(PanelSummary(path, p_value, slope, intercept, rows))
        # 1/n guide anchored at the first plotted point
        first = sorted(by_p[min(by_p)], key=lambda r: r.n)[0]
        guide_n = np.geomspace(first.n, max(r.n for rows in by_p.values() for r in rows), 50)
        ax.plot(guide_n, first.error * first.n / guide_n, "k--", linewidth=0.8, label="1/n guide")
        ax.set_xscale("log", base=2)
        ax.set_yscale("log")
        ax.set_xlabel("grid cells n")
        ax.set_ylabel("measured error")
        ax.set_title(Path(path).stem)
        ax.text(
            0.03, 0.05, "\n".join(annotations), transform=ax.transAxes,
            fontsize=9, verticalalignment="bottom",
            bbox={"boxstyle": "round", "facecolor": "white", "alpha": 0.7},
        )
        ax.grid(True, which="both", alpha=0.25)
        ax.legend(fontsize=8)
    if spec.title:
        fig.suptitle(spec.title)
    fig.tight_layout()
    out_path = Path(spec.out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=spec.dpi)
    plt.close(fig)

    sidecar = out_path.with_suffix(".txt")
    sidecar.write_text(render_summary(summaries), encoding="utf-8")
    return summaries


def render_summary(summaries: list[PanelSummary]) -> str:
    """Sidecar text: fitted slope per (file, p), then the rows exactly as read."""
    lines = []
    for s in summaries:
        lines.append(f"# {s.source}: p={s.p:g} slope={s.slope:.3f} intercept={s.intercept:.6f} points={len(s.rows)}")
    lines.append("n,p,error,stderr")
    for s in summaries:
        for row in s.rows:
            lines.append(",".join(row.raw))
    return "\n".join(lines) + "\n"
