"""Report rendering: aligned text tables, structured CSV, and figures.

The structured CSV is the machine-readable artifact (one row per method,
expression and rotation columns for every metric); figures are rendered to
PNG files alongside it. Formatting is fixed-width so byte-identical inputs
produce byte-identical reports.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import IoError
from .metrics import MetricsReport

_METRIC_COLS = ("l2", "fd", "variation", "si", "p_fd", "pcc", "tlcc_peak_lag")
_HEADERS = ("L2", "FD", "var", "SI", "P-FD", "PCC", "TLCC")


def _fmt(value, width: int = 9) -> str:
    if value is None:
        return "-".rjust(width)
    return f"{value:.4f}".rjust(width)


def render_text_table(reports: list[MetricsReport]) -> str:
    """Human-readable table, expression block then rotation block."""
    name_w = max(14, max((len(r.method) for r in reports), default=0) + 2)
    header = "method".ljust(name_w)
    for side in ("expr", "rot"):
        for h in _HEADERS:
            header += f"{side}-{h}".rjust(10)
    lines = [header, "-" * len(header)]
    for r in reports:
        row = r.method.ljust(name_w)
        for side in (r.expression, r.rotation):
            for col in _METRIC_COLS:
                row += _fmt(getattr(side, col), 10)
        lines.append(row)
    notes = sorted({n for r in reports for n in r.notes})
    for n in notes:
        lines.append(f"note: {n}")
    return "\n".join(lines) + "\n"


def write_report_csv(reports: list[MetricsReport], path):
    """Structured key-value table: one row per method."""
    try:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            cols = (["method", "samples"]
                    + [f"expr_{c}" for c in _METRIC_COLS]
                    + [f"rot_{c}" for c in _METRIC_COLS]
                    + ["notes"])
            writer.writerow(cols)
            for r in reports:
                row = [r.method, r.sample_count]
                for side in (r.expression, r.rotation):
                    for col in _METRIC_COLS:
                        v = getattr(side, col)
                        row.append("-" if v is None else f"{v:.10g}")
                row.append("; ".join(r.notes))
                writer.writerow(row)
    except OSError as e:
        raise IoError(f"cannot write report {path}: {e}") from e


def write_series_csv(columns: dict[str, list], path):
    """Generic per-step series (loss curves, accuracy, multi-sample curves)."""
    keys = list(columns)
    length = max(len(v) for v in columns.values())
    try:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["step"] + keys)
            for i in range(length):
                row = [i + 1]
                for k in keys:
                    v = columns[k][i] if i < len(columns[k]) else ""
                    row.append(f"{v:.10g}" if isinstance(v, float) else v)
                writer.writerow(row)
    except OSError as e:
        raise IoError(f"cannot write series {path}: {e}") from e


def plot_curves(curves: dict[str, list], path, title: str, xlabel: str, ylabel: str,
                logy: bool = False):
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, values in curves.items():
        ax.plot(np.arange(1, len(values) + 1), values, label=name)
    if logy:
        ax.set_yscale("log")
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if len(curves) > 1:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_histogram(counts: np.ndarray, path, title: str, xlabel: str):
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.bar(np.arange(len(counts)), counts, width=1.0)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("count")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_tlcc_curves(reports: list[MetricsReport], path, channel: str):
    fig, ax = plt.subplots(figsize=(6, 4))
    plotted = False
    for r in reports:
        side = r.expression if channel == "expression" else r.rotation
        if side.tlcc_curve is not None:
            ax.plot(np.arange(len(side.tlcc_curve)), side.tlcc_curve, label=r.method)
            plotted = True
    if not plotted:
        plt.close(fig)
        return False
    ax.set_title(f"time-lagged cross correlation ({channel})")
    ax.set_xlabel("speaker shift (frames)")
    ax.set_ylabel("r")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return True
