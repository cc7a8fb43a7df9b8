"""Delimited output and figure rendering.

CSV files carry one header row and RFC-4180 quoting; floats are written in
shortest round-trip form so parsing them back reproduces the values
exactly. Figures are rendered with matplotlib to SVG files with stable
element ids and no embedded timestamps, keeping artifacts byte-stable
across reruns.
"""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "samlab"

import matplotlib.pyplot as plt  # noqa: E402


def _cell(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def export_csv(rows, path: str | Path, header: list[str]) -> Path:
    """Write one header row plus one row per entry; floats round-trip."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
    return path


def read_csv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, [row for row in reader]


def export_svg_plot(
    series,
    path: str | Path,
    xlabel: str = "x",
    ylabel: str = "y",
    title: str = "",
    logx: bool = False,
    logy: bool = False,
) -> Path:
    """Line plot of [{label, x, y}, ...] series with labeled axes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    for s in series:
        ax.plot(s["x"], s["y"], marker=s.get("marker", ""), label=s.get("label"))
    if logx:
        ax.set_xscale("log")
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if any(s.get("label") for s in series):
        ax.legend(fontsize=8)
    save_figure(fig, path)
    return path


def save_figure(fig, path: str | Path) -> Path:
    """Write a figure to SVG (or PNG by extension) without timestamps."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    metadata = {"Date": None} if path.suffix == ".svg" else None
    fig.savefig(path, metadata=metadata)
    plt.close(fig)
    return path
