"""Vector-graphic plots for the CSV artifacts (SVG, no display server).

Input type is sniffed from the CSV header: pair trajectories, kinetic
series, or histograms. Malformed or empty files raise SchemaError.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from opinionctrl import kinetic, sdre  # noqa: E402
from opinionctrl.errors import SchemaError  # noqa: E402

plt.rcParams["svg.hashsalt"] = "opinionctrl"

__all__ = [
    "read_csv_columns",
    "plot_trajectory_gap",
    "plot_kinetic_series",
    "plot_histogram",
    "plot_histogram_overlay",
    "plot_density_surface",
    "render",
]


def read_csv_columns(path) -> dict[str, np.ndarray]:
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if len(lines) < 2:
        raise SchemaError(f"{path}: empty or header-only CSV")
    header = lines[0].split(",")
    try:
        data = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    except ValueError as exc:
        raise SchemaError(f"{path}: non-numeric data: {exc}") from exc
    if data.shape[1] != len(header):
        raise SchemaError(f"{path}: ragged rows")
    return {name: data[:, k] for k, name in enumerate(header)}


def _require(cols: dict, names, path) -> None:
    missing = [n for n in names if n not in cols]
    if missing:
        raise SchemaError(f"{path}: missing columns {missing}")


def plot_trajectory_gap(paths, out_path) -> Path:
    """Consensus gap versus time, one curve per trajectory CSV."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for path in paths:
        cols = read_csv_columns(path)
        _require(cols, sdre.TRAJECTORY_HEADER, path)
        ax.plot(cols["t"], cols["gap"], label=Path(path).stem)
    ax.set_xlabel("time (s)")
    ax.set_ylabel("|x_i - x_j|")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return Path(out_path)


def plot_kinetic_series(path, out_path) -> Path:
    cols = read_csv_columns(path)
    _require(cols, kinetic.SERIES_HEADER, path)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(cols["step"], cols["variance"], marker="o", label="variance")
    ax.plot(cols["step"], cols["mean"], marker="s", label="mean")
    ax.set_xlabel("step")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return Path(out_path)


def plot_histogram(path, out_path) -> Path:
    cols = read_csv_columns(path)
    _require(cols, kinetic.HIST_HEADER, path)
    fig, ax = plt.subplots(figsize=(6, 4))
    width = cols["bin_center"][1] - cols["bin_center"][0] if len(cols["bin_center"]) > 1 else 0.02
    ax.bar(cols["bin_center"], cols["density"], width=width)
    ax.set_xlabel("opinion")
    ax.set_ylabel("density")
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return Path(out_path)


def plot_histogram_overlay(paths, out_path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for path in paths:
        cols = read_csv_columns(path)
        _require(cols, kinetic.HIST_HEADER, path)
        ax.plot(cols["bin_center"], cols["density"], label=Path(path).stem)
    ax.set_xlabel("opinion")
    ax.set_ylabel("density")
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return Path(out_path)


def plot_density_surface(paths, out_path) -> Path:
    """Density over (opinion, step) from a sequence of histogram CSVs."""
    rows = []
    centers = None
    for path in paths:
        cols = read_csv_columns(path)
        _require(cols, kinetic.HIST_HEADER, path)
        rows.append(cols["density"])
        centers = cols["bin_center"]
    grid = np.vstack(rows)
    fig, ax = plt.subplots(figsize=(6, 4))
    mesh = ax.pcolormesh(centers, np.arange(len(rows)), grid, shading="nearest")
    fig.colorbar(mesh, ax=ax, label="density")
    ax.set_xlabel("opinion")
    ax.set_ylabel("step")
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return Path(out_path)


def render(paths, out_dir) -> list[Path]:
    """Route each CSV to its plot by header; histogram groups also get a
    combined overlay."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    produced = []
    hist_paths = []
    for path in paths:
        path = Path(path)
        cols = read_csv_columns(path)
        if set(sdre.TRAJECTORY_HEADER) <= set(cols):
            produced.append(
                plot_trajectory_gap([path], out_dir / f"{path.stem}_gap.svg")
            )
        elif set(kinetic.SERIES_HEADER) <= set(cols):
            produced.append(plot_kinetic_series(path, out_dir / f"{path.stem}.svg"))
        elif set(kinetic.HIST_HEADER) <= set(cols):
            produced.append(plot_histogram(path, out_dir / f"{path.stem}.svg"))
            hist_paths.append(path)
        else:
            raise SchemaError(f"{path}: unrecognized CSV header")
    if len(hist_paths) > 1:
        produced.append(
            plot_histogram_overlay(hist_paths, out_dir / "histograms_overlay.svg")
        )
    return produced
