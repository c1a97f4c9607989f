"""Report emission: delimited score tables and rendered figures.

CSV files start with '#'-prefixed provenance comments (config hash,
seed) so every artifact is traceable; float cells are written with
repr() so identical runs produce byte-identical files.  Figures are
rendered with the Agg backend straight to PNG; radar frames use a
fixed intensity->color ramp shipped as data below.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib.colors import LinearSegmentedColormap

# anchor points (position in [0,1], RGB byte triple) for the radar ramp
RADAR_RAMP = (
    (0.00, (5, 5, 10)),
    (0.07, (25, 25, 85)),
    (0.18, (10, 70, 175)),
    (0.32, (10, 145, 90)),
    (0.48, (90, 200, 25)),
    (0.62, (235, 220, 0)),
    (0.76, (235, 120, 0)),
    (0.88, (215, 20, 20)),
    (1.00, (255, 80, 255)),
)


def radar_colormap() -> LinearSegmentedColormap:
    anchors = [(pos, tuple(c / 255.0 for c in rgb)) for pos, rgb in RADAR_RAMP]
    return LinearSegmentedColormap.from_list("radar", anchors)


def format_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path: str | Path, columns: Sequence[str], rows: Sequence[Sequence],
              comments: Sequence[str] = ()) -> None:
    with open(path, "w", newline="") as fh:
        for comment in comments:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_cell(v) for v in row])


def read_csv(path: str | Path) -> tuple[list[str], list[dict[str, str]]]:
    comments: list[str] = []
    data_lines: list[str] = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            comments.append(line[1:].strip())
        elif line:
            data_lines.append(line)
    reader = csv.reader(data_lines)
    header = next(reader)
    return comments, [dict(zip(header, row)) for row in reader]


def save_frame_grid(path: str | Path, rows: Mapping[str, np.ndarray],
                    metadata: Mapping[str, str] | None = None,
                    vmax: float = 255.0) -> None:
    """One row per labelled sequence (observation, models, ...), one
    column per lead time; all sequences must share (T,1,H,W)."""
    labels = list(rows)
    if not labels:
        raise ValueError("nothing to draw")
    t = rows[labels[0]].shape[0]
    fig, axes = plt.subplots(len(labels), t,
                             figsize=(1.1 * t, 1.25 * len(labels)), squeeze=False)
    cmap = radar_colormap()
    for i, label in enumerate(labels):
        frames = np.asarray(rows[label])
        if frames.shape[0] != t:
            raise ValueError(f"row {label!r} has {frames.shape[0]} frames, expected {t}")
        for j in range(t):
            ax = axes[i][j]
            ax.imshow(frames[j, 0], cmap=cmap, vmin=0.0, vmax=vmax,
                      interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(f"+{j + 1}", fontsize=8)
        axes[i][0].set_ylabel(label, fontsize=8, rotation=0,
                              ha="right", va="center", labelpad=18)
    fig.tight_layout(pad=0.3)
    fig.savefig(path, dpi=110, metadata=dict(metadata or {}))
    plt.close(fig)


def save_line_plot(path: str | Path, series: Mapping[str, tuple[Sequence, Sequence]],
                   xlabel: str, ylabel: str, title: str = "",
                   logy: bool = False,
                   metadata: Mapping[str, str] | None = None) -> None:
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for label, (xs, ys) in series.items():
        ax.plot(xs, ys, label=label, linewidth=1.2)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if logy:
        ax.set_yscale("log")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=dict(metadata or {}))
    plt.close(fig)
