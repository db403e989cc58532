"""CSV metrics logging and sliding-average learning-curve plots.

One row per training episode.  Evaluation columns stay blank except on the
episodes where a periodic evaluation ran, so the file diffs cleanly between
seeded reruns (wall_ms is the one column that legitimately differs).
"""
from __future__ import annotations

import csv
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FIXED_COLUMNS = ("iteration", "episode", "mode", "train_return",
                 "eval_return", "success_rate", "selector_accuracy")
TRAILING_COLUMNS = ("penalties_total", "wall_ms")

DEFAULT_WINDOW_FRACTION = 0.025


@dataclass
class MetricsRow:
    iteration: int
    episode: int
    mode: str
    train_return: float
    eval_return: float | None = None
    success_rate: float | None = None
    selector_accuracy: float | None = None
    choices: tuple[int, ...] = ()
    penalties_total: float = 0.0
    wall_ms: float = 0.0


def header(n_nodes: int) -> list[str]:
    choice_cols = [f"choice_{i}" for i in range(n_nodes)]
    return [*FIXED_COLUMNS, *choice_cols, *TRAILING_COLUMNS]


class MetricsWriter:
    """Append-only CSV writer enforcing the monotone-iteration invariant."""

    def __init__(self, path, n_nodes: int):
        self.path = Path(path)
        self.n_nodes = n_nodes
        self._last_iteration = -1
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="") as fh:
            csv.writer(fh).writerow(header(n_nodes))

    @staticmethod
    def _cell(value):
        if value is None:
            return ""
        if isinstance(value, float):
            return repr(value)
        return value

    def append(self, row: MetricsRow):
        if row.iteration < self._last_iteration:
            raise ValueError(f"iteration {row.iteration} after "
                             f"{self._last_iteration} breaks monotonicity")
        if len(row.choices) != self.n_nodes:
            raise ValueError(f"expected {self.n_nodes} choice counts, "
                             f"got {len(row.choices)}")
        self._last_iteration = row.iteration
        record = [row.iteration, row.episode, row.mode,
                  self._cell(row.train_return), self._cell(row.eval_return),
                  self._cell(row.success_rate),
                  self._cell(row.selector_accuracy),
                  *row.choices, self._cell(row.penalties_total),
                  self._cell(row.wall_ms)]
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow(record)


def read_metrics(path) -> dict[str, np.ndarray | list]:
    """Columns of a metrics file; numeric columns become float arrays."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        head = next(reader)
        rows = list(reader)
    if not rows:
        raise ValueError(f"metrics file {path} has no data rows")
    out: dict = {}
    for j, name in enumerate(head):
        column = [r[j] for r in rows]
        if name == "mode":
            out[name] = column
        else:
            out[name] = np.array([float(c) if c else math.nan
                                  for c in column])
    return out


def moving_average(iterations, values, window: float) -> np.ndarray:
    """Trailing mean over the iteration axis.

    out[i] averages every value whose iteration lies in
    (iterations[i] - window, iterations[i]]; window <= the smallest
    iteration gap reproduces the raw series.
    """
    iterations = np.asarray(iterations, dtype=float)
    values = np.asarray(values, dtype=float)
    if iterations.shape != values.shape or iterations.ndim != 1:
        raise ValueError("iterations and values must be equal-length vectors")
    out = np.empty_like(values)
    lo = 0
    for i in range(len(values)):
        while iterations[lo] <= iterations[i] - window:
            lo += 1
        out[i] = values[lo:i + 1].mean()
    return out


def emit_plot(metrics_path, out_path,
              window_fraction: float = DEFAULT_WINDOW_FRACTION) -> Path:
    """Raw + smoothed train-return curve as a standalone SVG."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    data = read_metrics(metrics_path)
    iterations = data["iteration"]
    returns = data["train_return"]
    window = max(1.0, round(window_fraction * float(iterations[-1])))
    smoothed = moving_average(iterations, returns, window)

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(iterations, returns, color="#b0c4de", linewidth=0.8, label="raw")
    ax.plot(iterations, smoothed, color="#1f4e79", linewidth=1.8,
            label=f"moving average (window {window:g})")
    ax.set_xlabel("iteration")
    ax.set_ylabel("episode return")
    ax.legend(loc="best")
    fig.tight_layout()

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=out_path.parent, suffix=".svg")
    os.close(fd)
    try:
        fig.savefig(tmp, format="svg")
        os.replace(tmp, out_path)
    finally:
        plt.close(fig)
        if os.path.exists(tmp):
            os.unlink(tmp)
    return out_path
