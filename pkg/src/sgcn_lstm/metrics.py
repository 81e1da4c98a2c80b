"""Error metrics, residual analysis and plot-ready exports."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import WindowSet
from .errors import DimensionError, ValidationError
from .tensor import Tensor

MAPE_THRESHOLD = 1e-3


@dataclass
class MetricReport:
    mae: float
    mse: float
    rmse: float
    mape: float | None      # None when every target was too close to zero
    units: str
    n_samples: int
    mape_excluded: int

    def to_dict(self) -> dict:
        return asdict(self)


def _check_pair(y_pred, y_true) -> tuple[np.ndarray, np.ndarray]:
    y_pred = np.asarray(y_pred, dtype=np.float64)
    y_true = np.asarray(y_true, dtype=np.float64)
    if y_pred.shape != y_true.shape:
        raise DimensionError(f"prediction shape {y_pred.shape} != target shape {y_true.shape}")
    return y_pred, y_true


def compute_metrics(y_pred: Tensor, y_true: Tensor, units: str = "standardized",
                    mape_threshold: float = MAPE_THRESHOLD) -> MetricReport:
    y_pred, y_true = _check_pair(y_pred, y_true)
    if y_true.size == 0:
        raise ValidationError("cannot compute metrics on empty input")
    e = (y_pred - y_true).ravel()
    yt = y_true.ravel()
    mae = float(np.mean(np.abs(e)))
    mse = float(np.mean(e * e))
    rmse = math.sqrt(mse)
    keep = np.abs(yt) > mape_threshold
    excluded = int(e.size - np.count_nonzero(keep))
    mape = float(np.mean(np.abs(e[keep] / yt[keep])) * 100.0) if keep.any() else None
    return MetricReport(mae, mse, rmse, mape, units, int(e.size), excluded)


def residuals(y_pred: Tensor, y_true: Tensor) -> Tensor:
    y_pred, y_true = _check_pair(y_pred, y_true)
    return y_pred - y_true


def histogram(e: Tensor, bins: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Counts and edges of ``e``; an all-equal input gets a unit-wide range around it."""
    if bins < 1:
        raise ValidationError("bins must be >= 1")
    counts, edges = np.histogram(np.ravel(e), bins=bins)
    return counts, edges


@dataclass
class HeatmapGrid:
    speed_bin_edges: np.ndarray
    error_bin_edges: np.ndarray
    log_counts: np.ndarray      # ln(1 + count), shape (speed bins, error bins)

    @property
    def counts(self) -> np.ndarray:
        return np.rint(np.expm1(self.log_counts)).astype(np.int64)


def _edges(values: np.ndarray, bins) -> np.ndarray:
    if not np.isscalar(bins):
        edges = np.asarray(bins, dtype=np.float64)
        if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
            raise ValidationError("bin edges must be strictly increasing with at least 2 entries")
        return edges
    if values.size == 0:
        lo, hi = 0.0, 1.0
    else:
        lo, hi = float(values.min()), float(values.max())
        if lo == hi:
            lo, hi = lo - 0.5, hi + 0.5
    return np.linspace(lo, hi, int(bins) + 1)


def error_speed_heatmap(y_pred: Tensor, y_true: Tensor, speed_bins=40,
                        error_bins=40) -> HeatmapGrid:
    """2-D histogram of (actual speed, residual) with ``ln(1 + count)`` cells.

    Bins may be counts or explicit edges; points beyond the outer edges are
    clamped into the boundary bins.
    """
    y_pred, y_true = _check_pair(y_pred, y_true)
    speed = y_true.ravel()
    err = (y_pred - y_true).ravel()
    s_edges = _edges(speed, speed_bins)
    e_edges = _edges(err, error_bins)
    speed = np.clip(speed, s_edges[0], s_edges[-1])
    err = np.clip(err, e_edges[0], e_edges[-1])
    counts, _, _ = np.histogram2d(speed, err, bins=[s_edges, e_edges])
    return HeatmapGrid(s_edges, e_edges, np.log1p(counts))


def persistence_baseline(windows: WindowSet) -> Tensor:
    """Predict that each node keeps the value of the window's last timestep."""
    return windows.inputs[:, -1, :, 0].copy()


# ------------------------------------------------------------------ exports


def write_csv(path, header: list[str], rows) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def export_timeseries(y_pred: Tensor, y_true: Tensor, steps: np.ndarray,
                      node: int | None = None, start: int = 0,
                      stop: int | None = None) -> list[tuple[int, float, float]]:
    """Rows ``(t, actual, predicted)`` for one node or the node average.

    ``y_pred``/``y_true`` are ``(S, nodes)`` in mph; ``steps`` holds the
    timestep index of each row, and ``start:stop`` selects rows.
    """
    y_pred, y_true = _check_pair(y_pred, y_true)
    S = y_true.shape[0]
    stop = S if stop is None else stop
    if not 0 <= start < stop <= S:
        raise ValidationError(f"range [{start}, {stop}) outside [0, {S})")
    if node is None:
        actual = y_true[start:stop].mean(axis=1)
        pred = y_pred[start:stop].mean(axis=1)
    else:
        if not 0 <= node < y_true.shape[1]:
            raise ValidationError(f"node {node} outside [0, {y_true.shape[1]})")
        actual, pred = y_true[start:stop, node], y_pred[start:stop, node]
    return [(int(t), float(a), float(p)) for t, a, p in zip(steps[start:stop], actual, pred)]


def export_scatter(y_pred: Tensor, y_true: Tensor, max_points: int | None = None,
                   seed: int = 0) -> list[tuple[float, float]]:
    """Rows ``(actual, predicted)``; optionally a seeded subsample."""
    y_pred, y_true = _check_pair(y_pred, y_true)
    a, p = y_true.ravel(), y_pred.ravel()
    idx = np.arange(a.size)
    if max_points is not None and a.size > max_points:
        idx = np.sort(np.random.default_rng(seed).choice(a.size, max_points, replace=False))
    return [(float(a[i]), float(p[i])) for i in idx]


def export_range(y_pred: Tensor, y_true: Tensor, steps: np.ndarray) -> list[tuple]:
    """Per-timestep min/max across nodes of actual and predicted speeds."""
    y_pred, y_true = _check_pair(y_pred, y_true)
    return [
        (int(t), float(a.min()), float(a.max()), float(p.min()), float(p.max()))
        for t, a, p in zip(steps, y_true, y_pred)
    ]
