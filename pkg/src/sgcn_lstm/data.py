"""Loading, scaling, splitting and windowing of speed matrices, plus a synthetic generator."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import ParseError, ValidationError
from .graph import EdgeList, SparseAdjacency, build_adjacency, normalize_adjacency, spmm
from .tensor import Tensor

TIME_COLUMNS = ("timestamp", "time", "datetime")


@dataclass
class SpeedDataset:
    """``speeds[t, k]`` is the speed (mph) of sensor ``node_ids[k]`` at step ``t``."""

    speeds: Tensor
    node_ids: list[str]
    timestamps: list[str] | None = None

    @property
    def num_steps(self) -> int:
        return int(self.speeds.shape[0])

    @property
    def num_nodes(self) -> int:
        return int(self.speeds.shape[1])


# ------------------------------------------------------------------ CSV I/O


def _parse_cell(text: str) -> float:
    text = text.strip()
    if text == "" or text.lower() in ("nan", "na", "null"):
        return math.nan
    return float(text)


def load_speed_csv(path) -> SpeedDataset:
    """Read a sensor-per-column speed file.

    Missing cells are forward-filled from the previous row; leading gaps take
    the column mean. An optional first column named ``timestamp`` is kept as
    labels.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        has_time = header[0].strip().lower() in TIME_COLUMNS
        ids = [h.strip() for h in (header[1:] if has_time else header)]
        if not ids:
            raise ParseError(f"{path}: header has no sensor columns")
        rows, stamps = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(
                    f"{path}: line {lineno} has {len(row)} fields, header has {len(header)}"
                )
            if has_time:
                stamps.append(row[0])
                row = row[1:]
            try:
                rows.append([_parse_cell(c) for c in row])
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from None
    if not rows:
        raise ParseError(f"{path}: no data rows")
    speeds = fill_missing(np.array(rows, dtype=np.float64), ids)
    if np.any(speeds < 0):
        raise ValidationError(f"{path}: negative speeds")
    return SpeedDataset(speeds, ids, stamps if has_time else None)


def fill_missing(speeds: np.ndarray, ids: list[str] | None = None) -> np.ndarray:
    out = speeds.copy()
    for k in range(out.shape[1]):
        col = out[:, k]
        valid = np.isfinite(col)
        if not valid.any():
            name = ids[k] if ids else str(k)
            raise ValidationError(f"column {name!r} has no valid observations")
        if valid.all():
            continue
        # index of the last valid observation at or before each row
        last = np.where(valid, np.arange(col.size), -1)
        np.maximum.accumulate(last, out=last)
        filled = np.where(last >= 0, col[np.maximum(last, 0)], col[valid].mean())
        out[:, k] = filled
    return out


def write_speed_csv(path, ds: SpeedDataset) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if ds.timestamps is not None:
            w.writerow(["timestamp", *ds.node_ids])
            for stamp, row in zip(ds.timestamps, ds.speeds):
                w.writerow([stamp, *map(repr, row.tolist())])
        else:
            w.writerow(ds.node_ids)
            for row in ds.speeds:
                w.writerow(list(map(repr, row.tolist())))


def load_edge_csv(path, num_nodes: int) -> EdgeList:
    """Read a ``src,dst,weight`` edge file."""
    path = Path(path)
    edges = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header != ["src", "dst", "weight"]:
            raise ParseError(f"{path}: expected header src,dst,weight, got {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ParseError(f"{path}: line {lineno} has {len(row)} fields, expected 3")
            try:
                edges.append((int(row[0]), int(row[1]), float(row[2])))
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from None
    el = EdgeList(num_nodes, edges)
    el.validate()
    return el


def write_edge_csv(path, edges: EdgeList) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["src", "dst", "weight"])
        for s, d, wt in edges.edges:
            w.writerow([s, d, repr(float(wt))])


# ------------------------------------------------------------------ scaling


@dataclass
class Scaler:
    mean: Tensor
    std: Tensor
    mode: str = "per-node"

    def apply(self, x: Tensor) -> Tensor:
        return (x - self.mean) / self.std

    def invert(self, x: Tensor) -> Tensor:
        return x * self.std + self.mean


def fit_scaler(train_slice: Tensor, mode: str = "per-node") -> Scaler:
    """Population mean/std of ``train_slice`` (``T x nodes``), per column or global.

    Columns with zero variance get ``std = 1``.
    """
    x = np.asarray(train_slice, dtype=np.float64)
    if x.size == 0:
        raise ValidationError("cannot fit scaler on an empty slice")
    if x.ndim == 1:
        x = x[:, None]
    if mode == "per-node":
        mean, std = x.mean(axis=0), x.std(axis=0)
    elif mode == "global":
        mean, std = np.array([x.mean()]), np.array([x.std()])
    else:
        raise ValidationError(f"unknown scaler mode {mode!r}")
    degenerate = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    std = np.where(degenerate, 1.0, std)
    return Scaler(mean, std, mode)


# ---------------------------------------------------------------- splitting


@dataclass(frozen=True)
class Split:
    train: range
    val: range
    test: range


def chronological_split(num_steps: int, train_frac: float = 0.8,
                        val_frac_of_train: float = 0.1) -> Split:
    """Contiguous train / validation / test timestep ranges.

    ``floor(train_frac * T)`` steps go to train+validation and the rest to
    test; the first ``floor((1 - val_frac_of_train) * n)`` of those are train.
    """
    if not (0 < train_frac < 1 and 0 < val_frac_of_train < 1):
        raise ValidationError("split fractions must lie in (0, 1)")
    if num_steps < 10:
        raise ValidationError(f"need at least 10 timesteps to split, got {num_steps}")
    # epsilon guards against products such as 0.8 * 10 landing just below an integer
    fit_end = int(math.floor(train_frac * num_steps + 1e-9))
    train_end = int(math.floor((1.0 - val_frac_of_train) * fit_end + 1e-9))
    split = Split(range(0, train_end), range(train_end, fit_end), range(fit_end, num_steps))
    for name in ("train", "val", "test"):
        if len(getattr(split, name)) == 0:
            raise ValidationError(f"{name} split is empty for T={num_steps}")
    return split


# ---------------------------------------------------------------- windowing


@dataclass
class WindowSet:
    """``inputs[s]`` holds steps ``s .. s+N-1``; ``targets[s]`` is step ``target_index[s]``."""

    inputs: Tensor        # (S, N, nodes, 1)
    targets: Tensor       # (S, nodes)
    seq_len: int
    horizon: int
    target_index: np.ndarray

    def __len__(self) -> int:
        return int(self.targets.shape[0])

    def select(self, steps: range) -> "WindowSet":
        """Windows whose target timestep lies in ``steps``."""
        mask = (self.target_index >= steps.start) & (self.target_index < steps.stop)
        return WindowSet(self.inputs[mask], self.targets[mask], self.seq_len,
                         self.horizon, self.target_index[mask])


def make_windows(standardized: Tensor, seq_len: int = 1, horizon: int = 1) -> WindowSet:
    x = np.asarray(standardized, dtype=np.float64)
    T = x.shape[0]
    if seq_len < 1 or horizon < 1:
        raise ValidationError("seq_len and horizon must be >= 1")
    S = T - seq_len - horizon + 1
    if S < 1:
        raise ValidationError(
            f"{T} timesteps cannot hold a window of {seq_len} plus horizon {horizon}"
        )
    idx = np.arange(S)[:, None] + np.arange(seq_len)[None, :]
    inputs = x[idx][..., None]
    target_index = np.arange(S) + seq_len + horizon - 1
    return WindowSet(inputs, x[target_index], seq_len, horizon, target_index)


def split_windows(windows: WindowSet, split: Split) -> tuple[WindowSet, WindowSet, WindowSet]:
    parts = tuple(windows.select(r) for r in (split.train, split.val, split.test))
    for name, part in zip(("train", "val", "test"), parts):
        if len(part) == 0:
            raise ValidationError(f"{name} split contains no complete window")
    return parts


# ---------------------------------------------------------------- synthetic


@dataclass
class SyntheticParams:
    nodes: int = 20
    timesteps: int = 2000
    seed: int = 0
    beta: float = 0.2
    period: int = 288
    noise: float = 1.0
    amplitude: float = 0.25
    radius: float | None = None

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True, indent=2)


def random_geometric_graph(nodes: int, rng: np.random.Generator, radius: float,
                           max_tries: int = 100) -> EdgeList:
    """Connected random geometric graph on the unit square with Gaussian-kernel weights."""
    for _ in range(max_tries):
        pos = rng.uniform(0.0, 1.0, size=(nodes, 2))
        dist = np.sqrt(((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1))
        src, dst = np.nonzero(np.triu(dist <= radius, k=1))
        if src.size == 0:
            continue
        weights = np.exp(-(dist[src, dst] / radius) ** 2)
        mat = csr_matrix((weights, (src, dst)), shape=(nodes, nodes))
        if connected_components(mat, directed=False, return_labels=False) == 1:
            return EdgeList.from_arrays(nodes, src, dst, weights)
    raise ValidationError(f"no connected graph after {max_tries} draws (radius={radius})")


def simulate_speeds(adj: SparseAdjacency, x0: np.ndarray, timesteps: int, beta: float,
                    period: float, amplitude: float, noise: float,
                    rng: np.random.Generator) -> np.ndarray:
    """Graph diffusion with a shared periodic drive and Gaussian noise, clipped at 0."""
    out = np.empty((timesteps, x0.size))
    x = np.asarray(x0, dtype=np.float64).copy()
    out[0] = x
    for t in range(timesteps - 1):
        mixed = spmm(adj, x[:, None])[:, 0]
        drive = amplitude * math.sin(2.0 * math.pi * t / period)
        eps = rng.normal(0.0, noise, size=x.size) if noise > 0 else 0.0
        x = np.maximum((1.0 - beta) * x + beta * mixed + drive + eps, 0.0)
        out[t + 1] = x
    return out


def generate_synthetic(nodes: int, timesteps: int, seed: int, beta: float = 0.2,
                       period: int = 288, noise: float = 1.0, amplitude: float = 0.25,
                       radius: float | None = None) -> tuple[EdgeList, SpeedDataset]:
    """Seeded synthetic road network and speed matrix for end-to-end tests."""
    if nodes < 2:
        raise ValidationError(f"synthetic generator needs >= 2 nodes, got {nodes}")
    if timesteps < 100:
        raise ValidationError(f"synthetic generator needs >= 100 timesteps, got {timesteps}")
    if radius is None:
        radius = min(1.0, math.sqrt(2.0 * math.log(nodes) / nodes))
    rng = np.random.default_rng(seed)
    edges = random_geometric_graph(nodes, rng, radius)
    adj = normalize_adjacency(build_adjacency(edges, symmetrize=True))
    x0 = rng.uniform(20.0, 70.0, size=nodes)
    speeds = simulate_speeds(adj, x0, timesteps, beta, period, amplitude, noise, rng)
    ids = [f"sensor_{k}" for k in range(nodes)]
    return edges, SpeedDataset(speeds, ids)
