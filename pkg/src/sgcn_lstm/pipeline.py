"""Run configuration and the load -> split -> scale -> window -> fit/evaluate stages."""

from __future__ import annotations

import configparser
import contextlib
import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .data import (
    Scaler,
    SpeedDataset,
    Split,
    WindowSet,
    chronological_split,
    fit_scaler,
    load_edge_csv,
    load_speed_csv,
    make_windows,
    split_windows,
)
from .graph import EdgeList, SparseAdjacency, build_adjacency, normalize_adjacency
from .train import TrainConfig

SECTION = "run"


@dataclass
class RunConfig:
    # data
    speeds: str = "data/speeds.csv"
    edges: str = "data/edges.csv"
    out: str = "runs/default"
    seed: int | None = None
    deterministic: bool = True
    # training
    alpha: float = 0.7
    lr: float = 5e-4
    batch_size: int = 128
    patience: int = 5
    max_epochs: int = 100
    clip_norm: float = 1.0
    # model
    h_g: int = 64
    h_l: int = 64
    # windows and splits
    train_frac: float = 0.8
    val_frac: float = 0.1
    seq_len: int = 1
    horizon: int = 1
    scaler_mode: str = "per-node"
    # synth
    nodes: int = 20
    timesteps: int = 2000
    beta: float = 0.2
    period: int = 288
    noise: float = 1.0
    amplitude: float = 0.25
    radius: float | None = None
    # eval / predict
    checkpoint: str | None = None
    hist_bins: int = 50
    heatmap_bins: int = 40
    timeseries_steps: int = 120
    scatter_points: int = 5000
    start: int | None = None
    stop: int | None = None

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            alpha=self.alpha, lr=self.lr, batch_size=self.batch_size, patience=self.patience,
            max_epochs=self.max_epochs, clip_norm=self.clip_norm,
            seed=0 if self.seed is None else self.seed, deterministic=self.deterministic,
        )

    def model_config(self) -> dict:
        """The subset of settings that determines a trained model (no paths)."""
        keys = ("alpha", "lr", "batch_size", "patience", "max_epochs", "clip_norm", "seed",
                "deterministic", "h_g", "h_l", "train_frac", "val_frac", "seq_len",
                "horizon", "scaler_mode")
        return {k: getattr(self, k) for k in keys}

    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.out) / "checkpoint.bin"

    # ---------------------------------------------------------- (de)serialize

    def to_ini(self) -> str:
        lines = [f"[{SECTION}]"]
        for f in fields(self):
            value = getattr(self, f.name)
            if value is not None:
                lines.append(f"{f.name} = {_format(value)}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_ini())
        return path

    @classmethod
    def from_ini(cls, text: str) -> "RunConfig":
        if not text.lstrip().startswith("["):
            text = f"[{SECTION}]\n" + text
        parser = configparser.ConfigParser()
        parser.read_string(text)
        section = parser[SECTION] if parser.has_section(SECTION) else {}
        return cls().merged({k: v for k, v in section.items()})

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_ini(Path(path).read_text())

    def merged(self, overrides: dict) -> "RunConfig":
        """Copy with ``overrides`` applied; string values are coerced to field types."""
        known = {f.name: f for f in fields(self)}
        updates = {}
        for key, value in overrides.items():
            key = key.replace("-", "_")
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            if value is None:
                continue
            updates[key] = _coerce(known[key], value)
        return dataclasses.replace(self, **updates)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _coerce(f: dataclasses.Field, value):
    if not isinstance(value, str):
        return value
    kind = f.type if isinstance(f.type, str) else str(f.type)
    if value.strip().lower() in ("", "none") and "None" in kind:
        return None
    if kind.startswith("bool"):
        return parse_bool(value)
    if kind.startswith("int"):
        return int(value)
    if kind.startswith("float"):
        return float(value)
    return value


# ---------------------------------------------------------------- stages


class StageError(Exception):
    """Wraps a failure with the name of the pipeline stage that raised it."""

    def __init__(self, stage: str, error: BaseException):
        super().__init__(f"[{stage}] {type(error).__name__}: {error}")
        self.stage = stage
        self.error = error


@contextlib.contextmanager
def stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


@dataclass
class PreparedData:
    dataset: SpeedDataset
    edges: EdgeList
    adj: SparseAdjacency
    split: Split
    scaler: Scaler
    windows: WindowSet
    train: WindowSet
    val: WindowSet
    test: WindowSet


def prepare_data(cfg: RunConfig, scaler: Scaler | None = None) -> PreparedData:
    """Load both CSVs, split chronologically, standardize, and window.

    The scaler is fit on the training range unless one is supplied (e.g. from
    a checkpoint).
    """
    with stage("speed-load"):
        ds = load_speed_csv(cfg.speeds)
    with stage("graph-load"):
        edges = load_edge_csv(cfg.edges, ds.num_nodes)
        adj = normalize_adjacency(build_adjacency(edges, symmetrize=True))
    with stage("split"):
        split = chronological_split(ds.num_steps, cfg.train_frac, cfg.val_frac)
    with stage("scale"):
        if scaler is None:
            scaler = fit_scaler(ds.speeds[split.train.start:split.train.stop], cfg.scaler_mode)
        standardized = scaler.apply(ds.speeds)
    with stage("window"):
        windows = make_windows(standardized, cfg.seq_len, cfg.horizon)
        train, val, test = split_windows(windows, split)
    return PreparedData(ds, edges, adj, split, scaler, windows, train, val, test)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def write_json(path, payload) -> Path:
    path = Path(path)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, range):
        return [obj.start, obj.stop]
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")
