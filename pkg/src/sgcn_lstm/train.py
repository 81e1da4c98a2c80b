"""Loss, gradient clipping, Adam, and the early-stopping training loop."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .data import WindowSet
from .errors import DimensionError, NonFiniteError, ValidationError
from .graph import CSRMatrix
from .model import ModelParams, model_backward, model_forward
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    alpha: float = 0.7
    lr: float = 5e-4
    batch_size: int = 128
    patience: int = 5
    max_epochs: int = 100
    clip_norm: float = 1.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    deterministic: bool = True

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.lr < 0:
            raise ValidationError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.patience < 1:
            raise ValidationError(f"patience must be >= 1, got {self.patience}")
        if self.max_epochs < 1:
            raise ValidationError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.clip_norm <= 0:
            raise ValidationError(f"clip_norm must be > 0, got {self.clip_norm}")

    def to_dict(self) -> dict:
        return asdict(self)


# -------------------------------------------------------------------- loss


def combined_loss(y_pred: Tensor, y_true: Tensor, alpha: float = 0.7) -> tuple[float, Tensor]:
    """``alpha * MAE + (1 - alpha) * MSE`` and its gradient w.r.t. ``y_pred``."""
    if np.shape(y_pred) != np.shape(y_true):
        raise DimensionError(f"prediction shape {np.shape(y_pred)} != target shape {np.shape(y_true)}")
    e = np.asarray(y_pred, dtype=np.float64) - y_true
    n = e.size
    if n == 0:
        raise ValidationError("loss over zero elements")
    loss = alpha * np.abs(e).mean() + (1.0 - alpha) * (e * e).mean()
    grad = (alpha * np.sign(e) + (1.0 - alpha) * 2.0 * e) / n
    return float(loss), grad


# -------------------------------------------------------------- clipping


def global_norm(grads: ModelParams) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for _, g in grads.items())))


def clip_gradients(grads: ModelParams, clip_norm: float) -> tuple[ModelParams, float]:
    """Rescale all gradients together if their joint L2 norm exceeds ``clip_norm``.

    Returns the (possibly rescaled) gradients and the norm before clipping.
    """
    if clip_norm <= 0:
        raise ValidationError("clip_norm must be positive")
    norm = global_norm(grads)
    if not np.isfinite(norm):
        bad = [name for name, g in grads.items() if not np.all(np.isfinite(g))]
        raise NonFiniteError(f"non-finite gradient in {', '.join(bad)}")
    if norm <= clip_norm:
        return grads, norm
    scale = clip_norm / norm
    return grads.map(lambda g: g * scale), norm


# -------------------------------------------------------------------- Adam


@dataclass
class OptState:
    m: ModelParams
    v: ModelParams
    t: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "OptState":
        return cls(params.zeros_like(), params.zeros_like(), 0)


def adam_step(params: ModelParams, grads: ModelParams, opt: OptState,
              cfg: TrainConfig) -> tuple[ModelParams, OptState]:
    """One bias-corrected Adam update. Inputs are not modified."""
    t = opt.t + 1
    b1, b2 = cfg.beta1, cfg.beta2
    m = opt.m.zip_map(grads, lambda m_, g: b1 * m_ + (1.0 - b1) * g)
    v = opt.v.zip_map(grads, lambda v_, g: b2 * v_ + (1.0 - b2) * g * g)
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    updated = {}
    for name, theta in params.items():
        m_hat = getattr(m, name) / c1
        v_hat = getattr(v, name) / c2
        with np.errstate(invalid="ignore", over="ignore"):
            new = theta - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        if not np.all(np.isfinite(new)):
            raise NonFiniteError(f"Adam produced non-finite values in {name} at step {t}")
        updated[name] = new
    return ModelParams(**updated), OptState(m, v, t)


# ------------------------------------------------------------ early stopping


class EarlyStopping:
    """Tracks the best validation loss; ``update`` returns True when training should stop."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_loss = np.inf
        self.best_epoch = 0
        self.bad_epochs = 0
        self.epoch = 0

    def update(self, val_loss: float) -> bool:
        self.epoch += 1
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.best_epoch = self.epoch
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience

    @property
    def improved(self) -> bool:
        return self.best_epoch == self.epoch


# ------------------------------------------------------------------- loop


@dataclass
class TrainRecord:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    wall_time: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stop_reason: str = ""

    @property
    def best_val_loss(self) -> float:
        return min(self.val_loss) if self.val_loss else float("nan")

    @property
    def epochs_run(self) -> int:
        return len(self.train_loss)


def predict(params: ModelParams, adj: CSRMatrix, windows: WindowSet,
            batch_size: int = 128) -> Tensor:
    """Model output for every window, ``(S, nodes)``, in standardized units."""
    out = np.empty_like(windows.targets)
    for start in range(0, len(windows), batch_size):
        sl = slice(start, start + batch_size)
        out[sl], _ = model_forward(adj, windows.inputs[sl], params)
    return out


def evaluate_loss(params: ModelParams, adj: CSRMatrix, windows: WindowSet,
                  alpha: float, batch_size: int = 128) -> float:
    y = predict(params, adj, windows, batch_size)
    loss, _ = combined_loss(y, windows.targets, alpha)
    return loss


def shuffle_rng(cfg: TrainConfig) -> np.random.Generator:
    if cfg.deterministic:
        return np.random.default_rng([cfg.seed, 1])
    return np.random.default_rng()


def fit(params: ModelParams, train: WindowSet, val: WindowSet, adj: CSRMatrix,
        cfg: TrainConfig, on_epoch: Callable[[int, TrainRecord], None] | None = None,
        ) -> tuple[ModelParams, TrainRecord, OptState]:
    """Mini-batch Adam with gradient clipping and patience-based early stopping.

    Returns the parameters of the epoch with the lowest validation loss,
    the per-epoch record, and the optimizer state at the end of training.
    """
    if len(train) == 0 or len(val) == 0:
        raise ValidationError("training and validation sets must be non-empty")
    params.validate()
    rng = shuffle_rng(cfg)
    opt = OptState.zeros(params)
    stopper = EarlyStopping(cfg.patience)
    record = TrainRecord()
    best = params.copy()
    S = len(train)
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(S)
        total = 0.0
        for b, start in enumerate(range(0, S, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            y, cache = model_forward(adj, train.inputs[idx], params)
            loss, d_y = combined_loss(y, train.targets[idx], cfg.alpha)
            if not np.isfinite(loss):
                raise NonFiniteError(f"loss diverged at epoch {epoch}, batch {b}")
            grads = model_backward(cache, d_y)
            try:
                grads, _ = clip_gradients(grads, cfg.clip_norm)
                params, opt = adam_step(params, grads, opt, cfg)
            except NonFiniteError as exc:
                raise NonFiniteError(f"epoch {epoch}, batch {b}: {exc}") from None
            total += loss * idx.size
        val_loss = evaluate_loss(params, adj, val, cfg.alpha, cfg.batch_size)
        if not np.isfinite(val_loss):
            raise NonFiniteError(f"validation loss diverged at epoch {epoch}")
        record.train_loss.append(total / S)
        record.val_loss.append(val_loss)
        record.wall_time.append(time.perf_counter() - t0)
        stop = stopper.update(val_loss)
        if stopper.improved:
            best = params.copy()
        record.best_epoch = stopper.best_epoch
        logger.info("epoch %d train %.6f val %.6f%s", epoch, record.train_loss[-1],
                    val_loss, " *" if stopper.improved else "")
        if on_epoch is not None:
            on_epoch(epoch, record)
        if stop:
            record.stop_reason = "early_stop"
            break
    else:
        record.stop_reason = "max_epochs"
    return best, record, opt
