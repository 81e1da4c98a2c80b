"""SGCN-LSTM forward and backward passes.

Each timestep of an input window goes through two graph-convolution layers::

    H1 = relu(N @ X  @ W0 + b0)
    H2 = relu(N @ H1 @ W1 + b1)

and the per-node sequence of ``H2`` rows feeds a single LSTM layer whose last
hidden state is mapped to one value per node by a linear head. A batch of
``B`` windows is treated as ``B`` copies of the graph, so the LSTM sees
``B * nodes`` independent rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DimensionError, ValidationError
from .graph import CSRMatrix, spmm
from .tensor import (
    Tensor,
    matmul,
    matmul_backward,
    relu,
    relu_backward,
    sigmoid,
    sigmoid_backward,
    tanh,
    tanh_backward,
)

PARAM_NAMES = ("W0", "b0", "W1", "b1", "lstm_Wx", "lstm_Wh", "lstm_b", "head_W", "head_b")


@dataclass
class ModelParams:
    """Trainable tensors. LSTM gate blocks are ordered input, forget, cell, output."""

    W0: Tensor
    b0: Tensor
    W1: Tensor
    b1: Tensor
    lstm_Wx: Tensor
    lstm_Wh: Tensor
    lstm_b: Tensor
    head_W: Tensor
    head_b: Tensor

    @property
    def dims(self) -> dict[str, int]:
        return {
            "f_in": int(self.W0.shape[0]),
            "h_g": int(self.W0.shape[1]),
            "h_l": int(self.lstm_Wh.shape[0]),
        }

    def items(self):
        return [(name, getattr(self, name)) for name in PARAM_NAMES]

    def map(self, fn: Callable[[Tensor], Tensor]) -> "ModelParams":
        return ModelParams(**{name: fn(value) for name, value in self.items()})

    def zip_map(self, other: "ModelParams", fn) -> "ModelParams":
        return ModelParams(**{name: fn(value, getattr(other, name)) for name, value in self.items()})

    def copy(self) -> "ModelParams":
        return self.map(np.copy)

    def zeros_like(self) -> "ModelParams":
        return self.map(np.zeros_like)

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        return param_shapes(**self.dims)

    def validate(self) -> None:
        for name, shape in self.expected_shapes().items():
            actual = getattr(self, name).shape
            if actual != shape:
                raise DimensionError(f"{name}: expected shape {shape}, got {actual}")


def param_shapes(f_in: int, h_g: int, h_l: int) -> dict[str, tuple[int, ...]]:
    return {
        "W0": (f_in, h_g),
        "b0": (h_g,),
        "W1": (h_g, h_g),
        "b1": (h_g,),
        "lstm_Wx": (h_g, 4 * h_l),
        "lstm_Wh": (h_l, 4 * h_l),
        "lstm_b": (4 * h_l,),
        "head_W": (h_l, 1),
        "head_b": (1,),
    }


def init_params(f_in: int, h_g: int, h_l: int, seed: int) -> ModelParams:
    """Seeded initialization.

    Glorot-uniform for the GCN and head weights, ``U(-1/sqrt(h_l), 1/sqrt(h_l))``
    for the LSTM matrices, zero biases except the forget-gate block (1.0).
    """
    if min(f_in, h_g, h_l) < 1:
        raise ValidationError(f"dims must be >= 1, got f_in={f_in}, h_g={h_g}, h_l={h_l}")
    rng = np.random.default_rng(seed)

    def glorot(fan_in, fan_out):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=(fan_in, fan_out))

    k = 1.0 / np.sqrt(h_l)
    W0 = glorot(f_in, h_g)
    W1 = glorot(h_g, h_g)
    lstm_Wx = rng.uniform(-k, k, size=(h_g, 4 * h_l))
    lstm_Wh = rng.uniform(-k, k, size=(h_l, 4 * h_l))
    head_W = glorot(h_l, 1)
    lstm_b = np.zeros(4 * h_l)
    lstm_b[h_l:2 * h_l] = 1.0
    return ModelParams(
        W0=W0, b0=np.zeros(h_g), W1=W1, b1=np.zeros(h_g),
        lstm_Wx=lstm_Wx, lstm_Wh=lstm_Wh, lstm_b=lstm_b,
        head_W=head_W, head_b=np.zeros(1),
    )


@dataclass
class LstmState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, rows: int, h_l: int) -> "LstmState":
        return cls(np.zeros((rows, h_l)), np.zeros((rows, h_l)))


# -------------------------------------------------------------------- GCN


@dataclass
class GcnCache:
    x: Tensor
    nx: Tensor   # N @ X
    z1: Tensor   # pre-activation, layer 1
    h1: Tensor
    nh1: Tensor  # N @ H1
    z2: Tensor   # pre-activation, layer 2


def gcn_forward(n: CSRMatrix, x: Tensor, p: ModelParams) -> tuple[Tensor, GcnCache]:
    """Two graph-convolution layers; ``x`` is ``(nodes, f_in)`` or ``(B, nodes, f_in)``."""
    if x.shape[-1] != p.W0.shape[0]:
        raise DimensionError(f"input features {x.shape[-1]} != W0 rows {p.W0.shape[0]}")
    nx = spmm(n, x)
    z1 = matmul(nx, p.W0) + p.b0
    h1 = relu(z1)
    nh1 = spmm(n, h1)
    z2 = matmul(nh1, p.W1) + p.b1
    return relu(z2), GcnCache(x, nx, z1, h1, nh1, z2)


def gcn_backward(n: CSRMatrix, cache: GcnCache, d_h2: Tensor, p: ModelParams,
                 grads: ModelParams, want_dx: bool = False) -> Tensor | None:
    """Accumulate GCN parameter gradients into ``grads``; optionally return dX."""
    d_z2 = relu_backward(cache.z2, d_h2)
    d_nh1, d_W1 = matmul_backward(cache.nh1, p.W1, d_z2)
    grads.W1 += d_W1
    grads.b1 += d_z2.reshape(-1, d_z2.shape[-1]).sum(axis=0)
    d_h1 = spmm(n, d_nh1)
    d_z1 = relu_backward(cache.z1, d_h1)
    d_nx, d_W0 = matmul_backward(cache.nx, p.W0, d_z1)
    grads.W0 += d_W0
    grads.b0 += d_z1.reshape(-1, d_z1.shape[-1]).sum(axis=0)
    if want_dx:
        return spmm(n, d_nx)
    return None


# ------------------------------------------------------------------- LSTM


@dataclass
class LstmStep:
    x: Tensor
    h_prev: Tensor
    c_prev: Tensor
    i: Tensor
    f: Tensor
    g: Tensor
    o: Tensor
    c: Tensor
    tanh_c: Tensor


@dataclass
class LstmCache:
    steps: list[LstmStep]
    h_l: int


def lstm_cell(x: Tensor, state: LstmState, p: ModelParams) -> tuple[LstmState, LstmStep]:
    H = p.lstm_Wh.shape[0]
    z = x @ p.lstm_Wx + state.h @ p.lstm_Wh + p.lstm_b
    i = sigmoid(z[:, :H])
    f = sigmoid(z[:, H:2 * H])
    g = tanh(z[:, 2 * H:3 * H])
    o = sigmoid(z[:, 3 * H:])
    c = f * state.c + i * g
    tanh_c = tanh(c)
    h = o * tanh_c
    return LstmState(h, c), LstmStep(x, state.h, state.c, i, f, g, o, c, tanh_c)


def lstm_forward(seq: list[Tensor], p: ModelParams,
                 s0: LstmState | None = None) -> tuple[Tensor, LstmCache]:
    """Run the LSTM over ``seq`` (each ``(rows, h_g)``) and return the last hidden state."""
    if len(seq) == 0:
        raise ValidationError("LSTM input sequence is empty")
    h_l = p.lstm_Wh.shape[0]
    state = s0 if s0 is not None else LstmState.zeros(seq[0].shape[0], h_l)
    steps = []
    for x in seq:
        if x.ndim != 2 or x.shape[1] != p.lstm_Wx.shape[0]:
            raise DimensionError(f"LSTM step input {x.shape} incompatible with Wx {p.lstm_Wx.shape}")
        state, step = lstm_cell(x, state, p)
        steps.append(step)
    return state.h, LstmCache(steps, h_l)


def lstm_backward(cache: LstmCache, d_h_last: Tensor, p: ModelParams,
                  grads: ModelParams) -> list[Tensor]:
    """Backpropagation through time; returns the gradient w.r.t. each input step."""
    d_h = d_h_last
    d_c = np.zeros_like(d_h_last)
    d_xs: list[Tensor] = [None] * len(cache.steps)
    for t in reversed(range(len(cache.steps))):
        s = cache.steps[t]
        d_o = d_h * s.tanh_c
        d_c = d_c + tanh_backward(s.tanh_c, d_h * s.o)
        d_i = d_c * s.g
        d_g = d_c * s.i
        d_f = d_c * s.c_prev
        d_z = np.concatenate([
            sigmoid_backward(s.i, d_i),
            sigmoid_backward(s.f, d_f),
            tanh_backward(s.g, d_g),
            sigmoid_backward(s.o, d_o),
        ], axis=1)
        grads.lstm_Wx += s.x.T @ d_z
        grads.lstm_Wh += s.h_prev.T @ d_z
        grads.lstm_b += d_z.sum(axis=0)
        d_xs[t] = d_z @ p.lstm_Wx.T
        d_h = d_z @ p.lstm_Wh.T
        d_c = d_c * s.f
    return d_xs


# ------------------------------------------------------------ full model


@dataclass
class ForwardCache:
    n: CSRMatrix
    params: ModelParams
    batch_shape: tuple[int, ...]
    gcn: list[GcnCache]
    lstm: LstmCache
    h_last: Tensor


def model_forward(n: CSRMatrix, window: Tensor, p: ModelParams) -> tuple[Tensor, ForwardCache]:
    """Predict one value per node from a window of ``N`` graph snapshots.

    ``window`` is ``(N, nodes, f_in)`` for a single sample or
    ``(B, N, nodes, f_in)`` for a batch; the prediction is ``(nodes,)`` or
    ``(B, nodes)`` respectively.
    """
    single = window.ndim == 3
    if single:
        window = window[None]
    if window.ndim != 4:
        raise DimensionError(f"window must be rank 3 or 4, got shape {window.shape}")
    B, N, nodes, _ = window.shape
    if N < 1:
        raise ValidationError("window has no timesteps")
    if nodes != n.num_nodes:
        raise DimensionError(f"window has {nodes} nodes, graph has {n.num_nodes}")
    gcn_caches = []
    seq = []
    for t in range(N):
        h2, gc = gcn_forward(n, window[:, t], p)
        gcn_caches.append(gc)
        seq.append(h2.reshape(B * nodes, -1))
    h_last, lc = lstm_forward(seq, p)
    y = (h_last @ p.head_W + p.head_b).reshape(B, nodes)
    batch_shape = (nodes,) if single else (B, nodes)
    cache = ForwardCache(n, p, batch_shape, gcn_caches, lc, h_last)
    return (y[0] if single else y), cache


def model_backward(cache: ForwardCache, d_ypred: Tensor, params: ModelParams | None = None,
                   want_dx: bool = False):
    """Exact gradients of a scalar loss given ``dL/dy_pred``.

    Returns a :class:`ModelParams` of gradients, or ``(grads, dX)`` when
    ``want_dx`` is set (``dX`` has the window's shape).
    """
    if params is not None and params is not cache.params:
        raise ValidationError("cache was produced with different parameters")
    d_ypred = np.asarray(d_ypred, dtype=np.float64)
    if d_ypred.shape != cache.batch_shape:
        raise ValidationError(
            f"d_ypred shape {d_ypred.shape} does not match forward output {cache.batch_shape}"
        )
    p = cache.params
    grads = p.zeros_like()
    dy = d_ypred.reshape(-1, 1)
    grads.head_W += cache.h_last.T @ dy
    grads.head_b += dy.sum(axis=0)
    d_h_last = dy @ p.head_W.T
    d_seq = lstm_backward(cache.lstm, d_h_last, p, grads)
    B = 1 if len(cache.batch_shape) == 1 else cache.batch_shape[0]
    nodes = cache.n.num_nodes
    d_x = []
    for t, gc in enumerate(cache.gcn):
        d_h2 = d_seq[t].reshape(B, nodes, -1)
        d_x.append(gcn_backward(cache.n, gc, d_h2, p, grads, want_dx))
    if not want_dx:
        return grads
    dX = np.stack(d_x, axis=1)
    return grads, (dX[0] if len(cache.batch_shape) == 1 else dX)
