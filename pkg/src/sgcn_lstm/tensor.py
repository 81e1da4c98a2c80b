"""Dense float64 primitives and their derivative rules.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. Every function
here returns a fresh array and leaves its arguments untouched, and each
forward primitive has a matching ``*_backward`` that maps an upstream
gradient to the gradient(s) of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DimensionError, NonFiniteError

Tensor = np.ndarray

DTYPE = np.float64


def as_tensor(x) -> Tensor:
    """Copy ``x`` into a new float64 array with rank between 1 and 3."""
    arr = np.array(x, dtype=DTYPE)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim > 3:
        raise DimensionError(f"tensor rank must be 1-3, got shape {arr.shape}")
    return arr


def check_finite(x: Tensor, where: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise NonFiniteError(f"{where}: {bad} non-finite value(s)")
    return x


@dataclass
class GradPair:
    """A value together with the accumulated gradient of a scalar loss."""

    value: Tensor
    grad: Tensor = None

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value, dtype=DTYPE)
        elif self.grad.shape != self.value.shape:
            raise DimensionError(
                f"grad shape {self.grad.shape} != value shape {self.value.shape}"
            )

    def accumulate(self, contribution: Tensor) -> None:
        if contribution.shape != self.value.shape:
            raise DimensionError(
                f"cannot accumulate {contribution.shape} into {self.value.shape}"
            )
        self.grad = self.grad + contribution


# ---------------------------------------------------------------- matmul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product ``a @ b``.

    ``a`` may be rank 3 (batch, rows, cols), in which case a rank-2 ``b`` is
    shared across the batch.
    """
    if a.ndim not in (2, 3) or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return a @ b


def matmul_backward(a: Tensor, b: Tensor, d_out: Tensor) -> tuple[Tensor, Tensor]:
    """Return ``(dA, dB)`` for ``C = A @ B`` given ``dC``.

    ``dA = dC @ B.T`` and ``dB = A.T @ dC``; for a batched ``a`` the weight
    gradient is summed over the batch.
    """
    d_a = d_out @ b.T
    if a.ndim == 3:
        d_b = np.einsum("bij,bik->jk", a, d_out)
    else:
        d_b = a.T @ d_out
    return d_a, d_b


# ---------------------------------------------------------- nonlinearities


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0.0)


def relu_backward(x: Tensor, d_out: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    return np.where(x > 0.0, d_out, 0.0)


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, evaluated without overflow for large ``|x|``."""
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def tanh(x: Tensor) -> Tensor:
    return np.tanh(x)


def sigmoid_backward(y: Tensor, d_out: Tensor) -> Tensor:
    """Gradient through a sigmoid given its *output* ``y``."""
    return d_out * y * (1.0 - y)


def tanh_backward(y: Tensor, d_out: Tensor) -> Tensor:
    """Gradient through tanh given its *output* ``y``."""
    return d_out * (1.0 - y * y)


def sigmoid_tanh(x: Tensor, kind: str) -> Tensor:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    raise ValueError(f"unknown activation {kind!r}")


def sigmoid_tanh_backward(y: Tensor, d_out: Tensor, kind: str) -> Tensor:
    if kind == "sigmoid":
        return sigmoid_backward(y, d_out)
    if kind == "tanh":
        return tanh_backward(y, d_out)
    raise ValueError(f"unknown activation {kind!r}")


# ------------------------------------------------------ gradient checking


def numerical_gradient(
    f: Callable[[Tensor], float], x: Tensor, step: float = 1e-6
) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=DTYPE)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = float(f(x))
        flat[i] = orig - step
        f_minus = float(f(x))
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NonFiniteError(f"f is not finite around coordinate {i}")
        g[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def finite_difference_check(
    f: Callable[[Tensor], float],
    x: Tensor,
    analytic_grad: Tensor,
    step: float = 1e-6,
) -> float:
    """Largest relative disagreement between ``analytic_grad`` and central differences.

    Each coordinate's error is ``|numeric - analytic| / max(1, |analytic|, |numeric|)``.
    """
    analytic_grad = np.asarray(analytic_grad, dtype=DTYPE)
    if analytic_grad.shape != np.shape(x):
        raise DimensionError(
            f"analytic grad shape {analytic_grad.shape} != x shape {np.shape(x)}"
        )
    numeric = numerical_gradient(f, x, step)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic_grad), np.abs(numeric)))
    if numeric.size == 0:
        return 0.0
    return float(np.max(np.abs(numeric - analytic_grad) / denom))
