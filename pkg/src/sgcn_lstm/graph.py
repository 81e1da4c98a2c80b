"""Road graph construction, symmetric normalization and sparse-dense products."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable

import numpy as np

from .errors import DimensionError, GraphIndexError, ValidationError
from .tensor import Tensor

SYMMETRY_TOL = 1e-12


@dataclass(frozen=True)
class EdgeList:
    """Weighted edges over nodes ``0 .. num_nodes-1``."""

    num_nodes: int
    edges: list[tuple[int, int, float]] = field(default_factory=list)

    @classmethod
    def from_arrays(cls, num_nodes: int, src: Iterable, dst: Iterable, weight: Iterable):
        return cls(num_nodes, [(int(s), int(d), float(w)) for s, d, w in zip(src, dst, weight)])

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if not self.edges:
            return (np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0))
        src, dst, w = zip(*self.edges)
        return (np.asarray(src, dtype=np.int64), np.asarray(dst, dtype=np.int64),
                np.asarray(w, dtype=np.float64))

    def validate(self) -> None:
        if self.num_nodes < 1:
            raise ValidationError(f"num_nodes must be >= 1, got {self.num_nodes}")
        src, dst, w = self.arrays()
        for name, ids in (("src", src), ("dst", dst)):
            bad = np.flatnonzero((ids < 0) | (ids >= self.num_nodes))
            if bad.size:
                k = int(bad[0])
                raise GraphIndexError(
                    f"edge {k}: {name}={int(ids[k])} outside [0, {self.num_nodes})"
                )
        bad = np.flatnonzero(~np.isfinite(w) | (w < 0))
        if bad.size:
            k = int(bad[0])
            raise ValidationError(f"edge {k}: weight {w[k]} must be finite and >= 0")


@dataclass(frozen=True, eq=False)
class CSRMatrix:
    """Square matrix in compressed sparse row form."""

    num_nodes: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    @cached_property
    def row_indices(self) -> np.ndarray:
        return np.repeat(np.arange(self.num_nodes), np.diff(self.row_offsets))

    @cached_property
    def slots(self) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
        """``(rows, cols, values)`` of the k-th stored entry of every row long enough, for each k."""
        lengths = np.diff(self.row_offsets)
        out = []
        for k in range(int(lengths.max(initial=0))):
            rows = np.flatnonzero(lengths > k)
            pos = self.row_offsets[rows] + k
            out.append((rows, self.col_indices[pos], self.values[pos]))
        return out

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.num_nodes, self.num_nodes))
        out[self.row_indices, self.col_indices] = self.values
        return out

    def transpose_values(self) -> np.ndarray:
        """Values of the transposed matrix laid out on this matrix's sparsity pattern.

        Entries with no mirror position are returned as 0.
        """
        out = np.zeros_like(self.values)
        if self.nnz == 0:
            return out
        n = self.num_nodes
        keys = self.row_indices * n + self.col_indices  # sorted by construction
        mirror = self.col_indices * n + self.row_indices
        pos = np.minimum(np.searchsorted(keys, mirror), keys.size - 1)
        hit = keys[pos] == mirror
        out[hit] = self.values[pos[hit]]
        return out

    def is_symmetric(self, tol: float = SYMMETRY_TOL) -> bool:
        mirror = self.transpose_values()
        scale = np.maximum(1.0, np.maximum(np.abs(self.values), np.abs(mirror)))
        return bool(np.all(np.abs(self.values - mirror) <= tol * scale))


class SparseAdjacency(CSRMatrix):
    """Normalized adjacency ``D^-1/2 (A + I) D^-1/2`` stored as CSR."""


def _csr_from_coo(n: int, rows: np.ndarray, cols: np.ndarray, vals: np.ndarray) -> CSRMatrix:
    order = np.lexsort((cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.add.at(offsets, rows + 1, 1)
    return CSRMatrix(n, np.cumsum(offsets), cols.astype(np.int64), vals.astype(np.float64))


def build_adjacency(e: EdgeList, symmetrize: bool = True) -> CSRMatrix:
    """Raw weighted adjacency from an edge list.

    Repeated ``(src, dst)`` pairs are summed. With ``symmetrize`` each entry
    becomes ``max(w_ij, w_ji)`` so the result is undirected. Zero-weight
    entries are dropped from the sparsity pattern.
    """
    e.validate()
    n = e.num_nodes
    src, dst, w = e.arrays()
    keys, inverse = np.unique(src * n + dst, return_inverse=True)
    summed = np.bincount(inverse, weights=w, minlength=keys.size)
    if symmetrize and keys.size:
        mirrored = (keys % n) * n + keys // n
        all_keys = np.union1d(keys, mirrored)
        fwd = np.zeros(all_keys.size)
        fwd[np.searchsorted(all_keys, keys)] = summed
        bwd = np.zeros(all_keys.size)
        bwd[np.searchsorted(all_keys, mirrored)] = summed
        keys, summed = all_keys, np.maximum(fwd, bwd)
    keep = summed > 0
    keys, summed = keys[keep], summed[keep]
    return _csr_from_coo(n, keys // n, keys % n, summed)


def normalize_adjacency(raw: CSRMatrix) -> SparseAdjacency:
    """Add self-loops and apply symmetric degree normalization."""
    if not raw.is_symmetric():
        raise ValidationError("adjacency must be symmetric before normalization")
    if raw.nnz and np.any(raw.values < 0):
        raise ValidationError("adjacency must be non-negative")
    n = raw.num_nodes
    rows = np.concatenate([raw.row_indices, np.arange(n)])
    cols = np.concatenate([raw.col_indices, np.arange(n)])
    # average each entry with its mirror so the pair is bitwise equal
    sym = 0.5 * (raw.values + raw.transpose_values()) if raw.nnz else raw.values
    vals = np.concatenate([sym, np.ones(n)])
    keys, inverse = np.unique(rows * n + cols, return_inverse=True)
    a_hat = np.bincount(inverse, weights=vals, minlength=keys.size)
    r, c = keys // n, keys % n
    degree = np.bincount(r, weights=a_hat, minlength=n)
    # d_i * d_j is commutative, so (i, j) and (j, i) come out identical
    norm = a_hat / np.sqrt(degree[r] * degree[c])
    csr = _csr_from_coo(n, r, c, norm)
    return SparseAdjacency(n, csr.row_offsets, csr.col_indices, csr.values)


def spmm(n: CSRMatrix, x: Tensor) -> Tensor:
    """Sparse-dense product ``N @ x``.

    ``x`` is ``(num_nodes, f)`` or a batch ``(B, num_nodes, f)`` sharing ``N``.
    Rows are reduced in column order, so the result is deterministic.
    For a symmetric ``N`` the backward pass is ``spmm(n, dy)``.
    """
    if x.ndim not in (2, 3) or x.shape[-2] != n.num_nodes:
        raise DimensionError(
            f"spmm shape mismatch: ({n.num_nodes}, {n.num_nodes}) @ {x.shape}"
        )
    # node axis first; row r accumulates its k-th entry on pass k
    xt = np.moveaxis(x, -2, 0)
    out = np.zeros(xt.shape, dtype=np.float64)
    bcast = (1,) * (xt.ndim - 1)
    for rows, cols, vals in n.slots:
        out[rows] += xt[cols] * vals.reshape((-1,) + bcast)
    return np.ascontiguousarray(np.moveaxis(out, 0, -2))


def spectral_radius(n: CSRMatrix, iters: int = 500, seed: int = 0) -> float:
    """Dominant eigenvalue magnitude by power iteration (desk-scale check)."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((n.num_nodes, 1))
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = spmm(n, v)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        lam = float(norm)
        v = w / norm
    return lam
