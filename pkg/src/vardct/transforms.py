"""Sparsifying transforms for the image prior.

Three kinds are provided. ``identity`` is the pixel basis. ``complete`` maps a
pixel to its difference from the neighbour average, with implicit zero
neighbours outside the grid. ``overcomplete`` stacks horizontal and vertical
first differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .projector import ImageGrid

__all__ = [
    "SparsifyingTransform",
    "build_identity",
    "build_complete",
    "build_overcomplete",
    "apply",
    "apply_sq",
    "weighted_adjoint",
    "weighted_adjoint_abs",
    "weighted_adjoint_sq",
]

# neighbour offsets as (d_row, d_col)
NEIGHBORHOODS = {
    "2-conn": ((0, 1), (1, 0)),
    "2-conn(h+v)": ((0, 1), (1, 0)),
    "4-conn": ((0, 1), (1, 0), (0, -1), (-1, 0)),
}


@dataclass
class SparsifyingTransform:
    """Sparse K x p matrix Psi with cached squared and absolute variants.

    ``slots`` maps each of the K rows to a hyperparameter slot. By default
    every row owns its slot; with ``tied`` over-complete transforms the
    horizontal and vertical rows of a pixel share one.
    """

    matrix: sp.csr_matrix
    kind: str
    slots: np.ndarray = None
    n_slots: int = None
    Z2: float = field(init=False)

    def __post_init__(self):
        M = sp.csr_matrix(self.matrix, dtype=float)
        M.sort_indices()
        self.matrix = M
        self.squared = sp.csr_matrix((M.data ** 2, M.indices, M.indptr), shape=M.shape)
        self.absolute = sp.csr_matrix((np.abs(M.data), M.indices, M.indptr), shape=M.shape)
        self._t = M.T.tocsr()
        self._t_sq = self.squared.T.tocsr()
        self._t_abs = self.absolute.T.tocsr()
        row_abs = np.asarray(self.absolute.sum(axis=1)).ravel()
        self.Z2 = float(row_abs.max()) if row_abs.size else 0.0
        if self.slots is None:
            self.slots = np.arange(M.shape[0])
        self.slots = np.asarray(self.slots, dtype=np.int64)
        if self.n_slots is None:
            self.n_slots = int(self.slots.max()) + 1 if self.slots.size else 0

    @property
    def K(self) -> int:
        return self.matrix.shape[0]

    @property
    def p(self) -> int:
        return self.matrix.shape[1]

    @property
    def tied(self) -> bool:
        return self.n_slots != self.K

    def expand(self, gamma):
        """Per-row values of a slot vector."""
        gamma = np.asarray(gamma, dtype=float)
        return gamma if not self.tied else gamma[self.slots]

    def reduce(self, rows):
        """Sum per-row values into their slots."""
        rows = np.asarray(rows, dtype=float)
        return rows if not self.tied else np.bincount(self.slots, rows, self.n_slots)

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()


def _check(vec, size):
    vec = np.asarray(vec, dtype=float)
    if vec.shape != (size,):
        raise ValueError(f"expected vector of length {size}, got shape {vec.shape}")
    return vec


def apply(T: SparsifyingTransform, x):
    return T.matrix @ _check(x, T.p)


def apply_sq(T: SparsifyingTransform, v):
    return T.squared @ _check(v, T.p)


def weighted_adjoint(T: SparsifyingTransform, w):
    return T._t @ _check(w, T.K)


def weighted_adjoint_abs(T: SparsifyingTransform, w):
    return T._t_abs @ _check(w, T.K)


def weighted_adjoint_sq(T: SparsifyingTransform, w):
    return T._t_sq @ _check(w, T.K)


def build_identity(grid: ImageGrid) -> SparsifyingTransform:
    return SparsifyingTransform(sp.identity(grid.p, format="csr"), "identity")


def build_complete(grid: ImageGrid, neighborhood: str = "2-conn") -> SparsifyingTransform:
    """Pixel minus the average of its ``N`` neighbours.

    Out-of-grid neighbours still count toward ``N`` but contribute zero, so
    every row carries the same weights.
    """
    offsets = NEIGHBORHOODS[neighborhood]
    N = len(offsets)
    ny, nx = grid.shape
    r, c = np.divmod(np.arange(grid.p), nx)
    rows, cols, vals = [np.arange(grid.p)], [np.arange(grid.p)], [np.ones(grid.p)]
    for dr, dc in offsets:
        rr, cc = r + dr, c + dc
        ok = (rr >= 0) & (rr < ny) & (cc >= 0) & (cc < nx)
        rows.append(np.flatnonzero(ok))
        cols.append(rr[ok] * nx + cc[ok])
        vals.append(np.full(ok.sum(), -1.0 / N))
    M = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(grid.p, grid.p))
    return SparsifyingTransform(M, "complete")


def _difference(grid: ImageGrid, dr: int, dc: int, boundary: str):
    ny, nx = grid.shape
    j = np.arange(grid.p)
    r, c = np.divmod(j, nx)
    rr, cc = r + dr, c + dc
    ok = (rr < ny) & (cc < nx)
    if boundary == "dirichlet":
        keep = j
    elif boundary == "free":
        keep = j[ok]
    else:
        raise ValueError(f"unknown boundary {boundary!r}")
    k = np.arange(keep.size)
    inner = ok[keep]
    rows = np.concatenate([k, k[inner]])
    cols = np.concatenate([keep, rr[keep][inner] * nx + cc[keep][inner]])
    vals = np.concatenate([np.ones(keep.size), -np.ones(inner.sum())])
    return sp.csr_matrix((vals, (rows, cols)), shape=(keep.size, grid.p)), keep


def build_overcomplete(grid: ImageGrid, boundary: str = "dirichlet",
                       tied: bool = False) -> SparsifyingTransform:
    """Stacked horizontal (right neighbour) and vertical (lower neighbour) differences.

    With ``tied=True`` the two rows of each pixel share one hyperparameter
    slot (requires the Dirichlet boundary so both rows exist).
    """
    if tied and boundary != "dirichlet":
        raise ValueError("tied slots require the dirichlet boundary")
    Mh, kh = _difference(grid, 0, 1, boundary)
    Mv, kv = _difference(grid, 1, 0, boundary)
    M = sp.vstack([Mh, Mv]).tocsr()
    if tied:
        return SparsifyingTransform(M, "overcomplete", np.concatenate([kh, kv]), grid.p)
    return SparsifyingTransform(M, "overcomplete")


def build_transform(grid: ImageGrid, kind: str, **kwargs) -> SparsifyingTransform:
    if kind == "identity":
        return build_identity(grid)
    if kind == "complete":
        return build_complete(grid, kwargs.get("neighborhood", "2-conn"))
    if kind == "overcomplete":
        return build_overcomplete(grid, kwargs.get("boundary", "dirichlet"),
                                  kwargs.get("tied", False))
    raise ValueError(f"unknown transform kind {kind!r}")
