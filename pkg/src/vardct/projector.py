"""Fan-beam geometry, ray-traced system matrix and projection primitives.

The system matrix stores, for every source-detector ray ``i`` and pixel ``j``,
the intersection length of the ray with the pixel (in mm) multiplied by a
reference attenuation ``mu_ref``, so that image values are dimensionless.

Pixel indexing is lexicographic, ``j = row * nx + col``. Row 0 is the top of
the image (largest y), column 0 is the left edge (smallest x).
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

__all__ = [
    "FanBeamGeometry",
    "ImageGrid",
    "RaySet",
    "SystemMatrix",
    "enumerate_rays",
    "build_system_matrix",
    "forward_project",
    "forward_project_sq",
    "back_project",
    "back_project_sq",
    "save_system_matrix",
    "load_system_matrix",
]

MATRIX_MAGIC = b"VARDSMX\x00"
MATRIX_VERSION = 1
_HEADER = struct.Struct("<8sQqqdd")


@dataclass(frozen=True)
class FanBeamGeometry:
    """Flat-panel fan-beam scan.

    View angle 0 places the source on the +x axis; views rotate
    counterclockwise. Detector element ``k`` sits at signed offset
    ``(k - (n_detectors - 1) / 2) * detector_pitch + detector_offset`` along
    the panel, measured in the counterclockwise direction.
    """

    source_to_isocenter: float
    source_to_detector: float
    detector_pitch: float
    n_detectors: int
    n_views: int
    view_angles: tuple[float, ...] | None = None
    detector_offset: float = 0.0

    def __post_init__(self):
        if not self.source_to_detector > self.source_to_isocenter > 0:
            raise ValueError("need source_to_detector > source_to_isocenter > 0")
        if self.detector_pitch <= 0:
            raise ValueError("detector_pitch must be positive")
        if self.n_detectors < 1 or self.n_views < 1:
            raise ValueError("n_detectors and n_views must be at least 1")
        if self.view_angles is None:
            angles = 2.0 * np.pi * np.arange(self.n_views) / self.n_views
            object.__setattr__(self, "view_angles", tuple(float(a) for a in angles))
        else:
            angles = np.asarray(self.view_angles, dtype=float)
            object.__setattr__(self, "view_angles", tuple(float(a) for a in angles))
            if angles.size != self.n_views:
                raise ValueError("view_angles length must equal n_views")
            if np.any(np.diff(angles) <= 0) or angles[0] < 0 or angles[-1] >= 2 * np.pi:
                raise ValueError("view_angles must be strictly increasing within [0, 2*pi)")

    @property
    def n_rays(self) -> int:
        return self.n_views * self.n_detectors

    def detector_positions(self) -> np.ndarray:
        k = np.arange(self.n_detectors, dtype=float)
        return (k - (self.n_detectors - 1) / 2.0) * self.detector_pitch + self.detector_offset

    def subsample_views(self, factor: int) -> "FanBeamGeometry":
        """Keep every ``factor``-th view."""
        if factor < 1:
            raise ValueError("subsampling factor must be at least 1")
        angles = self.view_angles[::factor]
        return FanBeamGeometry(
            self.source_to_isocenter,
            self.source_to_detector,
            self.detector_pitch,
            self.n_detectors,
            len(angles),
            tuple(angles),
            self.detector_offset,
        )

    @classmethod
    def covering(cls, grid: "ImageGrid", n_views: int, n_detectors: int,
                 source_to_isocenter: float = 400.0, source_to_detector: float = 800.0,
                 detector_offset: float = 0.2, margin: float = 1.02) -> "FanBeamGeometry":
        """Geometry whose fan just covers the circle circumscribing ``grid``."""
        radius = margin * 0.5 * np.hypot(grid.nx, grid.ny) * grid.pixel_size
        radius += np.hypot(*grid.origin)
        if radius >= source_to_isocenter:
            raise ValueError("grid does not fit inside the source orbit")
        half_fan = np.arcsin(radius / source_to_isocenter)
        width = 2.0 * source_to_detector * np.tan(half_fan)
        return cls(source_to_isocenter, source_to_detector, width / n_detectors,
                   n_detectors, n_views, None, detector_offset)

    def to_dict(self) -> dict:
        return {
            "source_to_isocenter": self.source_to_isocenter,
            "source_to_detector": self.source_to_detector,
            "detector_pitch": self.detector_pitch,
            "n_detectors": self.n_detectors,
            "n_views": self.n_views,
            "view_angles": list(self.view_angles),
            "detector_offset": self.detector_offset,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FanBeamGeometry":
        angles = d.get("view_angles")
        return cls(d["source_to_isocenter"], d["source_to_detector"], d["detector_pitch"],
                   d["n_detectors"], d["n_views"],
                   tuple(angles) if angles is not None else None,
                   d.get("detector_offset", 0.0))


@dataclass(frozen=True)
class ImageGrid:
    """Square-pixel lattice centred at ``origin`` (mm)."""

    nx: int
    ny: int
    pixel_size: float
    origin: tuple[float, float] = (0.0, 0.0)
    mu_ref: float = 0.02

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError("grid dimensions must be positive")
        if self.pixel_size <= 0 or self.mu_ref <= 0:
            raise ValueError("pixel_size and mu_ref must be positive")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def p(self) -> int:
        return self.nx * self.ny

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def x_min(self) -> float:
        return self.origin[0] - 0.5 * self.nx * self.pixel_size

    @property
    def y_max(self) -> float:
        return self.origin[1] + 0.5 * self.ny * self.pixel_size

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Return flattened (x, y) coordinates of the pixel centres."""
        xs = self.x_min + (np.arange(self.nx) + 0.5) * self.pixel_size
        ys = self.y_max - (np.arange(self.ny) + 0.5) * self.pixel_size
        X, Y = np.meshgrid(xs, ys)
        return X.ravel(), Y.ravel()

    def index(self, row: int, col: int) -> int:
        return row * self.nx + col

    def to_dict(self) -> dict:
        return {"nx": self.nx, "ny": self.ny, "pixel_size": self.pixel_size,
                "origin": list(self.origin), "mu_ref": self.mu_ref}

    @classmethod
    def from_dict(cls, d: dict) -> "ImageGrid":
        return cls(d["nx"], d["ny"], d["pixel_size"], tuple(d.get("origin", (0.0, 0.0))),
                   d.get("mu_ref", 0.02))


@dataclass(frozen=True)
class RaySet:
    """Ray segments stored as arrays; ray ``i`` runs from ``sources[i]`` to ``targets[i]``."""

    sources: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return self.sources.shape[0]

    def __getitem__(self, i):
        return self.sources[i], self.targets[i]


def enumerate_rays(geom: FanBeamGeometry) -> RaySet:
    """Source to detector-centre segments, view-major then detector order."""
    theta = np.asarray(geom.view_angles)
    c, s = np.cos(theta), np.sin(theta)
    src = geom.source_to_isocenter * np.stack([c, s], axis=1)
    centre = src - geom.source_to_detector * np.stack([c, s], axis=1)
    u = np.stack([-s, c], axis=1)
    offsets = geom.detector_positions()
    targets = centre[:, None, :] + offsets[None, :, None] * u[:, None, :]
    sources = np.broadcast_to(src[:, None, :], targets.shape)
    return RaySet(np.ascontiguousarray(sources.reshape(-1, 2)),
                  np.ascontiguousarray(targets.reshape(-1, 2)))


def _trace_chunk(src, dst, grid: ImageGrid):
    """Siddon traversal for a block of rays.

    Returns (local ray index, pixel index, length in mm) for all crossings of
    positive length, ordered by ray then by position along the ray.
    """
    nx, ny, ps = grid.nx, grid.ny, grid.pixel_size
    x0, y1 = grid.x_min, grid.y_max
    x1, y0 = x0 + nx * ps, y1 - ny * ps
    d = dst - src
    length = np.hypot(d[:, 0], d[:, 1])
    xp = x0 + ps * np.arange(nx + 1)
    yp = y0 + ps * np.arange(ny + 1)

    with np.errstate(divide="ignore", invalid="ignore"):
        ax = (xp[None, :] - src[:, :1]) / d[:, :1]
        ay = (yp[None, :] - src[:, 1:]) / d[:, 1:]
    flat_x = d[:, 0] == 0
    flat_y = d[:, 1] == 0
    ax[flat_x] = np.nan
    ay[flat_y] = np.nan

    inside_x = (src[:, 0] > x0) & (src[:, 0] < x1)
    inside_y = (src[:, 1] > y0) & (src[:, 1] < y1)
    lo_x = np.where(flat_x, np.where(inside_x, -np.inf, np.inf), np.minimum(ax[:, 0], ax[:, -1]))
    hi_x = np.where(flat_x, np.where(inside_x, np.inf, -np.inf), np.maximum(ax[:, 0], ax[:, -1]))
    lo_y = np.where(flat_y, np.where(inside_y, -np.inf, np.inf), np.minimum(ay[:, 0], ay[:, -1]))
    hi_y = np.where(flat_y, np.where(inside_y, np.inf, -np.inf), np.maximum(ay[:, 0], ay[:, -1]))
    a_min = np.maximum(np.maximum(lo_x, lo_y), 0.0)
    a_max = np.minimum(np.minimum(hi_x, hi_y), 1.0)
    hit = a_max > a_min
    if not np.any(hit):
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, np.zeros(0)

    idx = np.flatnonzero(hit)
    a_min, a_max = a_min[idx], a_max[idx]
    alphas = np.concatenate([ax[idx], ay[idx]], axis=1)
    alphas = np.where(np.isnan(alphas), a_min[:, None], alphas)
    alphas = np.clip(alphas, a_min[:, None], a_max[:, None])
    alphas = np.concatenate([a_min[:, None], alphas, a_max[:, None]], axis=1)
    alphas.sort(axis=1)

    seg = np.diff(alphas, axis=1) * length[idx, None]
    mid = 0.5 * (alphas[:, 1:] + alphas[:, :-1])
    keep = seg > 0
    rr, kk = np.nonzero(keep)
    a_mid = mid[rr, kk]
    ray = idx[rr]
    px = src[ray, 0] + a_mid * d[ray, 0]
    py = src[ray, 1] + a_mid * d[ray, 1]
    col = np.clip(np.floor((px - x0) / ps).astype(np.int64), 0, nx - 1)
    row = np.clip(np.floor((y1 - py) / ps).astype(np.int64), 0, ny - 1)
    return ray.astype(np.int64), row * nx + col, seg[rr, kk]


@dataclass
class SystemMatrix:
    """Sparse ray-pixel matrix with its elementwise square and row-sum constants."""

    matrix: sp.csr_matrix
    squared: sp.csr_matrix = None
    Z1: float = None
    Z_mle: float = None
    col_support: np.ndarray = None
    threads: int = 1
    _t: sp.csr_matrix = field(default=None, repr=False)
    _t_sq: sp.csr_matrix = field(default=None, repr=False)

    def __post_init__(self):
        A = sp.csr_matrix(self.matrix, dtype=float)
        A.sort_indices()
        if A.nnz and A.data.min() < 0:
            raise ValueError("system matrix entries must be nonnegative")
        self.matrix = A
        if self.squared is None:
            self.squared = sp.csr_matrix((A.data * A.data, A.indices.copy(), A.indptr.copy()),
                                         shape=A.shape)
        rs = np.asarray(A.sum(axis=1)).ravel()
        rs_sq = np.asarray(self.squared.sum(axis=1)).ravel()
        if self.Z1 is None:
            self.Z1 = float(np.max(rs + 0.5 * rs_sq)) if A.shape[0] else 0.0
        if self.Z_mle is None:
            self.Z_mle = float(np.max(rs)) if A.shape[0] else 0.0
        if self.col_support is None:
            self.col_support = np.bincount(A.indices, minlength=A.shape[1]) > 0
        self._t = A.T.tocsr()
        self._t_sq = self.squared.T.tocsr()

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def p(self) -> int:
        return self.matrix.shape[1]

    def _blocks(self):
        bounds = np.linspace(0, self.n, self.threads + 1).astype(int)
        return list(zip(bounds[:-1], bounds[1:]))

    def _forward(self, M, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.p,):
            raise ValueError(f"expected vector of length {self.p}, got shape {x.shape}")
        if self.threads <= 1:
            return M @ x
        out = np.empty(self.n)

        def work(b):
            out[b[0]:b[1]] = M[b[0]:b[1]] @ x

        with ThreadPoolExecutor(self.threads) as pool:
            list(pool.map(work, self._blocks()))
        return out

    def _back(self, M, Mt, w):
        w = np.asarray(w, dtype=float)
        if w.shape != (self.n,):
            raise ValueError(f"expected vector of length {self.n}, got shape {w.shape}")
        if self.threads <= 1:
            return Mt @ w
        blocks = self._blocks()
        with ThreadPoolExecutor(self.threads) as pool:
            parts = list(pool.map(lambda b: M[b[0]:b[1]].T @ w[b[0]:b[1]], blocks))
        # fixed merge order keeps results deterministic for a given thread count
        out = np.zeros(self.p)
        for part in parts:
            out += part
        return out

    def forward(self, x):
        return self._forward(self.matrix, x)

    def forward_sq(self, v):
        return self._forward(self.squared, v)

    def back(self, w):
        return self._back(self.matrix, self._t, w)

    def back_sq(self, w):
        return self._back(self.squared, self._t_sq, w)

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()


def build_system_matrix(geom: FanBeamGeometry, grid: ImageGrid, chunk_elems: int = 4_000_000,
                        threads: int = 1) -> SystemMatrix:
    """Exact chord-length system matrix scaled by ``grid.mu_ref``."""
    rays = enumerate_rays(geom)
    n = len(rays)
    chunk = max(1, chunk_elems // (grid.nx + grid.ny + 4))
    rows, cols, vals = [], [], []
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        r, c, v = _trace_chunk(rays.sources[start:stop], rays.targets[start:stop], grid)
        rows.append(r + start)
        cols.append(c)
        vals.append(v)
    rows = np.concatenate(rows)
    if rows.size == 0:
        raise ValueError("no ray intersects the image grid")
    cols = np.concatenate(cols)
    vals = np.concatenate(vals) * grid.mu_ref
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=n), out=indptr[1:])
    A = sp.csr_matrix((vals, cols, indptr), shape=(n, grid.p))
    return SystemMatrix(A, threads=threads)


def forward_project(A: SystemMatrix, x) -> np.ndarray:
    """Mean-type projection ``A x``."""
    return A.forward(x)


def forward_project_sq(A: SystemMatrix, v) -> np.ndarray:
    """Variance-type projection ``(A*A) v``."""
    return A.forward_sq(v)


def back_project(A: SystemMatrix, w) -> np.ndarray:
    return A.back(w)


def back_project_sq(A: SystemMatrix, w) -> np.ndarray:
    return A.back_sq(w)


def save_system_matrix(A: SystemMatrix, path) -> None:
    M = A.matrix
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MATRIX_MAGIC, MATRIX_VERSION, A.n, A.p, A.Z1, A.Z_mle))
        fh.write(M.indptr.astype("<i8").tobytes())
        fh.write(M.indices.astype("<i8").tobytes())
        fh.write(M.data.astype("<f8").tobytes())


def load_system_matrix(path) -> SystemMatrix:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, n, p, z1, zmle = _HEADER.unpack_from(raw, 0)
    if magic != MATRIX_MAGIC or version != MATRIX_VERSION:
        raise ValueError("not a system matrix file")
    off = _HEADER.size
    indptr = np.frombuffer(raw, "<i8", n + 1, off)
    off += 8 * (n + 1)
    nnz = int(indptr[-1])
    indices = np.frombuffer(raw, "<i8", nnz, off)
    off += 8 * nnz
    data = np.frombuffer(raw, "<f8", nnz, off)
    M = sp.csr_matrix((data.copy(), indices.copy(), indptr.copy()), shape=(n, p))
    return SystemMatrix(M, Z1=z1, Z_mle=zmle)
