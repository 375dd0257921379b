"""Phantoms, Poisson transmission measurements and post-log data."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .projector import ImageGrid, SystemMatrix

__all__ = [
    "Ellipse",
    "Phantom",
    "Sinogram",
    "shepp_logan",
    "shepp_logan_phantom",
    "letters",
    "sample_sinogram",
    "noiseless_sinogram",
    "post_log",
]

# (value, semi-axis x, semi-axis y, centre x, centre y, rotation in degrees)
# in units of the image half-width
_TOFT = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
]
_CLASSIC_VALUES = [2.0, -0.98, -0.02, -0.02, 0.01, 0.01, 0.01, 0.01, 0.01, 0.01]


@dataclass(frozen=True)
class Ellipse:
    center: tuple[float, float]
    semi_axes: tuple[float, float]
    rotation: float
    value: float

    def __post_init__(self):
        if min(self.semi_axes) <= 0:
            raise ValueError("semi-axes must be positive")

    def contains(self, x, y):
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        dx, dy = x - self.center[0], y - self.center[1]
        u = (c * dx + s * dy) / self.semi_axes[0]
        w = (-s * dx + c * dy) / self.semi_axes[1]
        return u * u + w * w <= 1.0


@dataclass(frozen=True)
class Phantom:
    ellipses: tuple[Ellipse, ...]

    def rasterize(self, x, y, clip=(0.0, 1.0)):
        """Sum of ellipse values at the given points."""
        out = np.zeros(np.shape(x))
        for e in self.ellipses:
            out += e.value * e.contains(x, y)
        return np.clip(out, *clip) if clip is not None else out


def shepp_logan_phantom(half_width: float, variant: str = "modified") -> Phantom:
    """Shepp-Logan ellipses scaled so the unit square maps to ``half_width`` mm."""
    if variant not in ("modified", "classic"):
        raise ValueError(f"unknown variant {variant!r}")
    ellipses = []
    for k, (val, a, b, x0, y0, deg) in enumerate(_TOFT):
        if variant == "classic":
            val = _CLASSIC_VALUES[k]
        ellipses.append(Ellipse((x0 * half_width, y0 * half_width),
                                (a * half_width, b * half_width), np.deg2rad(deg), val))
    return Phantom(tuple(ellipses))


def shepp_logan(grid: ImageGrid, variant: str = "modified") -> np.ndarray:
    """Rasterize by pixel-centre containment; values clipped to [0, 1] for the modified variant."""
    half = 0.5 * min(grid.nx, grid.ny) * grid.pixel_size
    X, Y = grid.pixel_centers()
    phantom = shepp_logan_phantom(half, variant)
    clip = (0.0, 1.0) if variant == "modified" else None
    return phantom.rasterize(X - grid.origin[0], Y - grid.origin[1], clip)


_GLYPHS = {
    "A": ["01110", "10001", "10001", "11111", "10001", "10001", "10001"],
    "C": ["01111", "10000", "10000", "10000", "10000", "10000", "01111"],
    "D": ["11110", "10001", "10001", "10001", "10001", "10001", "11110"],
    "E": ["11111", "10000", "10000", "11110", "10000", "10000", "11111"],
    "K": ["10001", "10010", "10100", "11000", "10100", "10010", "10001"],
    "M": ["10001", "11011", "10101", "10101", "10001", "10001", "10001"],
    "O": ["01110", "10001", "10001", "10001", "10001", "10001", "01110"],
    "R": ["11110", "10001", "10001", "11110", "10100", "10010", "10001"],
    "T": ["11111", "00100", "00100", "00100", "00100", "00100", "00100"],
    "U": ["10001", "10001", "10001", "10001", "10001", "10001", "01110"],
    "V": ["10001", "10001", "10001", "10001", "10001", "01010", "00100"],
    "X": ["10001", "10001", "01010", "00100", "01010", "10001", "10001"],
}


def letters(grid: ImageGrid, text: str = "TOMO", value: float = 1.0) -> np.ndarray:
    """Block letters on a zero background, centred and spanning ~80% of the width."""
    text = text.upper()
    missing = set(text) - set(_GLYPHS) - {" "}
    if missing:
        raise ValueError(f"no glyph for {sorted(missing)}")
    cols = sum(6 for _ in text) - 1
    bitmap = np.zeros((7, cols))
    for i, ch in enumerate(text):
        if ch != " ":
            bitmap[:, 6 * i:6 * i + 5] = [[int(b) for b in row] for row in _GLYPHS[ch]]
    cell = 0.8 * grid.nx * grid.pixel_size / cols
    X, Y = grid.pixel_centers()
    u = np.floor((X - grid.origin[0]) / cell + cols / 2).astype(int)
    w = np.floor(3.5 - (Y - grid.origin[1]) / cell).astype(int)
    ok = (u >= 0) & (u < cols) & (w >= 0) & (w < 7)
    out = np.zeros(grid.p)
    out[ok] = value * bitmap[w[ok], u[ok]]
    return out


@dataclass
class Sinogram:
    """Counts ``y`` with blank-scan means ``eta`` for each ray."""

    y: np.ndarray
    eta: np.ndarray
    geometry_id: str = ""
    seed: int | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y)
        self.eta = np.broadcast_to(np.asarray(self.eta, dtype=float), self.y.shape).copy()
        if np.any(self.y < 0):
            raise ValueError("counts must be nonnegative")
        if np.any(self.eta <= 0):
            raise ValueError("eta must be positive")

    @property
    def n(self) -> int:
        return self.y.size

    def subsample_views(self, n_detectors: int, factor: int) -> "Sinogram":
        """Keep every ``factor``-th view of a view-major sinogram."""
        y = self.y.reshape(-1, n_detectors)[::factor].ravel()
        eta = self.eta.reshape(-1, n_detectors)[::factor].ravel()
        return Sinogram(y, eta, f"{self.geometry_id}/sub{factor}", self.seed)


def _rates(A: SystemMatrix, x, eta):
    eta = np.asarray(eta, dtype=float)
    if np.any(eta <= 0):
        raise ValueError("eta must be positive")
    return np.broadcast_to(eta, (A.n,)) * np.exp(-A.forward(x))


def sample_sinogram(A: SystemMatrix, x, eta, seed: int, geometry_id: str = "") -> Sinogram:
    """Draw ``y_i ~ Poisson(eta_i exp(-(A x)_i))`` from a counter-based Philox stream."""
    rate = _rates(A, x, eta)
    rng = np.random.Generator(np.random.Philox(seed))
    y = rng.poisson(rate).astype(np.int64)
    return Sinogram(y, np.broadcast_to(eta, (A.n,)), geometry_id, seed)


def noiseless_sinogram(A: SystemMatrix, x, eta, geometry_id: str = "") -> Sinogram:
    """Sinogram whose 'counts' are the exact (non-integer) expected values."""
    return Sinogram(_rates(A, x, eta), np.broadcast_to(eta, (A.n,)), geometry_id, None)


def post_log(s: Sinogram) -> tuple[np.ndarray, np.ndarray]:
    """Line-integral estimates ``log(eta / max(y, 1))`` and weights ``max(y, 1)``."""
    w = np.maximum(np.asarray(s.y, dtype=float), 1.0)
    return np.log(s.eta / w), w
