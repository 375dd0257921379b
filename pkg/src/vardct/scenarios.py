"""Ready-made simulation setups.

The field of view is a square of half-width ``fov_radius`` (100 mm) centred
at the isocentre. The source orbits at 400 mm and the flat panel sits 800 mm
from the source with a 0.2 mm lateral offset; the detector pitch is chosen so
the fan covers the whole grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .projector import FanBeamGeometry, ImageGrid, SystemMatrix, build_system_matrix
from .simulate import Sinogram, letters, sample_sinogram, shepp_logan

__all__ = ["Scenario", "make_grid", "make_geometry", "desk_scenario", "DESK_VIEWS"]

FOV_RADIUS = 100.0
SOURCE_TO_ISOCENTER = 400.0
SOURCE_TO_DETECTOR = 800.0
DETECTOR_OFFSET = 0.2
# views and detectors per grid size; 256 is the full-scale protocol
DESK_VIEWS = {4: (12, 8), 8: (24, 16), 16: (48, 32), 32: (172, 64), 64: (343, 128),
              128: (360, 256), 256: (1372, 512)}


def make_grid(n: int, fov_radius: float = FOV_RADIUS, mu_ref: float = 0.02) -> ImageGrid:
    return ImageGrid(n, n, 2.0 * fov_radius / n, (0.0, 0.0), mu_ref)


def make_geometry(grid: ImageGrid, n_views: int, n_detectors: int) -> FanBeamGeometry:
    return FanBeamGeometry.covering(grid, n_views, n_detectors, SOURCE_TO_ISOCENTER,
                                    SOURCE_TO_DETECTOR, DETECTOR_OFFSET)


@dataclass
class Scenario:
    grid: ImageGrid
    geometry: FanBeamGeometry
    A: SystemMatrix
    truth: np.ndarray

    def sample(self, eta: float, seed: int) -> Sinogram:
        return sample_sinogram(self.A, self.truth, eta, seed, geometry_id=f"{self.grid.nx}x{self.grid.ny}")


def desk_scenario(n: int, phantom: str = "shepp_logan", n_views: int | None = None,
                  n_detectors: int | None = None) -> Scenario:
    """Grid, geometry, system matrix and phantom for an ``n x n`` study."""
    grid = make_grid(n)
    dv, dd = DESK_VIEWS.get(n, (int(round(5.36 * n)), 2 * n))
    geom = make_geometry(grid, n_views or dv, n_detectors or dd)
    A = build_system_matrix(geom, grid)
    truth = shepp_logan(grid) if phantom == "shepp_logan" else letters(grid)
    return Scenario(grid, geom, A, truth)
