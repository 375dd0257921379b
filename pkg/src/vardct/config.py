"""Run configuration documents for the command-line front end."""

from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

__all__ = ["GridBlock", "GeometryBlock", "PhantomBlock", "NoiseBlock", "AlgorithmBlock", "RunConfig"]


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GridBlock(_Block):
    n: int = Field(64, ge=2)
    fov_radius: float = Field(100.0, gt=0)
    mu_ref: float = Field(0.02, gt=0)


class GeometryBlock(_Block):
    n_views: int | None = Field(None, ge=1)
    n_detectors: int | None = Field(None, ge=1)
    source_to_isocenter: float = Field(400.0, gt=0)
    source_to_detector: float = Field(800.0, gt=0)
    detector_offset: float = 0.2


class PhantomBlock(_Block):
    kind: Literal["shepp_logan", "letters"] = "shepp_logan"
    variant: Literal["modified", "classic"] = "modified"
    text: str = "TOMO"


class NoiseBlock(_Block):
    eta: float = Field(1e4, gt=0)
    seed: int = Field(0, ge=0)


class AlgorithmBlock(_Block):
    name: Literal["vard", "mle", "map", "rewl2", "sbl", "fbp"] = "vard"
    transform: Literal["complete", "overcomplete", "identity"] = "complete"
    tied: bool = False
    boundary: Literal["dirichlet", "free"] = "dirichlet"
    iterations: int = Field(100, ge=0)
    solver_mode: Literal["fast_newton", "exact_1d"] = "fast_newton"
    check_level: Literal["none", "monotone", "full_bound"] = "none"
    gamma_init: float = Field(100.0, gt=0)
    beta: float = Field(0.0, ge=0)
    delta: float = Field(1e-3, gt=0)
    epsilon: float = Field(1e-6, gt=0)
    eps_m: float = Field(1e-8, gt=0)
    eps_v: float = Field(1e-2, gt=0)
    variance_mode: Literal["exact_small", "cg_columns"] = "exact_small"


class RunConfig(_Block):
    grid: GridBlock = GridBlock()
    geometry: GeometryBlock = GeometryBlock()
    phantom: PhantomBlock = PhantomBlock()
    noise: NoiseBlock = NoiseBlock()
    algorithm: AlgorithmBlock = AlgorithmBlock()
    output_dir: str = "out"
    view_subsample: int = Field(1, ge=1)
    threads: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _check(self):
        g = self.geometry
        if g.source_to_detector <= g.source_to_isocenter:
            raise ValueError("source_to_detector must exceed source_to_isocenter")
        if self.algorithm.name == "sbl" and self.algorithm.transform == "overcomplete":
            raise ValueError("sbl supports complete representations only")
        return self

    def with_overrides(self, iters=None, seed=None, threads=None, out=None) -> "RunConfig":
        data = self.model_dump()
        if iters is not None:
            data["algorithm"]["iterations"] = iters
        if seed is not None:
            data["noise"]["seed"] = seed
        if threads is not None:
            data["threads"] = threads
        if out is not None:
            data["output_dir"] = str(out)
        return RunConfig.model_validate(data)

    def data_dict(self) -> dict:
        """The part of the config that determines the simulated data."""
        return {k: self.model_dump()[k] for k in ("grid", "geometry", "phantom", "noise")}
