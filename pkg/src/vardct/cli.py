"""Command-line front end: ``vardct {simulate,reconstruct,compare,diagnose}``.

Each subcommand takes a JSON run configuration plus a few override flags.
Exit codes: 0 success, 2 invalid input, 3 numerical assertion failure,
4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from . import io
from .baselines import (MapPenaltyConfig, Rewl2Config, fbp_reconstruct, neg_log_likelihood,
                        run_map, run_mle, run_rewl2)
from .config import RunConfig
from .diagnostics import _jsonable, alt_objective, decrease_bound, kkt_residuals, nrmse
from .projector import FanBeamGeometry, ImageGrid, SystemMatrix, build_system_matrix
from .sbl import SblConfig, run_sbl
from .simulate import Sinogram, letters, sample_sinogram, shepp_logan
from .transforms import build_overcomplete, build_transform
from .vard import (BoundViolationError, MonotonicityError, PosteriorState, Problem, VardConfig,
                   compute_workspace, mean_update, objective, run_vard)

log = logging.getLogger("vardct")

EXIT_OK, EXIT_INVALID, EXIT_ASSERT, EXIT_IO = 0, 2, 3, 4


class AssertionFailure(Exception):
    pass


@dataclass
class Setup:
    grid: ImageGrid
    geometry: FanBeamGeometry
    A: SystemMatrix
    truth: np.ndarray


def build_setup(cfg: RunConfig, subsample: int = 1) -> Setup:
    """Grid, geometry (optionally view-subsampled), system matrix and phantom."""
    from .scenarios import DESK_VIEWS

    n = cfg.grid.n
    grid = ImageGrid(n, n, 2.0 * cfg.grid.fov_radius / n, (0.0, 0.0), cfg.grid.mu_ref)
    dv, dd = DESK_VIEWS.get(n, (int(round(5.36 * n)), 2 * n))
    g = cfg.geometry
    geom = FanBeamGeometry.covering(grid, g.n_views or dv, g.n_detectors or dd,
                                    g.source_to_isocenter, g.source_to_detector, g.detector_offset)
    if subsample > 1:
        geom = geom.subsample_views(subsample)
    A = build_system_matrix(geom, grid, threads=cfg.threads)
    if cfg.phantom.kind == "shepp_logan":
        truth = shepp_logan(grid, cfg.phantom.variant)
    else:
        truth = letters(grid, cfg.phantom.text)
    return Setup(grid, geom, A, truth)


def provenance(cfg: RunConfig) -> dict:
    # where outputs land does not change them, so it stays out of the hash
    return {"config_hash": io.config_hash(cfg.model_dump(exclude={"output_dir"})),
            "data_hash": io.config_hash(cfg.data_dict()), "seed": cfg.noise.seed}


def load_config(path) -> RunConfig:
    return RunConfig.model_validate(json.loads(Path(path).read_text()))


def _transform(cfg: RunConfig, grid: ImageGrid):
    a = cfg.algorithm
    if a.transform == "overcomplete":
        return build_overcomplete(grid, a.boundary, a.tied)
    return build_transform(grid, a.transform)


def run_algorithm(cfg: RunConfig, setup: Setup, sino: Sinogram) -> dict:
    """Run the configured reconstructor; returns images, trace and final objective."""
    a = cfg.algorithm
    A, grid = setup.A, setup.grid
    out = {"images": {}, "trace": [], "objective": None}
    t0 = time.perf_counter()
    if a.name == "vard":
        T = _transform(cfg, grid)
        vc = VardConfig(n_iters=a.iterations, solver_mode=a.solver_mode,
                        check_level=a.check_level, gamma_init=a.gamma_init)
        res = run_vard(Problem(A, T, sino), vc)
        st = res.state
        out["images"] = {"m": st.m, "v": st.v, "gamma": st.gamma,
                         "std_v": np.sqrt(st.v), "std_gamma": np.sqrt(st.gamma)}
        out["trace"] = res.trace
        out["objective"] = res.trace[-1]["F"]
        out["fallbacks"] = res.fallbacks
    elif a.name == "mle":
        res = run_mle(A, sino, a.iterations)
        out["images"] = {"m": res.x}
        out["trace"], out["objective"] = res.trace, res.objective
    elif a.name == "map":
        T = build_overcomplete(grid, "dirichlet")
        res = run_map(A, T, sino, MapPenaltyConfig(a.beta, a.delta), a.iterations)
        out["images"] = {"m": res.x}
        out["trace"], out["objective"] = res.trace, res.objective
    elif a.name == "rewl2":
        T = _transform(cfg, grid)
        res = run_rewl2(A, T, sino, Rewl2Config(a.epsilon, a.iterations), gamma0=a.gamma_init)
        out["images"] = {"m": res.x, "gamma": res.gamma}
        out["trace"], out["objective"] = res.trace, res.objective
        out["fallbacks"] = res.fallbacks
    elif a.name == "sbl":
        T = _transform(cfg, grid)
        sc = SblConfig(a.eps_m, a.eps_v, n_em_iters=a.iterations, variance_mode=a.variance_mode,
                       gamma_init=a.gamma_init)
        res = run_sbl(A, T, sino, sc)
        out["images"] = {"m": res.m, "gamma": res.gamma}
        out["trace"] = res.trace
    elif a.name == "fbp":
        out["images"] = {"m": fbp_reconstruct(sino, setup.geometry, grid)}
        out["objective"] = neg_log_likelihood(np.maximum(out["images"]["m"], 0.0), A, sino)
    out["wall_s"] = time.perf_counter() - t0
    return out


def _tuning(cfg: RunConfig) -> dict:
    a = cfg.algorithm
    keys = {"vard": ("transform", "tied", "solver_mode"), "mle": (), "map": ("beta", "delta"),
            "rewl2": ("transform", "epsilon"), "sbl": ("eps_m", "eps_v", "variance_mode"),
            "fbp": ()}[a.name]
    return {k: getattr(a, k) for k in keys}


def _sinogram_for(cfg: RunConfig, setup_full: Setup, path: Path | None) -> Sinogram:
    if path is not None:
        sino, header = io.read_sinogram(path)
        if header.get("data_hash") not in (None, io.config_hash(cfg.data_dict())):
            log.warning("sinogram %s was simulated from a different data configuration", path)
        return sino
    return sample_sinogram(setup_full.A, setup_full.truth, cfg.noise.eta, cfg.noise.seed,
                           geometry_id=f"{cfg.grid.n}x{cfg.grid.n}")


def _prepare(cfg: RunConfig, sino_path: Path | None):
    """Full-view data plus the (possibly subsampled) reconstruction setup."""
    full = build_setup(cfg)
    sino = _sinogram_for(cfg, full, sino_path)
    if sino.n != full.A.n:
        raise ValueError(f"sinogram has {sino.n} rays, geometry expects {full.A.n}")
    if cfg.view_subsample > 1:
        setup = build_setup(cfg, cfg.view_subsample)
        sino = sino.subsample_views(full.geometry.n_detectors, cfg.view_subsample)
    else:
        setup = full
    return setup, sino


def cmd_simulate(cfg: RunConfig, args) -> int:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    setup = build_setup(cfg)
    sino = sample_sinogram(setup.A, setup.truth, cfg.noise.eta, cfg.noise.seed,
                           geometry_id=f"{cfg.grid.n}x{cfg.grid.n}")
    prov = provenance(cfg)
    io.write_image(out / "truth.img", setup.truth, setup.grid, **prov)
    io.write_pgm(out / "truth.pgm", setup.truth, setup.grid)
    io.write_sinogram(out / "sinogram.sin", sino, setup.geometry.to_dict(), **prov)
    summary = {"n_rays": sino.n, "n_views": setup.geometry.n_views,
               "n_detectors": setup.geometry.n_detectors, "p": setup.grid.p, **prov}
    (out / "simulate.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_reconstruct(cfg: RunConfig, args) -> int:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    sino_path = Path(args.sinogram) if args.sinogram else None
    if sino_path is None and (out / "sinogram.sin").exists():
        sino_path = out / "sinogram.sin"
    setup, sino = _prepare(cfg, sino_path)
    res = run_algorithm(cfg, setup, sino)
    prov = provenance(cfg)
    meta = {**prov, "algorithm": cfg.algorithm.name, "tuning": _tuning(cfg)}
    for name, values in res["images"].items():
        io.write_image(out / f"{name}.img", values, setup.grid, **meta)
    io.write_pgm(out / "m.pgm", res["images"]["m"], setup.grid)
    if res["trace"]:
        io.write_trace(out / "trace.csv", res["trace"], meta)
    metrics = {**meta, "iterations": cfg.algorithm.iterations, "objective": res["objective"],
               "wall_s": res["wall_s"], "fallbacks": res.get("fallbacks", [])}
    truth = Path(args.truth) if args.truth else None
    if truth is not None:
        metrics["nrmse"] = nrmse(res["images"]["m"], io.read_image(truth)[0])
    else:
        metrics["nrmse"] = nrmse(res["images"]["m"], setup.truth)
    (out / "metrics.json").write_text(json.dumps(_jsonable(metrics), indent=2, sort_keys=True))
    print(json.dumps(_jsonable(metrics), sort_keys=True))
    return EXIT_OK


def _parse_sweep(items):
    axes = []
    for item in items or []:
        key, _, values = item.partition("=")
        if not values or "." not in key:
            raise ValueError(f"bad sweep {item!r}; expected block.key=v1,v2")
        axes.append((key, [json.loads(v) for v in values.split(",")]))
    return axes


def _apply(cfg: RunConfig, assignments) -> RunConfig:
    data = cfg.model_dump()
    for key, value in assignments:
        block, field = key.split(".", 1)
        data[block][field] = value
    return RunConfig.model_validate(data)


def cmd_compare(cfgs: list[RunConfig], args) -> int:
    axes = _parse_sweep(args.sweep)
    runs = []
    for cfg in cfgs:
        if not axes:
            runs.append(cfg)
            continue
        keys = [k for k, _ in axes]
        for combo in itertools.product(*(v for _, v in axes)):
            runs.append(_apply(cfg, zip(keys, combo)))
    data_hashes = {io.config_hash(r.data_dict()) for r in runs}
    if len(data_hashes) != 1:
        raise ValueError("compared runs must share grid, geometry, phantom and noise blocks")
    subs = {r.view_subsample for r in runs}
    if len(subs) != 1:
        raise ValueError("compared runs must share the view-subsampling factor")
    out = Path(cfgs[0].output_dir)
    out.mkdir(parents=True, exist_ok=True)
    sino_path = Path(args.sinogram) if args.sinogram else None
    setup, sino = _prepare(runs[0], sino_path)
    rows = []
    for r in runs:
        res = run_algorithm(r, setup, sino)
        rows.append({"algorithm": r.algorithm.name, "tuning": json.dumps(_tuning(r), sort_keys=True),
                     "iterations": r.algorithm.iterations,
                     "nrmse": nrmse(res["images"]["m"], setup.truth),
                     "objective": res["objective"], "wall_s": res["wall_s"],
                     "config_hash": provenance(r)["config_hash"]})
    fields = list(rows[0])
    with open(out / "summary.csv", "w", newline="") as fh:
        fh.write(f"# data_hash={data_hashes.pop()} seed={runs[0].noise.seed}\n")
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    md = ["| " + " | ".join(fields) + " |", "|" + "---|" * len(fields)]
    for row in rows:
        cells = [f"{row[k]:.4%}" if k == "nrmse" else str(row[k]) for k in fields]
        md.append("| " + " | ".join(cells) + " |")
    (out / "summary.md").write_text("\n".join(md) + "\n")
    print("\n".join(md))
    return EXIT_OK


def cmd_diagnose(cfg: RunConfig, args) -> int:
    ckpt = Path(args.checkpoint or cfg.output_dir)
    try:
        m, hm = io.read_image(ckpt / "m.img")
        v, _ = io.read_image(ckpt / "v.img")
        gamma, _ = io.read_image(ckpt / "gamma.img")
    except FileNotFoundError as exc:
        raise OSError(f"missing checkpoint: {exc.filename}") from exc
    sino_path = Path(args.sinogram) if args.sinogram else None
    if sino_path is None and (ckpt / "sinogram.sin").exists():
        sino_path = ckpt / "sinogram.sin"
    setup, sino = _prepare(cfg, sino_path)
    T = _transform(cfg, setup.grid)
    prob = Problem(setup.A, T, sino)
    state = PosteriorState(m, v, gamma)
    kkt = kkt_residuals(state, prob)
    F = objective(state, prob).F
    alt = alt_objective(state, prob)
    step = run_vard(prob, VardConfig(n_iters=1, solver_mode="exact_1d", check_level="none"), state)
    ws = compute_workspace(state, prob)
    _, m_bar = mean_update(state, ws, "exact_1d", setup.A.col_support, return_unconstrained=True)
    bound = decrease_bound(state, step.state, ws, F, step.trace[-1]["F"], m_bar, T)
    report = {
        **provenance(cfg),
        "checkpoint_hash": hm.get("config_hash"),
        "objective": F,
        "kkt": kkt.summary(),
        "alt_objective": alt,
        "alt_gap": F - T.n_slots / 2.0 - alt,
        "bound": {**bound.summary(), "satisfied": bound.satisfied},
    }
    text = json.dumps(_jsonable(report), indent=2, sort_keys=True)
    (ckpt / "diagnose.json").write_text(text)
    print(text)
    if args.assert_ and (kkt.max_residual() > args.threshold or not bound.satisfied):
        raise AssertionFailure(f"KKT residual {kkt.max_residual():.3e} exceeds {args.threshold:g}"
                               if bound.satisfied else "decrease bound violated")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vardct", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, many=False):
        p.add_argument("config", nargs="+" if many else None, help="JSON run configuration")
        p.add_argument("--iters", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("--out")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    common(sub.add_parser("simulate", help="simulate truth and noisy sinogram"))
    p = common(sub.add_parser("reconstruct", help="run one reconstructor"))
    p.add_argument("--sinogram")
    p.add_argument("--truth")
    p = common(sub.add_parser("compare", help="run several configurations on shared data"), many=True)
    p.add_argument("--sweep", action="append", metavar="BLOCK.KEY=V1,V2")
    p.add_argument("--sinogram")
    p = common(sub.add_parser("diagnose", help="optimality and bound report for a VARD checkpoint"))
    p.add_argument("--checkpoint")
    p.add_argument("--sinogram")
    p.add_argument("--assert", dest="assert_", action="store_true")
    p.add_argument("--threshold", type=float, default=1e-4)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        paths = args.config if isinstance(args.config, list) else [args.config]
        cfgs = [load_config(p).with_overrides(args.iters, args.seed, args.threads, args.out)
                for p in paths]
        if args.command == "simulate":
            return cmd_simulate(cfgs[0], args)
        if args.command == "reconstruct":
            return cmd_reconstruct(cfgs[0], args)
        if args.command == "compare":
            return cmd_compare(cfgs, args)
        return cmd_diagnose(cfgs[0], args)
    except (ValidationError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (MonotonicityError, BoundViolationError, AssertionFailure) as exc:
        print(f"assertion failed: {exc}", file=sys.stderr)
        return EXIT_ASSERT
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
