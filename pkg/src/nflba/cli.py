"""Command-line entry point: ``nflba {gen,run,eval,render,presets}``.

Log verbosity comes from the NFLBA_LOG_LEVEL environment variable (default WARNING).
Exit codes: 0 success, 1 configuration or input error, 2 tracking failure
(partial outputs are kept and flagged in status.json).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import runio
from .config import ConfigError, ExperimentConfig, load_config, preset_names
from .dataset import DatasetSchemaError, digest_dir, read_dataset
from .evalkit import EmptyCloudError, MetricsReport, evaluate, export_ply, gt_point_cloud, read_ply
from .geometry import GaussianScene
from .simulator import SimulationError, generate_sequence, write_sequence
from .slam import Frame, TrackingFailure, run_slam

log = logging.getLogger("nflba")

EXIT_OK, EXIT_ERROR, EXIT_TRACKING = 0, 1, 2
LOG_ENV = "NFLBA_LOG_LEVEL"


class CliError(RuntimeError):
    pass


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _set_threads(n: int) -> None:
    """Cap the BLAS/OpenMP pools. The compiled raster kernels are serial, so
    results do not depend on the count."""
    from threadpoolctl import threadpool_limits

    threadpool_limits(n)


def _resolve(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "threads", None) is not None:
        cfg.threads = args.threads
    if getattr(args, "out", None) is not None:
        cfg.out = str(args.out)
    cfg.check()
    if cfg.out is None:
        raise CliError("no output directory: pass --out or set `out` in the config")
    return cfg


def _write_config(out: Path, cfg: ExperimentConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.to_yaml())


# -- gen ---------------------------------------------------------------------

def cmd_gen(cfg: ExperimentConfig, out: Optional[Path] = None) -> str:
    """Generate the simulator dataset described by ``cfg``; returns its digest."""
    out = Path(out or cfg.out)
    seq = generate_sequence(cfg.simulator_config())
    write_sequence(seq, out)
    digest = digest_dir(out)
    log.info("dataset written to %s", out)
    return digest


# -- run ---------------------------------------------------------------------

def _frames(ds, depth_mode: str) -> List[Frame]:
    depth = ds.depth(depth_mode)
    source = {"gt": "ground-truth", "noisy": "noisy", "none": "none"}[depth_mode]
    return [Frame(i, img, None if depth is None else depth[i], source)
            for i, img in enumerate(ds.images)]


def cmd_run(cfg: ExperimentConfig) -> int:
    """Run SLAM and write the run directory; returns the exit code."""
    out = Path(cfg.out)
    if cfg.simulator is not None:
        data_dir = out / "dataset"
        dataset_digest = cmd_gen(cfg, data_dir)
    else:
        cfg.validate()
        data_dir = Path(cfg.dataset)
        dataset_digest = digest_dir(data_dir)
    ds = read_dataset(data_dir, cfg.depth_mode)
    _write_config(out, cfg)
    scfg = cfg.slam_config()
    t0 = time.time()
    status = {"status": "ok", "message": ""}
    try:
        state = run_slam(_frames(ds, cfg.depth_mode), ds.intrinsics, scfg)
    except TrackingFailure as exc:
        state = exc.state     # trajectory holds the frames tracked before the failure
        status = {"status": "tracking_failure", "message": str(exc),
                  "failed_frame": exc.frame_index}
        log.error("tracking failed at frame %d: %s", exc.frame_index, exc)
    log.info("SLAM finished in %.1f s", time.time() - t0)
    status["frames_tracked"] = len(state.trajectory)
    status["n_gaussians"] = len(state.scene)
    status["keyframes"] = list(map(int, state.keyframes))

    runio.write_trajectory(out / "trajectory.csv", state.trajectory)
    state.scene.save(out / "scene.npz")
    if len(state.scene):
        export_ply(out / "pointcloud.ply", state.scene, gamma=cfg.shading.gamma)
        views = [(i, p) for i, p in state.trajectory if i in set(state.keyframes)]
        runio.render_views(state.scene, views, ds.intrinsics, out / "renders",
                           scfg.render_options("mapping"), cfg.shading.gamma)
    (out / "status.json").write_text(json.dumps(status, indent=2))
    try:
        rep = evaluate_run(out, data_dir, cfg)
        rep.save(out / "metrics.json")
    except (ValueError, OSError) as exc:
        log.warning("evaluation skipped: %s", exc)
    runio.write_digest(out, cfg.digest(), dataset_digest)
    return EXIT_OK if status["status"] == "ok" else EXIT_TRACKING


# -- eval --------------------------------------------------------------------

def _run_config(run_dir: Path) -> ExperimentConfig:
    return ExperimentConfig.load(run_dir / "config.yaml")


def _dataset_of(run_dir: Path, cfg: ExperimentConfig) -> Path:
    return Path(cfg.dataset) if cfg.dataset is not None else run_dir / "dataset"


def evaluate_run(run_dir, dataset_dir=None, cfg: Optional[ExperimentConfig] = None) -> MetricsReport:
    """Metrics of one run directory against the ground truth of its dataset."""
    run_dir = Path(run_dir)
    cfg = cfg or _run_config(run_dir)
    ds = read_dataset(dataset_dir or _dataset_of(run_dir, cfg), depth_mode="none")
    est = runio.read_trajectory(run_dir / "trajectory.csv")
    n = len(ds.poses_gt)
    bad = [i for i, _ in est if not 0 <= i < n]
    if bad:
        raise DatasetSchemaError(f"trajectory frame {bad[0]} is outside the dataset (0..{n - 1})")
    gt = [(i, ds.poses_gt[i]) for i, _ in est]
    renders, rdepths = runio.load_renders(run_dir / "renders")
    images = {i: ds.images[i] for i, _ in est}
    gt_depths = gt_cloud = est_cloud = None
    if ds.depth_gt is not None:
        gt_depths = {i: ds.depth_gt[i] for i, _ in est}
        gt_cloud = gt_point_cloud([ds.depth_gt[i] for i, _ in est], [p for _, p in gt],
                                  ds.intrinsics)
    ply = run_dir / "pointcloud.ply"
    if ply.exists():
        est_cloud = read_ply(ply)[0].astype(np.float64)
    return evaluate(est, gt, images=images, renders=renders, gt_depths=gt_depths,
                    rendered_depths=rdepths, gt_cloud=gt_cloud, est_cloud=est_cloud,
                    config_digest=cfg.digest())


def cmd_eval(run_dirs: Sequence, dataset_dir=None, out=None) -> Dict[str, MetricsReport]:
    from . import plotting

    reports: Dict[str, MetricsReport] = {}
    trajs = {}
    gt = None
    for rd in map(Path, run_dirs):
        rep = evaluate_run(rd, dataset_dir)
        rep.save(rd / "metrics.json")
        name = rd.name
        while name in reports:
            name += "'"
        reports[name] = rep
        trajs[name] = runio.read_trajectory(rd / "trajectory.csv")
        if gt is None:
            ds = read_dataset(dataset_dir or _dataset_of(rd, _run_config(rd)), depth_mode="none")
            gt = list(enumerate(ds.poses_gt))
    print(plotting.format_table(reports))
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        plotting.write_table(out / "table.tsv", reports)
        plotting.per_frame_errors(out / "per_frame_errors.png", reports)
        plotting.metric_bars(out / "metrics.png", reports)
        try:
            runs = {n: t for n, t in trajs.items() if len(t) >= 3}
            sub = {n: [gt[i] for i, _ in t] for n, t in runs.items()}
            if runs and len({len(s) for s in sub.values()}) == 1:
                plotting.trajectories(out / "trajectories.png", next(iter(sub.values())), runs)
        except ValueError as exc:
            log.warning("trajectory figure skipped: %s", exc)
    return reports


# -- render ------------------------------------------------------------------

def cmd_render(run_dir, out=None, frames: str = "keyframes") -> List[int]:
    """Replay the saved final map at the saved poses."""
    run_dir = Path(run_dir)
    cfg = _run_config(run_dir)
    ds_dir = _dataset_of(run_dir, cfg)
    k = read_dataset(ds_dir, depth_mode="none").intrinsics
    scene = GaussianScene.load(run_dir / "scene.npz")
    traj = runio.read_trajectory(run_dir / "trajectory.csv")
    if frames == "keyframes":
        status = json.loads((run_dir / "status.json").read_text())
        keep = set(status.get("keyframes", []))
        traj = [(i, p) for i, p in traj if i in keep]
    out = Path(out) if out is not None else run_dir / "replay"
    opts = cfg.slam_config().render_options("mapping")
    done = runio.render_views(scene, traj, k, out, opts, cfg.shading.gamma)
    print(f"rendered {len(done)} views to {out}")
    return done


# -- argument parsing ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nflba", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, threads=True):
        sp.add_argument("--config", required=True, help="YAML file or shipped preset name")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        if threads:
            sp.add_argument("--threads", type=int, help="thread cap (default from config, 1)")
        sp.add_argument("--out", type=Path, help="output directory (overrides the config)")

    common(sub.add_parser("gen", help="generate a synthetic dataset"), threads=False)
    common(sub.add_parser("run", help="run SLAM on a dataset"))
    ev = sub.add_parser("eval", help="evaluate one or more run directories")
    ev.add_argument("runs", nargs="+", type=Path)
    ev.add_argument("--dataset", type=Path, help="ground-truth dataset (default: from each run)")
    ev.add_argument("--out", type=Path, help="write table.tsv and figures here")
    rd = sub.add_parser("render", help="re-render the final map of a run")
    rd.add_argument("run", type=Path)
    rd.add_argument("--out", type=Path)
    rd.add_argument("--frames", choices=("keyframes", "all"), default="keyframes")
    sub.add_parser("presets", help="list shipped config presets")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.command == "presets":
            print("\n".join(preset_names()))
            return EXIT_OK
        if args.command == "gen":
            cfg = _resolve(args)
            if cfg.simulator is None:
                raise CliError("gen needs a `simulator` section in the config")
            digest = cmd_gen(cfg)
            _write_config(Path(cfg.out), cfg)
            print(digest)
            return EXIT_OK
        if args.command == "run":
            cfg = _resolve(args)
            _set_threads(cfg.threads)
            code = cmd_run(cfg)
            print(f"{'ok' if code == EXIT_OK else 'tracking failure'}: {cfg.out}")
            return code
        if args.command == "eval":
            cmd_eval(args.runs, args.dataset, args.out)
            return EXIT_OK
        if args.command == "render":
            cmd_render(args.run, args.out, args.frames)
            return EXIT_OK
    except (ConfigError, CliError, DatasetSchemaError, runio.TrajectorySchemaError,
            SimulationError, EmptyCloudError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
