"""Run directory layout written by ``nflba run`` and read back by ``eval`` and ``render``.

    config.yaml              resolved experiment config (verbatim copy)
    trajectory.csv           frame_index,tx,ty,tz,qw,qx,qy,qz (world-to-camera)
    scene.npz                final Gaussian map
    pointcloud.ply           Gaussian centers with gamma-encoded colors
    renders/NNNN.png         final map rendered at each keyframe pose (8-bit sRGB)
    renders/NNNN_depth.png   matching depth, 16-bit, mm = value * depth_scale
    status.json              {"status": "ok" | "tracking_failure", ...}
    metrics.json             evaluation against the dataset ground truth
    digest.json              SHA-256 of the config and of every artifact
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from PIL import Image

from .dataset import DEFAULT_DEPTH_SCALE, _read_depth, _write_depth
from .geometry import GaussianScene, Intrinsics, Pose
from .shading import linear_to_srgb
from .splatter import RenderOptions, render

TRAJECTORY_HEADER = "frame_index,tx,ty,tz,qw,qx,qy,qz"


class TrajectorySchemaError(ValueError):
    pass


def write_trajectory(path, trajectory) -> Path:
    lines = [TRAJECTORY_HEADER]
    for i, pose in trajectory:
        vals = list(pose.translation) + list(pose.quat)
        lines.append(",".join([str(int(i))] + [repr(float(v)) for v in vals]))
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path


def read_trajectory(path) -> List[Tuple[int, Pose]]:
    """Parse trajectory.csv; errors name the offending line (1-based)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise TrajectorySchemaError(f"cannot read {path}: {exc}") from None
    rows = text.splitlines()
    if not rows or rows[0].strip() != TRAJECTORY_HEADER:
        raise TrajectorySchemaError(f"{path}:1: expected header {TRAJECTORY_HEADER!r}")
    out: List[Tuple[int, Pose]] = []
    for n, line in enumerate(rows[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 8:
            raise TrajectorySchemaError(f"{path}:{n}: expected 8 fields, got {len(parts)}")
        try:
            idx = int(parts[0])
            vals = np.array([float(v) for v in parts[1:]])
        except ValueError:
            raise TrajectorySchemaError(f"{path}:{n}: non-numeric field in {line!r}") from None
        if not np.all(np.isfinite(vals)):
            raise TrajectorySchemaError(f"{path}:{n}: non-finite value")
        q = vals[3:]
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise TrajectorySchemaError(f"{path}:{n}: quaternion is not unit length")
        if out and idx <= out[-1][0]:
            raise TrajectorySchemaError(f"{path}:{n}: frame indices must increase")
        out.append((idx, Pose.from_quat(q, vals[:3])))
    return out


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_digest(run_dir, config_digest: str, dataset_digest: Optional[str] = None) -> dict:
    run_dir = Path(run_dir)
    files = {}
    for p in sorted(q for q in run_dir.rglob("*") if q.is_file()):
        rel = str(p.relative_to(run_dir))
        if rel != "digest.json":
            files[rel] = file_sha256(p)
    d = {"config_digest": config_digest, "dataset_digest": dataset_digest, "files": files}
    (run_dir / "digest.json").write_text(json.dumps(d, indent=2, sort_keys=True))
    return d


def save_render(render_dir, index: int, color_linear: np.ndarray, depth: np.ndarray,
                gamma: float = 2.2, depth_scale: float = DEFAULT_DEPTH_SCALE) -> None:
    render_dir = Path(render_dir)
    render_dir.mkdir(parents=True, exist_ok=True)
    srgb = linear_to_srgb(np.clip(color_linear, 0.0, 1.0), gamma)
    u8 = np.round(np.clip(srgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(u8).save(render_dir / f"{index:04d}.png")
    _write_depth(render_dir / f"{index:04d}_depth.png", np.clip(depth, 0, None), depth_scale)


def load_renders(render_dir, depth_scale: float = DEFAULT_DEPTH_SCALE
                 ) -> Tuple[Dict[int, np.ndarray], Dict[int, np.ndarray]]:
    """(sRGB images in [0,1], depth maps in mm) keyed by frame index."""
    render_dir = Path(render_dir)
    colors, depths = {}, {}
    if not render_dir.is_dir():
        return colors, depths
    for p in sorted(render_dir.glob("[0-9][0-9][0-9][0-9].png")):
        i = int(p.stem)
        colors[i] = np.asarray(Image.open(p).convert("RGB"), dtype=np.float64) / 255.0
        dp = render_dir / f"{p.stem}_depth.png"
        if dp.exists():
            depths[i] = _read_depth(dp, depth_scale)
    return colors, depths


def render_views(scene: GaussianScene, views, k: Intrinsics, out_dir,
                 opts: Optional[RenderOptions] = None, gamma: float = 2.2) -> List[int]:
    """Render ``scene`` at each (index, pose) and save color + depth under ``out_dir``."""
    opts = opts or RenderOptions(normalized_depth=True)
    done = []
    for i, pose in views:
        out = render(scene, pose, k, opts)
        save_render(out_dir, int(i), out.color, out.depth_normalized, gamma)
        done.append(int(i))
    return done
