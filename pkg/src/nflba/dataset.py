"""On-disk dataset layout shared by the generator, the SLAM runner and evaluation.

    intrinsics.json          {fx, fy, cx, cy, width, height}
    poses_gt.json            list of 16-element row-major world-to-camera matrices
    images/NNNN.png          8-bit sRGB
    depth_gt/NNNN.png        16-bit, millimetres = value * depth_scale
    depth_noisy/NNNN.png     same encoding
    meta.json                {seed, lighting, noise_cfg, generator_version, depth_scale, ...}
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from PIL import Image

from .geometry import Intrinsics, Pose

DEFAULT_DEPTH_SCALE = 0.01   # mm per count; 16 bits cover 655 mm
DEPTH_MODES = ("none", "gt", "noisy")
_MODE_ALIASES = {"monocular": "none", "rgbd": "gt"}


class DatasetSchemaError(ValueError):
    pass


@dataclass
class Dataset:
    intrinsics: Intrinsics
    images: List[np.ndarray]                     # sRGB in [0, 1]
    poses_gt: List[Pose]
    depth_gt: Optional[List[np.ndarray]] = None
    depth_noisy: Optional[List[np.ndarray]] = None
    meta: dict = field(default_factory=dict)
    root: Optional[Path] = None

    def __len__(self) -> int:
        return len(self.images)

    def depth(self, mode: str) -> Optional[List[np.ndarray]]:
        mode = normalize_depth_mode(mode)
        if mode == "none":
            return None
        return self.depth_gt if mode == "gt" else self.depth_noisy


def normalize_depth_mode(mode: str) -> str:
    mode = _MODE_ALIASES.get(mode, mode)
    if mode not in DEPTH_MODES:
        raise DatasetSchemaError(f"unknown depth mode {mode!r}; expected one of {DEPTH_MODES}")
    return mode


def _write_depth(path: Path, depth: np.ndarray, scale: float) -> None:
    counts = np.round(np.asarray(depth, float) / scale)
    if counts.max(initial=0) > 65535:
        raise ValueError(f"depth exceeds the 16-bit range at scale {scale}")
    Image.fromarray(counts.astype(np.uint16)).save(path)


def _read_depth(path: Path, scale: float) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float64) * scale


def write_dataset(root, images: Sequence[np.ndarray], intrinsics: Intrinsics,
                  poses_gt: Sequence[Pose], meta: Optional[dict] = None,
                  depth_gt: Optional[Sequence[np.ndarray]] = None,
                  depth_noisy: Optional[Sequence[np.ndarray]] = None,
                  depth_scale: float = DEFAULT_DEPTH_SCALE) -> Path:
    root = Path(root)
    if len(images) != len(poses_gt):
        raise ValueError("one pose per image is required")
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "intrinsics.json").write_text(json.dumps(intrinsics.to_dict(), indent=2))
    (root / "poses_gt.json").write_text(json.dumps(
        [[float(v) for v in p.matrix().ravel()] for p in poses_gt]))
    for i, img in enumerate(images):
        u8 = np.round(np.clip(np.asarray(img, float), 0.0, 1.0) * 255.0).astype(np.uint8)
        Image.fromarray(u8).save(root / "images" / f"{i:04d}.png")
    for name, maps in (("depth_gt", depth_gt), ("depth_noisy", depth_noisy)):
        if maps is None:
            continue
        (root / name).mkdir(exist_ok=True)
        for i, d in enumerate(maps):
            _write_depth(root / name / f"{i:04d}.png", d, depth_scale)
    meta = dict(meta or {})
    meta["depth_scale"] = depth_scale
    meta["n_frames"] = len(images)
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return root


def _load_json(path: Path):
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise DatasetSchemaError(f"missing {path.name} in {path.parent}") from None
    except json.JSONDecodeError as exc:
        raise DatasetSchemaError(f"{path}: invalid JSON ({exc})") from None


def read_dataset(root, depth_mode: str = "gt") -> Dataset:
    """Load a dataset directory; the depth directory required by ``depth_mode`` must exist."""
    root = Path(root)
    mode = normalize_depth_mode(depth_mode)
    meta = _load_json(root / "meta.json")
    kd = _load_json(root / "intrinsics.json")
    try:
        k = Intrinsics(float(kd["fx"]), float(kd["fy"]), float(kd["cx"]), float(kd["cy"]),
                       int(kd["width"]), int(kd["height"]))
    except KeyError as exc:
        raise DatasetSchemaError(f"intrinsics.json lacks {exc}") from None
    mats = _load_json(root / "poses_gt.json")
    poses = []
    for i, m in enumerate(mats):
        if len(m) != 16:
            raise DatasetSchemaError(f"poses_gt.json entry {i} has {len(m)} values, expected 16")
        poses.append(Pose.from_matrix(np.array(m, dtype=float).reshape(4, 4)))
    img_dir = root / "images"
    if not img_dir.is_dir():
        raise DatasetSchemaError(f"missing images/ in {root}")
    names = sorted(p.name for p in img_dir.glob("*.png"))
    if len(names) != len(poses):
        raise DatasetSchemaError(f"{len(names)} images but {len(poses)} poses")
    images = [np.asarray(Image.open(img_dir / n).convert("RGB"), dtype=np.float64) / 255.0
              for n in names]
    scale = float(meta.get("depth_scale", DEFAULT_DEPTH_SCALE))
    loaded = {}
    for name, needed in (("depth_gt", mode == "gt"), ("depth_noisy", mode == "noisy")):
        d = root / name
        if not d.is_dir():
            if needed:
                raise DatasetSchemaError(f"depth mode {mode!r} needs {name}/ in {root}")
            loaded[name] = None
            continue
        loaded[name] = [_read_depth(d / n, scale) for n in names]
    return Dataset(k, images, poses, loaded["depth_gt"], loaded["depth_noisy"], meta, root)


def digest_dir(root) -> str:
    """SHA-256 over relative paths and contents of every file, in sorted order."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(str(p.relative_to(root)).encode())
        h.update(b"\0")
        h.update(p.read_bytes())
    return h.hexdigest()
