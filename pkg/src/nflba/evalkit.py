"""Trajectory and reconstruction metrics: rigid alignment, ATE, image metrics,
one-directional Chamfer distance and PLY point-cloud I/O."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree
from skimage.metrics import structural_similarity

from .geometry import GaussianScene, Intrinsics, Pose, rotation_angle

Trajectory = Sequence[Tuple[int, Pose]]

PSNR_CAP_DB = 100.0


class RankDeficiencyError(ValueError):
    """Camera centers are (nearly) collinear; the rigid alignment is not unique."""


class EmptyCloudError(ValueError):
    pass


@dataclass(frozen=True)
class Alignment:
    """Maps estimated world points into the reference world: x -> s R x + t."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(points, float) @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.scale * self.rotation
        T[:3, 3] = self.translation
        return T

    def transform_pose(self, pose: Pose) -> Pose:
        """World-to-camera pose expressed in the reference world (rotation part only for Sim(3))."""
        R = pose.rotation @ self.rotation.T
        c = self.apply(pose.center[None])[0]
        return Pose(R, -R @ c)


IDENTITY = Alignment(np.eye(3), np.zeros(3))


def _check_pair(est: Trajectory, gt: Trajectory):
    if len(est) != len(gt):
        raise ValueError(f"trajectory lengths differ: {len(est)} vs {len(gt)}")
    ie = [int(i) for i, _ in est]
    ig = [int(i) for i, _ in gt]
    if ie != ig:
        raise ValueError("trajectory frame indices do not match")
    if any(b <= a for a, b in zip(ie, ie[1:])):
        raise ValueError("trajectory indices must be strictly increasing")


def centers(traj: Trajectory) -> np.ndarray:
    return np.array([p.center for _, p in traj]).reshape(-1, 3)


def align_rigid(est: Trajectory, gt: Trajectory, with_scale: bool = False,
                rank_tol: float = 1e-9) -> Alignment:
    """Closed-form least-squares alignment of camera centers (Umeyama)."""
    _check_pair(est, gt)
    if len(est) < 3:
        raise ValueError("alignment needs at least three poses")
    X = centers(est)
    Y = centers(gt)
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mx, Y - my
    sv = np.linalg.svd(Xc, compute_uv=False)
    if sv[0] == 0 or sv[1] <= rank_tol * max(sv[0], 1.0):
        raise RankDeficiencyError("camera centers are collinear")
    cov = Yc.T @ Xc / len(X)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = 1.0
    if with_scale:
        var = np.sum(Xc**2) / len(X)
        s = float(np.trace(np.diag(D) @ S) / var)
    t = my - s * R @ mx
    return Alignment(R, t, s)


def _pose_errors(est: Trajectory, gt: Trajectory, al: Alignment):
    dt, dr = [], []
    for (_, pe), (_, pg) in zip(est, gt):
        pa = al.transform_pose(pe)
        dt.append(float(np.linalg.norm(pa.center - pg.center)))
        dr.append(float(np.degrees(rotation_angle(pa.rotation @ pg.rotation.T))))
    return np.array(dt), np.array(dr)


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x)))) if len(x) else 0.0


def ate(est: Trajectory, gt: Trajectory, aligned: bool = True, with_scale: bool = False,
        per_frame: bool = False):
    """RMSE of camera-center distances (mm) and of geodesic rotation angles (degrees)."""
    _check_pair(est, gt)
    al = align_rigid(est, gt, with_scale) if aligned else IDENTITY
    dt, dr = _pose_errors(est, gt, al)
    res = (_rms(dt), _rms(dr))
    return (res + (dt, dr)) if per_frame else res


def psnr(rendered: np.ndarray, target: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(rendered, float) - np.asarray(target, float)) ** 2))
    if mse < 1e-10:
        return PSNR_CAP_DB
    return float(min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse)))


def ssim(rendered: np.ndarray, target: np.ndarray) -> float:
    """Single-scale SSIM, 11x11 Gaussian window (sigma 1.5), averaged over channels."""
    a = np.asarray(rendered, float)
    b = np.asarray(target, float)
    kw = dict(gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
              data_range=1.0, K1=0.01, K2=0.03)
    if a.ndim == 3:
        return float(np.mean([structural_similarity(a[..., c], b[..., c], **kw)
                              for c in range(a.shape[-1])]))
    return float(structural_similarity(a, b, **kw))


def image_metrics(rendered: np.ndarray, target: np.ndarray) -> Tuple[float, float, float]:
    """(psnr_db, ssim, rmse) for images in [0, 1]."""
    rendered = np.asarray(rendered, float)
    target = np.asarray(target, float)
    if rendered.shape != target.shape:
        raise ValueError(f"shape mismatch {rendered.shape} vs {target.shape}")
    rmse = float(np.sqrt(np.mean((rendered - target) ** 2)))
    return psnr(rendered, target), ssim(rendered, target), rmse


def depth_rmse(rendered: np.ndarray, target: np.ndarray, valid: Optional[np.ndarray] = None) -> float:
    m = np.asarray(target) > 0 if valid is None else np.asarray(valid, bool)
    if not m.any():
        return float("nan")
    return float(np.sqrt(np.mean((np.asarray(rendered)[m] - np.asarray(target)[m]) ** 2)))


def chamfer_gt_to_est(gt_cloud: np.ndarray, est_cloud: np.ndarray) -> float:
    """Mean distance from each ground-truth point to its nearest estimated point."""
    gt_cloud = np.asarray(gt_cloud, float).reshape(-1, 3)
    est_cloud = np.asarray(est_cloud, float).reshape(-1, 3)
    if len(gt_cloud) == 0 or len(est_cloud) == 0:
        raise EmptyCloudError("chamfer needs two non-empty clouds")
    d, _ = cKDTree(est_cloud).query(gt_cloud, k=1)
    return float(np.mean(d))


# -- PLY ---------------------------------------------------------------------

_PLY_DTYPE = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                       ("red", "u1"), ("green", "u1"), ("blue", "u1")])


def encode_colors(colors_linear: np.ndarray, gamma: float = 2.2) -> np.ndarray:
    c = np.clip(np.asarray(colors_linear, float), 0.0, 1.0) ** (1.0 / gamma)
    return np.round(c * 255.0).astype(np.uint8)


def export_ply(path, points, colors_linear=None, gamma: float = 2.2) -> Path:
    """Binary little-endian PLY with float32 xyz (mm) and uint8 gamma-encoded rgb.

    ``points`` may be a GaussianScene, in which case its centers and colors are used.
    """
    if isinstance(points, GaussianScene):
        colors_linear = points.colors if colors_linear is None else colors_linear
        points = points.means
    pts = np.asarray(points, float).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyCloudError("refusing to write an empty point cloud")
    cols = np.ones_like(pts) if colors_linear is None else np.asarray(colors_linear, float)
    rgb = encode_colors(cols, gamma)
    data = np.empty(len(pts), dtype=_PLY_DTYPE)
    data["x"], data["y"], data["z"] = pts.T.astype(np.float32)
    data["red"], data["green"], data["blue"] = rgb.T
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(pts)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(data.tobytes())
    return path


def read_ply(path) -> Tuple[np.ndarray, np.ndarray]:
    """Read a file written by export_ply; returns (xyz float32, rgb uint8)."""
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply\n") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    header = raw[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise ValueError(f"{path}: only binary little-endian PLY is supported")
    n = next(int(l.split()[2]) for l in header if l.startswith("element vertex"))
    data = np.frombuffer(raw, dtype=_PLY_DTYPE, count=n, offset=end + len(b"end_header\n"))
    xyz = np.stack([data["x"], data["y"], data["z"]], axis=1)
    rgb = np.stack([data["red"], data["green"], data["blue"]], axis=1)
    return xyz, rgb


# -- report ------------------------------------------------------------------

@dataclass
class FrameMetrics:
    frame_index: int
    ate_t_mm: float
    ate_r_deg: float
    psnr_db: float = float("nan")
    ssim: float = float("nan")
    rmse: float = float("nan")
    depth_rmse_mm: float = float("nan")


@dataclass
class MetricsReport:
    ate_t_mm: float
    ate_r_deg: float
    psnr_db_mean: float
    ssim_mean: float
    depth_rmse_mm: float
    chamfer_mm: float
    per_frame: List[FrameMetrics] = field(default_factory=list)
    config_digest: str = ""
    image_space: str = "gamma-encoded"
    alignment: str = "se3"

    def __post_init__(self):
        if self.ate_t_mm < 0 or (np.isfinite(self.chamfer_mm) and self.chamfer_mm < 0):
            raise ValueError("metrics must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, allow_nan=True))

    @classmethod
    def load(cls, path) -> "MetricsReport":
        d = json.loads(Path(path).read_text())
        d["per_frame"] = [FrameMetrics(**f) for f in d.get("per_frame", [])]
        return cls(**d)


def gt_point_cloud(depths: Sequence[np.ndarray], poses: Sequence[Pose], k: Intrinsics,
                   stride: int = 1) -> np.ndarray:
    """World points backprojected from ground-truth depth maps (pixels with depth > 0)."""
    rays = k.rays()[::stride, ::stride]
    out = []
    for d, pose in zip(depths, poses):
        d = np.asarray(d, float)[::stride, ::stride]
        m = d > 0
        out.append(pose.inverse().apply(d[m][:, None] * rays[m]))
    return np.concatenate(out) if out else np.zeros((0, 3))


def evaluate(est: Trajectory, gt: Trajectory, *,
             images: Optional[Mapping[int, np.ndarray]] = None,
             renders: Optional[Mapping[int, np.ndarray]] = None,
             gt_depths: Optional[Mapping[int, np.ndarray]] = None,
             rendered_depths: Optional[Mapping[int, np.ndarray]] = None,
             gt_cloud: Optional[np.ndarray] = None,
             est_cloud: Optional[np.ndarray] = None,
             with_scale: bool = False, config_digest: str = "") -> MetricsReport:
    """Full report for one run.

    Image metrics cover the frames present in ``renders`` (sRGB, compared with
    ``images``); depth RMSE covers frames in ``rendered_depths`` where both
    depths are positive. The estimated cloud lives in the estimate's world frame
    and is mapped through the trajectory alignment before the Chamfer distance.
    Trajectories that cannot be aligned are compared as they are
    (``alignment="none"`` in the report).
    """
    _check_pair(est, gt)
    label = "sim3" if with_scale else "se3"
    try:
        al = align_rigid(est, gt, with_scale)
    except ValueError:
        # too few or collinear poses (e.g. a run that failed early)
        al, label = IDENTITY, "none"
    dt, dr = _pose_errors(est, gt, al)
    renders = renders or {}
    rendered_depths = rendered_depths or {}
    per, ps, ss, sq, cnt = [], [], [], 0.0, 0
    for j, (i, _) in enumerate(est):
        fm = FrameMetrics(int(i), float(dt[j]), float(dr[j]))
        if i in renders and images is not None:
            fm.psnr_db, fm.ssim, fm.rmse = image_metrics(renders[i], images[i])
            ps.append(fm.psnr_db)
            ss.append(fm.ssim)
        if i in rendered_depths and gt_depths is not None:
            rd, gd = np.asarray(rendered_depths[i]), np.asarray(gt_depths[i])
            m = (rd > 0) & (gd > 0)
            fm.depth_rmse_mm = depth_rmse(rd * al.scale, gd, m)
            if m.any():
                sq += float(np.sum((rd[m] * al.scale - gd[m]) ** 2))
                cnt += int(m.sum())
        per.append(fm)
    chamfer = float("nan")
    if gt_cloud is not None and est_cloud is not None:
        chamfer = chamfer_gt_to_est(gt_cloud, al.apply(est_cloud))
    nan = float("nan")
    return MetricsReport(
        ate_t_mm=_rms(dt), ate_r_deg=_rms(dr),
        psnr_db_mean=float(np.mean(ps)) if ps else nan,
        ssim_mean=float(np.mean(ss)) if ss else nan,
        depth_rmse_mm=float(np.sqrt(sq / cnt)) if cnt else nan,
        chamfer_mm=chamfer, per_frame=per, config_digest=config_digest,
        alignment=label,
    )
