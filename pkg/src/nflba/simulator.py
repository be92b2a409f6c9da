"""Procedural near-field-lit lumen: tube SDF, fly-through trajectory, ray-marched frames."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.ndimage import zoom

from .dataset import write_dataset
from .geometry import Intrinsics, Pose, so3_exp

GENERATOR_VERSION = "nflba-sim-1"


class SimulationError(ValueError):
    pass


@dataclass
class TubeConfig:
    radius: float = 20.0
    amplitude: float = 2.0            # ridge amplitude (mm)
    axial_frequency: float = 0.12     # rad / mm
    angular_lobes: int = 3
    angular_share: float = 0.4        # fraction of the amplitude spent on the angular term
    bend: float = 8.0                 # lateral centerline excursion (mm)
    bend_period: float = 260.0        # mm
    z_start: float = -30.0
    z_end: float = 170.0
    albedo: Tuple[float, float, float] = (0.85, 0.45, 0.40)
    albedo_texture: float = 0.0       # relative amplitude of smooth albedo blotches


@dataclass
class TrajectoryConfig:
    length: float = 100.0             # axial distance covered (mm)
    lateral: float = 2.0              # lateral oscillation amplitude (mm)
    lateral_period: float = 60.0
    look_ahead: float = 15.0
    jitter_deg: float = 0.5
    z0: float = 0.0


@dataclass
class LightingSpec:
    intensity: float = 300.0
    beta: float = 0.0
    specular_strength: float = 0.0
    shininess: float = 40.0
    gamma: float = 2.2
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.intensity <= 0 or self.gamma <= 0:
            raise SimulationError("intensity and gamma must be positive")


@dataclass
class DepthNoiseConfig:
    bias: float = 0.1
    sigma_frac: float = 0.05
    bias_grid: int = 4


@dataclass
class CameraConfig:
    width: int = 64
    height: int = 64
    fx: float = 36.0
    fy: float = 36.0

    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.fx, self.fy, self.width / 2.0, self.height / 2.0,
                          self.width, self.height)


@dataclass
class SimConfig:
    tube: TubeConfig = field(default_factory=TubeConfig)
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    lighting: LightingSpec = field(default_factory=LightingSpec)
    depth_noise: DepthNoiseConfig = field(default_factory=DepthNoiseConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    n_frames: int = 30
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


class TubeSurface:
    """Closed curved tube; the SDF is negative inside the lumen."""

    def __init__(self, cfg: TubeConfig, seed: int = 0):
        if cfg.radius <= 0 or not (0 <= cfg.amplitude < cfg.radius):
            raise SimulationError("need radius > amplitude >= 0")
        if cfg.z_end <= cfg.z_start:
            raise SimulationError("z_end must exceed z_start")
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.phases = rng.uniform(0, 2 * np.pi, size=6)
        self.albedo_rgb = np.asarray(cfg.albedo, float)
        self.lipschitz = 1.0
        self.lipschitz = self._estimate_lipschitz(rng)

    # centerline c(u) = (bx(u), by(u), u)
    def _center(self, u):
        c, p = self.cfg, self.phases
        w = 2 * np.pi / c.bend_period
        x = c.bend * np.sin(w * u + p[0])
        y = 0.5 * c.bend * np.sin(0.7 * w * u + p[1])
        dx = c.bend * w * np.cos(w * u + p[0])
        dy = 0.5 * c.bend * 0.7 * w * np.cos(0.7 * w * u + p[1])
        ddx = -c.bend * w * w * np.sin(w * u + p[0])
        ddy = -0.5 * c.bend * (0.7 * w) ** 2 * np.sin(0.7 * w * u + p[1])
        return (x, y), (dx, dy), (ddx, ddy)

    def centerline(self, u) -> np.ndarray:
        u = np.asarray(u, float)
        (x, y), _, _ = self._center(u)
        return np.stack([x, y, u], axis=-1)

    def tangent(self, u) -> np.ndarray:
        u = np.asarray(u, float)
        _, (dx, dy), _ = self._center(u)
        t = np.stack([dx, dy, np.ones_like(u)], axis=-1)
        return t / np.linalg.norm(t, axis=-1, keepdims=True)

    def closest_u(self, pts: np.ndarray) -> np.ndarray:
        u = pts[..., 2].copy()
        for _ in range(8):
            (x, y), (dx, dy), (ddx, ddy) = self._center(u)
            rx, ry, rz = pts[..., 0] - x, pts[..., 1] - y, pts[..., 2] - u
            f = rx * dx + ry * dy + rz
            fp = -(dx * dx + dy * dy + 1.0) + rx * ddx + ry * ddy
            u = u - f / fp
        return u

    def _raw_tube(self, pts: np.ndarray) -> np.ndarray:
        c, p = self.cfg, self.phases
        u = self.closest_u(pts)
        (x, y), _, _ = self._center(u)
        rx, ry, rz = pts[..., 0] - x, pts[..., 1] - y, pts[..., 2] - u
        dist = np.sqrt(rx * rx + ry * ry + rz * rz)
        # angular ridge as a bounded smooth function of the complex offset
        wz = ((rx + 1j * ry) / c.radius) ** c.angular_lobes * np.exp(1j * p[3])
        ang = 2.0 * wz.real / (1.0 + np.abs(wz) ** 2)
        ax = np.sin(c.axial_frequency * u + p[2])
        ridge = c.amplitude * ((1 - c.angular_share) * ax + c.angular_share * ang)
        return dist - (c.radius + ridge)

    def _estimate_lipschitz(self, rng) -> float:
        c = self.cfg
        n = 4000
        u = rng.uniform(c.z_start, c.z_end, n)
        r = rng.uniform(0, c.radius + c.amplitude, n)
        th = rng.uniform(0, 2 * np.pi, n)
        base = self.centerline(u)
        pts = base + np.stack([r * np.cos(th), r * np.sin(th), np.zeros(n)], axis=-1)
        g = self._grad(self._raw_tube, pts, 1e-4)
        return float(max(1.0, np.linalg.norm(g, axis=-1).max() * 1.01))

    @staticmethod
    def _grad(fn, pts, eps):
        g = np.empty(pts.shape)
        for i in range(3):
            e = np.zeros(3)
            e[i] = eps
            g[..., i] = (fn(pts + e) - fn(pts - e)) / (2 * eps)
        return g

    def sdf(self, pts) -> np.ndarray:
        pts = np.asarray(pts, float)
        tube = self._raw_tube(pts) / self.lipschitz
        caps = np.maximum(pts[..., 2] - self.cfg.z_end, self.cfg.z_start - pts[..., 2])
        return np.maximum(tube, caps)

    def normal(self, pts, eps: float = 1e-3) -> np.ndarray:
        """Unit normal pointing into the lumen (minus the SDF gradient)."""
        g = self._grad(self.sdf, np.asarray(pts, float), eps)
        return -g / np.linalg.norm(g, axis=-1, keepdims=True)

    def albedo(self, pts) -> np.ndarray:
        pts = np.asarray(pts, float)
        rgb = np.broadcast_to(self.albedo_rgb, pts.shape).copy()
        if self.cfg.albedo_texture > 0:
            p = self.phases
            blot = (np.sin(0.31 * pts[..., 2] + p[4]) * np.sin(0.23 * pts[..., 0] + 0.19 * pts[..., 1] + p[5])
                    + 0.5 * np.sin(0.57 * pts[..., 1] - 0.41 * pts[..., 2]))
            rgb = rgb * (1.0 + self.cfg.albedo_texture * blot[..., None] / 1.5)
        return np.clip(rgb, 0.0, 1.0)


def make_tube_surface(cfg: TubeConfig, seed: int = 0) -> TubeSurface:
    return TubeSurface(cfg, seed)


def look_at_pose(center: np.ndarray, target: np.ndarray, up=(0.0, 1.0, 0.0)) -> Pose:
    """World-to-camera pose with +z toward target and +y roughly along ``up``."""
    z = target - center
    z = z / np.linalg.norm(z)
    up = np.asarray(up, float)
    x = np.cross(up, z)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross([1.0, 0, 0], z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])            # rows: camera axes in world
    return Pose(R, -R @ center)


def make_trajectory(surface: TubeSurface, n_frames: int, cfg: TrajectoryConfig,
                    seed: int = 0) -> List[Pose]:
    if n_frames < 2:
        raise SimulationError("need at least two frames")
    rng = np.random.default_rng(seed + 1)
    step = cfg.length / (n_frames - 1)
    poses = []
    for i in range(n_frames):
        u = cfg.z0 + i * step
        c = surface.centerline(u)
        phase = 2 * np.pi * (u - cfg.z0) / cfg.lateral_period
        offset = cfg.lateral * np.array([np.sin(phase), 0.5 * np.sin(0.5 * phase), 0.0])
        center = c + offset
        target = surface.centerline(u + cfg.look_ahead) + 0.5 * offset
        pose = look_at_pose(center, target)
        if cfg.jitter_deg > 0:
            jitter = so3_exp(rng.normal(size=3) * np.deg2rad(cfg.jitter_deg))
            pose = Pose(jitter @ pose.rotation, jitter @ pose.translation)
        if surface.sdf(pose.center) >= -1.0:
            raise SimulationError(f"frame {i} leaves the lumen")
        poses.append(pose)
    return poses


@dataclass
class GroundTruthFrame:
    image_srgb: np.ndarray
    depth: np.ndarray
    normals: np.ndarray          # camera frame, unit, facing the camera
    albedo: np.ndarray           # linear
    linear: np.ndarray           # linear radiance before clamping/encoding
    hit: np.ndarray


def sphere_trace(surface: TubeSurface, origin: np.ndarray, dirs: np.ndarray,
                 tol: float = 1e-3, max_steps: int = 512, t_max: float = 1e4):
    n = len(dirs)
    t = np.zeros(n)
    hit = np.zeros(n, bool)
    active = np.ones(n, bool)
    for _ in range(max_steps):
        idx = np.nonzero(active)[0]
        if len(idx) == 0:
            break
        d = surface.sdf(origin + t[idx, None] * dirs[idx])
        done = np.abs(d) < tol
        hit[idx[done]] = True
        t[idx] += np.where(done, 0.0, -d)
        active[idx[done]] = False
        active &= t < t_max
    return t, hit


def render_ground_truth(surface: TubeSurface, pose: Pose, k: Intrinsics, lighting: LightingSpec,
                        rng: Optional[np.random.Generator] = None) -> GroundTruthFrame:
    rays = k.rays().reshape(-1, 3)
    dirs_cam = rays / np.linalg.norm(rays, axis=1, keepdims=True)
    dirs = dirs_cam @ pose.rotation          # rotate to world (R^T d)
    origin = pose.center
    t, hit = sphere_trace(surface, origin, dirs)
    X_world = origin + t[:, None] * dirs
    X_cam = pose.apply(X_world)
    depth = np.where(hit, X_cam[:, 2], 0.0)

    n_world = surface.normal(X_world)
    n_cam = n_world @ pose.rotation.T
    rho = surface.albedo(X_world)
    d = np.linalg.norm(X_cam, axis=1)
    dsafe = np.where(hit, d, 1.0)
    L = -X_cam / dsafe[:, None]
    lam = np.maximum(0.0, np.sum(L * n_cam, axis=1))
    ang = np.clip(np.sum(-L * np.array([0, 0, 1.0]), axis=1), 0, 1) ** lighting.beta if lighting.beta else 1.0
    att = ang / dsafe**2
    lin = lighting.intensity * rho * (att * lam)[:, None]
    if lighting.specular_strength > 0:
        # co-located light and viewer: the half vector equals the light direction
        spec = lighting.intensity * lighting.specular_strength * att * lam**lighting.shininess
        lin = lin + spec[:, None]
    lin = np.where(hit[:, None], lin, 0.0)
    img = np.clip(lin, 0.0, 1.0) ** (1.0 / lighting.gamma)
    if lighting.noise_sigma > 0:
        rng = rng or np.random.default_rng(0)
        img = np.clip(img + rng.normal(0.0, lighting.noise_sigma, img.shape), 0.0, 1.0)
    H, W = k.height, k.width
    return GroundTruthFrame(img.reshape(H, W, 3), depth.reshape(H, W),
                            np.where(hit[:, None], n_cam, 0.0).reshape(H, W, 3),
                            np.where(hit[:, None], rho, 0.0).reshape(H, W, 3),
                            lin.reshape(H, W, 3), hit.reshape(H, W))


def corrupt_depth(depth_gt: np.ndarray, cfg: DepthNoiseConfig, seed: int = 0) -> np.ndarray:
    """Smooth multiplicative bias plus depth-proportional Gaussian noise, clamped at 0."""
    depth_gt = np.asarray(depth_gt, float)
    if cfg.bias == 0 and cfg.sigma_frac == 0:
        return depth_gt.copy()
    rng = np.random.default_rng(seed)
    H, W = depth_gt.shape
    g = max(2, cfg.bias_grid)
    coarse = rng.normal(size=(g, g))
    field_ = zoom(coarse, (H / g, W / g), order=3, mode="nearest")[:H, :W]
    field_ = field_ / max(np.abs(field_).max(), 1e-12)
    noise = rng.normal(size=(H, W))
    out = depth_gt * (1.0 + cfg.bias * field_) + cfg.sigma_frac * depth_gt * noise
    return np.where(depth_gt > 0, np.maximum(out, 0.0), 0.0)


@dataclass
class SyntheticSequence:
    config: SimConfig
    intrinsics: Intrinsics
    poses: List[Pose]
    frames: List[GroundTruthFrame]
    depth_noisy: List[np.ndarray]
    surface: TubeSurface


def generate_sequence(cfg: SimConfig) -> SyntheticSequence:
    """Pure function of the configuration (including its seed)."""
    surface = make_tube_surface(cfg.tube, cfg.seed)
    k = cfg.camera.intrinsics()
    poses = make_trajectory(surface, cfg.n_frames, cfg.trajectory, cfg.seed)
    rng = np.random.default_rng(cfg.seed + 2)
    frames = [render_ground_truth(surface, p, k, cfg.lighting, rng) for p in poses]
    noisy = [corrupt_depth(f.depth, cfg.depth_noise, cfg.seed * 1000 + i)
             for i, f in enumerate(frames)]
    return SyntheticSequence(cfg, k, poses, frames, noisy, surface)


def write_sequence(seq: SyntheticSequence, root, depth_scale: Optional[float] = None):
    """Write a generated sequence in the dataset directory layout."""
    cfg = seq.config
    meta = {
        "seed": cfg.seed,
        "lighting": asdict(cfg.lighting),
        "noise_cfg": asdict(cfg.depth_noise),
        "generator_version": GENERATOR_VERSION,
        "simulator": cfg.to_dict(),
    }
    kw = {} if depth_scale is None else {"depth_scale": depth_scale}
    return write_dataset(root, [f.image_srgb for f in seq.frames], seq.intrinsics, seq.poses,
                         meta, depth_gt=[f.depth for f in seq.frames],
                         depth_noisy=seq.depth_noisy, **kw)
