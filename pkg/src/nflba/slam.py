"""Alternating tracking / mapping over a Gaussian map."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import GaussianScene, Intrinsics, Pose, se3_exp
from .losses import (DegenerateMaskError, DegenerateModelError, FrameTargets, LossReport,
                     LossWeights, ShadingParams, total_objective)
from .shading import backproject, srgb_to_linear
from .splatter import EmptySceneError, RenderOptions, RenderOutput, SceneCache, render

log = logging.getLogger(__name__)


class TrackingFailure(RuntimeError):
    def __init__(self, message: str, best_pose: Pose, frame_index: int = -1):
        super().__init__(message)
        self.best_pose = best_pose
        self.frame_index = frame_index


@dataclass
class SlamConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    shading: ShadingParams = field(default_factory=ShadingParams)
    # depth variant compared against the target in each phase
    tracking_normalized_depth: bool = True
    mapping_normalized_depth: bool = True
    lowpass: float = 0.3
    tracking_iters: int = 200
    tracking_tol: float = 1e-5
    tracking_silhouette: Optional[float] = 0.9   # photometric terms only where the map is opaque
    tracking_depth_outlier: Optional[float] = None
    tracking_lr_decay: float = 0.1     # lr multiplier reached at the last iteration
    mapping_iters: int = 60
    window: int = 10
    keyframe_every: int = 5
    keyframe_dist_mm: float = 15.0
    mapping_refines_poses: bool = False
    lr_pose_rot: float = 3e-3
    lr_pose_trans: float = 3e-3    # times scene extent
    lr_means: float = 1.6e-4       # times scene extent
    lr_log_scales: float = 5e-3
    lr_quats: float = 1e-3
    lr_colors: float = 2.5e-3
    lr_opacities: float = 5e-2     # in logit space
    densify_stride: int = 1
    init_scale_factor: Optional[float] = None   # disc sigma per mm of depth
    init_scale_px: float = 0.6                  # used when the factor is unset: sigma in pixels
    init_flatness: float = 0.05              # thickness / radius of seeded discs
    init_opacity: float = 0.99
    prune_opacity: float = 0.05
    prune_every: int = 2
    mono_init_depth: float = 40.0
    seed: int = 0

    def scale_factor(self, k: Intrinsics) -> float:
        """Seed sigma per mm of depth; by default a fixed fraction of the pixel footprint."""
        if self.init_scale_factor is not None:
            return self.init_scale_factor
        return self.init_scale_px / max(k.fx, k.fy)

    def render_options(self, phase: str = "tracking") -> RenderOptions:
        norm = self.tracking_normalized_depth if phase == "tracking" else self.mapping_normalized_depth
        return RenderOptions(lowpass=self.lowpass, near=self.shading.near, normalized_depth=norm)


@dataclass
class Frame:
    index: int
    image_srgb: np.ndarray
    depth: Optional[np.ndarray] = None
    depth_source: str = "none"          # ground-truth | noisy | none
    timestamp: float = 0.0

    def __post_init__(self):
        img = np.asarray(self.image_srgb, float)
        if img.min() < 0 or img.max() > 1:
            raise ValueError("image values must lie in [0, 1]")
        if self.depth is not None and np.any(np.asarray(self.depth) < 0):
            raise ValueError("depth must be non-negative")


@dataclass
class SlamState:
    intrinsics: Intrinsics
    scene: GaussianScene = field(default_factory=GaussianScene)
    trajectory: List[tuple] = field(default_factory=list)       # (frame index, Pose)
    keyframes: List[int] = field(default_factory=list)
    logs: Dict[str, List[LossReport]] = field(default_factory=lambda: {"tracking": [], "mapping": []})
    frames: Dict[int, Frame] = field(default_factory=dict)
    targets: Dict[int, FrameTargets] = field(default_factory=dict)
    extent: float = 50.0
    keyframes_since_prune: int = 0

    def pose_of(self, index: int) -> Pose:
        for i, p in self.trajectory:
            if i == index:
                return p
        raise KeyError(index)

    def set_pose(self, index: int, pose: Pose) -> None:
        for j, (i, _) in enumerate(self.trajectory):
            if i == index:
                self.trajectory[j] = (i, pose)
                return
        raise KeyError(index)

    def targets_for(self, frame: Frame, cfg: SlamConfig) -> FrameTargets:
        if frame.index not in self.targets:
            self.targets[frame.index] = FrameTargets.from_frame(frame.image_srgb, frame.depth,
                                                                cfg.shading)
        return self.targets[frame.index]


class Adam:
    """Bias-corrected Adam over a dict of named parameter arrays."""

    def __init__(self, lrs: Dict[str, float], beta1=0.9, beta2=0.999, eps=1e-15):
        self.lrs = lrs
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, grads: Dict[str, np.ndarray], lr_scale: float = 1.0) -> Dict[str, np.ndarray]:
        """Return the update to subtract from each parameter."""
        self.t += 1
        out = {}
        for name, g in grads.items():
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g
            self.m[name], self.v[name] = m, v
            mhat = m / (1 - self.b1**self.t)
            vhat = v / (1 - self.b2**self.t)
            out[name] = lr_scale * self.lrs[name] * mhat / (np.sqrt(vhat) + self.eps)
        return out


def _pose_lr(state: SlamState, cfg: SlamConfig) -> np.ndarray:
    return np.array([cfg.lr_pose_trans * state.extent] * 3 + [cfg.lr_pose_rot] * 3)


def _predict_pose(state: SlamState) -> Pose:
    if not state.trajectory:
        return Pose.identity()
    last = state.trajectory[-1][1]
    if len(state.trajectory) < 2:
        return last
    prev = state.trajectory[-2][1]
    return (last @ prev.inverse()) @ last


def track_frame(state: SlamState, frame: Frame, cfg: SlamConfig,
                init: Optional[Pose] = None) -> Pose:
    """Minimise the tracking objective over a left se(3) perturbation of the pose."""
    k = state.intrinsics
    targets = state.targets_for(frame, cfg)
    pose = _predict_pose(state) if init is None else init
    opt = Adam({"pose": _pose_lr(state, cfg)})
    best_pose, best_val = pose, np.inf
    ropts = cfg.render_options()
    cache = SceneCache.build(state.scene)   # the map is frozen while tracking
    report = None
    for it in range(cfg.tracking_iters + 1):
        try:
            ev = total_objective(targets, state.scene, pose, k, cfg.weights, "tracking",
                                 cfg.shading, ropts, need_grad=it < cfg.tracking_iters,
                                 silhouette=cfg.tracking_silhouette,
                                 depth_outlier=cfg.tracking_depth_outlier, cache=cache)
        except (DegenerateMaskError, DegenerateModelError, EmptySceneError) as exc:
            raise TrackingFailure(str(exc), best_pose, frame.index) from exc
        val = ev.report.total
        if not np.isfinite(val) or not np.all(np.isfinite(ev.grads.pose)):
            raise TrackingFailure("objective diverged", best_pose, frame.index)
        if val < best_val:
            best_val, best_pose, report = val, pose, ev.report
        if it == cfg.tracking_iters:
            break
        decay = cfg.tracking_lr_decay ** (it / max(cfg.tracking_iters - 1, 1))
        step = opt.step({"pose": ev.grads.pose}, decay)["pose"]
        if np.abs(ev.grads.pose).max() == 0.0:
            break
        pose = se3_exp(-step) @ pose
        if np.linalg.norm(step) < cfg.tracking_tol:
            ev2 = total_objective(targets, state.scene, pose, k, cfg.weights, "tracking",
                                  cfg.shading, ropts, need_grad=False,
                                  silhouette=cfg.tracking_silhouette,
                                  depth_outlier=cfg.tracking_depth_outlier, cache=cache)
            if ev2.report.total < best_val:
                best_val, best_pose, report = ev2.report.total, pose, ev2.report
            break
    if report is not None:
        state.logs["tracking"].append(report)
    return best_pose


def select_keyframe(state: SlamState, frame: Frame, cfg: SlamConfig,
                    pose: Optional[Pose] = None) -> bool:
    if frame.index % max(cfg.keyframe_every, 1) == 0:
        return True
    if not state.keyframes:
        return True
    if pose is None:
        pose = state.pose_of(frame.index)
    last = state.pose_of(state.keyframes[-1])
    return float(np.linalg.norm(pose.center - last.center)) > cfg.keyframe_dist_mm


def _logit(p):
    p = np.clip(p, 1e-6, 1 - 1e-6)
    return np.log(p / (1 - p))


def map_update(state: SlamState, cfg: SlamConfig, iters: Optional[int] = None) -> GaussianScene:
    """Optimise all Gaussian parameters over the last ``cfg.window`` keyframes."""
    if not state.keyframes:
        raise ValueError("no keyframes to map")
    if len(state.scene) == 0:
        return state.scene
    k = state.intrinsics
    window = state.keyframes[-max(cfg.window, 1):]
    scene = state.scene
    lrs = {"means": cfg.lr_means * state.extent, "log_scales": cfg.lr_log_scales,
           "quats": cfg.lr_quats, "colors": cfg.lr_colors, "logit": cfg.lr_opacities}
    pose_opts = {kf: Adam({"pose": _pose_lr(state, cfg)}) for kf in window}
    opt = Adam(lrs)
    ropts = cfg.render_options("mapping")
    n_iter = cfg.mapping_iters if iters is None else iters
    for it in range(n_iter):
        kf = window[it % len(window)]
        frame = state.frames[kf]
        pose = state.pose_of(kf)
        try:
            ev = total_objective(state.targets_for(frame, cfg), scene, pose, k, cfg.weights,
                                 "mapping", cfg.shading, ropts,
                                 with_pose_grad=cfg.mapping_refines_poses)
        except (DegenerateMaskError, DegenerateModelError, EmptySceneError) as exc:
            log.debug("mapping step skipped on keyframe %d: %s", kf, exc)
            continue
        state.logs["mapping"].append(ev.report)
        g = ev.grads
        op = scene.opacities
        upd = opt.step({"means": g.means, "log_scales": g.log_scales, "quats": g.quats,
                        "colors": g.colors, "logit": g.opacities * op * (1 - op)})
        scene.means = scene.means - upd["means"]
        scene.log_scales = scene.log_scales - upd["log_scales"]
        scene.quats = scene.quats - upd["quats"]
        scene.colors = np.clip(scene.colors - upd["colors"], 0.0, 1.0)
        step = upd["logit"]
        # untouched opacities skip the logit round trip so a converged map stays fixed
        scene.opacities = np.where(step != 0, 1.0 / (1.0 + np.exp(-(_logit(op) - step))), op)
        scene.normalize()
        if cfg.mapping_refines_poses and kf != state.trajectory[0][0]:
            step = pose_opts[kf].step({"pose": g.pose})["pose"]
            state.set_pose(kf, se3_exp(-step) @ pose)
    return scene


def _depth_normals(points: np.ndarray, smooth: float = 1.0) -> np.ndarray:
    P = gaussian_filter(points, sigma=(smooth, smooth, 0)) if smooth > 0 else points
    dx = np.gradient(P, axis=1)
    dy = np.gradient(P, axis=0)
    n = np.cross(dx, dy)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    n = np.where(norm > 1e-12, n / np.where(norm > 1e-12, norm, 1.0), np.array([0, 0, -1.0]))
    flip = np.sum(n * points, axis=-1) > 0
    return np.where(flip[..., None], -n, n)


def _quats_from_normals(n_world: np.ndarray) -> np.ndarray:
    """Quaternions whose rotation maps +z onto +-n (sign is irrelevant for a disc)."""
    m = np.where(n_world[:, 2:3] < 0, -n_world, n_world)
    q = np.stack([1.0 + m[:, 2], -m[:, 1], m[:, 0], np.zeros(len(m))], axis=1)
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def densification_depth(state: SlamState, frame: Frame, rendered: Optional[RenderOutput],
                        cfg: SlamConfig) -> np.ndarray:
    if frame.depth is not None:
        return np.asarray(frame.depth, float)
    k = state.intrinsics
    if rendered is None:
        return np.full((k.height, k.width), cfg.mono_init_depth)
    d = rendered.depth_normalized
    covered = rendered.accum_alpha > 0.5
    fill = float(np.median(d[covered])) if covered.any() else cfg.mono_init_depth
    return np.where(covered, d, fill)


def densify_and_prune(state: SlamState, frame: Frame, rendered: Optional[RenderOutput],
                      cfg: SlamConfig, pose: Optional[Pose] = None,
                      prune: bool = True) -> GaussianScene:
    """Add disc Gaussians at uncovered pixels on a stride grid, then prune transparent ones."""
    k = state.intrinsics
    pose = state.pose_of(frame.index) if pose is None else pose
    depth = densification_depth(state, frame, rendered, cfg)
    H, W = depth.shape
    grid = np.zeros((H, W), bool)
    s = max(cfg.densify_stride, 1)
    grid[s // 2::s, s // 2::s] = True
    uncovered = np.ones((H, W), bool) if rendered is None else rendered.accum_alpha < 0.5
    sel = grid & uncovered & (depth > cfg.shading.near)
    if sel.any():
        pts_cam = backproject(depth, k)
        normals_cam = _depth_normals(pts_cam)
        inv = pose.inverse()
        means = inv.apply(pts_cam[sel])
        n_world = normals_cam[sel] @ pose.rotation
        d = depth[sel]
        scale = cfg.scale_factor(k) * d
        log_scales = np.log(np.stack([scale, scale, scale * cfg.init_flatness], axis=1))
        colors = srgb_to_linear(frame.image_srgb, cfg.shading.gamma)[sel]
        new = GaussianScene(means, log_scales, _quats_from_normals(n_world), colors,
                            np.full(len(means), cfg.init_opacity))
        state.scene.extend(new)
    if prune:
        state.keyframes_since_prune += 1
        if state.keyframes_since_prune >= max(cfg.prune_every, 1):
            state.keyframes_since_prune = 0
            state.scene.keep(state.scene.opacities >= cfg.prune_opacity)
    return state.scene


def run_slam(frames: Sequence[Frame], intrinsics: Intrinsics, cfg: SlamConfig,
             on_keyframe=None) -> SlamState:
    """Full alternation: seed from frame 0, then track, select keyframes, densify and map.

    ``on_keyframe(state, frame_index)`` is called after each map update.
    Raises TrackingFailure with the partial state attached as ``exc.state``.
    """
    if len(frames) < 2:
        raise ValueError("need at least two frames")
    state = SlamState(intrinsics=intrinsics)
    first = frames[0]
    state.frames[first.index] = first
    state.trajectory.append((first.index, Pose.identity()))
    depth0 = densification_depth(state, first, None, cfg)
    valid = depth0[depth0 > 0]
    state.extent = float(np.median(valid)) if valid.size else cfg.mono_init_depth
    densify_and_prune(state, first, None, cfg, Pose.identity(), prune=False)
    state.keyframes.append(first.index)
    map_update(state, cfg)
    if on_keyframe:
        on_keyframe(state, first.index)

    for frame in frames[1:]:
        state.frames[frame.index] = frame
        try:
            pose = track_frame(state, frame, cfg)
        except TrackingFailure as exc:
            exc.state = state
            raise
        state.trajectory.append((frame.index, pose))
        if select_keyframe(state, frame, cfg, pose):
            rendered = render(state.scene, pose, intrinsics, cfg.render_options())
            densify_and_prune(state, frame, rendered, cfg, pose)
            state.keyframes.append(frame.index)
            map_update(state, cfg)
            if on_keyframe:
                on_keyframe(state, frame.index)
        else:
            # keep memory bounded: non-keyframe targets are not revisited
            state.targets.pop(frame.index, None)
    return state
