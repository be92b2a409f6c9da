"""Photometric and near-field-lighting bundle-adjustment objectives."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import GaussianScene, Intrinsics, Pose
from .shading import (MaskSet, ShadingField, center_crop_mask, estimate_albedo,
                      shading_backward, shading_from_depth, specular_mask, srgb_to_linear)
from .splatter import GradientSet, RenderOptions, RenderOutput, SceneCache, render, render_backward


class DegenerateMaskError(ValueError):
    """No active pixel in the loss mask."""


class DegenerateModelError(ValueError):
    """The shading model is identically zero on the mask; no scale can be fitted."""


@dataclass
class LossWeights:
    lambda_depth: float = 0.4
    lambda_nfl_tracking: float = 0.0
    lambda_nfl_mapping: float = 0.0
    lambda_reg: float = 0.0

    def __post_init__(self):
        for name in ("lambda_depth", "lambda_nfl_tracking", "lambda_nfl_mapping", "lambda_reg"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {v}")

    def nfl(self, phase: str) -> float:
        if phase == "tracking":
            return self.lambda_nfl_tracking
        if phase == "mapping":
            return self.lambda_nfl_mapping
        raise ValueError(f"unknown phase {phase!r}")


# (tracking, mapping) NFL weights of the standard pipeline settings
NFL_PRESETS = {
    "off": (0.0, 0.0),
    "monogs_monocular": (0.0, 0.5),
    "monogs_estimated_depth": (0.001, 0.001),
    "monogs_gt_depth": (0.001, 0.001),
    "endogslam_estimated_depth": (0.01, 0.01),
    "endogslam_rgbd": (0.001, 0.005),
}


def preset_weights(name: str, lambda_depth: float = 0.4, lambda_reg: float = 0.0) -> LossWeights:
    try:
        tr, mp = NFL_PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown NFL preset {name!r}; choose from {sorted(NFL_PRESETS)}") from None
    return LossWeights(lambda_depth, tr, mp, lambda_reg)


@dataclass
class LossReport:
    total: float
    rgb_term: float
    depth_term: float
    nfl_term: float
    reg_term: float
    optimal_scale_s: float
    masked_pixel_count: int
    lambda_depth: float = 0.0
    lambda_nfl: float = 0.0
    lambda_reg: float = 0.0

    def recomposed(self) -> float:
        return (self.rgb_term + self.lambda_depth * self.depth_term
                + self.lambda_nfl * self.nfl_term + self.lambda_reg * self.reg_term)


def _mask_array(mask) -> np.ndarray:
    if isinstance(mask, MaskSet):
        return mask.combined
    return np.asarray(mask, dtype=bool)


@dataclass
class PhotometricResult:
    rgb_term: float
    depth_term: float
    grad_color: np.ndarray
    grad_depth: np.ndarray
    residual_color: np.ndarray
    residual_depth: Optional[np.ndarray]
    count: int

    def value(self, lambda_depth: float) -> float:
        return self.rgb_term + lambda_depth * self.depth_term


def photometric_ba(rendered: RenderOutput, target_image: np.ndarray,
                   target_depth: Optional[np.ndarray], mask, weights: Optional[LossWeights] = None,
                   depth_mask=None) -> PhotometricResult:
    """Masked mean L1 color residual plus masked mean L1 depth residual.

    The depth term uses the render's selected depth variant and pixels with
    positive target depth. Gradients are with respect to those same maps.
    """
    m = _mask_array(mask)
    if m.shape != rendered.shape or np.shape(target_image)[:2] != rendered.shape:
        raise ValueError("shape mismatch between render, target and mask")
    n = int(m.sum())
    if n == 0:
        raise DegenerateMaskError("photometric mask is empty")
    res_c = rendered.color - target_image
    rgb = float(np.sum(np.abs(res_c) * m[..., None])) / n
    g_color = np.sign(res_c) * m[..., None] / n

    depth_term = 0.0
    g_depth = np.zeros(rendered.shape)
    res_d = None
    if target_depth is not None:
        md = m & (target_depth > 0)
        if depth_mask is not None:
            md &= _mask_array(depth_mask)
        nd = int(md.sum())
        res_d = rendered.depth - target_depth
        if nd > 0:
            depth_term = float(np.sum(np.abs(res_d) * md)) / nd
            g_depth = np.sign(res_d) * md / nd
    return PhotometricResult(rgb, depth_term, g_color, g_depth, res_c, res_d, n)


def optimal_scale(intensity: np.ndarray, model: np.ndarray, mask) -> float:
    """Least-squares s minimising sum over masked pixels and channels of (I - s P)^2."""
    m = _mask_array(mask)
    if not m.any():
        raise DegenerateMaskError("scale-fit mask is empty")
    I = intensity[m]
    P = model[m]
    pp = float(np.sum(P * P))
    if pp < 1e-12:
        raise DegenerateModelError("shading model vanishes on the mask")
    return float(np.sum(I * P)) / pp


@dataclass
class NFLResult:
    loss: float
    scale: float
    residual: np.ndarray
    grad_shading: np.ndarray
    mask: np.ndarray
    count: int


def nfl_ba(image_linear: np.ndarray, albedo: np.ndarray, shading: ShadingField, mask) -> NFLResult:
    """Scale-invariant near-field lighting residual.

    loss = sum_p M(p) |I(p) - s rho(p) S(p)|_2 / sum_p M(p), with s the
    closed-form least-squares fit. The returned shading gradient includes the
    dependence of s on the shading.
    """
    m = _mask_array(mask) & shading.valid
    n = int(m.sum())
    if n == 0:
        raise DegenerateMaskError("NFL mask is empty")
    S = shading.shading
    P = albedo * S[..., None]
    s = optimal_scale(image_linear, P, m)
    e = image_linear - s * P
    r = np.linalg.norm(e, axis=-1)
    loss = float(np.sum(r * m)) / n

    rsafe = np.where(r > 0, r, 1.0)
    unit = np.where((m & (r > 0))[..., None], e / rsafe[..., None], 0.0) / n
    g_P = -s * unit
    dL_ds = -float(np.sum(unit * P))
    pp = float(np.sum(P[m] ** 2))
    ds_dP = np.where(m[..., None], (image_linear - 2.0 * s * P) / pp, 0.0)
    g_P = g_P + dL_ds * ds_dP
    g_S = np.sum(g_P * albedo, axis=-1)
    return NFLResult(loss, s, e, g_S, m, n)


def scale_regularizer(scene: GaussianScene):
    """Mean of (max scale / min scale - 1)^2; returns (value, grad w.r.t. log-scales)."""
    n = len(scene)
    if n == 0:
        return 0.0, np.zeros((0, 3))
    ls = scene.log_scales
    imax = np.argmax(ls, axis=1)
    imin = np.argmin(ls, axis=1)
    rows = np.arange(n)
    q = np.exp(ls[rows, imax] - ls[rows, imin])
    val = float(np.mean((q - 1.0) ** 2))
    g = np.zeros_like(ls)
    coef = 2.0 * (q - 1.0) * q / n
    np.add.at(g, (rows, imax), coef)
    np.add.at(g, (rows, imin), -coef)
    return val, g


@dataclass
class ShadingParams:
    beta: float = 0.0
    gamma: float = 2.2
    tau: float = 0.95
    crop_fraction: float = 0.75
    near: float = 0.1
    photo_specular_mask: bool = True


@dataclass
class FrameTargets:
    """Per-frame quantities that do not depend on the map or the pose."""

    image_linear: np.ndarray
    albedo: np.ndarray
    depth: Optional[np.ndarray]
    specular: np.ndarray
    crop: np.ndarray
    photo_mask: np.ndarray

    @classmethod
    def from_frame(cls, image_srgb: np.ndarray, depth: Optional[np.ndarray],
                   params: Optional[ShadingParams] = None) -> "FrameTargets":
        params = params or ShadingParams()
        lin = srgb_to_linear(image_srgb, params.gamma)
        alb = estimate_albedo(image_srgb, params.gamma)
        spec = specular_mask(lin, params.tau)
        h, w = lin.shape[:2]
        crop = center_crop_mask(w, h, params.crop_fraction)
        photo = spec if params.photo_specular_mask else np.ones((h, w), bool)
        return cls(lin, alb, depth, spec, crop, photo)


@dataclass
class Evaluation:
    report: LossReport
    grads: GradientSet
    render: RenderOutput = field(repr=False)


def total_objective(targets: FrameTargets, scene: GaussianScene, pose: Pose, k: Intrinsics,
                    weights: LossWeights, phase: str = "tracking",
                    shading: Optional[ShadingParams] = None,
                    render_opts: Optional[RenderOptions] = None,
                    with_pose_grad: bool = False, need_grad: bool = True,
                    silhouette: Optional[float] = None,
                    depth_outlier: Optional[float] = None,
                    cache: Optional[SceneCache] = None) -> Evaluation:
    """Photometric BA + lambda_NFL * NFL-BA + lambda_reg * regularizer, with gradients.

    Tracking returns pose gradients only; mapping returns Gaussian gradients
    and, when ``with_pose_grad`` is set, the pose gradient as well.
    ``silhouette`` restricts the photometric terms to pixels whose accumulated
    opacity exceeds it, so unmapped regions do not bias the fit; the mask is
    treated as constant. ``depth_outlier`` drops depth residuals larger than
    that multiple of their median (also a constant mask). ``cache`` holds
    pose-independent per-Gaussian data and must match ``scene``.
    """
    shading = shading or ShadingParams()
    ropts = render_opts or RenderOptions(near=shading.near)
    lam_nfl = weights.nfl(phase)
    out = render(scene, pose, k, ropts, cache)

    photo_mask = targets.photo_mask
    if silhouette is not None:
        photo_mask = photo_mask & (out.accum_alpha > silhouette)
    depth_mask = None
    if depth_outlier is not None and targets.depth is not None:
        err = np.abs(out.depth - targets.depth)
        sel = photo_mask & (targets.depth > 0)
        if sel.any():
            depth_mask = err <= depth_outlier * np.median(err[sel])
    photo = photometric_ba(out, targets.image_linear, targets.depth, photo_mask,
                           depth_mask=depth_mask)
    upstream = {"color": photo.grad_color, "depth": weights.lambda_depth * photo.grad_depth}

    nfl_term, s, count = 0.0, float("nan"), photo.count
    if lam_nfl > 0:
        dn = out.depth_normalized
        field_ = shading_from_depth(dn, out.normal, k, shading.beta, shading.near)
        masks = MaskSet(targets.specular, targets.crop, (dn > shading.near) & (out.accum_alpha > 1e-3))
        res = nfl_ba(targets.image_linear, targets.albedo, field_, masks)
        nfl_term, s, count = res.loss, res.scale, res.count
        g_depth, g_normal = shading_backward(field_, dn, res.grad_shading)
        upstream["depth_normalized"] = lam_nfl * g_depth
        upstream["normal"] = lam_nfl * g_normal

    reg, g_reg = (0.0, None)
    if weights.lambda_reg > 0:
        reg, g_reg = scale_regularizer(scene)

    total = (photo.rgb_term + weights.lambda_depth * photo.depth_term + lam_nfl * nfl_term
             + weights.lambda_reg * reg)
    report = LossReport(total, photo.rgb_term, photo.depth_term, nfl_term, reg, s, count,
                        weights.lambda_depth, lam_nfl, weights.lambda_reg)
    if not need_grad:
        return Evaluation(report, GradientSet.zeros(len(scene)), out)

    grads = render_backward(scene, pose, k, out, upstream, pose_only=phase == "tracking")
    if phase != "tracking":
        if g_reg is not None:
            grads.log_scales = grads.log_scales + weights.lambda_reg * g_reg
        if not with_pose_grad:
            grads.pose = np.zeros(6)
    return Evaluation(report, grads, out)
