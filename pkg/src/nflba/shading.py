"""Near-field point-light shading with the light co-located at the camera.

All quantities live in camera coordinates, so the light sits at the origin
and the light direction of a surface point X is -X/|X|.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy.ndimage import binary_dilation

from .geometry import Intrinsics

log = logging.getLogger(__name__)

OPTICAL_AXIS = np.array([0.0, 0.0, 1.0])
_clamped_values = 0


def clamp_count() -> int:
    """Number of out-of-range values clamped by srgb_to_linear so far."""
    return _clamped_values


def backproject(depth: np.ndarray, k: Intrinsics) -> np.ndarray:
    """Camera-space point map depth * K^-1 [x, y, 1]."""
    return np.asarray(depth, float)[..., None] * k.rays()


@dataclass
class ShadingField:
    points: np.ndarray
    light_dir: np.ndarray
    attenuation: np.ndarray
    lambert: np.ndarray
    shading: np.ndarray
    valid: np.ndarray
    beta: float = 0.0
    axis: np.ndarray = OPTICAL_AXIS


def shading_field(points: np.ndarray, normals: np.ndarray, beta: float = 0.0,
                  axis: Optional[np.ndarray] = None) -> ShadingField:
    """Light direction, inverse-square attenuation and clamped Lambert shading per pixel."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    axis = OPTICAL_AXIS if axis is None else np.asarray(axis, float)
    points = np.asarray(points, float)
    d = np.linalg.norm(points, axis=-1)
    valid = d >= 1e-6
    safe = np.where(valid, d, 1.0)
    light_dir = np.where(valid[..., None], -points / safe[..., None], 0.0)
    if beta == 0:
        ang = np.ones_like(d)
    else:
        ang = np.maximum(0.0, np.clip(-light_dir @ axis, 0.0, 1.0)) ** beta
    att = np.where(valid, ang / safe**2, 0.0)
    lam = np.maximum(0.0, np.sum(light_dir * normals, axis=-1))
    shading = np.where(valid, att * lam, 0.0)
    return ShadingField(points, light_dir, att, lam, shading, valid, beta, axis)


def shading_from_depth(depth: np.ndarray, normals: np.ndarray, k: Intrinsics,
                       beta: float = 0.0, near: float = 0.0) -> ShadingField:
    field = shading_field(backproject(depth, k), normals, beta)
    field.valid &= np.asarray(depth) > near
    field.shading = np.where(field.valid, field.shading, 0.0)
    return field


def shading_backward(field: ShadingField, depth: np.ndarray, grad_shading: np.ndarray):
    """dL/d(depth) and dL/d(normal) for a field built by shading_from_depth.

    With points on fixed rays the light direction does not depend on depth
    and the attenuation scales as depth^-2.
    """
    g = np.where(field.valid, grad_shading, 0.0)
    safe = np.where(field.valid, depth, 1.0)
    g_depth = np.where(field.valid, -2.0 * g * field.shading / safe, 0.0)
    lit = field.valid & (field.lambert > 0)
    g_normal = np.where(lit[..., None], (g * field.attenuation)[..., None] * field.light_dir, 0.0)
    return g_depth, g_normal


def srgb_to_linear(image: np.ndarray, gamma: float = 2.2) -> np.ndarray:
    """Elementwise power-law decode; out-of-range inputs are clamped and counted."""
    global _clamped_values
    image = np.asarray(image, float)
    bad = int(np.count_nonzero((image < 0) | (image > 1)))
    if bad:
        _clamped_values += bad
        log.warning("clamped %d values outside [0, 1]", bad)
        image = np.clip(image, 0.0, 1.0)
    return image**gamma


def linear_to_srgb(image: np.ndarray, gamma: float = 2.2) -> np.ndarray:
    return np.clip(image, 0.0, 1.0) ** (1.0 / gamma)


def estimate_albedo(image_srgb: np.ndarray, gamma: float = 2.2) -> np.ndarray:
    """Relative albedo: set HSV value to one, back to RGB, then linearize.

    Black pixels have zero saturation in this conversion and map to white.
    """
    hsv = rgb_to_hsv(np.clip(np.asarray(image_srgb, float), 0.0, 1.0))
    hsv[..., 2] = 1.0
    return srgb_to_linear(hsv_to_rgb(hsv), gamma)


def specular_mask(image_linear: np.ndarray, tau: float = 0.95) -> np.ndarray:
    """1 where the diffuse model is trusted; saturated pixels and their 8-neighbours are 0."""
    hot = np.max(image_linear, axis=-1) > tau
    hot = binary_dilation(hot, structure=np.ones((3, 3), bool))
    return ~hot


def center_crop_mask(width: int, height: int, fraction: float = 0.75) -> np.ndarray:
    """Centered rectangle with sides fraction*dimension rounded to the nearest even number."""
    if not (0 < fraction <= 1):
        raise ValueError("crop fraction must lie in (0, 1]")
    mask = np.zeros((height, width), dtype=bool)
    if fraction == 1:
        mask[:] = True
        return mask

    def span(n):
        side = min(n, max(2, 2 * int(round(fraction * n / 2.0))))
        lo = (n - side) // 2
        return lo, lo + side

    y0, y1 = span(height)
    x0, x1 = span(width)
    mask[y0:y1, x0:x1] = True
    return mask


@dataclass
class MaskSet:
    specular: np.ndarray
    crop: np.ndarray
    valid_depth: np.ndarray

    @property
    def combined(self) -> np.ndarray:
        return self.specular & self.crop & self.valid_depth
