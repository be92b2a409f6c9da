"""Differentiable software rasterizer for 3D Gaussians.

Forward: project every Gaussian (EWA-style local affine approximation),
sort globally by camera-space depth, build (Gaussian, pixel) pairs inside
each 3-sigma footprint and alpha-composite front to back per pixel.
Backward: reverse traversal of the stored per-pixel contributions, then
the projection chain down to Gaussian parameters and a left-multiplied
se(3) pose perturbation (translation first).

Everything is vectorised with numpy. Reductions go through ``np.bincount``
over a fixed pair order, so results do not depend on the input order of
the Gaussians.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np
from numba import njit

from .geometry import (GaussianScene, Gaussian3D, Intrinsics, Pose, hat, normals_from_factors,
                       quat_to_rotmat, quat_to_rotmat_backward)

_GENERATORS = np.stack([hat(e) for e in np.eye(3)])


class EmptySceneError(ValueError):
    pass


@dataclass(frozen=True)
class RenderOptions:
    lowpass: float = 0.3
    near: float = 0.1
    alpha_min: float = 1.0 / 255.0
    alpha_max: float = 0.99
    transmittance_min: float = 1e-4
    normalized_depth: bool = False
    frustum_margin: float = 1.3
    # kept for interface parity; the numpy rasterizer is single pass
    tile_size: int = 16


@dataclass
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    normal_cam: np.ndarray
    color: np.ndarray
    opacity: float
    source_index: int
    culled: bool


def _mm(A, B):
    return np.matmul(A, B)


def _T(A):
    return np.swapaxes(A, -1, -2)


@dataclass
class _Projection:
    index: np.ndarray       # source indices of visible Gaussians, front to back
    t: np.ndarray           # camera-space means
    mean2d: np.ndarray
    cov2d: np.ndarray       # with low-pass
    conic: np.ndarray       # (a, b, c)
    J: np.ndarray
    W: np.ndarray
    cov_cam: np.ndarray
    rot: np.ndarray         # Gaussian rotation matrices
    normal_cam: np.ndarray
    normal_sign: np.ndarray
    normal_axis: np.ndarray
    normal_valid: np.ndarray
    bbox: np.ndarray        # x0, x1, y0, y1 inclusive


@dataclass
class SceneCache:
    """Pose-independent per-Gaussian quantities; valid while the scene is unchanged.

    Build one with ``SceneCache.build(scene)`` when rendering the same scene
    from many poses (tracking); it is never refreshed automatically.
    """

    scales: np.ndarray
    rot: np.ndarray
    cov: np.ndarray            # world covariances
    normal: np.ndarray         # world shortest axes (zero when degenerate)
    axis: np.ndarray
    valid: np.ndarray

    @classmethod
    def build(cls, scene: GaussianScene) -> "SceneCache":
        scales = np.exp(scene.log_scales)
        rot = quat_to_rotmat(scene.quats).reshape(-1, 3, 3)
        M = rot * scales[:, None, :]
        n_w, axis, valid = normals_from_factors(scales, scene.quats)
        return cls(scales, rot, _mm(M, _T(M)), n_w.reshape(-1, 3), axis, valid)


def _project(scene: GaussianScene, pose: Pose, k: Intrinsics, opts: RenderOptions,
             cache: Optional[SceneCache] = None, keep_all: bool = False):
    """Project Gaussians in front of the camera and inside the frustum guard band.

    Returns (projection, visible mask over the projection's rows). Rows are
    all Gaussians when ``keep_all`` is set, else only the depth/frustum survivors.
    """
    W = pose.rotation
    t_all = scene.means @ W.T + pose.translation
    x, y, z = t_all.T
    zs = np.where(np.abs(z) < 1e-12, 1e-12, z)
    # guard band around the frustum; splats far outside it blow up under J
    lim_x = opts.frustum_margin * max(k.cx, k.width - k.cx) / k.fx
    lim_y = opts.frustum_margin * max(k.cy, k.height - k.cy) / k.fy
    front = (z > opts.near) & (np.abs(x) <= lim_x * zs) & (np.abs(y) <= lim_y * zs)
    idx = np.arange(len(t_all)) if keep_all else np.nonzero(front)[0]
    cache = cache or SceneCache.build(scene)
    t = t_all[idx]
    x, y, z, zs = x[idx], y[idx], z[idx], zs[idx]
    rot = cache.rot[idx]
    cov_cam = _mm(_mm(W[None], cache.cov[idx]), W.T[None])
    J = np.zeros((len(t), 2, 3))
    J[:, 0, 0] = k.fx / zs
    J[:, 0, 2] = -k.fx * x / zs**2
    J[:, 1, 1] = k.fy / zs
    J[:, 1, 2] = -k.fy * y / zs**2
    cov2d = _mm(_mm(J, cov_cam), _T(J))
    cov2d[:, 0, 0] += opts.lowpass
    cov2d[:, 1, 1] += opts.lowpass
    A, B, C = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = A * C - B * B
    good = front[idx] & (det > 0)
    det = np.where(good, det, 1.0)
    conic = np.stack([C / det, -B / det, A / det], axis=1)
    mean2d = np.stack([k.fx * x / zs + k.cx, k.fy * y / zs + k.cy], axis=1)
    mid = 0.5 * (A + C)
    lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = 3.0 * np.sqrt(np.maximum(lam, 0.0))
    with np.errstate(invalid="ignore"):
        x0 = np.maximum(np.ceil(mean2d[:, 0] - radius), 0)
        x1 = np.minimum(np.floor(mean2d[:, 0] + radius), k.width - 1)
        y0 = np.maximum(np.ceil(mean2d[:, 1] - radius), 0)
        y1 = np.minimum(np.floor(mean2d[:, 1] + radius), k.height - 1)
    good &= (x1 >= x0) & (y1 >= y0) & np.all(np.isfinite(mean2d), axis=1)
    bbox = np.stack([x0, x1, y0, y1], axis=1)
    bbox = np.where(np.isfinite(bbox), bbox, 0).astype(np.int64)

    valid = cache.valid[idx]
    n_cam = cache.normal[idx] @ W.T
    facing = np.sum(n_cam * t, axis=1)
    sign = np.where((facing > 0) | ((facing == 0) & (n_cam[:, 2] > 0)), -1.0, 1.0)
    sign = np.where(valid, sign, 0.0)
    n_cam = n_cam * sign[:, None]

    proj = _Projection(
        index=idx, t=t, mean2d=mean2d, cov2d=cov2d, conic=conic, J=J,
        W=W, cov_cam=cov_cam, rot=rot, normal_cam=n_cam, normal_sign=sign,
        normal_axis=cache.axis[idx], normal_valid=valid, bbox=bbox,
    )
    return proj, good


def project_gaussian(g: Gaussian3D, pose: Pose, k: Intrinsics,
                     opts: Optional[RenderOptions] = None, source_index: int = 0) -> Splat2D:
    opts = opts or RenderOptions()
    scene = GaussianScene.from_gaussians([g])
    proj, good = _project(scene, pose, k, opts, keep_all=True)
    return Splat2D(mean2d=proj.mean2d[0], cov2d=proj.cov2d[0], depth=float(proj.t[0, 2]),
                   normal_cam=proj.normal_cam[0], color=np.asarray(g.color, float),
                   opacity=float(g.opacity), source_index=source_index, culled=not bool(good[0]))


@njit(cache=True)
def _raster_forward(mean2d, conic, opac, feats, bbox, width, height,
                    alpha_min, alpha_max, t_min):
    nv = mean2d.shape[0]
    nfeat = feats.shape[1]
    npix = width * height
    offsets = np.zeros(npix + 1, np.int64)
    for g in range(nv):
        for y in range(bbox[g, 2], bbox[g, 3] + 1):
            for x in range(bbox[g, 0], bbox[g, 1] + 1):
                offsets[y * width + x + 1] += 1
    for p in range(npix):
        offsets[p + 1] += offsets[p]
    ids = np.empty(offsets[npix], np.int64)
    fill = offsets[:npix].copy()
    for g in range(nv):
        for y in range(bbox[g, 2], bbox[g, 3] + 1):
            for x in range(bbox[g, 0], bbox[g, 1] + 1):
                p = y * width + x
                ids[fill[p]] = g
                fill[p] += 1

    total = offsets[npix]
    pg = np.empty(total, np.int64)
    palpha = np.empty(total)
    pT = np.empty(total)
    pG = np.empty(total)
    pclamp = np.empty(total, np.bool_)
    poff = np.zeros(npix + 1, np.int64)
    out = np.zeros((npix, nfeat))
    accum = np.zeros(npix)
    n = 0
    for p in range(npix):
        px = p % width
        py = p // width
        T = 1.0
        acc = 0.0
        for j in range(offsets[p], offsets[p + 1]):
            g = ids[j]
            dx = px - mean2d[g, 0]
            dy = py - mean2d[g, 1]
            power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
            if power > 0.0:
                continue
            G = np.exp(power)
            raw = opac[g] * G
            if raw < alpha_min:
                continue
            if T < t_min:
                break
            a = raw
            clamped = False
            if raw > alpha_max:
                a = alpha_max
                clamped = True
            w = a * T
            for f in range(nfeat):
                out[p, f] += w * feats[g, f]
            acc += w
            pg[n] = g
            palpha[n] = a
            pT[n] = T
            pG[n] = G
            pclamp[n] = clamped
            n += 1
            T = T * (1.0 - a)
        accum[p] = acc
        poff[p + 1] = n
    return out, accum, poff, pg[:n].copy(), palpha[:n].copy(), pT[:n].copy(), pG[:n].copy(), pclamp[:n].copy()


@njit(cache=True)
def _raster_backward(width, poff, pg, palpha, pT, pG, pclamp, mean2d, conic, opac, feats,
                     g_out, g_alpha, nv):
    nfeat = feats.shape[1]
    npix = poff.shape[0] - 1
    d_feat = np.zeros((nv, nfeat))
    d_opac = np.zeros(nv)
    d_u = np.zeros(nv)
    d_v = np.zeros(nv)
    d_ca = np.zeros(nv)
    d_cb = np.zeros(nv)
    d_cc = np.zeros(nv)
    for p in range(npix):
        lo = poff[p]
        hi = poff[p + 1]
        if lo == hi:
            continue
        px = p % width
        py = p // width
        S = 0.0
        for j in range(hi - 1, lo - 1, -1):
            g = pg[j]
            a = palpha[j]
            T = pT[j]
            w = a * T
            gf = g_alpha[p]
            for f in range(nfeat):
                gf += g_out[p, f] * feats[g, f]
                d_feat[g, f] += w * g_out[p, f]
            da = T * gf - S / (1.0 - a)
            S += w * gf
            if pclamp[j]:
                continue
            G = pG[j]
            d_opac[g] += da * G
            dpow = da * opac[g] * G
            dx = px - mean2d[g, 0]
            dy = py - mean2d[g, 1]
            d_u[g] += dpow * (conic[g, 0] * dx + conic[g, 1] * dy)
            d_v[g] += dpow * (conic[g, 1] * dx + conic[g, 2] * dy)
            d_ca[g] += dpow * (-0.5 * dx * dx)
            d_cb[g] += dpow * (-dx * dy)
            d_cc[g] += dpow * (-0.5 * dy * dy)
    return d_feat, d_opac, d_u, d_v, d_ca, d_cb, d_cc


@dataclass
class ContributionLog:
    """Per-pixel contributions in CSR layout; ``offsets`` indexes the flat pair arrays."""

    offsets: np.ndarray
    gauss: np.ndarray       # position in the sorted visible list
    alpha: np.ndarray
    transmittance: np.ndarray
    gval: np.ndarray
    clamped: np.ndarray


@dataclass
class RenderOutput:
    color: np.ndarray
    depth_raw: np.ndarray
    depth_normalized: np.ndarray
    normal: np.ndarray
    normal_raw: np.ndarray
    accum_alpha: np.ndarray
    normalized_depth: bool = False
    log: Optional[ContributionLog] = field(default=None, repr=False)
    _proj: Optional[_Projection] = field(default=None, repr=False)
    _feats: Optional[np.ndarray] = field(default=None, repr=False)
    _opacities: Optional[np.ndarray] = field(default=None, repr=False)
    _n_gauss: int = 0

    @property
    def depth(self) -> np.ndarray:
        return self.depth_normalized if self.normalized_depth else self.depth_raw

    @property
    def shape(self):
        return self.accum_alpha.shape

    def contributions(self, x: int, y: int):
        """Ordered (source_index, alpha, transmittance_before) at pixel (x, y)."""
        if self.log is None:
            return []
        p = y * self.accum_alpha.shape[1] + x
        lo, hi = self.log.offsets[p], self.log.offsets[p + 1]
        return [(int(self._proj.index[self.log.gauss[j]]), float(self.log.alpha[j]),
                 float(self.log.transmittance[j])) for j in range(lo, hi)]

    def weights_sum(self) -> np.ndarray:
        lg = self.log
        w = lg.alpha * lg.transmittance
        pix = np.repeat(np.arange(len(lg.offsets) - 1), np.diff(lg.offsets))
        return np.bincount(pix, weights=w, minlength=self.accum_alpha.size).reshape(self.shape)


def render(scene: GaussianScene, pose: Pose, k: Intrinsics,
           opts: Optional[RenderOptions] = None, cache: Optional[SceneCache] = None) -> RenderOutput:
    """Composite color, depth, normals and accumulated opacity for one view."""
    opts = opts or RenderOptions()
    if len(scene) == 0:
        raise EmptySceneError("cannot render an empty scene")
    proj_all, good = _project(scene, pose, k, opts, cache)
    vis = np.nonzero(good)[0]
    # rows are in source order, so ties in depth resolve by source index
    rows = vis[np.lexsort((proj_all.index[vis], proj_all.t[vis, 2]))]
    order = proj_all.index[rows]
    proj = _Projection(
        index=order, t=proj_all.t[rows], mean2d=proj_all.mean2d[rows],
        cov2d=proj_all.cov2d[rows], conic=proj_all.conic[rows], J=proj_all.J[rows],
        W=proj_all.W, cov_cam=proj_all.cov_cam[rows], rot=proj_all.rot[rows],
        normal_cam=proj_all.normal_cam[rows], normal_sign=proj_all.normal_sign[rows],
        normal_axis=proj_all.normal_axis[rows], normal_valid=proj_all.normal_valid[rows],
        bbox=proj_all.bbox[rows],
    )
    opac = np.ascontiguousarray(scene.opacities[order])
    feats = np.ascontiguousarray(np.concatenate(
        [scene.colors[order], proj.t[:, 2:3], proj.normal_cam], axis=1))
    out, accum, poff, pg, pa, pT, pG, pc = _raster_forward(
        np.ascontiguousarray(proj.mean2d), np.ascontiguousarray(proj.conic), opac, feats,
        np.ascontiguousarray(proj.bbox), k.width, k.height, opts.alpha_min, opts.alpha_max,
        opts.transmittance_min)

    shape = (k.height, k.width)
    depth = out[:, 3]
    nraw = out[:, 4:7]
    ok = accum > 1e-3
    depth_norm = np.where(ok, depth / np.where(ok, accum, 1.0), 0.0)
    nn = np.linalg.norm(nraw, axis=1, keepdims=True)
    normal = np.where(nn > 1e-6, nraw / np.where(nn > 1e-6, nn, 1.0), 0.0)
    return RenderOutput(
        color=out[:, :3].reshape(*shape, 3), depth_raw=depth.reshape(shape),
        depth_normalized=depth_norm.reshape(shape), normal=normal.reshape(*shape, 3),
        normal_raw=nraw.reshape(*shape, 3), accum_alpha=accum.reshape(shape),
        normalized_depth=opts.normalized_depth,
        log=ContributionLog(poff, pg, pa, pT, pG, pc),
        _proj=proj, _feats=feats, _opacities=opac, _n_gauss=len(scene),
    )


@dataclass
class GradientSet:
    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray
    pose: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "GradientSet":
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)),
                   np.zeros(n), np.zeros(6))

    def __iadd__(self, other: "GradientSet") -> "GradientSet":
        for name in ("means", "log_scales", "quats", "colors", "opacities", "pose"):
            setattr(self, name, getattr(self, name) + getattr(other, name))
        return self

    def scaled(self, f: float) -> "GradientSet":
        return GradientSet(self.means * f, self.log_scales * f, self.quats * f,
                           self.colors * f, self.opacities * f, self.pose * f)

    def max_abs(self) -> float:
        return max(float(np.abs(getattr(self, n)).max(initial=0.0)) for n in
                   ("means", "log_scales", "quats", "colors", "opacities", "pose"))


def render_backward(scene: GaussianScene, pose: Pose, k: Intrinsics, output: RenderOutput,
                    upstream: Mapping[str, np.ndarray], pose_only: bool = False) -> GradientSet:
    """Chain per-pixel map gradients back to Gaussian parameters and the pose.

    With ``pose_only`` the Gaussian parameter gradients are left at zero.

    ``upstream`` keys: ``color`` (H,W,3), ``depth`` (H,W, the variant selected
    at render time), ``depth_raw``, ``depth_normalized``, ``normal`` (H,W,3,
    gradient w.r.t. the unit normal map), ``normal_raw``, ``alpha`` (H,W).
    """
    H, W_ = output.shape
    npix = H * W_
    expected = {"color": (H, W_, 3), "depth": (H, W_), "depth_raw": (H, W_),
                "depth_normalized": (H, W_), "normal": (H, W_, 3), "normal_raw": (H, W_, 3),
                "alpha": (H, W_)}
    for key, val in upstream.items():
        if key not in expected:
            raise ValueError(f"unknown upstream map {key!r}")
        if val is not None and np.shape(val) != expected[key]:
            raise ValueError(f"upstream {key!r} has shape {np.shape(val)}, expected {expected[key]}")
    if output.log is None:
        raise ValueError("render output carries no contribution log")

    def get(key, shape):
        v = upstream.get(key)
        return np.zeros(shape) if v is None else np.asarray(v, float).reshape(shape)

    gC = get("color", (npix, 3))
    gD = get("depth_raw", (npix,))
    gA = get("alpha", (npix,))
    gN = get("normal_raw", (npix, 3))
    gDn = get("depth_normalized", (npix,))
    if output.normalized_depth:
        gDn = gDn + get("depth", (npix,))
    else:
        gD = gD + get("depth", (npix,))

    accum = output.accum_alpha.reshape(npix)
    draw = output.depth_raw.reshape(npix)
    ok = accum > 1e-3
    inv = np.where(ok, 1.0 / np.where(ok, accum, 1.0), 0.0)
    gD = gD + gDn * inv
    gA = gA - gDn * draw * inv * inv

    gn_unit = get("normal", (npix, 3))
    nraw = output.normal_raw.reshape(npix, 3)
    nn = np.linalg.norm(nraw, axis=1)
    okn = nn > 1e-6
    nhat = np.where(okn[:, None], nraw / np.where(okn, nn, 1.0)[:, None], 0.0)
    proj_g = gn_unit - nhat * np.sum(gn_unit * nhat, axis=1, keepdims=True)
    gN = gN + np.where(okn[:, None], proj_g / np.where(okn, nn, 1.0)[:, None], 0.0)

    grads = GradientSet.zeros(output._n_gauss)
    lg = output.log
    proj = output._proj
    nv = len(proj.index)
    if len(lg.gauss) == 0:
        return grads
    g_out = np.ascontiguousarray(np.concatenate([gC, gD[:, None], gN], axis=1))
    d_feat, d_opac, d_u, d_v, d_ca, d_cb, d_cc = _raster_backward(
        W_, lg.offsets, lg.gauss, lg.alpha, lg.transmittance, lg.gval, lg.clamped,
        np.ascontiguousarray(proj.mean2d), np.ascontiguousarray(proj.conic),
        output._opacities, output._feats, g_out, gA, nv)
    d_color = d_feat[:, :3]
    d_z = d_feat[:, 3]
    d_ncam = d_feat[:, 4:7]
    z = proj.t[:, 2]
    ncam = proj.normal_cam

    # conic = inv(cov2d): dL/dcov2d = -Q G_Q Q with symmetric split of b
    Q = np.empty((nv, 2, 2))
    Q[:, 0, 0], Q[:, 0, 1], Q[:, 1, 0], Q[:, 1, 1] = (proj.conic[:, 0], proj.conic[:, 1],
                                                      proj.conic[:, 1], proj.conic[:, 2])
    GQ = np.empty((nv, 2, 2))
    GQ[:, 0, 0], GQ[:, 0, 1], GQ[:, 1, 0], GQ[:, 1, 1] = d_ca, 0.5 * d_cb, 0.5 * d_cb, d_cc
    G2 = -_mm(_mm(Q, GQ), Q)

    J = proj.J
    cov_cam = proj.cov_cam
    G_cam = _mm(_mm(_T(J), G2), J)
    G_J = 2.0 * _mm(_mm(G2, J), cov_cam)

    x, y = proj.t[:, 0], proj.t[:, 1]
    fx, fy = k.fx, k.fy
    d_t = np.zeros((nv, 3))
    d_t[:, 0] = d_u * fx / z - G_J[:, 0, 2] * fx / z**2
    d_t[:, 1] = d_v * fy / z - G_J[:, 1, 2] * fy / z**2
    d_t[:, 2] = (d_z - d_u * fx * x / z**2 - d_v * fy * y / z**2
                 - G_J[:, 0, 0] * fx / z**2 + G_J[:, 0, 2] * 2 * fx * x / z**3
                 - G_J[:, 1, 1] * fy / z**2 + G_J[:, 1, 2] * 2 * fy * y / z**3)

    Wm = proj.W
    d_rho = d_t.sum(axis=0)
    d_phi = np.cross(proj.t, d_t).sum(axis=0) + np.cross(ncam, d_ncam).sum(axis=0)
    Bm = _mm(cov_cam, G_cam) - _mm(G_cam, cov_cam)
    d_phi = d_phi + np.einsum("nij,kji->k", Bm, _GENERATORS)
    grads.pose = np.concatenate([d_rho, d_phi])
    if pose_only:
        return grads

    d_mean = d_t @ Wm
    G_cov = _mm(_mm(Wm.T[None], G_cam), Wm[None])

    scales = np.exp(scene.log_scales[proj.index])
    rot = proj.rot
    M = rot * scales[:, None, :]
    G_M = 2.0 * _mm(G_cov, M)
    d_scale = np.sum(G_M * rot, axis=1)
    d_logscale = d_scale * scales
    G_R = G_M * scales[:, None, :]
    d_nw = (d_ncam @ Wm) * proj.normal_sign[:, None]
    G_R[np.arange(nv), :, proj.normal_axis] += d_nw
    d_quat = quat_to_rotmat_backward(scene.quats[proj.index], G_R)

    idx = proj.index
    grads.means[idx] = d_mean
    grads.log_scales[idx] = d_logscale
    grads.quats[idx] = d_quat
    grads.colors[idx] = d_color
    grads.opacities[idx] = d_opac
    return grads
