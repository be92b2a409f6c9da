"""Shared oracles for the test suite."""

import numpy as np

from nflba.geometry import GaussianScene, Intrinsics, Pose, se3_exp, so3_exp, rotmat_to_quat

PARAMS = ("means", "log_scales", "quats", "colors", "opacities")
# central-difference steps: 1e-4 on means/colors, 1e-5 elsewhere and on the pose
STEPS = {"means": 1e-4, "colors": 1e-4, "log_scales": 1e-5, "quats": 1e-5, "opacities": 1e-5}
POSE_STEP = 1e-5

K8 = Intrinsics(8.0, 8.0, 4.0, 4.0, 8, 8)


def smooth_scene(rng, n=5):
    """Random scene inside the differentiable regime of the rasterizer.

    Every footprint covers the whole 8x8 image (no bbox edge can move), alphas
    stay in (1/255, 0.99), transmittance stays above 1e-4, depths are well
    separated, normals face the camera and scales are pairwise distinct.
    """
    z = 3.0 + 0.4 * np.arange(n) + rng.uniform(0, 0.2, n)
    rng.shuffle(z)
    means = np.column_stack([rng.uniform(-0.3, 0.3, n), rng.uniform(-0.3, 0.3, n), z])
    base = rng.uniform(1.9, 2.3, n)
    scales = np.column_stack([base, base * rng.uniform(1.15, 1.3, n), base * rng.uniform(0.3, 0.5, n)])
    quats = np.array([rotmat_to_quat(so3_exp(rng.normal(size=3) * 0.25)) for _ in range(n)])
    colors = rng.uniform(0.1, 0.9, (n, 3))
    opac = rng.uniform(0.3, 0.8, n)
    return GaussianScene(means, np.log(scales), quats, colors, opac)


def close(analytic, numeric, rtol=1e-3, atol=1e-6):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return bool(np.all(np.abs(analytic - numeric) <= atol + rtol * np.abs(numeric)))


def fd_scene_grads(loss, scene: GaussianScene):
    """Central differences of loss(scene) for every Gaussian parameter."""
    out = {}
    for name in PARAMS:
        arr = getattr(scene, name)
        num = np.zeros_like(arr)
        h = STEPS[name]
        for idx in np.ndindex(arr.shape):
            a, b = scene.copy(), scene.copy()
            getattr(a, name)[idx] += h
            getattr(b, name)[idx] -= h
            num[idx] = (loss(a) - loss(b)) / (2 * h)
        out[name] = num
    return out


def fd_pose_grad(loss, pose: Pose, h=POSE_STEP):
    num = np.zeros(6)
    for i in range(6):
        e = np.zeros(6)
        e[i] = h
        num[i] = (loss(se3_exp(e) @ pose) - loss(se3_exp(-e) @ pose)) / (2 * h)
    return num


def smooth_targets(rng, scene, pose, k=K8, shading=None):
    """Targets whose L1 residuals stay well away from zero and whose NFL masks
    are fixed, so every loss term is smooth around ``(scene, pose)``."""
    from nflba.losses import FrameTargets, ShadingParams
    from nflba.shading import center_crop_mask
    from nflba.splatter import RenderOptions, render

    shading = shading or ShadingParams()
    out = render(scene, pose, k, RenderOptions(near=shading.near))
    sign = rng.choice([-1.0, 1.0], size=out.color.shape)
    image = out.color + sign * rng.uniform(0.05, 0.2, out.color.shape)
    depth = out.depth * rng.uniform(1.1, 1.3, out.shape)
    albedo = rng.uniform(0.3, 0.9, out.color.shape)
    crop = center_crop_mask(k.width, k.height, shading.crop_fraction)
    ones = np.ones(out.shape, bool)
    return FrameTargets(image, albedo, depth, ones, crop, ones)
