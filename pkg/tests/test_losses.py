import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import small_pose
from helpers import K8, PARAMS, close, fd_pose_grad, fd_scene_grads, smooth_scene, smooth_targets
from nflba.losses import (NFL_PRESETS, DegenerateMaskError, DegenerateModelError, FrameTargets,
                          LossWeights, ShadingParams, nfl_ba, optimal_scale, photometric_ba,
                          preset_weights, scale_regularizer, total_objective)
from nflba.geometry import GaussianScene
from nflba.shading import ShadingField, shading_field
from nflba.splatter import render


def _field(rng, shape=(6, 6)):
    pts = np.concatenate([rng.uniform(-0.5, 0.5, shape + (2,)), rng.uniform(2, 4, shape + (1,))], -1)
    normals = -pts / np.linalg.norm(pts, axis=-1, keepdims=True) + rng.normal(0, 0.1, shape + (3,))
    normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
    return shading_field(pts, normals)


def _with_shading(f: ShadingField, S) -> ShadingField:
    return ShadingField(f.points, f.light_dir, f.attenuation, f.lambert, S, f.valid, f.beta, f.axis)


# -- weights ---------------------------------------------------------------------

def test_presets_hold_standard_weights():
    assert NFL_PRESETS["monogs_estimated_depth"] == (0.001, 0.001)
    assert NFL_PRESETS["endogslam_estimated_depth"] == (0.01, 0.01)
    assert NFL_PRESETS["endogslam_rgbd"] == (0.001, 0.005)
    assert NFL_PRESETS["monogs_monocular"] == (0.0, 0.5)
    w = preset_weights("endogslam_rgbd")
    assert (w.nfl("tracking"), w.nfl("mapping"), w.lambda_depth) == (0.001, 0.005, 0.4)


def test_weights_reject_negative_and_unknown():
    with pytest.raises(ValueError):
        LossWeights(lambda_depth=-1.0)
    with pytest.raises(KeyError):
        preset_weights("nope")
    with pytest.raises(ValueError):
        LossWeights().nfl("refinement")


# -- photometric -----------------------------------------------------------------

def test_photometric_l1_values(rng):
    out = render(smooth_scene(rng), small_pose(rng), K8)
    target = out.color + 0.1
    depth = out.depth + 2.0
    depth[0, 0] = 0.0          # invalid depth pixels are excluded
    m = np.ones(out.shape, bool)
    res = photometric_ba(out, target, depth, m)
    assert res.rgb_term == pytest.approx(0.3)
    assert res.depth_term == pytest.approx(2.0)
    assert res.value(0.4) == pytest.approx(0.3 + 0.8)
    assert res.grad_depth[0, 0] == 0.0


def test_photometric_mask_errors(rng):
    out = render(smooth_scene(rng), small_pose(rng), K8)
    with pytest.raises(DegenerateMaskError):
        photometric_ba(out, out.color, None, np.zeros(out.shape, bool))
    with pytest.raises(ValueError):
        photometric_ba(out, out.color, None, np.ones((4, 4), bool))


# -- optimal scale and NFL ---------------------------------------------------------

def test_optimal_scale_closed_form():
    P = np.array([[[1.0, 2.0, 0.0]], [[0.5, 0.5, 0.5]]])
    I = 3.0 * P
    assert optimal_scale(I, P, np.ones((2, 1), bool)) == pytest.approx(3.0)
    with pytest.raises(DegenerateModelError):
        optimal_scale(I, np.zeros_like(P), np.ones((2, 1), bool))
    with pytest.raises(DegenerateMaskError):
        optimal_scale(I, P, np.zeros((2, 1), bool))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), c=st.floats(0.05, 20.0))
def test_nfl_is_invariant_to_shading_scale(seed, c):
    rng = np.random.default_rng(seed)
    f = _field(rng)
    img = rng.uniform(0, 1, (6, 6, 3))
    alb = rng.uniform(0.2, 1, (6, 6, 3))
    m = np.ones((6, 6), bool)
    a = nfl_ba(img, alb, f, m)
    b = nfl_ba(img, alb, _with_shading(f, c * f.shading), m)
    assert b.loss == pytest.approx(a.loss, rel=1e-9)
    assert b.scale == pytest.approx(a.scale / c, rel=1e-9)


def test_nfl_zero_for_consistent_image(rng):
    f = _field(rng)
    alb = rng.uniform(0.2, 1, (6, 6, 3))
    img = 0.37 * alb * f.shading[..., None]
    res = nfl_ba(img, alb, f, np.ones((6, 6), bool))
    assert res.loss == pytest.approx(0.0, abs=1e-12)
    assert res.scale == pytest.approx(0.37)


@pytest.mark.parametrize("seed", range(5))
def test_nfl_shading_gradient_includes_scale_dependence(seed):
    rng = np.random.default_rng(seed)
    f = _field(rng)
    img = rng.uniform(0, 1, (6, 6, 3))
    alb = rng.uniform(0.2, 1, (6, 6, 3))
    m = rng.uniform(size=(6, 6)) > 0.2
    res = nfl_ba(img, alb, f, m)
    num = np.zeros((6, 6))
    h = 1e-7
    for idx in np.ndindex(6, 6):
        Sp, Sm = f.shading.copy(), f.shading.copy()
        Sp[idx] += h
        Sm[idx] -= h
        num[idx] = (nfl_ba(img, alb, _with_shading(f, Sp), m).loss
                    - nfl_ba(img, alb, _with_shading(f, Sm), m).loss) / (2 * h)
    assert close(res.grad_shading, num)
    # holding s fixed gives a different (wrong) gradient for this loss
    e = img - res.scale * alb * f.shading[..., None]
    r = np.linalg.norm(e, axis=-1)
    frozen = np.where(m, -res.scale * np.sum(e / r[..., None] * alb, -1), 0.0) / res.count
    assert not close(frozen, num)


# -- regularizer -----------------------------------------------------------------

def test_regularizer_zero_for_isotropic_and_gradient():
    iso = GaussianScene(np.zeros((2, 3)), np.log(np.full((2, 3), 0.3)))
    assert scale_regularizer(iso)[0] == 0.0
    ls = np.log(np.array([[0.1, 0.2, 0.5], [0.3, 0.25, 0.4]]))
    sc = GaussianScene(np.zeros((2, 3)), ls)
    val, g = scale_regularizer(sc)
    assert val == pytest.approx(np.mean([(5.0 - 1) ** 2, (0.4 / 0.25 - 1) ** 2]))
    num = fd_scene_grads(lambda s: scale_regularizer(s)[0], sc)["log_scales"]
    assert close(g, num)
    assert scale_regularizer(GaussianScene())[0] == 0.0


# -- total objective ---------------------------------------------------------------

def test_report_recomposes_total(rng):
    scene = smooth_scene(rng)
    pose = small_pose(rng)
    tg = smooth_targets(rng, scene, pose)
    w = LossWeights(0.4, 0.05, 0.1, 0.01)
    for phase in ("tracking", "mapping"):
        rep = total_objective(tg, scene, pose, K8, w, phase).report
        lam = w.nfl(phase)
        assert rep.lambda_nfl == lam
        assert rep.recomposed() == pytest.approx(rep.total, rel=1e-12)
        assert rep.nfl_term > 0 and np.isfinite(rep.optimal_scale_s)


def test_tracking_returns_pose_gradient_only(rng):
    scene = smooth_scene(rng)
    pose = small_pose(rng)
    tg = smooth_targets(rng, scene, pose)
    ev = total_objective(tg, scene, pose, K8, LossWeights(0.4, 0.05, 0.05, 0.01), "tracking")
    assert np.abs(ev.grads.pose).max() > 0
    assert np.abs(ev.grads.means).max() == 0.0
    ev = total_objective(tg, scene, pose, K8, LossWeights(0.4, 0.05, 0.05, 0.01), "mapping")
    assert np.abs(ev.grads.pose).max() == 0.0 and np.abs(ev.grads.means).max() > 0


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("phase", ["tracking", "mapping"])
def test_total_objective_matches_finite_differences(seed, phase):
    rng = np.random.default_rng(100 + seed)
    scene = smooth_scene(rng)
    pose = small_pose(rng)
    sh = ShadingParams(beta=1.5)
    tg = smooth_targets(rng, scene, pose, shading=sh)
    w = LossWeights(0.4, 0.05, 0.05, 0.01)
    ev = total_objective(tg, scene, pose, K8, w, phase, shading=sh, with_pose_grad=True)

    def f(s, p):
        return total_objective(tg, s, p, K8, w, phase, shading=sh, need_grad=False).report.total

    if phase == "mapping":
        num = fd_scene_grads(lambda s: f(s, pose), scene)
        for name in PARAMS:
            assert close(getattr(ev.grads, name), num[name]), name
    assert close(ev.grads.pose, fd_pose_grad(lambda p: f(scene, p), pose))


def test_silhouette_restricts_photometric_mask(rng):
    scene = smooth_scene(rng, n=1)
    pose = small_pose(rng)
    tg = smooth_targets(rng, scene, pose)
    w = LossWeights(0.4)
    full = total_objective(tg, scene, pose, K8, w, need_grad=False)
    sil = total_objective(tg, scene, pose, K8, w, need_grad=False, silhouette=0.5)
    n_expected = int((full.render.accum_alpha > 0.5).sum())
    assert sil.report.masked_pixel_count == n_expected < full.report.masked_pixel_count


def test_frame_targets_from_frame():
    img = np.full((8, 8, 3), 0.5)
    img[2, 2] = 1.0
    tg = FrameTargets.from_frame(img, None, ShadingParams(gamma=2.2, tau=0.95))
    np.testing.assert_allclose(tg.image_linear[0, 0], 0.5**2.2)
    assert not tg.specular[2, 2] and tg.specular[0, 0]
    assert tg.crop.sum() == 36
