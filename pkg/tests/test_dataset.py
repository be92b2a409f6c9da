import json

import numpy as np
import pytest

from nflba.dataset import (DatasetSchemaError, digest_dir, normalize_depth_mode, read_dataset,
                           write_dataset)
from nflba.geometry import Intrinsics, Pose, se3_exp


@pytest.fixture
def ds_dir(tmp_path, rng):
    k = Intrinsics(10.0, 10.0, 4.0, 3.0, 8, 6)
    imgs = [rng.uniform(0, 1, (6, 8, 3)) for _ in range(3)]
    poses = [se3_exp(rng.normal(size=6) * 0.1) for _ in range(3)]
    depth = [rng.uniform(10, 60, (6, 8)) for _ in range(3)]
    write_dataset(tmp_path / "ds", imgs, k, poses, {"seed": 3}, depth_gt=depth)
    return tmp_path / "ds", imgs, poses, depth


def test_round_trip(ds_dir):
    root, imgs, poses, depth = ds_dir
    ds = read_dataset(root, "gt")
    assert ds.intrinsics == Intrinsics(10.0, 10.0, 4.0, 3.0, 8, 6)
    assert ds.meta["seed"] == 3 and ds.meta["n_frames"] == 3
    for a, b in zip(ds.images, imgs):
        np.testing.assert_allclose(a, b, atol=0.5 / 255 + 1e-12)
    for a, b in zip(ds.depth_gt, depth):
        np.testing.assert_allclose(a, b, atol=0.005 + 1e-9)
    for a, b in zip(ds.poses_gt, poses):
        np.testing.assert_allclose(a.matrix(), b.matrix(), atol=1e-12)
    assert ds.depth("none") is None and ds.depth("rgbd") is ds.depth_gt


def test_missing_depth_for_mode(ds_dir):
    root = ds_dir[0]
    with pytest.raises(DatasetSchemaError, match="depth_noisy"):
        read_dataset(root, "noisy")
    assert read_dataset(root, "none").depth_noisy is None


def test_mode_aliases_and_unknown():
    assert normalize_depth_mode("monocular") == "none"
    assert normalize_depth_mode("rgbd") == "gt"
    with pytest.raises(DatasetSchemaError):
        normalize_depth_mode("lidar")


def test_schema_errors(ds_dir):
    root = ds_dir[0]
    (root / "images" / "0002.png").unlink()
    with pytest.raises(DatasetSchemaError, match="2 images but 3 poses"):
        read_dataset(root, "none")
    (root / "poses_gt.json").write_text(json.dumps([[1.0] * 15]))
    with pytest.raises(DatasetSchemaError, match="entry 0"):
        read_dataset(root, "none")
    (root / "intrinsics.json").write_text("{")
    with pytest.raises(DatasetSchemaError, match="invalid JSON"):
        read_dataset(root, "none")
    (root / "meta.json").unlink()
    with pytest.raises(DatasetSchemaError, match="missing meta.json"):
        read_dataset(root, "none")


def test_depth_out_of_range(tmp_path):
    k = Intrinsics(10.0, 10.0, 1.0, 1.0, 2, 2)
    with pytest.raises(ValueError, match="16-bit"):
        write_dataset(tmp_path, [np.zeros((2, 2, 3))], k, [Pose.identity()],
                      depth_gt=[np.full((2, 2), 1000.0)])


def test_digest_tracks_content(ds_dir):
    root = ds_dir[0]
    d0 = digest_dir(root)
    assert digest_dir(root) == d0
    (root / "meta.json").write_text((root / "meta.json").read_text() + " ")
    assert digest_dir(root) != d0
