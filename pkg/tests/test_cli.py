import json
import shutil

import numpy as np
import pytest
from PIL import Image

from nflba import runio
from nflba.cli import EXIT_ERROR, EXIT_OK, EXIT_TRACKING, main
from nflba.config import load_preset


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    assert main(["run", "--config", "smoke", "--out", str(out)]) == EXIT_OK
    return out


def test_presets_lists_shipped_configs(capsys):
    assert main(["presets"]) == EXIT_OK
    names = capsys.readouterr().out.split()
    assert "reference_default" in names and "smoke" in names


def test_gen_writes_dataset_and_prints_digest(tmp_path, capsys):
    out = tmp_path / "ds"
    assert main(["gen", "--config", "smoke", "--out", str(out), "--seed", "3"]) == EXIT_OK
    digest = capsys.readouterr().out.strip()
    assert len(digest) == 64
    assert len(list((out / "images").glob("*.png"))) == 4
    assert (out / "depth_gt").is_dir() and (out / "depth_noisy").is_dir()
    assert "seed: 3" in (out / "config.yaml").read_text()


def test_run_directory_layout(smoke_run):
    for name in ("config.yaml", "trajectory.csv", "scene.npz", "pointcloud.ply", "status.json",
                 "metrics.json", "digest.json"):
        assert (smoke_run / name).is_file(), name
    assert json.loads((smoke_run / "status.json").read_text())["status"] == "ok"
    traj = runio.read_trajectory(smoke_run / "trajectory.csv")
    assert [i for i, _ in traj] == [0, 1, 2, 3]
    assert list((smoke_run / "renders").glob("0000.png"))
    digest = json.loads((smoke_run / "digest.json").read_text())
    assert digest["files"]["trajectory.csv"] == runio.file_sha256(smoke_run / "trajectory.csv")


def test_eval_writes_table_and_figures(smoke_run, tmp_path, capsys):
    out = tmp_path / "report"
    assert main(["eval", str(smoke_run), "--out", str(out)]) == EXIT_OK
    table = capsys.readouterr().out
    assert table.splitlines()[0].startswith("run") and "ate_t_mm" in table
    rows = (out / "table.tsv").read_text().splitlines()
    assert rows[0].split("\t")[0] == "run" and rows[1].split("\t")[0] == "run"
    for png in ("per_frame_errors.png", "metrics.png", "trajectories.png"):
        assert (out / png).stat().st_size > 0


def test_eval_of_ground_truth_against_itself_is_zero(smoke_run, tmp_path):
    gt_run = tmp_path / "gt"
    shutil.copytree(smoke_run, gt_run)
    from nflba.dataset import read_dataset
    ds = read_dataset(smoke_run / "dataset", depth_mode="none")
    runio.write_trajectory(gt_run / "trajectory.csv", list(enumerate(ds.poses_gt)))
    assert main(["eval", str(gt_run), "--dataset", str(smoke_run / "dataset")]) == EXIT_OK
    rep = json.loads((gt_run / "metrics.json").read_text())
    assert rep["ate_t_mm"] < 1e-9 and rep["ate_r_deg"] < 1e-6


def test_corrupt_trajectory_names_file_and_line(smoke_run, tmp_path, capsys):
    bad = tmp_path / "bad"
    shutil.copytree(smoke_run, bad)
    lines = (bad / "trajectory.csv").read_text().splitlines()
    lines[2] = lines[2].replace(",", ",x", 1)
    (bad / "trajectory.csv").write_text("\n".join(lines) + "\n")
    assert main(["eval", str(bad), "--dataset", str(smoke_run / "dataset")]) == EXIT_ERROR
    assert "trajectory.csv:3:" in capsys.readouterr().err


def test_render_replays_keyframes(smoke_run, tmp_path, capsys):
    out = tmp_path / "replay"
    assert main(["render", str(smoke_run), "--out", str(out)]) == EXIT_OK
    status = json.loads((smoke_run / "status.json").read_text())
    assert sorted(int(p.stem) for p in out.glob("[0-9][0-9][0-9][0-9].png")) == status["keyframes"]
    a = np.asarray(Image.open(out / "0000.png"))
    b = np.asarray(Image.open(smoke_run / "renders" / "0000.png"))
    assert np.array_equal(a, b)


def test_tracking_failure_exit_code_and_partial_outputs(smoke_run, tmp_path):
    ds = tmp_path / "ds"
    shutil.copytree(smoke_run / "dataset", ds)
    white = np.full((32, 32, 3), 255, np.uint8)
    Image.fromarray(white).save(ds / "images" / "0002.png")
    cfg_path = tmp_path / "c.yaml"
    cfg = load_preset("smoke")
    cfg.simulator, cfg.dataset = None, str(ds)
    cfg_path.write_text(cfg.to_yaml())
    out = tmp_path / "run"
    assert main(["run", "--config", str(cfg_path), "--out", str(out)]) == EXIT_TRACKING
    status = json.loads((out / "status.json").read_text())
    assert status["status"] == "tracking_failure" and status["failed_frame"] == 2
    assert [i for i, _ in runio.read_trajectory(out / "trajectory.csv")] == [0, 1]
    assert (out / "digest.json").is_file()


def test_config_errors_exit_1(tmp_path, capsys):
    p = tmp_path / "c.yaml"
    p.write_text("simulator: {n_frames: 3}\nbogus: 1\n")
    assert main(["run", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_ERROR
    assert "bogus" in capsys.readouterr().err
    assert main(["run", "--config", "no_such_preset", "--out", str(tmp_path / "o")]) == EXIT_ERROR
    p.write_text("simulator: {n_frames: 3}\n")
    assert main(["gen", "--config", str(p)]) == EXIT_ERROR
    assert "output directory" in capsys.readouterr().err
