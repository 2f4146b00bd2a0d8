import hashlib
import json

import numpy as np
import pytest

from staticsplat.cli import main
from staticsplat.io import Manifest, read_pfm, write_cloud


def sha(path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def tree_digest(root) -> dict:
    return {str(p.relative_to(root)): sha(p) for p in sorted(root.rglob("*")) if p.is_file()}


def write_config(path, **entries):
    path.write_text("".join(f"{k} = {v}\n" for k, v in entries.items()))
    return str(path)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """A tiny all-static 12-frame scene taken through synth, align and train."""
    root = tmp_path_factory.mktemp("pipeline")
    cfg = write_config(root / "run.cfg", **{
        "synth.width": 24, "synth.height": 24, "synth.num_frames": 12, "synth.num_dynamic": 0,
        "train.staticness_eps": 1e-12, "train.optimize_staticness": "false", "train.refine_test_iterations": 5,
    })
    assert main(["synth", "--out", str(root / "data"), "--config", cfg]) == 0
    assert main(["align", str(root / "data"), "--out", str(root / "aligned"), "--iterations", "3", "--config", cfg]) == 0
    assert main(["train", str(root / "aligned"), "--out", str(root / "trained"), "--iterations", "20",
                 "--config", cfg]) == 0
    return root, cfg


def test_synth_two_frames_manifest(tmp_path):
    cfg = write_config(tmp_path / "c.cfg", **{"synth.width": 16, "synth.height": 16, "synth.num_frames": 2})
    assert main(["synth", "--out", str(tmp_path / "d"), "--config", cfg]) == 0
    man = Manifest.load(tmp_path / "d")
    counts = {role: len(man.find(role)) for role in ("frame", "depth", "mask", "trajectory")}
    assert counts == {"frame": 2, "depth": 2, "mask": 2, "trajectory": 1}


def test_synth_is_byte_identical(tmp_path):
    cfg = write_config(tmp_path / "c.cfg", **{"synth.width": 16, "synth.height": 16, "synth.num_frames": 3,
                                              "synth.mask_fp_rate": 0.2, "synth.pointmap_noise": 0.01})
    assert main(["synth", "--out", str(tmp_path / "a"), "--config", cfg, "--seed", "3"]) == 0
    assert main(["synth", "--out", str(tmp_path / "b"), "--config", cfg, "--seed", "3"]) == 0
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_synth_invalid_coverage_names_field(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.cfg", **{"synth.dynamic_coverage": 0.95})
    assert main(["synth", "--out", str(tmp_path / "d"), "--config", cfg]) == 2
    assert "dynamic_coverage" in capsys.readouterr().err


def test_unknown_config_key_is_a_config_error(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.cfg", **{"synth.width": 16, "synth.colour": 3})
    assert main(["synth", "--out", str(tmp_path / "d"), "--config", cfg]) == 2
    assert "c.cfg:2" in capsys.readouterr().err


def test_align_reports_missing_pair_file(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.cfg", **{"synth.width": 16, "synth.height": 16, "synth.num_frames": 4})
    assert main(["synth", "--out", str(tmp_path / "d"), "--config", cfg]) == 0
    (tmp_path / "d" / "pairs" / "mask_00001_00002.png").unlink()
    assert main(["align", str(tmp_path / "d"), "--out", str(tmp_path / "a"), "--iterations", "1"]) == 3
    assert "mask_00001_00002" in capsys.readouterr().err


def test_align_without_flow_logs_zero_flow(tmp_path):
    cfg = write_config(tmp_path / "c.cfg", **{"synth.width": 16, "synth.height": 16, "synth.num_frames": 4})
    assert main(["synth", "--out", str(tmp_path / "d"), "--config", cfg]) == 0
    assert main(["align", str(tmp_path / "d"), "--out", str(tmp_path / "a"), "--iterations", "4", "--w-flow", "0"]) == 0
    lines = [json.loads(x) for x in (tmp_path / "a" / "align_log.jsonl").read_text().splitlines()]
    steps = [r for r in lines if "iteration" in r]
    assert len(steps) == 5 and all(r["flow"] == 0.0 for r in steps)
    assert lines[-1]["event"] == "summary" and lines[-1]["ate"] < 1e-2


def test_align_outputs(pipeline):
    root, _ = pipeline
    man = Manifest.load(root / "aligned")
    assert len(man.per_frame("depth")) == 12
    assert man.single("fused_cloud").stat().st_size > 0
    summary = json.loads((root / "aligned" / "align_log.jsonl").read_text().splitlines()[-1])
    assert summary["ate"] < 1e-2


def test_train_with_zero_iterations_writes_the_initial_cloud(pipeline, tmp_path):
    from staticsplat.cli import _train_inputs
    from staticsplat.metrics import split_frames
    from staticsplat.trainer import TrainConfig, init_cloud

    root, cfg = pipeline
    assert main(["train", str(root / "aligned"), "--out", str(tmp_path / "t0"), "--iterations", "0",
                 "--config", cfg]) == 0
    _, _, inp, state = _train_inputs(root / "aligned")
    train_idx, _ = split_frames(12)
    expected = init_cloud(state, inp.frame_conf, inp.frame_masks, inp.images, TrainConfig(staticness_eps=1e-12),
                          frames=train_idx)
    write_cloud(tmp_path / "init.ply", expected)
    assert sha(tmp_path / "t0" / "cloud.ply") == sha(tmp_path / "init.ply")


def test_train_outputs(pipeline):
    root, _ = pipeline
    trace = (root / "trained" / "loss.csv").read_text().splitlines()
    assert trace[0] == "iteration,loss_total,loss_l1,loss_ssim" and len(trace) == 21
    assert "train.iterations = 20" in (root / "trained" / "config.txt").read_text()


def test_plain_and_staticness_renders_agree_on_static_scene(pipeline):
    root, cfg = pipeline
    assert main(["render", str(root / "trained"), "--out", str(root / "plain"), "--mode", "plain", "--config", cfg]) == 0
    assert main(["render", str(root / "trained"), "--out", str(root / "stat"), "--mode", "staticness",
                 "--config", cfg]) == 0
    a = read_pfm(root / "plain" / "renders" / "render_00009.pfm", 3)
    b = read_pfm(root / "stat" / "renders" / "render_00009.pfm", 3)
    assert np.abs(a - b).max() <= 1e-6


def test_eval_writes_one_row_per_test_frame(pipeline):
    root, cfg = pipeline
    assert main(["render", str(root / "trained"), "--out", str(root / "rendered"), "--config", cfg]) == 0
    assert main(["eval", str(root / "rendered"), "--out", str(root / "metrics")]) == 0
    rows = (root / "metrics" / "metrics.csv").read_text().splitlines()
    assert rows[0] == "sequence,psnr,ssim,iou,ate,rpe_trans,rpe_rot"
    assert len(rows) == 2 and rows[1].startswith("synth_seed0/00009,")


def test_fifty_frames_give_five_metric_rows(tmp_path):
    cfg = write_config(tmp_path / "c.cfg", **{"synth.width": 12, "synth.height": 12, "synth.num_frames": 50,
                                              "train.refine_test_iterations": 2})
    assert main(["synth", "--out", str(tmp_path / "d"), "--config", cfg]) == 0
    assert main(["align", str(tmp_path / "d"), "--out", str(tmp_path / "a"), "--iterations", "1", "--config", cfg]) == 0
    assert main(["train", str(tmp_path / "a"), "--out", str(tmp_path / "t"), "--iterations", "2", "--config", cfg]) == 0
    assert main(["render", str(tmp_path / "t"), "--out", str(tmp_path / "r"), "--config", cfg]) == 0
    assert main(["eval", str(tmp_path / "r"), "--out", str(tmp_path / "e")]) == 0
    rows = (tmp_path / "e" / "metrics.csv").read_text().splitlines()[1:]
    assert [r.split(",")[0][-5:] for r in rows] == ["00009", "00019", "00029", "00039", "00049"]


def test_missing_input_directory_exits_three(tmp_path):
    assert main(["align", str(tmp_path / "nothing"), "--out", str(tmp_path / "a")]) == 3


def test_pipeline_reruns_are_byte_identical(pipeline, tmp_path):
    root, cfg = pipeline
    assert main(["align", str(root / "data"), "--out", str(tmp_path / "aligned"), "--iterations", "3",
                 "--config", cfg]) == 0
    assert main(["train", str(tmp_path / "aligned"), "--out", str(tmp_path / "trained"), "--iterations", "20",
                 "--config", cfg]) == 0
    for name in ("trajectory.txt", "depth/depth_00003.pfm", "fused.ply", "align_log.jsonl"):
        assert sha(tmp_path / "aligned" / name) == sha(root / "aligned" / name), name
    for name in ("cloud.ply", "trajectory.txt", "loss.csv"):
        assert sha(tmp_path / "trained" / name) == sha(root / "trained" / name), name
