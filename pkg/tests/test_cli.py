import csv
import json
import re

import pytest

from cycle_corr.cli import main, parse_grid
from cycle_corr.config import load_config
from cycle_corr.data import SceneSpec, generate_synthetic_scene, save_image

TINY = ["batches_per_epoch=3", "pretrain_epochs=1", "epochs=1", "loss.num_keypoints=20"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--n", "40", "--out", str(d), "--seed", "3"]) == 0
    return d


def test_synth_count(synth_dir):
    assert len(list(synth_dir.glob("*.png"))) == 40
    oracle = json.loads((synth_dir / "oracle.json").read_text())
    assert len(oracle["scenes"]) == 40
    ann = json.loads((synth_dir / "annotations.json").read_text())
    assert len(ann["pairs"]) == 20
    assert json.loads((synth_dir / "summary.json").read_text())["images"] == 40


def test_ingest(synth_dir, tmp_path, capsys):
    code, out, _ = run(capsys, "ingest", "--data", synth_dir, "--out", tmp_path)
    assert code == 0 and json.loads(out)["images"] == 40
    assert len(json.loads((tmp_path / "manifest.json").read_text())["images"]) == 40


@pytest.fixture(scope="module")
def pretrained(synth_dir, tmp_path_factory):
    d = tmp_path_factory.mktemp("pre")
    assert main(["pretrain", "--data", str(synth_dir), "--out", str(d), "batches_per_epoch=60",
                 "pretrain_epochs=1", "loss.num_keypoints=50"]) == 0
    return d / "pretrain_last.ckpt"


def test_train_override_in_resolved_config(synth_dir, pretrained, tmp_path, capsys):
    # a config file written by an earlier run
    base = tmp_path / "base"
    assert main(["pretrain", "--data", str(synth_dir), "--out", str(base), "pretrain_epochs=0"]) == 0
    cfg = base / "resolved_config.toml"
    code, out, _ = run(capsys, "train", "--config", cfg, "--data", synth_dir, "--out", tmp_path / "run",
                       "--init", pretrained, "loss.quantile_keep=0.65", *TINY)
    assert code == 0
    resolved = load_config(tmp_path / "run" / "resolved_config.toml")
    assert resolved.loss.quantile_keep == 0.65 and resolved.init_checkpoint == str(pretrained)
    summary = json.loads((tmp_path / "run" / "summary.json").read_text())
    assert summary["mode"] == "ccl" and (tmp_path / "run" / "ccl_last.ckpt").exists()
    header = (tmp_path / "run" / "ccl_metrics.csv").read_text().splitlines()[0]
    assert header == "step,loss,cycle_loss,identical_loss,mean_X,kept_fraction"


def test_train_needs_init(synth_dir, tmp_path, capsys):
    code, _, err = run(capsys, "train", "--data", synth_dir, "--out", tmp_path, *TINY)
    assert code == 2 and "--from-scratch" in err


def test_force_guard(synth_dir, tmp_path, capsys):
    args = ["pretrain", "--data", synth_dir, "--out", tmp_path, *TINY]
    assert run(capsys, *args)[0] == 0
    before = (tmp_path / "pretrain_last.ckpt").read_bytes()
    code, _, err = run(capsys, *args)
    assert code == 2 and "--force" in err
    assert (tmp_path / "pretrain_last.ckpt").read_bytes() == before
    assert run(capsys, *args, "--force")[0] == 0


def test_eval(synth_dir, pretrained, tmp_path, capsys):
    code, out, _ = run(capsys, "eval", "--checkpoint", pretrained, "--annotations", synth_dir / "annotations.json",
                       "--out", tmp_path)
    assert code == 0
    summary = json.loads(out)
    assert summary["keypoints"] == 200 and 0 <= summary["auc"] <= 1
    assert (tmp_path / "metrics.json").exists() and (tmp_path / "metrics_pairs.csv").exists()


def test_bad_checkpoint_exit_2(synth_dir, tmp_path, capsys):
    code, _, err = run(capsys, "eval", "--checkpoint", tmp_path / "missing.ckpt",
                       "--annotations", synth_dir / "annotations.json", "--out", tmp_path)
    assert code == 2 and err
    img = synth_dir / "scene_00000.png"
    code, _, _ = run(capsys, "viz", "--checkpoint", tmp_path / "missing.ckpt", "--image-a", img, "--image-b", img,
                     "--point", 5, 5, "--out", tmp_path)
    assert code == 2


def test_unknown_flag_exit_2(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        main(["synth", "--n", "2", "--out", str(tmp_path), "--bogus"])
    assert e.value.code == 2
    assert "usage" in capsys.readouterr().err
    with pytest.raises(SystemExit) as e:
        main(["nosuchcommand"])
    assert e.value.code == 2


def test_unknown_override_exit_2(synth_dir, tmp_path, capsys):
    code, _, err = run(capsys, "pretrain", "--data", synth_dir, "--out", tmp_path, "loss.nope=1")
    assert code == 2 and "nope" in err


def test_ablate_grid_rows(tmp_path, capsys):
    code, out, _ = run(capsys, "ablate", "--out", tmp_path, "--n-train", 6, "--n-pairs", 3,
                       "--grid", "q=0.35,0.65,1.0", "scaling=on,off", *TINY)
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "ablation.csv")))
    assert len(rows) == 6
    assert {(r["q"], r["variance_scaling"]) for r in rows} == {
        (q, s) for q in ("0.35", "0.65", "1.0") for s in ("True", "False")}
    assert json.loads(out)["rows"] == 6
    assert (tmp_path / "ablation_scaling_on.png").exists()


def test_parse_grid():
    assert parse_grid(["q=1.0", "scaling=off", "epochs=2"]) == ([1.0], [False], ["epochs=2"])
    assert parse_grid([]) == ([0.35, 0.65, 1.0], [True, False], [])


def _viz_x(capsys, ckpt, a, b, point, out):
    code, out_text, _ = run(capsys, "viz", "--checkpoint", ckpt, "--image-a", a, "--image-b", b,
                            "--point", *point, "--out", out)
    assert code == 0
    line = [ln for ln in out_text.splitlines() if ln.startswith("mu =")][0]
    return float(re.search(r"X = ([0-9.eE+-]+)", line).group(1)), out


def test_viz_self_match_vs_absent(pretrained, tmp_path, capsys):
    spec = SceneSpec.default(3)
    scene = generate_synthetic_scene(spec, 42)
    inst = scene.instances[0]
    empty = generate_synthetic_scene(spec, 43, present=[1, 2])
    save_image(scene.image, tmp_path / "a.png")
    save_image(empty.image, tmp_path / "b.png")
    point = (round(inst.row), round(inst.col))
    x_self, out = _viz_x(capsys, pretrained, tmp_path / "a.png", tmp_path / "a.png", point, tmp_path / "self")
    x_absent, _ = _viz_x(capsys, pretrained, tmp_path / "a.png", tmp_path / "b.png", point, tmp_path / "absent")
    # a uniform distribution over the 8x8 low-res grid has X = 2 * (8**2 - 1) / 12 = 10.5 cells^2
    x_uniform = 2 * (8**2 - 1) / 12
    assert x_self < 0.1 * x_uniform
    assert x_absent > 3 * x_self
    assert (out / "viz_image_a.png").exists() and (out / "viz_image_b_heatmap.png").exists()


def test_viz_point_outside(pretrained, synth_dir, tmp_path, capsys):
    img = synth_dir / "scene_00000.png"
    code, _, err = run(capsys, "viz", "--checkpoint", pretrained, "--image-a", img, "--image-b", img,
                       "--point", 70, 5, "--out", tmp_path)
    assert code == 2 and "outside" in err
