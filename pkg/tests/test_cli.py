import json
import subprocess
import sys

import numpy as np
import pytest

from splatfit import cli, synth


def run(*argv):
    return cli.main([str(a) for a in argv])


def read_json(path):
    return json.loads(path.read_text())


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert run("gen", "--out", root, "--views", 3, "--resolution", 24, "--set", "scene.gaussians=8") == 0
    return root


def test_empty_config_gives_defaults(tmp_path):
    (tmp_path / "empty.json").write_text("")
    assert run("sample-cameras", "--config", tmp_path / "empty.json", "--out", tmp_path / "o") == 0
    cfg = read_json(tmp_path / "o" / "config.json")
    assert cfg["train"]["base_lr"] == 0.00016
    assert cfg["train"]["view_decay"] == 0.5
    assert cfg["resolution"] == 64
    assert len(synth.load_cameras(tmp_path / "o" / "cameras.json")) == cfg["views"]


def test_flag_override_is_echoed(tmp_path):
    assert run("sample-cameras", "--base-lr", 0.001, "--seed", 7, "--out", tmp_path) == 0
    cfg = read_json(tmp_path / "config.json")
    assert cfg["train"]["base_lr"] == 0.001 and cfg["seed"] == 7


def test_file_then_flags_precedence(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"views": 5, "resolution": 16}))
    assert run("sample-cameras", "--config", tmp_path / "c.json", "--views", 2, "--out", tmp_path / "o") == 0
    cfg = read_json(tmp_path / "o" / "config.json")
    assert cfg["views"] == 2 and cfg["resolution"] == 16


def test_malformed_config_exits_1_and_writes_nothing(tmp_path, capsys):
    (tmp_path / "bad.json").write_text('{"seed": 1,\n "views": }')
    assert run("gen", "--config", tmp_path / "bad.json", "--out", tmp_path / "o") == 1
    assert not (tmp_path / "o").exists()
    err = json.loads(capsys.readouterr().err)
    assert err["line"] == 2


def test_unknown_key_lists_known_keys(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"train": {"lernrate": 1}}))
    assert run("gen", "--config", tmp_path / "c.json", "--out", tmp_path / "o") == 1
    err = json.loads(capsys.readouterr().err)
    assert err["field"] == "train.lernrate"
    assert "base_lr" in err["known"]
    assert not (tmp_path / "o").exists()


def test_missing_path_and_out(tmp_path, capsys):
    assert run("fit", "--dataset", tmp_path / "nope", "--out", tmp_path / "o") == 1
    assert json.loads(capsys.readouterr().err)["field"] == "paths.dataset"
    assert run("gen") == 1


def test_bad_value_type(tmp_path):
    assert run("gen", "--out", tmp_path, "--set", "views=-3") == 1
    assert run("gen", "--out", tmp_path, "--set", "train.base_lr=\"fast\"") == 1
    assert run("gen", "--out", tmp_path, "--set", "train.steps=2.5") == 1
    assert not (tmp_path / "config.json").exists()


def test_gen_layout(dataset):
    ds = synth.load_dataset(dataset)
    assert len(ds) == 3 and ds.images.shape == (3, 24, 24, 4)
    assert len(ds.cloud) == 8
    np.testing.assert_array_equal(ds.metric_extent, [4.5, 1.8, 1.5])


def test_render_matches_dataset(dataset, tmp_path):
    args = ("render", "--cloud", dataset / "cloud.json", "--cameras", dataset / "cameras.json", "--out", tmp_path)
    assert run(*args) == 0
    imgs = np.stack(synth.load_images(tmp_path / "images"))
    assert imgs.tobytes() == synth.load_dataset(dataset).images.tobytes()


def test_eval_identity(dataset, tmp_path):
    assert run("eval", "--pred", dataset, "--gt", dataset, "--out", tmp_path) == 0
    report = read_json(tmp_path / "report.json")
    m = report["metrics"]
    assert set(m) == {"SSIM", "PSNR", "LPIPS", "CD", "F-score"}
    assert m["SSIM"] == pytest.approx(1.0, abs=1e-12)
    assert m["CD"] == 0.0 and m["F-score"] == 1.0
    assert report["conventions"]["cd_multiplier"] == 1000.0
    assert run("eval", "--pred", dataset, "--gt", dataset, "--metric-scale", "--out", tmp_path / "m") == 0
    assert read_json(tmp_path / "m" / "report.json")["conventions"]["f_score_tau"] == 0.05


def test_eval_metric_scale_needs_extent(dataset, tmp_path):
    cloud = synth.load_cloud(dataset / "cloud.json").replace(metric_extent=None)
    (tmp_path / "p").mkdir()
    synth.save_cloud(cloud, tmp_path / "p" / "cloud.json")
    assert run("eval", "--pred", tmp_path / "p", "--gt", dataset, "--metric-scale", "--out", tmp_path / "o") == 1


def test_gradcheck_passes_and_tiny_tol_fails(tmp_path):
    assert run("gradcheck", "--out", tmp_path / "a") == 0
    report = read_json(tmp_path / "a" / "gradcheck.json")
    assert report["passed"]
    assert run("gradcheck", "--tol", 1e-15, "--out", tmp_path / "b") == 2
    assert not read_json(tmp_path / "b" / "gradcheck.json")["passed"]


def test_short_fit_improves(dataset, tmp_path):
    assert run("fit", "--dataset", dataset, "--stage", 1, "--steps", 30, "--out", tmp_path) == 0
    hist = [json.loads(line) for line in (tmp_path / "history.jsonl").read_text().splitlines()]
    assert len(hist) == 30
    assert hist[-1]["psnr"] > hist[0]["psnr"]
    assert len(synth.load_cloud(tmp_path / "cloud.json")) == 8


def test_rerun_from_echoed_config_is_bit_identical(dataset, tmp_path):
    assert run("fit", "--dataset", dataset, "--stage", 2, "--steps", 10, "--seed", 3, "--out", tmp_path / "a") == 0
    assert run("fit", "--config", tmp_path / "a" / "config.json", "--out", tmp_path / "b") == 0
    for name in ("cloud.json", "cameras.json", "history.jsonl", "config.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_console_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "splatfit.cli", "sample-cameras", "--views", "2", "--out", str(tmp_path)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout) == {"views": 2}
