import json
from types import SimpleNamespace

import numpy as np
import pytest
import yaml
from PIL import Image

from maxvit_unet import cli, gradsuite, kernels
from maxvit_unet.data import load_image, save_image

TRAIN_SET = ["--preset", "tiny", "--set", "optim.total_iterations=2", "--set", "train.batch_size=2",
             "--set", "train.eval_interval=2", "--set", "data.synthetic_count=2", "--set", "data.augment=false"]


@pytest.fixture(autouse=True)
def _restore_backend():
    before = kernels.get_backend()
    yield
    kernels.set_backend(before)


def test_inspect_default_preset(tmp_path, capsys):
    assert cli.main(["inspect", "--out", str(tmp_path)]) == cli.EXIT_OK
    report = json.loads((tmp_path / "inspect.json").read_text())
    assert report["shapes_pass"] and report["shapes"]["D1"] == [64, 64, 64]
    assert (tmp_path / "config.resolved.yaml").exists()
    assert "PASS shape conformance" in capsys.readouterr().out


def test_invalid_window_exits_config(tmp_path, capsys):
    assert cli.main(["inspect", "--set", "model.window_size=7", "--out", str(tmp_path)]) == cli.EXIT_CONFIG
    assert "window_size" in capsys.readouterr().err


def test_unknown_key_exits_config(tmp_path):
    assert cli.main(["inspect", "--set", "model.nope=1", "--out", str(tmp_path)]) == cli.EXIT_CONFIG


def test_missing_config_file(tmp_path):
    assert cli.main(["inspect", "--config", str(tmp_path / "absent.yaml"), "--out", str(tmp_path)]) == cli.EXIT_CONFIG


def test_synth_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert cli.main(["synth", "--count", "3", "--size", "32", "--seed", "4", "--out", str(tmp_path / name)]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.png"))
    assert len(files) == 6
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_train_eval_predict_pipeline(tmp_path, capsys):
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli.main(["train", *TRAIN_SET, "--seed", "3", "--backend", "numpy", "--out", str(out)]) == 0
        runs.append(out)
    assert (runs[0] / "last.npz").read_bytes() == (runs[1] / "last.npz").read_bytes()
    resolved = yaml.safe_load((runs[0] / "config.resolved.yaml").read_text())
    assert resolved["train"]["seed"] == 3 and resolved["optim"]["total_iterations"] == 2
    assert len((runs[0] / "metrics.log").read_text().splitlines()) >= 1

    data = tmp_path / "data"
    assert cli.main(["synth", "--count", "2", "--size", "64", "--num-classes", "2", "--out", str(data)]) == 0
    ev = tmp_path / "eval"
    assert cli.main(["eval", "--checkpoint", str(runs[0] / "best.npz"), "--dataset-dir", str(data),
                     "--out", str(ev)]) == 0
    metrics = json.loads((ev / "metrics.json").read_text())
    assert "mDice" in metrics and "mIoU_fg" in metrics

    pr = tmp_path / "pred"
    assert cli.main(["predict", "--checkpoint", str(runs[0] / "best.npz"), "--input", str(data / "images"),
                     "--ground-truth", str(data / "masks"), "--out", str(pr)]) == 0
    masks = sorted((pr / "masks").glob("*.png"))
    assert len(masks) == 2 and len(list((pr / "overlays").glob("*.png"))) == 2
    with Image.open(masks[0]) as m:
        assert m.size == (64, 64) and set(np.unique(np.asarray(m))) <= {0, 1}


def test_resume_from_checkpoint(tmp_path):
    first = tmp_path / "first"
    assert cli.main(["train", *TRAIN_SET, "--out", str(first)]) == 0
    more = TRAIN_SET + ["--set", "optim.total_iterations=4", "--set", "train.log_interval=1"]
    assert cli.main(["train", *more, "--checkpoint", str(first / "last.npz"), "--out", str(tmp_path / "second")]) == 0
    first_iter = (tmp_path / "second" / "metrics.log").read_text().splitlines()[0].split(",")[0]
    assert first_iter == "2"


def test_predict_small_image_exits_shape(tmp_path):
    run = tmp_path / "run"
    assert cli.main(["train", *TRAIN_SET, "--out", str(run)]) == 0
    save_image(tmp_path / "small.png", np.zeros((3, 32, 32), np.float32))
    code = cli.main(["predict", "--checkpoint", str(run / "last.npz"), "--input", str(tmp_path / "small.png"),
                     "--out", str(tmp_path / "p")])
    assert code == cli.EXIT_SHAPE


def test_missing_checkpoint_exits_config(tmp_path):
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "none.npz"), "--out", str(tmp_path)]) == cli.EXIT_CONFIG


def test_gradcheck_single_case(tmp_path, capsys):
    assert cli.main(["gradcheck", "--scope", "op", "--only", "softmax"]) == cli.EXIT_OK
    assert "PASS" in capsys.readouterr().out


def test_gradcheck_failure_exit_code(monkeypatch):
    bad = SimpleNamespace(passed=False, __str__=lambda self: "FAIL")
    monkeypatch.setattr(gradsuite, "run", lambda scope, seed=0, only=None: iter([("fake", bad)]))
    assert cli.main(["gradcheck"]) == cli.EXIT_GRADCHECK


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_error_exit_code(tmp_path):
    code = cli.main(["train", *TRAIN_SET, "--set", "optim.lr0=1e30", "--set", "optim.total_iterations=3",
                     "--out", str(tmp_path)])
    assert code == cli.EXIT_NUMERIC


def test_bench_attention(tmp_path, capsys):
    assert cli.main(["bench-attention", "--sizes", "8,16", "--repeats", "1", "--out", str(tmp_path)]) == 0
    ratios = json.loads((tmp_path / "attention_ratios.json").read_text())
    assert ratios[0]["windowed"] == pytest.approx(4.0) and ratios[0]["dense"] == pytest.approx(16.0)
    assert (tmp_path / "attention_cost.csv").read_text().startswith("size,tokens")


def test_overlay_colours():
    rgb = np.full((3, 1, 4), 100, np.float32)
    pred = np.array([[1, 1, 0, 0]])
    truth = np.array([[1, 0, 1, 0]])
    img = cli.overlay(rgb, pred, truth, 2)
    np.testing.assert_array_equal(img[:, 0, 0], [255, 255, 255])
    np.testing.assert_array_equal(img[:, 0, 1], [255, 0, 0])
    np.testing.assert_array_equal(img[:, 0, 2], [0, 0, 255])
    np.testing.assert_array_equal(img[:, 0, 3], [100, 100, 100])
    multi = cli.overlay(rgb, np.array([[0, 1, 2, 3]]), None, 4)
    np.testing.assert_array_equal(multi[:, 0, 1], [177.5, 50, 50])
    np.testing.assert_array_equal(multi[:, 0, 0], [100, 100, 100])


def test_image_roundtrip(tmp_path):
    rgb = np.random.default_rng(0).integers(0, 256, (3, 8, 8)).astype(np.float32)
    save_image(tmp_path / "x.png", rgb)
    np.testing.assert_array_equal(load_image(tmp_path / "x.png"), rgb)
