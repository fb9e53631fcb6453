import csv
import json

import pytest

from coders import pipeline
from coders.cli import EXIT_CONFIG, EXIT_DATA, build_parser, main
from coders.synth import generate_dataset, write_dataset

SMOKE = ["--preset", "smoke", "--seed", "0", "--threads", "1"]


def _error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    return json.loads(err[0])


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke")
    data, shape, run = root / "data", root / "shape.ckpt", root / "run"
    assert main(["gen-data", *SMOKE, "--out", str(data)]) == 0
    assert main(["train-sdf", *SMOKE, "--data", str(data), "--out", str(shape)]) == 0
    assert main(["train", *SMOKE, "--data", str(data), "--shape", str(shape), "--out", str(run)]) == 0
    metrics = root / "metrics.json"
    assert main(["eval", *SMOKE, "--data", str(data), "--model", str(run / "model.ckpt"), "--shape", str(shape),
                 "--out", str(metrics)]) == 0
    return root


def test_smoke_pipeline_populates_report(smoke_run):
    rep = json.loads((smoke_run / "metrics.json").read_text())
    assert rep["n_gt"] > 0
    for k in ("iou25", "iou50", "iou75", "deg5cm2", "deg5cm5", "deg10cm5", "deg10cm10", "chamfer_x100"):
        assert k in rep["overall"]
    assert rep["overall"]["chamfer_x100"] is not None
    assert (smoke_run / "run" / "loss.csv").exists()


def test_report_of_one_file_echoes_values(smoke_run, tmp_path):
    assert main(["report", str(smoke_run / "metrics.json"), "--loss", str(smoke_run / "run" / "loss.csv"),
                 "--out", str(tmp_path)]) == 0
    rep = json.loads((smoke_run / "metrics.json").read_text())["overall"]
    with open(tmp_path / "report.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1
    for k, v in rep.items():
        assert rows[0][k] == ("" if v is None else str(v))
        if v is not None:
            assert float(rows[0][k]) == v
    for name in ("report.md", "precision.png", "chamfer.png", "loss.png"):
        assert (tmp_path / name).stat().st_size > 0


def test_reconstruct_writes_meshes(smoke_run, tmp_path):
    rc = main(["reconstruct", *SMOKE, "--set", "eval.threshold=0.0", "--data", str(smoke_run / "data"),
               "--model", str(smoke_run / "run" / "model.ckpt"), "--shape", str(smoke_run / "shape.ckpt"),
               "--scene", "00050", "--out", str(tmp_path)])
    assert rc == 0
    dets = json.loads((tmp_path / "detections.json").read_text())
    assert len(dets) == 10
    meshes = [d for d in dets if not d.get("empty")]
    assert all((tmp_path / (d["obj"].split("/")[-1])).exists() for d in meshes)


def test_eval_on_empty_dataset(tmp_path, capsys):
    ds = generate_dataset(2, 0, seed=0)
    write_dataset(ds, tmp_path / "data")
    rc = main(["eval", "--data", str(tmp_path / "data"), "--model", str(tmp_path / "data" / "manifest.json")])
    assert rc == EXIT_DATA
    err = _error_line(capsys)
    assert err["code"] == EXIT_DATA and "zero ground-truth objects" in err["message"]


@pytest.mark.parametrize("args", [
    ["--set", "train.bogus=1"],
    ["--set", "train.lr"],
    ["--set", "train.epochs=2.5"],
    ["--set", "train.dim=100", "--set", "train.n_heads=8"],
    ["--set", "data.min_objects=5"],
    ["--threads", "0"],
], ids=["unknown-key", "no-value", "non-integer", "indivisible-heads", "bad-scene-config", "threads"])
def test_config_errors_exit_2(args, tmp_path, capsys):
    assert main(["gen-data", *args, "--out", str(tmp_path / "d")]) == EXIT_CONFIG
    assert _error_line(capsys)["error"] == "config"
    assert not (tmp_path / "d").exists()


def test_missing_input_is_data_error(tmp_path, capsys):
    assert main(["train-sdf", "--data", str(tmp_path / "nope")]) == EXIT_DATA
    assert "nope" in _error_line(capsys)["message"]


def test_help_lists_every_key(capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["train", "--help"])
    text = capsys.readouterr().out
    for k, v in pipeline.DEFAULTS.items():
        assert k in text and json.dumps(v) in text
    assert '"train.lr"' not in text and "train.lr" in text


def test_training_defaults():
    d = pipeline.DEFAULTS
    assert d["train.lr"] == 2e-4 and d["train.weight_decay"] == 1e-2
    assert d["train.loss_weights"] == [2.0, 0.06, 0.02]


def test_config_layering(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"train.lr": 1e-3, "data.n_train": 7}))
    cfg = pipeline.resolve_config("smoke", str(f), ["data.n_train=9"], seed=3)
    assert cfg["train.lr"] == 1e-3 and cfg["data.n_train"] == 9 and cfg["train.epochs"] == 3
    assert cfg["data.seed"] == cfg["sdf.seed"] == cfg["train.seed"] == 3


def test_env_sets_default_output(tmp_path, monkeypatch):
    monkeypatch.setenv(pipeline.OUTPUT_ENV, str(tmp_path))
    assert main(["gen-data", *SMOKE, "--set", "data.n_train=2", "--set", "data.n_test=1"]) == 0
    assert (tmp_path / "data" / "manifest.json").exists()
