import json
import subprocess
import sys
import textwrap

import numpy as np
import pytest

from m2d import data, io, nets
from m2d.cli import main

CONFIG = textwrap.dedent(
    """\
    seed: 0
    dataset:
      source: blobs
      blobs: {num_classes: 3, n_per_class: 60, centers: [[0, 0], [4, 0], [2, 3.5]], spread: 0.7}
      ood: {center: [12, 12], n: 60}
      split: {train: 0.6, fit: 0.2, test: 0.2, detector_subset: 30}
    model:
      dims: [2, 16, 8, 3]
      epochs: 3
    detector:
      steps: 5
      sever_at: 2
      taps: [h2]
    eval:
      methods: [m2d, m2d-no-retrain, msp, odin]
      steps_grid: [5, 10]
    """
)


@pytest.fixture()
def cfg(tmp_path):
    p = tmp_path / "run.yaml"
    p.write_text(CONFIG)
    return p


def _m2d(cfg, out, *args):
    return main([args[0], "--config", str(cfg), "--out", str(out), *args[1:]])


def test_full_pipeline_and_byte_identical_reports(cfg, tmp_path):
    out = tmp_path / "run"
    for cmd in ("gen-data", "train", "convert", "evaluate"):
        assert _m2d(cfg, out, cmd) == 0, cmd
    for name in ("classifier.m2d", "bundle.m2db", "loss_trace.csv", "report.csv", "report.json", "table.csv"):
        assert (out / name).exists()
    first = (out / "report.csv").read_bytes()
    lines = first.decode().splitlines()
    assert lines[0] == "dataset_pair,method,steps,taps,auroc,det_acc,threshold,seed,wall_ms"
    assert [l.split(",")[1] for l in lines[1:]] == ["m2d", "m2d", "m2d-no-retrain", "msp", "odin"]
    table = (out / "table.csv").read_text().splitlines()[0]
    assert table == "Pretraining,OOD,\"1 Layer, 5 step\",\"1 Layer, 10 step\",1 Layer Mahalanobis,Tau-Softmax,ODIN"
    assert _m2d(cfg, out, "evaluate") == 0
    assert (out / "report.csv").read_bytes() == first
    assert len((out / "loss_trace.csv").read_text().splitlines()) == 1 + 5


def test_convert_modes_and_bundle_structure(cfg, tmp_path):
    out = tmp_path / "run"
    for cmd in ("gen-data", "train"):
        assert _m2d(cfg, out, cmd) == 0
    before = (out / "classifier.m2d").read_bytes()
    assert _m2d(cfg, out, "convert", "--no-retrain") == 0
    bundle = io.load_bundle(out / "bundle.m2db")
    clf = io.load(out / "classifier.m2d")
    assert list(bundle.heads) == ["h2"]
    assert bundle.encoder.param_bytes() == nets.truncate(clf, 2).param_bytes()
    assert _m2d(cfg, out, "convert", "--vanilla-ae") == 0
    assert io.load_bundle(out / "bundle.m2db").info["mode"] == "vanilla-ae"
    assert (out / "classifier.m2d").read_bytes() == before


def test_zero_epochs_saves_initialization(cfg, tmp_path):
    out = tmp_path / "run"
    assert _m2d(cfg, out, "gen-data") == 0
    assert _m2d(cfg, out, "train", "--set", "model.epochs=0") == 0
    saved = io.load(out / "classifier.m2d")
    assert saved.param_bytes() == nets.build(nets.mlp([2, 16, 8, 3]), 0).param_bytes()


def test_missing_dataset_path_exit_2(tmp_path, capsys):
    p = tmp_path / "idx.yaml"
    p.write_text(
        CONFIG.replace("source: blobs", "source: idx\n  idx: {images: nope.idx3, labels: nope.idx1}").replace(
            "ood: {center: [12, 12], n: 60}", "ood: {images: gone.idx3}"
        )
    )
    out = tmp_path / "run"
    assert main(["gen-data", "--config", str(p), "--out", str(out)]) == 2
    assert not out.exists()
    assert "does not exist" in capsys.readouterr().err


def test_usage_and_config_errors(cfg, tmp_path):
    assert main(["train", "--config", str(tmp_path / "absent.yaml")]) == 2
    assert _m2d(cfg, tmp_path / "r", "train", "--set", "model.epochs=many") == 2
    assert _m2d(cfg, tmp_path / "r", "train") == 2  # no gen-data yet
    with pytest.raises(SystemExit) as exc:
        main(["bogus"])
    assert exc.value.code == 2


def test_runtime_failure_exit_1(cfg, tmp_path):
    out = tmp_path / "run"
    assert _m2d(cfg, out, "gen-data") == 0
    (out / "classifier.m2d").write_bytes(b"M2D1 not really a model")
    assert _m2d(cfg, out, "convert") == 1


@pytest.fixture()
def input_tap_run(cfg, tmp_path):
    cfg.write_text(CONFIG.replace("taps: [h2]", "taps: [input]"))
    out = tmp_path / "run"
    for cmd in ("gen-data", "train", "convert"):
        assert _m2d(cfg, out, cmd) == 0
    return out


def test_score_at_class_mean(input_tap_run, tmp_path, capsys):
    out = input_tap_run
    sub = data.load_csv(out / "data" / "detector_subset.csv")
    mean = sub.features[sub.labels == 1].mean(axis=0)
    x = tmp_path / "x.csv"
    x.write_text("x0,x1\n" + f"{float(mean[0])!r},{float(mean[1])!r}\n" * 2)
    capsys.readouterr()
    assert main(["score", "--bundle", str(out / "bundle.m2db"), "--input", str(x), "--threshold=-1e-9"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 2
    _, c, verdict, _ = lines[0].split(",")
    assert float(c) <= 0 and float(c) > -1e-9 and verdict == "in"
    assert lines[0].split(",")[1:] == lines[1].split(",")[1:]


def test_score_empty_input_and_output_file(input_tap_run, tmp_path, capsys):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    capsys.readouterr()
    assert main(["score", "--bundle", str(input_tap_run / "bundle.m2db"), "--input", str(empty)]) == 0
    assert capsys.readouterr().out == ""
    dest = tmp_path / "scores.txt"
    ood = input_tap_run / "data" / "ood.csv"
    assert main(["score", "--bundle", str(input_tap_run / "bundle.m2db"), "--input", str(ood), "--output", str(dest)]) == 0
    verdicts = [l.split(",")[2] for l in dest.read_text().splitlines()]
    assert len(verdicts) == 60 and set(verdicts) == {"out"}
    assert main(["score", "--bundle", str(tmp_path / "none.m2db"), "--input", str(ood)]) == 2


def test_console_entry_point(cfg, tmp_path):
    res = subprocess.run(
        [sys.executable, "-m", "m2d.cli", "gen-data", "--config", str(cfg), "--out", str(tmp_path / "r")],
        capture_output=True, text=True,
    )
    assert res.returncode == 0, res.stderr
    assert "event=gen_data" in res.stderr
    prov = json.loads((tmp_path / "r" / "data" / "provenance.json").read_text())
    assert prov["sizes"] == {"train": 108, "fit": 36, "test": 36, "detector_subset": 30, "ood": 60}
    assert np.isclose(sum(prov["sizes"][k] for k in ("train", "fit", "test")), 180)
