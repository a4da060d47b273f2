import csv
import json
import shutil
import subprocess

import numpy as np
import pytest

from flowsteer.cli import main
from flowsteer.data import load_dataset
from flowsteer.model import ModelConfig, SteeringModel
from flowsteer.training import TrainConfig, make_folds

SYNTH = ["--sequences", "4", "--frames", "8"]
TRAIN = ["--folds", "2", "--steps", "2", "--batch", "2", "--seq-len", "4"]


def run(*argv):
    try:
        return main([str(a) for a in argv])
    except SystemExit as exc:
        return exc.code


def error_line(capsys):
    lines = capsys.readouterr().err.strip().splitlines()
    return json.loads(lines[-1])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert run("synth", "--out", out, "--seed", 3, *SYNTH) == 0
    return out


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_synth_layout_and_manifest(dataset):
    names = sorted(p.name for p in dataset.iterdir())
    assert names == ["manifest.json", "seq_0000", "seq_0001", "seq_0002", "seq_0003"]
    assert len(list((dataset / "seq_0000").glob("frame_*.png"))) == 8
    manifest = json.loads((dataset / "manifest.json").read_text())
    assert manifest["command"] == "synth" and manifest["seed"] == 3
    assert manifest["config"]["sequences"] == 4
    assert "seq_0000/steering.csv" in manifest["outputs"]
    assert len(manifest["outputs"]) == 4 * 9


def test_synth_is_reproducible(dataset, tmp_path):
    assert run("synth", "--out", tmp_path, "--seed", 3, *SYNTH) == 0
    for f in ("seq_0002/frame_00005.png", "seq_0003/steering.csv"):
        assert (tmp_path / f).read_bytes() == (dataset / f).read_bytes()


def test_flags_before_subcommand_and_config_file(tmp_path):
    cfg = tmp_path / "synth.txt"
    cfg.write_text("sequences = 1\nframes = 3\nseed = 9\n")
    assert run("--out", tmp_path / "o", "--config", cfg, "synth", "--frames", "2") == 0
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["config"]["frames"] == 2 and manifest["seed"] == 9


def test_train_eval_round_trip_is_deterministic(dataset, tmp_path):
    tables = []
    for name in ("a", "b"):
        runs, ev = tmp_path / f"runs_{name}", tmp_path / f"eval_{name}"
        assert run("train", "--data", dataset, "--out", runs, "--seed", 1, *TRAIN) == 0
        assert run("eval", "--data", dataset, "--runs", runs, "--out", ev) == 0
        tables.append(ev)
    a, b = tmp_path / "runs_a", tmp_path / "runs_b"
    for f in ("fold_01/model.ckpt", "fold_02/model.ckpt", "fold_01/curve.csv", "fold_02/curve.svg"):
        assert (a / f).read_bytes() == (b / f).read_bytes()
    for f in ("eval.csv", "eval_folds.csv"):
        assert (tables[0] / f).read_bytes() == (tables[1] / f).read_bytes()
    header, row = read_rows(tables[0] / "eval.csv")
    assert header == ["fold_1", "fold_2", "mse_mean", "mse_std", "mae_mean", "mae_std"]
    assert all(np.isfinite(float(v)) for v in row)
    manifest = json.loads((a / "manifest.json").read_text())
    assert set(manifest["outputs"]) >= {"fold_01/model.ckpt", "fold_02/curve.csv", "train_config.txt"}


def test_eval_of_zero_output_model_is_closed_form(dataset, tmp_path):
    runs = tmp_path / "runs"
    for fold in (1, 2):
        model = SteeringModel(ModelConfig(head="lstm"), 0)
        model.head.params["out.weight"].data[:] = 0
        model.head.params["out.bias"].data[:] = 0
        model.save(runs / f"fold_{fold:02d}")
    (runs / "train_config.txt").write_text(TrainConfig(folds=2, seq_len=4).to_text())
    assert run("eval", "--data", dataset, "--runs", runs, "--out", tmp_path / "ev", "--folds", "all") == 0
    seqs = load_dataset(dataset)
    plan = make_folds(len(seqs), 2)
    header, row = read_rows(tmp_path / "ev" / "eval.csv")
    mses, maes = [], []
    ev_rows = read_rows(tmp_path / "ev" / "eval_folds.csv")
    assert ev_rows[0] == ["fold", "mse", "mae", "frames"]
    for fold_row in ev_rows[1:]:
        fold = int(fold_row[0]) - 1
        y = np.concatenate([seqs[j].labels for j in plan.folds[fold]]).astype(float)
        assert float(fold_row[1]) == pytest.approx(y.var() + y.mean() ** 2, rel=1e-9)
        assert float(fold_row[2]) == pytest.approx(np.mean(np.abs(y)), rel=1e-9)
        mses.append(float(fold_row[1]))
        maes.append(float(fold_row[2]))
    assert float(row[header.index("mse_mean")]) == pytest.approx(np.mean(mses))
    assert float(row[header.index("mae_mean")]) == pytest.approx(np.mean(maes))


def test_extract_flow_then_train_with_flow(dataset, tmp_path):
    flow = tmp_path / "flow"
    assert run("extract-flow", "--in", dataset, "--out", flow, "--iters", 2) == 0
    files = sorted((flow / "seq_0001").glob("flow_*.flo"))
    assert len(files) == 8 and files[0].read_bytes()[:4] == b"PIEH"
    runs = tmp_path / "runs"
    assert run("train", "--data", dataset, "--flow", flow, "--modality", "flow", "--fold", "2", "--out", runs, *TRAIN) == 0
    assert sorted(p.name for p in runs.iterdir()) == ["fold_02", "manifest.json", "train_config.txt"]
    assert "modality = flow" in (runs / "fold_02" / "config.txt").read_text()


def test_alp_command(dataset, tmp_path):
    runs = tmp_path / "runs"
    assert run("train", "--data", dataset, "--encoder", "vae", "--fold", "2", "--out", runs, *TRAIN) == 0
    out = tmp_path / "alp"
    code = run(
        "alp", "--data", dataset, "--checkpoint", runs / "fold_02", "--folds", 2, "--fold", 2, "--sigma", 0.3, "--out", out
    )
    assert code == 3  # the 8-frame test fold has no 16-frame window
    longer = tmp_path / "long"
    assert run("synth", "--out", longer, "--sequences", 2, "--frames", 16) == 0
    assert run("alp", "--data", longer, "--checkpoint", runs / "fold_02", "--folds", 2, "--fold", 2, "--out", out) == 0
    rows = read_rows(out / "alp_mse.csv")
    assert len(rows) == 33
    assert (out / "alp_impact.svg").exists() and (out / "manifest.json").exists()


def test_alp_rejects_cnn_checkpoint(dataset, tmp_path, capsys):
    runs = tmp_path / "runs"
    assert run("train", "--data", dataset, "--fold", "1", "--out", runs, *TRAIN) == 0
    capsys.readouterr()
    code = run("alp", "--data", dataset, "--checkpoint", runs / "fold_01", "--folds", 2, "--out", tmp_path / "a")
    assert code == 2
    assert error_line(capsys)["code"] == 2


def test_usage_errors(tmp_path, capsys):
    assert run("synth") == 2
    assert error_line(capsys) == {"error": "usage", "code": 2, "message": "--out is required"}
    assert run("train", "--out", tmp_path) == 2
    assert error_line(capsys)["error"] == "usage"
    assert run("--out", tmp_path) == 2
    assert run("synth", "--out", tmp_path, "--frames", "1") == 2
    assert run("synth", "--out", tmp_path, "--speed", "fast") == 2
    assert run("eval", "--data", tmp_path, "--runs", tmp_path, "--out", tmp_path, "--folds", "x") == 2


def test_missing_inputs(tmp_path, capsys):
    assert run("train", "--data", tmp_path / "nope", "--out", tmp_path / "o") == 3
    err = error_line(capsys)
    assert err["code"] == 3 and "nope" in err["message"]
    (tmp_path / "empty").mkdir()
    assert run("train", "--data", tmp_path / "empty", "--out", tmp_path / "o") == 3
    assert run("eval", "--data", tmp_path / "empty", "--runs", tmp_path / "empty", "--out", tmp_path / "o") == 3


def test_bad_fold_selection(dataset, tmp_path):
    assert run("train", "--data", dataset, "--fold", "3", "--out", tmp_path, *TRAIN) == 2
    assert run("train", "--data", dataset, "--fold", "one", "--out", tmp_path, *TRAIN) == 2


def test_divergence_exit_code(dataset, tmp_path, capsys):
    assert run("train", "--data", dataset, "--lr", "1e30", "--fold", "1", "--out", tmp_path, *TRAIN) == 4
    assert error_line(capsys)["error"] == "numeric"


def test_inputs_are_not_modified(dataset, tmp_path):
    before = {p: p.read_bytes() for p in sorted(dataset.rglob("*")) if p.is_file()}
    run("train", "--data", dataset, "--fold", "1", "--out", tmp_path, *TRAIN)
    after = {p: p.read_bytes() for p in sorted(dataset.rglob("*")) if p.is_file()}
    assert before == after


@pytest.mark.skipif(shutil.which("flowsteer") is None, reason="console script not installed")
def test_console_script(tmp_path):
    proc = subprocess.run(["flowsteer", "synth", "--frames", "0", "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 2
    assert json.loads(proc.stderr.strip().splitlines()[-1])["code"] == 2
    env_run = subprocess.run(
        ["flowsteer", "synth", "--sequences", "1", "--frames", "2", "--out", str(tmp_path / "s")],
        capture_output=True,
        text=True,
        env={"FLOWSTEER_THREADS": "1", "PATH": "/usr/local/bin:/usr/bin:/bin"},
    )
    assert env_run.returncode == 0, env_run.stderr
