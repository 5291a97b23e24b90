import hashlib
import json
import shutil
import subprocess
import sys

import numpy as np
import pytest
import yaml
from PIL import Image

from helpers import make_drive_tree
from rvgan.cli import main
from rvgan.data import load_dataset, split_train_test


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def drive(tmp_path_factory):
    return make_drive_tree(tmp_path_factory.mktemp("drive"))


@pytest.fixture(scope="module")
def run(tmp_path_factory, drive):
    """A prepared desk-scale run directory shared by the command tests."""
    work = tmp_path_factory.mktemp("work")
    base = ["--dataset", "DRIVE", "--data-root", str(drive), "--work-dir", str(work),
            "--run-name", "r", "--desk-scale", "--workers", "2", "--set", "train.batch_size=2"]
    assert main(["prepare", *base]) == 0
    return {"base": base, "dir": work / "r", "drive": drive}


def test_print_config_echoes_resolved_values(capsys):
    assert main(["train", "--print-config", "--desk-scale", "--set", "train.epochs=7", "--seed", "3"]) == 0
    cfg = yaml.safe_load(capsys.readouterr().out)
    assert cfg["train"]["desk_scale"] is True and cfg["train"]["epochs"] == 1
    assert cfg["train"]["seed"] == 3 and cfg["data"]["fold_seed"] == 3
    assert cfg["specs"]["g_fine"]["base_channels"] == 16
    assert cfg["train"]["weights"] == {"lambda_adv": 10.0, "lambda_rec": 10.0, "lambda_wfm": 10.0,
                                       "lambda_enc": 0.4, "lambda_dec": 0.6}


def test_exponent_override_parsed_as_number(capsys):
    assert main(["train", "--print-config", "--set", "train.lr=1e-4"]) == 0
    assert yaml.safe_load(capsys.readouterr().out)["train"]["lr"] == 1e-4


def test_config_file_and_flag_precedence(tmp_path, capsys):
    path = tmp_path / "c.yaml"
    path.write_text("dataset_id: STARE\ntrain:\n  batch_size: 8\n")
    assert main(["prepare", "-c", str(path), "--print-config", "--set", "train.batch_size=4"]) == 0
    cfg = yaml.safe_load(capsys.readouterr().out)
    assert cfg["dataset_id"] == "STARE" and cfg["train"]["batch_size"] == 4


@pytest.mark.parametrize("argv", [
    ["prepare", "--set", "train.nonsense=1"],
    ["prepare", "--set", "bogus=1"],
    ["prepare", "--set", "eval.threshold=1.5"],
    ["prepare", "--set", "data.patch_size=64"],
    ["prepare", "--dataset", "MESSIDOR"],
    ["frobnicate"],
])
def test_usage_and_config_errors_exit_1(argv, capsys):
    try:
        code = main(argv + ["--print-config"] if argv[0] == "prepare" else argv)
    except SystemExit as exc:
        code = exc.code
    assert code == 1
    assert "error" in capsys.readouterr().err


def test_missing_root_is_nonzero(tmp_path, capsys):
    code = main(["prepare", "--data-root", str(tmp_path / "nope"), "--work-dir", str(tmp_path)])
    assert code == 3
    assert "nope" in capsys.readouterr().err
    assert main(["prepare", "--work-dir", str(tmp_path)]) == 1


def test_prepare_table_and_idempotence(run, capsys):
    cache = next((run["dir"] / "cache").glob("*.rvgc"))
    folds = run["dir"] / "folds.json"
    before = sha(cache), sha(folds)
    assert main(["prepare", *run["base"]]) == 0
    out = capsys.readouterr().out
    assert "total: 1050 patches from 5 training images (2 test images held out)" in out
    assert out.count(" 210\n") == 5
    assert (sha(cache), sha(folds)) == before


def test_train_fold_out_of_range(run, capsys):
    assert main(["train", *run["base"], "--fold", "5"]) == 1
    assert "out of range" in capsys.readouterr().err


def test_train_before_prepare(tmp_path):
    assert main(["train", "--work-dir", str(tmp_path), "--run-name", "x", "--max-steps", "1"]) == 1


def test_train_resume_and_infer_evaluate_plot(run, tmp_path, capsys):
    base = run["base"]
    assert main(["train", *base, "--fold", "1", "--max-steps", "2"]) == 0
    ckpts = sorted((run["dir"] / "fold1" / "checkpoints").glob("step*.rvgc"))
    assert [c.name for c in ckpts] == ["step0000002.rvgc"]
    assert main(["train", *base, "--fold", "1", "--max-steps", "3", "--resume"]) == 0
    assert "resuming from" in capsys.readouterr().out
    assert (run["dir"] / "fold1" / "checkpoints" / "step0000003.rvgc").exists()
    rows = (run["dir"] / "fold1" / "losses.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in rows] == ["step", "1", "2", "3"]

    # infer on one explicit file with a coarse stride override
    ckpt = run["dir"] / "fold1" / "checkpoints" / "step0000003.rvgc"
    img = run["drive"] / "test" / "images" / "01_test.tif"
    out = tmp_path / "pred"
    assert main(["infer", *base, "--checkpoint", str(ckpt), "--stride", "64", "--out", str(out), str(img)]) == 0
    conf = np.load(out / "01_test.npy")
    png = np.asarray(Image.open(out / "01_test.png"))
    assert conf.shape == png.shape == (584, 565)
    assert png.dtype == np.uint16 or png.max() > 255
    assert 0 <= conf.min() and conf.max() <= 1
    timing = json.loads((out / "timing.json").read_text())
    assert timing["stride"] == 64 and timing["seconds"]["01_test"] > 0

    # incompatible checkpoint
    code = main(["infer", *base, "--set", "specs.g_fine.base_channels=8", "--checkpoint", str(ckpt),
                 "--out", str(out), str(img)])
    assert code == 1


def test_evaluate_ground_truth_against_itself(run, tmp_path, capsys):
    _, test = split_train_test(load_dataset(run["drive"], "DRIVE"))
    pred = tmp_path / "gt_pred"
    pred.mkdir()
    for r in test:
        np.save(pred / f"{r.image_id}.npy", r.vessel_gt.astype(np.float32))
    out = tmp_path / "eval"
    assert main(["evaluate", *run["base"], "--predictions", str(pred), "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert len(report["images"]) == 2
    for k, v in report["mean"].items():
        assert v == pytest.approx(1.0, abs=1e-12), k
    assert {p.name for p in (out / "overlays").iterdir()} == {"01_test.png", "02_test.png"}
    roc_before = sha(out / "roc.csv")

    assert main(["plot", *run["base"], "--predictions", str(pred), "--out", str(out)]) == 0
    assert sha(out / "roc.csv") == roc_before

    (pred / "02_test.npy").unlink()
    assert main(["evaluate", *run["base"], "--predictions", str(pred), "--out", str(out)]) == 1
    assert "02_test" in capsys.readouterr().err


def test_plot_without_evaluate(run, tmp_path, capsys):
    assert main(["plot", *run["base"], "--out", str(tmp_path / "empty")]) == 1
    assert "evaluate" in capsys.readouterr().err


def test_nonfinite_training_exits_2(run, tmp_path, capsys):
    shutil.copytree(run["dir"], tmp_path / "r")
    base = [a if a != str(run["dir"].parent) else str(tmp_path) for a in run["base"]]
    code = main(["train", *base, "--set", "train.weights.lambda_rec=1e308",
                 "--set", "train.weights.lambda_adv=1e308", "--max-steps", "2"])
    assert code == 2
    err = capsys.readouterr().err
    assert "numerical failure" in err and "snapshot" in err


def test_console_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "rvgan.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("prepare", "train", "infer", "evaluate", "plot"):
        assert cmd in res.stdout


@pytest.mark.parametrize("name", ["drive_full.yaml", "desk.yaml"])
def test_shipped_configs_validate(name, capsys):
    from pathlib import Path

    path = Path(__file__).resolve().parents[1] / "configs" / name
    assert main(["train", "-c", str(path), "--print-config"]) == 0
    cfg = yaml.safe_load(capsys.readouterr().out)
    if name == "drive_full.yaml":
        assert cfg["train"]["batch_size"] == 24 and cfg["train"]["epochs"] == 100
        assert cfg["specs"]["g_fine"]["base_channels"] == 64 and cfg["eval"]["test_stride"] == 3
    else:
        assert cfg["specs"]["g_fine"]["base_channels"] == 16 and cfg["train"]["epochs"] == 1
