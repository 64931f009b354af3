"""End-to-end runs through the command line, at the smallest widths and at desk scale"""

import json

import numpy as np
import pytest

from strokex import run
from strokex.logs import EpochLog
from strokex.stages import load_checkpoint

pytestmark = pytest.mark.slow

STAGES = ("content", "recognizer", "sdnet", "segnet", "extractnet")


@pytest.fixture(scope="module")
def desk_data(tmp_path_factory):

    root = tmp_path_factory.mktemp("desk")
    assert run(["gen-data", "--n", "20", "--seed", "0", "--layouts", "4", "--split", "0.2", "--out", str(root)]) == 0
    return root


def _config(tmp_path, name="tiny.json", **extractnet):

    path = tmp_path / name
    stage = {"epochs": 1, "batch_size": 2}
    path.write_text(
        json.dumps(
            {
                "channel_scale": 0.125,
                "device": "cpu",
                "content": stage,
                "recognizer": stage,
                "sdnet": stage,
                "segnet": stage,
                "extractnet": {**stage, "crop_size": 64, **extractnet},
            }
        )
    )
    return str(path)


def _train(run_name, data, config, stages=STAGES):

    common = ["--run", run_name, "--data", str(data), "--config", config, "--deterministic"]
    for stage in stages:
        assert run([f"train-{stage}", *common]) == 0, stage
    return common


def test_full_chain_reports_every_metric(desk_data, tmp_path, runs_root):

    common = _train("full", desk_data, _config(tmp_path))

    assert run(["evaluate", *common]) == 0
    report = json.loads((runs_root / "full" / "report.json").read_text())
    for key in ("mDis", "mBIou", "mIOU_m", "mIOU_um"):
        assert report[key] is not None
    assert 0.0 <= report["mIOU_m"] <= 1.0
    assert len(report["per_sample"]) == 4
    assert "baseline" in report

    assert run(["extract", *common, "--limit", "2"]) == 0
    index = json.loads((runs_root / "full" / "extractions" / "index.json").read_text())
    assert len(index) == 2
    assert (runs_root / "full" / "extractions" / index[0]["sample_id"] / "0.png").exists()

    assert run(["report", *common, "--limit", "1"]) == 0
    assert len(list((runs_root / "full" / "overlays").glob("*_panel.png"))) == 1

    manifest = json.loads((runs_root / "full" / "run.json").read_text())
    assert set(manifest["stages"]) == set(STAGES)
    for stage in STAGES:
        assert len(EpochLog(runs_root / "full" / stage / "train.jsonl").read()) == 1


def test_deterministic_runs_agree(desk_data, tmp_path, runs_root):

    config = _config(tmp_path)
    reports = []
    for name in ("repeat-a", "repeat-b"):
        common = _train(name, desk_data, config)
        assert run(["evaluate", *common]) == 0
        reports.append(json.loads((runs_root / name / "report.json").read_text()))

    for key in ("mDis", "mBIou", "mIOU_m", "mIOU_um"):
        assert reports[0][key] == pytest.approx(reports[1][key], abs=1e-6)


def test_oracle_run_skips_registration(desk_data, tmp_path, runs_root):

    config = _config(tmp_path)
    common = ["--run", "oracle", "--data", str(desk_data), "--config", config, "--deterministic"]

    assert run(["train-segnet", *common, "--oracle-prior"]) == 0
    assert run(["train-extractnet", *common, "--oracle-prior"]) == 0
    assert run(["evaluate", *common]) == 0
    assert not (runs_root / "oracle" / "sdnet").exists()


def test_ablated_inputs_train(desk_data, tmp_path, runs_root):

    for name, flags in (("no-prior", {"no_prior": True}), ("no-semantic", {"no_semantic": True})):
        common = _train(name, desk_data, _config(tmp_path, f"{name}.json", **flags))
        assert run(["evaluate", *common]) == 0
        report = json.loads((runs_root / name / "report.json").read_text())
        assert 0.0 <= report["mIOU_m"] <= 1.0


def _desk_run(run_name, data, *flags, stages=STAGES):

    common = ["--run", run_name, "--data", str(data), "--desk", "--deterministic", *flags]
    for stage in stages:
        assert run([f"train-{stage}", *common]) == 0, f"{run_name}: {stage}"
    return common


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    """Desk-preset runs shared by the training-direction checks"""

    root = tmp_path_factory.mktemp("desk-runs")
    data = root / "data"
    ablations = {
        "extract-no-semantic": {"extractnet": {"no_semantic": True}},
        "extract-no-prior": {"extractnet": {"no_prior": True}},
    }

    with pytest.MonkeyPatch.context() as patch:
        patch.setenv("STROKEX_RUNS", str(root / "runs"))
        assert run(["gen-data", "--desk", "--seed", "0", "--out", str(data)]) == 0

        assert run(["evaluate", *_desk_run("full", data)]) == 0
        _desk_run("segment-no-prior", data, "--oracle-prior", "--no-prior", stages=("segnet",))
        _desk_run("extract-full", data, "--oracle-prior", stages=("segnet", "extractnet"))
        for name, overrides in ablations.items():
            config = root / f"{name}.json"
            config.write_text(json.dumps(overrides))
            _desk_run(name, data, "--oracle-prior", "--config", str(config), stages=("segnet", "extractnet"))

    return root / "runs"


@pytest.fixture(scope="module")
def zero_jitter_run(tmp_path_factory):

    root = tmp_path_factory.mktemp("zero-jitter")
    data = root / "data"
    with pytest.MonkeyPatch.context() as patch:
        patch.setenv("STROKEX_RUNS", str(root / "runs"))
        assert run(["gen-data", "--desk", "--zero-jitter", "--seed", "1", "--out", str(data)]) == 0
        assert run(["evaluate", *_desk_run("zero", data)]) == 0

    return root / "runs" / "zero"


def _best(runs, run_name, stage):

    return load_checkpoint(runs / run_name / stage / "best.pt", stage)["metrics"]


def test_content_validation_loss_falls(desk_runs):

    log = EpochLog(desk_runs / "full" / "content" / "train.jsonl").read()
    assert len(log) == 5
    assert log[-1]["val_bce"] < log[0]["val_bce"]


def test_registration_beats_unregistered_reference(desk_runs):

    metrics = _best(desk_runs, "full", "sdnet")
    assert metrics["val_mDis"] < metrics["baseline_mDis"]

    report = json.loads((desk_runs / "full" / "report.json").read_text())
    assert report["mDis"] < report["baseline"]["mDis"]
    assert report["mBIou"] > report["baseline"]["mBIou"]


def test_segmentation_prior_helps(desk_runs):

    with_prior = _best(desk_runs, "extract-full", "segnet")["val_miou"]
    without_prior = _best(desk_runs, "segment-no-prior", "segnet")["val_miou"]
    assert with_prior > without_prior


def test_extraction_input_ablation_ordering(desk_runs):

    full, no_semantic, no_prior = (
        _best(desk_runs, name, "extractnet")["val_mIOU_m"]
        for name in ("extract-full", "extract-no-semantic", "extract-no-prior")
    )
    assert full > no_semantic > no_prior


def test_zero_jitter_strokes_are_recovered(zero_jitter_run):

    report = json.loads((zero_jitter_run / "report.json").read_text())
    ious = [stroke["iou"] for row in report["per_sample"] for stroke in row["strokes"]]

    assert len(report["per_sample"]) == 50
    assert np.median(ious) > 0.9
