import json
from pathlib import Path

import numpy as np
import pytest

from wmhseg.cli import dispatch
from wmhseg.volume_io import read_nifti_mask, write_nifti


def run(argv):
    return dispatch(argv)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data") / "phantom"
    assert run(["phantom", "--out", str(d), "--cases", "4", "--seed", "3"]) == 0
    return d


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset):
    """Tiny fast checkpoints for CLI plumbing tests (quality irrelevant)."""
    out = tmp_path_factory.mktemp("ckpt")
    wm = out / "wm.ckpt"
    wmh = out / "wmh.ckpt"
    common = ["--base-width", "4", "--epochs", "6", "--seed", "1", "--no-augment"]
    assert run(["train-wm", "--data", str(dataset), "--out", str(wm), *common]) == 0
    assert run(
        ["train-wmh", "--data", str(dataset), "--out", str(wmh),
         "--wm-checkpoint", str(wm), "--use-truth-wm", *common]
    ) == 0
    return wm, wmh


class TestPhantomCommand:
    def test_deterministic_directory_content(self, tmp_path):
        for name in ("d1", "d2"):
            assert run(
                ["phantom", "--out", str(tmp_path / name), "--cases", "3",
                 "--seed", "7"]
            ) == 0
        files1 = sorted(p.relative_to(tmp_path / "d1")
                        for p in (tmp_path / "d1").rglob("*") if p.is_file())
        files2 = sorted(p.relative_to(tmp_path / "d2")
                        for p in (tmp_path / "d2").rglob("*") if p.is_file())
        assert files1 == files2
        for rel in files1:
            assert (tmp_path / "d1" / rel).read_bytes() == (
                tmp_path / "d2" / rel
            ).read_bytes()

    def test_report_echoes_config(self, tmp_path, capsys):
        assert run(
            ["phantom", "--out", str(tmp_path / "d"), "--cases", "2", "--seed", "9"]
        ) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["status"] == "ok"
        assert report["config"]["seed"] == 9
        assert report["config"]["phantom"]["dims"] == [64, 64, 8]

    def test_report_to_file(self, tmp_path):
        rpt = tmp_path / "report.json"
        assert run(
            ["phantom", "--out", str(tmp_path / "d"), "--cases", "1",
             "--seed", "1", "--report", str(rpt)]
        ) == 0
        assert json.loads(rpt.read_text())["command"] == "phantom"


class TestTraining:
    def test_history_files_written(self, trained):
        wm, _ = trained
        assert wm.with_suffix(".history.csv").exists()
        hist = json.loads(wm.with_suffix(".history.json").read_text())
        assert hist["iterations"] > 0
        assert all(np.isfinite(v) for v in hist["losses"])

    def test_config_file_and_flag_override(self, tmp_path, dataset):
        cfg_file = tmp_path / "train.json"
        cfg_file.write_text(json.dumps({"epochs": 1, "learning_rate": 0.02,
                                        "seed": 5}))
        rpt = tmp_path / "r.json"
        assert run(
            ["train-wm", "--data", str(dataset), "--out", str(tmp_path / "wm.ckpt"),
             "--base-width", "2", "--config", str(cfg_file),
             "--learning-rate", "0.03", "--report", str(rpt)]
        ) == 0
        report = json.loads(rpt.read_text())
        assert report["config"]["train"]["epochs"] == 1  # from file
        assert report["config"]["train"]["learning_rate"] == 0.03  # flag wins
        assert report["config"]["train"]["seed"] == 5

    def test_unknown_config_key_fails(self, tmp_path, dataset):
        cfg_file = tmp_path / "bad.json"
        cfg_file.write_text(json.dumps({"learn_rate": 0.1}))
        assert run(
            ["train-wm", "--data", str(dataset), "--out", str(tmp_path / "x.ckpt"),
             "--config", str(cfg_file)]
        ) == 1


class TestPredictEvaluate:
    def test_predict_writes_masks_and_reports(self, tmp_path, dataset, trained):
        wm, wmh = trained
        out = tmp_path / "pred"
        assert run(
            ["predict", "--data", str(dataset), "--out", str(out),
             "--wm-checkpoint", str(wm), "--wmh-checkpoint", str(wmh)]
        ) == 0
        case_dirs = sorted(p for p in out.iterdir() if p.is_dir())
        assert len(case_dirs) == 4
        for d in case_dirs:
            assert (d / "wmh.nii").exists()
            assert (d / "wm.nii").exists()
            rep = json.loads((d / "report.json").read_text())
            assert rep["wmh_volume_mm3"] == rep["wmh_voxels"] * 3.0

    def test_predict_thread_count_invariant(self, tmp_path, dataset, trained):
        wm, wmh = trained
        outs = []
        for threads in ("1", "2"):
            out = tmp_path / f"pred_t{threads}"
            assert run(
                ["predict", "--data", str(dataset), "--out", str(out),
                 "--wm-checkpoint", str(wm), "--wmh-checkpoint", str(wmh),
                 "--threads", threads]
            ) == 0
            outs.append(out)
        for d in sorted(p.name for p in outs[0].iterdir() if p.is_dir()):
            a = (outs[0] / d / "wmh.nii").read_bytes()
            b = (outs[1] / d / "wmh.nii").read_bytes()
            assert a == b

    def test_evaluate_identical_masks(self, tmp_path, dataset, capsys):
        gt = dataset / "case_000" / "wmh.nii"
        assert run(["evaluate", "--pred", str(gt), "--gt", str(gt)]) == 0
        report = json.loads(capsys.readouterr().out)
        metrics = report["outputs"]["cases"]["wmh"]
        assert metrics["dice"] == 1.0
        assert metrics["h95_mm"] == 0.0

    def test_evaluate_batch_with_csv(self, tmp_path, dataset, trained, capsys):
        wm, wmh = trained
        pred = tmp_path / "pred"
        assert run(
            ["predict", "--data", str(dataset), "--out", str(pred),
             "--wm-checkpoint", str(wm), "--wmh-checkpoint", str(wmh)]
        ) == 0
        capsys.readouterr()
        csv_path = tmp_path / "cases.csv"
        assert run(
            ["evaluate", "--pred-dir", str(pred), "--gt-dir", str(dataset),
             "--out-csv", str(csv_path), "--team", "us"]
        ) == 0
        report = json.loads(capsys.readouterr().out)
        assert len(report["outputs"]["cases"]) == 4
        assert "team_summary" in report["outputs"]
        header = csv_path.read_text().splitlines()[0]
        assert header.startswith("case_id,dice,h95_mm,avd_percent")


class TestRank:
    TABLE2_CSV = (
        "team,dice,h95,avd_percent,recall,f1\n"
        "sysu_media,0.74,11.0,26.2,0.87,0.72\n"
        "nih_cidi_2,0.70,9.7,21.9,0.79,0.68\n"
        "cain,0.74,14.1,28.4,0.82,0.66\n"
        "nic-vicorob,0.71,13.5,56.3,0.81,0.62\n"
        "nlp_logix,0.68,13.0,27.9,0.66,0.73\n"
    )

    def test_rank_table2_best_h95(self, tmp_path, capsys):
        path = tmp_path / "teams.csv"
        path.write_text(self.TABLE2_CSV)
        out_csv = tmp_path / "ranks.csv"
        out_json = tmp_path / "ranks.json"
        assert run(["rank", "--summaries", str(path), "--out-csv", str(out_csv),
                    "--out-json", str(out_json)]) == 0
        ranks = json.loads(out_json.read_text())
        i = ranks["teams"].index("nih_cidi_2")
        assert ranks["ranks"]["h95"][i] == 0.0
        assert ranks["ranks"]["avd_percent"][i] == 0.0
        assert out_csv.exists()

    def test_rank_missing_file_exits_1(self, tmp_path):
        assert run(["rank", "--summaries", str(tmp_path / "nope.csv")]) == 1


class TestGradcheckCommand:
    def test_passes_at_default_tolerance(self, capsys):
        assert run(["gradcheck", "--base-width", "2", "--depth", "2",
                    "--size", "16", "--max-elements", "16"]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["outputs"]["passed"] is True
        assert report["outputs"]["results"]["network"]["max_rel_error"] <= 1e-4

    def test_impossible_tolerance_exits_1(self):
        assert run(["gradcheck", "--base-width", "2", "--depth", "2",
                    "--size", "16", "--max-elements", "4",
                    "--tolerance", "1e-18"]) == 1


class TestErrors:
    def test_usage_error_exit_2(self):
        with pytest.raises(SystemExit) as exc:
            dispatch(["train-wm"])  # missing required flags
        assert exc.value.code == 2

    def test_runtime_error_exit_1_with_report(self, tmp_path):
        rpt = tmp_path / "fail.json"
        code = run(["train-wm", "--data", str(tmp_path / "missing"),
                    "--out", str(tmp_path / "x.ckpt"), "--report", str(rpt)])
        assert code == 1
        report = json.loads(rpt.read_text())
        assert report["status"] == "error"
        assert report["command"] == "train-wm"
