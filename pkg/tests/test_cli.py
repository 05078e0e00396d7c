from __future__ import annotations

import json
import subprocess
import sys
from pathlib import Path

import pytest
import yaml

from mapattack.classify import classify_prediction
from mapattack.cli import main
from mapattack.oracle import PredictedMap
from mapattack.scene_io import load_scene


def _config(tmp, name="cfg.yaml", **over):
    cfg = {"seed": 7, "out": str(tmp / "run"),
           "suite": {"n_asym": 2, "n_sym": 1, "asym_kinds": ["fork"], "sym_kinds": ["straight"]},
           "attack": {"budget": 8}, "eval": {"overlays": False}}
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(cfg.get(k), dict):
            cfg[k] = {**cfg[k], **v}
        else:
            cfg[k] = v
    p = tmp / name
    p.write_text(yaml.safe_dump(cfg))
    return p


def _files(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = _config(tmp)
    assert main(["run", "--config", str(cfg)]) == 0
    return tmp, cfg, tmp / "run"


class TestExitCodes:
    def test_no_verb(self):
        assert main([]) == 2

    def test_unknown_flag(self, tmp_path):
        assert main(["gen", "--config", str(_config(tmp_path)), "--bogus"]) == 2

    def test_missing_config_file(self, tmp_path):
        assert main(["gen", "--config", str(tmp_path / "nope.yaml")]) == 3

    def test_missing_seed(self, tmp_path, capsys):
        p = tmp_path / "c.yaml"
        p.write_text("out: x\n")
        assert main(["gen", "--config", str(p)]) == 3
        assert "seed" in capsys.readouterr().err

    def test_unknown_section(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("seed: 1\nwhatever: {}\n")
        assert main(["gen", "--config", str(p)]) == 3

    def test_invalid_kind_is_usage(self, tmp_path):
        assert main(["gen", "--config", str(_config(tmp_path, suite={"asym_kinds": ["roundabout"]}))]) == 2

    def test_unknown_objective_is_usage(self, tmp_path):
        assert main(["attack", "--config", str(_config(tmp_path, objective={"kind": "swerve"}))]) == 2

    def test_bad_thresholds(self, tmp_path):
        assert main(["gen", "--config", str(_config(tmp_path, eval={"thresholds": [1.0, 0.5]}))]) == 3
        assert main(["gen", "--config", str(_config(tmp_path, classifier={"dk_thre": -1}))]) == 3

    def test_jobs_must_be_positive(self, tmp_path):
        assert main(["gen", "--config", str(_config(tmp_path)), "--jobs", "0"]) == 2

    def test_external_oracle_unavailable(self, full_run, tmp_path):
        _, _, run = full_run
        cfg = _config(tmp_path, oracle={"kind": "external", "command": ["/nonexistent/oracle"]},
                      scenes=[str(run / "scenes" / "fork-000")])
        assert main(["gen", "--config", str(cfg)]) == 0
        assert main(["eval", "--config", str(cfg)]) == 4

    def test_module_entry_point(self):
        r = subprocess.run([sys.executable, "-m", "mapattack.cli", "frobnicate"], capture_output=True)
        assert r.returncode == 2


class TestGen:
    def test_ten_forks_with_truth(self, tmp_path):
        cfg = _config(tmp_path, suite={"n_asym": 10, "n_sym": 0})
        assert main(["gen", "--config", str(cfg)]) == 0
        index = json.loads((tmp_path / "run" / "scenes" / "index.json").read_text())
        assert index["counts"] == {"fork": 10}
        for e in index["scenes"]:
            f = load_scene(tmp_path / "run" / e["path"])
            assert f.truth.asym_label and e["asym_label"] and e["anchor_xy"] == list(f.truth.anchor_xy)

    def test_seed_repeat_identical(self, tmp_path):
        a = _config(tmp_path, "a.yaml", out=str(tmp_path / "a"))
        b = _config(tmp_path, "b.yaml", out=str(tmp_path / "b"))
        assert main(["gen", "--config", str(a)]) == 0
        assert main(["gen", "--config", str(b), "--jobs", "3"]) == 0
        assert _files(tmp_path / "a" / "scenes") == _files(tmp_path / "b" / "scenes")

    def test_seed_override_changes_suite(self, tmp_path):
        a = _config(tmp_path, "a.yaml", out=str(tmp_path / "a"))
        assert main(["gen", "--config", str(a)]) == 0
        assert main(["gen", "--config", str(a), "--seed", "8", "--out", str(tmp_path / "b")]) == 0
        assert _files(tmp_path / "a" / "scenes") != _files(tmp_path / "b" / "scenes")


class TestClassify:
    def test_confusion_recount(self, full_run):
        _, _, run = full_run
        res = json.loads((run / "classify" / "verdicts.json").read_text())
        index = json.loads((run / "scenes" / "index.json").read_text())
        truth = {e["scene_id"]: e["asym_label"] for e in index["scenes"]}
        c = res["confusion"]["final"]
        assert c["tp"] + c["fp"] + c["fn"] + c["tn"] == len(truth)
        pred = {v["scene_id"]: v["final_label"] == "asymmetric" for v in res["verdicts"]}
        tp = sum(truth[s] and pred[s] for s in truth)
        fp = sum(pred[s] and not truth[s] for s in truth)
        fn = sum(truth[s] and not pred[s] for s in truth)
        assert (c["tp"], c["fp"], c["fn"]) == (tp, fp, fn)
        assert c["precision"] == (tp / (tp + fp) if tp + fp else None)
        assert c["recall"] == (tp / (tp + fn) if tp + fn else None)

    def test_vlm_off_flags_unrefined(self, full_run):
        res = json.loads((full_run[2] / "classify" / "verdicts.json").read_text())
        assert not res["vlm_enabled"] and all("unrefined" in v["flags"] for v in res["verdicts"])

    def test_vlm_on_without_endpoint(self, tmp_path):
        assert main(["classify", "--config", str(_config(tmp_path)), "--vlm", "on"]) == 3


class TestAttack:
    def test_budget_honored(self, full_run):
        _, _, run = full_run
        index = json.loads((run / "attack" / "index.json").read_text())
        assert index["budget"] == 8 and len(index["scenes"]) == 2
        for e in index["scenes"]:
            lines = (run / e["path"] / "trace.jsonl").read_text().splitlines()
            assert e["queries"] == len(lines) <= 8
            assert json.loads(lines[-1])["queries"] == e["queries"]

    def test_blinding_straightens_fork(self, full_run):
        _, _, run = full_run
        for e in json.loads((run / "attack" / "index.json").read_text())["scenes"]:
            f = load_scene(run / "scenes" / e["scene_id"])
            pred = PredictedMap.from_dict(json.loads((run / e["path"] / "prediction_attacked.json").read_text()))
            assert classify_prediction(pred, f.left_boundary, f.right_boundary).label == "symmetric"

    def test_requires_classify(self, tmp_path, capsys):
        cfg = _config(tmp_path)
        assert main(["gen", "--config", str(cfg)]) == 0
        assert main(["attack", "--config", str(cfg)]) == 3
        assert "'classify'" in capsys.readouterr().err


class TestEval:
    def test_clean_only(self, tmp_path):
        cfg = _config(tmp_path, suite={"n_asym": 1, "n_sym": 1})
        for verb in ("gen", "classify", "eval"):
            assert main([verb, "--config", str(cfg)]) == 0
        rep = json.loads((tmp_path / "run" / "eval" / "report.json").read_text())
        assert "attacked" not in rep and "delta" not in rep
        assert all("unreachable_attacked" not in r for r in rep["rows"])

    def test_fractions_and_delta_recount(self, full_run):
        rep = json.loads((full_run[2] / "eval" / "report.json").read_text())
        for side in ("clean", "attacked"):
            assert 0 <= rep[side]["ugr"] <= 1 and 0 <= rep[side]["uptr"] <= 1
        rows = rep["rows"]
        recount = (sum(r["unreachable_attacked"] for r in rows) - sum(r["unreachable_clean"] for r in rows))
        assert rep["delta"]["ugr"] == pytest.approx(recount / len(rows))
        assert (rep["delta"]["ugr"] > 0) == (recount > 0)

    def test_plots_written(self, tmp_path):
        cfg = _config(tmp_path, suite={"n_asym": 1, "n_sym": 0}, eval={"overlays": True}, attack={"budget": 2})
        assert main(["run", "--config", str(cfg)]) == 0
        svgs = list((tmp_path / "run").rglob("*.svg"))
        assert svgs and list((tmp_path / "run").rglob("*.csv"))


class TestReplay:
    def _copy(self, full_run, tmp_path):
        import shutil

        dst = tmp_path / "copy"
        shutil.copytree(full_run[2], dst)
        return dst

    def test_identical(self, full_run, capsys):
        assert main(["replay", str(full_run[2])]) == 0
        assert (full_run[2] / "replay" / "report.json").read_text() == \
            (full_run[2] / "eval" / "report.json").read_text()
        assert "identical" in capsys.readouterr().err

    def test_tampered_trace(self, full_run, tmp_path, capsys):
        run = self._copy(full_run, tmp_path)
        trace = next((run / "attack").glob("*/trace.jsonl"))
        trace.write_text(trace.read_text().replace('"loss": ', '"loss": 1'))
        assert main(["replay", str(run)]) == 3
        assert "checksum" in capsys.readouterr().err

    def test_missing_artifact_names_stage(self, full_run, tmp_path, capsys):
        run = self._copy(full_run, tmp_path)
        next((run / "attack").glob("*/prediction_attacked.json")).unlink()
        assert main(["replay", str(run)]) == 3
        assert "stage 'attack'" in capsys.readouterr().err

    def test_changed_report_is_mismatch(self, full_run, tmp_path):
        run = self._copy(full_run, tmp_path)
        rep = run / "eval" / "report.json"
        rep.write_text(rep.read_text().replace('"mAP": ', '"mAP": 0', 1))
        assert main(["replay", str(run)]) == 5

    def test_jobs_do_not_change_outputs(self, full_run, tmp_path):
        _, cfg, run = full_run
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "j3"), "--jobs", "3"]) == 0
        a, b = _files(run), _files(tmp_path / "j3")
        for name in a:
            if name.startswith(("eval/", "attack/", "classify/", "scenes/")):
                assert a[name] == b[name], name
