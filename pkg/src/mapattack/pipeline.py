"""Pipeline stages gen -> classify -> attack -> eval, plus replay.

Each stage reads only the files written by earlier stages (and the config)
under the run directory, and records its artifacts with SHA-256 sums in
``run_manifest.json``. Scene-level work runs on ``jobs`` threads; results
are merged in scene order, so outputs do not depend on the worker count.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .attack import (RoadsideRegion, build_objective, optimize_blackbox, optimize_patch, pseudo_anchors,
                     pso_search, random_search, rank_positions)
from .classify import ASYMMETRIC, classify_frame
from .config import RunConfig
from .errors import ChecksumError, ConfigError, MissingArtifactError
from .evaluate import MetricReport, PlanningProblem, Vehicle, ade, map_ap, plan, trajectory_unsafe
from .interference import AttackConfig, apply_attack, load_patch, save_patch
from .oracle import PredictedMap, make_oracle
from .render import render_surround_views
from .scene import SceneFrame, generate_scene
from .scene_io import load_scene, save_scene
from .suite import suite_specs
from .vlm import VlmClient, classify_scenes

log = logging.getLogger(__name__)

MANIFEST = "run_manifest.json"


# ---------------------------------------------------------------- persistence

def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_atomic(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def dump_json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _read_json(path, stage: str):
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(stage, str(p))
    return json.loads(p.read_text(encoding="utf-8"))


def read_manifest(out) -> dict:
    p = Path(out) / MANIFEST
    if not p.exists():
        return {"tool": "mapattack", "version": __version__, "stages": {}}
    return json.loads(p.read_text(encoding="utf-8"))


def record_stage(out, cfg: RunConfig, stage: str, files, seconds: float):
    """Add ``stage`` with artifact checksums to the run manifest (atomic rewrite)."""
    out = Path(out)
    m = read_manifest(out)
    m["version"] = __version__
    m["config"] = cfg.snapshot()
    arts = {}
    for f in sorted({Path(f).resolve() for f in files}):
        arts[str(f.relative_to(out.resolve()))] = sha256_file(f)
    m["stages"][stage] = {"artifacts": arts, "wall_clock_s": round(seconds, 3)}
    write_atomic(out / MANIFEST, dump_json(m))


def verify_stage(out, stage: str, manifest: dict | None = None):
    """Check every recorded artifact of ``stage`` exists with its recorded checksum."""
    out = Path(out)
    manifest = manifest or read_manifest(out)
    st = manifest["stages"].get(stage)
    if st is None:
        raise MissingArtifactError(stage, str(out / MANIFEST))
    for rel, digest in st["artifacts"].items():
        p = out / rel
        if not p.exists():
            raise MissingArtifactError(stage, str(p))
        if sha256_file(p) != digest:
            raise ChecksumError(f"stage {stage!r}: checksum mismatch for {p} (artifact modified after the run)")


def _pmap(fn, items, jobs: int) -> list:
    items = list(items)
    if jobs <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _oracle(cfg: RunConfig):
    o = cfg.data["oracle"]
    if o["kind"] == "external":
        return make_oracle("external", command=o["command"], timeout=float(o.get("timeout", 30.0)))
    return make_oracle("surrogate")


# ---------------------------------------------------------------- gen

def cmd_gen(cfg: RunConfig, jobs: int = 1) -> dict:
    t0 = time.monotonic()
    out = cfg.out
    scene_root = out / "scenes"
    if cfg.data["scenes"]:
        frames = [load_scene(p) for p in cfg.data["scenes"]]
    else:
        s = cfg.data["suite"]
        specs = suite_specs(int(s["n_asym"]), int(s["n_sym"]), seed=cfg.seed, asym_kinds=tuple(s["asym_kinds"]),
                            sym_kinds=tuple(s["sym_kinds"]))
        frames = _pmap(lambda sp: render_surround_views(generate_scene(sp)), specs, jobs)
    ids = [f.scene_id for f in frames]
    if len(set(ids)) != len(ids):
        raise ConfigError("scene ids must be unique within a run")
    files = []
    entries = []
    for f in frames:
        d = scene_root / f.scene_id
        files.append(save_scene(f, d))
        files += sorted((d / "images").glob("*.png"))
        entries.append({"scene_id": f.scene_id, "road_kind": f.road_kind, "asym_label": f.truth.asym_label,
                        "anchor_xy": list(f.truth.anchor_xy) if f.truth.anchor_xy is not None else None,
                        "path": f"scenes/{f.scene_id}"})
    counts: dict = {}
    for f in frames:
        counts[f.road_kind] = counts.get(f.road_kind, 0) + 1
    index = {"scenes": entries, "counts": dict(sorted(counts.items()))}
    write_atomic(scene_root / "index.json", dump_json(index))
    files.append(scene_root / "index.json")
    record_stage(out, cfg, "gen", files, time.monotonic() - t0)
    return index


def load_suite(out) -> list[SceneFrame]:
    out = Path(out)
    index = _read_json(out / "scenes" / "index.json", "gen")
    return [load_scene(out / e["path"]) for e in index["scenes"]]


# ---------------------------------------------------------------- classify

def confusion(truth: list[bool], predicted: list[bool]) -> dict:
    tp = sum(t and p for t, p in zip(truth, predicted))
    fp = sum((not t) and p for t, p in zip(truth, predicted))
    fn = sum(t and not p for t, p in zip(truth, predicted))
    tn = sum((not t) and not p for t, p in zip(truth, predicted))
    return {"tp": tp, "fp": fp, "fn": fn, "tn": tn,
            "precision": tp / (tp + fp) if tp + fp else None,
            "recall": tp / (tp + fn) if tp + fn else None}


def cmd_classify(cfg: RunConfig, jobs: int = 1, client: VlmClient | None = None) -> dict:
    t0 = time.monotonic()
    frames = load_suite(cfg.out)
    v = cfg.data["vlm"]
    own = None
    if client is None and v["enabled"]:
        client = own = VlmClient(v["endpoint"], v.get("model", "vlm"), token_env=v.get("token_env",
                                                                                     "MAPATTACK_VLM_TOKEN"))
    try:
        verdicts = classify_scenes(frames, cfg.thresholds(), client, max_in_flight=max(1, jobs))
    finally:
        if own is not None:
            own.close()
    truth = [f.truth.asym_label for f in frames]
    rule = [sv.rule.is_asymmetric for sv in verdicts]
    final = [sv.final_label == ASYMMETRIC for sv in verdicts]
    result = {"verdicts": [sv.to_dict() for sv in verdicts],
              "confusion": {"rule": confusion(truth, rule), "final": confusion(truth, final)},
              "vlm_enabled": client is not None}
    path = cfg.out / "classify" / "verdicts.json"
    write_atomic(path, dump_json(result))
    record_stage(cfg.out, cfg, "classify", [path], time.monotonic() - t0)
    return result


# ---------------------------------------------------------------- attack

def _scene_objective(cfg: RunConfig, frame, final_label: str):
    """(objective spec, anchors) for a scene, or None when the scene is skipped."""
    th = cfg.thresholds()
    o = cfg.data["objective"]
    rv = classify_frame(frame, th)
    if final_label == ASYMMETRIC and rv.is_asymmetric:
        spec = build_objective(o["kind"], frame, rv, alpha=float(o.get("alpha", 1.0)),
                               beta=float(o.get("beta", 1.0)), thresholds=th)
        return spec, list(rv.anchors)
    mode = cfg.data["attack"]["symmetric"]
    if mode == "skip":
        return None
    spec = build_objective(mode, frame, None, flip_direction="to_asymmetric" if mode == "scene_flip" else None,
                           thresholds=th)
    return spec, pseudo_anchors(frame)


def attack_scene(cfg: RunConfig, frame, final_label: str) -> dict | None:
    """Optimize one scene; returns in-memory results (nothing written)."""
    picked = _scene_objective(cfg, frame, final_label)
    if picked is None:
        return None
    spec, anchors = picked
    a = cfg.data["attack"]
    budget = int(a["budget"])
    oracle = _oracle(cfg)
    params = cfg.ranking_params()
    if a["vector"] == "patch":
        cands = rank_positions(frame, anchors, params)
        best, trace = optimize_patch(oracle, frame, spec, cands, cfg.pgd_params(), budget)
    elif a["strategy"] == "ranked":
        cands = rank_positions(frame, anchors, params)
        best, trace = optimize_blackbox(oracle, frame, spec, cands, budget)
    else:
        region = RoadsideRegion.from_ranking(params)
        search = random_search if a["strategy"] == "random" else pso_search
        best, trace = search(oracle, frame, spec, region, budget, seed=cfg.seed)
    images = apply_attack(frame.images, frame.rig, best)
    pred = oracle.predict(frame, images)
    close = getattr(oracle, "close", None)
    if close is not None:
        close()
    return {"spec": spec, "best": best, "trace": trace, "images": images, "pred": pred}


def _save_attack(out: Path, frame, res: dict) -> list[Path]:
    d = out / "attack" / frame.scene_id
    d.mkdir(parents=True, exist_ok=True)
    files = []
    cfg_d = res["best"].to_dict()
    if res["best"].kind == "patch":
        save_patch(res["best"].patch, d / "patch")
        cfg_d["patch"]["pattern_file"] = "patch/pattern.png"
        files += [d / "patch" / n for n in ("pattern.png", "mask.png", "patch.json")]
    doc = {"scene_id": frame.scene_id, "attack": cfg_d, "objective": res["spec"].to_dict(),
           "search": res["trace"].summary()}
    doc["search"].pop("best", None)
    write_atomic(d / "attack_config.json", dump_json(doc))
    write_atomic(d / "trace.jsonl", res["trace"].to_jsonl())
    write_atomic(d / "prediction_attacked.json", dump_json(res["pred"].to_dict()))
    files += [d / "attack_config.json", d / "trace.jsonl", d / "prediction_attacked.json"]
    from PIL import Image

    (d / "images").mkdir(exist_ok=True)
    for cam_id, img in sorted(res["images"].items()):
        p = d / "images" / f"{cam_id}.png"
        Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)).save(p)
        files.append(p)
    return files


def load_attack_config(d) -> AttackConfig:
    doc = _read_json(Path(d) / "attack_config.json", "attack")
    a = doc["attack"]
    if a["kind"] == "patch":
        spec = load_patch(Path(d) / "patch")
        return AttackConfig("patch", tuple(a["position"]), patch=spec)
    return AttackConfig.from_dict(a)


def cmd_attack(cfg: RunConfig, jobs: int = 1) -> dict:
    t0 = time.monotonic()
    out = cfg.out
    frames = load_suite(out)
    verdicts = {v["scene_id"]: v for v in _read_json(out / "classify" / "verdicts.json", "classify")["verdicts"]}
    missing = [f.scene_id for f in frames if f.scene_id not in verdicts]
    if missing:
        raise MissingArtifactError("classify", f"verdicts for {missing}")
    results = _pmap(lambda f: attack_scene(cfg, f, verdicts[f.scene_id]["final_label"]), frames, jobs)
    files, entries = [], []
    for f, res in zip(frames, results):
        if res is None:
            continue
        files += _save_attack(out, f, res)
        tr = res["trace"]
        entries.append({"scene_id": f.scene_id, "objective": res["spec"].kind, "vector": res["best"].kind,
                        "strategy": tr.strategy, "best_loss": tr.best_loss, "queries": tr.queries,
                        "probes": tr.probes, "position": list(res["best"].position),
                        "path": f"attack/{f.scene_id}"})
    index = {"scenes": entries, "budget": int(cfg.data["attack"]["budget"])}
    write_atomic(out / "attack" / "index.json", dump_json(index))
    files.append(out / "attack" / "index.json")
    record_stage(out, cfg, "attack", files, time.monotonic() - t0)
    return index


# ---------------------------------------------------------------- eval

def _plan_scene(frame, pred: PredictedMap, vehicle: Vehicle):
    prob = PlanningProblem.from_map(pred.boundaries(), frame.ego_pose, frame.truth.goals, frame.bev_range, vehicle)
    return plan(prob)


def _scene_metrics(frame, clean: PredictedMap, attacked: PredictedMap | None, vehicle: Vehicle) -> dict:
    gt_b = [e for e in frame.gt_map if e.class_tag == "boundary"]
    tc = _plan_scene(frame, clean, vehicle)
    row = {"scene_id": frame.scene_id, "road_kind": frame.road_kind, "asym_label": frame.truth.asym_label,
           "unreachable_clean": any(not t.reached for t in tc),
           "unsafe_clean": any(t.reached and trajectory_unsafe(t, gt_b, vehicle) for t in tc)}
    out = {"row": row, "clean": tc, "attacked": None}
    if attacked is not None:
        ta = _plan_scene(frame, attacked, vehicle)
        row["unreachable_attacked"] = any(not t.reached for t in ta)
        row["unsafe_attacked"] = any(t.reached and trajectory_unsafe(t, gt_b, vehicle) for t in ta)
        pairs = [ade(a, b) for a, b in zip(tc, ta) if a.reached and b.reached]
        row["ade"] = float(np.mean(pairs)) if pairs else None
        out["attacked"] = ta
    return out


def evaluate_run(frames, clean: list, attacked: list | None, thresholds, vehicle: Vehicle | None = None,
                 jobs: int = 1) -> dict:
    """Clean (and attacked) MetricReports over ``frames``; ``attacked`` entries may be None (scene not attacked)."""
    vehicle = vehicle or Vehicle()
    gts = [list(f.gt_map) for f in frames]
    att = attacked if attacked is not None else [None] * len(frames)
    # scenes without an attack keep their clean prediction in the attacked column
    att_full = [a if a is not None else c for a, c in zip(att, clean)]
    per = _pmap(lambda i: _scene_metrics(frames[i], clean[i], att_full[i] if attacked is not None else None,
                                         vehicle), range(len(frames)), jobs)
    rows = [p["row"] for p in per]
    for r, a in zip(rows, att):
        r["attacked"] = a is not None
    n = len(frames)
    ap_c = map_ap(clean, gts, thresholds)
    rep_c = MetricReport(ap_c["ap"], ap_c["mAP"], sum(r["unreachable_clean"] for r in rows) / n if n else 0.0,
                         sum(r["unsafe_clean"] for r in rows) / n if n else 0.0, None,
                         counts={"scenes": n, "skipped_classes": ap_c["skipped"]})
    report = {"thresholds": ap_c["thresholds"], "clean": rep_c.to_dict(), "rows": rows}
    report["clean"].pop("rows")
    if attacked is not None:
        ap_a = map_ap(att_full, gts, thresholds)
        ades = [r["ade"] for r in rows if r.get("ade") is not None]
        rep_a = MetricReport(ap_a["ap"], ap_a["mAP"], sum(r["unreachable_attacked"] for r in rows) / n if n else 0.0,
                             sum(r["unsafe_attacked"] for r in rows) / n if n else 0.0,
                             float(np.mean(ades)) if ades else None,
                             counts={"scenes": n, "attacked_scenes": sum(a is not None for a in att),
                                     "skipped_classes": ap_a["skipped"]})
        report["attacked"] = rep_a.to_dict()
        report["attacked"].pop("rows")
        report["delta"] = {"mAP": rep_a.mAP - rep_c.mAP, "ugr": rep_a.ugr - rep_c.ugr, "uptr": rep_a.uptr - rep_c.uptr}
    report["_reports"] = (rep_c, rep_a if attacked is not None else None)
    report["_plans"] = per
    return report


def report_json(report: dict) -> str:
    from .evaluate.metrics import _rounded

    public = {k: v for k, v in report.items() if not k.startswith("_")}
    return json.dumps(_rounded(public), indent=1, sort_keys=True) + "\n"


def report_table(report: dict) -> str:
    rep_c, rep_a = report["_reports"]
    lines = ["clean", rep_c.table()]
    if rep_a is not None:
        lines += ["attacked", rep_a.table()]
    return "\n".join(lines)


def _load_predictions(out: Path, frames, with_attack: bool):
    clean = [PredictedMap.from_dict(_read_json(out / "eval" / "predictions" / f"{f.scene_id}.json", "eval"))
             for f in frames]
    if not with_attack:
        return clean, None
    index = _read_json(out / "attack" / "index.json", "attack")
    done = {e["scene_id"]: e for e in index["scenes"]}
    attacked = []
    for f in frames:
        e = done.get(f.scene_id)
        attacked.append(None if e is None else
                        PredictedMap.from_dict(_read_json(out / e["path"] / "prediction_attacked.json", "attack")))
    return clean, attacked


def cmd_eval(cfg: RunConfig, jobs: int = 1) -> dict:
    from .plots import write_plots

    t0 = time.monotonic()
    out = cfg.out
    frames = load_suite(out)
    with_attack = (out / "attack" / "index.json").exists()

    def clean_pred(f):
        o = _oracle(cfg)
        try:
            return o.predict(f, f.images)
        finally:
            if hasattr(o, "close"):
                o.close()

    preds = _pmap(clean_pred, frames, jobs)
    files = []
    for f, p in zip(frames, preds):
        path = out / "eval" / "predictions" / f"{f.scene_id}.json"
        write_atomic(path, dump_json(p.to_dict()))
        files.append(path)
    # re-read so eval and replay consume the identical persisted values
    clean, attacked = _load_predictions(out, frames, with_attack)
    report = evaluate_run(frames, clean, attacked, cfg.data["eval"]["thresholds"], jobs=jobs)
    files += _write_report(out / "eval", report)
    files += write_plots(out, frames, report, clean, attacked, overlays=bool(cfg.data["eval"].get("overlays", True)))
    record_stage(out, cfg, "eval", files, time.monotonic() - t0)
    return report


def _write_report(d: Path, report: dict) -> list[Path]:
    write_atomic(d / "report.json", report_json(report))
    rep_c, _ = report["_reports"]
    rows = MetricReport(rep_c.ap_per_class, rep_c.mAP, rep_c.ugr, rep_c.uptr, None, rows=report["rows"])
    write_atomic(d / "rows.csv", rows.rows_csv())
    write_atomic(d / "summary.txt", report_table(report))
    return [d / "report.json", d / "rows.csv", d / "summary.txt"]


# ---------------------------------------------------------------- replay

def cmd_replay(run_dir) -> tuple[str, bool]:
    """Verify artifacts, recompute the report from persisted predictions; (report text, identical?)."""
    out = Path(run_dir)
    m = _read_json(out / MANIFEST, "gen")
    for stage in ("gen", "classify", "attack"):
        if stage in m["stages"]:
            verify_stage(out, stage, m)
    if "eval" not in m["stages"]:
        raise MissingArtifactError("eval", str(out / "eval" / "report.json"))
    # predictions are inputs to the recomputation; the report itself is the comparison target
    eval_inputs = {k: v for k, v in m["stages"]["eval"]["artifacts"].items() if k.startswith("eval/predictions/")}
    verify_stage(out, "eval", {"stages": {"eval": {"artifacts": eval_inputs}}})
    cfg = RunConfig.from_dict(m["config"])
    frames = load_suite(out)
    clean, attacked = _load_predictions(out, frames, "attack" in m["stages"])
    report = evaluate_run(frames, clean, attacked, cfg.data["eval"]["thresholds"])
    text = report_json(report)
    write_atomic(out / "replay" / "report.json", text)
    original = out / "eval" / "report.json"
    if not original.exists():
        raise MissingArtifactError("eval", str(original))
    return text, original.read_text(encoding="utf-8") == text
