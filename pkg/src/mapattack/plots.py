"""SVG figures plus the CSV data behind each, with byte-stable output."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

plt.rcParams["svg.hashsalt"] = "mapattack"
plt.rcParams["svg.fonttype"] = "none"


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return path


def _csv(path: Path, header: list, rows: list) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([f"{v:.9g}" if isinstance(v, float) else v for v in r])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def metrics_bar(report: dict, d: Path) -> list[Path]:
    names = ["mAP", "ugr", "uptr"]
    clean = [report["clean"][n] for n in names]
    att = [report["attacked"][n] for n in names] if "attacked" in report else None
    rows = [[n, c] + ([a] if att else []) for n, c, a in zip(names, clean, att or [None] * 3)]
    files = [_csv(d / "metrics.csv", ["metric", "clean"] + (["attacked"] if att else []), rows)]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    x = range(len(names))
    w = 0.38 if att else 0.6
    ax.bar([i - (w / 2 if att else 0) for i in x], clean, w, label="clean", color="0.6")
    if att:
        ax.bar([i + w / 2 for i in x], att, w, label="attacked", color="tab:red")
    ax.set_xticks(list(x), ["mAP", "UGR", "UPTR"])
    ax.set_ylim(0, 1.05)
    ax.legend(frameon=False)
    fig.tight_layout()
    files.append(_save(fig, d / "metrics.svg"))
    return files


def loss_curves(out: Path, d: Path) -> list[Path]:
    """Best-so-far loss against cumulative queries, one line per attacked scene."""
    index_path = out / "attack" / "index.json"
    if not index_path.exists():
        return []
    index = json.loads(index_path.read_text(encoding="utf-8"))
    rows, series = [], []
    for e in index["scenes"]:
        lines = (out / e["path"] / "trace.jsonl").read_text(encoding="utf-8").splitlines()
        best, q, b = float("inf"), [], []
        for ln in lines:
            t = json.loads(ln)
            best = min(best, t["loss"])
            q.append(t["queries"])
            b.append(best)
            rows.append([e["scene_id"], t["queries"], t["loss"], best])
        series.append((e["scene_id"], q, b))
    files = [_csv(d / "loss_vs_queries.csv", ["scene_id", "queries", "loss", "best_loss"], rows)]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for sid, q, b in series:
        ax.step(q, b, where="post", lw=1, label=sid)
    ax.set_xlabel("queries")
    ax.set_ylabel("best loss")
    if 0 < len(series) <= 8:
        ax.legend(frameon=False, fontsize=7)
    fig.tight_layout()
    files.append(_save(fig, d / "loss_vs_queries.svg"))
    return files


def bev_overlay(frame, pred, path: Path, target=None, trajectories=(), position=None) -> Path:
    """GT in black, prediction in green, attack target red dashed."""
    fig, ax = plt.subplots(figsize=(4, 6))
    for e in frame.gt_map:
        ax.plot(*e.points.T, color="black", lw=1.5)
    if pred is not None:
        for e in pred.elements:
            ax.plot(*e.polyline.points.T, color="tab:green", lw=1.2)
    if target is not None:
        ax.plot(*target.T, color="red", ls="--", lw=1.2)
    for t in trajectories:
        if t.reached and len(t.poses):
            ax.plot(t.poses[:, 0], t.poses[:, 1], color="tab:blue", lw=0.8)
    if position is not None:
        ax.plot(position[0], position[1], marker="*", color="orange", ms=10)
    x0, x1, y0, y1 = frame.bev_range
    ax.set_xlim(x0, x1)
    ax.set_ylim(y0, y1)
    ax.set_aspect("equal")
    ax.set_title(frame.scene_id, fontsize=9)
    fig.tight_layout()
    return _save(fig, path)


def write_plots(out: Path, frames, report: dict, clean, attacked, overlays: bool = True) -> list[Path]:
    import numpy as np

    d = out / "eval" / "plots"
    files = metrics_bar(report, d) + loss_curves(out, d)
    if not overlays:
        return files
    plans = report.get("_plans", [None] * len(frames))
    for i, f in enumerate(frames):
        att = attacked[i] if attacked is not None else None
        target = position = None
        cfg_path = out / "attack" / f.scene_id / "attack_config.json"
        if att is not None and cfg_path.exists():
            doc = json.loads(cfg_path.read_text(encoding="utf-8"))
            if doc["objective"].get("target"):
                target = np.asarray(doc["objective"]["target"], dtype=float)
            position = doc["attack"]["position"]
        p = plans[i]
        trajs = (p["attacked"] if att is not None else p["clean"]) if p else ()
        files.append(bev_overlay(f, att if att is not None else clean[i], d / "overlays" / f"{f.scene_id}.svg",
                                 target, trajs, position))
    return files
