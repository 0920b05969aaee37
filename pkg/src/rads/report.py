"""Report emission: delimited metrics files plus rendered figures.

Every run report becomes a set of CSVs (metrics per model and range group,
ROC points, event counts per day, ablation sweep) and matching SVG figures
rendered with matplotlib. Figure output is made reproducible by pinning the
SVG hash salt and stripping the date metadata, so reruns of the same
seeded scenario produce identical bytes.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "rads"
import matplotlib.pyplot as plt

from .metrics import RANGE_FAR, RANGE_NEAR


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.write_text(buf.getvalue())


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return f"{x:.6f}"
    return str(x)


def metrics_csv_rows(report: dict) -> List[List[str]]:
    """One row per model x range group x metric."""
    rows: List[List[str]] = []
    for it in report["iterations"]:
        model = it["model"]
        rows.append([model, RANGE_NEAR, "mtpr", _fmt(it["mtpr_near"])])
        rows.append([model, RANGE_FAR, "mtpr", _fmt(it["mtpr_far"])])
        rows.append([model, "all", "mtpr", _fmt(it["mtpr_all"])])
        if it.get("mtpr_thermal") is not None:
            rows.append([model, "thermal", "mtpr", _fmt(it["mtpr_thermal"])])
        rows.append([model, "all", "fpr", _fmt(it["fpr"])])
        if it.get("ap") is not None:
            rows.append([model, "all", "ap", _fmt(it["ap"])])
    return rows


def write_metrics_csv(report: dict, out_dir: Path) -> Path:
    path = out_dir / "metrics.csv"
    _write_csv(path, ["model", "range_group", "metric", "value"], metrics_csv_rows(report))
    return path


def write_roc_csv(report: dict, out_dir: Path) -> List[Path]:
    paths = []
    for it in report["iterations"]:
        roc = it.get("roc") or {}
        for group, points in sorted(roc.items()):
            path = out_dir / f"roc_{it['model']}_{group}.csv"
            _write_csv(path, ["threshold", "tpr", "fpr"],
                       [[_fmt(t), _fmt(tpr), _fmt(fpr)] for t, tpr, fpr in points])
            paths.append(path)
    return paths


def write_events_csv(report: dict, out_dir: Path) -> Optional[Path]:
    events = report.get("events") or {}
    per_day = events.get("per_day")
    if not per_day:
        return None
    path = out_dir / "events_per_day.csv"
    _write_csv(path, ["day", "tp", "fp", "fn"],
               [[d["day"], d["tp"], d["fp"], d["fn"]] for d in per_day])
    return path


def write_ablation_csv(report: dict, out_dir: Path) -> Optional[Path]:
    rows = report.get("ablation")
    if not rows:
        return None
    path = out_dir / "label_ablation.csv"
    _write_csv(path, ["threshold", "map_with", "map_without"],
               [[_fmt(r["threshold"]), _fmt(r["map_with"]), _fmt(r["map_without"])] for r in rows])
    return path


def _save(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def figure_mtpr_progress(report: dict, path: Path) -> None:
    iterations = report["iterations"]
    xs = [it["iteration"] for it in iterations]
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    ax.plot(xs, [it["mtpr_near"] for it in iterations], marker="o", label=f"mTPR {RANGE_NEAR}")
    ax.plot(xs, [it["mtpr_far"] for it in iterations], marker="s", label=f"mTPR {RANGE_FAR}")
    ax.plot(xs, [it["fpr"] for it in iterations], marker="^", linestyle="--", label="FPR")
    ax.set_xlabel("fine-tune iteration")
    ax.set_ylabel("rate")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(loc="best", fontsize=8)
    ax.set_title("Held-out detection performance per iteration")
    fig.tight_layout()
    _save(fig, path)


def figure_roc(report: dict, group: str, path: Path) -> bool:
    fig, ax = plt.subplots(figsize=(5.0, 4.0))
    plotted = False
    for it in report["iterations"]:
        roc = (it.get("roc") or {}).get(group)
        if not roc:
            continue
        points = sorted(roc, key=lambda p: p[2])
        ax.plot([p[2] for p in points], [p[1] for p in points], label=it["model"])
        plotted = True
    if not plotted:
        plt.close(fig)
        return False
    ax.set_xlabel("FPR")
    ax.set_ylabel("TPR")
    ax.set_title(f"ROC ({group})")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    _save(fig, path)
    return True


def figure_events(report: dict, path: Path) -> bool:
    per_day = (report.get("events") or {}).get("per_day")
    if not per_day:
        return False
    days = [d["day"] for d in per_day]
    tp = [d["tp"] for d in per_day]
    fp = [d["fp"] for d in per_day]
    fn = [d["fn"] for d in per_day]
    fig, ax = plt.subplots(figsize=(6.0, 3.2))
    ax.bar(days, tp, label="TP", color="#2a9d8f")
    ax.bar(days, fp, bottom=tp, label="FP", color="#e76f51")
    ax.bar(days, fn, bottom=[a + b for a, b in zip(tp, fp)], label="FN", color="#6c757d")
    ax.set_xlabel("day")
    ax.set_ylabel("events")
    ax.set_title("Detection events per day")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    _save(fig, path)
    return True


def figure_ablation(report: dict, path: Path) -> bool:
    rows = report.get("ablation")
    if not rows:
        return False
    xs = [r["threshold"] for r in rows]
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    ax.plot(xs, [r["map_with"] for r in rows], marker="o", label="with label augmentation")
    ax.plot(xs, [r["map_without"] for r in rows], marker="s", label="without")
    ax.set_xlabel("score threshold")
    ax.set_ylabel("pseudo-label mAP")
    ax.set_ylim(-0.02, 1.05)
    ax.set_title("Pseudo-label quality vs threshold")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    _save(fig, path)
    return True


def emit_report(report: dict, out_dir: Path) -> List[Path]:
    """Write all CSVs and figures for a run report; returns written paths."""
    out_dir.mkdir(parents=True, exist_ok=True)
    written: List[Path] = [write_metrics_csv(report, out_dir)]
    written.extend(write_roc_csv(report, out_dir))
    p = write_events_csv(report, out_dir)
    if p:
        written.append(p)
    p = write_ablation_csv(report, out_dir)
    if p:
        written.append(p)
    fig_path = out_dir / "mtpr_progress.svg"
    figure_mtpr_progress(report, fig_path)
    written.append(fig_path)
    for group in ("near", "far", "thermal"):
        path = out_dir / f"roc_{group}.svg"
        if figure_roc(report, group, path):
            written.append(path)
    path = out_dir / "events_per_day.svg"
    if figure_events(report, path):
        written.append(path)
    path = out_dir / "label_ablation.svg"
    if figure_ablation(report, path):
        written.append(path)
    return written
