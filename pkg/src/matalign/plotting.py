"""Report figures (matplotlib, Agg backend) and their tab-delimited data tables."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

FIG_DPI = 110
_RC = {"font.size": 9, "axes.spines.top": False, "axes.spines.right": False}
_META = {"Software": "matalign"}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=FIG_DPI, metadata=_META)
    plt.close(fig)
    return path


def write_table(path, header, rows, delimiter: str = "\t") -> Path:
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.writer(f, delimiter=delimiter, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def candidate_rows(report: dict) -> list[list]:
    rows = []
    for rec in report.get("candidates", []):
        c, al = rec["candidate"], rec.get("alignment") or {}
        fail = rec.get("failure") or {}
        rows.append([c["shape_id"], c["exemplar_id"], c["pose_index"], f"{c['hog_distance']:.6f}",
                     f"{al['flow_energy']:.3f}" if al else "",
                     f"{al['silhouette_iou_coarse']:.4f}" if al else "",
                     f"{al['silhouette_iou_refined']:.4f}" if al else "",
                     rec["status"]["align"], rec["status"]["substance"], rec["status"]["assign"],
                     fail.get("stage", ""), fail.get("reason", "")])
    return rows


CANDIDATE_HEADER = ["shape_id", "exemplar_id", "pose_index", "hog_distance", "flow_energy",
                    "iou_coarse", "iou_refined", "align", "substance", "assign", "failed_stage", "reason"]


FUNNEL_STAGES = ("candidates", "refined", "substance", "assigned")


def funnel_figure(funnel: dict, path) -> Path:
    stages = list(FUNNEL_STAGES)
    counts = [funnel.get(s, 0) for s in stages]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        ax.bar(stages, counts, color="0.45")
        for i, c in enumerate(counts):
            ax.text(i, c, str(c), ha="center", va="bottom")
        ax.set_ylabel("pairs")
        ax.set_title("stage funnel")
        return _save(fig, Path(path))


def iou_figure(report: dict, path) -> Path | None:
    pairs = [(r["alignment"]["silhouette_iou_coarse"], r["alignment"]["silhouette_iou_refined"])
             for r in report.get("candidates", []) if r.get("alignment")]
    if not pairs:
        return None
    a = np.asarray(pairs)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(3.8, 3.6))
        ax.plot([0, 1], [0, 1], color="0.7", lw=0.8)
        ax.scatter(a[:, 0], a[:, 1], s=14, color="k")
        lo = max(0.0, float(a.min()) - 0.05)
        pad = 0.02 * (1.0 - lo)
        ax.set_xlim(lo, 1.0 + pad)
        ax.set_ylim(lo, 1.0 + pad)
        ax.set_xlabel("silhouette IoU, coarse")
        ax.set_ylabel("silhouette IoU, refined")
        return _save(fig, Path(path))


def metrics_figure(metrics: dict, path) -> Path | None:
    keys = [k for k in ("mtl@1", "mtl@5", "sub@1", "sub-mtl@1", "assigned@1", "pose_recovery")
            if metrics.get(k) is not None]
    if not keys:
        return None
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.bar(keys, [metrics[k] for k in keys], color="0.45")
        ax.set_ylim(0, 1.05)
        ax.set_ylabel("precision")
        ax.set_title(f"part-level metrics (n = {metrics.get('n', 0)})")
        ax.tick_params(axis="x", labelrotation=30)
        return _save(fig, Path(path))


def grid_figure(poses, path) -> Path:
    """Camera positions on the unit sphere, azimuth against inclination."""
    theta = np.array([p.theta for p in poses])
    phi = np.array([p.phi for p in poses])
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.scatter(np.degrees(theta), np.degrees(phi), s=4, color="k")
        ax.set_xlabel("azimuth (deg)")
        ax.set_ylabel("inclination from +y (deg)")
        ax.invert_yaxis()
        ax.set_title(f"{len(poses)} viewpoints")
        return _save(fig, Path(path))


def write_report_artifacts(report: dict, out_dir) -> list[Path]:
    """Figures plus the tab-delimited tables they are drawn from."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [write_table(out / "candidates.tsv", CANDIDATE_HEADER, candidate_rows(report))]
    funnel = report.get("funnel", {})
    rows = [[k, funnel[k]] for k in FUNNEL_STAGES if k in funnel]
    paths.append(write_table(out / "funnel.tsv", ["stage", "count"], rows))
    paths.append(funnel_figure(funnel, out / "funnel.png"))
    p = iou_figure(report, out / "iou.png")
    if p:
        paths.append(p)
    metrics = report.get("metrics")
    if metrics:
        rows = [[k, v] for k, v in metrics.items() if not isinstance(v, list)]
        paths.append(write_table(out / "metrics.tsv", ["metric", "value"], rows))
        p = metrics_figure(metrics, out / "metrics.png")
        if p:
            paths.append(p)
    return paths
