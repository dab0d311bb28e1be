"""Keypoint/mask metrics and the two analyses: disagreement vs. score
correlation, and bone-length density estimates."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .synthhands import BONE_GROUPS, bone_lengths


def mpe(pred: np.ndarray, gt: np.ndarray, include: np.ndarray | None = None) -> float:
    """Mean Euclidean joint error in pixels over included joints."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"mpe: shape mismatch {pred.shape} vs {gt.shape}")
    err = np.linalg.norm(pred - gt, axis=-1)
    if include is not None:
        err = err[np.asarray(include, dtype=bool)]
    if err.size == 0:
        raise ValueError("mpe: every joint is excluded")
    return float(err.mean())


def pck_thresholds(max_threshold: float = 20.0, n_thresholds: int = 20) -> np.ndarray:
    """Evenly spaced thresholds in (0, max]: max/n, 2max/n, ..., max."""
    return max_threshold * np.arange(1, n_thresholds + 1) / n_thresholds


def pck_auc(errors, max_threshold: float = 20.0, n_thresholds: int = 20) -> float:
    """Area under the PCK curve in percent, as the mean over thresholds of the
    fraction of joints with error <= threshold."""
    e = np.asarray(errors, dtype=np.float64).reshape(-1)
    if np.any(e < 0):
        raise ValueError("pck_auc: errors must be non-negative")
    if e.size == 0:
        raise ValueError("pck_auc: no errors given")
    t = pck_thresholds(max_threshold, n_thresholds)
    return float((e[None, :] <= t[:, None]).mean() * 100.0)


def iou(pred_mask_prob, gt_mask, threshold: float = 0.5) -> tuple[float, bool]:
    """IoU in percent after thresholding; returns (iou, both_empty flag)."""
    a = np.asarray(pred_mask_prob) >= threshold
    b = np.asarray(gt_mask).astype(bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 100.0, True
    return float(np.logical_and(a, b).sum() / union * 100.0), False


@dataclass
class MetricsRecord:
    mpe_px: float
    pck_auc: float
    iou: float
    avg: float
    per_instance: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        return {"mpe_px": self.mpe_px, "pck_auc": self.pck_auc, "iou": self.iou, "avg": self.avg,
                "n": len(self.per_instance)}


def pck_max_threshold(image_size: int, native_max: float = 20.0, native_size: int = 128) -> float:
    """The 20 px range is defined on 128 px crops; scale it to ``image_size``."""
    return native_max * image_size / native_size


def evaluate(pred_coords: np.ndarray, pred_mask_prob: np.ndarray, gt_coords: np.ndarray, gt_masks: np.ndarray,
             image_size: int = 32, max_threshold: float | None = None, n_thresholds: int = 20,
             disagreement: np.ndarray | None = None) -> MetricsRecord:
    """Dataset metrics plus one record per instance. Joints outside the frame
    are excluded from every keypoint metric."""
    pred_coords = np.asarray(pred_coords, dtype=np.float64)
    gt_coords = np.asarray(gt_coords, dtype=np.float64)
    thr = pck_max_threshold(image_size) if max_threshold is None else max_threshold
    inside = np.all((gt_coords >= 0) & (gt_coords <= image_size - 1), axis=-1)
    errors = np.linalg.norm(pred_coords - gt_coords, axis=-1)
    rows = []
    for i in range(len(gt_coords)):
        e = errors[i][inside[i]]
        inst_pck = pck_auc(e, thr, n_thresholds) if e.size else float("nan")
        inst_iou, empty = iou(pred_mask_prob[i], gt_masks[i])
        row = {"index": i, "mpe": float(e.mean()) if e.size else float("nan"), "pck_contrib": inst_pck,
               "iou": inst_iou, "avg": (inst_pck + inst_iou) / 2.0, "iou_both_empty": empty}
        if disagreement is not None:
            row["disagreement"] = float(disagreement[i])
        rows.append(row)
    all_err = errors[inside]
    p = pck_auc(all_err, thr, n_thresholds)
    m = float(np.mean([r["iou"] for r in rows]))
    return MetricsRecord(mpe_px=float(all_err.mean()), pck_auc=p, iou=m, avg=(p + m) / 2.0, per_instance=rows)


def write_metrics(rec: MetricsRecord, out_dir: str | Path, stem: str = "metrics") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.json").write_text(json.dumps(rec.summary(), indent=2, sort_keys=True) + "\n")
    keys = list(rec.per_instance[0]) if rec.per_instance else ["index"]
    with open(out / f"{stem}_per_instance.csv", "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=keys)
        wr.writeheader()
        for r in rec.per_instance:
            wr.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})


@dataclass
class Correlation:
    spearman_rho: float
    p_value: float
    degenerate: bool
    bins: list[dict]


def disagreement_correlation(disagreement, score, n_bins: int = 10) -> Correlation:
    """Spearman rank correlation between disagreement and per-instance score,
    plus mean score per disagreement decile."""
    d = np.asarray(disagreement, dtype=np.float64)
    s = np.asarray(score, dtype=np.float64)
    if d.shape != s.shape:
        raise ValueError("disagreement and score must have equal length")
    if d.size < 30:
        raise ValueError(f"need at least 30 instances, got {d.size}")
    degenerate = bool(np.all(d == d[0]) or np.all(s == s[0]))
    if degenerate:
        rho, pv = float("nan"), float("nan")
    else:
        res = stats.spearmanr(d, s)
        rho, pv = float(res.statistic), float(res.pvalue)
    order = np.argsort(d, kind="stable")
    bins = []
    for i, chunk in enumerate(np.array_split(order, n_bins)):
        if chunk.size == 0:
            continue
        bins.append({"bin": i, "n": int(chunk.size), "disagreement_lo": float(d[chunk].min()),
                     "disagreement_hi": float(d[chunk].max()), "disagreement_mean": float(d[chunk].mean()),
                     "score_mean": float(s[chunk].mean())})
    return Correlation(rho, pv, degenerate, bins)


def kde_curve(samples, bandwidth: float, grid: np.ndarray | None = None, n_grid: int = 512
              ) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian kernel density evaluated on a uniform grid that covers the
    samples +/- 6 bandwidths (so the curve integrates to ~1)."""
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("kde_curve: no samples")
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    if grid is None:
        grid = np.linspace(x.min() - 6 * bandwidth, x.max() + 6 * bandwidth, n_grid)
    z = (grid[:, None] - x[None, :]) / bandwidth
    dens = np.exp(-0.5 * z * z).sum(axis=1) / (x.size * bandwidth * np.sqrt(2 * np.pi))
    return grid, dens


def bone_length_kde(coords, bone_group: str, bandwidth: float = 0.5, grid: np.ndarray | None = None
                    ) -> tuple[np.ndarray, np.ndarray]:
    if bone_group not in BONE_GROUPS:
        raise ValueError(f"unknown bone group {bone_group!r}")
    return kde_curve(bone_lengths(coords, bone_group), bandwidth, grid)


def curve_l1(grid: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    """L1 distance between two densities sampled on the same grid."""
    return float(np.trapezoid(np.abs(a - b), grid))


def write_rows_csv(rows: list[dict], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(rows[0]))
        wr.writeheader()
        for r in rows:
            wr.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})


def polyline_svg(series: dict[str, tuple[np.ndarray, np.ndarray]], path: str | Path, title: str = "",
                 width: int = 480, height: int = 320) -> None:
    """Minimal SVG line plot of one or more (x, y) series."""
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd"]
    xs = np.concatenate([np.asarray(s[0], float) for s in series.values()])
    ys = np.concatenate([np.asarray(s[1], float) for s in series.values()])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(min(ys.min(), 0.0)), float(ys.max())
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0
    pad = 40

    def px(x, y):
        return (pad + (x - x0) / (x1 - x0) * (width - 2 * pad), height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad))

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="13">{title}</text>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="{pad}" y="{height - pad + 15}" font-size="10">{x0:.3g}</text>',
             f'<text x="{width - pad}" y="{height - pad + 15}" font-size="10" text-anchor="end">{x1:.3g}</text>',
             f'<text x="{pad - 4}" y="{pad}" font-size="10" text-anchor="end">{y1:.3g}</text>']
    for i, (name, (x, y)) in enumerate(series.items()):
        pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in (px(u, v) for u, v in zip(x, y)))
        c = colors[i % len(colors)]
        parts.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{pts}"/>')
        parts.append(f'<text x="{width - pad}" y="{pad + 14 * i}" font-size="11" fill="{c}" text-anchor="end">{name}</text>')
    parts.append("</svg>")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(parts) + "\n")
