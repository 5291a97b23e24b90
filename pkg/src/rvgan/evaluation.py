"""Segmentation metrics restricted to the field of view, ROC data and report files."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import convolve2d

METRICS = ("f1", "sensitivity", "specificity", "accuracy", "auc_roc", "mean_iou", "ssim")
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class EvaluationError(ValueError):
    pass


def to_confidence(seg_map: np.ndarray) -> np.ndarray:
    """Generator output in [-1, 1] -> confidence in [0, 1]."""
    return np.clip((np.asarray(seg_map, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)


def binarize(conf: np.ndarray, t: float = 0.5) -> np.ndarray:
    if not 0.0 < t < 1.0:
        raise EvaluationError(f"threshold must lie in (0, 1), got {t}")
    return (np.asarray(conf) > t).astype(np.uint8)


def _fov_select(fov, *arrays):
    shapes = {np.shape(a) for a in arrays}
    if fov is None:
        fov = np.ones(np.shape(arrays[0]), dtype=bool)
    fov = np.asarray(fov).astype(bool)
    shapes.add(fov.shape)
    if len(shapes) != 1:
        raise EvaluationError(f"incongruent shapes: {sorted(shapes)}")
    if not fov.any():
        raise EvaluationError("empty field of view")
    return [np.asarray(a)[fov] for a in arrays]


def confusion_counts(pred, gt, fov=None) -> tuple[int, int, int, int]:
    """``(tp, fp, fn, tn)`` over FoV pixels."""
    p, g = _fov_select(fov, pred, gt)
    p, g = p.astype(bool), g.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(np.count_nonzero(~p & ~g))
    return tp, fp, fn, tn


def _ratio(num, den, empty=1.0):
    # a class absent from both prediction and truth is scored as perfect
    return num / den if den else empty


def confusion_metrics(pred, gt, fov=None) -> tuple[float, float, float, float]:
    """``(f1, sensitivity, specificity, accuracy)``."""
    tp, fp, fn, tn = confusion_counts(pred, gt, fov)
    f1 = _ratio(2 * tp, 2 * tp + fp + fn)
    sn = _ratio(tp, tp + fn)
    sp = _ratio(tn, tn + fp)
    acc = (tp + tn) / (tp + fp + fn + tn)
    return f1, sn, sp, acc


def mean_iou(pred, gt, fov=None) -> float:
    """Mean of vessel-class and background-class Jaccard indices."""
    tp, fp, fn, tn = confusion_counts(pred, gt, fov)
    return 0.5 * (_ratio(tp, tp + fp + fn) + _ratio(tn, tn + fp + fn))


def roc_curve(scores, labels) -> np.ndarray:
    """ROC points as rows ``(fpr, tpr, threshold)``, thresholds decreasing.

    A pixel is positive at threshold ``t`` iff ``score > t``. Rows are the
    ``+inf`` endpoint (0, 0), one row per distinct score, and the ``-inf``
    endpoint (1, 1).
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("ROC needs both classes present")
    order = np.argsort(-scores, kind="mergesort")
    s, l = scores[order], labels[order]
    distinct, first = np.unique(-s, return_index=True)
    thresholds = -distinct
    # positives strictly above threshold t = cumulative counts before the first occurrence of t
    tp_cum = np.concatenate([[0], np.cumsum(l)])
    fp_cum = np.concatenate([[0], np.cumsum(~l)])
    tpr = tp_cum[first] / n_pos
    fpr = fp_cum[first] / n_neg
    rows = [(0.0, 0.0, math.inf)]
    rows += list(zip(fpr, tpr, thresholds))
    rows.append((1.0, 1.0, -math.inf))
    return np.array(rows, dtype=np.float64)


def auc_roc(conf, gt, fov=None) -> tuple[float, np.ndarray]:
    """Trapezoidal area under the ROC curve and the curve itself."""
    s, g = _fov_select(fov, conf, gt)
    pts = roc_curve(s, g)
    return float(np.trapezoid(pts[:, 1], pts[:, 0])), pts


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, data_range: float = 1.0, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> float:
    """Mean SSIM over all fully contained ``window x window`` Gaussian windows."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise EvaluationError(f"SSIM needs congruent 2-D maps, got {a.shape} and {b.shape}")
    if min(a.shape) < window:
        raise EvaluationError(f"image {a.shape} smaller than the {window}x{window} SSIM window")
    w = _gaussian_window(window, sigma)

    def filt(img):
        return convolve2d(img, w, mode="valid")

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)
    roc_points: np.ndarray | None = None
    dataset_id: str = ""

    def mean(self) -> dict:
        return {m: float(np.mean([r[m] for r in self.rows])) for m in METRICS}

    def to_json(self) -> dict:
        return {"dataset_id": self.dataset_id, "images": self.rows, "mean": self.mean(),
                "n_roc_points": 0 if self.roc_points is None else len(self.roc_points)}

    def write(self, out_dir: str | Path) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out_dir / "report.csv", out_dir / "report.json"
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("image_id",) + METRICS)
            for r in self.rows:
                writer.writerow([r["image_id"]] + [f"{r[m]:.10g}" for m in METRICS])
            mean = self.mean()
            writer.writerow(["mean"] + [f"{mean[m]:.10g}" for m in METRICS])
        json_path.write_text(json.dumps(self.to_json(), indent=2) + "\n")
        return csv_path, json_path


def evaluate_image(conf: np.ndarray, record, t: float = 0.5, ssim_mode: str = "continuous") -> dict:
    """All metrics for one full-size confidence map against an ``ImageRecord``."""
    conf = np.asarray(conf, dtype=np.float64)
    if conf.shape != record.vessel_gt.shape:
        raise EvaluationError(f"{record.image_id}: prediction {conf.shape} vs ground truth {record.vessel_gt.shape}")
    if conf.min() < 0 or conf.max() > 1:
        raise EvaluationError(f"{record.image_id}: confidence values outside [0, 1]")
    gt, fov = record.vessel_gt, record.fov_mask
    pred = binarize(conf, t)
    f1, sn, sp, acc = confusion_metrics(pred, gt, fov)
    auc, _ = auc_roc(conf, gt, fov)
    if ssim_mode == "continuous":
        sim = ssim(conf * fov, gt.astype(np.float64) * fov)
    elif ssim_mode == "binary":
        sim = ssim(pred * fov, gt.astype(np.float64) * fov)
    else:
        raise EvaluationError(f"unknown ssim_mode {ssim_mode!r}")
    return {"image_id": record.image_id, "f1": f1, "sensitivity": sn, "specificity": sp,
            "accuracy": acc, "auc_roc": auc, "mean_iou": mean_iou(pred, gt, fov), "ssim": sim}


def evaluate_dataset(confs: dict, records: Sequence, t: float = 0.5, ssim_mode: str = "continuous") -> EvalReport:
    """Evaluate predictions keyed by image id; the ROC is pooled over all FoV pixels."""
    missing = [r.image_id for r in records if r.image_id not in confs]
    if missing:
        raise EvaluationError(f"missing predictions for image ids: {missing}")
    rows = [evaluate_image(confs[r.image_id], r, t, ssim_mode) for r in records]
    scores = np.concatenate([np.asarray(confs[r.image_id])[r.fov_mask.astype(bool)] for r in records])
    labels = np.concatenate([r.vessel_gt[r.fov_mask.astype(bool)] for r in records])
    dataset = records[0].dataset_id.value if records else ""
    return EvalReport(rows, roc_curve(scores, labels), dataset)


def write_roc_csv(path: str | Path, roc_points: np.ndarray) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("threshold", "fpr", "tpr"))
        for fpr, tpr, thr in roc_points:
            writer.writerow((repr(float(thr)), repr(float(fpr)), repr(float(tpr))))
    return path


def read_roc_csv(path: str | Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([(float(r["fpr"]), float(r["tpr"]), float(r["threshold"])) for r in rows])


def plot_roc(path: str | Path, roc_points: np.ndarray, label: str = "", auc: float | None = None) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    name = label + (f" (AUC = {auc:.4f})" if auc is not None else "")
    ax.plot(roc_points[:, 0], roc_points[:, 1], lw=1.5, label=name or None)
    ax.plot([0, 1], [0, 1], ls="--", lw=0.8, color="grey")
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.01)
    if name:
        ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def overlay_image(fundus: np.ndarray, gt: np.ndarray, conf: np.ndarray, t: float = 0.5) -> np.ndarray:
    """Side-by-side panel: fundus | ground truth | thresholded prediction.

    In the prediction panel true positives are white, false positives red
    and false negatives green.
    """
    pred = conf > t
    g = gt.astype(bool)
    seg = np.zeros(gt.shape + (3,), dtype=np.uint8)
    seg[pred & g] = (255, 255, 255)
    seg[pred & ~g] = (255, 0, 0)
    seg[~pred & g] = (0, 255, 0)
    gt_rgb = np.repeat((g * 255).astype(np.uint8)[..., None], 3, axis=2)
    return np.concatenate([fundus.astype(np.uint8), gt_rgb, seg], axis=1)


def emit_roc_artifacts(report: EvalReport, out_dir: str | Path, records: Sequence = (), confs: dict | None = None,
                       t: float = 0.5, with_png: bool = True) -> list[Path]:
    """Write ``roc.csv`` (+ ``roc.png``) and one overlay PNG per record."""
    from PIL import Image

    if report.roc_points is None or not report.rows:
        raise EvaluationError("report has no ROC data")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    written = [write_roc_csv(out_dir / "roc.csv", report.roc_points)]
    if with_png:
        auc = float(np.trapezoid(report.roc_points[:, 1], report.roc_points[:, 0]))
        written.append(plot_roc(out_dir / "roc.png", report.roc_points, report.dataset_id, auc))
    if confs:
        overlay_dir = out_dir / "overlays"
        overlay_dir.mkdir(exist_ok=True)
        for r in records:
            panel = overlay_image(r.fundus, r.vessel_gt, np.asarray(confs[r.image_id]), t)
            p = overlay_dir / f"{r.image_id}.png"
            Image.fromarray(panel).save(p)
            written.append(p)
    return written
