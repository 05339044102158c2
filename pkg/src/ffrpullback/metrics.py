"""Evaluation of predicted pullback curves against the reference.

Per artery: area under the pullback curve (sum of FFR samples at 10 mm
spacing) and the pullback pressure gradient index, which contrasts the
steepest 20 mm drop with the overall drop and the fraction of vessel length
carrying functional disease.  Arteries are classified focal vs diffuse by
thresholding the PPG index at the median reference PPG.  Aggregates cover
classification agreement, AUPC error, PPG Bland-Altman limits and the
overlap of predicted and reference FFR-value histograms.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .curves import PullbackCurve, resample_linear

FOCAL, DIFFUSE = "focal", "diffuse"


@dataclass(frozen=True)
class PPGConfig:
    window_mm: float = 20.0
    disease_rate_per_mm: float = 0.0015
    classification_threshold: float | None = None   # None: median of reference PPGs
    segment_mm: float = 1.0

    def __post_init__(self):
        if self.window_mm <= 0 or self.disease_rate_per_mm <= 0 or self.segment_mm <= 0:
            raise ValueError("PPG parameters must be positive")


def aupc(curve: PullbackCurve) -> float:
    """Sum of FFR samples after linear resampling to 10 mm (start included)."""
    return float(resample_linear(curve, 10.0).ffr.sum())


def ppg_index(curve: PullbackCurve, cfg: PPGConfig = PPGConfig()) -> float | None:
    """Pullback pressure gradient index in [0, 1]; None for a flat curve
    (no vessel drop, so the index is undefined)."""
    total_drop = float(curve.ffr[0] - curve.ffr.min())
    if total_drop <= 0.0:
        return None
    fine = resample_linear(curve, cfg.segment_mm)
    ffr = fine.ffr
    n = ffr.shape[0]
    win = int(round(cfg.window_mm / cfg.segment_mm))
    if win >= n:
        max_window_drop = float(ffr[0] - ffr[-1])
    else:
        max_window_drop = float(np.max(ffr[: n - win] - ffr[win:]))
        max_window_drop = max(max_window_drop, 0.0)
    seg_drops = ffr[:-1] - ffr[1:]
    diseased_mm = float(np.sum(seg_drops >= cfg.disease_rate_per_mm * cfg.segment_mm) * cfg.segment_mm)
    total_mm = (n - 1) * cfg.segment_mm
    return 0.5 * (max_window_drop / total_drop + (1.0 - diseased_mm / total_mm))


def classify_focal(ppg: float | None, threshold: float) -> str | None:
    """Focal iff strictly above the threshold; ties go to diffuse."""
    if ppg is None:
        return None
    return FOCAL if ppg > threshold else DIFFUSE


def confusion_stats(pairs: list[tuple[str, str]]) -> dict:
    """Accuracy/sensitivity/specificity with `focal` as the positive class."""
    if not pairs:
        raise ValueError("confusion_stats requires at least one pair")
    tp = sum(1 for p, r in pairs if p == FOCAL and r == FOCAL)
    tn = sum(1 for p, r in pairs if p == DIFFUSE and r == DIFFUSE)
    fp = sum(1 for p, r in pairs if p == FOCAL and r == DIFFUSE)
    fn = sum(1 for p, r in pairs if p == DIFFUSE and r == FOCAL)
    pos, neg = tp + fn, tn + fp
    return {
        "accuracy": (tp + tn) / len(pairs),
        "sensitivity": tp / pos if pos else None,
        "specificity": tn / neg if neg else None,
        "n": len(pairs),
        "n_positive": pos,
        "n_negative": neg,
    }


def bland_altman(pairs: list[tuple[float, float]]) -> dict:
    """Bias and 1.96-sigma limits of agreement of (predicted - reference)."""
    if len(pairs) < 2:
        raise ValueError("bland_altman requires at least two pairs")
    diffs = np.array([p - r for p, r in pairs])
    bias = float(diffs.mean())
    sd = float(diffs.std(ddof=1))
    return {"bias": bias, "lower_limit": bias - 1.96 * sd, "upper_limit": bias + 1.96 * sd}


def histogram_overlap(pred_values, ref_values, bin_width: float = 0.05) -> float:
    """Intersection of normalized hard histograms on [0, 1]."""
    pred = np.clip(np.asarray(pred_values, dtype=float), 0.0, 1.0)
    ref = np.clip(np.asarray(ref_values, dtype=float), 0.0, 1.0)
    if pred.size == 0 or ref.size == 0:
        raise ValueError("histogram_overlap requires nonempty samples")
    edges = np.arange(0.0, 1.0 + bin_width / 2, bin_width)
    p, _ = np.histogram(pred, bins=edges)
    q, _ = np.histogram(ref, bins=edges)
    return float(np.minimum(p / p.sum(), q / q.sum()).sum())


# ---------------------------------------------------------------------------
# dataset-level report
# ---------------------------------------------------------------------------

def artery_row(rec_id: str, pred: PullbackCurve, ref: PullbackCurve, cfg: PPGConfig) -> dict:
    return {
        "id": rec_id,
        "aupc_pred": aupc(pred),
        "aupc_ref": aupc(ref),
        "ppg_pred": ppg_index(pred, cfg),
        "ppg_ref": ppg_index(ref, cfg),
    }


def apply_threshold(rows: list[dict], threshold: float) -> None:
    for r in rows:
        r["class_pred"] = classify_focal(r["ppg_pred"], threshold)
        r["class_ref"] = classify_focal(r["ppg_ref"], threshold)


def aggregate_rows(
    rows: list[dict],
    curve_pairs: list[tuple[str, PullbackCurve, PullbackCurve]],
) -> dict:
    pairs = [(r["class_pred"], r["class_ref"]) for r in rows
             if r["class_pred"] is not None and r["class_ref"] is not None]
    ppg_pairs = [(r["ppg_pred"], r["ppg_ref"]) for r in rows
                 if r["ppg_pred"] is not None and r["ppg_ref"] is not None]
    aupc_errors = [abs(r["aupc_pred"] - r["aupc_ref"]) for r in rows]

    pred_ffr = np.concatenate([p.ffr for _, p, _ in curve_pairs]) if curve_pairs else np.array([])
    ref_ffr = np.concatenate([r.ffr for _, _, r in curve_pairs]) if curve_pairs else np.array([])

    aggregates = {
        "n_arteries": len(rows),
        "n_classified": len(pairs),
        "aupc_mad": float(np.mean(aupc_errors)) if aupc_errors else None,
        "ffr_histogram_overlap": histogram_overlap(pred_ffr, ref_ffr) if len(rows) else None,
    }
    if pairs:
        aggregates.update(confusion_stats(pairs))
    if len(ppg_pairs) >= 2:
        aggregates["ppg_bland_altman"] = bland_altman(ppg_pairs)
    return aggregates


def evaluate_curves(
    curve_pairs: list[tuple[str, PullbackCurve, PullbackCurve]],
    cfg: PPGConfig = PPGConfig(),
    threshold: float | None = None,
) -> dict:
    """Per-artery metrics plus aggregates for (id, predicted, reference)
    curve pairs sharing a common measured extent.

    The classification threshold defaults to the median reference PPG of
    the evaluated set; pass the training-split median to avoid test-set
    statistics entering the decision rule.
    """
    rows = [artery_row(rec_id, pred, ref, cfg) for rec_id, pred, ref in curve_pairs]
    if threshold is None:
        threshold = cfg.classification_threshold
    if threshold is None:
        ref_ppgs = [r["ppg_ref"] for r in rows if r["ppg_ref"] is not None]
        if not ref_ppgs:
            raise ValueError("no reference PPG values to derive a threshold from")
        threshold = float(np.median(ref_ppgs))
    apply_threshold(rows, threshold)
    aggregates = aggregate_rows(rows, curve_pairs)
    aggregates["ppg_threshold"] = threshold
    return {"per_artery": rows, "aggregates": aggregates}


def write_report_json(path, report: dict) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_per_artery_csv(path, report: dict) -> None:
    cols = ["id", "aupc_pred", "aupc_ref", "ppg_pred", "ppg_ref", "class_pred", "class_ref"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in report["per_artery"]:
            writer.writerow([row[c] if row[c] is not None else "" for c in cols])
