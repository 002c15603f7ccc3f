"""Segmentation training losses and evaluation metrics.

Training side: soft Dice, focal loss, lowest-loss multi-mask selection,
prompt re-weighting, and the IoU-head regression target.  Evaluation
side: IoU, Dice, exact Hausdorff distance over 4-connectivity
boundaries, the small-mask filter, and the grouped run evaluator.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import ArchiveAlignmentError

_CLAMP = 1e-7


def _check_dims(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"mask shape mismatch: {a.shape} vs {b.shape}")


def dice_loss(pred: np.ndarray, gt: np.ndarray, eps: float = 1.0) -> float:
    """Soft Dice loss: 1 - (2 * sum(p*g) + eps) / (sum(p) + sum(g) + eps).

    With eps = 0 a both-empty pair counts as a perfect match (loss 0).
    """
    _check_dims(pred, gt)
    if eps < 0:
        raise ValueError("eps must be >= 0")
    g = gt.astype(np.float64)
    p = pred.astype(np.float64)
    inter = float((p * g).sum())
    denom = float(p.sum()) + float(g.sum()) + eps
    if denom == 0.0:
        return 0.0
    return 1.0 - (2.0 * inter + eps) / denom


def focal_loss(pred: np.ndarray, gt: np.ndarray, alpha: float = 0.25,
               gamma: float = 2.0) -> float:
    """Mean focal loss; predictions are clamped to [1e-7, 1 - 1e-7]."""
    _check_dims(pred, gt)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    p = np.clip(pred.astype(np.float64), _CLAMP, 1.0 - _CLAMP)
    g = gt.astype(bool)
    p_t = np.where(g, p, 1.0 - p)
    a_t = np.where(g, alpha, 1.0 - alpha)
    return float(np.mean(-a_t * (1.0 - p_t) ** gamma * np.log(p_t)))


@dataclass
class MultiMaskOutput:
    """Three candidate soft masks with their predicted IoU scores."""

    masks: list  # 3 soft masks (H, W)
    pred_ious: list  # 3 floats in [0, 1]

    def __post_init__(self):
        if len(self.masks) != 3 or len(self.pred_ious) != 3:
            raise ValueError("expected exactly 3 masks and 3 predicted IoUs")
        for s in self.pred_ious:
            if not 0.0 <= s <= 1.0:
                raise ValueError("predicted IoUs must lie in [0, 1]")


def select_min_loss(outputs: MultiMaskOutput, gt: np.ndarray,
                    focal_weight: float = 20.0, dice_eps: float = 1.0,
                    alpha: float = 0.25, gamma: float = 2.0):
    """Index and loss of the branch with the lowest dice + focal combination.

    Ties go to the lowest index; the returned loss is that branch's only.
    """
    losses = [
        dice_loss(m, gt, dice_eps) + focal_weight * focal_loss(m, gt, alpha, gamma)
        for m in outputs.masks
    ]
    idx = int(np.argmin(losses))
    return idx, float(losses[idx])


def iou_head_target(pred: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> float:
    """IoU of the thresholded prediction against gt (regression target)."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    return iou(pred >= threshold, gt.astype(bool))


def reweight_prompt_losses(text_loss: float, point_losses) -> float:
    """Weight the text term to match the combined point terms: n*text + sum(points)."""
    points = list(point_losses)
    if not points:
        return float(text_loss)
    return len(points) * float(text_loss) + float(np.sum(points))


# ---------------------------------------------------------------------------
# Evaluation metrics
# ---------------------------------------------------------------------------


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union for binary masks; both-empty counts as 1.0."""
    _check_dims(a, b)
    a = a.astype(bool)
    b = b.astype(bool)
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum()) / union


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """Dice coefficient for binary masks; both-empty counts as 1.0."""
    _check_dims(a, b)
    a = a.astype(bool)
    b = b.astype(bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * float(np.logical_and(a, b).sum()) / total


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """(N, 2) row/col coordinates of the 4-connectivity boundary."""
    m = mask.astype(bool)
    eroded = ndimage.binary_erosion(m, structure=ndimage.generate_binary_structure(2, 1),
                                    border_value=0)
    return np.argwhere(m & ~eroded)


def hausdorff(a: np.ndarray, b: np.ndarray, spacing: float = 1.0) -> float:
    """Exact symmetric Hausdorff distance between mask boundaries.

    Both masks must be nonempty; distances are Euclidean in pixel units
    scaled by ``spacing``.
    """
    _check_dims(a, b)
    pa = boundary_pixels(a)
    pb = boundary_pixels(b)
    if len(pa) == 0 or len(pb) == 0:
        raise ValueError("hausdorff undefined for an empty mask")
    d_ab = cKDTree(pb).query(pa)[0].max()
    d_ba = cKDTree(pa).query(pb)[0].max()
    return float(max(d_ab, d_ba)) * spacing


def filter_small_masks(mask_set, min_frac: float):
    """Drop mask entries smaller than min_frac of the image area."""
    if not 0.0 <= min_frac <= 1.0:
        raise ValueError("min_frac must lie in [0, 1]")
    w, h = mask_set.image_dims
    threshold = min_frac * w * h
    from .mask_projector import MaskSet

    kept = [e for e in mask_set.entries if e.mask.sum() >= threshold]
    return MaskSet(entries=kept, image_dims=mask_set.image_dims)


# ---------------------------------------------------------------------------
# Run evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalConfig:
    min_mask_frac: float = 0.025
    spacing: float = 1.0
    hdd_unit: str = "px"


def load_archive(path) -> dict:
    """Load an archive directory: ``records.json`` with RLE-encoded masks.

    Returns {(sample_id, prompt_id): record dict with decoded ``mask``}.
    """
    from .dataset_pipeline import rle_decode

    path = Path(path)
    rec_path = path / "records.json"
    if not rec_path.exists():
        raise ArchiveAlignmentError(f"missing archive index {rec_path}")
    records = json.loads(rec_path.read_text())
    out = {}
    for r in records:
        key = (r["sample_id"], r["prompt_id"])
        dims = tuple(r["dims"])
        out[key] = {
            "class": r.get("class", "unknown"),
            "condition": r.get("condition", "default"),
            "mask": rle_decode(r["rle"], dims),
        }
    return out


def evaluate_run(pred_archive: dict, gt_archive: dict,
                 config: EvalConfig = None) -> dict:
    """Per-class and mean IoU/Dice/HDD grouped by prompt condition.

    Ground-truth masks below the area filter are excluded.  Pairs with an
    empty mask on either side are counted separately and skipped for HDD.
    """
    config = config or EvalConfig()
    if not gt_archive:
        raise ArchiveAlignmentError("ground-truth archive is empty")
    missing = sorted(set(map(str, set(gt_archive) - set(pred_archive))))
    if missing:
        raise ArchiveAlignmentError(f"predictions missing for ids: {missing[:10]}")

    rows = []
    n_filtered = 0
    for key in sorted(gt_archive):
        gt_rec = gt_archive[key]
        pred_rec = pred_archive[key]
        gt_mask = gt_rec["mask"]
        h, w = gt_mask.shape
        if gt_mask.sum() < config.min_mask_frac * w * h:
            n_filtered += 1
            continue
        pred_mask = pred_rec["mask"]
        row = {
            "key": key,
            "class": gt_rec["class"],
            "condition": gt_rec["condition"],
            "iou": iou(pred_mask, gt_mask),
            "dice": dice(pred_mask, gt_mask),
            "empty_pred": bool(pred_mask.sum() == 0),
            "empty_gt": bool(gt_mask.sum() == 0),
        }
        if not row["empty_pred"] and not row["empty_gt"]:
            row["hdd"] = hausdorff(pred_mask, gt_mask, config.spacing)
        rows.append(row)
    if not rows and n_filtered == 0:
        raise ArchiveAlignmentError("no overlapping ids between archives")

    def summarize(sel):
        out = {
            "n": len(sel),
            "iou_mean": float(np.mean([r["iou"] for r in sel])) if sel else None,
            "dice_mean": float(np.mean([r["dice"] for r in sel])) if sel else None,
            "empty_pred": int(sum(r["empty_pred"] for r in sel)),
        }
        hdds = [r["hdd"] for r in sel if "hdd" in r]
        out["hdd_mean"] = float(np.mean(hdds)) if hdds else None
        out["hdd_n"] = len(hdds)
        return out

    conditions = {}
    for cond in sorted({r["condition"] for r in rows}):
        cond_rows = [r for r in rows if r["condition"] == cond]
        classes = {}
        for cls in sorted({r["class"] for r in cond_rows}):
            classes[cls] = summarize([r for r in cond_rows if r["class"] == cls])
        conditions[cond] = {"classes": classes, "mean": summarize(cond_rows)}

    return {
        "conditions": conditions,
        "hdd_unit": config.hdd_unit,
        "min_mask_frac": config.min_mask_frac,
        "n_evaluated": len(rows),
        "n_filtered_small": n_filtered,
    }


def write_report(report: dict, json_path, csv_path) -> None:
    """Persist the metrics report as JSON plus an aligned CSV."""
    json_path = Path(json_path)
    csv_path = Path(csv_path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    json_path.write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")

    def fmt(x):
        return "" if x is None else f"{x:.6f}"

    with open(csv_path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["class", "prompt_condition", "n", "iou_mean", "dice_mean",
                     "hdd_mean", "hdd_unit"])
        for cond, block in sorted(report["conditions"].items()):
            for cls, s in sorted(block["classes"].items()):
                wr.writerow([cls, cond, s["n"], fmt(s["iou_mean"]),
                             fmt(s["dice_mean"]), fmt(s["hdd_mean"]),
                             report["hdd_unit"]])
            m = block["mean"]
            wr.writerow(["__mean__", cond, m["n"], fmt(m["iou_mean"]),
                         fmt(m["dice_mean"]), fmt(m["hdd_mean"]),
                         report["hdd_unit"]])
