"""Evaluation: NMS, detection AP with frequency tiers, a simplified METEOR,
and the dense-captioning mAP over the IoU x METEOR threshold grid.

The METEOR here matches exact unigrams only (no stemming or synonymy): with m
matches, P = m/|cand|, R = m/|ref|, F = 10PR/(R+9P), and the fragmentation
penalty is 0.5*(chunks/m)^3 where chunks comes from a minimal-chunk alignment
among the maximum-cardinality matchings.
"""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .boxes import box_iou
from .tokenizer import text_tokens


class DetectionKind(str, Enum):
    CATEGORY = "category"
    UNKNOWN_CAPTION = "unknown_caption"


@dataclass
class Detection:
    box: np.ndarray
    score: float
    label: str
    kind: DetectionKind = DetectionKind.CATEGORY

    def to_record(self, image_id) -> dict:
        key = "category" if self.kind == DetectionKind.CATEGORY else "caption"
        return {
            "image_id": image_id,
            "box": [float(v) for v in np.asarray(self.box).reshape(4)],
            "score": float(self.score),
            key: self.label,
        }


@dataclass
class DenseCapPrediction:
    box: np.ndarray
    score: float
    caption: str

    def __post_init__(self):
        if not self.caption:
            raise ValueError("scored predictions need a non-empty caption")

    def to_record(self, image_id) -> dict:
        return {
            "image_id": image_id,
            "box": [float(v) for v in np.asarray(self.box).reshape(4)],
            "score": float(self.score),
            "caption": self.caption,
        }


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    """Greedy score-descending suppression at IoU >= threshold.

    Ties in score go to the lower box index. Returns kept indices in the
    order they were kept (descending score).
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    n = len(scores)
    if n == 0:
        return []
    order = np.lexsort((np.arange(n), -scores))
    ious = box_iou(boxes, boxes)
    suppressed = np.zeros(n, dtype=bool)
    keep: list[int] = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(int(i))
        suppressed |= ious[i] >= iou_threshold
        suppressed[i] = True
    return keep


def average_precision(tp_flags: np.ndarray, n_gt: int) -> float:
    """All-point-interpolated AP from score-ordered TP flags."""
    tp_flags = np.asarray(tp_flags, dtype=bool)
    if n_gt <= 0:
        raise ValueError("AP needs at least one ground-truth instance")
    if len(tp_flags) == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~tp_flags)
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([[0.0], precision])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def _greedy_match(
    pred_boxes: np.ndarray,
    gt_boxes: np.ndarray,
    iou_threshold: float,
    extra_ok: np.ndarray | None = None,
) -> np.ndarray:
    """TP flags for score-ordered predictions against one image's boxes.

    Each ground truth matches at most once; a prediction takes the unmatched
    candidate with the highest IoU (ties: lower index). extra_ok optionally
    masks (pred, gt) pairs that must also hold (caption similarity gating).
    """
    n_pred, n_gt = len(pred_boxes), len(gt_boxes)
    flags = np.zeros(n_pred, dtype=bool)
    if n_gt == 0 or n_pred == 0:
        return flags
    ious = box_iou(pred_boxes, gt_boxes)
    taken = np.zeros(n_gt, dtype=bool)
    for p in range(n_pred):
        ok = (ious[p] >= iou_threshold) & ~taken
        if extra_ok is not None:
            ok &= extra_ok[p]
        if not ok.any():
            continue
        masked = np.where(ok, ious[p], -1.0)
        g = int(np.argmax(masked))
        taken[g] = True
        flags[p] = True
    return flags


def _tier_of(value, rare_max: int = 10, common_max: int = 100) -> str:
    if isinstance(value, str):
        return value
    n = int(value)
    if n <= rare_max:
        return "rare"
    return "common" if n <= common_max else "frequent"


def detection_ap(
    predictions: list[dict],
    ground_truth: list[dict],
    iou_thresholds=None,
    frequency_map: dict | None = None,
    include_curves: bool = False,
) -> dict:
    """COCO-style AP averaged over IoU thresholds, plus rare/common/frequent splits.

    predictions: {"image_id", "box", "score", "category"}; ground_truth:
    {"image_id", "box", "category"}. Categories without ground truth are
    excluded from all averages.
    """
    if iou_thresholds is None:
        iou_thresholds = np.linspace(0.5, 0.95, 10)
    gt_by_cat: dict[str, dict] = defaultdict(lambda: defaultdict(list))
    for g in ground_truth:
        gt_by_cat[g["category"]][g["image_id"]].append(g["box"])
    pred_by_cat: dict[str, list] = defaultdict(list)
    for i, p in enumerate(predictions):
        pred_by_cat[p["category"]].append((-float(p["score"]), i, p))

    per_category: dict[str, float] = {}
    curves: dict[str, dict] = {}
    for cat, gt_images in gt_by_cat.items():
        n_gt = sum(len(v) for v in gt_images.values())
        preds = sorted(pred_by_cat.get(cat, []))
        by_image: dict = defaultdict(list)
        for rank, (_, _, p) in enumerate(preds):
            by_image[p["image_id"]].append(rank)
        aps = []
        for thr in iou_thresholds:
            flags = np.zeros(len(preds), dtype=bool)
            for image_id, ranks in by_image.items():
                boxes = np.array([preds[r][2]["box"] for r in ranks], dtype=np.float64)
                gts = np.array(gt_images.get(image_id, []), dtype=np.float64).reshape(-1, 4)
                flags[ranks] = _greedy_match(boxes, gts, float(thr))
            aps.append(average_precision(flags, n_gt))
            if include_curves and abs(float(thr) - 0.5) < 1e-9:
                tp = np.cumsum(flags)
                fp = np.cumsum(~flags)
                curves[cat] = {
                    "recall": (tp / n_gt).tolist(),
                    "precision": (tp / np.maximum(tp + fp, 1)).tolist(),
                }
        per_category[cat] = float(np.mean(aps))

    def _mean(cats):
        return float(np.mean([per_category[c] for c in cats])) if cats else None

    report = {
        "AP": _mean(sorted(per_category)),
        "AP_r": None,
        "AP_c": None,
        "AP_f": None,
        "per_category": dict(sorted(per_category.items())),
    }
    if frequency_map is not None:
        tiers = {c: _tier_of(frequency_map.get(c, 0)) for c in per_category}
        for tier, key in (("rare", "AP_r"), ("common", "AP_c"), ("frequent", "AP_f")):
            report[key] = _mean(sorted(c for c in per_category if tiers[c] == tier))
    if include_curves:
        report["curves"] = curves
    return report


def meteor_tokens(text: str) -> list[str]:
    return [t for t in text_tokens(text) if t != ","]


def _min_chunks(cand: list[str], ref: list[str]) -> tuple[int, int]:
    """(m, chunks): maximum unigram matches and the fewest chunks any
    maximum-cardinality alignment can realize."""
    cand_counts = Counter(cand)
    ref_counts = Counter(ref)
    need = {w: min(cand_counts[w], ref_counts[w]) for w in cand_counts if w in ref_counts}
    m = sum(need.values())
    if m == 0:
        return 0, 0

    ref_pos = defaultdict(list)
    for j, w in enumerate(ref):
        if w in need:
            ref_pos[w].append(j)
    suffix_counts: list[Counter] = [Counter() for _ in range(len(cand) + 1)]
    for i in range(len(cand) - 1, -1, -1):
        suffix_counts[i] = suffix_counts[i + 1].copy()
        suffix_counts[i][cand[i]] += 1

    NO_PREV = -5
    memo: dict = {}

    def rec(i: int, used: frozenset, prev: int) -> int:
        if i == len(cand):
            return 0
        key = (i, used, prev)
        if key in memo:
            return memo[key]
        w = cand[i]
        used_w = sum(1 for j in used if ref[j] == w)
        remaining_need = need.get(w, 0) - used_w
        best = None
        # skip this occurrence if later occurrences can still satisfy the need
        if remaining_need <= suffix_counts[i + 1][w]:
            best = rec(i + 1, used, NO_PREV)
        if remaining_need > 0:
            for j in ref_pos.get(w, ()):
                if j in used:
                    continue
                cost = 0 if j == prev + 1 else 1
                val = cost + rec(i + 1, used | {j}, j)
                if best is None or val < best:
                    best = val
        memo[key] = best
        return best

    return m, rec(0, frozenset(), NO_PREV)


def meteor(candidate: str, reference: str) -> float:
    """Exact-match unigram METEOR with the fragmentation penalty; in [0, 1]."""
    cand = meteor_tokens(candidate)
    ref = meteor_tokens(reference)
    if not cand or not ref:
        return 0.0
    m, chunks = _min_chunks(cand, ref)
    if m == 0:
        return 0.0
    precision = m / len(cand)
    recall = m / len(ref)
    f_mean = 10.0 * precision * recall / (recall + 9.0 * precision)
    penalty = 0.5 * (chunks / m) ** 3
    return f_mean * (1.0 - penalty)


DENSECAP_IOU_THRESHOLDS = (0.3, 0.4, 0.5, 0.6, 0.7)
DENSECAP_METEOR_THRESHOLDS = (0.0, 0.05, 0.1, 0.15, 0.2, 0.25)


def densecap_map(
    predictions: list[dict],
    ground_truth: list[dict],
    iou_thresholds=DENSECAP_IOU_THRESHOLDS,
    meteor_thresholds=DENSECAP_METEOR_THRESHOLDS,
) -> dict:
    """Mean AP over the IoU x METEOR grid of the dense-captioning benchmark.

    predictions: {"image_id", "box", "score", "caption"}; ground_truth:
    {"image_id", "box", "caption"}. Raises on empty ground truth (the metric
    is undefined there, not zero).
    """
    if not ground_truth:
        raise ValueError("dense-captioning mAP is undefined without ground truth")
    n_gt = len(ground_truth)
    gt_by_image: dict = defaultdict(list)
    for g in ground_truth:
        gt_by_image[g["image_id"]].append(g)

    if predictions:
        scores = -np.array([float(p["score"]) for p in predictions])
        ranked = [predictions[i] for i in np.lexsort((np.arange(len(predictions)), scores))]
    else:
        ranked = []

    # cache per-prediction IoUs and METEOR scores against its image's ground truth
    pred_info = []
    meteor_cache: dict[tuple[str, str], float] = {}
    for p in ranked:
        gts = gt_by_image.get(p["image_id"], [])
        if gts:
            ious = box_iou(np.asarray(p["box"], dtype=np.float64)[None],
                           np.array([g["box"] for g in gts], dtype=np.float64))[0]
            mets = []
            for g in gts:
                key = (p["caption"], g["caption"])
                if key not in meteor_cache:
                    meteor_cache[key] = meteor(*key)
                mets.append(meteor_cache[key])
            mets = np.array(mets)
        else:
            ious = np.zeros(0)
            mets = np.zeros(0)
        pred_info.append((p["image_id"], ious, mets))

    per_cell = []
    for iou_t in iou_thresholds:
        row = []
        for met_t in meteor_thresholds:
            taken: dict = {img: np.zeros(len(gts), dtype=bool) for img, gts in gt_by_image.items()}
            flags = np.zeros(len(ranked), dtype=bool)
            for idx, (img, ious, mets) in enumerate(pred_info):
                if len(ious) == 0:
                    continue
                ok = (ious >= iou_t) & (mets >= met_t) & ~taken[img]
                if not ok.any():
                    continue
                g = int(np.argmax(np.where(ok, ious, -1.0)))
                taken[img][g] = True
                flags[idx] = True
            row.append(average_precision(flags, n_gt) if len(ranked) else 0.0)
        per_cell.append(row)

    return {
        "mAP": float(np.mean(per_cell)),
        "per_cell": [[float(v) for v in row] for row in per_cell],
        "iou_thresholds": list(iou_thresholds),
        "meteor_thresholds": list(meteor_thresholds),
    }
