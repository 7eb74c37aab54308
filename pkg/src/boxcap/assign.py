"""Adaptive label assignment and supervision targets.

Per ground-truth box, the top-k center-closest anchors on every pyramid level
form the candidate pool; the IoU threshold is the candidates' mean + std, and
positives are candidates at or above it whose centers lie strictly inside the
box. An anchor claimed by several boxes goes to the one with the highest IoU.
All of this is plain numpy: it depends only on geometry, never on weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import box_iou
from .encoders import AnchorGrid


@dataclass
class Assignment:
    anchor_to_gt: np.ndarray  # (K,) int64, -1 = negative
    pos_mask: np.ndarray      # (K,) bool

    @property
    def num_pos(self) -> int:
        return int(self.pos_mask.sum())

    def validate(self, num_gt: int) -> "Assignment":
        if not np.array_equal(self.pos_mask, self.anchor_to_gt >= 0):
            raise ValueError("pos_mask inconsistent with anchor_to_gt")
        if self.anchor_to_gt.min(initial=-1) < -1 or self.anchor_to_gt.max(initial=-1) >= num_gt:
            raise ValueError("anchor_to_gt index out of range")
        return self


def centers_inside(centers: np.ndarray, box: np.ndarray) -> np.ndarray:
    x, y = centers[:, 0], centers[:, 1]
    return (x > box[0]) & (x < box[2]) & (y > box[1]) & (y < box[3])


def atss_assign(anchors: AnchorGrid, gt_boxes: np.ndarray, topk_per_level: int = 9) -> Assignment:
    K = len(anchors)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    N = len(gt_boxes)
    anchor_to_gt = np.full(K, -1, dtype=np.int64)
    if N == 0:
        return Assignment(anchor_to_gt, np.zeros(K, dtype=bool))
    if topk_per_level < 1:
        raise ValueError("topk_per_level must be >= 1")

    ious = box_iou(anchors.boxes, gt_boxes)  # (K, N)
    gt_centers = np.stack(
        [(gt_boxes[:, 0] + gt_boxes[:, 2]) / 2.0, (gt_boxes[:, 1] + gt_boxes[:, 3]) / 2.0], axis=1
    )
    best_iou = np.full(K, -1.0)
    levels = np.unique(anchors.levels)
    for g in range(N):
        dists = np.hypot(
            anchors.centers[:, 0] - gt_centers[g, 0], anchors.centers[:, 1] - gt_centers[g, 1]
        )
        candidates: list[int] = []
        for lvl in levels:
            idx = np.nonzero(anchors.levels == lvl)[0]
            order = idx[np.lexsort((idx, dists[idx]))]
            candidates.extend(order[: min(topk_per_level, len(order))].tolist())
        cand = np.array(candidates, dtype=np.int64)
        cand_ious = ious[cand, g]
        thresh = cand_ious.mean() + cand_ious.std()
        ok = (cand_ious >= thresh) & centers_inside(anchors.centers[cand], gt_boxes[g])
        for a in cand[ok]:
            if ious[a, g] > best_iou[a]:
                best_iou[a] = ious[a, g]
                anchor_to_gt[a] = g
    return Assignment(anchor_to_gt, anchor_to_gt >= 0)


def build_alignment_targets(
    assignment: Assignment, concept_index_of_gt: np.ndarray, K: int, M: int
) -> np.ndarray:
    """Binary (K, M) matrix: positive anchor k marks its box's concept column."""
    concept_index_of_gt = np.asarray(concept_index_of_gt, dtype=np.int64)
    if len(concept_index_of_gt) and (
        concept_index_of_gt.min() < 0 or concept_index_of_gt.max() >= M
    ):
        raise ValueError("concept index out of range for M")
    G = np.zeros((K, M), dtype=np.float32)
    pos = np.nonzero(assignment.pos_mask)[0]
    if len(pos):
        G[pos, concept_index_of_gt[assignment.anchor_to_gt[pos]]] = 1.0
    return G


def centerness_target(anchor_center, gt_box) -> float:
    """sqrt((min(l,r)/max(l,r)) * (min(t,b)/max(t,b))) for a center inside the box."""
    cx, cy = float(anchor_center[0]), float(anchor_center[1])
    x1, y1, x2, y2 = (float(v) for v in gt_box)
    l, t, r, b = cx - x1, cy - y1, x2 - cx, y2 - cy
    if min(l, t, r, b) <= 0:
        raise ValueError("anchor center must lie strictly inside the box")
    return float(np.sqrt((min(l, r) / max(l, r)) * (min(t, b) / max(t, b))))


def centerness_targets(centers: np.ndarray, gt_boxes: np.ndarray) -> np.ndarray:
    """Vectorized centerness_target over matched (center, box) rows."""
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    l = centers[:, 0] - gt_boxes[:, 0]
    t = centers[:, 1] - gt_boxes[:, 1]
    r = gt_boxes[:, 2] - centers[:, 0]
    b = gt_boxes[:, 3] - centers[:, 1]
    if len(centers) and min(l.min(), t.min(), r.min(), b.min()) <= 0:
        raise ValueError("anchor center must lie strictly inside the box")
    lr = np.minimum(l, r) / np.maximum(l, r)
    tb = np.minimum(t, b) / np.maximum(t, b)
    return np.sqrt(lr * tb)


def best_anchor_per_gt(assignment: Assignment, anchors: AnchorGrid, gt_boxes: np.ndarray):
    """For each box with positives, its highest-IoU positive anchor (ties: lower index).

    Returns (gt_indices, anchor_indices) arrays; boxes without positives are skipped.
    """
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    pos = np.nonzero(assignment.pos_mask)[0]
    gt_idx, anc_idx = [], []
    if len(pos) == 0:
        return np.array(gt_idx, dtype=np.int64), np.array(anc_idx, dtype=np.int64)
    ious = box_iou(anchors.boxes[pos], gt_boxes)
    owners = assignment.anchor_to_gt[pos]
    for g in np.unique(owners):
        mine = np.nonzero(owners == g)[0]
        scores = ious[mine, g]
        best = mine[int(np.argmax(scores))]  # argmax takes the first (lowest index) on ties
        gt_idx.append(int(g))
        anc_idx.append(int(pos[best]))
    return np.array(gt_idx, dtype=np.int64), np.array(anc_idx, dtype=np.int64)
