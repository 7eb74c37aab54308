"""Detection-side losses and their source-gated composition.

Detection samples pay alignment + box regression + centerness; dense-caption
samples pay alignment only, so no gradient ever reaches the box or centerness
heads from caption data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .encoders import RegionOutputs
from .samples import Source


@dataclass
class LossWeights:
    alpha: float = 2.0   # box regression weight
    beta: float = 1.0    # centerness weight
    w_d: float = 1.0     # detection-branch weight in the joint loss
    w_c: float = 1.0     # caption-branch weight in the joint loss

    def __post_init__(self):
        for name in ("alpha", "beta", "w_d", "w_c"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(**d)


def focal_alignment_loss(
    scores: torch.Tensor,
    targets: torch.Tensor,
    gamma: float = 2.0,
    alpha_f: float = 0.25,
    num_pos: int | None = None,
) -> torch.Tensor:
    """Sigmoid focal loss summed over all entries, divided by max(1, #positives)."""
    if scores.shape != targets.shape:
        raise ValueError(f"shape mismatch {tuple(scores.shape)} vs {tuple(targets.shape)}")
    targets = targets.to(scores.dtype)
    p = torch.sigmoid(scores)
    p_t = p * targets + (1.0 - p) * (1.0 - targets)
    alpha_t = alpha_f * targets + (1.0 - alpha_f) * (1.0 - targets)
    nll = F.binary_cross_entropy_with_logits(scores, targets, reduction="none")
    loss = alpha_t * (1.0 - p_t).pow(gamma) * nll
    if num_pos is None:
        num_pos = int(targets.sum().item())
    return loss.sum() / max(1, num_pos)


def centerness_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """BCE against the (0, 1] centerness targets, averaged over positives."""
    if logits.numel() == 0:
        return logits.sum()
    return F.binary_cross_entropy_with_logits(logits, targets.to(logits.dtype), reduction="mean")


def generalized_iou(pred: torch.Tensor, gt: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Row-wise GIoU of matched (N, 4) box pairs; degenerate boxes are clamped."""
    pred = pred.reshape(-1, 4)
    gt = gt.reshape(-1, 4)
    px1, py1 = pred[:, 0], pred[:, 1]
    px2 = torch.maximum(pred[:, 2], px1 + eps)
    py2 = torch.maximum(pred[:, 3], py1 + eps)
    gx1, gy1, gx2, gy2 = gt[:, 0], gt[:, 1], gt[:, 2], gt[:, 3]

    inter_w = (torch.minimum(px2, gx2) - torch.maximum(px1, gx1)).clamp(min=0)
    inter_h = (torch.minimum(py2, gy2) - torch.maximum(py1, gy1)).clamp(min=0)
    inter = inter_w * inter_h
    area_p = (px2 - px1) * (py2 - py1)
    area_g = (gx2 - gx1) * (gy2 - gy1)
    union = area_p + area_g - inter
    iou = inter / union.clamp(min=eps)

    cw = torch.maximum(px2, gx2) - torch.minimum(px1, gx1)
    ch = torch.maximum(py2, gy2) - torch.minimum(py1, gy1)
    enclosing = (cw * ch).clamp(min=eps)
    return iou - (enclosing - union) / enclosing


def giou_loss(
    pred_boxes: torch.Tensor, gt_boxes: torch.Tensor, weights: torch.Tensor | None = None
) -> torch.Tensor:
    """1 - GIoU, averaged over pairs; optionally weighted (centerness weighting)."""
    pred_boxes = torch.as_tensor(pred_boxes, dtype=torch.float64) if not torch.is_tensor(pred_boxes) else pred_boxes
    gt_boxes = torch.as_tensor(gt_boxes, dtype=pred_boxes.dtype) if not torch.is_tensor(gt_boxes) else gt_boxes
    loss = 1.0 - generalized_iou(pred_boxes, gt_boxes)
    if loss.numel() == 0:
        return loss.sum()
    if weights is None:
        return loss.mean()
    weights = weights.reshape(-1)
    return (loss * weights).sum() / weights.sum().clamp(min=1e-12)


def decode_box_deltas(centers: torch.Tensor, deltas: torch.Tensor) -> torch.Tensor:
    """(l, t, r, b) distances from anchor centers -> (x1, y1, x2, y2) boxes."""
    cx, cy = centers[:, 0], centers[:, 1]
    return torch.stack(
        [cx - deltas[:, 0], cy - deltas[:, 1], cx + deltas[:, 2], cy + deltas[:, 3]], dim=1
    )


@dataclass
class SampleTargets:
    """Assignment-derived supervision for one sample in a batch."""

    source: Source
    alignment: np.ndarray                      # (K, M) binary
    pos_anchor_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    pos_gt_boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    pos_centerness: np.ndarray = field(default_factory=lambda: np.zeros(0))


def detection_loss(
    outputs: RegionOutputs,
    scores: torch.Tensor,
    targets: list[SampleTargets],
    weights: LossWeights,
    gamma: float = 2.0,
    alpha_f: float = 0.25,
    centerness_weighted_reg: bool = True,
):
    """Source-gated per-sample loss, averaged over the batch.

    Detection samples pay alignment + alpha * GIoU + beta * centerness;
    dense-caption samples pay alignment only. Returns (loss, breakdown) where
    the breakdown holds the unweighted per-term batch means as floats. The
    computation is batched but matches the per-sample definition exactly:
    alignment is the focal sum over (K, M) divided by that sample's positive
    count, box/centerness terms average over that sample's positives.
    """
    B, K, M = scores.shape
    if len(targets) != B:
        raise ValueError(f"{len(targets)} targets for batch of {B}")
    device, dtype = scores.device, scores.dtype

    G = torch.as_tensor(np.stack([t.alignment for t in targets]), dtype=dtype, device=device)
    p = torch.sigmoid(scores)
    p_t = p * G + (1.0 - p) * (1.0 - G)
    alpha_t = alpha_f * G + (1.0 - alpha_f) * (1.0 - G)
    nll = F.binary_cross_entropy_with_logits(scores, G, reduction="none")
    focal = (alpha_t * (1.0 - p_t).pow(gamma) * nll).sum(dim=(1, 2))
    num_pos = torch.as_tensor(
        [max(1, len(t.pos_anchor_idx)) for t in targets], dtype=dtype, device=device
    )
    align_per_sample = focal / num_pos
    align = align_per_sample.mean()

    det_rows = [
        (b, t) for b, t in enumerate(targets)
        if t.source == Source.DETECTION and len(t.pos_anchor_idx)
    ]
    if det_rows:
        flat_idx = torch.as_tensor(
            np.concatenate([b * K + t.pos_anchor_idx for b, t in det_rows]),
            dtype=torch.long, device=device,
        )
        counts = [len(t.pos_anchor_idx) for _, t in det_rows]
        gt = torch.as_tensor(
            np.concatenate([t.pos_gt_boxes for _, t in det_rows]), dtype=dtype, device=device
        )
        cen_t = torch.as_tensor(
            np.concatenate([t.pos_centerness for _, t in det_rows]), dtype=dtype, device=device
        )
        centers = torch.as_tensor(outputs.anchors.centers, dtype=dtype, device=device)
        anchor_centers = centers[flat_idx % K]
        decoded = decode_box_deltas(anchor_centers, outputs.box_deltas.reshape(B * K, 4)[flat_idx])
        giou_terms = 1.0 - generalized_iou(decoded, gt)
        cen_logits = outputs.centerness_logits.reshape(B * K)[flat_idx]
        cen_nll = F.binary_cross_entropy_with_logits(cen_logits, cen_t, reduction="none")

        reg_sum = scores.new_zeros(())
        cen_sum = scores.new_zeros(())
        for chunk_g, chunk_w, chunk_c in zip(
            torch.split(giou_terms, counts), torch.split(cen_t, counts),
            torch.split(cen_nll, counts),
        ):
            if centerness_weighted_reg:
                reg_sum = reg_sum + (chunk_g * chunk_w).sum() / chunk_w.sum().clamp(min=1e-12)
            else:
                reg_sum = reg_sum + chunk_g.mean()
            cen_sum = cen_sum + chunk_c.mean()
        reg = reg_sum / B
        cen = cen_sum / B
    else:
        reg = scores.new_zeros(())
        cen = scores.new_zeros(())

    loss = align + weights.alpha * reg + weights.beta * cen
    breakdown = {
        "L_align": float(align.detach()),
        "L_reg": float(reg.detach()),
        "L_center": float(cen.detach()),
    }
    return loss, breakdown


def total_loss(l_det, l_cap, weights: LossWeights):
    """Joint objective: w_d * L_det + w_c * L_cap."""
    return weights.w_d * l_det + weights.w_c * l_cap
