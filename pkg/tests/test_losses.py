import math

import numpy as np
import pytest
import torch

from boxcap.assign import atss_assign, best_anchor_per_gt, centerness_targets
from boxcap.encoders import ModelConfig, build_anchors
from boxcap.losses import (
    LossWeights,
    SampleTargets,
    centerness_loss,
    decode_box_deltas,
    detection_loss,
    focal_alignment_loss,
    generalized_iou,
    giou_loss,
    total_loss,
)
from boxcap.model import BoxCapModel
from boxcap.samples import Source
from boxcap.tokenizer import Vocabulary


def central_difference(f, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Gradient of scalar f(x) by central differences, coordinate by coordinate."""
    g = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        up = float(f(x))
        flat[i] = orig - eps
        down = float(f(x))
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return g


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(float(a.abs().max()), float(b.abs().max()), 1e-12)
    return float((a - b).abs().max()) / denom


class TestFocal:
    def test_hand_value_single_positive(self):
        S = torch.zeros(1, 1, dtype=torch.float64)
        G = torch.ones(1, 1, dtype=torch.float64)
        loss = focal_alignment_loss(S, G, gamma=2.0, alpha_f=0.25)
        assert float(loss) == pytest.approx(0.25 * 0.25 * math.log(2.0), abs=1e-9)

    def test_gamma_zero_alpha_half_is_scaled_bce(self):
        torch.manual_seed(0)
        S = torch.randn(4, 6, dtype=torch.float64)
        G = (torch.rand(4, 6) > 0.7).double()
        got = focal_alignment_loss(S, G, gamma=0.0, alpha_f=0.5)
        bce = torch.nn.functional.binary_cross_entropy_with_logits(S, G, reduction="sum")
        expect = 0.5 * bce / max(1, int(G.sum()))
        assert float(got) == pytest.approx(float(expect), rel=1e-12)

    def test_confident_true_negative_vanishes(self):
        S = torch.full((1, 1), -40.0, dtype=torch.float64)
        G = torch.zeros(1, 1, dtype=torch.float64)
        assert float(focal_alignment_loss(S, G)) == pytest.approx(0.0, abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(1)
        for _ in range(20):
            S = torch.randn(3, 5, dtype=torch.float64, requires_grad=True)
            G = (torch.rand(3, 5) > 0.6).double()
            loss = focal_alignment_loss(S, G)
            loss.backward()
            fd = central_difference(lambda x: focal_alignment_loss(x, G), S.detach().clone())
            assert rel_err(S.grad, fd) < 1e-4


class TestCenterness:
    def test_bce_gradient_matches_finite_differences(self):
        torch.manual_seed(2)
        for _ in range(20):
            logits = torch.randn(6, dtype=torch.float64, requires_grad=True)
            targets = torch.rand(6, dtype=torch.float64)
            centerness_loss(logits, targets).backward()
            fd = central_difference(lambda x: centerness_loss(x, targets), logits.detach().clone())
            assert rel_err(logits.grad, fd) < 1e-4

    def test_empty_positives_zero(self):
        assert float(centerness_loss(torch.zeros(0), torch.zeros(0))) == 0.0


class TestGiou:
    def test_identical_boxes(self):
        a = torch.tensor([[0.0, 0.0, 2.0, 2.0]], dtype=torch.float64)
        assert float(giou_loss(a, a.clone())) == pytest.approx(0.0, abs=1e-9)

    def test_disjoint_hand_value(self):
        # [0,0,1,1] vs [2,2,3,3]: GIoU = -7/9, loss = 16/9
        p = torch.tensor([[0.0, 0.0, 1.0, 1.0]], dtype=torch.float64)
        g = torch.tensor([[2.0, 2.0, 3.0, 3.0]], dtype=torch.float64)
        assert float(giou_loss(p, g)) == pytest.approx(16.0 / 9.0, abs=1e-9)

    def test_nested_hand_value(self):
        # [0,0,2,2] vs [1,1,2,2]: GIoU = 0.25, loss = 0.75
        p = torch.tensor([[0.0, 0.0, 2.0, 2.0]], dtype=torch.float64)
        g = torch.tensor([[1.0, 1.0, 2.0, 2.0]], dtype=torch.float64)
        assert float(giou_loss(p, g)) == pytest.approx(0.75, abs=1e-9)

    def test_range_bounds(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            p = np.sort(rng.uniform(0, 60, 4))[[0, 2, 1, 3]]
            g = np.sort(rng.uniform(0, 60, 4))[[0, 2, 1, 3]]
            loss = float(giou_loss(torch.tensor([p]), torch.tensor([g])))
            assert 0.0 <= loss <= 2.0

    def test_degenerate_box_clamped(self):
        p = torch.tensor([[5.0, 5.0, 5.0, 5.0]], dtype=torch.float64)
        g = torch.tensor([[4.0, 4.0, 6.0, 6.0]], dtype=torch.float64)
        loss = float(giou_loss(p, g))
        assert math.isfinite(loss)

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(4)
        rng = np.random.default_rng(5)
        for _ in range(20):
            base = rng.uniform(2, 30, size=(3, 2))
            pred = np.concatenate([base, base + rng.uniform(2, 20, size=(3, 2))], axis=1)
            gt = pred + rng.uniform(-1.5, 1.5, size=pred.shape)
            gt = np.concatenate(
                [np.minimum(gt[:, :2], gt[:, 2:] - 1.0), np.maximum(gt[:, 2:], gt[:, :2] + 1.0)],
                axis=1,
            )
            p = torch.tensor(pred, dtype=torch.float64, requires_grad=True)
            g = torch.tensor(gt, dtype=torch.float64)
            giou_loss(p, g).backward()
            fd = central_difference(lambda x: giou_loss(x, g), p.detach().clone())
            assert rel_err(p.grad, fd) < 1e-4

    def test_weighted_average(self):
        p = torch.tensor([[0.0, 0.0, 2.0, 2.0], [0.0, 0.0, 1.0, 1.0]], dtype=torch.float64)
        g = torch.tensor([[0.0, 0.0, 2.0, 2.0], [2.0, 2.0, 3.0, 3.0]], dtype=torch.float64)
        w = torch.tensor([3.0, 1.0], dtype=torch.float64)
        per = 1.0 - generalized_iou(p, g)
        expect = float((per * w).sum() / w.sum())
        assert float(giou_loss(p, g, weights=w)) == pytest.approx(expect, rel=1e-12)


class TestTotalLoss:
    def test_wc_zero(self):
        w = LossWeights(w_d=1.0, w_c=0.0)
        assert total_loss(0.7, 0.3, w) == pytest.approx(0.7)

    def test_paper_weights_sum(self):
        w = LossWeights(w_d=1.0, w_c=1.0)
        assert total_loss(0.7, 0.3, w) == pytest.approx(1.0)

    def test_linearity_identity(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            l_det, l_cap = rng.uniform(0, 5, 2)
            w_d = rng.uniform(0, 3)
            base = LossWeights(w_d=w_d, w_c=0.0)
            one = LossWeights(w_d=w_d, w_c=1.0)
            two = LossWeights(w_d=w_d, w_c=2.0)
            lhs = total_loss(l_det, l_cap, two) - total_loss(l_det, l_cap, base)
            rhs = 2.0 * (total_loss(l_det, l_cap, one) - total_loss(l_det, l_cap, base))
            assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)

    def test_rejects_negative_weights(self):
        with pytest.raises(ValueError):
            LossWeights(alpha=-1.0)


def _make_batch(seed, sources):
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    vocab = Vocabulary(["red", "square", "blue", "object", "background", "a", "shape"])
    cfg = ModelConfig(vocab_size=len(vocab))
    model = BoxCapModel(cfg, vocab)
    anchors = build_anchors(64, 64, cfg.strides, cfg.anchor_scale)
    K = len(anchors)
    images = torch.rand(len(sources), 3, 64, 64)
    concepts = ["red square, a shape.", "blue square, a shape."]
    M = 4
    targets = []
    for source in sources:
        n = int(rng.integers(1, 3))
        boxes = []
        for _ in range(n):
            x1, y1 = rng.uniform(2, 40, 2)
            boxes.append([x1, y1, x1 + rng.uniform(10, 22), y1 + rng.uniform(10, 22)])
        boxes = np.array(boxes)
        assignment = atss_assign(anchors, boxes, 9)
        pos = np.nonzero(assignment.pos_mask)[0]
        gt_idx = assignment.anchor_to_gt[pos]
        G = np.zeros((K, M), dtype=np.float32)
        cols = rng.integers(0, 2, size=n)
        if len(pos):
            G[pos, cols[gt_idx]] = 1.0
        cen = centerness_targets(anchors.centers[pos], boxes[gt_idx]) if len(pos) else np.zeros(0)
        targets.append(
            SampleTargets(
                source=source,
                alignment=G,
                pos_anchor_idx=pos,
                pos_gt_boxes=boxes[gt_idx] if len(pos) else np.zeros((0, 4)),
                pos_centerness=cen,
            )
        )
    regions = model.encode_image(images)
    texts = model.encode_concepts(concepts + ["object", "background"])
    scores = model.align(regions.region_features, texts)
    return model, regions, scores, targets


class TestDetectionLoss:
    def test_pure_dense_caption_batch_gates_reg_and_center(self):
        model, regions, scores, targets = _make_batch(0, [Source.DENSE_CAPTION] * 3)
        loss, breakdown = detection_loss(regions, scores, targets, LossWeights())
        assert breakdown["L_reg"] == 0.0
        assert breakdown["L_center"] == 0.0
        loss.backward()
        head = model.image_encoder.box_cen_head
        assert head.weight.grad is None or float(head.weight.grad.abs().sum()) == 0.0
        assert head.bias.grad is None or float(head.bias.grad.abs().sum()) == 0.0
        for conv in model.image_encoder.reg_tower:
            assert conv.weight.grad is None or float(conv.weight.grad.abs().sum()) == 0.0
        # alignment still reaches the shared trunk
        assert any(
            p.grad is not None and float(p.grad.abs().sum()) > 0
            for p in model.image_encoder.stem.parameters()
        )

    def test_zero_alpha_beta_reduces_to_alignment(self):
        _, regions, scores, targets = _make_batch(1, [Source.DETECTION] * 2)
        w0 = LossWeights(alpha=0.0, beta=0.0)
        loss, breakdown = detection_loss(regions, scores, targets, w0)
        assert float(loss) == pytest.approx(breakdown["L_align"], rel=1e-6)

    def test_mixed_batch_equals_per_sample_recomputation(self):
        # oracle: recompute each sample's Eq-branch loss with the scalar ops
        sources = [Source.DETECTION, Source.DENSE_CAPTION, Source.DETECTION]
        _, regions, scores, targets = _make_batch(2, sources)
        w = LossWeights(alpha=2.0, beta=1.0)
        loss, _ = detection_loss(regions, scores, targets, w)

        centers = torch.as_tensor(regions.anchors.centers, dtype=scores.dtype)
        per_sample = []
        for b, t in enumerate(targets):
            G = torch.as_tensor(t.alignment, dtype=scores.dtype)
            align = focal_alignment_loss(scores[b], G, num_pos=len(t.pos_anchor_idx))
            term = align
            if t.source == Source.DETECTION and len(t.pos_anchor_idx):
                pos = torch.as_tensor(t.pos_anchor_idx, dtype=torch.long)
                decoded = decode_box_deltas(centers[pos], regions.box_deltas[b, pos])
                reg = giou_loss(decoded, torch.as_tensor(t.pos_gt_boxes, dtype=scores.dtype),
                                weights=torch.as_tensor(t.pos_centerness, dtype=scores.dtype))
                cen = centerness_loss(regions.centerness_logits[b, pos],
                                      torch.as_tensor(t.pos_centerness, dtype=scores.dtype))
                term = align + w.alpha * reg + w.beta * cen
            per_sample.append(term)
        expect = torch.stack(per_sample).mean()
        assert float(loss) == pytest.approx(float(expect), rel=1e-5)

    def test_losses_finite_and_nonnegative(self):
        for seed in range(5):
            _, regions, scores, targets = _make_batch(seed, [Source.DETECTION, Source.DENSE_CAPTION])
            loss, breakdown = detection_loss(regions, scores, targets, LossWeights())
            assert math.isfinite(float(loss))
            assert float(loss) >= 0.0
            assert breakdown["L_align"] >= 0.0
