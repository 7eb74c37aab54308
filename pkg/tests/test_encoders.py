import numpy as np
import pytest
import torch

from boxcap.encoders import (
    ModelConfig,
    TextEncoder,
    alignment_scores,
    build_anchors,
    build_vocab_text_batch,
    ImageEncoder,
    pad_token_batch,
)
from boxcap.model import BoxCapModel
from boxcap.tokenizer import Vocabulary

WORDS = ["red", "square", "blue", "triangle", "a", "shape", ",", "colored", "object", "background"]


@pytest.fixture()
def vocab():
    return Vocabulary(sorted(set(WORDS) - {","}))


@pytest.fixture()
def model(vocab):
    torch.manual_seed(0)
    cfg = ModelConfig(vocab_size=len(vocab))
    return BoxCapModel(cfg, vocab)


def test_anchor_count_matches_grid_arithmetic():
    anchors = build_anchors(64, 64, (8, 16, 32), anchor_scale=8.0)
    assert len(anchors) == 64 + 16 + 4 == 84


def test_encode_image_shapes(model):
    images = torch.rand(2, 3, 64, 64)
    out = model.encode_image(images)
    K, D = out.num_anchors, model.cfg.embed_dim
    assert K == 84
    assert out.region_features.shape == (2, K, D)
    assert out.box_deltas.shape == (2, K, 4)
    assert out.centerness_logits.shape == (2, K)
    assert bool((out.box_deltas >= 0).all())


def test_indivisible_resolution_rejected_or_padded(vocab):
    torch.manual_seed(0)
    cfg = ModelConfig(vocab_size=len(vocab))
    enc = ImageEncoder(cfg)
    with pytest.raises(ValueError):
        enc(torch.rand(1, 3, 60, 60))
    cfg2 = ModelConfig(vocab_size=len(vocab), pad_to_stride=True)
    torch.manual_seed(0)
    enc2 = ImageEncoder(cfg2)
    out = enc2(torch.rand(1, 3, 60, 60))
    assert out.image_size == (60, 60)
    assert out.num_anchors == 84  # padded up to 64x64


def test_constant_image_zeroed_final_layer_gives_equal_centerness(model):
    torch.nn.init.zeros_(model.image_encoder.box_cen_head.weight)
    torch.nn.init.constant_(model.image_encoder.box_cen_head.bias, 0.7)
    out = model.encode_image(torch.zeros(1, 3, 64, 64))
    cen = out.centerness_logits[0]
    assert torch.allclose(cen, torch.full_like(cen, 0.7))


def test_encode_image_finite_difference_jacobian(vocab):
    # oracle: central finite differences through one weight
    torch.manual_seed(1)
    cfg = ModelConfig(vocab_size=len(vocab))
    enc = ImageEncoder(cfg).double()
    images = torch.rand(1, 3, 64, 64, dtype=torch.float64)
    probe = torch.randn(1, 84, cfg.embed_dim, dtype=torch.float64)

    def scalar():
        return (enc(images).region_features * probe).sum()

    w = enc.stage2[0].weight
    s = scalar()
    s.backward()
    g = w.grad[0, 0, 0, 0].item()
    eps = 1e-6
    with torch.no_grad():
        w[0, 0, 0, 0] += eps
        up = scalar().item()
        w[0, 0, 0, 0] -= 2 * eps
        down = scalar().item()
        w[0, 0, 0, 0] += eps
    fd = (up - down) / (2 * eps)
    assert abs(fd - g) / max(abs(g), 1e-8) < 1e-3


def test_encode_text_shapes_and_unit_norm(model):
    texts = model.encode_concepts(["red square, a shape.", "blue triangle, a shape."])
    assert texts.embeddings.shape == (2, model.cfg.embed_dim)
    norms = texts.embeddings.norm(dim=-1)
    assert torch.allclose(norms, torch.ones_like(norms), atol=1e-5)


def test_encode_text_identical_concepts_identical_rows(model):
    texts = model.encode_concepts(["red square.", "red square."])
    assert torch.equal(texts.embeddings[0], texts.embeddings[1])


def test_encode_text_permutation_equivariance(model):
    # oracle: apply the permutation to the reference output
    concepts = ["red square.", "blue triangle.", "a shape.", "colored object."]
    ref = model.encode_concepts(concepts).embeddings
    perm = [2, 0, 3, 1]
    out = model.encode_concepts([concepts[i] for i in perm]).embeddings
    assert torch.allclose(out, ref[perm], atol=1e-6)


def test_encode_text_invariant_to_padding_length(model, vocab):
    ids = [vocab.encode("red square.", 20).ids]
    short = pad_token_batch(ids)
    long = torch.zeros((1, short.shape[1] + 5), dtype=torch.long)
    long[0, : short.shape[1]] = short[0]
    a = model.text_encoder(short).embeddings
    b = model.text_encoder(long).embeddings
    assert torch.allclose(a, b, atol=1e-6)


def test_alignment_scores_identity_and_orthogonal():
    v = torch.zeros(1, 4)
    v[0, 0] = 1.0
    w = torch.zeros(1, 4)
    w[0, 0] = 1.0
    s = alignment_scores(v, w, scale=1.0, bias=0.0)
    assert torch.allclose(s, torch.ones(1, 1))
    w_orth = torch.zeros(1, 4)
    w_orth[0, 1] = 1.0
    s0 = alignment_scores(v, w_orth, scale=1.0, bias=0.0)
    assert torch.allclose(s0, torch.zeros(1, 1))


def test_alignment_scores_brute_force_oracle():
    # oracle: double-loop cosine dot products
    torch.manual_seed(2)
    O = torch.randn(3, 16, dtype=torch.float64)
    W = torch.nn.functional.normalize(torch.randn(5, 16, dtype=torch.float64), dim=-1)
    scale, bias = 3.7, -1.2
    S = alignment_scores(O, W, scale, bias)
    for k in range(3):
        ok = O[k] / O[k].norm()
        for m in range(5):
            expect = scale * float(ok @ W[m]) + bias
            assert abs(float(S[k, m]) - expect) < 1e-6


def test_alignment_scores_dim_mismatch():
    with pytest.raises(ValueError):
        alignment_scores(torch.randn(2, 8), torch.randn(3, 16), 1.0, 0.0)


def test_shape_contract_composes(model):
    out = model.encode_image(torch.rand(1, 3, 64, 64))
    texts = model.encode_concepts(["red square.", "blue triangle.", "a shape."])
    S = model.align(out.region_features, texts)
    assert S.shape == (1, 84, 3)


def test_gradient_flows_to_both_encoders(model):
    out = model.encode_image(torch.rand(2, 3, 64, 64))
    texts = model.encode_concepts(["red square.", "blue triangle."])
    S = model.align(out.region_features, texts)
    S.sum().backward()
    img_grads = [p.grad for p in model.image_encoder.parameters() if p.grad is not None]
    txt_grads = [p.grad for p in model.text_encoder.parameters() if p.grad is not None]
    assert any(float(g.abs().sum()) > 0 for g in img_grads)
    assert any(float(g.abs().sum()) > 0 for g in txt_grads)


def test_eval_mode_deterministic(model):
    model.eval()
    images = torch.rand(1, 3, 64, 64)
    a = model.encode_image(images)
    b = model.encode_image(images)
    assert torch.equal(a.region_features, b.region_features)
    assert torch.equal(a.box_deltas, b.box_deltas)
