import math

import numpy as np
import pytest
import torch

from boxcap.caption import (
    CaptionDecoder,
    caption_lm_loss,
    class_agnostic_proposals,
    generate_caption,
)
from boxcap.encoders import ModelConfig, pad_token_batch
from boxcap.model import BoxCapModel
from boxcap.tokenizer import BOS, EOS, PAD, Vocabulary

WORDS = ["a", "red", "square", "blue", "triangle", "near", "the", "top", "left",
         "small", "object", "background", "shape"]


@pytest.fixture()
def vocab():
    return Vocabulary(sorted(WORDS))


def tiny_decoder(vocab, seed=0) -> CaptionDecoder:
    torch.manual_seed(seed)
    cfg = ModelConfig(vocab_size=len(vocab))
    return CaptionDecoder(cfg)


def test_uniform_logits_loss_is_log_vocab(vocab):
    decoder = tiny_decoder(vocab)
    with torch.no_grad():
        decoder.lm_head.weight.zero_()
        decoder.lm_head.bias.zero_()
    feats = torch.randn(3, decoder.cfg.embed_dim)
    tokens = pad_token_batch([vocab.encode("a red square.", 20).ids] * 3)
    loss, skipped = caption_lm_loss(feats, tokens, decoder)
    assert not skipped
    assert float(loss) == pytest.approx(math.log(len(vocab)), rel=1e-6)


def test_exact_onehot_decoder_loss_zero(vocab):
    # drive the lm head toward the true next token with huge logits
    decoder = tiny_decoder(vocab)
    tokens = pad_token_batch([vocab.encode("a red square.", 20).ids])
    feats = torch.randn(1, decoder.cfg.embed_dim)

    class Oracle(torch.nn.Module):
        cfg = decoder.cfg

        def forward(self, feat, tok):
            n, t = tok.shape
            out = torch.full((n, t + 1, len(vocab)), -1e4)
            for i in range(n):
                for j in range(t):
                    out[i, j + 1, int(tokens[i, j + 1]) if j + 1 < tokens.shape[1] else PAD] = 1e4
            return out

    loss, _ = caption_lm_loss(feats, tokens, Oracle())
    assert float(loss) == pytest.approx(0.0, abs=1e-6)


def test_loss_matches_per_token_oracle(vocab):
    # oracle: token-by-token -log softmax recomputation
    decoder = tiny_decoder(vocab, seed=3)
    seqs = [vocab.encode("a red square.", 20).ids, vocab.encode("blue triangle near the top.", 20).ids]
    tokens = pad_token_batch(seqs)
    feats = torch.randn(2, decoder.cfg.embed_dim)
    loss, _ = caption_lm_loss(feats, tokens, decoder)

    per_caption = []
    logits = decoder(feats, tokens[:, :-1])
    for i, seq in enumerate(seqs):
        nll = 0.0
        for j in range(1, len(seq)):
            logp = torch.log_softmax(logits[i, j], dim=-1)
            nll -= float(logp[seq[j]])
        per_caption.append(nll / (len(seq) - 1))
    assert float(loss) == pytest.approx(float(np.mean(per_caption)), rel=1e-6)


def test_zero_captions_skipped_flag(vocab):
    decoder = tiny_decoder(vocab)
    loss, skipped = caption_lm_loss(torch.zeros(0, decoder.cfg.embed_dim), torch.zeros((0, 1), dtype=torch.long), decoder)
    assert skipped and float(loss) == 0.0


def test_loss_permutation_invariant_over_captions(vocab):
    decoder = tiny_decoder(vocab, seed=5)
    seqs = [vocab.encode(t, 20).ids for t in
            ["a red square.", "blue triangle.", "small object near the left."]]
    feats = torch.randn(3, decoder.cfg.embed_dim)
    a, _ = caption_lm_loss(feats, pad_token_batch(seqs), decoder)
    perm = [2, 0, 1]
    b, _ = caption_lm_loss(feats[perm], pad_token_batch([seqs[i] for i in perm]), decoder)
    assert float(a) == pytest.approx(float(b), rel=1e-6)


def test_lm_loss_gradient_matches_finite_differences(vocab):
    torch.manual_seed(7)
    cfg = ModelConfig(vocab_size=len(vocab))
    decoder = CaptionDecoder(cfg).double()
    tokens = pad_token_batch([vocab.encode("a red square.", 20).ids])
    for _ in range(20):
        feats = torch.randn(1, cfg.embed_dim, dtype=torch.float64, requires_grad=True)
        loss, _ = caption_lm_loss(feats, tokens, decoder)
        loss.backward()
        with torch.no_grad():
            fd = torch.zeros_like(feats)
            for i in range(cfg.embed_dim):
                eps = 1e-6
                feats[0, i] += eps
                up, _ = caption_lm_loss(feats, tokens, decoder)
                feats[0, i] -= 2 * eps
                down, _ = caption_lm_loss(feats, tokens, decoder)
                feats[0, i] += eps
                fd[0, i] = (float(up) - float(down)) / (2 * eps)
        denom = max(float(feats.grad.abs().max()), float(fd.abs().max()), 1e-12)
        assert float((feats.grad - fd).abs().max()) / denom < 1e-4


def test_generation_deterministic(vocab):
    decoder = tiny_decoder(vocab, seed=11)
    feat = torch.randn(decoder.cfg.embed_dim)
    a = generate_caption(feat, decoder, vocab)
    b = generate_caption(feat, decoder, vocab)
    assert a == b


def test_generation_immediate_eos_gives_empty_caption(vocab):
    decoder = tiny_decoder(vocab)
    with torch.no_grad():
        decoder.lm_head.weight.zero_()
        decoder.lm_head.bias.fill_(-10.0)
        decoder.lm_head.bias[EOS] = 10.0
    assert generate_caption(torch.randn(decoder.cfg.embed_dim), decoder, vocab) == ""


def test_overfit_single_pair_reproduces_caption(vocab):
    # oracle: train on one (feature, caption) pair until it is memorized
    torch.manual_seed(13)
    cfg = ModelConfig(vocab_size=len(vocab))
    decoder = CaptionDecoder(cfg)
    feat = torch.randn(1, cfg.embed_dim)
    text = "a small red square near the top left."
    tokens = pad_token_batch([vocab.encode(text, 20).ids])
    opt = torch.optim.AdamW(decoder.parameters(), lr=3e-3)
    for _ in range(300):
        loss, _ = caption_lm_loss(feat, tokens, decoder)
        opt.zero_grad()
        loss.backward()
        opt.step()
    out = generate_caption(feat[0], decoder, vocab)
    assert out == "a small red square near the top left"


def test_class_agnostic_proposals_selection_and_shapes(vocab):
    torch.manual_seed(17)
    cfg = ModelConfig(vocab_size=len(vocab))
    model = BoxCapModel(cfg, vocab)
    regions = model.encode_image(torch.rand(1, 3, 64, 64))[0]
    with torch.no_grad():
        regions.centerness_logits[:] = torch.linspace(1, -1, regions.centerness_logits.shape[0])
    result = class_agnostic_proposals(regions, model, k=5)
    assert result.selected == [0, 1, 2, 3, 4]
    assert result.scores.shape == (84, 2)
    norms = result.fg_bg_embeddings.norm(dim=-1)
    assert torch.allclose(norms, torch.ones_like(norms), atol=1e-5)


def test_class_agnostic_top2_of_three():
    vocab = Vocabulary(sorted(WORDS))
    torch.manual_seed(19)
    cfg = ModelConfig(vocab_size=len(vocab))
    model = BoxCapModel(cfg, vocab)
    regions = model.encode_image(torch.rand(1, 3, 64, 64))[0]
    with torch.no_grad():
        regions.centerness_logits[:] = -5.0
        regions.centerness_logits[0] = 2.0
        regions.centerness_logits[1] = -6.0
        regions.centerness_logits[2] = 0.0
    result = class_agnostic_proposals(regions, model, k=2)
    assert result.selected == [0, 2]


def test_class_agnostic_k_larger_than_anchors(vocab):
    torch.manual_seed(23)
    cfg = ModelConfig(vocab_size=len(vocab))
    model = BoxCapModel(cfg, vocab)
    regions = model.encode_image(torch.rand(1, 3, 64, 64))[0]
    result = class_agnostic_proposals(regions, model, k=10_000)
    assert len(result.selected) == 84


def test_class_agnostic_matches_encode_and_align_oracle(vocab):
    torch.manual_seed(29)
    cfg = ModelConfig(vocab_size=len(vocab))
    model = BoxCapModel(cfg, vocab)
    regions = model.encode_image(torch.rand(1, 3, 64, 64))[0]
    result = class_agnostic_proposals(regions, model, k=3)
    texts = model.encode_concepts(["object", "background"])
    expect = model.align(regions.region_features, texts)
    assert torch.allclose(result.scores, expect, atol=1e-6)


def test_caption_gradient_reaches_image_features(vocab):
    torch.manual_seed(31)
    cfg = ModelConfig(vocab_size=len(vocab))
    model = BoxCapModel(cfg, vocab)
    regions = model.encode_image(torch.rand(1, 3, 64, 64))
    feats = regions.region_features[0, :2]
    tokens = pad_token_batch([vocab.encode("a red square.", 20).ids] * 2)
    loss, _ = caption_lm_loss(feats, tokens, model.caption_head)
    loss.backward()
    grads = [p.grad for p in model.image_encoder.parameters() if p.grad is not None]
    assert any(float(g.abs().sum()) > 0 for g in grads)
