"""Region-conditioned caption decoder.

The decoder is a small causal transformer whose first position is the region
feature projected to decoder width; teacher-forced training predicts the
caption tokens from BOS onward, and greedy decoding generates captions at
inference. The class-agnostic transform re-scores anchors against the fixed
"object"/"background" concepts so the detector doubles as a proposal source.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import (
    ModelConfig,
    RegionOutputs,
    TextEmbeddings,
    TransformerBlock,
    causal_mask,
)
from .tokenizer import BOS, EOS, PAD, Vocabulary


class CaptionDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        W = cfg.decoder_width
        self.region_proj = nn.Linear(cfg.embed_dim, W)
        self.token_embed = nn.Embedding(cfg.vocab_size, W)
        self.pos_embed = nn.Embedding(cfg.max_context + 1, W)  # +1 for the region prefix
        self.blocks = nn.ModuleList(
            [TransformerBlock(W, cfg.decoder_heads, cfg.decoder_mlp_ratio) for _ in range(cfg.decoder_layers)]
        )
        self.norm = nn.LayerNorm(W)
        self.lm_head = nn.Linear(W, cfg.vocab_size)

    def forward(self, region_features: torch.Tensor, token_ids: torch.Tensor) -> torch.Tensor:
        """Logits over the vocab at every position of [region, tokens...]."""
        if region_features.ndim == 1:
            region_features = region_features[None]
        n, t = token_ids.shape
        prefix = self.region_proj(region_features)[:, None, :]
        x = torch.cat([prefix, self.token_embed(token_ids)], dim=1)
        pos = torch.arange(t + 1, device=token_ids.device)
        x = x + self.pos_embed(pos)[None]
        mask = causal_mask(t + 1, x.dtype, x.device)
        for blk in self.blocks:
            x = blk(x, mask)
        return self.lm_head(self.norm(x))


def caption_lm_loss(
    region_features: torch.Tensor,
    token_ids: torch.Tensor,
    decoder: CaptionDecoder,
) -> tuple[torch.Tensor, bool]:
    """Teacher-forced NLL, token-averaged per caption then caption-averaged.

    token_ids is a right-padded (n, L) batch of BOS...EOS sequences. Returns
    (loss, skipped); skipped is True when there are no captions, in which
    case the loss is exactly 0.
    """
    if region_features.numel() == 0 or token_ids.numel() == 0:
        dtype = region_features.dtype if torch.is_tensor(region_features) else torch.float32
        return torch.zeros((), dtype=dtype), True
    n, L = token_ids.shape
    logits = decoder(region_features, token_ids[:, :-1])  # positions: [region, BOS, w1..]
    # position j >= 1 predicts token_ids[:, j]; the region prefix's BOS target is skipped
    pred = logits[:, 1:, :]
    target = token_ids[:, 1:]
    keep = target != PAD
    nll = F.cross_entropy(pred.reshape(-1, pred.shape[-1]), target.reshape(-1), reduction="none")
    nll = nll.reshape(n, -1) * keep.to(nll.dtype)
    per_caption = nll.sum(dim=1) / keep.sum(dim=1).clamp(min=1)
    return per_caption.mean(), False


@torch.no_grad()
def generate_caption(
    region_feature: torch.Tensor,
    decoder: CaptionDecoder,
    vocab: Vocabulary,
    max_len: int | None = None,
) -> str:
    """Greedy argmax decoding from BOS with the region prefix; deterministic."""
    max_len = max_len or decoder.cfg.max_context
    ids = [BOS]
    for _ in range(max_len - 1):
        tok = torch.as_tensor([ids], dtype=torch.long)
        logits = decoder(region_feature[None], tok)
        nxt = int(logits[0, -1].argmax().item())
        if nxt == EOS:
            break
        ids.append(nxt)
    return vocab.decode(ids + [EOS])


@dataclass
class ClassAgnosticResult:
    fg_bg_embeddings: torch.Tensor  # (2, D): "object" then "background"
    scores: torch.Tensor            # (K, 2)
    selected: list[int]             # top-k anchor indices by centerness


FOREGROUND_CONCEPT = "object"
BACKGROUND_CONCEPT = "background"


def class_agnostic_proposals(regions: RegionOutputs, model, k: int) -> ClassAgnosticResult:
    """Re-score anchors against "object"/"background" and rank by centerness."""
    if k < 1:
        raise ValueError("k must be >= 1")
    texts: TextEmbeddings = model.encode_concepts([FOREGROUND_CONCEPT, BACKGROUND_CONCEPT])
    scores = model.align(regions.region_features, texts)
    cen = regions.centerness_logits.detach().cpu().numpy()
    order = np.argsort(-cen, kind="stable")
    selected = [int(i) for i in order[: min(k, len(order))]]
    return ClassAgnosticResult(fg_bg_embeddings=texts.embeddings, scores=scores, selected=selected)
