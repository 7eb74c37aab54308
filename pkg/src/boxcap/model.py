"""The joint detector/captioner: dual encoder + alignment head + caption head."""

from __future__ import annotations

import hashlib
import json

import torch
import torch.nn as nn

from .caption import CaptionDecoder
from .encoders import (
    AlignmentHead,
    ImageEncoder,
    ModelConfig,
    RegionOutputs,
    TextEmbeddings,
    TextEncoder,
    pad_token_batch,
)
from .tokenizer import Vocabulary


def arch_hash(cfg: ModelConfig) -> str:
    """Hash of every architecture-determining config field."""
    payload = json.dumps(cfg.to_dict(), sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


class BoxCapModel(nn.Module):
    def __init__(self, cfg: ModelConfig, vocab: Vocabulary):
        super().__init__()
        if cfg.vocab_size != len(vocab):
            cfg.vocab_size = len(vocab)
        self.cfg = cfg
        self.vocab = vocab
        self.image_encoder = ImageEncoder(cfg)
        self.text_encoder = TextEncoder(cfg)
        self.align_head = AlignmentHead(cfg)
        self.caption_head = CaptionDecoder(cfg)
        self._token_cache: dict[str, list[int]] = {}

    def encode_image(self, images: torch.Tensor) -> RegionOutputs:
        return self.image_encoder(images)

    def token_ids(self, concept: str) -> list[int]:
        ids = self._token_cache.get(concept)
        if ids is None:
            ids = self.vocab.encode(concept, self.cfg.max_context).ids
            self._token_cache[concept] = ids
        return ids

    def encode_concepts(self, concepts: list[str]) -> TextEmbeddings:
        device = next(self.text_encoder.parameters()).device
        batch = pad_token_batch([self.token_ids(c) for c in concepts], device=device)
        return self.text_encoder(batch)

    def align(self, region_features: torch.Tensor, texts: TextEmbeddings) -> torch.Tensor:
        return self.align_head(region_features, texts)

    def param_groups(self) -> dict[str, list[nn.Parameter]]:
        """Parameter groups for per-module learning rates."""
        return {
            "image": list(self.image_encoder.parameters()) + list(self.align_head.parameters()),
            "text": list(self.text_encoder.parameters()),
            "caption": list(self.caption_head.parameters()),
        }
