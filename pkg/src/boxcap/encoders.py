"""Dual encoder: a small pyramid CNN over images and a causal transformer over
concept strings, joined by a cosine alignment score with learnable scale/bias.

The image encoder follows the one-stage anchor layout: one square anchor per
location per pyramid level (anchor side = anchor_scale * stride), per-anchor
region embeddings, positive box deltas (l, t, r, b distances in pixels) and a
centerness logit. The text encoder reads each concept at its EOS position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .tokenizer import EOS, PAD, Vocabulary


@dataclass
class ModelConfig:
    embed_dim: int = 64                    # D, shared region/text embedding width
    strides: tuple[int, ...] = (8, 16, 32)
    anchor_scale: float = 8.0
    stem_channels: int = 16
    stage_channels: tuple[int, ...] = (24, 32, 48)
    fpn_channels: int = 32
    head_convs: int = 1
    text_width: int = 64
    text_layers: int = 2
    text_heads: int = 4
    text_mlp_ratio: int = 2
    decoder_width: int = 64
    decoder_layers: int = 2
    decoder_heads: int = 4
    decoder_mlp_ratio: int = 2
    max_context: int = 20
    vocab_size: int = 64
    logit_scale_init: float = 10.0
    logit_bias_init: float = -4.59         # sigmoid prior ~= 0.01
    pad_to_stride: bool = False

    def to_dict(self) -> dict:
        return {
            k: (list(v) if isinstance(v, tuple) else v)
            for k, v in self.__dict__.items()
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for k in ("strides", "stage_channels"):
            if k in d and d[k] is not None:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class AnchorGrid:
    """Flattened anchor geometry, level-major then row-major within a level."""

    centers: np.ndarray  # (K, 2) x, y
    strides: np.ndarray  # (K,)
    levels: np.ndarray   # (K,)
    boxes: np.ndarray    # (K, 4) square anchors used by IoU-based assignment

    def __len__(self) -> int:
        return len(self.centers)


def build_anchors(height: int, width: int, strides, anchor_scale: float) -> AnchorGrid:
    centers, stride_arr, levels, boxes = [], [], [], []
    for lvl, s in enumerate(strides):
        gh, gw = height // s, width // s
        ys, xs = np.mgrid[0:gh, 0:gw]
        cx = (xs.reshape(-1) + 0.5) * s
        cy = (ys.reshape(-1) + 0.5) * s
        half = anchor_scale * s / 2.0
        centers.append(np.stack([cx, cy], axis=1))
        stride_arr.append(np.full(gh * gw, s, dtype=np.float64))
        levels.append(np.full(gh * gw, lvl, dtype=np.int64))
        boxes.append(np.stack([cx - half, cy - half, cx + half, cy + half], axis=1))
    return AnchorGrid(
        centers=np.concatenate(centers).astype(np.float64),
        strides=np.concatenate(stride_arr),
        levels=np.concatenate(levels),
        boxes=np.concatenate(boxes).astype(np.float64),
    )


@dataclass
class RegionOutputs:
    """Per-anchor outputs; tensors carry a leading batch dim."""

    region_features: torch.Tensor   # (B, K, D)
    box_deltas: torch.Tensor        # (B, K, 4) >= 0, pixels
    centerness_logits: torch.Tensor  # (B, K)
    anchors: AnchorGrid
    image_size: tuple[int, int]     # (h, w) before any padding

    @property
    def num_anchors(self) -> int:
        return self.region_features.shape[-2]

    def __getitem__(self, i: int) -> "RegionOutputs":
        return RegionOutputs(
            region_features=self.region_features[i],
            box_deltas=self.box_deltas[i],
            centerness_logits=self.centerness_logits[i],
            anchors=self.anchors,
            image_size=self.image_size,
        )


@dataclass
class TextEmbeddings:
    embeddings: torch.Tensor  # (M, D), unit L2 rows

    def __len__(self) -> int:
        return self.embeddings.shape[0]


def _conv_gn(cin: int, cout: int, stride: int = 1, kernel: int = 3) -> nn.Sequential:
    groups = math.gcd(8, cout)
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2),
        nn.GroupNorm(groups, cout),
        nn.ReLU(inplace=True),
    )


class ImageEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c1, (c2, c3, c4) = cfg.stem_channels, cfg.stage_channels
        self.stem = nn.Sequential(
            nn.Conv2d(3, c1, 5, stride=4, padding=2),
            nn.GroupNorm(math.gcd(8, c1), c1),
            nn.ReLU(inplace=True),
        )
        self.stage2 = _conv_gn(c1, c2, stride=2)   # stride 8
        self.stage3 = _conv_gn(c2, c3, stride=2)   # stride 16
        self.stage4 = _conv_gn(c3, c4, stride=2)   # stride 32
        C = cfg.fpn_channels
        self.lateral = nn.ModuleList([nn.Conv2d(c, C, 1) for c in (c2, c3, c4)])
        self.cls_tower = nn.ModuleList([nn.Conv2d(C, C, 3, padding=1) for _ in range(cfg.head_convs)])
        self.reg_tower = nn.ModuleList([nn.Conv2d(C, C, 3, padding=1) for _ in range(cfg.head_convs)])
        self.region_head = nn.Conv2d(C, cfg.embed_dim, 3, padding=1)
        # one conv emits the 4 box deltas and the centerness logit together
        self.box_cen_head = nn.Conv2d(C, 5, 3, padding=1)
        self.delta_scales = nn.Parameter(torch.ones(len(cfg.strides)))
        nn.init.constant_(self.box_cen_head.bias, 0.0)
        self._anchor_cache: dict[tuple[int, int], AnchorGrid] = {}

    def forward(self, images: torch.Tensor) -> RegionOutputs:
        if images.ndim == 3:
            images = images[None]
        b, _, h, w = images.shape
        max_stride = max(self.cfg.strides)
        if h % max_stride or w % max_stride:
            if not self.cfg.pad_to_stride:
                raise ValueError(
                    f"input {h}x{w} not divisible by stride {max_stride}; "
                    "set pad_to_stride to pad instead"
                )
            ph = (max_stride - h % max_stride) % max_stride
            pw = (max_stride - w % max_stride) % max_stride
            images = F.pad(images, (0, pw, 0, ph))
        _, _, hp, wp = images.shape

        x = self.stem(images)
        f2 = self.stage2(x)
        f3 = self.stage3(f2)
        f4 = self.stage4(f3)
        p4 = self.lateral[2](f4)
        p3 = self.lateral[1](f3) + F.interpolate(p4, scale_factor=2, mode="nearest")
        p2 = self.lateral[0](f2) + F.interpolate(p3, scale_factor=2, mode="nearest")

        # run the shared towers once over all levels: stack levels along the
        # batch dim on a zero canvas, re-zeroing the invalid region after each
        # conv so results match per-level zero padding exactly
        levels = (p2, p3, p4)
        hs = [p.shape[2] for p in levels]
        ws = [p.shape[3] for p in levels]
        hm, wm = max(hs), max(ws)
        canvas = p2.new_zeros(b * len(levels), p2.shape[1], hm, wm)
        valid = p2.new_zeros(len(levels), 1, hm, wm)
        for lvl, p in enumerate(levels):
            canvas[lvl * b: (lvl + 1) * b, :, : hs[lvl], : ws[lvl]] = p
            valid[lvl, :, : hs[lvl], : ws[lvl]] = 1.0
        valid = valid.repeat_interleave(b, dim=0)

        cls_f = canvas
        for conv in self.cls_tower:
            cls_f = F.relu(conv(cls_f)) * valid
        reg_f = canvas
        for conv in self.reg_tower:
            reg_f = F.relu(conv(reg_f)) * valid
        feat_all = self.region_head(cls_f)
        box_cen_all = self.box_cen_head(reg_f)

        feats, deltas, cens = [], [], []
        for lvl, s in enumerate(self.cfg.strides):
            sl = slice(lvl * b, (lvl + 1) * b)
            feat = feat_all[sl, :, : hs[lvl], : ws[lvl]]
            box_cen = box_cen_all[sl, :, : hs[lvl], : ws[lvl]]
            delta = F.softplus(box_cen[:, :4] * self.delta_scales[lvl]) * s
            cen = box_cen[:, 4:]
            feats.append(feat.flatten(2).transpose(1, 2))          # (B, HW, D)
            deltas.append(delta.flatten(2).transpose(1, 2))        # (B, HW, 4)
            cens.append(cen.flatten(2).squeeze(1))                 # (B, HW)
        key = (hp, wp)
        anchors = self._anchor_cache.get(key)
        if anchors is None:
            anchors = build_anchors(hp, wp, self.cfg.strides, self.cfg.anchor_scale)
            self._anchor_cache[key] = anchors
        return RegionOutputs(
            region_features=torch.cat(feats, dim=1),
            box_deltas=torch.cat(deltas, dim=1),
            centerness_logits=torch.cat(cens, dim=1),
            anchors=anchors,
            image_size=(h, w),
        )


class TransformerBlock(nn.Module):
    """Pre-norm causal self-attention block with explicit masking."""

    def __init__(self, width: int, heads: int, mlp_ratio: int):
        super().__init__()
        if width % heads:
            raise ValueError("width must divide evenly into heads")
        self.heads = heads
        self.head_dim = width // heads
        self.norm1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.norm2 = nn.LayerNorm(width)
        hidden = width * mlp_ratio
        self.mlp = nn.Sequential(nn.Linear(width, hidden), nn.GELU(), nn.Linear(hidden, width))

    def forward(self, x: torch.Tensor, causal_mask: torch.Tensor) -> torch.Tensor:
        b, t, c = x.shape
        y = self.norm1(x)
        q, k, v = self.qkv(y).chunk(3, dim=-1)
        q = q.view(b, t, self.heads, self.head_dim).transpose(1, 2)
        k = k.view(b, t, self.heads, self.head_dim).transpose(1, 2)
        v = v.view(b, t, self.heads, self.head_dim).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        att = att + causal_mask[:t, :t]
        att = att.softmax(dim=-1)
        y = (att @ v).transpose(1, 2).reshape(b, t, c)
        x = x + self.proj(y)
        x = x + self.mlp(self.norm2(x))
        return x


def causal_mask(t: int, dtype, device) -> torch.Tensor:
    m = torch.full((t, t), float("-inf"), dtype=dtype, device=device)
    return torch.triu(m, diagonal=1)


class TextEncoder(nn.Module):
    """Causal transformer; a concept's embedding is the projected EOS output."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        W = cfg.text_width
        self.token_embed = nn.Embedding(cfg.vocab_size, W)
        self.pos_embed = nn.Embedding(cfg.max_context, W)
        self.blocks = nn.ModuleList(
            [TransformerBlock(W, cfg.text_heads, cfg.text_mlp_ratio) for _ in range(cfg.text_layers)]
        )
        self.norm = nn.LayerNorm(W)
        self.out_proj = nn.Linear(W, cfg.embed_dim)

    def forward(self, token_ids: torch.Tensor) -> TextEmbeddings:
        if token_ids.ndim == 1:
            token_ids = token_ids[None]
        m, t = token_ids.shape
        if t > self.cfg.max_context:
            raise ValueError(f"sequence length {t} exceeds context {self.cfg.max_context}")
        pos = torch.arange(t, device=token_ids.device)
        x = self.token_embed(token_ids) + self.pos_embed(pos)[None]
        mask = causal_mask(t, x.dtype, x.device)
        for blk in self.blocks:
            x = blk(x, mask)
        x = self.norm(x)
        eos_pos = eos_positions(token_ids)
        picked = x[torch.arange(m, device=x.device), eos_pos]
        emb = self.out_proj(picked)
        emb = F.normalize(emb, dim=-1)
        return TextEmbeddings(embeddings=emb)


def eos_positions(token_ids: torch.Tensor) -> torch.Tensor:
    """Index of the first EOS in each row; rows must contain one."""
    is_eos = token_ids == EOS
    if not bool(is_eos.any(dim=1).all()):
        raise ValueError("every token sequence must contain EOS")
    return is_eos.float().argmax(dim=1)


def pad_token_batch(seqs: list[list[int]], device=None) -> torch.Tensor:
    """Right-pad sequences with PAD into one (M, L) long tensor."""
    if not seqs:
        return torch.zeros((0, 1), dtype=torch.long, device=device)
    L = max(len(s) for s in seqs)
    out = torch.full((len(seqs), L), PAD, dtype=torch.long, device=device)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(s, dtype=torch.long)
    return out


def alignment_scores(
    region_features: torch.Tensor,
    text_embeddings: TextEmbeddings | torch.Tensor,
    scale: torch.Tensor | float,
    bias: torch.Tensor | float,
) -> torch.Tensor:
    """S[..., k, m] = scale * <normalize(O_k), W_m> + bias."""
    W = text_embeddings.embeddings if isinstance(text_embeddings, TextEmbeddings) else text_embeddings
    if region_features.shape[-1] != W.shape[-1]:
        raise ValueError(
            f"embedding dim mismatch: regions {region_features.shape[-1]} vs text {W.shape[-1]}"
        )
    O = F.normalize(region_features, dim=-1)
    return scale * (O @ W.transpose(-2, -1)) + bias


class AlignmentHead(nn.Module):
    """Holds the learnable logit scale and bias of the score map."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.scale = nn.Parameter(torch.tensor(float(cfg.logit_scale_init)))
        self.bias = nn.Parameter(torch.tensor(float(cfg.logit_bias_init)))

    def forward(self, region_features: torch.Tensor, texts: TextEmbeddings) -> torch.Tensor:
        return alignment_scores(region_features, texts, self.scale, self.bias)


def build_vocab_text_batch(
    concepts: list[str], vocab: Vocabulary, max_context: int, device=None
) -> torch.Tensor:
    return pad_token_batch([vocab.encode(c, max_context).ids for c in concepts], device=device)
