"""Joint training over mixed detection / dense-caption data.

Batches alternate between pure-source detection and caption batches (intra-
batch mixing sits behind a config flag). Everything that depends only on the
data (assignments, centerness targets, caption/anchor pairing) is precomputed
once; negatives are resampled every iteration. Runs are fully deterministic
under a fixed seed, including the metrics log.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from .assign import atss_assign, best_anchor_per_gt, centerness_targets
from .caption import BACKGROUND_CONCEPT, FOREGROUND_CONCEPT, caption_lm_loss
from .concepts import ConceptDictionary, ConceptSet, dedupe_keep_order, sample_negatives
from .dataio import Dataset, load_dataset, load_dictionary
from .encoders import ModelConfig, build_anchors, pad_token_batch
from .losses import LossWeights, SampleTargets, detection_loss, total_loss
from .model import BoxCapModel, arch_hash
from .samples import Source, UnifiedSample
from .tokenizer import Vocabulary


class ArchMismatch(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr_image: float = 1.4e-3
    lr_text: float = 1.4e-3
    lr_caption_head: float = 1.4e-3
    batch_size: int = 8
    epochs: int = 30
    lr_decay_epochs: tuple[int, ...] = (20, 27)
    decay_factor: float = 0.1
    warmup_iters: int = 100
    warmup_ratio: float = 0.0001
    weight_decay: float = 0.05
    grad_clip: float = 10.0
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    max_context: int = 20
    target_m: int = 24
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    topk_per_level: int = 9
    centerness_weighted_reg: bool = True
    mixed_batches: str = "alternate"  # or "intra"
    batch_lr_scaling: bool = True     # peak lr = lr * sqrt(batch/16)
    checkpoint_every: int = 1
    num_threads: int = 1              # tiny tensors run faster single-threaded
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        self.lr_decay_epochs = tuple(int(e) for e in self.lr_decay_epochs)
        if isinstance(self.weights, dict):
            self.weights = LossWeights.from_dict(self.weights)
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        self.model.max_context = self.max_context

    def validate(self) -> "TrainConfig":
        for name in ("lr_image", "lr_text", "lr_caption_head"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if list(self.lr_decay_epochs) != sorted(set(self.lr_decay_epochs)):
            raise ValueError("lr_decay_epochs must be strictly increasing")
        if any(e >= self.epochs + 1 for e in self.lr_decay_epochs):
            raise ValueError("decay epochs must be < epochs")
        if self.mixed_batches not in ("alternate", "intra"):
            raise ValueError("mixed_batches must be 'alternate' or 'intra'")
        return self

    @classmethod
    def paper_profile(cls) -> "TrainConfig":
        """The source training recipe (documented, not the desk default)."""
        return cls(
            lr_image=1e-4, lr_text=1e-5, lr_caption_head=1e-5,
            batch_size=32, epochs=12, lr_decay_epochs=(8, 11),
            warmup_iters=1000, target_m=150,
        )

    def effective_lrs(self) -> dict[str, float]:
        scale = math.sqrt(self.batch_size / 16.0) if self.batch_lr_scaling else 1.0
        return {
            "image": self.lr_image * scale,
            "text": self.lr_text * scale,
            "caption": self.lr_caption_head * scale,
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_decay_epochs"] = list(self.lr_decay_epochs)
        d["weights"] = self.weights.to_dict()
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def lr_multiplier(step: int, epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup by step, stepwise decay by (1-based) epoch."""
    if cfg.warmup_iters > 0 and step < cfg.warmup_iters:
        warm = cfg.warmup_ratio + (1.0 - cfg.warmup_ratio) * step / cfg.warmup_iters
    else:
        warm = 1.0
    n_decays = sum(1 for e in cfg.lr_decay_epochs if e <= epoch)
    return warm * (cfg.decay_factor ** n_decays)


@dataclass
class PreparedSample:
    index: int
    source: Source
    image: torch.Tensor
    concepts: list[str]
    pos_anchor_idx: np.ndarray
    pos_gt_idx: np.ndarray
    pos_gt_boxes: np.ndarray
    pos_centerness: np.ndarray
    cap_anchor_idx: np.ndarray      # one (best-IoU) positive anchor per captioned box
    cap_token_ids: list[list[int]]


def prepare_sample(
    sample: UnifiedSample, index: int, anchors, vocab: Vocabulary, cfg: TrainConfig
) -> PreparedSample:
    assignment = atss_assign(anchors, sample.boxes, cfg.topk_per_level)
    pos = np.nonzero(assignment.pos_mask)[0]
    gt_idx = assignment.anchor_to_gt[pos]
    boxes = np.asarray(sample.boxes, dtype=np.float64).reshape(-1, 4)
    pos_boxes = boxes[gt_idx] if len(pos) else np.zeros((0, 4))
    cen = centerness_targets(anchors.centers[pos], pos_boxes) if len(pos) else np.zeros(0)

    cap_anchor_idx = np.zeros(0, dtype=np.int64)
    cap_token_ids: list[list[int]] = []
    if sample.source == Source.DENSE_CAPTION and len(pos):
        cap_gt, cap_anchor_idx = best_anchor_per_gt(assignment, anchors, boxes)
        cap_token_ids = [vocab.encode(sample.concepts[g], cfg.max_context).ids for g in cap_gt]

    img = torch.from_numpy(np.ascontiguousarray(sample.image))
    return PreparedSample(
        index=index,
        source=sample.source,
        image=img,
        concepts=list(sample.concepts),
        pos_anchor_idx=pos,
        pos_gt_idx=gt_idx,
        pos_gt_boxes=pos_boxes,
        pos_centerness=cen,
        cap_anchor_idx=cap_anchor_idx,
        cap_token_ids=cap_token_ids,
    )


def build_vocab(datasets: list[Dataset]) -> Vocabulary:
    corpus: list[str] = [FOREGROUND_CONCEPT, BACKGROUND_CONCEPT]
    for ds in datasets:
        corpus.extend(ds.all_concepts())
    return Vocabulary.build(corpus)


class Trainer:
    def __init__(
        self,
        model: BoxCapModel,
        cfg: TrainConfig,
        dictionary: ConceptDictionary | None = None,
    ):
        self.model = model
        self.cfg = cfg
        self.negative_pool = dictionary.restricted(1) if dictionary is not None else None
        self.data_rng = np.random.default_rng(cfg.seed + 1)
        self.step = 0
        self.epoch = 0
        eff = cfg.effective_lrs()
        groups = model.param_groups()
        self.optimizer = torch.optim.AdamW(
            [
                {"params": groups["image"], "lr": eff["image"], "name": "image"},
                {"params": groups["text"], "lr": eff["text"], "name": "text"},
                {"params": groups["caption"], "lr": eff["caption"], "name": "caption"},
            ],
            weight_decay=cfg.weight_decay,
            foreach=True,
        )

    def current_lrs(self) -> dict[str, float]:
        mult = lr_multiplier(self.step, self.epoch, self.cfg)
        return {name: lr * mult for name, lr in self.cfg.effective_lrs().items()}

    def _apply_lrs(self) -> dict[str, float]:
        lrs = self.current_lrs()
        for group in self.optimizer.param_groups:
            group["lr"] = lrs[group["name"]]
        return lrs

    def _pooled_concepts(self, batch: list[PreparedSample]) -> ConceptSet:
        positives = dedupe_keep_order([c for s in batch for c in s.concepts])
        if self.negative_pool is None or len(self.negative_pool) == 0:
            return ConceptSet(positives, n_pos=len(positives))
        seed = int(self.data_rng.integers(0, 2**31 - 1))
        return sample_negatives(positives, self.negative_pool, self.cfg.target_m, seed)

    def train_step(self, batch: list[PreparedSample]) -> dict:
        """One update on a prepared batch; returns the loss breakdown."""
        cfg = self.cfg
        model = self.model
        model.train()
        lrs = self._apply_lrs()

        concept_set = self._pooled_concepts(batch)
        cidx = {c: i for i, c in enumerate(concept_set.concepts)}
        M = len(concept_set)

        images = torch.stack([s.image for s in batch])
        regions = model.encode_image(images)
        K = regions.num_anchors
        texts = model.encode_concepts(concept_set.concepts)
        scores = model.align(regions.region_features, texts)

        targets = []
        for s in batch:
            G = np.zeros((K, M), dtype=np.float32)
            if len(s.pos_anchor_idx):
                cols = np.array([cidx[s.concepts[g]] for g in s.pos_gt_idx], dtype=np.int64)
                G[s.pos_anchor_idx, cols] = 1.0
            targets.append(
                SampleTargets(
                    source=s.source,
                    alignment=G,
                    pos_anchor_idx=s.pos_anchor_idx,
                    pos_gt_boxes=s.pos_gt_boxes,
                    pos_centerness=s.pos_centerness,
                )
            )

        l_det, breakdown = detection_loss(
            regions, scores, targets, cfg.weights,
            gamma=cfg.focal_gamma, alpha_f=cfg.focal_alpha,
            centerness_weighted_reg=cfg.centerness_weighted_reg,
        )

        cap_feats, cap_tokens = [], []
        for b, s in enumerate(batch):
            for j, a in enumerate(s.cap_anchor_idx):
                cap_feats.append(regions.region_features[b, int(a)])
                cap_tokens.append(s.cap_token_ids[j])
        if cap_feats:
            feats = torch.stack(cap_feats)
            tokens = pad_token_batch(cap_tokens)
            l_cap, _ = caption_lm_loss(feats, tokens, model.caption_head)
        else:
            l_cap = torch.zeros((), dtype=scores.dtype)

        loss = total_loss(l_det, l_cap, cfg.weights)
        if not torch.isfinite(loss):
            raise TrainingDiverged(
                f"non-finite loss at step {self.step} on samples "
                f"{[(s.source.value, s.index) for s in batch]}"
            )
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        self.optimizer.step()
        self.step += 1

        metrics = {
            "step": self.step,
            "epoch": self.epoch,
            "source": batch[0].source.value if len({s.source for s in batch}) == 1 else "mixed",
            "L_align": breakdown["L_align"],
            "L_reg": breakdown["L_reg"],
            "L_center": breakdown["L_center"],
            "L_cap": float(l_cap.detach()),
            "total": float(loss.detach()),
            "lr_image": lrs["image"],
            "lr_text": lrs["text"],
            "lr_caption_head": lrs["caption"],
        }
        return metrics

    def state_dict(self) -> dict:
        return {
            "optimizer": self.optimizer.state_dict(),
            "step": self.step,
            "epoch": self.epoch,
            "data_rng": self.data_rng.bit_generator.state,
            "torch_rng": torch.get_rng_state(),
        }

    def load_state_dict(self, state: dict) -> None:
        self.optimizer.load_state_dict(state["optimizer"])
        self.step = int(state["step"])
        self.epoch = int(state["epoch"])
        self.data_rng.bit_generator.state = state["data_rng"]
        torch.set_rng_state(state["torch_rng"])


def checkpoint_save(
    path,
    model: BoxCapModel,
    cfg: TrainConfig,
    trainer: Trainer | None = None,
    epoch: int | None = None,
    final: bool = False,
) -> str:
    os.makedirs(path, exist_ok=True)
    manifest = {
        "arch_hash": arch_hash(model.cfg),
        "embed_dim": model.cfg.embed_dim,
        "strides": list(model.cfg.strides),
        "vocab_size": model.cfg.vocab_size,
        "epoch": epoch,
        "final": final,
        "config": cfg.to_dict(),
    }
    tmp = os.path.join(path, "manifest.json.tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    os.replace(tmp, os.path.join(path, "manifest.json"))
    model.vocab.save(os.path.join(path, "vocab.json"))
    torch.save(model.state_dict(), os.path.join(path, "weights.pt"))
    if trainer is not None:
        torch.save(trainer.state_dict(), os.path.join(path, "training_state.pt"))
    return str(path)


def checkpoint_load(path, expect_model_config: ModelConfig | None = None):
    """Rebuild (model, config, manifest) from a checkpoint directory."""
    with open(os.path.join(path, "manifest.json"), encoding="utf-8") as f:
        manifest = json.load(f)
    cfg = TrainConfig.from_dict(manifest["config"])
    if arch_hash(cfg.model) != manifest["arch_hash"]:
        raise ArchMismatch("manifest config does not match its stored architecture hash")
    if expect_model_config is not None and arch_hash(expect_model_config) != manifest["arch_hash"]:
        raise ArchMismatch(
            f"checkpoint architecture {manifest['arch_hash']} does not match "
            f"the requested configuration {arch_hash(expect_model_config)}"
        )
    vocab = Vocabulary.load(os.path.join(path, "vocab.json"))
    if len(vocab) != manifest["vocab_size"]:
        raise ArchMismatch("vocabulary size does not match the manifest")
    model = BoxCapModel(cfg.model, vocab)
    state = torch.load(os.path.join(path, "weights.pt"), weights_only=True)
    model.load_state_dict(state)
    model.eval()
    return model, cfg, manifest


def _epoch_batches(
    det_idx: np.ndarray, cap_idx: np.ndarray, cfg: TrainConfig, rng: np.random.Generator
):
    """Deterministic batch plan for one epoch: (source, indices) pairs."""
    det = det_idx[rng.permutation(len(det_idx))] if len(det_idx) else det_idx
    cap = cap_idx[rng.permutation(len(cap_idx))] if len(cap_idx) else cap_idx
    bs = cfg.batch_size
    if cfg.mixed_batches == "intra":
        merged = np.concatenate(
            [np.stack([np.zeros(len(det), dtype=np.int64), det], 1),
             np.stack([np.ones(len(cap), dtype=np.int64), cap], 1)]
        )
        merged = merged[rng.permutation(len(merged))]
        return [("mixed", merged[i: i + bs]) for i in range(0, len(merged), bs)]
    det_batches = [("det", det[i: i + bs]) for i in range(0, len(det), bs)]
    cap_batches = [("cap", cap[i: i + bs]) for i in range(0, len(cap), bs)]
    plan = []
    for d, c in zip(det_batches, cap_batches):
        plan.extend([d, c])
    longer = det_batches[len(cap_batches):] or cap_batches[len(det_batches):]
    plan.extend(longer)
    return plan


def fit(
    det_path,
    cap_path,
    cfg: TrainConfig,
    out_dir,
    dictionary_path=None,
    resume=None,
) -> tuple[str, str]:
    """Train from dataset files; returns (final checkpoint dir, metrics path)."""
    cfg.validate()
    if cfg.num_threads > 0:
        torch.set_num_threads(cfg.num_threads)
    torch.manual_seed(cfg.seed)
    torch.use_deterministic_algorithms(True)
    os.makedirs(out_dir, exist_ok=True)

    det_data = load_dataset(det_path).validate()
    cap_data = load_dataset(cap_path).validate()
    if dictionary_path is None:
        candidate = os.path.join(os.path.dirname(os.path.abspath(det_path)), "dictionary.json")
        dictionary_path = candidate if os.path.exists(candidate) else None
    dictionary = load_dictionary(dictionary_path) if dictionary_path else None

    vocab = build_vocab([det_data, cap_data])
    cfg.model.vocab_size = len(vocab)

    if resume is not None:
        model, loaded_cfg, manifest = checkpoint_load(resume, expect_model_config=cfg.model)
        start_epoch = int(manifest["epoch"] or 0)
    else:
        model = BoxCapModel(cfg.model, vocab)
        start_epoch = 0

    trainer = Trainer(model, cfg, dictionary)
    if resume is not None:
        state = torch.load(os.path.join(resume, "training_state.pt"), weights_only=False)
        trainer.load_state_dict(state)

    first = det_data[0] if len(det_data) else cap_data[0]
    anchors = build_anchors(first.height, first.width, cfg.model.strides, cfg.model.anchor_scale)

    prepared: dict[tuple[str, int], PreparedSample] = {}

    def get_prepared(source: str, i: int) -> PreparedSample:
        key = (source, i)
        if key not in prepared:
            ds = det_data if source == "det" else cap_data
            prepared[key] = prepare_sample(ds[i], i, anchors, vocab, cfg)
        return prepared[key]

    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    mode = "a" if resume is not None else "w"
    ckpt_root = os.path.join(out_dir, "checkpoints")
    os.makedirs(ckpt_root, exist_ok=True)
    eff = cfg.effective_lrs()

    final_path = os.path.join(ckpt_root, "final")
    with open(metrics_path, mode, encoding="utf-8") as mf:
        if resume is None:
            mf.write(json.dumps({"event": "start", "effective_peak_lrs": eff,
                                 "det_samples": len(det_data), "cap_samples": len(cap_data)},
                                sort_keys=True) + "\n")
        for epoch in range(start_epoch + 1, cfg.epochs + 1):
            trainer.epoch = epoch
            plan = _epoch_batches(
                np.arange(len(det_data)), np.arange(len(cap_data)), cfg, trainer.data_rng
            )
            epoch_totals = []
            for source, idx in plan:
                if source == "mixed":
                    batch = [get_prepared("det" if s == 0 else "cap", int(i)) for s, i in idx]
                else:
                    batch = [get_prepared(source, int(i)) for i in idx]
                try:
                    metrics = trainer.train_step(batch)
                except TrainingDiverged:
                    dump = {
                        "step": trainer.step,
                        "epoch": epoch,
                        "samples": [(s.source.value, s.index) for s in batch],
                    }
                    with open(os.path.join(out_dir, "diagnostics.json"), "w") as df:
                        json.dump(dump, df, indent=2)
                    raise
                epoch_totals.append(metrics["total"])
                mf.write(json.dumps(metrics, sort_keys=True) + "\n")
            ckpt = None
            if epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs:
                ckpt = checkpoint_save(
                    os.path.join(ckpt_root, f"epoch_{epoch:04d}"), model, cfg,
                    trainer=trainer, epoch=epoch, final=False,
                )
            mf.write(json.dumps({
                "event": "epoch", "epoch": epoch,
                "mean_total": float(np.mean(epoch_totals)) if epoch_totals else 0.0,
                "checkpoint": ckpt,
            }, sort_keys=True) + "\n")
        checkpoint_save(final_path, model, cfg, trainer=trainer, epoch=cfg.epochs, final=True)
    return final_path, metrics_path
