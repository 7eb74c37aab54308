"""Single entry point wiring data generation, training, evaluation and inference.

Every run writes its artifacts under --out with fixed names plus a
manifest.json recording the command, config snapshot, seed, git state and
output paths. Failures exit 1 with a machine-readable JSON error on stderr.
"""

from __future__ import annotations

import argparse
import datetime
import json
import os
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch

from .caption import class_agnostic_proposals, generate_caption
from .concepts import ConceptDictionary
from .dataio import generate_dataset, load_dataset, load_dictionary
from .inference import decoded_boxes, two_stage_inference, zero_shot_detect
from .metrics import densecap_map, detection_ap, nms
from .plots import densecap_heatmap_svg, overlay_svg, pr_curves_svg
from .samples import Source
from .scenes import SceneSpec, render_scene
from .train import TrainConfig, checkpoint_load, fit


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
        )
        return out.stdout.strip() or "unknown"
    except Exception:
        return "unknown"


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    git: str = field(default_factory=git_describe)
    started: str = ""
    finished: str = ""
    outputs: list[str] = field(default_factory=list)

    def write(self, out_dir) -> str:
        self.finished = _now()
        for p in self.outputs:
            if not os.path.exists(p):
                raise FileNotFoundError(f"manifest names missing artifact {p}")
        path = os.path.join(out_dir, "manifest.json")
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(self.__dict__, f, indent=2, sort_keys=True)
        os.replace(tmp, path)
        return path


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _load_spec(path) -> SceneSpec:
    if path is None:
        return SceneSpec()
    with open(path, encoding="utf-8") as f:
        return SceneSpec.from_dict(json.load(f))


def _write_json(path, payload) -> str:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
    return str(path)


def _image_tensor_of_sample(sample) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(sample.image))


def cmd_gen_data(args) -> RunManifest:
    spec = _load_spec(args.spec)
    if args.all_annotated:
        spec = spec.with_all_annotated()
    out = generate_dataset(spec, args.count, args.seed, args.out, inline_images=args.inline_images)
    manifest = RunManifest("gen-data", {"spec": spec.to_dict(), "count": args.count},
                           seed=args.seed, started=args._started)
    manifest.outputs = [out.det_path, out.cap_path, out.dictionary_path, out.specs_path]
    return manifest


def cmd_train(args) -> RunManifest:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    for name, attr in (
        ("epochs", "epochs"), ("batch_size", "batch_size"), ("seed", "seed"),
        ("lr_image", "lr_image"), ("lr_text", "lr_text"),
        ("lr_caption_head", "lr_caption_head"), ("target_m", "target_m"),
        ("max_context", "max_context"),
    ):
        val = getattr(args, name)
        if val is not None:
            setattr(cfg, attr, val)
    if args.w_c is not None:
        cfg.weights.w_c = args.w_c
    if args.w_d is not None:
        cfg.weights.w_d = args.w_d
    if args.intra_batch_mixing:
        cfg.mixed_batches = "intra"
    cfg.model.max_context = cfg.max_context
    ckpt, metrics = fit(
        args.det_data, args.cap_data, cfg, args.out,
        dictionary_path=args.dictionary, resume=args.resume,
    )
    manifest = RunManifest("train", cfg.to_dict(), seed=cfg.seed, started=args._started)
    manifest.outputs = [metrics, os.path.join(ckpt, "weights.pt"), os.path.join(ckpt, "manifest.json")]
    return manifest


def _eval_images(dataset, model, worker_fn, workers: int):
    """Run worker_fn(i) for every image index; deterministic index-order fold."""
    indices = list(range(len(dataset)))
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(worker_fn, indices))
    else:
        results = [worker_fn(i) for i in indices]
    return results


def cmd_eval_det(args) -> RunManifest:
    dictionary = load_dictionary(args.categories)
    names = dictionary.names()
    data = load_dataset(args.data).validate()

    if args.predictions:
        with open(args.predictions, encoding="utf-8") as f:
            predictions = [json.loads(line) for line in f if line.strip()]
    else:
        model, _, _ = checkpoint_load(args.ckpt)
        def worker(i: int):
            sample = data[i]
            dets = zero_shot_detect(
                sample.image, names, model,
                score_threshold=args.score_threshold, nms_threshold=args.nms_threshold,
                dictionary=dictionary,
            )
            return [d.to_record(i) for d in dets]
        predictions = [rec for recs in _eval_images(data, model, worker, args.workers) for rec in recs]

    ground_truth = []
    for i in range(len(data)):
        sample = data[i]
        if sample.source != Source.DETECTION:
            raise ValueError("eval-det expects a detection-source dataset")
        for box, cid in zip(sample.boxes, sample.category_ids):
            ground_truth.append({"image_id": i, "box": list(map(float, box)), "category": names[cid]})

    report = detection_ap(predictions, ground_truth,
                          frequency_map=dictionary.frequency, include_curves=True)
    curves = report.pop("curves")
    os.makedirs(os.path.join(args.out, "curves"), exist_ok=True)
    curve_path = pr_curves_svg(curves, os.path.join(args.out, "curves", "pr_iou50.svg"))
    pred_path = os.path.join(args.out, "predictions.jsonl")
    with open(pred_path, "w", encoding="utf-8") as f:
        for rec in predictions:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    report_path = args.report or os.path.join(args.out, "report.json")
    _write_json(report_path, report)

    manifest = RunManifest("eval-det", {"categories": args.categories}, seed=None,
                           started=args._started)
    manifest.outputs = [report_path, pred_path, curve_path]
    return manifest


def cmd_eval_cap(args) -> RunManifest:
    data = load_dataset(args.data).validate()
    ground_truth = []
    for i in range(len(data)):
        sample = data[i]
        if sample.source != Source.DENSE_CAPTION:
            raise ValueError("eval-cap expects a dense-caption dataset")
        for box, caption in zip(sample.boxes, sample.concepts):
            ground_truth.append({"image_id": i, "box": list(map(float, box)), "caption": caption})

    if args.predictions:
        with open(args.predictions, encoding="utf-8") as f:
            predictions = [json.loads(line) for line in f if line.strip()]
    else:
        model, _, _ = checkpoint_load(args.ckpt)

        @torch.no_grad()
        def worker(i: int):
            sample = data[i]
            regions = model.encode_image(_image_tensor_of_sample(sample))[0]
            result = class_agnostic_proposals(regions, model, args.class_agnostic_k)
            boxes = decoded_boxes(regions)
            cen = torch.sigmoid(regions.centerness_logits).numpy()
            fg = torch.sigmoid(result.scores[:, 0]).numpy()
            conf = fg if args.rank_by_fg else cen
            sel = np.array(result.selected, dtype=np.int64)
            keep = [sel[j] for j in nms(boxes[sel], conf[sel], args.nms_threshold)]
            recs = []
            for a in keep:
                caption = generate_caption(regions.region_features[a], model.caption_head, model.vocab)
                if not caption:
                    continue
                recs.append({"image_id": i, "box": [float(v) for v in boxes[a]],
                             "score": float(conf[a]), "caption": caption})
            return recs

        predictions = [rec for recs in _eval_images(data, model, worker, args.workers) for rec in recs]

    report = densecap_map(predictions, ground_truth)
    os.makedirs(os.path.join(args.out, "curves"), exist_ok=True)
    heat_path = densecap_heatmap_svg(report, os.path.join(args.out, "curves", "densecap_cells.svg"))
    pred_path = os.path.join(args.out, "predictions.jsonl")
    with open(pred_path, "w", encoding="utf-8") as f:
        for rec in predictions:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    report_path = args.report or os.path.join(args.out, "report.json")
    _write_json(report_path, report)

    manifest = RunManifest("eval-cap", {"class_agnostic_k": args.class_agnostic_k},
                           seed=None, started=args._started)
    manifest.outputs = [report_path, pred_path, heat_path]
    return manifest


def cmd_infer(args) -> RunManifest:
    model, _, _ = checkpoint_load(args.ckpt)
    dictionary = load_dictionary(args.categories) if args.categories else None
    names = args.category_names.split(",") if args.category_names else (
        dictionary.names() if dictionary else None
    )
    if not names:
        raise ValueError("provide --categories or --category-names")

    if args.image:
        from PIL import Image
        arr = np.asarray(Image.open(args.image).convert("RGB"), dtype=np.float32) / 255.0
        image = arr.transpose(2, 0, 1)
    else:
        spec = _load_spec(args.spec)
        image = render_scene(args.seed, spec).image

    detections = two_stage_inference(
        image, names, model, tau_unknown=args.tau_unknown, k=args.k,
        score_threshold=args.score_threshold, nms_threshold=args.nms_threshold,
        dictionary=dictionary,
    )
    outputs = []
    if args.json:
        det_path = _write_json(
            os.path.join(args.out, "detections.json"),
            [d.to_record(0) | {"kind": d.kind.value} for d in detections],
        )
        outputs.append(det_path)
    if args.svg:
        outputs.append(overlay_svg(image, detections, os.path.join(args.out, "scene.svg")))

    manifest = RunManifest(
        "infer", {"tau_unknown": args.tau_unknown, "categories": names},
        seed=args.seed, started=args._started,
    )
    manifest.outputs = outputs
    return manifest


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="boxcap", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate paired synthetic datasets")
    g.add_argument("--spec", default=None, help="scene spec JSON (default: built-in)")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=200)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--inline-images", action="store_true")
    g.add_argument("--all-annotated", action="store_true",
                   help="annotate held-out combos too (evaluation ground truth)")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="joint detection + captioning training")
    t.add_argument("--config", default=None)
    t.add_argument("--det-data", required=True)
    t.add_argument("--cap-data", required=True)
    t.add_argument("--dictionary", default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--lr-image", type=float, default=None)
    t.add_argument("--lr-text", type=float, default=None)
    t.add_argument("--lr-caption-head", type=float, default=None)
    t.add_argument("--target-m", type=int, default=None)
    t.add_argument("--max-context", type=int, default=None)
    t.add_argument("--w-c", type=float, default=None)
    t.add_argument("--w-d", type=float, default=None)
    t.add_argument("--intra-batch-mixing", action="store_true")
    t.set_defaults(fn=cmd_train)

    ed = sub.add_parser("eval-det", help="zero-shot detection AP")
    ed.add_argument("--ckpt")
    ed.add_argument("--data", required=True)
    ed.add_argument("--categories", required=True, help="dictionary JSON with training counts")
    ed.add_argument("--out", required=True)
    ed.add_argument("--report", default=None)
    ed.add_argument("--predictions", default=None, help="score existing predictions instead")
    ed.add_argument("--score-threshold", type=float, default=0.3)
    ed.add_argument("--nms-threshold", type=float, default=0.5)
    ed.add_argument("--workers", type=int, default=1)
    ed.set_defaults(fn=cmd_eval_det)

    ec = sub.add_parser("eval-cap", help="dense-captioning mAP")
    ec.add_argument("--ckpt")
    ec.add_argument("--data", required=True)
    ec.add_argument("--out", required=True)
    ec.add_argument("--report", default=None)
    ec.add_argument("--predictions", default=None, help="score existing predictions instead")
    ec.add_argument("--class-agnostic-k", type=int, default=100)
    ec.add_argument("--rank-by-fg", action="store_true",
                    help="rank proposals by the foreground score instead of centerness")
    ec.add_argument("--nms-threshold", type=float, default=0.5)
    ec.add_argument("--workers", type=int, default=1)
    ec.set_defaults(fn=cmd_eval_cap)

    i = sub.add_parser("infer", help="two-stage detection with unknown captioning")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--image", default=None)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--spec", default=None)
    i.add_argument("--categories", default=None, help="dictionary JSON")
    i.add_argument("--category-names", default=None, help="comma-separated list")
    i.add_argument("--tau-unknown", type=float, default=0.25)
    i.add_argument("--k", type=int, default=100)
    i.add_argument("--score-threshold", type=float, default=0.3)
    i.add_argument("--nms-threshold", type=float, default=0.5)
    i.add_argument("--json", action="store_true", default=True)
    i.add_argument("--no-json", dest="json", action="store_false")
    i.add_argument("--svg", action="store_true")
    i.add_argument("--out", required=True)
    i.set_defaults(fn=cmd_infer)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args._started = _now()
    try:
        os.makedirs(args.out, exist_ok=True)
        manifest = args.fn(args)
        manifest.write(args.out)
        return 0
    except Exception as e:  # noqa: BLE001 - single process boundary
        sys.stderr.write(json.dumps({"error": type(e).__name__, "message": str(e)}) + "\n")
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
