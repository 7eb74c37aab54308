"""JSONL dataset persistence and loading.

One record per sample. The image field either references the generator
(``{"seed", "spec_id"}``) or inlines base85-encoded uint8 pixels
(``{"b85", "h", "w"}``). A dataset directory holds ``det.jsonl``,
``cap.jsonl``, ``dictionary.json`` and ``specs.json``.
"""

from __future__ import annotations

import base64
import json
import os
from dataclasses import dataclass

import numpy as np

from .concepts import ConceptDictionary
from .samples import Source, UnifiedSample, empty_boxes
from .scenes import SceneSpec, generate_scene, spec_dictionary


def encode_image_b85(image: np.ndarray) -> dict:
    u8 = np.clip(image * 255.0 + 0.5, 0, 255).astype(np.uint8)
    return {
        "b85": base64.b85encode(u8.tobytes()).decode("ascii"),
        "h": int(image.shape[1]),
        "w": int(image.shape[2]),
    }


def decode_image_b85(field: dict) -> np.ndarray:
    raw = base64.b85decode(field["b85"])
    u8 = np.frombuffer(raw, dtype=np.uint8).reshape(3, field["h"], field["w"])
    return u8.astype(np.float32) / 255.0


def sample_record(sample: UnifiedSample, image_field: dict) -> dict:
    rec = {
        "source": sample.source.value,
        "image": image_field,
        "boxes": [[float(v) for v in b] for b in np.asarray(sample.boxes).reshape(-1, 4)],
        "concepts": list(sample.concepts),
    }
    if sample.category_ids is not None:
        rec["category_ids"] = [int(i) for i in sample.category_ids]
    return rec


def write_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


class Dataset:
    """Lazy view over a JSONL file; images regenerate from seeds and are cached."""

    def __init__(self, records: list[dict], specs: dict[str, SceneSpec]):
        self.records = records
        self.specs = specs
        self._image_cache: dict[tuple[str, int], np.ndarray] = {}
        self._sample_cache: dict[int, UnifiedSample] = {}

    def __len__(self) -> int:
        return len(self.records)

    def _image(self, rec: dict) -> np.ndarray:
        img = rec["image"]
        if "b85" in img:
            return decode_image_b85(img)
        key = (img["spec_id"], int(img["seed"]))
        if key not in self._image_cache:
            spec = self.specs[img["spec_id"]]
            det, cap = generate_scene(int(img["seed"]), spec)
            self._image_cache[key] = det.image
        return self._image_cache[key]

    def __getitem__(self, i: int) -> UnifiedSample:
        if i not in self._sample_cache:
            rec = self.records[i]
            boxes = np.asarray(rec["boxes"], dtype=np.float64).reshape(-1, 4)
            sample = UnifiedSample(
                image=self._image(rec),
                boxes=boxes if len(boxes) else empty_boxes(),
                concepts=list(rec["concepts"]),
                source=Source(rec["source"]),
                category_ids=rec.get("category_ids"),
            )
            self._sample_cache[i] = sample
        return self._sample_cache[i]

    def validate(self) -> "Dataset":
        for i in range(len(self)):
            try:
                self[i].validate()
            except ValueError as e:
                raise ValueError(f"record {i}: {e}") from e
        return self

    def all_concepts(self) -> list[str]:
        out: list[str] = []
        for rec in self.records:
            out.extend(rec["concepts"])
        return out


def load_dataset(path, specs_path=None) -> Dataset:
    records = read_jsonl(path)
    specs: dict[str, SceneSpec] = {}
    if specs_path is None:
        candidate = os.path.join(os.path.dirname(os.path.abspath(path)), "specs.json")
        specs_path = candidate if os.path.exists(candidate) else None
    if specs_path is not None:
        with open(specs_path, encoding="utf-8") as f:
            specs = {sid: SceneSpec.from_dict(d) for sid, d in json.load(f).items()}
    return Dataset(records, specs)


@dataclass
class GeneratedDataset:
    det_path: str
    cap_path: str
    dictionary_path: str
    specs_path: str
    n_scenes: int


def generate_dataset(
    spec: SceneSpec,
    count: int,
    seed: int,
    out_dir,
    inline_images: bool = False,
) -> GeneratedDataset:
    """Write paired detection/caption JSONL files plus dictionary and spec registry."""
    spec.validate()
    os.makedirs(out_dir, exist_ok=True)
    det_records, cap_records = [], []
    image_counts: dict[str, int] = {}
    names = spec.category_names()
    for i in range(count):
        scene_seed = seed + i
        det, cap = generate_scene(scene_seed, spec)
        image_field = (
            encode_image_b85(det.image)
            if inline_images
            else {"seed": scene_seed, "spec_id": spec.spec_id}
        )
        det_records.append(sample_record(det, image_field))
        cap_records.append(sample_record(cap, image_field))
        for cid in set(det.category_ids or []):
            image_counts[names[cid]] = image_counts.get(names[cid], 0) + 1

    det_path = os.path.join(out_dir, "det.jsonl")
    cap_path = os.path.join(out_dir, "cap.jsonl")
    dict_path = os.path.join(out_dir, "dictionary.json")
    specs_path = os.path.join(out_dir, "specs.json")
    write_jsonl(det_path, det_records)
    write_jsonl(cap_path, cap_records)
    spec_dictionary(spec, image_counts).save(dict_path)
    with open(specs_path, "w", encoding="utf-8") as f:
        json.dump({spec.spec_id: spec.to_dict()}, f, indent=2, sort_keys=True)
    return GeneratedDataset(det_path, cap_path, dict_path, specs_path, count)


def load_dictionary(path) -> ConceptDictionary:
    return ConceptDictionary.load(path)
