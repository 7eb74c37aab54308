"""Category-list detection and the two-stage unknown-object captioning mode.

Stage one scores every anchor against the given category concepts; stage two
re-ranks anchors class-agnostically, and any surviving proposal whose best
class alignment falls below a threshold is emitted as an unknown object whose
label is a generated caption.
"""

from __future__ import annotations

import numpy as np
import torch

from .boxes import clip_boxes
from .caption import class_agnostic_proposals, generate_caption
from .concepts import ConceptDictionary, build_concept
from .encoders import RegionOutputs
from .metrics import Detection, DetectionKind, nms
from .samples import Source
from .losses import decode_box_deltas


def category_concepts(category_list: list[str], dictionary: ConceptDictionary | None) -> list[str]:
    """Concept strings for a category list, using definitions when available."""
    out = []
    for name in category_list:
        if dictionary is not None and name in dictionary.entries:
            out.append(build_concept(name, dictionary.entries[name], Source.DETECTION))
        else:
            out.append(name if name.endswith(".") else name + ".")
    return out


def decoded_boxes(regions: RegionOutputs) -> np.ndarray:
    """Per-anchor boxes decoded from the deltas, clipped to the image."""
    centers = torch.as_tensor(regions.anchors.centers, dtype=regions.box_deltas.dtype)
    boxes = decode_box_deltas(centers, regions.box_deltas.detach().cpu()).numpy()
    h, w = regions.image_size
    return clip_boxes(boxes, h, w)


@torch.no_grad()
def zero_shot_detect(
    image,
    category_list: list[str],
    model,
    score_threshold: float = 0.3,
    nms_threshold: float = 0.5,
    dictionary: ConceptDictionary | None = None,
    regions: RegionOutputs | None = None,
) -> list[Detection]:
    """Detect against an arbitrary category list.

    Per-anchor class score is sigmoid(alignment) * sigmoid(centerness);
    decoded boxes go through per-class NMS and the score threshold.
    """
    if not category_list:
        raise ValueError("category list must be non-empty")
    model.eval()
    if regions is None:
        images = torch.as_tensor(np.asarray(image), dtype=torch.float32)
        regions = model.encode_image(images)[0]
    concepts = category_concepts(category_list, dictionary)
    texts = model.encode_concepts(concepts)
    scores = torch.sigmoid(model.align(regions.region_features, texts))      # (K, M)
    cen = torch.sigmoid(regions.centerness_logits)                           # (K,)
    class_scores = (scores * cen[:, None]).cpu().numpy()
    boxes = decoded_boxes(regions)

    detections: list[Detection] = []
    for m, name in enumerate(category_list):
        col = class_scores[:, m]
        keep = np.nonzero(col > score_threshold)[0]
        if len(keep) == 0:
            continue
        for i in nms(boxes[keep], col[keep], nms_threshold):
            k = int(keep[i])
            detections.append(Detection(box=boxes[k], score=float(col[k]), label=name))
    detections.sort(key=lambda d: -d.score)
    return detections


@torch.no_grad()
def two_stage_inference(
    image,
    category_list: list[str],
    model,
    tau_unknown: float,
    k: int = 100,
    score_threshold: float = 0.3,
    nms_threshold: float = 0.5,
    dictionary: ConceptDictionary | None = None,
) -> list[Detection]:
    """Known detections plus captioned unknowns.

    Class-agnostic top-k proposals survive NMS; those whose maximum class
    alignment score (over the category list, without centerness) is below
    tau_unknown are captioned and emitted as unknown objects. tau_unknown=0
    reproduces zero_shot_detect exactly.
    """
    model.eval()
    images = torch.as_tensor(np.asarray(image), dtype=torch.float32)
    regions = model.encode_image(images)[0]
    known = zero_shot_detect(
        image, category_list, model,
        score_threshold=score_threshold, nms_threshold=nms_threshold,
        dictionary=dictionary, regions=regions,
    )
    if tau_unknown <= 0.0:
        return known

    concepts = category_concepts(category_list, dictionary)
    texts = model.encode_concepts(concepts)
    class_align = torch.sigmoid(model.align(regions.region_features, texts)).cpu().numpy()
    max_class = class_align.max(axis=1)

    proposals = class_agnostic_proposals(regions, model, k)
    boxes = decoded_boxes(regions)
    cen = torch.sigmoid(regions.centerness_logits).cpu().numpy()
    sel = np.array(proposals.selected, dtype=np.int64)
    survivors = [sel[i] for i in nms(boxes[sel], cen[sel], nms_threshold)]

    out = list(known)
    for a in survivors:
        if max_class[a] >= tau_unknown:
            continue
        caption = generate_caption(regions.region_features[a], model.caption_head, model.vocab)
        out.append(
            Detection(
                box=boxes[a],
                score=float(cen[a]),
                label=caption,
                kind=DetectionKind.UNKNOWN_CAPTION,
            )
        )
    return out
