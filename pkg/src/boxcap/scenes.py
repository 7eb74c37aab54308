"""Deterministic synthetic scenes: colored regular polygons on a noisy canvas.

Each scene yields a pair of samples sharing one rendered image: a detection
sample whose concepts follow the "category, definition." template, and a
dense-caption sample with templated region captions. Shape/color combinations
listed in ``held_out`` are rendered and captioned but never annotated in the
detection sample, so they can only be learned through caption supervision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .boxes import box_iou
from .concepts import ConceptDictionary, build_concept
from .samples import Source, UnifiedSample, empty_boxes

SHAPE_SIDES = {"triangle": 3, "square": 4, "pentagon": 5, "hexagon": 6}

COLOR_RGB = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.15, 0.75, 0.20),
    "blue": (0.20, 0.30, 0.85),
    "yellow": (0.90, 0.85, 0.15),
}


class SceneSpecError(ValueError):
    pass


@dataclass
class SceneSpec:
    spec_id: str = "default-v1"
    height: int = 64
    width: int = 64
    shapes: tuple[str, ...] = ("triangle", "square", "pentagon", "hexagon")
    colors: tuple[str, ...] = ("red", "green", "blue", "yellow")
    n_objects: tuple[int, int] = (1, 3)
    size_range: tuple[float, float] = (14.0, 28.0)  # bounding diameter in px
    held_out: tuple[tuple[str, str], ...] = (
        ("triangle", "yellow"),
        ("square", "blue"),
        ("pentagon", "green"),
        ("hexagon", "red"),
    )
    category_weights: dict[str, float] | None = None
    max_overlap_iou: float = 0.2
    rotation_max_deg: float = 25.0
    noise: float = 0.02
    subregion_prob: float = 0.25
    max_place_attempts: int = 40

    def __post_init__(self):
        self.shapes = tuple(self.shapes)
        self.colors = tuple(self.colors)
        self.n_objects = (int(self.n_objects[0]), int(self.n_objects[1]))
        self.size_range = (float(self.size_range[0]), float(self.size_range[1]))
        self.held_out = tuple((s, c) for s, c in self.held_out)

    def validate(self) -> "SceneSpec":
        for s in self.shapes:
            if s not in SHAPE_SIDES:
                raise SceneSpecError(f"unknown shape {s!r}")
        for c in self.colors:
            if c not in COLOR_RGB:
                raise SceneSpecError(f"unknown color {c!r}")
        lo, hi = self.n_objects
        if lo < 0 or hi < lo:
            raise SceneSpecError(f"bad object count range {self.n_objects}")
        smin, smax = self.size_range
        if smin < 4 or smax < smin:
            raise SceneSpecError(f"bad size range {self.size_range}")
        if smax > min(self.height, self.width) - 2:
            raise SceneSpecError("largest object does not fit the canvas")
        for s, c in self.held_out:
            if s not in self.shapes or c not in self.colors:
                raise SceneSpecError(f"held-out combo ({s}, {c}) outside the vocabularies")
        # crude packing bound: reject specs that cannot place the requested
        # objects without exceeding the overlap limit
        if hi * (smin ** 2) / 2.0 > self.height * self.width:
            raise SceneSpecError("more objects requested than placeable without full overlap")
        if self.category_weights:
            known = set(self.category_names())
            for name in self.category_weights:
                if name not in known:
                    raise SceneSpecError(f"weight for unknown category {name!r}")
        return self

    def combos(self) -> list[tuple[str, str]]:
        return [(s, c) for s in self.shapes for c in self.colors]

    def category_names(self) -> list[str]:
        return sorted(category_name(s, c) for s, c in self.combos())

    def category_id(self, shape: str, color: str) -> int:
        return self.category_names().index(category_name(shape, color))

    def base_categories(self) -> list[str]:
        held = {category_name(s, c) for s, c in self.held_out}
        return [n for n in self.category_names() if n not in held]

    def held_out_categories(self) -> list[str]:
        return sorted(category_name(s, c) for s, c in self.held_out)

    def with_all_annotated(self, spec_id: str | None = None) -> "SceneSpec":
        """Same scenes, but nothing held out (used for evaluation ground truth)."""
        d = asdict(self)
        d["held_out"] = ()
        d["spec_id"] = spec_id or (self.spec_id + "-full")
        return SceneSpec(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["held_out"] = [list(hc) for hc in self.held_out]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["held_out"] = tuple(tuple(hc) for hc in d.get("held_out", ()))
        if d.get("n_objects") is not None:
            d["n_objects"] = tuple(d["n_objects"])
        if d.get("size_range") is not None:
            d["size_range"] = tuple(d["size_range"])
        if d.get("shapes") is not None:
            d["shapes"] = tuple(d["shapes"])
        if d.get("colors") is not None:
            d["colors"] = tuple(d["colors"])
        return cls(**d)


def category_name(shape: str, color: str) -> str:
    return f"{color} {shape}"


def category_definition(shape: str, color: str) -> str:
    return f"a {SHAPE_SIDES[shape]}-sided shape colored {color}"


def spec_dictionary(spec: SceneSpec, frequency: dict[str, int] | None = None) -> ConceptDictionary:
    """Dictionary over every (shape, color) combo of the spec."""
    entries = {category_name(s, c): category_definition(s, c) for s, c in spec.combos()}
    return ConceptDictionary(entries, dict(frequency or {}))


def default_category_weights(spec: SceneSpec) -> dict[str, float]:
    """Skewed sampling so training counts populate all frequency tiers.

    Held-out combos get a middling weight (they only ever train the caption
    side); of the base categories the last third are down-weighted into the
    'common' tier, the rest stay 'frequent'.
    """
    weights: dict[str, float] = {}
    base = spec.base_categories()
    n_common = len(base) // 3
    for i, name in enumerate(base):
        weights[name] = 0.2 if i >= len(base) - n_common else 1.0
    for name in spec.held_out_categories():
        weights[name] = 0.5
    return weights


def polygon_vertices(cx: float, cy: float, radius: float, n_sides: int, rotation: float) -> np.ndarray:
    angles = rotation + 2.0 * math.pi * np.arange(n_sides) / n_sides
    return np.stack([cx + radius * np.cos(angles), cy + radius * np.sin(angles)], axis=1)


def rasterize_polygon(vertices: np.ndarray, height: int, width: int) -> np.ndarray:
    """Boolean mask of pixels whose centers lie inside the convex polygon."""
    x1 = max(int(np.floor(vertices[:, 0].min())) - 1, 0)
    x2 = min(int(np.ceil(vertices[:, 0].max())) + 1, width)
    y1 = max(int(np.floor(vertices[:, 1].min())) - 1, 0)
    y2 = min(int(np.ceil(vertices[:, 1].max())) + 1, height)
    mask = np.zeros((height, width), dtype=bool)
    if x2 <= x1 or y2 <= y1:
        return mask
    xs = np.arange(x1, x2) + 0.5
    ys = np.arange(y1, y2) + 0.5
    px, py = np.meshgrid(xs, ys)
    pos = np.ones(px.shape, dtype=bool)
    neg = np.ones(px.shape, dtype=bool)
    n = len(vertices)
    for i in range(n):
        ax, ay = vertices[i]
        bx, by = vertices[(i + 1) % n]
        cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
        pos &= cross >= 0.0
        neg &= cross <= 0.0
    mask[y1:y2, x1:x2] = pos | neg
    return mask


def mask_box(mask: np.ndarray) -> np.ndarray:
    """Tight (x1, y1, x2, y2) box of a boolean mask; x2/y2 are exclusive."""
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        raise ValueError("empty mask has no box")
    return np.array([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1], dtype=np.float64)


@dataclass
class SceneObject:
    shape: str
    color: str
    center: tuple[float, float]
    radius: float
    rotation: float
    mask: np.ndarray
    box: np.ndarray
    category_id: int


@dataclass
class SceneRender:
    image: np.ndarray  # (3, h, w) float32
    objects: list[SceneObject]
    spec: SceneSpec
    seed: int


def render_scene(seed: int, spec: SceneSpec) -> SceneRender:
    spec.validate()
    rng = np.random.default_rng(seed)
    h, w = spec.height, spec.width
    canvas = np.full((h, w, 3), rng.uniform(0.08, 0.25), dtype=np.float64)

    names = spec.category_names()
    weights = spec.category_weights or default_category_weights(spec)
    probs = np.array([weights.get(n, 1.0) for n in names], dtype=np.float64)
    probs /= probs.sum()
    by_name = {category_name(s, c): (s, c) for s, c in spec.combos()}

    n_target = int(rng.integers(spec.n_objects[0], spec.n_objects[1] + 1))
    objects: list[SceneObject] = []
    placed_boxes: list[np.ndarray] = []
    for _ in range(n_target):
        shape, color = by_name[names[int(rng.choice(len(names), p=probs))]]
        size = float(rng.uniform(*spec.size_range))
        radius = size / 2.0
        rotation = math.radians(float(rng.uniform(-spec.rotation_max_deg, spec.rotation_max_deg)))
        placed = None
        for _ in range(spec.max_place_attempts):
            cx = float(rng.uniform(radius + 1.0, w - radius - 1.0))
            cy = float(rng.uniform(radius + 1.0, h - radius - 1.0))
            approx = np.array([cx - radius, cy - radius, cx + radius, cy + radius])
            if placed_boxes and box_iou(approx[None], np.stack(placed_boxes)).max() > spec.max_overlap_iou:
                continue
            placed = (cx, cy)
            break
        if placed is None:
            continue  # deterministic drop when the canvas is too crowded
        verts = polygon_vertices(placed[0], placed[1], radius, SHAPE_SIDES[shape], rotation)
        mask = rasterize_polygon(verts, h, w)
        if mask.sum() < 9:
            continue
        rgb = np.clip(np.array(COLOR_RGB[color]) + rng.uniform(-0.04, 0.04, size=3), 0.05, 0.98)
        canvas[mask] = rgb
        objects.append(
            SceneObject(
                shape=shape,
                color=color,
                center=placed,
                radius=radius,
                rotation=rotation,
                mask=mask,
                box=mask_box(mask),
                category_id=spec.category_id(shape, color),
            )
        )
        placed_boxes.append(np.array([placed[0] - radius, placed[1] - radius,
                                      placed[0] + radius, placed[1] + radius]))

    canvas += rng.uniform(-spec.noise, spec.noise, size=canvas.shape)
    image = np.clip(canvas, 0.0, 1.0).transpose(2, 0, 1).astype(np.float32)
    return SceneRender(image=image, objects=objects, spec=spec, seed=seed)


def _size_word(size: float, spec: SceneSpec) -> str:
    lo, hi = spec.size_range
    if size < lo + (hi - lo) / 3.0:
        return "small"
    if size > lo + 2.0 * (hi - lo) / 3.0:
        return "large"
    return "medium"


def _position_word(box: np.ndarray, spec: SceneSpec) -> str:
    cx = (box[0] + box[2]) / 2.0
    cy = (box[1] + box[3]) / 2.0
    col = "left" if cx < spec.width / 3.0 else ("right" if cx > 2.0 * spec.width / 3.0 else "")
    row = "top" if cy < spec.height / 3.0 else ("bottom" if cy > 2.0 * spec.height / 3.0 else "")
    if row and col:
        return f"{row} {col}"
    return row or col or "center"


def object_caption(obj: SceneObject, spec: SceneSpec) -> str:
    size_word = _size_word(2.0 * obj.radius, spec)
    pos = _position_word(obj.box, spec)
    return f"a {size_word} {obj.color} {obj.shape} near the {pos}."


def _half_box(box: np.ndarray, side: str) -> np.ndarray:
    x1, y1, x2, y2 = box
    if side == "left":
        return np.array([x1, y1, (x1 + x2) / 2.0, y2])
    if side == "right":
        return np.array([(x1 + x2) / 2.0, y1, x2, y2])
    if side == "upper":
        return np.array([x1, y1, x2, (y1 + y2) / 2.0])
    return np.array([x1, (y1 + y2) / 2.0, x2, y2])


def generate_scene(seed: int, spec: SceneSpec) -> tuple[UnifiedSample, UnifiedSample]:
    """Render one scene and emit its (detection, dense_caption) sample pair."""
    render = render_scene(seed, spec)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))  # caption-side draws
    held = set(spec.held_out)

    det_boxes, det_concepts, det_ids = [], [], []
    cap_boxes, cap_concepts = [], []
    for obj in render.objects:
        caption = object_caption(obj, spec)
        cap_boxes.append(obj.box)
        cap_concepts.append(build_concept(None, caption, Source.DENSE_CAPTION))
        if rng.uniform() < spec.subregion_prob:
            side = ["left", "right", "upper", "lower"][int(rng.integers(4))]
            cap_boxes.append(_half_box(obj.box, side))
            cap_concepts.append(
                build_concept(None, f"the {side} half of a {obj.color} {obj.shape}.", Source.DENSE_CAPTION)
            )
        if (obj.shape, obj.color) not in held:
            det_boxes.append(obj.box)
            det_concepts.append(
                build_concept(category_name(obj.shape, obj.color),
                              category_definition(obj.shape, obj.color), Source.DETECTION)
            )
            det_ids.append(obj.category_id)

    det = UnifiedSample(
        image=render.image,
        boxes=np.stack(det_boxes) if det_boxes else empty_boxes(),
        concepts=det_concepts,
        source=Source.DETECTION,
        category_ids=det_ids,
    ).validate()
    cap = UnifiedSample(
        image=render.image,
        boxes=np.stack(cap_boxes) if cap_boxes else empty_boxes(),
        concepts=cap_concepts,
        source=Source.DENSE_CAPTION,
    ).validate()
    return det, cap
