"""The unified per-image training record shared by both data sources.

A sample couples one image with N region boxes and N concept strings. For
detection-style data a concept is a "category, definition." sentence and the
sample additionally carries integer category ids; for dense-caption data a
concept is the region caption itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .boxes import boxes_valid


class Source(str, Enum):
    DETECTION = "detection"
    DENSE_CAPTION = "dense_caption"


@dataclass
class UnifiedSample:
    image: np.ndarray  # (3, h, w) float32 in [0, 1]
    boxes: np.ndarray  # (N, 4) float64 pixel coords
    concepts: list[str]
    source: Source
    category_ids: list[int] | None = None

    @property
    def height(self) -> int:
        return int(self.image.shape[1])

    @property
    def width(self) -> int:
        return int(self.image.shape[2])

    @property
    def num_regions(self) -> int:
        return len(self.concepts)

    def validate(self) -> "UnifiedSample":
        """Raise ValueError if any structural invariant is broken."""
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"image must be (3, h, w), got {self.image.shape}")
        if float(self.image.min(initial=0.0)) < 0.0 or float(self.image.max(initial=0.0)) > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        if len(boxes) != len(self.concepts):
            raise ValueError(
                f"boxes ({len(boxes)}) and concepts ({len(self.concepts)}) must have equal length"
            )
        if not boxes_valid(boxes, self.height, self.width):
            raise ValueError("box out of bounds or degenerate")
        if self.source == Source.DETECTION:
            if self.category_ids is None or len(self.category_ids) != len(boxes):
                raise ValueError("detection samples need one category id per box")
            for c in self.concepts:
                if ", " not in c or not c.endswith("."):
                    raise ValueError(f"detection concept not in 'category, definition.' form: {c!r}")
        elif self.category_ids is not None:
            raise ValueError("category_ids are only valid on detection samples")
        return self


def empty_boxes() -> np.ndarray:
    return np.zeros((0, 4), dtype=np.float64)
