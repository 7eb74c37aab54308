"""Concept strings, the concept dictionary, and negative-concept sampling.

A concept is the text a region aligns to: "category, definition." for
detection data, the region caption itself for dense-caption data. During
training the per-batch positive concepts are padded with negatives drawn from
the dictionary to enlarge the concept space.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .samples import Source


class InvalidConcept(ValueError):
    pass


def build_concept(category: str | None, definition_or_caption: str, source: Source) -> str:
    """Format one concept string for the given data source."""
    source = Source(source)
    if source == Source.DETECTION:
        if not category or not category.strip():
            raise InvalidConcept("detection concepts need a non-empty category")
        if not definition_or_caption or not definition_or_caption.strip():
            raise InvalidConcept(f"empty definition for category {category!r}")
        definition = definition_or_caption.strip().rstrip(".")
        return f"{category.strip()}, {definition}."
    if not definition_or_caption or not definition_or_caption.strip():
        raise InvalidConcept("empty caption")
    caption = definition_or_caption.strip()
    return caption if caption.endswith(".") else caption + "."


@dataclass
class ConceptDictionary:
    """Category name -> definition, plus training-occurrence counts."""

    entries: dict[str, str]
    frequency: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        for name, definition in self.entries.items():
            if not definition or not definition.strip():
                raise InvalidConcept(f"empty definition for {name!r}")
        for name in self.frequency:
            if name not in self.entries:
                raise ValueError(f"frequency for unknown category {name!r}")

    def __len__(self) -> int:
        return len(self.entries)

    def names(self) -> list[str]:
        return sorted(self.entries)

    def concept(self, name: str) -> str:
        return build_concept(name, self.entries[name], Source.DETECTION)

    def concepts(self) -> list[str]:
        return [self.concept(n) for n in self.names()]

    def tier(self, name: str, rare_max: int = 10, common_max: int = 100) -> str:
        """LVIS-style frequency tier from training-image counts."""
        n = self.frequency.get(name, 0)
        if n <= rare_max:
            return "rare"
        return "common" if n <= common_max else "frequent"

    def restricted(self, min_frequency: int = 1) -> "ConceptDictionary":
        """Sub-dictionary of categories seen at least min_frequency times."""
        keep = {n: d for n, d in self.entries.items() if self.frequency.get(n, 0) >= min_frequency}
        return ConceptDictionary(keep, {n: self.frequency[n] for n in keep})

    def save(self, path) -> None:
        payload = {
            name: {"definition": self.entries[name], "frequency": self.frequency.get(name, 0)}
            for name in self.names()
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, ensure_ascii=False, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "ConceptDictionary":
        with open(path, encoding="utf-8") as f:
            payload = json.load(f)
        entries = {n: v["definition"] for n, v in payload.items()}
        freq = {n: int(v.get("frequency", 0)) for n, v in payload.items()}
        return cls(entries, freq)


@dataclass
class ConceptSet:
    """Ordered concepts: the first n_pos are positives, the rest negatives."""

    concepts: list[str]
    n_pos: int

    def __post_init__(self):
        if len(set(self.concepts)) != len(self.concepts):
            raise ValueError("duplicate concept strings")
        if not 0 <= self.n_pos <= len(self.concepts):
            raise ValueError("n_pos out of range")

    def __len__(self) -> int:
        return len(self.concepts)

    @property
    def positives(self) -> list[str]:
        return self.concepts[: self.n_pos]

    @property
    def negatives(self) -> list[str]:
        return self.concepts[self.n_pos:]

    def index_of(self, concept: str) -> int:
        return self.concepts.index(concept)


def dedupe_keep_order(items: list[str]) -> list[str]:
    seen: set[str] = set()
    out: list[str] = []
    for it in items:
        if it not in seen:
            seen.add(it)
            out.append(it)
    return out


def sample_negatives(
    positives: list[str],
    dictionary: ConceptDictionary,
    target_m: int,
    rng_seed: int,
) -> ConceptSet:
    """Pad the positive concepts with uniformly sampled dictionary negatives.

    Negatives are drawn without replacement from dictionary concepts not
    already among the positives. If the dictionary cannot fill target_m the
    set is simply shorter (the actual M is len of the result).
    """
    pos = dedupe_keep_order(list(positives))
    if target_m < len(pos):
        target_m = len(pos)
    candidates = [c for c in dictionary.concepts() if c not in set(pos)]
    n_neg = min(target_m - len(pos), len(candidates))
    rng = np.random.default_rng(rng_seed)
    picked = rng.choice(len(candidates), size=n_neg, replace=False) if n_neg else []
    return ConceptSet(pos + [candidates[int(i)] for i in picked], n_pos=len(pos))
