"""Training batch construction: raw pairs, LS-augmented pairs and contrastive hard-sample batches."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import (
    ALL_LAYOUTS,
    IDENTITY_LAYOUT,
    IDENTITY_SEMANTIC,
    LayoutParams,
    SemanticParams,
    SemanticRanges,
    aerial_layout_op,
    panorama_layout_op,
    sample_ls_params,
    sample_semantic_params,
    semantic_augment,
)

MODES = ("raw", "ls", "chsg")
# which component is contrasted inside a hard pair, and which is shared
CHSG_VARIANTS = ("L+S", "S-only", "L-only", "sameL+S", "sameS+L")


@dataclass(frozen=True)
class AugmentedPair:
    """One batch element: a source pair plus the exact augmentation applied to it."""

    pair_id: str
    index: int
    layout: LayoutParams = IDENTITY_LAYOUT
    ground_semantic: SemanticParams = IDENTITY_SEMANTIC
    aerial_semantic: SemanticParams = IDENTITY_SEMANTIC

    def to_dict(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "index": self.index,
            "layout": self.layout.to_dict(),
            "ground_semantic": self.ground_semantic.to_dict(),
            "aerial_semantic": self.aerial_semantic.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentedPair":
        return cls(
            d["pair_id"],
            int(d["index"]),
            LayoutParams.from_dict(d["layout"]),
            SemanticParams.from_dict(d["ground_semantic"]),
            SemanticParams.from_dict(d["aerial_semantic"]),
        )


@dataclass
class ContrastiveBatch:
    elements: list[AugmentedPair]
    mode: str
    variant: str | None = None
    batch_size: int = 0

    def __len__(self) -> int:
        return len(self.elements)

    def hard_pairs(self) -> list[tuple[AugmentedPair, AugmentedPair]]:
        """``(gamma_i, delta_i)`` tuples of a chsg batch."""
        if self.mode != "chsg":
            return []
        bs = self.batch_size
        return list(zip(self.elements[:bs], self.elements[bs:]))

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "variant": self.variant,
            "batch_size": self.batch_size,
            "elements": [e.to_dict() for e in self.elements],
        }


def _pick(ids: Sequence[str], bs: int, rng: np.random.Generator) -> list[int]:
    if bs < 1:
        raise ValueError("batch size must be >= 1")
    if len(ids) < bs:
        raise ValueError(f"need at least {bs} pairs, manifest has {len(ids)}")
    return [int(i) for i in rng.choice(len(ids), size=bs, replace=False)]


def _ids(manifest) -> list[str]:
    return [r.pair_id for r in manifest.records] if hasattr(manifest, "records") else list(manifest)


def build_raw_batch(manifest, bs: int, rng: np.random.Generator) -> ContrastiveBatch:
    ids = _ids(manifest)
    return ContrastiveBatch([AugmentedPair(ids[i], i) for i in _pick(ids, bs, rng)], "raw", batch_size=bs)


def build_ls_batch(manifest, bs: int, rng: np.random.Generator, ranges: SemanticRanges = SemanticRanges()) -> ContrastiveBatch:
    ids = _ids(manifest)
    elements = []
    for i in _pick(ids, bs, rng):
        layout, sem_g = sample_ls_params(rng, ranges=ranges)
        elements.append(AugmentedPair(ids[i], i, layout, sem_g, sample_semantic_params(rng, ranges)))
    return ContrastiveBatch(elements, "ls", batch_size=bs)


def _chsg_pair(pid: str, i: int, variant: str, rng: np.random.Generator, ranges: SemanticRanges):
    def sem():
        return sample_semantic_params(rng, ranges), sample_semantic_params(rng, ranges)

    def two_layouts():
        first = ALL_LAYOUTS[int(rng.integers(len(ALL_LAYOUTS)))]
        second, _ = sample_ls_params(rng, avoid=first, ranges=ranges)
        return first, second

    if variant == "L+S":
        lg, ld = two_layouts()
        sg, sd = sem(), sem()
    elif variant == "S-only":
        lg = ld = IDENTITY_LAYOUT
        sg, sd = sem(), sem()
    elif variant == "L-only":
        lg, ld = two_layouts()
        sg = sd = (IDENTITY_SEMANTIC, IDENTITY_SEMANTIC)
    elif variant == "sameL+S":
        lg = ld = ALL_LAYOUTS[int(rng.integers(len(ALL_LAYOUTS)))]
        sg, sd = sem(), sem()
    elif variant == "sameS+L":
        lg, ld = two_layouts()
        sg = sd = sem()
    else:
        raise ValueError(f"unknown chsg variant {variant!r}; expected one of {CHSG_VARIANTS}")
    return AugmentedPair(pid, i, lg, *sg), AugmentedPair(pid, i, ld, *sd)


def build_chsg_batch(
    manifest,
    bs: int,
    rng: np.random.Generator,
    variant: str = "L+S",
    ranges: SemanticRanges = SemanticRanges(),
) -> ContrastiveBatch:
    """``[gamma_1 .. gamma_bs, delta_1 .. delta_bs]``: two augmentations of each of ``bs`` distinct pairs."""
    if variant not in CHSG_VARIANTS:
        raise ValueError(f"unknown chsg variant {variant!r}; expected one of {CHSG_VARIANTS}")
    ids = _ids(manifest)
    gammas, deltas = [], []
    for i in _pick(ids, bs, rng):
        g, d = _chsg_pair(ids[i], i, variant, rng, ranges)
        gammas.append(g)
        deltas.append(d)
    return ContrastiveBatch(gammas + deltas, "chsg", variant=variant, batch_size=bs)


def build_batch(mode: str, manifest, bs: int, rng: np.random.Generator, variant: str = "L+S") -> ContrastiveBatch:
    if mode == "raw":
        return build_raw_batch(manifest, bs, rng)
    if mode == "ls":
        return build_ls_batch(manifest, bs, rng)
    if mode == "chsg":
        return build_chsg_batch(manifest, bs, rng, variant)
    raise ValueError(f"unknown sampler mode {mode!r}; expected one of {MODES}")


def materialize(
    element: AugmentedPair, ground: np.ndarray, aerial: np.ndarray, aerial_polar: bool
) -> tuple[np.ndarray, np.ndarray]:
    """Apply one element's augmentation to a ground panorama and its aerial image.

    When ``aerial_polar`` is set the aerial is already polar-unrolled and the
    layout acts on it as a column permutation, which equals applying it to the
    square image before unrolling.
    """
    g = semantic_augment(panorama_layout_op(ground, element.layout), element.ground_semantic)
    a = panorama_layout_op(aerial, element.layout) if aerial_polar else aerial_layout_op(aerial, element.layout)
    a = semantic_augment(a, element.aerial_semantic)
    return g, a


# ---------------------------------------------------------------------------
# hard-sample evaluation set
# ---------------------------------------------------------------------------

HARD_CATEGORIES = ("original", "unmatched", "flip", "rot90", "rot180", "rot270")
_CATEGORY_LAYOUT = {
    "original": IDENTITY_LAYOUT,
    "unmatched": IDENTITY_LAYOUT,
    "flip": LayoutParams(0, True),
    "rot90": LayoutParams(1, False),
    "rot180": LayoutParams(2, False),
    "rot270": LayoutParams(3, False),
}


@dataclass(frozen=True)
class HardSample:
    category: str
    ground_index: int
    aerial_index: int
    ground_layout: LayoutParams = field(default=IDENTITY_LAYOUT)


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random permutation without fixed points (rejection sampling)."""
    if n < 2:
        raise ValueError("a derangement needs n >= 2")
    while True:
        p = rng.permutation(n)
        if not np.any(p == np.arange(n)):
            return p


def hard_sample_eval_set(manifest, n: int, rng: np.random.Generator) -> list[HardSample]:
    """``6 * n`` samples: the true pair, a random wrong aerial, and four layout-broken ground views."""
    ids = _ids(manifest)
    if n > len(ids):
        raise ValueError(f"requested {n} pairs, manifest has {len(ids)}")
    chosen = [int(i) for i in rng.choice(len(ids), size=n, replace=False)]
    perm = derangement(n, rng)
    out = []
    for cat in HARD_CATEGORIES:
        for k, i in enumerate(chosen):
            a = chosen[perm[k]] if cat == "unmatched" else i
            out.append(HardSample(cat, i, a, _CATEGORY_LAYOUT[cat]))
    return out
