"""Polar resampling and the layout/semantic augmentations shared by both views.

Conventions used throughout the package:

* aerial images are square ``[S, S, C]`` float arrays, row 0 is the north edge
  and column 0 the west edge;
* ground panoramas are ``[H, W, C]`` float arrays, column 0 looks north and
  bearings increase clockwise, so the width is periodic.

Every layout operation on the aerial plane has an exact panorama counterpart,
``panorama_layout_op(polar_transform(a), p) == polar_transform(aerial_layout_op(a, p))``
up to floating point error.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

__all__ = [
    "LayoutParams",
    "SemanticParams",
    "SemanticRanges",
    "ALL_LAYOUTS",
    "IDENTITY_LAYOUT",
    "IDENTITY_SEMANTIC",
    "polar_transform",
    "aerial_layout_op",
    "panorama_layout_op",
    "compose_layouts",
    "semantic_augment",
    "sample_ls_params",
    "sample_semantic_params",
]

_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class LayoutParams:
    """An element of the dihedral group D4: optional mirror, then quarter turns clockwise."""

    rotation_quarters: int = 0
    flip: bool = False

    def __post_init__(self):
        if self.rotation_quarters not in (0, 1, 2, 3):
            raise ValueError(f"rotation_quarters must be in 0..3, got {self.rotation_quarters}")
        object.__setattr__(self, "flip", bool(self.flip))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LayoutParams":
        return cls(int(d["rotation_quarters"]), bool(d["flip"]))


IDENTITY_LAYOUT = LayoutParams(0, False)
ALL_LAYOUTS = tuple(LayoutParams(k, f) for f, k in itertools.product((False, True), range(4)))


@dataclass(frozen=True)
class SemanticParams:
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    blur_sigma: float = 0.0
    grayscale: bool = False
    posterize_bits: int | None = None

    def __post_init__(self):
        for name in ("brightness", "contrast", "saturation"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be a positive finite factor, got {v}")
        if not (math.isfinite(self.blur_sigma) and self.blur_sigma >= 0):
            raise ValueError(f"blur_sigma must be >= 0, got {self.blur_sigma}")
        if self.posterize_bits is not None and self.posterize_bits not in range(3, 9):
            raise ValueError(f"posterize_bits must be in 3..8 or None, got {self.posterize_bits}")

    @property
    def is_identity(self) -> bool:
        return self == IDENTITY_SEMANTIC

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SemanticParams":
        bits = d.get("posterize_bits")
        return cls(
            brightness=float(d["brightness"]),
            contrast=float(d["contrast"]),
            saturation=float(d["saturation"]),
            blur_sigma=float(d["blur_sigma"]),
            grayscale=bool(d["grayscale"]),
            posterize_bits=None if bits is None else int(bits),
        )


IDENTITY_SEMANTIC = SemanticParams()


@dataclass(frozen=True)
class SemanticRanges:
    """Sampling ranges for the photometric augmentation."""

    factor_low: float = 0.7
    factor_high: float = 1.3
    blur_prob: float = 0.3
    blur_sigma_low: float = 0.3
    blur_sigma_high: float = 1.5
    grayscale_prob: float = 0.1
    posterize_prob: float = 0.1
    posterize_bits_low: int = 3
    posterize_bits_high: int = 8


# ---------------------------------------------------------------------------
# polar resampling
# ---------------------------------------------------------------------------


def _polar_grid(size: int, out_h: int, out_w: int) -> tuple[np.ndarray, np.ndarray]:
    """Row/column sample coordinates (in pixel-index space) for every output pixel.

    The aerial centre is ``S/2`` in continuous coordinates, i.e. ``(S - 1)/2``
    in index space. Using the true pixel-grid centre keeps the sample lattice
    invariant under the D4 symmetries of the pixel grid, which is what makes
    quarter turns map onto exact column rolls.
    """
    i = np.arange(out_h, dtype=np.float64)[:, None]
    j = np.arange(out_w, dtype=np.float64)[None, :]
    theta = 2.0 * np.pi * j / out_w
    rho = (size / 2.0) * (out_h - i) / out_h
    c = (size - 1) / 2.0
    cols = c + rho * np.sin(theta)
    rows = c - rho * np.cos(theta)
    return rows, cols


def _bilinear(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    rows = np.clip(rows, 0.0, h - 1.0)
    cols = np.clip(cols, 0.0, w - 1.0)
    r0 = np.floor(rows).astype(np.intp)
    c0 = np.floor(cols).astype(np.intp)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (rows - r0)[..., None]
    fc = (cols - c0)[..., None]
    top = img[r0, c0] * (1.0 - fc) + img[r0, c1] * fc
    bottom = img[r1, c0] * (1.0 - fc) + img[r1, c1] * fc
    return top * (1.0 - fr) + bottom * fr


def polar_transform(aerial: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Unroll a square aerial image into a panorama-shaped ``[out_h, out_w, C]`` image.

    Column ``j`` holds bearing ``2*pi*j/out_w`` clockwise from north; row 0 is
    the outermost ring and the last row lies next to the centre. Samples are
    bilinear, coordinates outside the image clamp to the edge.
    """
    a = np.asarray(aerial)
    squeeze = a.ndim == 2
    if squeeze:
        a = a[..., None]
    if a.ndim != 3 or a.shape[0] != a.shape[1]:
        raise ValueError(f"aerial image must be square [S, S, C], got shape {np.shape(aerial)}")
    if out_h < 2 or out_w < 2:
        raise ValueError(f"output size must be at least 2x2, got {out_h}x{out_w}")
    rows, cols = _polar_grid(a.shape[0], out_h, out_w)
    out = _bilinear(a.astype(np.float64, copy=False), rows, cols)
    out = out.astype(a.dtype if np.issubdtype(a.dtype, np.floating) else np.float64)
    return out[..., 0] if squeeze else out


# ---------------------------------------------------------------------------
# layout simulation
# ---------------------------------------------------------------------------


def aerial_layout_op(aerial: np.ndarray, p: LayoutParams) -> np.ndarray:
    """Mirror west/east (if ``p.flip``) then rotate clockwise by ``p.rotation_quarters`` quarters."""
    out = aerial[:, ::-1] if p.flip else aerial
    # np.rot90 turns counter-clockwise for positive k
    return np.ascontiguousarray(np.rot90(out, -p.rotation_quarters, axes=(0, 1)))


def panorama_layout_op(pano: np.ndarray, p: LayoutParams, strict: bool = True) -> np.ndarray:
    """Panorama counterpart of :func:`aerial_layout_op`.

    A west/east mirror negates every bearing, so column ``j`` moves to
    ``(-j) mod W``. A clockwise quarter turn of the aerial moves content from
    bearing ``theta`` to ``theta + 90deg``, i.e. a roll by ``+W/4`` columns.
    """
    w = pano.shape[1]
    out = pano[:, (-np.arange(w)) % w] if p.flip else pano
    if p.rotation_quarters:
        if w % 4:
            if strict:
                raise ValueError(f"panorama width {w} is not divisible by 4")
            warnings.warn(f"panorama width {w} not divisible by 4; rounding the roll", stacklevel=2)
            shift = int(round(p.rotation_quarters * w / 4))
        else:
            shift = p.rotation_quarters * (w // 4)
        out = np.roll(out, shift, axis=1)
    return np.ascontiguousarray(out)


def compose_layouts(first: LayoutParams, second: LayoutParams) -> LayoutParams:
    """Group product: applying ``first`` then ``second`` equals applying the result once."""
    # R^k2 F^f2 R^k1 F^f1 = R^(k2 + (-1)^f2 k1) F^(f1 xor f2)
    k1 = -first.rotation_quarters if second.flip else first.rotation_quarters
    return LayoutParams((second.rotation_quarters + k1) % 4, first.flip != second.flip)


# ---------------------------------------------------------------------------
# semantic augmentation
# ---------------------------------------------------------------------------


def _gray(img: np.ndarray) -> np.ndarray:
    return img[..., :3] @ _LUMA.astype(img.dtype)


def semantic_augment(img: np.ndarray, s: SemanticParams) -> np.ndarray:
    """Photometric jitter: brightness, contrast, saturation, blur, grayscale, posterize, in that order."""
    x = np.asarray(img)
    if s.is_identity:
        return x.copy()
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    x = x.astype(dtype, copy=True)
    if s.brightness != 1.0:
        x = np.clip(x * s.brightness, 0.0, 1.0)
    if s.contrast != 1.0:
        mean = _gray(x).mean()
        x = np.clip(s.contrast * x + (1.0 - s.contrast) * mean, 0.0, 1.0)
    if s.saturation != 1.0:
        g = _gray(x)[..., None]
        x = np.clip(s.saturation * x + (1.0 - s.saturation) * g, 0.0, 1.0)
    if s.blur_sigma > 0:
        x = ndimage.gaussian_filter(x, sigma=(s.blur_sigma, s.blur_sigma, 0), mode="nearest")
    if s.grayscale:
        x = np.repeat(_gray(x)[..., None], x.shape[-1], axis=-1)
    if s.posterize_bits is not None:
        levels = 2**s.posterize_bits - 1
        x = np.round(x * levels) / levels
    return np.clip(x, 0.0, 1.0).astype(dtype, copy=False)


def sample_semantic_params(rng: np.random.Generator, ranges: SemanticRanges = SemanticRanges()) -> SemanticParams:
    lo, hi = ranges.factor_low, ranges.factor_high
    brightness, contrast, saturation = (float(v) for v in rng.uniform(lo, hi, size=3))
    blur = float(rng.uniform(ranges.blur_sigma_low, ranges.blur_sigma_high)) if rng.random() < ranges.blur_prob else 0.0
    grayscale = bool(rng.random() < ranges.grayscale_prob)
    bits = None
    if rng.random() < ranges.posterize_prob:
        bits = int(rng.integers(ranges.posterize_bits_low, ranges.posterize_bits_high + 1))
    return SemanticParams(brightness, contrast, saturation, blur, grayscale, bits)


def sample_ls_params(
    rng: np.random.Generator,
    avoid: LayoutParams | None = None,
    ranges: SemanticRanges = SemanticRanges(),
) -> tuple[LayoutParams, SemanticParams]:
    """Draw a layout uniformly from D4 (minus ``avoid``) and one set of semantic params."""
    choices = [p for p in ALL_LAYOUTS if p != avoid]
    layout = choices[int(rng.integers(len(choices)))]
    return layout, sample_semantic_params(rng, ranges)
