"""Pair manifests, image loading, pixel-hash deduplication and a synthetic paired dataset."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Union

import numpy as np
from PIL import Image

from .geometry import polar_transform

log = logging.getLogger(__name__)

ImageRef = Union[str, Path, np.ndarray]

GROUND_SIZE = (128, 672)
AERIAL_SIZE = (256, 256)
LAYOUTS = ("cvusa-csv", "directory-pairs", "vigor-json")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class ManifestError(ValueError):
    """Malformed or inconsistent manifest. ``path`` and ``line`` locate the problem when known."""

    def __init__(self, message: str, path: str | Path | None = None, line: int | None = None):
        self.path = None if path is None else str(path)
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)


class ImageReadError(OSError):
    def __init__(self, path, cause: Exception):
        self.path = str(path)
        super().__init__(f"cannot read image {path}: {cause}")


@dataclass(frozen=True)
class PairRecord:
    pair_id: str
    ground: ImageRef
    aerial: ImageRef


@dataclass
class PairManifest:
    """Matched ground/aerial pairs, plus optional many-to-many reference sets.

    For one-to-one datasets ``references`` is ``None``: the reference set is
    the aerial image of every record and each query's only positive is its
    own pair. VIGOR-style data lists every aerial in ``references`` and
    per-query ``positives`` / ``semi_positives`` by reference id; the record's
    ``aerial`` is then the primary positive, used for training pairs.
    """

    records: list[PairRecord]
    split: str = "train"
    references: list[tuple[str, ImageRef]] | None = None
    positives: dict[str, list[str]] | None = None
    semi_positives: dict[str, list[str]] | None = None

    def __post_init__(self):
        ids = [r.pair_id for r in self.records]
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise ManifestError(f"duplicate pair id {dup!r}")
        if self.references is not None:
            ref_ids = [rid for rid, _ in self.references]
            if len(set(ref_ids)) != len(ref_ids):
                raise ManifestError("duplicate reference id")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def ids(self) -> list[str]:
        return [r.pair_id for r in self.records]

    @property
    def one_to_one(self) -> bool:
        return self.references is None

    @property
    def M(self) -> int:
        return len(self.records)

    @property
    def N(self) -> int:
        return len(self.records) if self.references is None else len(self.references)

    def reference_list(self) -> list[tuple[str, ImageRef]]:
        if self.references is None:
            return [(r.pair_id, r.aerial) for r in self.records]
        return list(self.references)

    def positive_sets(self) -> list[set[str]]:
        if self.positives is None:
            return [{r.pair_id} for r in self.records]
        return [set(self.positives[r.pair_id]) for r in self.records]

    def semi_positive_sets(self) -> list[set[str]]:
        if self.semi_positives is None:
            return [set() for _ in self.records]
        return [set(self.semi_positives.get(r.pair_id, ())) for r in self.records]

    def subset(self, indices: Iterable[int]) -> "PairManifest":
        records = [self.records[i] for i in indices]
        keep = {r.pair_id for r in records}
        pos = None if self.positives is None else {k: v for k, v in self.positives.items() if k in keep}
        semi = None if self.semi_positives is None else {k: v for k, v in self.semi_positives.items() if k in keep}
        return replace(self, records=records, positives=pos, semi_positives=semi)


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------


def read_pixels(path: str | Path) -> np.ndarray:
    """Decoded uint8 RGB pixels at native resolution."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as e:
        raise ImageReadError(path, e) from e


def to_float(pixels: np.ndarray) -> np.ndarray:
    if pixels.dtype == np.uint8:
        return pixels.astype(np.float32) / 255.0
    return np.asarray(pixels, dtype=np.float32)


def resize(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a ``[H, W, 3]`` float image to ``size = (h, w)``."""
    h, w = size
    if img.shape[:2] == (h, w):
        return img
    chans = [
        np.asarray(Image.fromarray(img[..., c].astype(np.float32), mode="F").resize((w, h), Image.BILINEAR))
        for c in range(img.shape[2])
    ]
    return np.clip(np.stack(chans, axis=-1), 0.0, 1.0)


def load_image(ref: ImageRef, size: tuple[int, int] | None = None) -> np.ndarray:
    """Float32 ``[H, W, 3]`` image in [0, 1], resized when ``size`` is given."""
    img = to_float(ref) if isinstance(ref, np.ndarray) else to_float(read_pixels(ref))
    return resize(img, size) if size is not None else img


def save_image(img: np.ndarray, path: str | Path, quality: int | None = None) -> None:
    arr = img if img.dtype == np.uint8 else np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    kwargs = {} if quality is None else {"quality": quality}
    Image.fromarray(arr).save(path, **kwargs)


class PairImages:
    """Resized (and optionally polar-unrolled) model inputs for a manifest, cached per index."""

    def __init__(
        self,
        manifest: PairManifest,
        ground_size: tuple[int, int] = GROUND_SIZE,
        aerial_size: tuple[int, int] = AERIAL_SIZE,
        polar: bool = False,
        cache_size: int | None = 4096,
    ):
        self.manifest = manifest
        self.ground_size = tuple(ground_size)
        self.aerial_size = tuple(aerial_size)
        self.polar = polar
        self._refs = manifest.reference_list()
        self._ref_index = {rid: j for j, (rid, _) in enumerate(self._refs)}
        self.ground = lru_cache(maxsize=cache_size)(self._ground)
        self.aerial = lru_cache(maxsize=cache_size)(self._aerial)
        self.reference = lru_cache(maxsize=cache_size)(self._reference)

    def __len__(self) -> int:
        return len(self.manifest)

    @property
    def n_references(self) -> int:
        return len(self._refs)

    def _prepare_aerial(self, ref: ImageRef) -> np.ndarray:
        a = load_image(ref, self.aerial_size)
        if self.polar:
            a = polar_transform(a, *self.ground_size).astype(np.float32)
        return a

    def _ground(self, i: int) -> np.ndarray:
        return load_image(self.manifest.records[i].ground, self.ground_size)

    def _aerial(self, i: int) -> np.ndarray:
        return self._prepare_aerial(self.manifest.records[i].aerial)

    def _reference(self, j: int) -> np.ndarray:
        return self._prepare_aerial(self._refs[j][1])

    def reference_index(self, ref_id: str) -> int:
        return self._ref_index[ref_id]


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def _resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


def _check_files(manifest: PairManifest, source: Path) -> None:
    refs = [(r.pair_id, r.ground) for r in manifest.records] + [(r.pair_id, r.aerial) for r in manifest.records]
    if manifest.references is not None:
        refs += list(manifest.references)
    for ident, ref in refs:
        if not isinstance(ref, np.ndarray) and not Path(ref).is_file():
            raise ManifestError(f"missing image {ref} (id {ident})", source)


def _load_csv(path: Path) -> PairManifest:
    records = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if lineno == 1 and row[0].strip().lower() in ("ground", "ground_path"):
                continue
            if len(row) not in (2, 3):
                raise ManifestError(f"expected 'ground_path,aerial_path[,pair_id]', got {len(row)} fields", path, lineno)
            g, a = row[0].strip(), row[1].strip()
            if not g or not a:
                raise ManifestError("empty path", path, lineno)
            pid = row[2].strip() if len(row) == 3 and row[2].strip() else Path(g).stem
            records.append(PairRecord(pid, _resolve(path.parent, g), _resolve(path.parent, a)))
    if not records:
        raise ManifestError("manifest is empty", path)
    return PairManifest(records)


def _load_directory(root: Path) -> PairManifest:
    gdir, adir = root / "ground", root / "aerial"
    if not gdir.is_dir() or not adir.is_dir():
        raise ManifestError("expected 'ground/' and 'aerial/' subdirectories", root)

    def index(d: Path) -> dict[str, Path]:
        return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}

    g, a = index(gdir), index(adir)
    unpaired = sorted(set(g) ^ set(a))
    if unpaired:
        raise ManifestError(f"unpaired files: {unpaired[:5]}", root)
    if not g:
        raise ManifestError("no images found", root)
    return PairManifest([PairRecord(k, g[k], a[k]) for k in sorted(g)])


def _load_vigor(path: Path) -> PairManifest:
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"invalid JSON: {e}", path, e.lineno) from e
    if not isinstance(doc, dict) or "queries" not in doc or "aerial" not in doc:
        raise ManifestError("expected an object with 'aerial' and 'queries'", path)
    aerial = OrderedDict((str(k), _resolve(path.parent, v)) for k, v in doc["aerial"].items())
    records, pos, semi = [], {}, {}
    for qid, q in doc["queries"].items():
        try:
            positives = [str(x) for x in q["positives"]]
            semis = [str(x) for x in q.get("semi_positives", [])]
            ground = _resolve(path.parent, q["ground"])
        except (KeyError, TypeError) as e:
            raise ManifestError(f"query {qid!r} is malformed: {e}", path) from e
        if not positives:
            raise ManifestError(f"query {qid!r} has no positives", path)
        unknown = [x for x in positives + semis if x not in aerial]
        if unknown:
            raise ManifestError(f"query {qid!r} references unknown aerial ids {unknown}", path)
        records.append(PairRecord(str(qid), ground, aerial[positives[0]]))
        pos[str(qid)] = positives
        semi[str(qid)] = semis
    if not records:
        raise ManifestError("manifest is empty", path)
    return PairManifest(
        records,
        split=doc.get("split", "train"),
        references=list(aerial.items()),
        positives=pos,
        semi_positives=semi,
    )


def load_manifest(path: str | Path, layout: str = "cvusa-csv", split: str | None = None, check_files: bool = True) -> PairManifest:
    path = Path(path)
    if layout not in LAYOUTS:
        raise ManifestError(f"unknown layout {layout!r}; expected one of {LAYOUTS}")
    if not path.exists():
        raise ManifestError("no such file or directory", path)
    if layout == "cvusa-csv":
        m = _load_csv(path)
    elif layout == "directory-pairs":
        m = _load_directory(path)
    else:
        m = _load_vigor(path)
    if split is not None:
        m.split = split
    if check_files:
        _check_files(m, path)
    return m


def save_manifest(manifest: PairManifest, path: str | Path, images_dir: str | Path | None = None) -> None:
    """Write ``manifest`` as CSV (one-to-one, ``.csv``) or VIGOR-style JSON (anything else).

    In-memory images are written under ``images_dir`` first (default: next to
    the manifest).
    """
    path = Path(path)
    base = path.parent
    base.mkdir(parents=True, exist_ok=True)
    images_dir = Path(images_dir) if images_dir is not None else base

    def ref_str(ref: ImageRef, kind: str, ident: str) -> str:
        if isinstance(ref, np.ndarray):
            out = images_dir / kind / f"{ident}.png"
            out.parent.mkdir(parents=True, exist_ok=True)
            save_image(ref, out)
            ref = out
        ref = Path(ref)
        try:
            return str(ref.resolve().relative_to(base.resolve()))
        except ValueError:
            return str(ref.resolve())

    if path.suffix.lower() == ".csv":
        if not manifest.one_to_one:
            raise ManifestError("CSV manifests cannot hold many-to-many references", path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["ground_path", "aerial_path", "pair_id"])
            for r in manifest.records:
                w.writerow([ref_str(r.ground, "ground", r.pair_id), ref_str(r.aerial, "aerial", r.pair_id), r.pair_id])
        return

    refs = manifest.reference_list()
    aerial = {rid: ref_str(ref, "aerial", rid) for rid, ref in refs}
    positives = manifest.positive_sets() if manifest.positives is None else None
    doc = {
        "split": manifest.split,
        "aerial": aerial,
        "queries": {
            r.pair_id: {
                "ground": ref_str(r.ground, "ground", r.pair_id),
                "positives": list(manifest.positives[r.pair_id]) if positives is None else sorted(positives[i]),
                "semi_positives": list((manifest.semi_positives or {}).get(r.pair_id, [])),
            }
            for i, r in enumerate(manifest.records)
        },
    }
    path.write_text(json.dumps(doc, indent=1))


# ---------------------------------------------------------------------------
# deduplication
# ---------------------------------------------------------------------------


def pixel_md5(ref: ImageRef) -> str:
    """md5 over decoded pixel values (not file bytes), prefixed by the array shape."""
    px = ref if isinstance(ref, np.ndarray) else read_pixels(ref)
    px = np.ascontiguousarray(px)
    h = hashlib.md5(f"{px.shape}|{px.dtype.str}|".encode())
    h.update(px.tobytes())
    return h.hexdigest()


@dataclass
class DedupReport:
    groups: list[list[str]] = field(default_factory=list)
    n_pairs: int = 0
    split: str = "train"

    @property
    def n_removed(self) -> int:
        """Pairs that removal keeps out (all but one per group)."""
        return sum(len(g) - 1 for g in self.groups)

    @property
    def empty(self) -> bool:
        return not self.groups

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "n_pairs": self.n_pairs,
            "n_groups": len(self.groups),
            "n_removed": self.n_removed,
            "groups": self.groups,
        }


def dedup(manifest: PairManifest) -> DedupReport:
    """Group pairs whose ground AND aerial pixels are bitwise identical."""
    buckets: dict[tuple[str, str], list[str]] = OrderedDict()
    for r in manifest.records:
        key = (pixel_md5(r.ground), pixel_md5(r.aerial))
        buckets.setdefault(key, []).append(r.pair_id)
    groups = [ids for ids in buckets.values() if len(ids) > 1]
    return DedupReport(groups=groups, n_pairs=len(manifest), split=manifest.split)


def remove_duplicates(manifest: PairManifest, report: DedupReport, force: bool = False) -> PairManifest:
    """Keep the first member of each duplicate group. Test splits are left untouched unless ``force``."""
    if manifest.split != "train" and not force:
        log.info("keeping %d duplicate groups in %s split", len(report.groups), manifest.split)
        return manifest
    drop = {pid for g in report.groups for pid in g[1:]}
    return manifest.subset(i for i, r in enumerate(manifest.records) if r.pair_id not in drop)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    n_pairs: int = 64
    aerial_size: int = 256
    ground_size: tuple[int, int] = GROUND_SIZE
    shapes: tuple[int, int] = (6, 12)
    noise: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if self.n_pairs < 1:
            raise ValueError("n_pairs must be >= 1")
        if self.aerial_size < 8:
            raise ValueError("aerial_size must be >= 8")
        if self.ground_size[1] % 4 or min(self.ground_size) < 2:
            raise ValueError(f"ground width must be divisible by 4, got {self.ground_size}")
        if not (1 <= self.shapes[0] <= self.shapes[1]):
            raise ValueError(f"invalid shape-count range {self.shapes}")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")


def _texture(rng: np.random.Generator, s: int) -> np.ndarray:
    """Smooth coloured background: a base colour plus upsampled low-frequency noise."""
    base = rng.uniform(0.2, 0.8, size=3)
    coarse = rng.normal(0.0, 0.12, size=(8, 8, 3)).astype(np.float32)
    fine = np.stack(
        [np.asarray(Image.fromarray(coarse[..., c], mode="F").resize((s, s), Image.BICUBIC)) for c in range(3)],
        axis=-1,
    )
    grain = rng.normal(0.0, 0.03, size=(s, s, 1))
    return base + fine + grain


def _draw_shape(img: np.ndarray, rng: np.random.Generator) -> None:
    s = img.shape[0]
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    color = rng.uniform(0.0, 1.0, size=3)
    kind = rng.integers(3)
    if kind == 0:  # disc
        cy, cx = rng.uniform(0, s, size=2)
        rad = rng.uniform(0.04, 0.14) * s
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= rad**2
    elif kind == 1:  # axis-aligned block
        h, w = rng.uniform(0.06, 0.3, size=2) * s
        y0, x0 = rng.uniform(0, s - h), rng.uniform(0, s - w)
        mask = (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
    else:  # road-like thick segment
        p0, p1 = rng.uniform(0, s, size=(2, 2))
        d = p1 - p0
        t = np.clip(((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / max(float(d @ d), 1e-9), 0, 1)
        dist2 = (yy - p0[0] - t * d[0]) ** 2 + (xx - p0[1] - t * d[1]) ** 2
        mask = dist2 <= (rng.uniform(0.01, 0.03) * s) ** 2
    img[mask] = color


def generate_synthetic(spec: SyntheticSpec) -> PairManifest:
    """Random aerial scenes; each ground view is the polar unrolling of its aerial plus noise."""
    rng = np.random.default_rng(spec.seed)
    records = []
    width = len(str(spec.n_pairs - 1))
    for i in range(spec.n_pairs):
        aerial = _texture(rng, spec.aerial_size)
        for _ in range(int(rng.integers(spec.shapes[0], spec.shapes[1] + 1))):
            _draw_shape(aerial, rng)
        aerial = np.clip(aerial, 0.0, 1.0).astype(np.float32)
        ground = polar_transform(aerial, *spec.ground_size)
        if spec.noise > 0:
            ground = ground + rng.normal(0.0, spec.noise, size=ground.shape)
        ground = np.clip(ground, 0.0, 1.0).astype(np.float32)
        records.append(PairRecord(f"syn{i:0{width}d}", ground, aerial))
    return PairManifest(records)
