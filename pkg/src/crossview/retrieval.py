"""Embedding extraction, exact L2 retrieval and recall metrics."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .sampling import HARD_CATEGORIES, HardSample
from .geometry import panorama_layout_op


@dataclass
class EmbeddingMatrix:
    vectors: np.ndarray
    ids: list[str]
    view: str

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise ValueError(f"{self.vectors.shape[0]} rows but {len(self.ids)} ids")
        if not np.all(np.isfinite(self.vectors)):
            bad = [self.ids[i] for i in np.flatnonzero(~np.isfinite(self.vectors).all(axis=1))[:5]]
            raise ValueError(f"non-finite embeddings for {bad}")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def save(self, path: str | Path) -> None:
        """Raw little-endian float32 rows plus a ``.json`` sidecar."""
        path = Path(path)
        path.write_bytes(self.vectors.astype("<f4").tobytes())
        meta = {"n": len(self.ids), "d": self.dim, "ids": self.ids, "view": self.view}
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta))

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingMatrix":
        path = Path(path)
        meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        data = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(meta["n"], meta["d"])
        return cls(data.astype(np.float32), list(meta["ids"]), meta["view"])


@dataclass
class RetrievalResult:
    indices: np.ndarray  # [Q, k] reference row indices, best first
    distances: np.ndarray  # [Q, k] ascending
    ref_ids: list[str]

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    def ids(self, q: int) -> list[str]:
        return [self.ref_ids[j] for j in self.indices[q]]


def _distances(q: np.ndarray, refs: np.ndarray) -> np.ndarray:
    diff = q[:, None, :].astype(np.float64) - refs[None, :, :].astype(np.float64)
    return np.sqrt(np.einsum("qnd,qnd->qn", diff, diff))


def knn(query: EmbeddingMatrix, refs: EmbeddingMatrix, k: int, chunk: int = 64) -> RetrievalResult:
    """Exact full-scan top-``k`` by L2 distance; equal distances rank the lower reference index first."""
    if query.dim != refs.dim:
        raise ValueError(f"embedding dims differ: query {query.dim} vs reference {refs.dim}")
    n = len(refs.ids)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must be in [1, {n}]")
    chunk = max(1, min(chunk, max(1, 2**24 // max(1, n * refs.dim))))
    idx = np.empty((len(query.ids), k), dtype=np.int64)
    dist = np.empty((len(query.ids), k), dtype=np.float64)
    for s in range(0, len(query.ids), chunk):
        d = _distances(query.vectors[s : s + chunk], refs.vectors)
        order = np.argsort(d, axis=1, kind="stable")[:, :k]
        idx[s : s + chunk] = order
        dist[s : s + chunk] = np.take_along_axis(d, order, axis=1)
    return RetrievalResult(idx, dist, list(refs.ids))


def recall_at_k(result: RetrievalResult, positives: Sequence[set[str]], k: int) -> float:
    """Fraction of queries with at least one positive among the first ``k`` retrieved references."""
    if k > result.k:
        raise ValueError(f"result only holds the top {result.k}")
    if len(positives) != len(result.indices):
        raise ValueError("one positive set per query is required")
    hits = 0
    for q, pos in enumerate(positives):
        if not pos:
            raise ValueError(f"query {q} has an empty positive set")
        hits += any(result.ref_ids[j] in pos for j in result.indices[q, :k])
    return hits / len(positives)


def hit_rate(result: RetrievalResult, positives: Sequence[set[str]], semi_positives: Sequence[set[str]]) -> float:
    """Fraction of queries whose top-1 reference is a positive or a semi-positive."""
    hits = sum(
        result.ref_ids[result.indices[q, 0]] in (pos | semi)
        for q, (pos, semi) in enumerate(zip(positives, semi_positives))
    )
    return hits / len(positives)


def percent_k(n_refs: int) -> int:
    return max(1, math.ceil(n_refs / 100))


@dataclass
class MetricsReport:
    r_at: dict[int, float]
    r_at_percent: float
    n_queries: int
    n_refs: int
    hit_rate: float | None = None
    config_hash: str | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "r_at": {str(k): v for k, v in sorted(self.r_at.items())},
            "r_at_percent": self.r_at_percent,
            "k_percent": percent_k(self.n_refs),
            "n_queries": self.n_queries,
            "n_refs": self.n_refs,
            "config_hash": self.config_hash,
        }
        if self.hit_rate is not None:
            d["hit_rate"] = self.hit_rate
        d.update(self.extra)
        return d


def compute_metrics(
    query: EmbeddingMatrix,
    refs: EmbeddingMatrix,
    positives: Sequence[set[str]],
    semi_positives: Sequence[set[str]] | None = None,
    ks: Sequence[int] = (1, 5, 10),
    config_hash: str | None = None,
) -> MetricsReport:
    n = len(refs.ids)
    kp = percent_k(n)
    kmax = min(n, max(max(ks), kp))
    res = knn(query, refs, kmax)
    r_at = {k: recall_at_k(res, positives, min(k, n)) for k in ks}
    hr = None
    if semi_positives is not None and any(semi_positives):
        hr = hit_rate(res, positives, semi_positives)
    return MetricsReport(r_at, recall_at_k(res, positives, kp), len(query.ids), n, hr, config_hash)


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# model-dependent helpers
# ---------------------------------------------------------------------------


def _to_tensor(images: list[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(images).astype(np.float32)).permute(0, 3, 1, 2).contiguous()


@torch.no_grad()
def embed_images(model, images: Sequence[np.ndarray], view: str, batch_size: int = 32) -> np.ndarray:
    was_training = model.training
    model.eval()
    try:
        out = [
            model(_to_tensor(list(images[s : s + batch_size])), view)[0].numpy()
            for s in range(0, len(images), batch_size)
        ]
    finally:
        model.train(was_training)
    return np.concatenate(out).astype(np.float32) if out else np.zeros((0, model.cfg.embedding_dim), np.float32)


def embed_dataset(model, images, view: str, batch_size: int = 32) -> EmbeddingMatrix:
    """Embed every ground query (``view="ground"``) or every reference aerial of a :class:`PairImages`."""
    manifest = images.manifest
    if view == "ground":
        ids = manifest.ids
        get, n = images.ground, len(manifest)
    elif view == "aerial":
        ids = [rid for rid, _ in manifest.reference_list()]
        get, n = images.reference, images.n_references
    else:
        raise ValueError(f"unknown view {view!r}")
    chunks = []
    for s in range(0, n, batch_size):
        chunks.append(embed_images(model, [get(i) for i in range(s, min(n, s + batch_size))], view, batch_size))
    vectors = np.concatenate(chunks) if chunks else np.zeros((0, model.cfg.embedding_dim), np.float32)
    return EmbeddingMatrix(vectors, ids, view)


def evaluate(model, images, config_hash: str | None = None) -> MetricsReport:
    g = embed_dataset(model, images, "ground")
    a = embed_dataset(model, images, "aerial")
    m = images.manifest
    semi = None if m.one_to_one else m.semi_positive_sets()
    return compute_metrics(g, a, m.positive_sets(), semi, config_hash=config_hash)


def distance_distribution(model, images, samples: Sequence[HardSample], batch_size: int = 32) -> dict[str, list[float]]:
    """Embedding distance ``|f_g - f_a|`` for every hard sample, grouped by category."""
    grounds = [panorama_layout_op(images.ground(s.ground_index), s.ground_layout) for s in samples]
    aerials = [images.aerial(s.aerial_index) for s in samples]
    fg = embed_images(model, grounds, "ground", batch_size).astype(np.float64)
    fa = embed_images(model, aerials, "aerial", batch_size).astype(np.float64)
    d = np.linalg.norm(fg - fa, axis=1)
    out: dict[str, list[float]] = {c: [] for c in HARD_CATEGORIES}
    for s, v in zip(samples, d):
        out[s.category].append(float(v))
    return out


def write_distance_csv(dist: dict[str, list[float]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["category", "distance"])
        for cat, values in dist.items():
            for v in values:
                w.writerow([cat, repr(v)])
