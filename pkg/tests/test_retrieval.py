import math

import numpy as np
import pytest
import torch

from crossview.data import PairImages, PairManifest, PairRecord
from crossview.model import build_model
from crossview.retrieval import (
    EmbeddingMatrix,
    compute_metrics,
    distance_distribution,
    embed_dataset,
    hit_rate,
    knn,
    percent_k,
    recall_at_k,
)
from crossview.sampling import HARD_CATEGORIES, hard_sample_eval_set

from conftest import SMALL_AERIAL, SMALL_GROUND, small_model_config, small_synthetic


def emb(x, prefix="r"):
    x = np.asarray(x, dtype=np.float32)
    return EmbeddingMatrix(x, [f"{prefix}{i}" for i in range(len(x))], "x")


def knn_oracle(q, r, k):
    """Sort every reference by (distance, index) with plain Python."""
    out = []
    for qi in q.astype(np.float64):
        d = [(math.sqrt(sum((a - b) ** 2 for a, b in zip(qi, rj))), j) for j, rj in enumerate(r.astype(np.float64))]
        out.append([j for _, j in sorted(d)[:k]])
    return np.array(out)


def recall_oracle(order, k):
    return sum(order[i, :k].tolist().count(i) > 0 for i in range(len(order))) / len(order)


@pytest.mark.parametrize("seed", range(100))
def test_knn_and_recall_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    if seed % 2:
        q, r = rng.normal(size=(2, 200, 16))
    else:  # small integers: many exact distance ties
        q, r = rng.integers(0, 3, size=(2, 200, 16))
        r[rng.integers(200, size=20)] = r[rng.integers(200, size=20)]
    q, r = q.astype(np.float32), r.astype(np.float32)
    res = knn(emb(q, "q"), emb(r), 10)
    oracle = knn_oracle(q[:25], r, 10)
    np.testing.assert_array_equal(res.indices[:25], oracle)
    full = knn_oracle(q, r, 10) if seed < 4 else res.indices
    for k in (1, 5, 10):
        assert recall_at_k(res, [{f"r{i}"} for i in range(200)], k) == recall_oracle(full, k)
    assert np.all(np.diff(res.distances, axis=1) >= 0)


def test_tie_break_prefers_lower_index():
    r = emb([[1, 0], [0, 1], [1, 0], [-1, 0]])
    res = knn(emb([[0, 0]], "q"), r, 4)
    assert res.indices[0].tolist() == [0, 1, 2, 3]
    res = knn(emb([[1, 0]], "q"), r, 2)
    assert res.indices[0].tolist() == [0, 2] and res.distances[0, 0] == 0


def test_exact_match_rank_one():
    rng = np.random.default_rng(0)
    r = rng.normal(size=(20, 8))
    res = knn(emb(r[[7]], "q"), emb(r), 3)
    assert res.ids(0)[0] == "r7" and res.distances[0, 0] == 0.0


def test_orthonormal_refs_with_noise():
    r = np.eye(6)
    q = r[[3]] + 1e-3 * np.random.default_rng(0).normal(size=(1, 6))
    assert knn(emb(q, "q"), emb(r), 1).indices[0, 0] == 3


def test_knn_errors():
    with pytest.raises(ValueError):
        knn(emb(np.zeros((2, 3))), emb(np.zeros((4, 3))), 5)
    with pytest.raises(ValueError):
        knn(emb(np.zeros((2, 3))), emb(np.zeros((4, 4))), 1)


def test_perfect_and_adversarial_recall():
    n = 10
    e = np.eye(n)
    pos = [{f"r{i}"} for i in range(n)]
    res = knn(emb(e, "q"), emb(e), n)
    assert recall_at_k(res, pos, 1) == 1.0
    # matched refs point the opposite way: |e_i + e_i| = 2 > |e_i + e_j| = sqrt(2)
    res = knn(emb(e, "q"), emb(-e), n)
    assert recall_at_k(res, pos, 1) == 0.0
    assert recall_at_k(res, pos, 9) == 0.0
    assert recall_at_k(res, pos, 10) == 1.0


def test_recall_errors():
    res = knn(emb(np.eye(3), "q"), emb(np.eye(3)), 2)
    with pytest.raises(ValueError):
        recall_at_k(res, [{"r0"}, set(), {"r2"}], 1)
    with pytest.raises(ValueError):
        recall_at_k(res, [{"r0"}] * 3, 3)
    with pytest.raises(ValueError):
        recall_at_k(res, [{"r0"}] * 2, 1)


def test_random_embeddings_null_model():
    n, seeds = 200, 100
    hits = []
    for s in range(seeds):
        rng = np.random.default_rng(s)
        res = knn(emb(rng.normal(size=(n, 16)), "q"), emb(rng.normal(size=(n, 16))), 1)
        hits.append(recall_at_k(res, [{f"r{i}"} for i in range(n)], 1))
    se = math.sqrt((1 / n) * (1 - 1 / n) / (n * seeds))
    assert abs(np.mean(hits) - 1 / n) <= 3 * se


def test_hit_rate_definitions():
    rng = np.random.default_rng(3)
    q, r = rng.normal(size=(2, 12, 4))
    res = knn(emb(q, "q"), emb(r), 12)
    pos = [{f"r{i}"} for i in range(12)]
    assert hit_rate(res, pos, [set()] * 12) == recall_at_k(res, pos, 1)
    semi = [{res.ids(i)[0]} - pos[i] for i in range(12)]
    wrong = [{res.ids(i)[1]} if res.ids(i)[0] in pos[i] else pos[i] for i in range(12)]
    assert hit_rate(res, wrong, [{res.ids(i)[0]} for i in range(12)]) == 1.0
    assert recall_at_k(res, [{res.ids(i)[-1]} for i in range(12)], 1) == 0.0
    # hand count: top-1 in positives or semi-positives
    expected = sum(res.ids(i)[0] in (pos[i] | semi[i]) for i in range(12)) / 12
    assert hit_rate(res, pos, semi) == expected == 1.0
    assert hit_rate(res, wrong, [set()] * 12) == sum(res.ids(i)[0] in wrong[i] for i in range(12)) / 12


def test_percent_k_and_metric_ordering():
    assert percent_k(200) == 2 and percent_k(1000) == 10 and percent_k(1001) == 11 and percent_k(5) == 1
    rng = np.random.default_rng(0)
    q, r = rng.normal(size=(2, 1500, 8)).astype(np.float32)
    m = compute_metrics(emb(q, "q"), emb(r), [{f"r{i}"} for i in range(1500)])
    assert m.r_at[1] <= m.r_at[5] <= m.r_at[10] <= m.r_at_percent
    d = m.to_dict()
    assert d["k_percent"] == 15 and "hit_rate" not in d
    assert all(0 <= v <= 1 for v in d["r_at"].values())


def test_embedding_matrix_io_and_nan(tmp_path):
    m = emb(np.random.default_rng(0).normal(size=(5, 3)))
    m.save(tmp_path / "e.f32")
    assert (tmp_path / "e.f32").stat().st_size == 5 * 3 * 4
    back = EmbeddingMatrix.load(tmp_path / "e.f32")
    assert back.ids == m.ids and np.array_equal(back.vectors, m.vectors)
    bad = np.zeros((3, 2))
    bad[1, 0] = np.nan
    with pytest.raises(ValueError, match="r1"):
        emb(bad)
    with pytest.raises(ValueError):
        EmbeddingMatrix(np.zeros((3, 2)), ["a", "b"], "x")


def test_embed_dataset_shape_and_determinism():
    cfg = small_model_config(K=4, channels=32)
    model = build_model(cfg, seed=0)
    images = PairImages(small_synthetic(10), SMALL_GROUND, (SMALL_AERIAL, SMALL_AERIAL), polar=True)
    g = embed_dataset(model, images, "ground", batch_size=3)
    a = embed_dataset(model, images, "aerial", batch_size=4)
    assert g.vectors.shape == (10, 128) and a.vectors.shape == (10, 128)
    assert g.ids == images.manifest.ids
    assert np.array_equal(embed_dataset(model, images, "ground", batch_size=3).vectors, g.vectors)
    # batching changes only float summation order
    np.testing.assert_allclose(embed_dataset(model, images, "ground").vectors, g.vectors, atol=1e-6)
    with pytest.raises(ValueError):
        embed_dataset(model, images, "side")


def test_embed_dataset_reports_bad_file(tmp_path):
    (tmp_path / "bad.png").write_bytes(b"xx")
    m = PairManifest([PairRecord("x", tmp_path / "bad.png", tmp_path / "bad.png")])
    model = build_model(small_model_config(), seed=0)
    images = PairImages(m, SMALL_GROUND, (SMALL_AERIAL, SMALL_AERIAL), polar=True)
    with pytest.raises(OSError, match="bad.png"):
        embed_dataset(model, images, "ground")


def test_distance_distribution_counts_and_determinism():
    manifest = small_synthetic(8)
    model = build_model(small_model_config(), seed=0)
    images = PairImages(manifest, SMALL_GROUND, (SMALL_AERIAL, SMALL_AERIAL), polar=True)
    samples = hard_sample_eval_set(manifest, 5, np.random.default_rng(0))
    d1 = distance_distribution(model, images, samples)
    d2 = distance_distribution(model, images, samples)
    assert list(d1) == list(HARD_CATEGORIES)
    assert all(len(v) == 5 for v in d1.values())
    np.testing.assert_allclose(d1["rot180"], d2["rot180"], atol=1e-6)
    # original distances are exactly |f_g - f_a| of the untouched pair
    with torch.no_grad():
        s = samples[0]
        fg = model(torch.from_numpy(images.ground(s.ground_index)).permute(2, 0, 1)[None], "ground")[0]
        fa = model(torch.from_numpy(images.aerial(s.aerial_index)).permute(2, 0, 1)[None], "aerial")[0]
    assert abs(d1["original"][0] - float((fg - fa).norm())) < 1e-5
