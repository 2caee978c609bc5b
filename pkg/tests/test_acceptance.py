"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

The lines are also collected into an "acceptance criteria" section of the
pytest terminal summary. Tolerances are fixed here and must not be relaxed.
"""

import copy
import itertools
import math
import shutil
import time

import numpy as np
import pytest
import torch

from crossview.data import (
    PairImages,
    PairManifest,
    PairRecord,
    SyntheticSpec,
    dedup,
    generate_synthetic,
    read_pixels,
    remove_duplicates,
    save_image,
)
from crossview.geometry import (
    ALL_LAYOUTS,
    LayoutParams,
    aerial_layout_op,
    compose_layouts,
    panorama_layout_op,
    polar_transform,
)
from crossview.losses import counterfactual_loss, exhaustive_triplet_loss
from crossview.model import GeometricLayoutExtractor, GLEConfig, ModelConfig, build_model, modulate
from crossview.retrieval import EmbeddingMatrix, distance_distribution, evaluate, knn, percent_k, recall_at_k
from crossview.sampling import CHSG_VARIANTS, IDENTITY_SEMANTIC, build_chsg_batch, hard_sample_eval_set
from crossview.trainer import TrainConfig, Trainer

from conftest import SMALL_GROUND, small_model_config, small_synthetic
from test_losses import central_difference, triplet_oracle
from test_model import modulate_oracle

# the calibrated toy run shared by criteria 1 and 2
ACCEPT_STEPS = 200
ACCEPT_BATCH = 8
ACCEPT_LR = 3e-4
ACCEPT_WIDTHS = (32, 64, 64)
WALL_CLOCK_LIMIT_S = 600.0
HARD_CATEGORIES_TRANSFORMED = ("flip", "rot90", "rot180", "rot270")


def acceptance_config() -> TrainConfig:
    return TrainConfig(
        batch_size=ACCEPT_BATCH,
        steps=ACCEPT_STEPS,
        lr=ACCEPT_LR,
        sampler="chsg",
        model=ModelConfig(channels=32, widths=ACCEPT_WIDTHS, gle=GLEConfig(K=4)),
    )


@pytest.fixture(scope="module")
def overfit_run():
    torch.set_num_threads(max(1, min(4, torch.get_num_threads())))
    manifest = generate_synthetic(SyntheticSpec(n_pairs=64, seed=0))
    start = time.perf_counter()
    trainer = Trainer(acceptance_config(), manifest)
    trainer.run()
    wall = time.perf_counter() - start
    return trainer, manifest, wall


# ---------------------------------------------------------------------------
# 1. synthetic overfit
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_1_synthetic_overfit(overfit_run, criterion):
    trainer, manifest, wall = overfit_run
    with criterion(1, "synthetic overfit") as c:
        r1 = trainer.evaluate().r_at[1]
        c.detail = (
            f"train R@1={r1:.4f} (need >= 0.95), wall={wall:.0f}s on {torch.get_num_threads()} thread(s)"
            f" (limit {WALL_CLOCK_LIMIT_S:.0f}s)"
        )
        assert len(manifest) == 64 and trainer.step_count == ACCEPT_STEPS
        assert all(h["pairs"] == 2 * ACCEPT_BATCH for h in trainer.history)
        assert r1 >= 0.95
        assert wall <= WALL_CLOCK_LIMIT_S


# ---------------------------------------------------------------------------
# 2. hard-sample separation
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_2_hard_sample_separation(overfit_run, criterion):
    trainer, manifest, _ = overfit_run
    with criterion(2, "hard-sample separation") as c:
        samples = hard_sample_eval_set(manifest, len(manifest), np.random.default_rng(1))
        dist = distance_distribution(trainer.model, trainer.images, samples)
        mu = {k: float(np.mean(v)) for k, v in dist.items()}
        sd = float(np.std(dist["original"]))
        margins = {k: (mu[k] - mu["original"]) / sd for k in HARD_CATEGORIES_TRANSFORMED}
        c.detail = "margins/sd_orig " + " ".join(f"{k}={v:.2f}" for k, v in margins.items())
        c.detail += f" (need >= 3); original={mu['original']:.3f} unmatched={mu['unmatched']:.3f}"
        for k in HARD_CATEGORIES_TRANSFORMED:
            assert mu[k] - mu["original"] >= 3 * sd, k
        assert mu["original"] < mu["unmatched"]


# ---------------------------------------------------------------------------
# 3. geometry invariants
# ---------------------------------------------------------------------------


def test_criterion_3_geometry_invariants(criterion):
    with criterion(3, "geometry invariants") as c:
        labels = np.arange(49).reshape(7, 7)
        pano = np.arange(3 * 20).reshape(3, 20)
        cases = 0
        for p1, p2 in itertools.product(ALL_LAYOUTS, ALL_LAYOUTS):
            p12 = compose_layouts(p1, p2)
            assert np.array_equal(aerial_layout_op(aerial_layout_op(labels, p1), p2), aerial_layout_op(labels, p12))
            assert np.array_equal(panorama_layout_op(panorama_layout_op(pano, p1), p2), panorama_layout_op(pano, p12))
            cases += 1
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(20):
            a = rng.random((64, 64, 3))
            for p in ALL_LAYOUTS:
                lhs = panorama_layout_op(polar_transform(a, 16, 64), p)
                rhs = polar_transform(aerial_layout_op(a, p), 16, 64)
                worst = max(worst, float(np.max(np.abs(lhs - rhs))))
        g = rng.random((4, 24, 3))
        quarter, out = LayoutParams(1, False), g
        for _ in range(4):
            out = panorama_layout_op(out, quarter)
        periodic = np.array_equal(out, g) and np.array_equal(np.roll(g, 24, axis=1), g)
        c.detail = f"D4 law {cases}/64 exact; polar commutation max err {worst * 255:.3f}/255 (need <= 2); periodic={periodic}"
        assert cases == 64
        assert worst <= 2 / 255
        assert periodic


# ---------------------------------------------------------------------------
# 4. modulation and loss oracles
# ---------------------------------------------------------------------------


def _rel(a, b):
    return float((a - b).norm() / max(float(b.norm()), 1e-12))


def test_criterion_4_modulation_and_loss_oracles(criterion):
    with criterion(4, "modulation and loss oracles") as c:
        g = torch.Generator().manual_seed(0)
        q, r = torch.rand(2, 3, 4, 5, generator=g), torch.randn(2, 6, 4, 5, generator=g)
        ref = modulate_oracle(q.numpy().astype(np.float64), r.numpy().astype(np.float64))
        mod_err = float(np.max(np.abs(modulate(q, r).numpy() - ref) / (np.abs(ref) + 1e-12)))
        trip_err = 0.0
        for n in range(3, 7):
            x, y = np.random.default_rng(n).normal(size=(2, n, 7)) * 0.3
            got = exhaustive_triplet_loss(torch.from_numpy(x), torch.from_numpy(y), alpha=10.0).item()
            trip_err = max(trip_err, abs(got - triplet_oracle(x.tolist(), y.tolist(), 10.0)))
        f = torch.randn(5, 12, dtype=torch.float64)
        cf_err = abs(counterfactual_loss(f, f.clone(), 5.0).item() - math.log(2))
        grad_err = 0.0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            n = int(rng.integers(3, 7))
            x = torch.from_numpy(rng.normal(size=(n, 5)) * 0.2).requires_grad_(True)
            y = torch.from_numpy(rng.normal(size=(n, 5)) * 0.2)
            exhaustive_triplet_loss(x, y, 10.0).backward()
            fd = central_difference(lambda v: exhaustive_triplet_loss(v, y, 10.0), x.detach().clone())
            grad_err = max(grad_err, _rel(x.grad, fd))
            h = torch.from_numpy(rng.normal(size=(n, 5)) * 0.3)
            x.grad = None
            counterfactual_loss(x, h, 5.0).backward()
            fd = central_difference(lambda v: counterfactual_loss(v, h, 5.0), x.detach().clone())
            grad_err = max(grad_err, _rel(x.grad, fd))
        c.detail = (
            f"modulation rel={mod_err:.1e} (<=1e-5) triplet abs={trip_err:.1e} (<=1e-9) "
            f"cf@0 abs={cf_err:.1e} (<=1e-9) grad rel={grad_err:.1e} (<=1e-4)"
        )
        assert mod_err <= 1e-5
        assert trip_err <= 1e-9
        assert cf_err <= 1e-9
        assert grad_err <= 1e-4


# ---------------------------------------------------------------------------
# 5. retrieval oracle and null calibration
# ---------------------------------------------------------------------------


def _brute_force_ranks(q, r):
    """Full sort of every reference per query by (distance, index)."""
    out = np.empty((len(q), len(r)), dtype=np.int64)
    for i, qi in enumerate(q.astype(np.float64)):
        d = np.sqrt(((qi[None, :] - r.astype(np.float64)) ** 2).sum(axis=1))
        out[i] = np.lexsort((np.arange(len(r)), d))
    return out


@pytest.mark.slow
def test_criterion_5_retrieval_oracle_and_null(criterion):
    with criterion(5, "retrieval oracle") as c:
        mismatches = 0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            if seed % 2:
                q, r = rng.normal(size=(2, 200, 16))
            else:  # integer coordinates give many exact ties
                q, r = rng.integers(0, 3, size=(2, 200, 16))
            q, r = q.astype(np.float32), r.astype(np.float32)
            ids = [f"r{i}" for i in range(200)]
            pos = [{f"r{i}"} for i in range(200)]
            res = knn(EmbeddingMatrix(q, [f"q{i}" for i in range(200)], "ground"), EmbeddingMatrix(r, ids, "aerial"), 200)
            order = _brute_force_ranks(q, r)
            mismatches += int(not np.array_equal(res.indices, order))
            for k in (1, 5, 10, percent_k(200)):
                oracle = np.mean([i in order[i, :k] for i in range(200)])
                mismatches += int(recall_at_k(res, pos, k) != oracle)
        hits = []
        for seed in range(100):
            m = small_synthetic(200, seed=seed)
            model = build_model(small_model_config(K=4, channels=32), seed=seed)
            hits.append(evaluate(model, PairImages(m, SMALL_GROUND, (64, 64), polar=True)).r_at[1])
        p, n = 1 / 200, 200 * 100
        se = math.sqrt(p * (1 - p) / n)
        z = (float(np.mean(hits)) - p) / se
        c.detail = f"oracle mismatches={mismatches}/500; untrained R@1={np.mean(hits):.5f} vs 1/200, z={z:.2f} (|z|<=3)"
        assert mismatches == 0
        assert abs(z) <= 3


# ---------------------------------------------------------------------------
# 6. structure invariants
# ---------------------------------------------------------------------------


def test_criterion_6_structure_invariants(criterion):
    with criterion(6, "structure invariants") as c:
        model = build_model(small_model_config(K=4), seed=1).eval()
        with torch.no_grad():
            for view, fill in itertools.product(("ground", "aerial"), (0.0, 1.0, 1e4, -1e4)):
                h, w = model.cfg.input_size(view)
                _, q, _ = model(torch.full((2, 3, h, w), fill), view)
                assert torch.all(q >= 0) and torch.all(q <= 1)
            for K in (2, 4, 6, 8):
                f, _, _ = build_model(small_model_config(K=K), seed=0)(torch.rand(1, 3, *SMALL_GROUND), "ground")
                assert f.shape[1] == 16 * K
            dims = []
            for K in (2, 4, 6, 8):
                r = torch.randn(1, 384, 8, 42)
                dims.append(modulate(GeometricLayoutExtractor(GLEConfig(K=K), 384, (8, 42))(r), r).shape[1])
        assert dims == [768, 1536, 2304, 3072]
        ids = [f"p{i}" for i in range(40)]
        rng = np.random.default_rng(3)
        for _ in range(1000):
            bs = int(rng.integers(2, 17))
            b = build_chsg_batch(ids, bs, rng)
            assert len(b) == 2 * bs and len({e.pair_id for e in b.elements[:bs]}) == bs
            assert all(g.pair_id == d.pair_id and g.layout != d.layout for g, d in b.hard_pairs())
        for variant in CHSG_VARIANTS:
            for g, d in build_chsg_batch(ids, 8, rng, variant).hard_pairs():
                same_l = g.layout == d.layout
                same_s = (g.ground_semantic, g.aerial_semantic) == (d.ground_semantic, d.aerial_semantic)
                ident = g.ground_semantic == IDENTITY_SEMANTIC
                assert {
                    "L+S": not same_l and not same_s,
                    "S-only": same_l and g.layout.rotation_quarters == 0 and not g.layout.flip and not same_s,
                    "L-only": not same_l and same_s and ident,
                    "sameL+S": same_l and not same_s,
                    "sameS+L": not same_l and same_s and not ident,
                }[variant], variant
        c.detail = f"q in [0,1]; f dims {dims} at C=384; 1000 CHSG builds; {len(CHSG_VARIANTS)} variants verified"


# ---------------------------------------------------------------------------
# 7. dedup
# ---------------------------------------------------------------------------


def test_criterion_7_dedup(tmp_path, criterion):
    with criterion(7, "dedup") as c:
        rng = np.random.default_rng(7)
        recs = []
        for i in range(170):
            g, a = tmp_path / f"g{i}.png", tmp_path / f"a{i}.png"
            save_image(rng.random((12, 24, 3)), g)
            save_image(rng.random((12, 12, 3)), a)
            recs.append(PairRecord(f"u{i}", g, a))
        planted = []
        for j in range(10):  # bitwise duplicates: copied files, or the same files listed again
            src = recs[j * 3]
            if j % 2:
                g, a = tmp_path / f"dup_g{j}.png", tmp_path / f"dup_a{j}.png"
                shutil.copy(src.ground, g)
                shutil.copy(src.aerial, a)
            else:
                g, a = src.ground, src.aerial
            recs.append(PairRecord(f"dup{j}", g, a))
            planted.append(sorted([src.pair_id, f"dup{j}"]))
        for j in range(10):  # JPEG re-encodes: visually near-identical, not bitwise
            src = recs[100 + j]
            g, a = tmp_path / f"jpg_g{j}.jpg", tmp_path / f"jpg_a{j}.jpg"
            save_image(read_pixels(src.ground), g, quality=95)
            save_image(read_pixels(src.aerial), a, quality=95)
            recs.append(PairRecord(f"jpg{j}", g, a))
        for j in range(10):  # same ground, different aerial: not a duplicate pair
            a = tmp_path / f"other_a{j}.png"
            save_image(rng.random((12, 12, 3)), a)
            recs.append(PairRecord(f"half{j}", recs[130 + j].ground, a))
        manifest = PairManifest(recs, split="train")
        assert len(manifest) == 200
        report = dedup(manifest)
        found = sorted(sorted(g) for g in report.groups)
        false_pos = [g for g in found if g not in planted]
        kept = remove_duplicates(manifest, report)
        per_group = [sum(pid in kept.ids for pid in g) for g in planted]
        c.detail = f"groups found {len(found)}/10 planted, false positives {len(false_pos)}, kept {len(kept)}/190"
        assert found == sorted(planted)
        assert not false_pos
        assert per_group == [1] * 10 and len(kept) == 190


# ---------------------------------------------------------------------------
# 8. ablation reachability and determinism
# ---------------------------------------------------------------------------


def _set(d: dict, path: str, value) -> dict:
    """Copy of a config dict with one dotted key replaced, as an operator would edit the JSON."""
    d = copy.deepcopy(d)
    *parents, leaf = path.split(".")
    node = d
    for key in parents:
        node = node.setdefault(key, {})
    node[leaf] = value
    return d


def _losses(history):
    return [(h["L_total"], h["L_triplet"], h["L_cf_g"], h["L_cf_a"], h["grad_norm"]) for h in history]


def test_criterion_8_ablations_and_determinism(tmp_path, criterion):
    with criterion(8, "ablations and determinism") as c:
        manifest = small_synthetic(8)
        base = TrainConfig(batch_size=3, steps=3, lr=1e-3, model=small_model_config())
        ablations = {
            "no-sigmoid": ("model.gle.activation", "identity"),
            "all-ones": ("model.gle.all_ones", True),
            "cf-off": ("loss.cf_enabled", False),
            "polar-off": ("model.polar", False),
            "polar-on": ("model.polar", True),
        }
        done = []
        for name, (path, value) in ablations.items():
            cfg = TrainConfig.from_dict(_set(base.to_dict(), path, value))
            t = Trainer(cfg, manifest)
            t.run()
            assert t.step_count == 3 and all(np.isfinite(h["L_total"]) for h in t.history), name
            done.append(name)
        a, b = Trainer(base, manifest), Trainer(base, manifest)
        a.run()
        b.run()
        deterministic = _losses(a.history) == _losses(b.history)
        first = Trainer(base, manifest)
        first.run(1)
        first.save(tmp_path / "ck.npz")
        resumed = Trainer.resume(tmp_path / "ck.npz", manifest)
        resumed.run()
        resume_ok = _losses(first.history) + _losses(resumed.history) == _losses(a.history)
        c.detail = f"ablations run: {', '.join(done)}; identical seeded logs={deterministic}; resume matches={resume_ok}"
        assert len(done) == 5
        assert deterministic
        assert resume_ok
