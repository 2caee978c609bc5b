"""Command-line entry points.

Every command writes its artifacts under ``--out`` and, with ``--json``,
prints a one-line summary to stdout. Exit codes: 0 success, 1 a
post-condition failed (e.g. training diverged), 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import jsonschema
import numpy as np
import torch

from .data import (
    LAYOUTS,
    ImageReadError,
    ManifestError,
    PairImages,
    SyntheticSpec,
    dedup,
    generate_synthetic,
    load_image,
    load_manifest,
    remove_duplicates,
    save_manifest,
)
from .retrieval import (
    EmbeddingMatrix,
    compute_metrics,
    config_digest,
    distance_distribution,
    evaluate,
    write_distance_csv,
)
from .sampling import build_chsg_batch, hard_sample_eval_set, materialize, CHSG_VARIANTS
from .trainer import COMPARE_SCHEMA, TrainConfig, TrainingDiverged, compare_modes, load_model, train
from . import viz

log = logging.getLogger("crossview")


class UsageError(Exception):
    """Bad arguments or unreadable inputs (exit code 2)."""


class PostConditionFailed(Exception):
    """The command ran but its result violates a stated post-condition (exit code 1)."""


_SUMMARY_BASE = {
    "type": "object",
    "required": ["command", "ok", "artifacts"],
    "properties": {
        "command": {"type": "string"},
        "ok": {"type": "boolean"},
        "artifacts": {"type": "array", "items": {"type": "string"}},
    },
}


def _schema(command: str, **props) -> dict:
    s = json.loads(json.dumps(_SUMMARY_BASE))
    s["properties"]["command"] = {"const": command}
    s["properties"].update(props)
    s["required"] = s["required"] + sorted(props)
    return s


_NUM = {"type": "number"}
_INT = {"type": "integer", "minimum": 0}

SUMMARY_SCHEMAS = {
    "synth": _schema("synth", n_pairs=_INT, manifest={"type": "string"}, seed=_INT),
    "dedup": _schema("dedup", n_pairs=_INT, n_groups=_INT, n_removed=_INT, groups={"type": "array"}),
    "train": _schema("train", steps=_INT, final_loss=_NUM, checkpoint={"type": "string"}),
    "eval": _schema(
        "eval",
        metrics={
            "type": "object",
            "required": ["r_at", "r_at_percent", "n_queries", "n_refs"],
            "properties": {"r_at": {"type": "object", "required": ["1", "5", "10"]}},
        },
    ),
    "compare": _schema("compare", runs={"type": "array", "minItems": 4}),
    "visualize": _schema("visualize", rows=_INT),
    "distdist": _schema(
        "distdist", n=_INT, means={"type": "object"}, stds={"type": "object"}, rows=_INT
    ),
}


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump(obj, path: Path) -> Path:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    return path


def _manifest(args, split: str | None = None):
    return load_manifest(args.manifest, layout=args.layout, split=split or getattr(args, "split", None))


def _train_config(args) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    if args.steps is not None:
        cfg = replace(cfg, steps=args.steps)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _images_for(model, manifest) -> PairImages:
    mc = model.cfg
    return PairImages(manifest, mc.ground_size, mc.aerial_size, polar=mc.polar)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> dict:
    try:
        spec = SyntheticSpec(
            n_pairs=args.n_pairs,
            aerial_size=args.aerial_size,
            ground_size=tuple(args.ground_size),
            noise=args.noise,
            seed=args.seed or 0,
        )
    except ValueError as e:
        raise UsageError(str(e)) from e
    out = _out(args)
    manifest = generate_synthetic(spec)
    path = out / "manifest.csv"
    save_manifest(manifest, path)
    return {"n_pairs": len(manifest), "manifest": str(path), "seed": spec.seed, "artifacts": [str(path)]}


def cmd_dedup(args) -> dict:
    manifest = _manifest(args)
    report = dedup(manifest)
    out = _out(args)
    artifacts = [str(_dump(report.to_dict(), out / "dedup_report.json"))]
    if args.remove:
        kept = remove_duplicates(manifest, report, force=args.force)
        path = out / ("manifest.csv" if kept.one_to_one else "manifest.json")
        save_manifest(kept, path)
        artifacts.append(str(path))
    return {**report.to_dict(), "artifacts": artifacts}


def cmd_train(args) -> dict:
    manifest = _manifest(args, split="train")
    out = _out(args)
    cfg = None
    if not args.resume:
        cfg = _train_config(args)
        cfg.save(out / "config.json")
    try:
        trainer = train(cfg, manifest, out, resume=args.resume, steps=args.steps if args.resume else None)
    except TrainingDiverged as e:
        raise PostConditionFailed(f"{e} (diagnostics: {e.dump_path})") from e
    ckpt = out / "checkpoint.npz"
    last = trainer.history[-1]["L_total"] if trainer.history else float("nan")
    return {
        "steps": trainer.step_count,
        "final_loss": last,
        "checkpoint": str(ckpt),
        "artifacts": [str(ckpt), str(out / "train_log.jsonl")],
    }


def cmd_eval(args) -> dict:
    out = _out(args)
    if args.query_embeddings or args.reference_embeddings:
        if not (args.query_embeddings and args.reference_embeddings and args.manifest):
            raise UsageError("--query-embeddings and --reference-embeddings need each other and --manifest")
        q = EmbeddingMatrix.load(args.query_embeddings)
        r = EmbeddingMatrix.load(args.reference_embeddings)
        if q.dim != r.dim:
            raise UsageError(f"embedding dims differ: query {q.dim} vs reference {r.dim}")
        m = _manifest(args)
        semi = None if m.one_to_one else m.semi_positive_sets()
        report = compute_metrics(q, r, m.positive_sets(), semi)
    else:
        if not (args.checkpoint and args.manifest):
            raise UsageError("eval needs --checkpoint and --manifest")
        model, ckpt = load_model(args.checkpoint)
        manifest = _manifest(args)
        report = evaluate(model, _images_for(model, manifest), config_digest(ckpt.header["train_config"]))
    metrics = report.to_dict()
    path = _dump(metrics, out / "metrics.json")
    return {"metrics": metrics, "artifacts": [str(path)]}


def cmd_compare(args) -> dict:
    cfg = _train_config(args)
    manifest = _manifest(args, split="train")
    report = compare_modes(cfg, manifest)
    jsonschema.validate(report, COMPARE_SCHEMA)
    out = _out(args)
    path = _dump(report, out / "compare.json")
    png = viz.loss_curves({r["name"]: r["loss_curve"] for r in report["runs"]}, out / "loss_curves.png")
    runs = [{"name": r["name"], "r_at_1": r["metrics"]["r_at"]["1"]} for r in report["runs"]]
    return {"runs": runs, "artifacts": [str(path), str(png)]}


@torch.no_grad()
def cmd_visualize(args) -> dict:
    out = _out(args)
    artifacts = []
    rows = 0
    if args.checkpoint:
        if not (args.manifest and args.pair):
            raise UsageError("descriptor grids need --manifest and --pair")
        model, _ = load_model(args.checkpoint)
        manifest = _manifest(args)
        if args.pair not in manifest.ids:
            raise UsageError(f"pair {args.pair!r} not in manifest")
        i = manifest.ids.index(args.pair)
        images = _images_for(model, manifest)
        g, a = images.ground(i), images.aerial(i)
        _, qg, _ = model(torch.from_numpy(g).permute(2, 0, 1)[None], "ground")
        _, qa, _ = model(torch.from_numpy(a).permute(2, 0, 1)[None], "aerial")
        grid = viz.descriptor_grid(qg[0].numpy(), qa[0].numpy(), unroll_aerial=args.unroll, header=(g, a))
        artifacts.append(str(viz.save_png(grid, out / f"descriptors_{args.pair}.png")))
        rows = qg.shape[1]
    if args.contact_sheet:
        if not args.manifest:
            raise UsageError("contact sheets need --manifest")
        manifest = _manifest(args)
        rng = np.random.default_rng(args.seed or 0)
        batch = build_chsg_batch(manifest, args.contact_sheet, rng, args.variant)
        sheet_rows = []
        for gam, dlt in batch.hard_pairs():
            rec = manifest.records[gam.index]
            g, a = load_image(rec.ground), load_image(rec.aerial)
            sheet_rows.append([*materialize(gam, g, a, False), *materialize(dlt, g, a, False)])
        artifacts.append(str(viz.save_png(viz.contact_sheet(sheet_rows), out / "chsg_contact_sheet.png")))
        rows = max(rows, len(sheet_rows))
    if not artifacts:
        raise UsageError("nothing to draw: pass --checkpoint/--pair and/or --contact-sheet")
    return {"rows": rows, "artifacts": artifacts}


def cmd_distdist(args) -> dict:
    model, _ = load_model(args.checkpoint)
    manifest = _manifest(args)
    if args.n > len(manifest):
        raise UsageError(f"--n {args.n} exceeds the {len(manifest)} pairs in the manifest")
    samples = hard_sample_eval_set(manifest, args.n, np.random.default_rng(args.seed or 0))
    dist = distance_distribution(model, _images_for(model, manifest), samples)
    out = _out(args)
    csv_path = out / "distances.csv"
    write_distance_csv(dist, csv_path)
    png = viz.violin_plot(dist, out / "distances_violin.png")
    rows = sum(len(v) for v in dist.values())
    if rows != 6 * args.n:
        raise PostConditionFailed(f"expected {6 * args.n} distance rows, got {rows}")
    return {
        "n": args.n,
        "rows": rows,
        "means": {k: float(np.mean(v)) for k, v in dist.items()},
        "stds": {k: float(np.std(v)) for k, v in dist.items()},
        "artifacts": [str(csv_path), str(png)],
    }


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default="out", help="artifact directory (created if missing)")
    common.add_argument("--seed", type=int, default=None, help="the single seed for all randomness")
    common.add_argument("--json", action="store_true", help="print a JSON summary on stdout")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--manifest", help="CSV / JSON manifest, or a directory for directory-pairs")
    data.add_argument("--layout", choices=LAYOUTS, default="cvusa-csv")
    data.add_argument("--split", default=None)

    p = argparse.ArgumentParser(prog="crossview", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic pair dataset")
    s.add_argument("--n-pairs", type=int, default=64)
    s.add_argument("--aerial-size", type=int, default=256)
    s.add_argument("--ground-size", type=int, nargs=2, default=[128, 672], metavar=("H", "W"))
    s.add_argument("--noise", type=float, default=0.03)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("dedup", parents=[common, data], help="find bitwise-duplicate pairs")
    s.add_argument("--remove", action="store_true", help="also write the deduplicated manifest")
    s.add_argument("--force", action="store_true", help="remove duplicates even outside the train split")
    s.set_defaults(func=cmd_dedup)

    s = sub.add_parser("train", parents=[common, data], help="train a model")
    s.add_argument("--config", help="training config JSON")
    s.add_argument("--steps", type=int, default=None, help="override the configured step count")
    s.add_argument("--resume", help="checkpoint to continue from (its config wins)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common, data], help="retrieval metrics for a checkpoint")
    s.add_argument("--checkpoint")
    s.add_argument("--query-embeddings", help="precomputed query embeddings (raw float32 + .json sidecar)")
    s.add_argument("--reference-embeddings")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("compare", parents=[common, data], help="raw / ls / ls-2x / chsg loss curves")
    s.add_argument("--config")
    s.add_argument("--steps", type=int, default=None)
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("visualize", parents=[common, data], help="descriptor heatmaps and CHSG contact sheets")
    s.add_argument("--checkpoint")
    s.add_argument("--pair", help="pair id whose descriptors are drawn")
    s.add_argument("--unroll", action="store_true", help="polar-unroll square aerial descriptors")
    s.add_argument("--contact-sheet", type=int, default=0, metavar="BS", help="draw a CHSG batch of BS pairs")
    s.add_argument("--variant", choices=CHSG_VARIANTS, default="L+S")
    s.set_defaults(func=cmd_visualize)

    s = sub.add_parser("distdist", parents=[common, data], help="hard-sample distance distributions")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--n", type=int, default=200, help="pairs sampled per category")
    s.set_defaults(func=cmd_distdist)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # argparse exits with 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "manifest", None) is None and args.command in ("dedup", "train", "compare", "distdist"):
        parser.error(f"{args.command} needs --manifest")
    try:
        summary = args.func(args)
        ok, code = True, 0
    except PostConditionFailed as e:
        print(f"error: {e}", file=sys.stderr)
        summary, ok, code = {"error": str(e), "artifacts": []}, False, 1
    except (UsageError, ManifestError, ImageReadError, FileNotFoundError, jsonschema.ValidationError, ValueError) as e:
        msg = e.message if isinstance(e, jsonschema.ValidationError) else str(e)
        print(f"error: {msg}", file=sys.stderr)
        summary, ok, code = {"error": msg, "artifacts": []}, False, 2
    if args.json:
        doc = {"command": args.command, "ok": ok, **summary}
        if ok:
            jsonschema.validate(doc, SUMMARY_SCHEMAS[args.command])
        print(json.dumps(doc, sort_keys=True))
    return code


if __name__ == "__main__":
    sys.exit(main())
