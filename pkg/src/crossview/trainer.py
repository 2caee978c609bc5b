"""Training loop: sampler -> both branches -> losses -> AdamW, with checkpoints and JSON-lines logs."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import jsonschema
import numpy as np
import torch

from .checkpoint import Checkpoint, save_checkpoint
from .data import PairImages, PairManifest
from .losses import LossConfig, total_loss
from .model import GLEConfig, ModelConfig, build_model
from .retrieval import config_digest, evaluate
from .sampling import CHSG_VARIANTS, MODES, ContrastiveBatch, build_batch, materialize

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 0.03
    steps: int = 200
    sampler: str = "chsg"
    chsg_variant: str = "L+S"
    warmup: bool = False
    grad_clip: float | None = None
    seed: int = 0
    deterministic: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("grad_clip must be > 0")
        if self.sampler not in MODES:
            raise ValueError(f"sampler must be one of {MODES}")
        if self.chsg_variant not in CHSG_VARIANTS:
            raise ValueError(f"chsg_variant must be one of {CHSG_VARIANTS}")

    @property
    def pairs_per_step(self) -> int:
        return 2 * self.batch_size if self.sampler == "chsg" else self.batch_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        validate_config(d)
        d = dict(d)
        model = ModelConfig.from_dict(d.pop("model", {}))
        loss = LossConfig(**d.pop("loss", {}))
        return cls(model=model, loss=loss, **d)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


_POS_INT = {"type": "integer", "minimum": 1}
_PAIR = {"type": "array", "items": _POS_INT, "minItems": 2, "maxItems": 2}

CONFIG_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "batch_size": {"type": "integer", "minimum": 2},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "weight_decay": {"type": "number", "minimum": 0},
        "steps": {"type": "integer", "minimum": 0},
        "sampler": {"enum": list(MODES)},
        "chsg_variant": {"enum": list(CHSG_VARIANTS)},
        "warmup": {"type": "boolean"},
        "grad_clip": {"anyOf": [{"type": "number", "exclusiveMinimum": 0}, {"type": "null"}]},
        "seed": {"type": "integer", "minimum": 0},
        "deterministic": {"type": "boolean"},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "ground_size": _PAIR,
                "aerial_size": _PAIR,
                "polar": {"type": "boolean"},
                "channels": _POS_INT,
                "widths": {"type": "array", "items": _POS_INT, "minItems": 3, "maxItems": 3},
                "arch": {"type": "string"},
                "normalize": {"type": "boolean"},
                "gle": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "num_layers": _POS_INT,
                        "num_heads": _POS_INT,
                        "K": _POS_INT,
                        "bottleneck_hidden": {"anyOf": [_POS_INT, {"type": "null"}]},
                        "activation": {"enum": ["sigmoid", "identity"]},
                        "all_ones": {"type": "boolean"},
                    },
                },
            },
        },
        "loss": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "alpha": {"type": "number", "exclusiveMinimum": 0},
                "beta_ground": {"type": "number", "exclusiveMinimum": 0},
                "beta_aerial": {"type": "number", "exclusiveMinimum": 0},
                "cf_enabled": {"type": "boolean"},
            },
        },
    },
}


def validate_config(d: dict) -> None:
    """Raise :class:`jsonschema.ValidationError` on unknown keys or out-of-range values."""
    jsonschema.validate(d, CONFIG_SCHEMA)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, dump_path: Path | None = None, diagnostics: dict | None = None):
        super().__init__(message)
        self.dump_path = dump_path
        self.diagnostics = diagnostics or {}


def set_deterministic(enabled: bool) -> None:
    torch.use_deterministic_algorithms(enabled)


def _stack(images: list[np.ndarray]) -> torch.Tensor:
    return torch.from_numpy(np.stack(images).astype(np.float32)).permute(0, 3, 1, 2).contiguous()


class Trainer:
    """Owns the model, optimizer and every random stream of one training run."""

    def __init__(self, cfg: TrainConfig, manifest: PairManifest, out_dir: str | Path | None = None):
        self.cfg = cfg
        set_deterministic(cfg.deterministic)
        self.model = build_model(cfg.model, seed=cfg.seed)
        self.optimizer = torch.optim.AdamW(self.model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.rng = np.random.default_rng(cfg.seed)
        self.cf_generator = torch.Generator().manual_seed(cfg.seed + 1)
        self.step_count = 0
        self.history: list[dict] = []
        self.manifest = manifest
        mc = cfg.model
        self.images = PairImages(manifest, mc.ground_size, mc.aerial_size, polar=mc.polar)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    # -- state -------------------------------------------------------------

    @property
    def log_path(self) -> Path | None:
        return None if self.out_dir is None else self.out_dir / "train_log.jsonl"

    def header(self) -> dict:
        return {
            "train_config": self.cfg.to_dict(),
            "model_config": self.cfg.model.to_dict(),
            "step": self.step_count,
            "numpy_rng": self.rng.bit_generator.state,
        }

    def save(self, path: str | Path) -> Path:
        return save_checkpoint(path, self.model, self.header(), self.optimizer, {"cf": self.cf_generator})

    @classmethod
    def resume(cls, path: str | Path, manifest: PairManifest, out_dir: str | Path | None = None) -> "Trainer":
        ckpt = Checkpoint(path)
        cfg = TrainConfig.from_dict(ckpt.header["train_config"])
        t = cls(cfg, manifest, out_dir)
        ckpt.load_model(t.model)
        ckpt.load_optimizer(t.optimizer)
        ckpt.load_generator("cf", t.cf_generator)
        t.rng.bit_generator.state = ckpt.header["numpy_rng"]
        t.step_count = ckpt.step
        return t

    # -- training ----------------------------------------------------------

    def _lr(self) -> float:
        if not self.cfg.warmup:
            return self.cfg.lr
        warm = max(1, int(round(0.05 * self.cfg.steps)))
        return self.cfg.lr * min(1.0, (self.step_count + 1) / warm)

    def batch_tensors(self, batch: ContrastiveBatch) -> tuple[torch.Tensor, torch.Tensor]:
        grounds, aerials = [], []
        for e in batch.elements:
            g, a = materialize(e, self.images.ground(e.index), self.images.aerial(e.index), self.cfg.model.polar)
            grounds.append(g)
            aerials.append(a)
        return _stack(grounds), _stack(aerials)

    def train_step(self) -> dict:
        cfg = self.cfg
        batch = build_batch(cfg.sampler, self.manifest, cfg.batch_size, self.rng, cfg.chsg_variant)
        ground, aerial = self.batch_tensors(batch)
        self.model.train()
        f_g, _, r_g = self.model(ground, "ground")
        f_a, _, r_a = self.model(aerial, "aerial")
        fh_g = fh_a = None
        if cfg.loss.cf_enabled:
            fh_g = self.model.counterfactual_forward(r_g, self.cf_generator)
            fh_a = self.model.counterfactual_forward(r_a, self.cf_generator)
        loss, breakdown = total_loss(f_g, f_a, fh_g, fh_a, cfg.loss)
        if not torch.isfinite(loss):
            self._abort(batch, breakdown)
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        grads = [p.grad.detach().flatten() for p in self.model.parameters() if p.grad is not None]
        grad_norm = float(torch.linalg.vector_norm(torch.cat(grads))) if grads else 0.0
        if not math.isfinite(grad_norm):
            self._abort(batch, breakdown)
        if cfg.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.grad_clip)
        for group in self.optimizer.param_groups:
            group["lr"] = self._lr()
        self.optimizer.step()
        record = {"step": self.step_count, **breakdown, "grad_norm": grad_norm, "pairs": len(batch)}
        self.step_count += 1
        self.history.append(record)
        if self.log_path is not None:
            with open(self.log_path, "a") as fh:
                fh.write(json.dumps(record) + "\n")
        return record

    def _abort(self, batch: ContrastiveBatch, breakdown: dict):
        diag = {
            "step": self.step_count,
            "losses": breakdown,
            "batch": batch.to_dict(),
            "weight_norms": {n: float(p.detach().norm()) for n, p in self.model.named_parameters()},
        }
        dump = None
        if self.out_dir is not None:
            dump = self.out_dir / "nan_dump.json"
            dump.write_text(json.dumps(diag, indent=1))
        raise TrainingDiverged(f"non-finite loss at step {self.step_count}: {breakdown}", dump, diag)

    def run(self, steps: int | None = None) -> list[dict]:
        """Train until ``steps`` total optimizer steps (default: ``cfg.steps``)."""
        target = self.cfg.steps if steps is None else steps
        while self.step_count < target:
            rec = self.train_step()
            if rec["step"] % 20 == 0:
                log.info("step %d  L=%.4f  triplet=%.4f", rec["step"], rec["L_total"], rec["L_triplet"])
        return self.history

    def evaluate(self, manifest: PairManifest | None = None):
        images = self.images if manifest is None else PairImages(
            manifest, self.cfg.model.ground_size, self.cfg.model.aerial_size, polar=self.cfg.model.polar
        )
        return evaluate(self.model, images, config_hash=config_digest(self.cfg.to_dict()))


def train(
    cfg: TrainConfig,
    manifest: PairManifest,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    steps: int | None = None,
) -> Trainer:
    """Run (or continue) training; writes ``train_log.jsonl`` and ``checkpoint.npz`` under ``out_dir``.

    ``steps`` overrides the configured total, e.g. to extend a resumed run.
    """
    trainer = Trainer.resume(resume, manifest, out_dir) if resume else Trainer(cfg, manifest, out_dir)
    if steps is not None:
        trainer.cfg = replace(trainer.cfg, steps=steps)
    trainer.run()
    if out_dir is not None:
        trainer.save(Path(out_dir) / "checkpoint.npz")
    return trainer


def load_model(path: str | Path):
    """Rebuild a frozen model from a checkpoint."""
    ckpt = Checkpoint(path)
    cfg = ModelConfig.from_dict(ckpt.header["model_config"])
    model = build_model(cfg)
    ckpt.load_model(model)
    model.eval()
    return model, ckpt


def compare_modes(cfg: TrainConfig, manifest: PairManifest, eval_manifest: PairManifest | None = None) -> dict:
    """Train raw(bs), ls(bs), ls(2bs) and chsg(bs) from the same seed and collect loss curves and metrics."""
    runs = [
        ("raw", replace(cfg, sampler="raw")),
        ("ls", replace(cfg, sampler="ls")),
        ("ls-2x", replace(cfg, sampler="ls", batch_size=2 * cfg.batch_size)),
        ("chsg", replace(cfg, sampler="chsg")),
    ]
    report = {"schema_version": SCHEMA_VERSION, "steps": cfg.steps, "seed": cfg.seed, "runs": []}
    for name, rc in runs:
        t = Trainer(rc, manifest)
        t.run()
        report["runs"].append(
            {
                "name": name,
                "sampler": rc.sampler,
                "batch_size": rc.batch_size,
                "pairs_per_step": rc.pairs_per_step,
                "loss_curve": [h["L_triplet"] for h in t.history],
                "total_curve": [h["L_total"] for h in t.history],
                "metrics": t.evaluate(eval_manifest).to_dict(),
            }
        )
    return report


COMPARE_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "steps", "runs"],
    "properties": {
        "steps": {"type": "integer"},
        "runs": {
            "type": "array",
            "minItems": 4,
            "items": {
                "type": "object",
                "required": ["name", "sampler", "batch_size", "pairs_per_step", "loss_curve", "metrics"],
                "properties": {
                    "loss_curve": {"type": "array", "items": {"type": "number"}},
                    "metrics": {"type": "object", "required": ["r_at", "r_at_percent"]},
                },
            },
        },
    },
}

__all__ = [
    "TrainConfig",
    "GLEConfig",
    "ModelConfig",
    "LossConfig",
    "Trainer",
    "TrainingDiverged",
    "train",
    "load_model",
    "compare_modes",
    "validate_config",
    "CONFIG_SCHEMA",
    "COMPARE_SCHEMA",
]
