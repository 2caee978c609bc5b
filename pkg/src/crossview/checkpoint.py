"""Single-file checkpoints: named little-endian arrays plus a JSON header, stored in one ``.npz``.

Array keys:

* ``model/<module.path>`` for every entry of the model state dict (float32);
* ``optim/<param-index>/<state-name>`` for optimizer moments;
* ``rng/<name>`` for torch generator states (uint8).

The ``__header__`` entry is a JSON string with the configuration, step
count, optimizer hyper-parameters and the numpy sampler state.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

FORMAT = "crossview-checkpoint"
VERSION = 1


def _le(a: np.ndarray) -> np.ndarray:
    return a.astype(a.dtype.newbyteorder("<"), copy=False)


def save_checkpoint(
    path: str | Path,
    model: torch.nn.Module,
    header: dict,
    optimizer: torch.optim.Optimizer | None = None,
    generators: dict[str, torch.Generator] | None = None,
) -> Path:
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    for name, t in model.state_dict().items():
        arrays[f"model/{name}"] = _le(t.detach().cpu().numpy().astype(np.float32))
    header = dict(header, format=FORMAT, version=VERSION)
    if optimizer is not None:
        sd = optimizer.state_dict()
        header["optimizer"] = {"param_groups": sd["param_groups"]}
        for idx, state in sd["state"].items():
            for key, v in state.items():
                arrays[f"optim/{idx}/{key}"] = _le(torch.as_tensor(v).detach().cpu().numpy())
    for name, g in (generators or {}).items():
        arrays[f"rng/{name}"] = g.get_state().numpy()
    arrays["__header__"] = np.array(json.dumps(header))
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


class Checkpoint:
    """Read side of :func:`save_checkpoint`."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        with np.load(self.path, allow_pickle=False) as z:
            self.arrays = {k: z[k] for k in z.files}
        try:
            self.header = json.loads(str(self.arrays.pop("__header__")))
        except KeyError:
            raise ValueError(f"{path} is not a checkpoint (no header)") from None
        if self.header.get("format") != FORMAT:
            raise ValueError(f"{path}: unknown checkpoint format {self.header.get('format')!r}")

    @property
    def step(self) -> int:
        return int(self.header.get("step", 0))

    def model_state(self) -> dict[str, torch.Tensor]:
        return {k[6:]: torch.from_numpy(np.array(v)) for k, v in self.arrays.items() if k.startswith("model/")}

    def load_model(self, model: torch.nn.Module) -> None:
        model.load_state_dict(self.model_state(), strict=True)

    def load_optimizer(self, optimizer: torch.optim.Optimizer) -> None:
        state: dict[int, dict] = {}
        for k, v in self.arrays.items():
            if k.startswith("optim/"):
                _, idx, key = k.split("/", 2)
                state.setdefault(int(idx), {})[key] = torch.from_numpy(np.array(v))
        optimizer.load_state_dict({"state": state, "param_groups": self.header["optimizer"]["param_groups"]})

    def load_generator(self, name: str, generator: torch.Generator) -> None:
        generator.set_state(torch.from_numpy(np.array(self.arrays[f"rng/{name}"])))
