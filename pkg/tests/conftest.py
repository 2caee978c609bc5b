import numpy as np
import pytest
import torch

from crossview.data import SyntheticSpec, generate_synthetic
from crossview.model import GLEConfig, ModelConfig

# small geometry that keeps every shape contract (stride 16, width divisible by 4)
SMALL_GROUND = (32, 128)
SMALL_AERIAL = 64


def small_model_config(K: int = 2, channels: int = 16, polar: bool = True, **gle) -> ModelConfig:
    return ModelConfig(
        ground_size=SMALL_GROUND,
        aerial_size=(SMALL_AERIAL, SMALL_AERIAL),
        polar=polar,
        channels=channels,
        widths=(8, 16, 16),
        gle=GLEConfig(K=K, **gle),
    )


def small_synthetic(n_pairs: int = 12, seed: int = 0):
    return generate_synthetic(
        SyntheticSpec(n_pairs=n_pairs, aerial_size=SMALL_AERIAL, ground_size=SMALL_GROUND, seed=seed)
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_manifest():
    return small_synthetic()


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield


# ---------------------------------------------------------------------------
# acceptance criteria reporting: one pass/fail line per criterion
# ---------------------------------------------------------------------------

_CRITERIA: dict[int, tuple[str, bool, str]] = {}


class _Criterion:
    def __init__(self, number: int, title: str):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        ok = exc_type is None
        detail = self.detail if ok else f"{self.detail} {str(exc).splitlines()[0] if str(exc) else exc_type.__name__}"
        _CRITERIA[self.number] = (self.title, ok, detail.strip())
        print(f"criterion {self.number} ({self.title}): {'PASS' if ok else 'FAIL'} {detail.strip()}")
        return False


@pytest.fixture
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n} ({title}): {'PASS' if ok else 'FAIL'}  {detail}")
