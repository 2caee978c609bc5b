"""Static figure exports: descriptor heatmap grids, hard-pair contact sheets, distance violins."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib import colormaps  # noqa: E402
from PIL import Image  # noqa: E402

from .geometry import polar_transform  # noqa: E402

_PAD = 4


def colorize(values: np.ndarray, cmap: str = "viridis") -> np.ndarray:
    """Map values on a fixed [0, 1] scale to uint8 RGB."""
    rgba = colormaps[cmap](np.clip(values, 0.0, 1.0))
    return np.round(rgba[..., :3] * 255).astype(np.uint8)


def _upscale(img: np.ndarray, height: int) -> np.ndarray:
    h, w = img.shape[:2]
    f = max(1, height // h)
    return np.repeat(np.repeat(img, f, axis=0), f, axis=1)


def _as_uint8(img: np.ndarray) -> np.ndarray:
    return img if img.dtype == np.uint8 else np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def _grid(rows: Sequence[Sequence[np.ndarray]]) -> np.ndarray:
    """Tile uint8 RGB cells, padding each column to its widest cell and each row to its tallest."""
    ncol = max(len(r) for r in rows)
    col_w = [max(r[c].shape[1] for r in rows if c < len(r)) for c in range(ncol)]
    row_h = [max(cell.shape[0] for cell in r) for r in rows]
    out = np.full((sum(row_h) + _PAD * (len(rows) + 1), sum(col_w) + _PAD * (ncol + 1), 3), 255, np.uint8)
    y = _PAD
    for r, h in zip(rows, row_h):
        x = _PAD
        for c, cell in enumerate(r):
            out[y : y + cell.shape[0], x : x + cell.shape[1]] = cell
            x += col_w[c] + _PAD
        y += h + _PAD
    return out


def descriptor_grid(
    q_ground: np.ndarray,
    q_aerial: np.ndarray,
    unroll_aerial: bool = False,
    cell_height: int = 64,
    header: tuple[np.ndarray, np.ndarray] | None = None,
) -> np.ndarray:
    """One row per descriptor: ground heatmap on the left, aerial heatmap on the right.

    ``q_*`` are ``[K, H, W]`` arrays in [0, 1]. With ``unroll_aerial`` the
    square aerial maps are polar-unrolled to the ground map's aspect so both
    columns share bearing-per-column geometry.
    """
    if q_ground.shape[0] != q_aerial.shape[0]:
        raise ValueError("ground and aerial descriptor counts differ")
    rows = []
    if header is not None:
        g, a = (_as_uint8(x) for x in header)
        rows.append([g, a])
    for k in range(q_ground.shape[0]):
        qa = q_aerial[k]
        if unroll_aerial and qa.shape[0] == qa.shape[1]:
            qa = polar_transform(qa, q_ground.shape[1] * 4, q_ground.shape[2] * 4)
        rows.append([_upscale(colorize(q_ground[k]), cell_height), _upscale(colorize(qa), cell_height)])
    return _grid(rows)


def contact_sheet(rows: Sequence[Sequence[np.ndarray]]) -> np.ndarray:
    """Rows of images, e.g. ``[ground_gamma, aerial_gamma, ground_delta, aerial_delta]`` per hard pair."""
    return _grid([[_as_uint8(x) for x in r] for r in rows])


def save_png(img: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img).save(path, format="PNG")
    return path


def violin_plot(dist: dict[str, list[float]], path: str | Path, title: str = "") -> Path:
    path = Path(path)
    cats = [c for c, v in dist.items() if v]
    fig, ax = plt.subplots(figsize=(7, 4), dpi=100)
    ax.violinplot([dist[c] for c in cats], showmeans=True)
    ax.set_xticks(range(1, len(cats) + 1), cats)
    ax.set_ylabel("embedding distance")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def loss_curves(curves: dict[str, list[float]], path: str | Path) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
    for name, ys in curves.items():
        ax.plot(range(len(ys)), ys, label=name)
    ax.set_xlabel("step")
    ax.set_ylabel("triplet loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path
