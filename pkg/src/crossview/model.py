"""Two-branch encoder: CNN backbone features modulated by geometric layout descriptors."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import torch
import torch.nn.functional as F
from torch import nn

VIEWS = ("ground", "aerial")
INIT_GAIN = 1.5


@dataclass(frozen=True)
class BackboneConfig:
    arch: str = "small-cnn"
    channels: int = 32
    stride: int = 16
    padding: str = "zero"  # "zero" or "circular-width"
    widths: tuple[int, ...] = (16, 32, 32)
    mean_suppression: float = 0.9  # fraction of each channel's spatial mean removed from the output

    def __post_init__(self):
        if not 0.0 <= self.mean_suppression < 1.0:
            raise ValueError("mean_suppression must be in [0, 1)")
        if self.padding not in ("zero", "circular-width"):
            raise ValueError(f"unknown padding mode {self.padding!r}")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")


@dataclass(frozen=True)
class GLEConfig:
    num_layers: int = 2
    num_heads: int = 4
    K: int = 8
    bottleneck_hidden: int | None = None  # defaults to HW // 2
    activation: str = "sigmoid"  # "sigmoid" or "identity" (ablation)
    all_ones: bool = False  # replace descriptors by constant ones (ablation)

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.activation not in ("sigmoid", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class ModelConfig:
    ground_size: tuple[int, int] = (128, 672)
    aerial_size: tuple[int, int] = (256, 256)
    polar: bool = True
    channels: int = 32
    widths: tuple[int, ...] = (16, 32, 32)
    arch: str = "small-cnn"
    gle: GLEConfig = field(default_factory=GLEConfig)
    normalize: bool = True

    @property
    def aerial_input_size(self) -> tuple[int, int]:
        """Aerial images enter the network polar-unrolled to the ground shape when ``polar`` is on."""
        return tuple(self.ground_size) if self.polar else tuple(self.aerial_size)

    def backbone_config(self, view: str) -> BackboneConfig:
        return BackboneConfig(
            arch=self.arch,
            channels=self.channels,
            stride=16,
            padding="circular-width" if view == "ground" else "zero",
            widths=tuple(self.widths),
        )

    def input_size(self, view: str) -> tuple[int, int]:
        _check_view(view)
        return tuple(self.ground_size) if view == "ground" else self.aerial_input_size

    @property
    def embedding_dim(self) -> int:
        return self.channels * self.gle.K

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ground_size"] = list(self.ground_size)
        d["aerial_size"] = list(self.aerial_size)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        gle = GLEConfig(**d.pop("gle", {}))
        for key in ("ground_size", "aerial_size", "widths"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(gle=gle, **d)


def _check_view(view: str) -> None:
    if view not in VIEWS:
        raise ValueError(f"view must be one of {VIEWS}, got {view!r}")


# ---------------------------------------------------------------------------
# backbone
# ---------------------------------------------------------------------------


class _ConvBlock(nn.Module):
    def __init__(self, cin: int, cout: int, circular: bool, act: bool = True):
        super().__init__()
        self.circular = circular
        self.conv = nn.Conv2d(cin, cout, 3, stride=2, padding=0)
        self.norm = nn.GroupNorm(_groups(cout), cout) if act else None

    def forward(self, x):
        if self.circular:
            x = F.pad(x, (1, 1, 0, 0), mode="circular")
            x = F.pad(x, (0, 0, 1, 1))
        else:
            x = F.pad(x, (1, 1, 1, 1))
        x = self.conv(x)
        return x if self.norm is None else F.relu(self.norm(x))


def _groups(c: int) -> int:
    for g in (8, 4, 2):
        if c % g == 0:
            return g
    return 1


class SmallCNN(nn.Module):
    """Four stride-2 conv blocks (total stride 16).

    With ``circular-width`` padding, a horizontal roll of the input by a
    multiple of 16 pixels rolls the feature map by the corresponding number of
    columns.

    The output subtracts ``mean_suppression`` times each channel's spatial
    mean. Without it the descriptor-weighted sums are dominated by the plain
    spatial average of each channel, which no layout change can move; keeping a
    small remainder leaves the all-ones ablation with a usable embedding.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        if cfg.stride != 16:
            raise ValueError("small-cnn has a fixed total stride of 16")
        circular = cfg.padding == "circular-width"
        widths = [3, *cfg.widths, cfg.channels]
        if len(widths) != 5:
            raise ValueError("small-cnn expects three hidden widths")
        self.cfg = cfg
        self.blocks = nn.Sequential(
            *[
                _ConvBlock(widths[i], widths[i + 1], circular, act=i < 3)
                for i in range(4)
            ]
        )

    def forward(self, x):
        r = self.blocks((x - 0.5) / 0.25)
        return r - self.cfg.mean_suppression * r.mean(dim=(2, 3), keepdim=True)


BACKBONES: dict[str, Callable[[BackboneConfig], nn.Module]] = {"small-cnn": SmallCNN}


def register_backbone(name: str, factory: Callable[[BackboneConfig], nn.Module]) -> None:
    """Make a backbone available by name. The factory must honour ``cfg.channels`` and ``cfg.stride``."""
    BACKBONES[name] = factory


def backbone_forward(backbone: nn.Module, image: torch.Tensor, cfg: BackboneConfig) -> torch.Tensor:
    """Run a backbone on ``[B, 3, H, W]`` images and check the declared output geometry."""
    if image.ndim != 4 or image.shape[1] != 3:
        raise ValueError(f"expected [B, 3, H, W] images, got {tuple(image.shape)}")
    h, w = image.shape[-2:]
    if h % cfg.stride or w % cfg.stride:
        raise ValueError(f"image size {h}x{w} is not a multiple of the stride {cfg.stride}")
    r = backbone(image)
    expected = (image.shape[0], cfg.channels, h // cfg.stride, w // cfg.stride)
    if tuple(r.shape) != expected:
        raise ValueError(f"backbone produced {tuple(r.shape)}, declared {expected}")
    return r


# ---------------------------------------------------------------------------
# geometric layout extractor
# ---------------------------------------------------------------------------


def patchify(r: torch.Tensor) -> torch.Tensor:
    """``[B, C, H, W]`` -> ``[B, H*W, C]`` in row-major spatial order."""
    return r.flatten(2).transpose(1, 2)


def unpatchify(seq: torch.Tensor, h: int, w: int) -> torch.Tensor:
    return seq.transpose(1, 2).reshape(seq.shape[0], seq.shape[2], h, w)


class GeometricLayoutExtractor(nn.Module):
    """Transformer over backbone patches, point-wise conv to K maps, then a spatial bottleneck."""

    def __init__(self, cfg: GLEConfig, channels: int, feature_hw: tuple[int, int]):
        super().__init__()
        if channels % cfg.num_heads:
            raise ValueError(f"num_heads={cfg.num_heads} must divide the model dimension {channels}")
        self.cfg = cfg
        self.channels = channels
        self.feature_hw = tuple(feature_hw)
        hw = feature_hw[0] * feature_hw[1]
        hidden = cfg.bottleneck_hidden or max(1, hw // 2)

        self.pos_embed = nn.Parameter(torch.randn(1, hw, channels) * 0.02)
        layer = nn.TransformerEncoderLayer(
            d_model=channels,
            nhead=cfg.num_heads,
            dim_feedforward=4 * channels,
            dropout=0.0,
            activation="gelu",
            batch_first=True,
            norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, cfg.num_layers, enable_nested_tensor=False)
        self.pointwise = nn.Conv2d(channels, cfg.K, kernel_size=1)
        self.fc1 = nn.Linear(hw, hidden)
        self.fc2 = nn.Linear(hidden, hw)
        self._init_head(INIT_GAIN)

    def _init_head(self, gain: float) -> None:
        # variance-preserving init so descriptors start with spatial contrast
        # instead of a flat sigmoid(0) = 0.5 map
        for layer in (self.pointwise, self.fc1, self.fc2):
            fan_in = layer.weight[0].numel()
            nn.init.normal_(layer.weight, 0.0, gain / math.sqrt(fan_in))
            nn.init.zeros_(layer.bias)

    def forward(self, r: torch.Tensor) -> torch.Tensor:
        b, c, h, w = r.shape
        if c != self.channels or (h, w) != self.feature_hw:
            raise ValueError(
                f"GLE configured for {self.channels}x{self.feature_hw}, got feature {c}x{(h, w)}"
            )
        if self.cfg.all_ones:
            return r.new_ones(b, self.cfg.K, h, w)
        x = self.encoder(patchify(r) + self.pos_embed)
        q = self.pointwise(unpatchify(x, h, w))
        q = self.fc2(self.fc1(q.flatten(2))).view(b, self.cfg.K, h, w)
        return torch.sigmoid(q) if self.cfg.activation == "sigmoid" else q


def modulate(q: torch.Tensor, r: torch.Tensor, normalize: bool = False) -> torch.Tensor:
    """Frobenius products of every descriptor with every feature channel.

    ``q`` is ``[B, K, H, W]`` and ``r`` is ``[B, C, H, W]``; the result is
    ``[B, K*C]`` with entry ``m*C + j`` equal to ``<q_m, r_j>``.
    """
    if q.shape[0] != r.shape[0] or q.shape[-2:] != r.shape[-2:]:
        raise ValueError(f"descriptor shape {tuple(q.shape)} does not match feature shape {tuple(r.shape)}")
    f = torch.einsum("bkhw,bchw->bkc", q, r).flatten(1)
    if normalize:
        f = F.normalize(f, dim=1, eps=1e-12)
    return f


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------


class Branch(nn.Module):
    def __init__(self, cfg: ModelConfig, view: str):
        super().__init__()
        self.view = view
        self.backbone_cfg = cfg.backbone_config(view)
        if cfg.arch not in BACKBONES:
            raise ValueError(f"unknown backbone {cfg.arch!r}; registered: {sorted(BACKBONES)}")
        self.backbone = BACKBONES[cfg.arch](self.backbone_cfg)
        h, w = cfg.input_size(view)
        s = self.backbone_cfg.stride
        if h % s or w % s:
            raise ValueError(f"{view} input {h}x{w} must be a multiple of the stride {s}")
        self.gle = GeometricLayoutExtractor(cfg.gle, cfg.channels, (h // s, w // s))


class CrossViewModel(nn.Module):
    """Siamese-style model with separate ground and aerial branches."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.ground = Branch(cfg, "ground")
        self.aerial = Branch(cfg, "aerial")

    def branch(self, view: str) -> Branch:
        _check_view(view)
        return self.ground if view == "ground" else self.aerial

    def raw_features(self, image: torch.Tensor, view: str) -> torch.Tensor:
        br = self.branch(view)
        expected = self.cfg.input_size(view)
        if tuple(image.shape[-2:]) != expected:
            raise ValueError(f"{view} images must be {expected}, got {tuple(image.shape[-2:])}")
        return backbone_forward(br.backbone, image, br.backbone_cfg)

    def forward(self, image: torch.Tensor, view: str):
        """Return ``(f, q, r)``: embedding, descriptors and raw backbone features."""
        r = self.raw_features(image, view)
        q = self.branch(view).gle(r)
        return modulate(q, r, self.cfg.normalize), q, r

    def counterfactual_forward(self, r: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
        """Embedding obtained by swapping the descriptors for i.i.d. U[0, 1] noise."""
        b, _, h, w = r.shape
        q_hat = torch.rand(b, self.cfg.gle.K, h, w, generator=generator, dtype=r.dtype)
        return modulate(q_hat, r, self.cfg.normalize)


def build_model(cfg: ModelConfig, seed: int | None = None) -> CrossViewModel:
    if seed is not None:
        torch.manual_seed(seed)
    return CrossViewModel(cfg)


def with_gle(cfg: ModelConfig, **changes) -> ModelConfig:
    return replace(cfg, gle=replace(cfg.gle, **changes))
