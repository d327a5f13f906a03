"""Modality encoders and projection heads mapping raw inputs to a shared embedding space.

Image volumes are treated as multi-channel 2D inputs (slices as channels).
The default backbone is a small strided CNN sized for desk-scale runs; a
randomly initialized ResNet50-style backbone is available as a config option.
Projected embeddings are L2-normalized by the caller before any contrastive
loss sees them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import torch
import torch.nn as nn

from .errors import ConfigurationError

EMBED_DIM = 60  # shared embedding width across modalities
RESNET_FEATURE_DIM = 2048


class ImageBackbone(str, Enum):
    SMALL_CNN = "small_cnn"
    RESNET50_STYLE = "resnet50_style"


@dataclass(frozen=True)
class ImageEncoderConfig:
    backbone: ImageBackbone = ImageBackbone.SMALL_CNN
    in_channels: int = 18
    channels: tuple[int, ...] = (32, 64, 128, 256)  # SMALL_CNN stage widths

    def __post_init__(self):
        if self.in_channels < 1:
            raise ConfigurationError("in_channels must be >= 1")
        if self.backbone is ImageBackbone.SMALL_CNN and len(self.channels) < 1:
            raise ConfigurationError("SMALL_CNN needs at least one conv stage")

    @property
    def feature_dim(self) -> int:
        if self.backbone is ImageBackbone.RESNET50_STYLE:
            return RESNET_FEATURE_DIM
        return self.channels[-1]


@dataclass(frozen=True)
class StructuredEncoderConfig:
    in_dim: int = 62
    hidden_dims: tuple[int, ...] = (150, 100, EMBED_DIM)

    def __post_init__(self):
        if self.in_dim < 1:
            raise ConfigurationError("in_dim must be >= 1")
        if len(self.hidden_dims) < 1:
            raise ConfigurationError("need at least one hidden layer")

    @property
    def out_dim(self) -> int:
        return self.hidden_dims[-1]


def default_projection_dims(feature_dim: int, embed_dim: int = EMBED_DIM) -> tuple[int, int, int]:
    """(input, hidden, output) head widths; hidden shrinks with small backbones."""
    mid = 256 if feature_dim > 256 else (feature_dim + embed_dim) // 2
    return (feature_dim, mid, embed_dim)


@dataclass(frozen=True)
class ProjectionConfig:
    """Image projection head widths; the structured branch projects by identity."""

    layer_dims: tuple[int, ...] = field(default_factory=lambda: default_projection_dims(256))

    def __post_init__(self):
        dims = tuple(self.layer_dims)
        if len(dims) < 3:
            raise ConfigurationError(f"image projection needs >= 2 linear layers, got dims {dims}")
        if any(a <= b for a, b in zip(dims, dims[1:])):
            raise ConfigurationError(f"projection dims must be strictly decreasing, got {dims}")
        object.__setattr__(self, "layer_dims", dims)

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]


class FeatureNorm(nn.BatchNorm1d):
    """Non-affine feature centering that tolerates singleton training batches.

    A batch of one sample cannot define batch statistics, so it is normalized
    with the running estimates instead (as in eval mode) and leaves them
    untouched.
    """

    def __init__(self, dim: int):
        super().__init__(dim, affine=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.training and x.shape[0] == 1:
            return nn.functional.batch_norm(
                x, self.running_mean, self.running_var, training=False, eps=self.eps
            )
        return super().forward(x)


class SmallCnnEncoder(nn.Module):
    """Strided conv blocks (conv - BatchNorm - ReLU) with global average pooling.

    BatchNorm keeps the pooled features spread out across a batch, which the
    contrastive stage needs; a norm-free variant collapses to near-identical
    embeddings at initialization.
    """

    def __init__(self, cfg: ImageEncoderConfig):
        super().__init__()
        self.in_channels = cfg.in_channels
        blocks = []
        prev = cfg.in_channels
        for ch in cfg.channels:
            blocks += [nn.Conv2d(prev, ch, kernel_size=3, stride=2, padding=1), nn.BatchNorm2d(ch), nn.ReLU()]
            prev = ch
        self.body = nn.Sequential(*blocks)
        self.pool = nn.AdaptiveAvgPool2d(1)
        # Pooled ReLU features share a large common-mode vector; centering them
        # keeps the projected embeddings spread on the sphere instead of
        # starting (and staying) inside a near-collapsed cone.
        self.feature_norm = FeatureNorm(cfg.feature_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(
                f"expected image batch of shape (B, {self.in_channels}, H, W), got {tuple(x.shape)}"
            )
        return self.feature_norm(self.pool(self.body(x)).flatten(1))


class ResNet50StyleEncoder(nn.Module):
    """Randomly initialized ResNet50 trunk with the input stem widened to n_slices channels."""

    def __init__(self, cfg: ImageEncoderConfig):
        super().__init__()
        from torchvision.models import resnet50

        trunk = resnet50(weights=None)
        trunk.conv1 = nn.Conv2d(cfg.in_channels, 64, kernel_size=7, stride=2, padding=3, bias=False)
        trunk.fc = nn.Identity()
        self.in_channels = cfg.in_channels
        self.trunk = trunk
        self.feature_norm = FeatureNorm(RESNET_FEATURE_DIM)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(
                f"expected image batch of shape (B, {self.in_channels}, H, W), got {tuple(x.shape)}"
            )
        return self.feature_norm(self.trunk(x))


def build_image_encoder(cfg: ImageEncoderConfig) -> nn.Module:
    if cfg.backbone is ImageBackbone.RESNET50_STYLE:
        return ResNet50StyleEncoder(cfg)
    return SmallCnnEncoder(cfg)


class StructuredEncoder(nn.Module):
    """MLP over imputed clinical vectors; output width is the shared embedding dim."""

    def __init__(self, cfg: StructuredEncoderConfig):
        super().__init__()
        self.in_dim = cfg.in_dim
        layers: list[nn.Module] = []
        prev = cfg.in_dim
        for i, width in enumerate(cfg.hidden_dims):
            layers.append(nn.Linear(prev, width))
            if i < len(cfg.hidden_dims) - 1:
                layers.append(nn.ReLU())
            prev = width
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"expected structured batch of shape (B, {self.in_dim}), got {tuple(x.shape)}")
        if torch.isnan(x).any():
            raise ValueError("structured input contains missing (NaN) values; run imputation first")
        return self.net(x)


class ProjectionHead(nn.Module):
    """Nonlinear head with strictly decreasing widths and ReLU between linear layers."""

    def __init__(self, cfg: ProjectionConfig):
        super().__init__()
        dims = cfg.layer_dims
        layers: list[nn.Module] = []
        for i, (a, b) in enumerate(zip(dims, dims[1:])):
            layers.append(nn.Linear(a, b))
            if i < len(dims) - 2:
                layers.append(nn.ReLU())
        self.net = nn.Sequential(*layers)
        self.in_dim = dims[0]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"projection expects {self.in_dim}-dim features, got {x.shape[-1]}")
        return self.net(x)


def l2_normalize(x: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True).clamp_min(eps)


def assert_normalized(x: torch.Tensor, tol: float = 1e-4, what: str = "embedding rows") -> None:
    norms = x.norm(dim=-1)
    worst = (norms - 1.0).abs().max().item() if x.numel() else 0.0
    if worst > tol:
        raise ValueError(f"{what} must be L2-normalized (max |norm-1| = {worst:.3e} > {tol})")


@dataclass(frozen=True)
class EmbeddingSet:
    """Per-modality projected view embeddings for one batch.

    Rows are views in a fixed order shared by all three matrices; ``labels``
    and ``view_of`` align with that order.  All rows must be L2-normalized.
    """

    a: torch.Tensor
    d: torch.Tensor
    s: torch.Tensor
    labels: torch.Tensor
    view_of: torch.Tensor

    def __post_init__(self):
        n = self.a.shape[0]
        if not (self.d.shape[0] == self.s.shape[0] == n == len(self.labels) == len(self.view_of)):
            raise ValueError("embedding matrices, labels, and view_of must agree on the number of views")
        for name, mat in (("A", self.a), ("D", self.d), ("S", self.s)):
            assert_normalized(mat, tol=1e-4, what=f"{name} rows")

    @property
    def n_views(self) -> int:
        return self.a.shape[0]
