"""Fusion of the three modality embeddings into one common embedding.

The default is two-step hierarchical fusion: the image embeddings are
concatenated and passed through the first FC+ReLU layer, and that output is
concatenated with the structured embedding and passed through the second.
The ablation alternative simply averages the three embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import torch
import torch.nn as nn

from .encoders import EMBED_DIM
from .errors import ConfigurationError


class FusionMode(str, Enum):
    HIERARCHICAL = "hierarchical"
    AVERAGE = "average"


@dataclass(frozen=True)
class FusionConfig:
    mode: FusionMode = FusionMode.HIERARCHICAL
    embed_dim: int = EMBED_DIM
    normalize_fused: bool = True  # L2-normalize M before its contrastive loss

    def __post_init__(self):
        if self.embed_dim < 1:
            raise ConfigurationError("embed_dim must be >= 1")


def average_fuse(a: torch.Tensor, d: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    return (a + d + s) / 3.0


class ModalityFusion(nn.Module):
    """Hierarchical (two FC+ReLU stages) or parameter-free averaging fusion."""

    def __init__(self, cfg: FusionConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.mode is FusionMode.HIERARCHICAL:
            e = cfg.embed_dim
            self.fc1 = nn.Linear(2 * e, e)
            self.fc2 = nn.Linear(2 * e, e)
        self.act = nn.ReLU()

    def image_stage(self, a: torch.Tensor, d: torch.Tensor) -> torch.Tensor:
        """First fusion step: the image pair only (structured enters later)."""
        return self.act(self.fc1(torch.cat([a, d], dim=-1)))

    def forward(self, a: torch.Tensor, d: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        e = self.cfg.embed_dim
        for name, mat in (("A", a), ("D", d), ("S", s)):
            if mat.shape[-1] != e:
                raise ValueError(f"{name} embedding must be {e}-dim, got {mat.shape[-1]}")
        if self.cfg.mode is FusionMode.AVERAGE:
            return average_fuse(a, d, s)
        fused_images = self.image_stage(a, d)
        return self.act(self.fc2(torch.cat([fused_images, s], dim=-1)))
