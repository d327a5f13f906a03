"""Stage-1 stochastic view generation; stage 2 is a bit-exact identity.

Image views get horizontal flips, Gaussian blur with a randomly drawn std,
optional additive noise, and MAE-style patch masking with one mask pattern
shared across slices.  Structured views get inverted dropout.  All functions
are pure given an explicit numpy Generator, which callers derive from keyed
substreams so view generation is reproducible run-to-run.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.ndimage import gaussian_filter

from .datamodel import ImageVolume
from .errors import ConfigurationError


class Stage(str, Enum):
    STAGE1 = "stage1"
    STAGE2 = "stage2"


@dataclass(frozen=True)
class AugmentPolicy:
    flip_prob: float = 0.5
    blur_std_range: tuple[float, float] = (0.1, 2.0)
    noise_prob: float = 0.2
    noise_std: float = 0.05  # fraction of the volume's intensity range
    patch_size: int = 32
    patch_mask_prob: float = 0.5
    structured_dropout: float = 0.5
    stage: Stage = Stage.STAGE1

    def __post_init__(self):
        for name in ("flip_prob", "noise_prob", "patch_mask_prob", "structured_dropout"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigurationError(f"{name} must be in [0, 1], got {p}")
        lo, hi = self.blur_std_range
        if lo < 0 or hi < lo:
            raise ConfigurationError(f"blur_std_range must be ordered and non-negative, got {self.blur_std_range}")
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be >= 0")
        if self.patch_size < 1:
            raise ConfigurationError("patch_size must be >= 1")


def stage2_policy() -> AugmentPolicy:
    return AugmentPolicy(stage=Stage.STAGE2)


def patch_mask(shape: tuple[int, int], patch_size: int, mask_prob: float, rng: np.random.Generator) -> np.ndarray:
    """Binary keep-mask over patch_size x patch_size tiles (partial edge tiles count)."""
    h, w = shape
    gh = -(-h // patch_size)
    gw = -(-w // patch_size)
    keep = (rng.random((gh, gw)) >= mask_prob).astype(np.float32)
    full = np.repeat(np.repeat(keep, patch_size, axis=0), patch_size, axis=1)
    return full[:h, :w]


def augment_image(vol: ImageVolume, policy: AugmentPolicy, rng: np.random.Generator) -> ImageVolume:
    """One stochastic image view: flip, blur, noise, patch-mask, in that order."""
    if policy.stage is Stage.STAGE2:
        return vol
    vox = vol.voxels

    if rng.random() < policy.flip_prob:
        vox = vox[:, :, ::-1]

    std = rng.uniform(*policy.blur_std_range)
    if std > 0:
        vox = gaussian_filter(vox.astype(np.float32), sigma=(0.0, std, std))

    if rng.random() < policy.noise_prob:
        span = float(vox.max() - vox.min())
        vox = vox + rng.normal(0.0, policy.noise_std * span, size=vox.shape)

    mask = patch_mask(vox.shape[1:], policy.patch_size, policy.patch_mask_prob, rng)
    vox = vox * mask[None, :, :]  # same pattern across all slices

    return ImageVolume(vol.modality, np.ascontiguousarray(vox, dtype=np.float32), vol.patient_id)


def augment_structured(values: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Inverted dropout over structured features; survivors scale by 1/(1-p)."""
    if policy.stage is Stage.STAGE2:
        return values
    p = policy.structured_dropout
    if p >= 1.0:
        raise ConfigurationError("structured_dropout must be < 1 (nothing would survive)")
    keep = rng.random(len(values)) >= p
    return np.where(keep, np.asarray(values, dtype=np.float64) / (1.0 - p), 0.0)
