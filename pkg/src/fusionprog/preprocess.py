"""Intensity homogenization, resizing, and tabular imputation/standardization.

Bias removal is a one-shot low-frequency model: per slice, a degree-2 2D
polynomial is fitted to log-intensity on a sparse lattice of nonzero voxels
and divided out, preserving the slice's mean brain intensity and leaving
exact-zero background untouched.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .datamodel import ImageVolume, StructuredRecord
from .errors import ImputationError

_MIN_FIT_VOXELS = 6  # degree-2 2D polynomial has 6 coefficients


def _poly2_design(y: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.stack([np.ones_like(x), x, y, x * x, x * y, y * y], axis=-1)


def _flatten_slice(img: np.ndarray, grid: int) -> np.ndarray | None:
    """Return the bias-corrected slice, or None when the fit is underdetermined."""
    h, w = img.shape
    mask = img > 0
    if mask.sum() < _MIN_FIT_VOXELS:
        return None

    ys = np.unique(np.linspace(0, h - 1, grid).round().astype(int))
    xs = np.unique(np.linspace(0, w - 1, grid).round().astype(int))
    lattice_y, lattice_x = np.meshgrid(ys, xs, indexing="ij")
    keep = mask[lattice_y, lattice_x]
    py, px = lattice_y[keep], lattice_x[keep]
    if py.size < _MIN_FIT_VOXELS:
        py, px = np.nonzero(mask)  # sparse slice: fall back to every nonzero voxel

    norm_y = 2.0 * py / max(h - 1, 1) - 1.0
    norm_x = 2.0 * px / max(w - 1, 1) - 1.0
    design = _poly2_design(norm_y, norm_x)
    coef, *_ = np.linalg.lstsq(design, np.log(img[py, px].astype(np.float64)), rcond=None)

    yy, xx = np.mgrid[0:h, 0:w]
    full_y = 2.0 * yy / max(h - 1, 1) - 1.0
    full_x = 2.0 * xx / max(w - 1, 1) - 1.0
    field = np.exp(_poly2_design(full_y, full_x) @ coef)

    corrected = np.where(mask, img / field, 0.0)
    corrected *= img[mask].mean() / corrected[mask].mean()
    return corrected


def correct_bias(vol: ImageVolume, grid: int = 16) -> ImageVolume:
    """Divide out a smooth multiplicative intensity field, slice by slice.

    Slices with fewer than 6 nonzero voxels are returned unchanged with a
    RuntimeWarning.  Background (exact-zero) voxels are preserved exactly and
    each corrected slice keeps its original mean nonzero intensity.
    """
    if grid < 2:
        raise ValueError(f"grid must be >= 2, got {grid}")
    out = np.empty_like(vol.voxels)
    for i in range(vol.n_slices):
        corrected = _flatten_slice(vol.voxels[i].astype(np.float64), grid)
        if corrected is None:
            warnings.warn(
                f"bias correction skipped for slice {i} of patient {vol.patient_id!r}: "
                f"fewer than {_MIN_FIT_VOXELS} nonzero voxels",
                RuntimeWarning,
                stacklevel=2,
            )
            out[i] = vol.voxels[i]
        else:
            out[i] = corrected.astype(np.float32)
    return ImageVolume(vol.modality, out, vol.patient_id)


def _crop_to_aspect(voxels: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    _, h, w = voxels.shape
    th, tw = target
    src_aspect = w / h
    dst_aspect = tw / th
    if abs(src_aspect - dst_aspect) < 1e-12:
        return voxels
    if src_aspect > dst_aspect:  # too wide: crop width
        new_w = max(1, round(h * dst_aspect))
        x0 = (w - new_w) // 2
        return voxels[:, :, x0 : x0 + new_w]
    new_h = max(1, round(w / dst_aspect))
    y0 = (h - new_h) // 2
    return voxels[:, y0 : y0 + new_h, :]


def resize_volume(vol: ImageVolume, target: tuple[int, int]) -> ImageVolume:
    """Per-slice bilinear resize; aspect ratio is preserved by center-cropping first."""
    th, tw = target
    if th < 8 or tw < 8:
        raise ValueError(f"target dims must be >= 8, got {target}")
    voxels = _crop_to_aspect(vol.voxels.astype(np.float64), (th, tw))
    _, h, w = voxels.shape

    ys = np.linspace(0.0, h - 1, th)
    xs = np.linspace(0.0, w - 1, tw)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]

    top = voxels[:, y0][:, :, x0] * (1 - wx) + voxels[:, y0][:, :, x1] * wx
    bottom = voxels[:, y1][:, :, x0] * (1 - wx) + voxels[:, y1][:, :, x1] * wx
    resized = top * (1 - wy) + bottom * wy
    return ImageVolume(vol.modality, resized.astype(np.float32), vol.patient_id)


@dataclass(frozen=True)
class ImputationModel:
    """Per-column fill values (modes of the observed training data)."""

    fill_values: np.ndarray
    attr_names: tuple[str, ...]
    fitted_on: str = "train"

    def __post_init__(self):
        fills = np.asarray(self.fill_values, dtype=np.float64)
        if not np.isfinite(fills).all():
            raise ImputationError("fill values must all be finite")
        if len(fills) != len(self.attr_names):
            raise ImputationError("fill_values and attr_names disagree on arity")
        object.__setattr__(self, "fill_values", fills)
        object.__setattr__(self, "attr_names", tuple(self.attr_names))

    def to_json(self) -> str:
        return json.dumps(
            {name: float(v) for name, v in zip(self.attr_names, self.fill_values)},
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str, fitted_on: str = "train") -> "ImputationModel":
        payload = json.loads(text)
        names = tuple(sorted(payload))
        return cls(np.array([payload[n] for n in names]), names, fitted_on)


def _column_mode(observed: np.ndarray) -> float:
    # Continuous columns are effectively discretized by rounding to 6 decimals;
    # ties break toward the smallest value (np.unique sorts ascending).
    rounded = np.round(observed, 6)
    uniq, counts = np.unique(rounded, return_counts=True)
    return float(uniq[np.argmax(counts)])


def fit_imputer(train: Sequence[StructuredRecord], fitted_on: str = "train") -> ImputationModel:
    """Fit per-column mode fill values on the training split only."""
    if not train:
        raise ImputationError("cannot fit an imputer on an empty training split")
    names = train[0].attr_names
    values = np.stack([r.values for r in train])
    masks = np.stack([r.missing_mask for r in train])
    fills = np.empty(len(names))
    for j, name in enumerate(names):
        observed = values[~masks[:, j], j]
        if observed.size == 0:
            raise ImputationError(f"column {name!r} is never observed in the training split")
        fills[j] = _column_mode(observed)
    return ImputationModel(fills, names, fitted_on)


def impute(record: StructuredRecord, model: ImputationModel) -> StructuredRecord:
    """Replace missing entries with the model's fill values and clear the mask."""
    if record.n_attrs != len(model.fill_values):
        raise ImputationError(
            f"record has {record.n_attrs} attributes but imputer was fitted on {len(model.fill_values)}"
        )
    values = np.where(record.missing_mask, model.fill_values, record.values)
    return StructuredRecord(values, np.zeros_like(record.missing_mask), record.attr_names, record.nihss_flags)


@dataclass(frozen=True)
class TabularStandardizer:
    """Column-wise z-scoring with statistics from the (imputed) training split."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, matrix: np.ndarray) -> "TabularStandardizer":
        mean = matrix.mean(axis=0)
        std = matrix.std(axis=0)
        std = np.where(std < 1e-12, 1.0, std)
        return cls(mean, std)

    def apply(self, matrix: np.ndarray) -> np.ndarray:
        return (matrix - self.mean) / self.std
