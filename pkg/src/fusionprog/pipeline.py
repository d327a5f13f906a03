"""Turns an on-disk cohort into model-ready split arrays.

Images: middle-slice selection, optional bias flattening, aspect-preserving
resize, then per-volume intensity standardization.  Tabular: optional NIHSS
column removal, mode imputation fitted on the training split only, then
z-scoring with training statistics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datamodel import (
    ImageVolume,
    Manifest,
    Modality,
    SplitSpec,
    StructuredRecord,
    load_manifest,
    read_volume,
    select_middle_slices,
    split_dataset,
)
from .errors import ConfigurationError
from .preprocess import ImputationModel, TabularStandardizer, correct_bias, fit_imputer, impute, resize_volume


@dataclass(frozen=True)
class DataConfig:
    n_slices: int = 18
    image_size: tuple[int, int] = (56, 56)
    bias_grid: int = 16
    bias_correct_adc: bool = True
    bias_correct_dwi: bool = True
    drop_nihss: bool = False
    split: SplitSpec = field(default_factory=SplitSpec)

    def __post_init__(self):
        if self.n_slices < 1:
            raise ConfigurationError("n_slices must be >= 1")
        if min(self.image_size) < 8:
            raise ConfigurationError("image_size dims must be >= 8")
        if self.bias_grid < 2:
            raise ConfigurationError("bias_grid must be >= 2")


@dataclass(frozen=True)
class SplitData:
    """One split's model-ready arrays; ``name`` tags batches for leakage guards."""

    name: str
    adc: np.ndarray
    dwi: np.ndarray
    tabular: np.ndarray
    labels: np.ndarray
    patient_ids: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.patient_ids)


@dataclass(frozen=True)
class PreparedData:
    train: SplitData
    val: SplitData
    test: SplitData
    attr_names: tuple[str, ...]
    imputer: ImputationModel
    standardizer: TabularStandardizer
    n_slices: int
    image_size: tuple[int, int]

    @property
    def n_attrs(self) -> int:
        return len(self.attr_names)

    def split(self, name: str) -> SplitData:
        return {"train": self.train, "val": self.val, "test": self.test}[name]


def _standardize_volume(voxels: np.ndarray) -> np.ndarray:
    std = voxels.std()
    if std < 1e-12:
        return np.zeros_like(voxels)
    return (voxels - voxels.mean()) / std


def _prepare_volume(vol: ImageVolume, cfg: DataConfig, bias: bool) -> np.ndarray:
    vol = select_middle_slices(vol, cfg.n_slices)
    if bias:
        vol = correct_bias(vol, cfg.bias_grid)
    vol = resize_volume(vol, cfg.image_size)
    return _standardize_volume(vol.voxels).astype(np.float32)


def _drop_nihss(record: StructuredRecord) -> StructuredRecord:
    keep = ~record.nihss_flags
    return StructuredRecord(
        record.values[keep],
        record.missing_mask[keep],
        tuple(n for n, k in zip(record.attr_names, keep) if k),
        record.nihss_flags[keep],
    )


def _prepare_split(
    manifest: Manifest,
    name: str,
    cfg: DataConfig,
    imputer: ImputationModel,
    standardizer: TabularStandardizer,
) -> SplitData:
    n = len(manifest)
    h, w = cfg.image_size
    adc = np.empty((n, cfg.n_slices, h, w), dtype=np.float32)
    dwi = np.empty_like(adc)
    tabular = np.empty((n, len(imputer.fill_values)), dtype=np.float32)
    for i, entry in enumerate(manifest.entries):
        adc_vol = read_volume(manifest.resolve(entry.adc_path), Modality.ADC, entry.patient_id)
        dwi_vol = read_volume(manifest.resolve(entry.dwi_path), Modality.DWI, entry.patient_id)
        adc[i] = _prepare_volume(adc_vol, cfg, cfg.bias_correct_adc)
        dwi[i] = _prepare_volume(dwi_vol, cfg, cfg.bias_correct_dwi)
        record = _drop_nihss(entry.structured) if cfg.drop_nihss else entry.structured
        tabular[i] = standardizer.apply(impute(record, imputer).values)
    return SplitData(
        name=name,
        adc=adc,
        dwi=dwi,
        tabular=tabular,
        labels=manifest.labels,
        patient_ids=manifest.patient_ids,
    )


def prepare_data(data_dir: str | Path, cfg: DataConfig) -> PreparedData:
    """Load, split, and preprocess a cohort directory containing manifest.csv."""
    data_dir = Path(data_dir)
    manifest = load_manifest(data_dir / "manifest.csv")
    train_m, val_m, test_m = split_dataset(manifest, cfg.split)

    def records(m: Manifest) -> list[StructuredRecord]:
        if cfg.drop_nihss:
            return [_drop_nihss(e.structured) for e in m.entries]
        return [e.structured for e in m.entries]

    train_records = records(train_m)
    imputer = fit_imputer(train_records, fitted_on="train")
    imputed_train = np.stack([impute(r, imputer).values for r in train_records])
    standardizer = TabularStandardizer.fit(imputed_train)

    return PreparedData(
        train=_prepare_split(train_m, "train", cfg, imputer, standardizer),
        val=_prepare_split(val_m, "val", cfg, imputer, standardizer),
        test=_prepare_split(test_m, "test", cfg, imputer, standardizer),
        attr_names=imputer.attr_names,
        imputer=imputer,
        standardizer=standardizer,
        n_slices=cfg.n_slices,
        image_size=cfg.image_size,
    )
