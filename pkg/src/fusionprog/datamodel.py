"""Core domain types, manifest I/O, and deterministic patient-level splitting.

A cohort on disk is a directory containing ``manifest.csv`` plus one volume
directory per (patient, modality).  The manifest format and the raw-slice
volume container are documented bit-exactly in the README.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, ManifestError, VolumeFormatError

NIHSS_PREFIX = "nihss"

VOLUME_HEADER_NAME = "header.txt"
SLICE_NAME_FORMAT = "slice_{:03d}.raw"


class Modality(str, Enum):
    ADC = "ADC"
    DWI = "DWI"


@dataclass(frozen=True)
class ImageVolume:
    """One modality's scan for one patient: float32 voxels of shape (n_slices, H, W)."""

    modality: Modality
    voxels: np.ndarray
    patient_id: str

    def __post_init__(self):
        vox = np.asarray(self.voxels, dtype=np.float32)
        if vox.ndim != 3:
            raise ValueError(f"voxels must have shape (n_slices, H, W), got {vox.shape}")
        n, h, w = vox.shape
        if n < 1 or h < 8 or w < 8:
            raise ValueError(f"volume too small: {vox.shape}; need n_slices >= 1 and H, W >= 8")
        if not np.isfinite(vox).all():
            raise ValueError(f"non-finite intensities in {self.modality.value} volume of patient {self.patient_id!r}")
        object.__setattr__(self, "voxels", vox)

    @property
    def n_slices(self) -> int:
        return self.voxels.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass(frozen=True)
class StructuredRecord:
    """Fixed-width clinical vector with per-field missingness markers.

    ``values[j]`` is meaningful only where ``missing_mask[j]`` is False; missing
    entries are stored as NaN so accidental use fails loudly.
    """

    values: np.ndarray
    missing_mask: np.ndarray
    attr_names: tuple[str, ...]
    nihss_flags: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        mask = np.asarray(self.missing_mask, dtype=bool)
        flags = np.asarray(self.nihss_flags, dtype=bool)
        names = tuple(self.attr_names)
        if not (len(values) == len(mask) == len(names) == len(flags)):
            raise ValueError(
                "inconsistent structured record arity: "
                f"values={len(values)} mask={len(mask)} names={len(names)} nihss={len(flags)}"
            )
        if not np.isfinite(values[~mask]).all():
            raise ValueError("non-finite value in observed (non-missing) structured entry")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "missing_mask", mask)
        object.__setattr__(self, "attr_names", names)
        object.__setattr__(self, "nihss_flags", flags)

    @property
    def n_attrs(self) -> int:
        return len(self.values)

    def __eq__(self, other):
        if not isinstance(other, StructuredRecord):
            return NotImplemented
        return (
            self.attr_names == other.attr_names
            and np.array_equal(self.missing_mask, other.missing_mask)
            and np.array_equal(self.nihss_flags, other.nihss_flags)
            and np.array_equal(self.values[~self.missing_mask], other.values[~other.missing_mask])
        )


@dataclass(frozen=True)
class Sample:
    """Aligned (ADC, DWI, structured) triple plus the binary outcome label."""

    adc: ImageVolume
    dwi: ImageVolume
    structured: StructuredRecord
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if self.adc.patient_id != self.dwi.patient_id:
            raise ValueError(
                f"modalities belong to different patients: {self.adc.patient_id!r} vs {self.dwi.patient_id!r}"
            )
        if self.adc.modality is not Modality.ADC or self.dwi.modality is not Modality.DWI:
            raise ValueError("sample fields must hold an ADC volume and a DWI volume, in that order")

    @property
    def patient_id(self) -> str:
        return self.adc.patient_id


@dataclass(frozen=True)
class SplitSpec:
    """Train/val/test ratios plus the shuffle seed; ratios must sum to 1."""

    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0
    stratify: bool = False

    def __post_init__(self):
        if len(self.ratios) != 3:
            raise ConfigurationError(f"need exactly 3 split ratios, got {self.ratios}")
        if any(r <= 0 for r in self.ratios):
            raise ConfigurationError(f"all split ratios must be > 0, got {self.ratios}")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ConfigurationError(f"split ratios must sum to 1.0, got {sum(self.ratios)!r}")
        if self.seed < 0:
            raise ConfigurationError("split seed must be non-negative")


@dataclass(frozen=True)
class ManifestEntry:
    patient_id: str
    adc_path: str
    dwi_path: str
    structured: StructuredRecord
    label: int


@dataclass(frozen=True)
class Manifest:
    """Loaded cohort index: one entry per unique patient, ordered by patient_id."""

    entries: tuple[ManifestEntry, ...]
    attr_names: tuple[str, ...]
    nihss_flags: np.ndarray
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        object.__setattr__(self, "attr_names", tuple(self.attr_names))
        object.__setattr__(self, "nihss_flags", np.asarray(self.nihss_flags, dtype=bool))
        object.__setattr__(self, "root", Path(self.root))
        ids = [e.patient_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ManifestError("duplicate patient_id in manifest entries")

    def __len__(self) -> int:
        return len(self.entries)

    def __eq__(self, other):
        if not isinstance(other, Manifest):
            return NotImplemented
        return (
            self.attr_names == other.attr_names
            and np.array_equal(self.nihss_flags, other.nihss_flags)
            and self.entries == other.entries
        )

    @property
    def patient_ids(self) -> tuple[str, ...]:
        return tuple(e.patient_id for e in self.entries)

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.int64)

    def resolve(self, relative_path: str) -> Path:
        return self.root / relative_path


def nihss_flags_from_names(attr_names: Sequence[str]) -> np.ndarray:
    """NIHSS-like attributes are marked by name prefix in the manifest header."""
    return np.array([n.lower().startswith(NIHSS_PREFIX) for n in attr_names], dtype=bool)


def load_manifest(path: str | Path, check_paths: bool = True) -> Manifest:
    """Parse a cohort manifest CSV.

    Duplicate patient_ids are collapsed to their first occurrence.  Entries are
    returned sorted by patient_id so downstream behaviour does not depend on
    row order or on any parallelism in the caller.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest file not found: {path}")
    root = path.parent
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty manifest") from None
        if header[:4] != ["patient_id", "adc_path", "dwi_path", "label"]:
            raise ManifestError(
                f"{path}: header must start with patient_id,adc_path,dwi_path,label; got {header[:4]}"
            )
        attr_names = tuple(header[4:])
        n_attrs = len(attr_names)
        flags = nihss_flags_from_names(attr_names)

        entries: dict[str, ManifestEntry] = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4 + n_attrs:
                raise ManifestError(
                    f"{path}: row {lineno}: expected {4 + n_attrs} columns ({n_attrs} attributes), got {len(row)}"
                )
            pid, adc_path, dwi_path, label_text = row[:4]
            if pid in entries:
                continue  # earliest occurrence wins
            try:
                label = int(label_text)
            except ValueError:
                raise ManifestError(f"{path}: row {lineno}: label {label_text!r} is not an integer") from None
            if label not in (0, 1):
                raise ManifestError(f"{path}: row {lineno}: label must be 0 or 1, got {label}")
            values = np.full(n_attrs, np.nan)
            missing = np.zeros(n_attrs, dtype=bool)
            for j, cell in enumerate(row[4:]):
                if cell == "":
                    missing[j] = True
                    continue
                try:
                    values[j] = float(cell)
                except ValueError:
                    raise ManifestError(
                        f"{path}: row {lineno}: attribute {attr_names[j]!r} value {cell!r} is not numeric"
                    ) from None
            record = StructuredRecord(values, missing, attr_names, flags)
            entries[pid] = ManifestEntry(pid, adc_path, dwi_path, record, label)

    ordered = tuple(entries[pid] for pid in sorted(entries))
    manifest = Manifest(ordered, attr_names, flags, root=root)
    if check_paths:
        for entry in manifest.entries:
            for rel in (entry.adc_path, entry.dwi_path):
                if not (root / rel).exists():
                    raise ManifestError(
                        f"patient {entry.patient_id!r}: referenced volume path does not exist: {root / rel}"
                    )
    return manifest


def write_manifest(manifest: Manifest, path: str | Path) -> None:
    """Write a manifest CSV (missing structured values become empty fields)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "adc_path", "dwi_path", "label", *manifest.attr_names])
        for entry in manifest.entries:
            cells = [
                "" if entry.structured.missing_mask[j] else repr(float(entry.structured.values[j]))
                for j in range(entry.structured.n_attrs)
            ]
            writer.writerow([entry.patient_id, entry.adc_path, entry.dwi_path, entry.label, *cells])


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _cut(ids: list[str], ratios: tuple[float, float, float]) -> tuple[list[str], list[str], list[str]]:
    n = len(ids)
    n_val = _round_half_up(n * ratios[1])
    n_test = _round_half_up(n * ratios[2])
    n_train = n - n_val - n_test  # rounding remainder goes to train
    if min(n_train, n_val, n_test) <= 0:
        raise ConfigurationError(
            f"split of {n} patients with ratios {ratios} leaves an empty split "
            f"(sizes {n_train}/{n_val}/{n_test})"
        )
    return ids[:n_train], ids[n_train : n_train + n_val], ids[n_train + n_val :]


def split_dataset(manifest: Manifest, spec: SplitSpec) -> tuple[Manifest, Manifest, Manifest]:
    """Partition a manifest by patient_id into (train, val, test).

    Patient ids are sorted, shuffled with the split seed, then cut at the
    cumulative ratios; per-split sizes are round(n * ratio) for val and test
    with the rounding remainder assigned to train.  The partition depends only
    on the id set and the seed, never on manifest row order.
    """
    if len(manifest) == 0:
        raise ConfigurationError("cannot split an empty manifest")
    by_id = {e.patient_id: e for e in manifest.entries}
    rng = np.random.default_rng(spec.seed)

    if spec.stratify:
        parts: list[tuple[list[str], list[str], list[str]]] = []
        for wanted in (0, 1):
            ids = sorted(pid for pid, e in by_id.items() if e.label == wanted)
            if not ids:
                raise ConfigurationError(f"stratified split requires both classes; class {wanted} is empty")
            ids = [ids[i] for i in rng.permutation(len(ids))]
            parts.append(_cut(ids, spec.ratios))
        groups = tuple(parts[0][k] + parts[1][k] for k in range(3))
    else:
        ids = sorted(by_id)
        ids = [ids[i] for i in rng.permutation(len(ids))]
        groups = _cut(ids, spec.ratios)

    def sub(id_group: list[str]) -> Manifest:
        picked = tuple(by_id[pid] for pid in sorted(id_group))
        return Manifest(picked, manifest.attr_names, manifest.nihss_flags, root=manifest.root)

    return sub(groups[0]), sub(groups[1]), sub(groups[2])


def select_middle_slices(vol: ImageVolume, k: int) -> ImageVolume:
    """Keep the central k slices; shorter volumes are zero-padded symmetrically."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    n = vol.n_slices
    if n >= k:
        start = (n - k) // 2
        picked = vol.voxels[start : start + k]
    else:
        pad_front = (k - n) // 2
        pad_back = k - n - pad_front
        zeros = lambda m: np.zeros((m, *vol.voxels.shape[1:]), dtype=np.float32)
        picked = np.concatenate([zeros(pad_front), vol.voxels, zeros(pad_back)], axis=0)
    return ImageVolume(vol.modality, picked, vol.patient_id)


def write_volume(vol: ImageVolume, directory: str | Path) -> None:
    """Store a volume as ``header.txt`` plus one little-endian float32 raw file per slice."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n, h, w = vol.shape
    (directory / VOLUME_HEADER_NAME).write_text(f"{n},{h},{w}\n", encoding="ascii")
    for i in range(n):
        raw = np.ascontiguousarray(vol.voxels[i], dtype="<f4").tobytes()
        (directory / SLICE_NAME_FORMAT.format(i)).write_bytes(raw)


def read_volume(directory: str | Path, modality: Modality, patient_id: str) -> ImageVolume:
    """Load a volume written by :func:`write_volume`."""
    directory = Path(directory)
    header_path = directory / VOLUME_HEADER_NAME
    if not header_path.exists():
        raise VolumeFormatError(f"{directory}: missing {VOLUME_HEADER_NAME}")
    text = header_path.read_text(encoding="ascii").strip()
    try:
        n, h, w = (int(part) for part in text.split(","))
    except ValueError:
        raise VolumeFormatError(f"{directory}: malformed header {text!r} (expected 'n_slices,H,W')") from None
    voxels = np.empty((n, h, w), dtype=np.float32)
    for i in range(n):
        slice_path = directory / SLICE_NAME_FORMAT.format(i)
        if not slice_path.exists():
            raise VolumeFormatError(f"{directory}: missing slice file {slice_path.name}")
        raw = slice_path.read_bytes()
        if len(raw) != h * w * 4:
            raise VolumeFormatError(
                f"{directory}: slice {i} has {len(raw)} bytes, expected {h * w * 4} for {h}x{w} float32"
            )
        voxels[i] = np.frombuffer(raw, dtype="<f4").reshape(h, w)
    return ImageVolume(modality, voxels, patient_id)


def load_sample(manifest: Manifest, entry: ManifestEntry) -> Sample:
    """Materialize one manifest entry into an in-memory sample."""
    adc = read_volume(manifest.resolve(entry.adc_path), Modality.ADC, entry.patient_id)
    dwi = read_volume(manifest.resolve(entry.dwi_path), Modality.DWI, entry.patient_id)
    return Sample(adc, dwi, entry.structured, entry.label)
