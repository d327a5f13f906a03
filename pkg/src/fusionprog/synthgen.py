"""Synthetic multimodal cohort generator with controllable class separability.

Positive patients carry an ellipsoidal blob that is dark on ADC and bright on
DWI; a configurable fraction of positives get small, easy-to-miss blobs and a
fraction of negatives get large benign artifacts that mimic the lesion
signature at reduced contrast, so the image classes overlap.  A configurable
subset of tabular columns carries a class-conditional mean shift; the rest
are pure noise.  Everything is reproducible from the config seed, with
per-patient substreams so generation order (or parallelism) cannot change
the output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .datamodel import (
    ImageVolume,
    Manifest,
    ManifestEntry,
    Modality,
    StructuredRecord,
    nihss_flags_from_names,
    write_manifest,
    write_volume,
)
from .errors import ConfigurationError

# Substream namespaces under the cohort seed.
_NS_COHORT = 101
_NS_PATIENT = 202

N_NIHSS = 16

# Desk-scale intensity model.
_BASE_INTENSITY = 100.0
_BASE_JITTER_STD = 4.0
_TEXTURE_STD = 10.0
_BIAS_FIELD_STD = 0.08
_AMPLITUDE_JITTER_STD = 0.2
_MIN_BRAIN_INTENSITY = 1.0


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for one synthetic cohort.

    Signal strengths are mean intensity contrasts (image modalities, in raw
    intensity units against texture noise of std 10) or per-column mean shifts
    in that column's std units (tabular).  Strength 0 means the modality
    carries no class information.
    """

    n_patients: int = 600
    n_slices: int = 18
    hw: tuple[int, int] = (64, 64)
    n_attrs: int = 62
    n_informative_attrs: int = 24
    adc_signal_strength: float = 10.0
    dwi_signal_strength: float = 11.0
    tabular_signal_strength: float = 0.35
    missing_rate_max: float = 0.154
    class_prior: float = 1495.0 / 3297.0
    seed: int = 0
    small_lesion_fraction: float = 0.3
    benign_artifact_fraction: float = 0.5
    benign_contrast_ratio: float = 0.8  # mimic amplitude relative to a true lesion

    def __post_init__(self):
        if self.n_patients < 1:
            raise ConfigurationError("n_patients must be >= 1")
        if self.n_slices < 1 or min(self.hw) < 8:
            raise ConfigurationError(f"volume geometry too small: {self.n_slices} x {self.hw}")
        if not 0 <= self.n_informative_attrs <= self.n_attrs:
            raise ConfigurationError(
                f"n_informative_attrs must be in [0, n_attrs]; got {self.n_informative_attrs} of {self.n_attrs}"
            )
        for name in ("adc_signal_strength", "dwi_signal_strength", "tabular_signal_strength"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        if not 0.0 <= self.missing_rate_max <= 1.0:
            raise ConfigurationError("missing_rate_max must be in [0, 1]")
        if not 0.0 < self.class_prior < 1.0:
            raise ConfigurationError("class_prior must be in (0, 1)")
        if self.seed < 0:
            raise ConfigurationError("seed must be non-negative")
        if not 0.0 <= self.small_lesion_fraction <= 1.0 or not 0.0 <= self.benign_artifact_fraction <= 1.0:
            raise ConfigurationError("lesion/artifact fractions must be in [0, 1]")
        if self.benign_contrast_ratio < 0:
            raise ConfigurationError("benign_contrast_ratio must be >= 0")


def default_attr_names(n_attrs: int) -> tuple[str, ...]:
    """Canonical attribute naming: NIHSS items first, then named clinicals, then labs."""
    names = [f"nihss_{i:02d}" for i in range(1, N_NIHSS + 1)]
    names += [
        "age",
        "sex",
        "thrombolysis",
        "diabetes",
        "smoking",
        "onset_delay",
        "hyperlipidemia",
        "hypertension",
        "cardiac_history",
    ]
    lab = 1
    while len(names) < n_attrs:
        names.append(f"lab_{lab:02d}")
        lab += 1
    return tuple(names[:n_attrs])


_BINARY_ATTRS = frozenset(
    {"sex", "thrombolysis", "diabetes", "smoking", "onset_delay", "hyperlipidemia", "hypertension", "cardiac_history"}
)


def informative_columns(cfg: SynthConfig) -> np.ndarray:
    """Indices of class-dependent columns: NIHSS items, then age, then labs.

    Named binary attributes are kept as noise so the informative set stays a
    clean mean-shift family.
    """
    names = default_attr_names(cfg.n_attrs)
    priority = [i for i, n in enumerate(names) if n.startswith("nihss_")]
    priority += [i for i, n in enumerate(names) if n == "age"]
    priority += [i for i, n in enumerate(names) if n.startswith("lab_")]
    return np.array(priority[: cfg.n_informative_attrs], dtype=np.intp)


def _cohort_rng(cfg: SynthConfig) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((cfg.seed, _NS_COHORT)))


def _patient_rng(cfg: SynthConfig, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((cfg.seed, _NS_PATIENT, index)))


def _draw_labels(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    labels = (rng.random(cfg.n_patients) < cfg.class_prior).astype(np.int64)
    # Both classes must be present; flip the last label if sampling missed one.
    if cfg.n_patients >= 2 and len(np.unique(labels)) == 1:
        labels[-1] = 1 - labels[-1]
    return labels


def _brain_mask(h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    return ((yy - cy) / (0.42 * h)) ** 2 + ((xx - cx) / (0.42 * w)) ** 2 <= 1.0


def _blob_profile(
    shape: tuple[int, int, int], center: tuple[float, float, float], radii: tuple[float, float, float]
) -> np.ndarray:
    """Gaussian ellipsoid normalized so its mean over the support equals 1."""
    n, h, w = shape
    zz = ((np.arange(n) - center[0]) / radii[0]) ** 2
    yy = ((np.arange(h) - center[1]) / radii[1]) ** 2
    xx = ((np.arange(w) - center[2]) / radii[2]) ** 2
    r2 = zz[:, None, None] + yy[None, :, None] + xx[None, None, :]
    g = np.exp(-0.5 * r2)
    support = g > 0.01
    mean_on_support = g[support].mean() if support.any() else 1.0
    g[~support] = 0.0
    return g / mean_on_support


def _draw_blob_geometry(
    rng: np.random.Generator, shape: tuple[int, int, int], radius_range: tuple[float, float]
) -> tuple[tuple[float, float, float], tuple[float, float, float]]:
    n, h, w = shape
    r_frac = rng.uniform(*radius_range)
    radii = (max(1.0, rng.uniform(0.15, 0.30) * n), r_frac * h, r_frac * w)
    cz = rng.uniform(0.25 * n, 0.75 * n)
    cy = rng.uniform(0.30 * h, 0.70 * h)
    cx = rng.uniform(0.30 * w, 0.70 * w)
    return (cz, cy, cx), radii


def _render_patient_volumes(cfg: SynthConfig, label: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Build (adc, dwi) float32 volumes for one patient from the patient stream."""
    shape = (cfg.n_slices, *cfg.hw)
    n, h, w = shape
    mask = _brain_mask(h, w)

    volumes = {}
    base = {m: _BASE_INTENSITY + rng.normal(0.0, _BASE_JITTER_STD) for m in ("adc", "dwi")}
    texture = {m: gaussian_filter(rng.normal(0.0, 1.0, shape), sigma=(0.6, 1.2, 1.2)) for m in ("adc", "dwi")}

    # Lesion geometry is shared across modalities (one underlying event);
    # amplitudes get independent per-modality jitter.
    lesion = np.zeros(shape)
    artifact = np.zeros(shape)
    if label == 1:
        small = rng.random() < cfg.small_lesion_fraction
        radius_range = (0.05, 0.08) if small else (0.10, 0.20)
        center, radii = _draw_blob_geometry(rng, shape, radius_range)
        lesion = _blob_profile(shape, center, radii)
    else:
        has_artifact = rng.random() < cfg.benign_artifact_fraction
        if has_artifact:
            center, radii = _draw_blob_geometry(rng, shape, (0.15, 0.20))
            artifact = _blob_profile(shape, center, radii)
    amp_jitter = {m: math.exp(rng.normal(0.0, _AMPLITUDE_JITTER_STD)) for m in ("adc", "dwi")}

    # Smooth multiplicative bias field, for the preprocessing stage to remove.
    yy, xx = np.mgrid[0:h, 0:w]
    ramp_y = (yy - (h - 1) / 2.0) / h
    ramp_x = (xx - (w - 1) / 2.0) / w
    for m in ("adc", "dwi"):
        coefs = rng.normal(0.0, _BIAS_FIELD_STD, size=3)
        bias = np.exp(coefs[0] * ramp_y + coefs[1] * ramp_x + coefs[2] * (ramp_y**2 - ramp_x**2))

        tex = texture[m]
        tex = tex * (_TEXTURE_STD / max(tex.std(), 1e-12))
        vol = base[m] + tex
        # Negatives' artifacts mimic the lesion signature at reduced contrast,
        # so tail statistics overlap between the classes.
        ratio = cfg.benign_contrast_ratio
        if m == "adc":
            vol = vol - cfg.adc_signal_strength * amp_jitter[m] * lesion
            vol = vol - ratio * cfg.adc_signal_strength * amp_jitter[m] * artifact
        else:
            vol = vol + cfg.dwi_signal_strength * amp_jitter[m] * lesion
            vol = vol + ratio * cfg.dwi_signal_strength * amp_jitter[m] * artifact
        vol = vol * bias[None, :, :]
        vol = np.maximum(vol, _MIN_BRAIN_INTENSITY)
        vol = vol * mask[None, :, :]
        volumes[m] = vol.astype(np.float32)
    return volumes["adc"], volumes["dwi"]


def _render_patient_tabular(
    cfg: SynthConfig,
    label: int,
    rng: np.random.Generator,
    informative: np.ndarray,
    missing_rates: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    names = default_attr_names(cfg.n_attrs)
    informative_set = set(informative.tolist())
    values = np.empty(cfg.n_attrs)
    for j, name in enumerate(names):
        shift = cfg.tabular_signal_strength * label if j in informative_set else 0.0
        if name in _BINARY_ATTRS:
            values[j] = float(rng.random() < 0.4 + 0.1 * shift)
        elif name.startswith("nihss_"):
            values[j] = max(0.0, round(2.0 + 2.0 * (rng.normal() + shift)))
        elif name == "age":
            values[j] = round(70.0 + 9.0 * (rng.normal() + shift), 1)
        else:
            values[j] = rng.normal() + shift
    missing = rng.random(cfg.n_attrs) < missing_rates
    return values, missing


def generate_cohort(cfg: SynthConfig, out_dir: str | Path) -> Manifest:
    """Write a full cohort (manifest.csv plus volume directories) and return it."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "volumes").mkdir(exist_ok=True)

    cohort_rng = _cohort_rng(cfg)
    labels = _draw_labels(cfg, cohort_rng)
    missing_rates = cohort_rng.uniform(0.0, cfg.missing_rate_max, size=cfg.n_attrs)
    informative = informative_columns(cfg)
    names = default_attr_names(cfg.n_attrs)
    flags = nihss_flags_from_names(names)

    entries = []
    for idx in range(cfg.n_patients):
        pid = f"p{idx:05d}"
        rng = _patient_rng(cfg, idx)
        adc, dwi = _render_patient_volumes(cfg, int(labels[idx]), rng)
        values, missing = _render_patient_tabular(cfg, int(labels[idx]), rng, informative, missing_rates)

        adc_rel = f"volumes/{pid}_adc"
        dwi_rel = f"volumes/{pid}_dwi"
        write_volume(ImageVolume(Modality.ADC, adc, pid), out_dir / adc_rel)
        write_volume(ImageVolume(Modality.DWI, dwi, pid), out_dir / dwi_rel)
        record = StructuredRecord(np.where(missing, np.nan, values), missing, names, flags)
        entries.append(ManifestEntry(pid, adc_rel, dwi_rel, record, int(labels[idx])))

    manifest = Manifest(tuple(entries), names, flags, root=out_dir)
    write_manifest(manifest, out_dir / "manifest.csv")
    return manifest


# ---------------------------------------------------------------------------
# Oracle statistics: learning-free per-modality scores used to calibrate and
# sanity-check separability.  They deliberately bypass the model pipeline.
# ---------------------------------------------------------------------------


def image_oracle_score(vol: ImageVolume) -> float:
    """Tail-mean contrast vs. the volume median, signed by modality physics."""
    inside = vol.voxels[vol.voxels > 0]
    if inside.size == 0:
        return 0.0
    med = float(np.median(inside))
    q = max(1, int(0.02 * inside.size))
    ordered = np.sort(inside)
    if vol.modality is Modality.DWI:
        return float(ordered[-q:].mean() - med)
    return float(med - ordered[:q].mean())


def tabular_oracle_scores(manifest: Manifest, cfg: SynthConfig) -> np.ndarray:
    """Mean observed z-score over the informative columns, per patient."""
    informative = informative_columns(cfg)
    rows = np.stack([e.structured.values for e in manifest.entries])
    masks = np.stack([e.structured.missing_mask for e in manifest.entries])
    scores = np.zeros(len(manifest))
    cols = rows[:, informative]
    obs = ~masks[:, informative]
    safe = np.where(obs, cols, np.nan)
    mu = np.nanmean(safe, axis=0)
    sd = np.nanstd(safe, axis=0)
    sd = np.where(sd < 1e-12, 1.0, sd)
    z = (safe - mu) / sd
    counts = obs.sum(axis=1)
    scores = np.where(counts > 0, np.nansum(z, axis=1) / np.maximum(counts, 1), 0.0)
    return scores


def image_oracle_scores(manifest: Manifest, modality: Modality) -> np.ndarray:
    from .datamodel import read_volume

    scores = np.zeros(len(manifest))
    for i, entry in enumerate(manifest.entries):
        rel = entry.adc_path if modality is Modality.ADC else entry.dwi_path
        vol = read_volume(manifest.resolve(rel), modality, entry.patient_id)
        scores[i] = image_oracle_score(vol)
    return scores


# ---------------------------------------------------------------------------
# Cohort description (per-class counts and attribute summaries).
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AttrSummary:
    name: str
    kind: str  # "continuous" or "binary"
    class0: str
    class1: str


@dataclass(frozen=True)
class CohortSummary:
    n_class0: int
    n_class1: int
    rows: tuple[AttrSummary, ...]

    def as_markdown(self) -> str:
        lines = [
            f"| Clinical attributes | class 0 (N={self.n_class0}) | class 1 (N={self.n_class1}) |",
            "| --- | --- | --- |",
        ]
        for row in self.rows:
            lines.append(f"| {row.name} | {row.class0} | {row.class1} |")
        return "\n".join(lines)

    def __str__(self) -> str:
        return self.as_markdown()


def _summ_continuous(values: np.ndarray) -> str:
    if values.size == 0:
        return "n/a"
    med = np.median(values)
    q75, q25 = np.percentile(values, [75, 25])
    return f"{med:.1f} ({q75 - q25:.1f})"


def _summ_binary(values: np.ndarray) -> str:
    yes = int(np.sum(values == 1))
    no = int(np.sum(values == 0))
    return f"{yes} / {no}"


def describe_cohort(manifest: Manifest) -> CohortSummary:
    """Per-class counts plus median/IQR (continuous) or yes/no counts (binary).

    Summaries use observed values only; missing entries are excluded.
    """
    labels = manifest.labels
    rows = np.stack([e.structured.values for e in manifest.entries])
    masks = np.stack([e.structured.missing_mask for e in manifest.entries])
    summaries = []
    for j, name in enumerate(manifest.attr_names):
        observed = ~masks[:, j]
        col = rows[observed, j]
        col_labels = labels[observed]
        vals = np.unique(col)
        binary = vals.size > 0 and np.isin(vals, (0.0, 1.0)).all()
        fmt = _summ_binary if binary else _summ_continuous
        summaries.append(
            AttrSummary(
                name=name,
                kind="binary" if binary else "continuous",
                class0=fmt(col[col_labels == 0]),
                class1=fmt(col[col_labels == 1]),
            )
        )
    return CohortSummary(
        n_class0=int(np.sum(labels == 0)),
        n_class1=int(np.sum(labels == 1)),
        rows=tuple(summaries),
    )
