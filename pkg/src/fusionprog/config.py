"""Flat ``key = value`` config files with one section per module.

The on-disk format is INI-style and diff-friendly for ablation sweeps: every
run writes back a fully resolved snapshot.  Unknown sections or keys are
rejected so typos cannot silently fall back to defaults.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields, replace
from enum import Enum
from pathlib import Path

from .augment import AugmentPolicy, Stage
from .errors import ConfigurationError
from .fusion import FusionMode
from .losses import ContrastiveConfig, LossStrategy
from .pipeline import DataConfig
from .synthgen import SynthConfig
from .training import ModelConfig, TrainConfig
from .encoders import ImageBackbone


@dataclass(frozen=True)
class ExperimentConfig:
    synth: SynthConfig
    data: DataConfig
    model: ModelConfig
    augment: AugmentPolicy
    contrastive: ContrastiveConfig
    stage1: TrainConfig
    stage2: TrainConfig


def default_experiment() -> ExperimentConfig:
    augment = AugmentPolicy()
    contrastive = ContrastiveConfig()
    return ExperimentConfig(
        synth=SynthConfig(),
        data=DataConfig(),
        model=ModelConfig(),
        augment=augment,
        contrastive=contrastive,
        stage1=TrainConfig(stage=Stage.STAGE1, augment=augment, contrastive=contrastive),
        stage2=TrainConfig(stage=Stage.STAGE2, augment=augment, contrastive=contrastive),
    )


_ENUM_FIELDS = {
    "backbone": ImageBackbone,
    "fusion_mode": FusionMode,
    "strategy": LossStrategy,
}

# Keys that do not map 1:1 onto a dataclass field of the section's config.
_SPLIT_KEYS = ("split_ratios", "split_seed", "stratify")
_STAGE_LR_KEY = "lr"


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"expected a boolean, got {text!r}")


def _parse_tuple(text: str, example) -> tuple:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if example and isinstance(example[0], float):
        return tuple(float(p) for p in parts)
    return tuple(int(p) for p in parts)


def _parse_value(text: str, current, key: str):
    if key in _ENUM_FIELDS:
        try:
            return _ENUM_FIELDS[key](text.strip())
        except ValueError:
            valid = ", ".join(e.value for e in _ENUM_FIELDS[key])
            raise ConfigurationError(f"{key}: {text!r} is not one of {valid}") from None
    if text.strip().lower() == "none":
        return None
    if isinstance(current, bool):
        return _parse_bool(text)
    if isinstance(current, int) and not isinstance(current, bool):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, tuple):
        return _parse_tuple(text, current)
    if current is None:  # optional ints (projection_mid)
        return int(text)
    raise ConfigurationError(f"cannot parse config key {key!r}")


def _apply_section(obj, section: str, items: dict[str, str]):
    valid = {f.name for f in fields(obj)}
    updates = {}
    for key, text in items.items():
        if key not in valid:
            raise ConfigurationError(f"unknown key {key!r} in section [{section}]")
        updates[key] = _parse_value(text, getattr(obj, key), key)
    return replace(obj, **updates) if updates else obj


def _apply_data_section(data: DataConfig, items: dict[str, str]) -> DataConfig:
    split = data.split
    plain = {}
    for key, text in items.items():
        if key == "split_ratios":
            split = replace(split, ratios=tuple(float(p) for p in text.split(",")))
        elif key == "split_seed":
            split = replace(split, seed=int(text))
        elif key == "stratify":
            split = replace(split, stratify=_parse_bool(text))
        else:
            plain[key] = text
    data = _apply_section(data, "data", plain)
    return replace(data, split=split)


def _apply_stage_section(cfg: TrainConfig, section: str, items: dict[str, str]) -> TrainConfig:
    plain = dict(items)
    if _STAGE_LR_KEY in plain:
        lr = float(plain.pop(_STAGE_LR_KEY))
        field_name = "lr_stage1" if cfg.stage is Stage.STAGE1 else "lr_stage2"
        cfg = replace(cfg, **{field_name: lr})
    for banned in ("stage", "augment", "contrastive"):
        if banned in plain:
            raise ConfigurationError(f"key {banned!r} cannot be set in section [{section}]")
    return _apply_section(cfg, section, plain)


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Defaults overridden by an optional INI file."""
    cfg = default_experiment()
    if path is None:
        return cfg
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigurationError(f"cannot parse config file {path}: {exc}") from None

    known = {"run", "synth", "data", "model", "augment", "contrastive", "stage1", "stage2"}
    for section in parser.sections():
        if section not in known:
            raise ConfigurationError(f"unknown config section [{section}]")

    def items(section: str) -> dict[str, str]:
        return dict(parser.items(section)) if parser.has_section(section) else {}

    synth = _apply_section(cfg.synth, "synth", items("synth"))
    data = _apply_data_section(cfg.data, items("data"))
    model = _apply_section(cfg.model, "model", items("model"))
    augment = _apply_section(cfg.augment, "augment", items("augment"))
    contrastive = _apply_section(cfg.contrastive, "contrastive", items("contrastive"))
    stage1 = _apply_stage_section(cfg.stage1, "stage1", items("stage1"))
    stage2 = _apply_stage_section(cfg.stage2, "stage2", items("stage2"))
    stage1 = replace(stage1, augment=augment, contrastive=contrastive)
    stage2 = replace(stage2, augment=augment, contrastive=contrastive)
    return ExperimentConfig(synth, data, model, augment, contrastive, stage1, stage2)


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Apply the CLI-level seed to generation and training (the split seed stays put)."""
    contrastive = replace(cfg.contrastive, rng_seed=seed)
    return ExperimentConfig(
        synth=replace(cfg.synth, seed=seed),
        data=cfg.data,
        model=cfg.model,
        augment=cfg.augment,
        contrastive=contrastive,
        stage1=replace(cfg.stage1, seed=seed, contrastive=contrastive),
        stage2=replace(cfg.stage2, seed=seed, contrastive=contrastive),
    )


def _format_value(value) -> str:
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if value is None:
        return "none"
    return repr(value) if isinstance(value, float) else str(value)


def snapshot_config(cfg: ExperimentConfig, path: str | Path, run_meta: dict | None = None) -> None:
    """Write the fully resolved config (every run records one for reproducibility)."""
    parser = configparser.ConfigParser()
    if run_meta:
        parser["run"] = {k: _format_value(v) for k, v in sorted(run_meta.items())}
    parser["synth"] = {f.name: _format_value(getattr(cfg.synth, f.name)) for f in fields(cfg.synth)}
    data_items = {
        f.name: _format_value(getattr(cfg.data, f.name)) for f in fields(cfg.data) if f.name != "split"
    }
    data_items["split_ratios"] = _format_value(cfg.data.split.ratios)
    data_items["split_seed"] = str(cfg.data.split.seed)
    data_items["stratify"] = _format_value(cfg.data.split.stratify)
    parser["data"] = data_items
    parser["model"] = {f.name: _format_value(getattr(cfg.model, f.name)) for f in fields(cfg.model)}
    parser["augment"] = {
        f.name: _format_value(getattr(cfg.augment, f.name)) for f in fields(cfg.augment) if f.name != "stage"
    }
    parser["contrastive"] = {f.name: _format_value(getattr(cfg.contrastive, f.name)) for f in fields(cfg.contrastive)}
    skip = {"stage", "augment", "contrastive", "lr_stage1", "lr_stage2"}
    for name, stage_cfg in (("stage1", cfg.stage1), ("stage2", cfg.stage2)):
        items = {f.name: _format_value(getattr(stage_cfg, f.name)) for f in fields(stage_cfg) if f.name not in skip}
        items["lr"] = _format_value(stage_cfg.lr_stage1 if name == "stage1" else stage_cfg.lr_stage2)
        parser[name] = items
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)
