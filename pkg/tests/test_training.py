import hashlib
import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

from fusionprog.augment import AugmentPolicy, Stage
from fusionprog.datamodel import SplitSpec
from fusionprog.errors import CheckpointError, ConfigurationError, TrainingError
from fusionprog.fusion import FusionMode
from fusionprog.metrics import EvalSplit
from fusionprog.pipeline import DataConfig, prepare_data
from fusionprog.synthgen import SynthConfig, generate_cohort
from fusionprog.training import (
    ModelConfig,
    TRANSFER_MODULES,
    TrainConfig,
    _assert_finite,
    _check_trainable,
    _make_plain_batch,
    apply_parameters,
    build_model,
    evaluate_split,
    load_checkpoint,
    load_model_for_eval,
    lr_at,
    module_checksums,
    save_checkpoint,
    train_stage1,
    train_stage2,
)

MICRO_MODEL = ModelConfig(channels=(8, 16), structured_hidden=(24, 12, 8), embed_dim=8)
MICRO_POLICY = AugmentPolicy(patch_size=4)


def stage1_cfg(**kw):
    base = dict(stage=Stage.STAGE1, epochs=2, batch_size=8, seed=0, augment=MICRO_POLICY)
    base.update(kw)
    return TrainConfig(**base)


def stage2_cfg(**kw):
    base = dict(stage=Stage.STAGE2, epochs=2, batch_size=8, seed=0, augment=MICRO_POLICY)
    base.update(kw)
    return TrainConfig(**base)


def dir_digest(directory: Path) -> dict[str, str]:
    """Blob bytes plus the training-state manifest fields.

    The manifest's config snapshot records the config of the run that wrote
    it (a resumed run legitimately differs there), so it is excluded.
    """
    digest = {
        p.name: hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(directory.iterdir())
        if p.is_file() and p.suffix == ".bin"
    }
    manifest = json.loads((directory / "manifest.json").read_text())
    for key in ("stage", "epoch", "seed", "best_metric", "modules", "optimizer"):
        digest[f"manifest.{key}"] = hashlib.sha256(repr(manifest.get(key)).encode()).hexdigest()
    return digest


class TestLrSchedule:
    def test_stage1_values(self):
        cfg = TrainConfig(stage=Stage.STAGE1, epochs=20)
        assert lr_at(0, cfg) == pytest.approx(1e-3)
        assert lr_at(10, cfg) == pytest.approx(1e-4)
        assert lr_at(19, cfg) == pytest.approx(1e-4)

    def test_stage2_base(self):
        cfg = TrainConfig(stage=Stage.STAGE2, epochs=20)
        assert lr_at(0, cfg) == pytest.approx(1e-4)

    def test_epoch_out_of_range(self):
        cfg = TrainConfig(stage=Stage.STAGE1, epochs=5)
        with pytest.raises(ValueError):
            lr_at(5, cfg)


def test_zero_epochs_is_config_error():
    with pytest.raises(ConfigurationError, match="epochs"):
        TrainConfig(stage=Stage.STAGE1, epochs=0)


def test_stage1_requires_some_loss():
    with pytest.raises(ConfigurationError):
        TrainConfig(stage=Stage.STAGE1, use_intra=False, use_inter=False, use_fmcl=False)


class TestCheckpointFormat:
    def test_round_trip_bit_exact(self, tiny_prepared, tmp_path):
        model = build_model(MICRO_MODEL, tiny_prepared, FusionMode.HIERARCHICAL, seed=3)
        save_checkpoint(tmp_path / "ck", model, None, stage=Stage.STAGE1, epoch=1, seed=3, best_metric=0.5)
        ckpt = load_checkpoint(tmp_path / "ck")
        clone = build_model(MICRO_MODEL, tiny_prepared, FusionMode.HIERARCHICAL, seed=99)
        apply_parameters(clone, ckpt)
        assert module_checksums(clone) == module_checksums(model)

    def test_shape_mismatch_names_blob(self, tiny_prepared, tmp_path):
        model = build_model(MICRO_MODEL, tiny_prepared, FusionMode.HIERARCHICAL, seed=3)
        save_checkpoint(tmp_path / "ck", model, None, stage=Stage.STAGE1, epoch=1, seed=3, best_metric=None)
        other = build_model(
            replace(MICRO_MODEL, structured_hidden=(10, 12, 8)), tiny_prepared, FusionMode.HIERARCHICAL, seed=3
        )
        with pytest.raises(CheckpointError, match="structured_encoder"):
            apply_parameters(other, load_checkpoint(tmp_path / "ck"))

    def test_missing_directory(self, tmp_path):
        with pytest.raises(CheckpointError, match="manifest"):
            load_checkpoint(tmp_path / "nope")


class TestStage1:
    def test_determinism_byte_identical(self, tiny_prepared, tmp_path):
        for name in ("a", "b"):
            train_stage1(tiny_prepared, MICRO_MODEL, stage1_cfg(), tmp_path / name)
        assert dir_digest(tmp_path / "a" / "final") == dir_digest(tmp_path / "b" / "final")
        assert dir_digest(tmp_path / "a" / "best") == dir_digest(tmp_path / "b" / "best")

    def test_resume_equals_straight_run(self, tiny_prepared, tmp_path):
        train_stage1(tiny_prepared, MICRO_MODEL, stage1_cfg(epochs=4), tmp_path / "straight")
        train_stage1(tiny_prepared, MICRO_MODEL, stage1_cfg(epochs=2), tmp_path / "resumed")
        train_stage1(
            tiny_prepared,
            MICRO_MODEL,
            stage1_cfg(epochs=4),
            tmp_path / "resumed",
            resume_from=tmp_path / "resumed" / "final",
        )
        assert dir_digest(tmp_path / "straight" / "final") == dir_digest(tmp_path / "resumed" / "final")
        assert dir_digest(tmp_path / "straight" / "best") == dir_digest(tmp_path / "resumed" / "best")

    def test_best_tracks_min_val_loss(self, tiny_prepared, tmp_path):
        result = train_stage1(tiny_prepared, MICRO_MODEL, stage1_cfg(epochs=3), tmp_path / "run")
        assert result.best_metric == pytest.approx(min(h["val_loss"] for h in result.history))

    def test_training_loss_decreases_across_seed_matrix(self, tiny_prepared, tmp_path):
        """Epoch-mean stage-1 loss drops from epoch 1 to epoch 2 for most seeds."""
        improved = 0
        for seed in range(10):
            out = tmp_path / f"seed{seed}"
            train_stage1(tiny_prepared, MICRO_MODEL, stage1_cfg(seed=seed), out)
            rows = [json.loads(line) for line in (out / "train_log.jsonl").read_text().splitlines()]
            means = []
            for epoch in (0, 1):
                comps = [
                    np.mean([v for v in (r["l_intra"], r["l_inter"], r["l_fmcl"]) if v is not None])
                    for r in rows
                    if r.get("epoch") == epoch and "total" in r
                ]
                means.append(float(np.mean(comps)))
            improved += means[1] < means[0]
        assert improved >= 8, f"loss improved for only {improved}/10 seeds"


class TestStage2:
    def test_transfer_checksums_match_before_update(self, tiny_prepared, tmp_path):
        r1 = train_stage1(tiny_prepared, MICRO_MODEL, stage1_cfg(), tmp_path / "s1")
        ckpt = load_checkpoint(r1.best_dir)
        model = build_model(MICRO_MODEL, tiny_prepared, FusionMode.HIERARCHICAL, seed=0)
        fresh_classifier = module_checksums(model)["classifier"]
        apply_parameters(model, ckpt, modules=TRANSFER_MODULES)
        sums = module_checksums(model)
        stored = {
            name: hashlib.sha256((r1.best_dir / f"{name}.bin").read_bytes()).hexdigest()
            for name in TRANSFER_MODULES
        }
        for name in TRANSFER_MODULES:
            assert sums[name] == stored[name], name
        assert sums["classifier"] == fresh_classifier  # head stays fresh

    def test_random_init_runs_without_stage1(self, tiny_prepared, tmp_path):
        result = train_stage2(tiny_prepared, MICRO_MODEL, stage2_cfg(), tmp_path / "d", init_from=None)
        assert 0.0 <= result.best_metric <= 1.0

    def test_stage_mismatch_rejected(self, tiny_prepared, tmp_path):
        r2 = train_stage2(tiny_prepared, MICRO_MODEL, stage2_cfg(), tmp_path / "x")
        with pytest.raises(CheckpointError, match="stage-1"):
            train_stage2(tiny_prepared, MICRO_MODEL, stage2_cfg(), tmp_path / "y", init_from=r2.best_dir)

    def test_determinism_and_resume(self, tiny_prepared, tmp_path):
        train_stage2(tiny_prepared, MICRO_MODEL, stage2_cfg(epochs=4), tmp_path / "straight")
        train_stage2(tiny_prepared, MICRO_MODEL, stage2_cfg(epochs=2), tmp_path / "resumed")
        train_stage2(
            tiny_prepared,
            MICRO_MODEL,
            stage2_cfg(epochs=4),
            tmp_path / "resumed",
            resume_from=tmp_path / "resumed" / "final",
        )
        assert dir_digest(tmp_path / "straight" / "final") == dir_digest(tmp_path / "resumed" / "final")

    def test_best_tracks_max_val_auc(self, tiny_prepared, tmp_path):
        result = train_stage2(tiny_prepared, MICRO_MODEL, stage2_cfg(epochs=3), tmp_path / "run")
        assert result.best_metric == pytest.approx(max(h["val_auc"] for h in result.history))

    def test_separable_cohort_reaches_high_val_auc(self, tmp_path):
        """Full two-stage run on a strongly separable cohort."""
        from fusionprog.losses import ContrastiveConfig

        cfg = SynthConfig(
            n_patients=120,
            n_slices=4,
            hw=(16, 16),
            tabular_signal_strength=3.0,
            adc_signal_strength=0.0,
            dwi_signal_strength=0.0,
            seed=21,
        )
        generate_cohort(cfg, tmp_path / "cohort")
        prepared = prepare_data(
            tmp_path / "cohort", DataConfig(n_slices=4, image_size=(16, 16), split=SplitSpec(seed=2))
        )
        contrastive = ContrastiveConfig(temperature=0.5)
        r1 = train_stage1(
            prepared,
            MICRO_MODEL,
            stage1_cfg(epochs=20, batch_size=16, contrastive=contrastive),
            tmp_path / "s1",
        )
        result = train_stage2(
            prepared,
            MICRO_MODEL,
            stage2_cfg(epochs=20, batch_size=16, contrastive=contrastive),
            tmp_path / "s2",
            init_from=r1.best_dir,
        )
        assert result.best_metric >= 0.95


class TestLeakageGuards:
    def test_batch_split_tag_guard(self, tiny_prepared):
        batch = _make_plain_batch(tiny_prepared.val, np.arange(4))
        with pytest.raises(TrainingError, match="non-training"):
            _check_trainable(batch)

    def test_training_on_relabeled_split_aborts(self, tiny_prepared, tmp_path):
        poisoned = replace(tiny_prepared, train=tiny_prepared.val)
        with pytest.raises(TrainingError):
            train_stage2(poisoned, MICRO_MODEL, stage2_cfg(), tmp_path / "x")

    def test_non_finite_loss_diagnostic(self, tiny_prepared):
        batch = _make_plain_batch(tiny_prepared.train, np.arange(3))
        with pytest.raises(TrainingError, match="epoch 1 batch 2"):
            _assert_finite(torch.tensor(float("nan")), 1, 2, batch)


def test_evaluate_split_round_trip(tiny_prepared, tmp_path):
    result = train_stage2(tiny_prepared, MICRO_MODEL, stage2_cfg(), tmp_path / "run")
    model = load_model_for_eval(result.best_dir, tiny_prepared)
    report = evaluate_split(model, tiny_prepared.val, EvalSplit.VAL)
    assert report.auc == pytest.approx(result.best_metric)
