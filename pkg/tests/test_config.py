import pytest

from fusionprog.augment import Stage
from fusionprog.config import default_experiment, load_config, snapshot_config, with_seed
from fusionprog.errors import ConfigurationError
from fusionprog.fusion import FusionMode
from fusionprog.losses import LossStrategy


def test_defaults_load_without_file():
    cfg = load_config(None)
    assert cfg.stage1.stage is Stage.STAGE1
    assert cfg.stage2.stage is Stage.STAGE2
    assert cfg.stage1.lr_stage1 == pytest.approx(1e-3)
    assert cfg.stage2.lr_stage2 == pytest.approx(1e-4)
    assert cfg.contrastive.strategy is LossStrategy.RANDOM_PER_MINIBATCH


def test_overrides_applied(tmp_path):
    text = """
[synth]
n_patients = 25
hw = 16,16

[data]
image_size = 12,12
split_ratios = 0.5,0.25,0.25
split_seed = 9
drop_nihss = true

[model]
channels = 8,16
embed_dim = 8
structured_hidden = 24,12,8

[contrastive]
temperature = 0.5
strategy = average_all

[augment]
patch_size = 4
blur_std_range = 0.0,0.0

[stage1]
epochs = 3
lr = 0.002
fusion_mode = average

[stage2]
epochs = 2
lr = 1e-5
"""
    path = tmp_path / "c.ini"
    path.write_text(text)
    cfg = load_config(path)
    assert cfg.synth.n_patients == 25 and cfg.synth.hw == (16, 16)
    assert cfg.data.image_size == (12, 12)
    assert cfg.data.split.ratios == (0.5, 0.25, 0.25) and cfg.data.split.seed == 9
    assert cfg.data.drop_nihss is True
    assert cfg.model.channels == (8, 16)
    assert cfg.contrastive.temperature == 0.5
    assert cfg.contrastive.strategy is LossStrategy.AVERAGE_ALL
    assert cfg.augment.patch_size == 4
    assert cfg.stage1.epochs == 3 and cfg.stage1.lr_stage1 == pytest.approx(0.002)
    assert cfg.stage1.fusion_mode is FusionMode.AVERAGE
    assert cfg.stage2.epochs == 2 and cfg.stage2.lr_stage2 == pytest.approx(1e-5)
    # embedded configs follow the shared sections
    assert cfg.stage1.contrastive.temperature == 0.5
    assert cfg.stage1.augment.patch_size == 4


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[stage1]\nepchs = 3\n")
    with pytest.raises(ConfigurationError, match="epchs"):
        load_config(path)


def test_unknown_section_rejected(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[stagex]\nepochs = 3\n")
    with pytest.raises(ConfigurationError, match="stagex"):
        load_config(path)


def test_bad_enum_value(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[contrastive]\nstrategy = sometimes\n")
    with pytest.raises(ConfigurationError, match="sometimes"):
        load_config(path)


def test_snapshot_round_trip(tmp_path):
    cfg = with_seed(default_experiment(), 17)
    snapshot_config(cfg, tmp_path / "snap.ini", run_meta={"verb": "train", "data": "/x"})
    back = load_config(tmp_path / "snap.ini")
    assert back.synth == cfg.synth
    assert back.data == cfg.data
    assert back.model == cfg.model
    assert back.augment == cfg.augment
    assert back.contrastive == cfg.contrastive
    assert back.stage1 == cfg.stage1
    assert back.stage2 == cfg.stage2


def test_with_seed_touches_training_not_split():
    cfg = with_seed(default_experiment(), 99)
    assert cfg.synth.seed == 99
    assert cfg.stage1.seed == 99 and cfg.stage2.seed == 99
    assert cfg.contrastive.rng_seed == 99
    assert cfg.data.split.seed == default_experiment().data.split.seed
