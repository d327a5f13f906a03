import numpy as np
import pytest

from fusionprog.datamodel import SplitSpec
from fusionprog.pipeline import DataConfig, prepare_data
from fusionprog.synthgen import SynthConfig, generate_cohort


@pytest.fixture(scope="session")
def tiny_cohort(tmp_path_factory):
    """A small but non-trivial cohort shared by pipeline/training tests."""
    out = tmp_path_factory.mktemp("tiny_cohort")
    cfg = SynthConfig(
        n_patients=50,
        n_slices=6,
        hw=(24, 24),
        seed=7,
        adc_signal_strength=6.0,
        dwi_signal_strength=6.0,
        tabular_signal_strength=1.2,
    )
    manifest = generate_cohort(cfg, out)
    return cfg, manifest, out


@pytest.fixture(scope="session")
def tiny_prepared(tiny_cohort):
    _, _, out = tiny_cohort
    data_cfg = DataConfig(n_slices=6, image_size=(16, 16), split=SplitSpec((0.6, 0.2, 0.2), seed=5))
    return prepare_data(out, data_cfg)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
