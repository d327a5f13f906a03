import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusionprog.datamodel import ImageVolume, Modality, StructuredRecord, nihss_flags_from_names
from fusionprog.errors import ImputationError
from fusionprog.preprocess import (
    ImputationModel,
    TabularStandardizer,
    correct_bias,
    fit_imputer,
    impute,
    resize_volume,
)


def volume(voxels):
    return ImageVolume(Modality.DWI, np.asarray(voxels, dtype=np.float32), "p1")


def record(values, missing):
    values = np.asarray(values, dtype=float)
    names = tuple(f"a{i}" for i in range(len(values)))
    return StructuredRecord(values, np.asarray(missing, dtype=bool), names, nihss_flags_from_names(names))


class TestCorrectBias:
    def test_constant_slice_unchanged(self):
        vol = volume(np.full((2, 16, 16), 100.0))
        out = correct_bias(vol)
        np.testing.assert_allclose(out.voxels, vol.voxels, rtol=1e-5)

    def test_planar_ramp_flattened(self):
        yy, xx = np.mgrid[0:32, 0:32]
        ramp = 0.04 * (xx - 15.5) + 0.02 * (yy - 15.5)
        biased = 100.0 * np.exp(ramp)
        out = correct_bias(volume(biased[None]))
        cv_before = biased.std() / biased.mean()
        corrected = out.voxels[0]
        cv_after = corrected.std() / corrected.mean()
        assert cv_before / max(cv_after, 1e-12) >= 5.0

    def test_all_zero_slice_warns_and_passes_through(self):
        vol = volume(np.zeros((1, 16, 16)))
        with pytest.warns(RuntimeWarning, match="skipped"):
            out = correct_bias(vol)
        np.testing.assert_array_equal(out.voxels, vol.voxels)

    def test_background_zeros_preserved_exactly(self):
        voxels = np.zeros((1, 24, 24), dtype=np.float32)
        yy, xx = np.mgrid[0:24, 0:24]
        mask = (yy - 11.5) ** 2 + (xx - 11.5) ** 2 <= 81
        voxels[0][mask] = 100.0 + 5.0 * np.sin(xx[mask] / 3.0)
        out = correct_bias(volume(voxels))
        assert out.shape == (1, 24, 24)
        np.testing.assert_array_equal(out.voxels[0][~mask], 0.0)
        assert (out.voxels[0][mask] > 0).all()

    def test_mean_intensity_preserved(self):
        yy, xx = np.mgrid[0:20, 0:20]
        biased = 80.0 * np.exp(0.03 * xx)
        out = correct_bias(volume(biased[None]))
        np.testing.assert_allclose(out.voxels[0].mean(), biased.mean(), rtol=1e-4)


class TestResizeVolume:
    def test_downscale_shape(self):
        vol = volume(np.random.default_rng(0).normal(size=(2, 256, 256)))
        assert resize_volume(vol, (224, 224)).shape == (2, 224, 224)

    def test_identity_when_target_equals_source(self):
        vol = volume(np.random.default_rng(1).normal(size=(3, 33, 17)))
        out = resize_volume(vol, (33, 17))
        np.testing.assert_allclose(out.voxels, vol.voxels, atol=1e-6)

    def test_blob_centroid_tracks_scaling(self):
        voxels = np.zeros((1, 64, 64))
        yy, xx = np.mgrid[0:64, 0:64]
        blob = np.exp(-(((yy - 40) / 4.0) ** 2 + ((xx - 22) / 4.0) ** 2))
        voxels[0] = blob
        out = resize_volume(volume(voxels), (56, 56)).voxels[0].astype(np.float64)
        total = out.sum()
        cy = (out * np.arange(56)[:, None]).sum() / total
        cx = (out * np.arange(56)[None, :]).sum() / total
        scale = 55.0 / 63.0
        assert abs(cy - 40 * scale) <= 1.0
        assert abs(cx - 22 * scale) <= 1.0

    def test_aspect_ratio_crop(self):
        vol = volume(np.random.default_rng(2).normal(size=(1, 32, 64)))
        out = resize_volume(vol, (16, 16))
        assert out.shape == (1, 16, 16)


class TestImputer:
    def test_mode_fill(self):
        train = [record([1.0], [False]), record([1.0], [False]), record([2.0], [False]), record([0.0], [True])]
        model = fit_imputer(train)
        assert model.fill_values[0] == 1.0

    def test_tie_breaks_to_smallest(self):
        train = [record([1.0], [False]), record([2.0], [False])]
        assert fit_imputer(train).fill_values[0] == 1.0

    def test_never_observed_column_names_it(self):
        train = [record([1.0, np.nan], [False, True])]
        with pytest.raises(ImputationError, match="a1"):
            fit_imputer(train)

    def test_fill_matches_histogram_oracle(self, rng):
        pool = np.array([0.5, 1.25, 1.25, 3.0, 7.5])
        rows = []
        for _ in range(300):
            values = rng.choice(pool, size=4)
            missing = rng.random(4) < 0.154
            rows.append(record(np.where(missing, np.nan, values), missing))
        model = fit_imputer(rows)
        values = np.stack([r.values for r in rows])
        masks = np.stack([r.missing_mask for r in rows])
        for j in range(4):
            observed = values[~masks[:, j], j]
            candidates, counts = np.unique(np.round(observed, 6), return_counts=True)
            best = candidates[counts == counts.max()].min()
            assert model.fill_values[j] == best

    def test_impute_identity_when_nothing_missing(self):
        model = ImputationModel(np.array([9.0, 9.0]), ("a0", "a1"))
        r = record([1.0, 2.0], [False, False])
        out = impute(r, model)
        np.testing.assert_array_equal(out.values, r.values)
        assert not out.missing_mask.any()

    def test_all_missing_becomes_fill_values(self):
        model = ImputationModel(np.array([4.0, 5.0]), ("a0", "a1"))
        out = impute(record([np.nan, np.nan], [True, True]), model)
        np.testing.assert_array_equal(out.values, [4.0, 5.0])

    @given(seed=st.integers(0, 10**6))
    @settings(max_examples=25, deadline=None)
    def test_partial_imputation_positionwise(self, seed):
        rng = np.random.default_rng(seed)
        values = rng.normal(size=6)
        missing = rng.random(6) < 0.3
        model = ImputationModel(np.arange(6, dtype=float), tuple(f"a{i}" for i in range(6)))
        out = impute(record(np.where(missing, np.nan, values), missing), model)
        np.testing.assert_array_equal(out.values[missing], np.arange(6.0)[missing])
        np.testing.assert_array_equal(out.values[~missing], values[~missing])

    def test_impute_is_idempotent(self):
        model = ImputationModel(np.array([1.5, 2.5, 3.5]), ("a0", "a1", "a2"))
        r = record([np.nan, 7.0, np.nan], [True, False, True])
        once = impute(r, model)
        twice = impute(once, model)
        np.testing.assert_array_equal(once.values, twice.values)

    def test_arity_mismatch(self):
        model = ImputationModel(np.array([1.0]), ("a0",))
        with pytest.raises(ImputationError, match="arity|attributes"):
            impute(record([1.0, 2.0], [False, False]), model)

    def test_no_leakage_from_validation_data(self, rng):
        train = [record([float(rng.integers(0, 3))], [False]) for _ in range(50)]
        model_before = fit_imputer(train)
        # Perturbing validation rows must not move the fitted fill values.
        _ = [record([999.0], [False]) for _ in range(50)]
        model_after = fit_imputer(train)
        np.testing.assert_array_equal(model_before.fill_values, model_after.fill_values)

    def test_json_round_trip(self):
        model = ImputationModel(np.array([1.5, -2.0]), ("age", "nihss_01"))
        text = model.to_json()
        payload = json.loads(text)
        assert payload == {"age": 1.5, "nihss_01": -2.0}
        back = ImputationModel.from_json(text)
        assert set(back.attr_names) == {"age", "nihss_01"}


def test_standardizer_round_trip(rng):
    matrix = rng.normal(loc=3.0, scale=2.0, size=(100, 5))
    scaler = TabularStandardizer.fit(matrix)
    z = scaler.apply(matrix)
    np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(z.std(axis=0), 1.0, atol=1e-12)
