import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from attentionmixer.data import (
    FeatureSpec,
    KNNImputer,
    MetadataPreprocessor,
    MetadataRecord,
    SchemaError,
    Volume,
    VolumeFormatError,
    clip_normalize,
    decode_volume,
    encode_volume,
    generate_synthetic_cohort,
    knn_impute,
    load_manifest,
    load_volume,
    one_hot_expand,
    resample_volume,
    save_volume,
)
from attentionmixer.data.cohort import ManifestError, collapse_record, load_cohort
from attentionmixer.data.metadata import to_arrays
from oracles import knn_impute_oracle, linear_percentile, trilinear_oracle


def rec(values, pid="p"):
    vals = [0.0 if v is None else v for v in values]
    return MetadataRecord(pid, vals, [v is not None for v in values])


class TestResample:
    def test_identity(self, rng):
        v = Volume(rng.normal(size=(4, 4, 4)), (2.0, 2.0, 2.0))
        np.testing.assert_array_equal(resample_volume(v, 4).voxels, v.voxels)

    def test_constant(self):
        out = resample_volume(Volume(np.full((3, 5, 7), 2.5)), 6).voxels
        np.testing.assert_allclose(out, 2.5, rtol=1e-6)
        assert out.shape == (6, 6, 6)

    def test_ramp_matches_trilinear_oracle(self):
        src = np.zeros((2, 2, 2))
        src[1] = 1.0
        got = resample_volume(Volume(src), 4).voxels
        np.testing.assert_allclose(got, trilinear_oracle(src, (1, 1, 1), 4), atol=1e-6)
        np.testing.assert_allclose(got[:, 0, 0], [0.0, 0.25, 0.75, 1.0], atol=1e-6)

    def test_anisotropic_matches_oracle(self, rng):
        src = rng.normal(size=(3, 5, 4))
        spacing = (2.0, 1.0, 1.5)
        got = resample_volume(Volume(src, spacing), 5)
        np.testing.assert_allclose(got.voxels, trilinear_oracle(src, spacing, 5), atol=1e-5)
        assert len(set(got.spacing)) == 1

    def test_degenerate_axis(self):
        with pytest.raises(ValueError):
            resample_volume(Volume(np.zeros((1, 4, 4))), 4)


class TestClipNormalize:
    def test_constant_is_zero(self):
        np.testing.assert_array_equal(clip_normalize(Volume(np.full((2, 2, 2), 7.0))).voxels, 0.0)

    def test_uniform_ramp_value(self):
        vals = np.arange(1000, dtype=np.float64)
        out = clip_normalize(Volume(vals.reshape(10, 10, 10))).voxels.ravel()
        p1, p99 = linear_percentile(vals, 1), linear_percentile(vals, 99)
        assert p1 == pytest.approx(9.99) and p99 == pytest.approx(989.01)
        assert out[500] == pytest.approx((500 - p1) / (p99 - p1), abs=1e-6)
        assert out[500] == pytest.approx(0.50051, abs=1e-5)

    def test_outlier_is_clipped(self):
        vals = np.arange(1000, dtype=np.float64)
        vals[-1] = 1e9
        out = clip_normalize(Volume(vals.reshape(10, 10, 10))).voxels.ravel()
        assert out.max() == 1.0
        assert out[500] == pytest.approx((500 - 9.99) / (linear_percentile(vals, 99) - 9.99), abs=1e-6)

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (3, 4, 5), elements=st.floats(-1e3, 1e3)))
    def test_range(self, x):
        once = clip_normalize(Volume(x)).voxels
        assert once.min() >= 0.0 and once.max() <= 1.0

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (1, 1, 101), elements=st.floats(-1e3, 1e3)))
    def test_idempotent_when_percentiles_hit_order_statistics(self, x):
        # with 101 voxels the 1st/99th percentiles are exact order statistics
        once = clip_normalize(Volume(x)).voxels
        np.testing.assert_allclose(clip_normalize(Volume(once)).voxels, once, atol=1e-6)


class TestVolumeFile:
    def test_round_trip(self, tmp_path, rng):
        v = Volume(rng.normal(size=(3, 4, 5)), (0.5, 1.0, 2.0))
        save_volume(v, tmp_path / "a.vol")
        back = load_volume(tmp_path / "a.vol")
        assert back.voxels.tobytes() == v.voxels.tobytes()
        assert back.spacing == v.spacing

    def test_bad_magic(self):
        buf = bytearray(encode_volume(Volume(np.zeros((2, 2, 2)))))
        buf[:4] = b"NOPE"
        with pytest.raises(VolumeFormatError) as err:
            decode_volume(bytes(buf))
        assert err.value.offset == 0

    def test_truncated_payload(self):
        buf = encode_volume(Volume(np.zeros((2, 2, 2))))[:-4]
        with pytest.raises(VolumeFormatError, match="7 voxels"):
            decode_volume(buf)

    def test_dimension_overflow(self):
        import struct

        buf = struct.pack("<4sHBB3I3f", b"AMV1", 1, 1, 0, 4096, 4096, 4096, 1, 1, 1)
        with pytest.raises(VolumeFormatError, match="overflow"):
            decode_volume(buf)


SCHEMA = [FeatureSpec("age"), FeatureSpec("sex", "categorical", ("A", "B", "C"))]


class TestOneHot:
    def test_level(self):
        r = one_hot_expand(SCHEMA[1:], "p", {"sex": "A"})
        np.testing.assert_array_equal(r.values, [1, 0, 0])

    def test_missing_categorical(self):
        r = one_hot_expand(SCHEMA, "p", {"age": 3.0, "sex": None})
        np.testing.assert_array_equal(r.observed, [True, False, False, False])

    def test_width(self):
        schema = [FeatureSpec("a"), FeatureSpec("b"), FeatureSpec("c", "categorical", ("x", "y", "z"))]
        assert one_hot_expand(schema, "p", {"a": 1, "b": 2, "c": "y"}).values.shape == (5,)

    def test_unknown_level(self):
        with pytest.raises(SchemaError):
            one_hot_expand(SCHEMA, "p", {"age": 1.0, "sex": "Q"})

    def test_collapse_inverts(self):
        raw = {"age": 4.5, "sex": "C"}
        assert collapse_record(SCHEMA, one_hot_expand(SCHEMA, "p", raw)) == raw


class TestImputer:
    def test_complete_unchanged(self):
        out = knn_impute([rec([1.0, 2.0]), rec([3.0, 4.0])], k=1)
        np.testing.assert_array_equal(out[0].values, [1.0, 2.0])

    def test_equidistant_donors(self):
        out = knn_impute([rec([1.0, None]), rec([1.0, 5.0]), rec([1.0, 7.0])], k=2)
        assert out[0].values[1] == 6.0

    def test_nearest_donor(self):
        out = knn_impute([rec([0.0, None]), rec([0.0, 4.0]), rec([9.0, 100.0])], k=1)
        assert out[0].values[1] == 4.0

    def test_matches_oracle(self, rng):
        rows = [[None if rng.random() < 0.25 else float(rng.integers(0, 5)) for _ in range(4)] for _ in range(12)]
        rows = [r for r in rows if any(v is not None for v in r)]
        got = knn_impute([rec(r) for r in rows], k=3)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            want = knn_impute_oracle(rows, 3)
        for g, w in zip(got, want):
            np.testing.assert_allclose(g.values, w)

    def test_never_touches_observed(self, rng):
        rows = [[None if rng.random() < 0.3 else rng.normal() for _ in range(5)] for _ in range(15)]
        rows[0] = [1.0] * 5
        got = knn_impute([rec(r) for r in rows], k=2)
        for r, g in zip(rows, got):
            obs = np.array([v is not None for v in r])
            np.testing.assert_array_equal(g.values[obs], np.array([v for v in r if v is not None]))
            assert g.complete

    def test_no_donor_falls_back_to_mean(self):
        imp = KNNImputer(1).fit([rec([1.0, None]), rec([3.0, None])])
        with pytest.warns(RuntimeWarning, match="no donor"):
            out = imp.transform([rec([2.0, None])])
        assert out[0].values[1] == 0.0  # column never observed: mean of nothing is 0

    def test_fully_missing_untouched(self):
        m = MetadataRecord.missing("x", 2)
        assert knn_impute([m, rec([1.0, 2.0])], k=1)[0] is m

    def test_validation_records_do_not_affect_fit(self, rng):
        train = [rec([rng.normal(), rng.normal()]) for _ in range(8)]
        pre = MetadataPreprocessor([FeatureSpec("a"), FeatureSpec("b")], k=2).fit(train)
        target = rec([0.3, None])
        first = pre.transform([target, rec([9.0, 9.0])])[0].values
        second = pre.transform([target])[0].values
        np.testing.assert_array_equal(first, second)

    def test_to_arrays_rejects_partial(self):
        with pytest.raises(ValueError, match="impute first"):
            to_arrays([rec([1.0, None])])


class TestCohort:
    def test_same_seed_same_bytes(self, tmp_path):
        a = generate_synthetic_cohort(tmp_path / "a", seed=3, n_patients=12, side=8)
        generate_synthetic_cohort(tmp_path / "b", seed=3, n_patients=12, side=8)
        for s in a.samples:
            assert (tmp_path / "a" / s.volume_path).read_bytes() == (tmp_path / "b" / s.volume_path).read_bytes()
        assert (tmp_path / "a/manifest.json").read_bytes() == (tmp_path / "b/manifest.json").read_bytes()

    def test_fully_missing_count_recorded(self, tmp_path):
        m = generate_synthetic_cohort(tmp_path, seed=0, n_patients=200, side=8, missing_rate=0.1)
        per_patient = {s.patient_id: s.metadata.fully_missing for s in m.samples}
        assert m.info["n_fully_missing"] == sum(per_patient.values())
        assert 8 <= m.info["n_fully_missing"] <= 32

    def test_balanced_and_multiscan(self, tmp_path):
        m = generate_synthetic_cohort(tmp_path, seed=1, n_patients=40, side=8, multi_scan_rate=0.5)
        labels = {s.patient_id: s.label for s in m.samples}
        assert sum(labels.values()) == 20
        assert len(m.samples) > len(m.patient_ids)
        assert len(m.schema) == 8 and m.d_m == 10

    def test_manifest_round_trip(self, tmp_path):
        m = generate_synthetic_cohort(tmp_path, seed=2, n_patients=10, side=8)
        back = load_manifest(tmp_path)
        assert [s.patient_id for s in back.samples] == [s.patient_id for s in m.samples]
        for a, b in zip(m.samples, back.samples):
            np.testing.assert_array_equal(a.metadata.observed, b.metadata.observed)
            np.testing.assert_array_equal(a.metadata.values[a.metadata.observed], b.metadata.values[b.metadata.observed])
        assert load_cohort(back, 8).volumes.shape == (len(m.samples), 8, 8, 8)

    def test_informative_features_shift(self, tmp_path):
        m = generate_synthetic_cohort(
            tmp_path, seed=0, n_patients=1000, side=8, missing_rate=0.0, field_missing_rate=0.0, multi_scan_rate=0.0
        )
        x = np.array([s.metadata.values for s in m.samples])
        y = np.array([s.label for s in m.samples])
        effect = (x[y == 1].mean(0) - x[y == 0].mean(0)) / x.std(0)
        assert effect[0] > 0.6 and effect[1] > 0.6
        assert np.all(np.abs(effect[2:7]) < 0.2)  # about 3 standard errors at n=1000

    def test_null_signal_volumes(self, tmp_path):
        m = generate_synthetic_cohort(tmp_path, seed=0, n_patients=40, side=8, signal_strength=0.0)
        c = load_cohort(m, 8)
        y = c.labels.astype(bool)
        assert abs(c.volumes[y].mean() - c.volumes[~y].mean()) < 0.02

    @pytest.mark.parametrize("bad", [{"missing_rate": -0.1}, {"multi_scan_rate": 1.5}, {"n_patients": 5}])
    def test_invalid_arguments(self, tmp_path, bad):
        with pytest.raises(ValueError):
            generate_synthetic_cohort(tmp_path, **{"side": 8, **bad})

    def test_malformed_manifest(self, tmp_path):
        (tmp_path / "manifest.json").write_text(json.dumps({"schema": []}))
        with pytest.raises(ManifestError):
            load_manifest(tmp_path)

    def test_bad_label(self, tmp_path):
        doc = {"schema": [], "samples": [{"patient_id": "a", "volume": "v", "label": 3}]}
        (tmp_path / "manifest.json").write_text(json.dumps(doc))
        with pytest.raises(ManifestError):
            load_manifest(tmp_path)
