"""Feature extraction: beat detection, HRV scalars, kinematic scalars,
and 5-minute aggregation."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hiersig.config import WEEK_BINS
from hiersig.features import (ACC_FEATURES, ACC_VALID, FEATURE_NAMES,
                              PPG_FEATURES, PPG_VALID, acc_features,
                              aggregate_bins, detect_beats, fit_standardization,
                              hrv_features, nn_intervals_ms, segment_features,
                              shannon_entropy, standardize)
from conftest import gaussian_pulse_train


def hrv_oracle(nn):
    """Straight-from-definition reference for the 10 PPG scalars."""
    nn = np.asarray(nn, dtype=np.float64)
    diffs = np.diff(nn)

    def entropy(series):
        series = np.asarray(series, dtype=np.float64)
        if series.size == 0 or series.max() == series.min():
            return 0.0
        edges = np.linspace(series.min(), series.max(), 11)
        counts = np.zeros(10)
        for v in series:
            # linear scan, inclusive right edge on the last bin
            for b in range(10):
                if edges[b] <= v <= edges[b + 1] and (v < edges[b + 1] or b == 9):
                    counts[b] += 1
                    break
        total = counts.sum()
        return -sum((c / total) * math.log(c / total) for c in counts if c > 0)

    def percentile(series, q):
        s = np.sort(series)
        pos = (len(s) - 1) * q / 100.0
        lo, hi = int(math.floor(pos)), int(math.ceil(pos))
        return s[lo] + (s[hi] - s[lo]) * (pos - lo)

    return np.array([
        60000.0 / (sum(nn) / len(nn)),
        sum(nn) / len(nn),
        percentile(nn, 50),
        percentile(nn, 20),
        percentile(nn, 80),
        math.sqrt(sum(d * d for d in diffs) / len(diffs)),
        math.sqrt(sum((v - nn.mean()) ** 2 for v in nn) / len(nn)),
        entropy(nn),
        entropy(diffs),
        100.0 * sum(1 for d in diffs if abs(d) > 30.0) / len(diffs),
    ])


class TestDetectBeats:
    def test_60bpm_pulse_train(self):
        sig, beats = gaussian_pulse_train(60.0)
        idx = detect_beats(sig)
        assert abs(len(idx) - len(beats)) <= 1
        gaps = np.diff(idx)
        assert np.all(np.abs(gaps - 100) <= 2)

    def test_all_zero_invalid(self):
        assert detect_beats(np.zeros(1500)).size == 0

    def test_90bpm_mean_nn(self):
        sig, _ = gaussian_pulse_train(90.0)
        nn = nn_intervals_ms(detect_beats(sig))
        assert abs(nn.mean() - 60000.0 / 90.0) / (60000.0 / 90.0) < 0.02

    def test_refractory_respected(self):
        sig, _ = gaussian_pulse_train(60.0)
        idx = detect_beats(sig, refractory_s=0.33)
        assert np.all(np.diff(idx) >= 33)

    def test_strictly_increasing(self):
        rng = np.random.default_rng(0)
        sig, _ = gaussian_pulse_train(75.0)
        sig = sig + 0.05 * rng.standard_normal(sig.size)
        idx = detect_beats(sig)
        assert np.all(np.diff(idx) > 0)


class TestHrvFeatures:
    def test_constant_series(self):
        vec = hrv_features([1000.0, 1000.0, 1000.0])
        names = dict(zip(PPG_FEATURES, vec))
        assert names["Heart_Rate_BPM_Mean"] == pytest.approx(60.0)
        assert names["RMSSD_Msec"] == 0.0
        assert names["SDNN_Msec"] == 0.0
        assert names["PNN30_Percent"] == 0.0
        assert names["Shannon_Ent_RR_Nats"] == 0.0

    def test_hand_arithmetic(self):
        vec = hrv_features([800.0, 850.0, 860.0])
        names = dict(zip(PPG_FEATURES, vec))
        assert names["RMSSD_Msec"] == pytest.approx(36.0555, abs=5e-5)
        assert names["PNN30_Percent"] == pytest.approx(50.0)
        assert names["RR_Mean_Msec"] == pytest.approx((800 + 850 + 860) / 3)

    def test_matches_definitional_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            n = rng.integers(2, 30)
            nn = rng.uniform(400.0, 1500.0, size=n)
            got = hrv_features(nn)
            want = hrv_oracle(nn)
            np.testing.assert_allclose(got, want, rtol=0, atol=1e-9)

    def test_too_few_intervals(self):
        assert hrv_features([800.0]) is None

    @given(st.floats(min_value=0.1, max_value=10.0),
           st.integers(min_value=3, max_value=25), st.integers())
    @settings(max_examples=50, deadline=None)
    def test_scale_property(self, c, n, seed):
        """Scaling NN by c scales RMSSD/SDNN/percentiles by c, divides HR by c."""
        rng = np.random.default_rng(abs(seed) % 2 ** 32)
        nn = rng.uniform(500.0, 1200.0, size=n)
        base = hrv_features(nn)
        scaled = hrv_features(c * nn)
        for i, name in enumerate(PPG_FEATURES):
            if name in ("RR_Mean_Msec", "RR_Median_Msec", "RR_20th_Percentile_Msec",
                        "RR_80th_Percentile_Msec", "RMSSD_Msec", "SDNN_Msec"):
                assert scaled[i] == pytest.approx(c * base[i], rel=1e-9)
        assert scaled[0] == pytest.approx(base[0] / c, rel=1e-9)

    def test_permutation_property(self):
        rng = np.random.default_rng(3)
        nn = rng.uniform(500.0, 1200.0, size=15)
        base = hrv_features(nn)
        perm = hrv_features(rng.permutation(nn))
        stable = ("SDNN_Msec", "RR_Median_Msec", "RR_20th_Percentile_Msec",
                  "RR_80th_Percentile_Msec", "Shannon_Ent_RR_Nats",
                  "RR_Mean_Msec", "Heart_Rate_BPM_Mean")
        for i, name in enumerate(PPG_FEATURES):
            if name in stable:
                assert perm[i] == pytest.approx(base[i], rel=1e-12)

    def test_percentiles_ordered(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            nn = rng.uniform(400, 1500, size=rng.integers(2, 40))
            v = dict(zip(PPG_FEATURES, hrv_features(nn)))
            assert (v["RR_20th_Percentile_Msec"] <= v["RR_Median_Msec"]
                    <= v["RR_80th_Percentile_Msec"])
            assert v["RMSSD_Msec"] >= 0 and v["SDNN_Msec"] >= 0
            assert 0 <= v["PNN30_Percent"] <= 100


class TestAccFeatures:
    def test_still_gravity_window(self):
        w = np.zeros((3, 1500))
        w[2] = 1.0
        vec, ok = acc_features(w)
        names = dict(zip(ACC_FEATURES, vec))
        assert not ok  # no zero crossings, constant magnitude
        assert names["Log_Energy"] == pytest.approx(0.0)  # log(0+0+1)
        assert names["Covariance_Condition"] == 1e12

    def test_single_axis_sine_zero_crossings(self):
        fs = 100.0
        t = np.arange(1500) / fs
        w = np.zeros((3, 1500))
        w[0] = np.sin(2 * np.pi * 2.0 * t)
        vec, ok = acc_features(w, fs)
        names = dict(zip(ACC_FEATURES, vec))
        assert ok
        assert names["Zero_Crossing_Avg_Seconds"] == pytest.approx(0.25, abs=1.0 / fs)

    def test_isotropic_noise_condition(self):
        hits = 0
        for seed in range(100):
            w = np.random.default_rng(seed).standard_normal((3, 1500))
            vec, ok = acc_features(w)
            cond = dict(zip(ACC_FEATURES, vec))["Covariance_Condition"]
            assert cond >= 1.0
            hits += 1.0 <= cond <= 3.0
        assert hits >= 95

    def test_rotation_invariance_of_condition(self):
        from scipy.spatial.transform import Rotation

        rng = np.random.default_rng(7)
        w = rng.standard_normal((3, 1500)) * np.array([[2.0], [1.0], [0.5]])
        base = dict(zip(ACC_FEATURES, acc_features(w)[0]))
        for seed in range(5):
            R = Rotation.random(rng=np.random.default_rng(seed)).as_matrix()
            rot = dict(zip(ACC_FEATURES, acc_features(R @ w)[0]))
            assert rot["Covariance_Condition"] == pytest.approx(
                base["Covariance_Condition"], rel=1e-6)

    def test_sleep_coefficient_counts_thresholds(self):
        t = np.arange(1500) / 100.0
        w = np.zeros((3, 1500))
        w[2] = 1.0 + 0.05 * np.sin(2 * np.pi * 1.0 * t)  # ptp ~ 0.1 g
        vec, _ = acc_features(w)
        got = dict(zip(ACC_FEATURES, vec))["Sleep_Coefficient"]
        want = np.sum(np.ptp(np.sqrt((w ** 2).sum(axis=0)))
                      > np.logspace(-3, 0, 16))
        assert got == want
        assert got == int(got) and 0 <= got <= 16

    def test_no_nan_in_emitted_vectors(self):
        rng = np.random.default_rng(11)
        for _ in range(30):
            w = rng.standard_normal((3, 1500)) * rng.uniform(0.01, 2.0)
            vec, _ = acc_features(w)
            assert np.isfinite(vec).all()


class TestSegmentFeatures:
    def test_validity_bits(self):
        sig, _ = gaussian_pulse_train(70.0)
        w = np.random.default_rng(0).standard_normal((3, 1500)) * 0.1
        vec, validity = segment_features(sig, w)
        assert validity & PPG_VALID and validity & ACC_VALID
        assert np.isfinite(vec).all()

    def test_flat_ppg_invalidates_hrv_only(self):
        w = np.random.default_rng(1).standard_normal((3, 1500)) * 0.1
        vec, validity = segment_features(np.zeros(1500), w)
        assert not (validity & PPG_VALID)
        assert validity & ACC_VALID
        assert np.all(vec[:len(PPG_FEATURES)] == 0.0)


class TestAggregateBins:
    def test_identical_vectors_mean(self):
        v = np.arange(19, dtype=float)
        vecs = np.tile(v, (20, 1))
        ts = np.full(20, 1000, dtype=np.int64)
        seq = aggregate_bins(vecs, ts, np.ones(20, bool), "s", week_start=0)
        assert not seq.missing[3]          # 1000 // 300 == 3
        np.testing.assert_allclose(seq.values[3], v)
        assert seq.counts[3] == 20

    def test_mask_semantics(self):
        vecs = np.ones((20, 19))
        vecs[7:] = 5.0
        valid = np.zeros(20, bool)
        valid[:7] = True
        ts = np.full(20, 0, dtype=np.int64)
        seq = aggregate_bins(vecs, ts, valid, "s", week_start=0)
        np.testing.assert_allclose(seq.values[0], 1.0)
        assert seq.counts[0] == 7

    def test_full_week_bin_count(self):
        assert WEEK_BINS == 2016
        ts = np.arange(WEEK_BINS, dtype=np.int64) * 300
        vecs = np.ones((WEEK_BINS, 19))
        seq = aggregate_bins(vecs, ts, np.ones(WEEK_BINS, bool), "s", week_start=0)
        assert seq.values.shape == (2016, 19)
        assert not seq.missing.any()

    def test_empty_week_all_missing(self):
        seq = aggregate_bins(np.zeros((0, 19)), np.zeros(0, np.int64),
                             np.zeros(0, bool), "s", week_start=0)
        assert seq.missing.all()

    def test_order_invariant(self):
        rng = np.random.default_rng(5)
        vecs = rng.standard_normal((40, 19))
        ts = rng.integers(0, 2016 * 300, size=40).astype(np.int64)
        valid = rng.random(40) < 0.8
        a = aggregate_bins(vecs, ts, valid, "s", 0)
        perm = rng.permutation(40)
        b = aggregate_bins(vecs[perm], ts[perm], valid[perm], "s", 0)
        np.testing.assert_allclose(a.values, b.values, atol=1e-12)
        assert np.array_equal(a.missing, b.missing)

    def test_standardization_contract(self):
        rng = np.random.default_rng(6)
        seqs = []
        for i in range(5):
            vecs = rng.standard_normal((300, 19)) * 3.0 + 1.5
            ts = rng.choice(2016, size=300, replace=False).astype(np.int64) * 300
            seqs.append(aggregate_bins(vecs, ts, np.ones(300, bool), f"s{i}", 0))
        mean, std = fit_standardization(seqs)
        rows = np.concatenate([standardize(q, mean, std).values[~q.missing]
                               for q in seqs])
        assert np.abs(rows.mean(axis=0)).max() < 1e-6
        assert np.abs(rows.std(axis=0) - 1.0).max() < 1e-6
