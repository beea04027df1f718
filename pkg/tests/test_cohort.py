"""Synthetic cohort: determinism, scenario gating, label construction, and
the planted-phenotype separability contract (signal-level oracles)."""

import numpy as np
import pytest
from scipy.signal import find_peaks

from hiersig.cohort import (InputError, label_tasks, make_cohort,
                            sample_profile, synth_one_recording,
                            synth_recordings)
from hiersig.evaluation import auroc
from hiersig.timeutil import DAY_SECONDS, calendar_indices


def _beat_indices(ppg, fs):
    height = 0.5 * np.percentile(ppg, 98)
    peaks, _ = find_peaks(ppg, height=height, distance=int(0.33 * fs))
    return peaks


def _recording_hr(rec):
    peaks = _beat_indices(rec.ppg, rec.ppg_hz)
    if len(peaks) < 4:
        return None
    return 60.0 * rec.ppg_hz / np.mean(np.diff(peaks))


def notch_oracle_score(recordings):
    """Mean relative waveform amplitude ~0.25 s after each systolic peak."""
    vals = []
    for rec in recordings[:80]:
        fs = rec.ppg_hz
        lag = int(round(0.25 * fs))
        peaks = _beat_indices(rec.ppg, fs)
        peaks = peaks[(peaks + lag + 1 < rec.ppg.size)]
        if len(peaks) < 3:
            continue
        vals.append(np.mean(rec.ppg[peaks + lag] / rec.ppg[peaks]))
    return float(np.mean(vals))


def rhythm_oracle_score(recordings):
    """Circular phase gap between weekday and weekend daily heart-rate fits."""
    buckets = {True: ([], []), False: ([], [])}   # weekend -> (hours, hrs)
    for rec in recordings:
        hr = _recording_hr(rec)
        if hr is None:
            continue
        dow, tod = calendar_indices(rec.start_epoch_s, rec.tz_offset_min)
        hours, rates = buckets[dow >= 6]
        hours.append((tod - 1) / 12.0)
        rates.append(hr)

    def phase(hours, rates):
        h = np.asarray(hours)
        r = np.asarray(rates)
        w = 2 * np.pi * h / 24.0
        A = np.stack([np.ones_like(w), np.cos(w), np.sin(w)], axis=1)
        coef, *_ = np.linalg.lstsq(A, r, rcond=None)
        return np.arctan2(coef[2], coef[1]) * 24.0 / (2 * np.pi)

    shift = phase(*buckets[True]) - phase(*buckets[False])
    return float((shift + 12.0) % 24.0 - 12.0)


@pytest.fixture(scope="module")
def oracle_cohort():
    profiles = make_cohort(60, master_seed=911)
    labels = {}
    for row in label_tasks(profiles):
        labels.setdefault(row["task"], {})[row["subject_id"]] = row["y"]
    recs = {p.subject_id: list(synth_recordings(
        p, weeks=1, scenario="all", master_seed=911, coverage=0.18))
        for p in profiles}
    return profiles, labels, recs


class TestDeterminism:
    def test_profiles_bit_identical(self):
        a = make_cohort(10, master_seed=42)
        b = make_cohort(10, master_seed=42)
        assert [p.to_dict() for p in a] == [p.to_dict() for p in b]

    def test_labels_identical_across_runs(self):
        a = label_tasks(make_cohort(30, 42))
        b = label_tasks(make_cohort(30, 42))
        assert a == b

    def test_recordings_bit_identical(self):
        p = sample_profile("S0000", 3)
        a = list(synth_recordings(p, 1, "all", 3, coverage=0.02))
        b = list(synth_recordings(p, 1, "all", 3, coverage=0.02))
        assert len(a) == len(b) > 0
        for ra, rb in zip(a, b):
            assert ra.start_epoch_s == rb.start_epoch_s
            assert np.array_equal(ra.ppg, rb.ppg)
            assert np.array_equal(ra.acc, rb.acc)


class TestGenerator:
    def test_flat_hr_without_circadian_modulation(self):
        p = sample_profile("S0001", 5)
        p.circ_amp = 0.0
        hrs = []
        for rec in list(synth_recordings(p, 1, "all", 5, coverage=0.05))[:40]:
            hr = _recording_hr(rec)
            if hr is not None:
                hrs.append(hr)
        assert np.std(hrs) < 0.05 * p.base_hr_bpm

    def test_night_scenario_window(self):
        p = sample_profile("S0002", 6)
        recs = list(synth_recordings(p, 1, "night", 6, coverage=0.2))
        assert recs
        for rec in recs:
            start_local = (rec.start_epoch_s + rec.tz_offset_min * 60) % DAY_SECONDS
            end_local = start_local + rec.duration_s
            assert 0 <= start_local and end_local < 6 * 3600

    def test_notch_only_changes_waveform_not_rhythm(self):
        from hiersig.cohort import heart_rate_bpm

        lo = sample_profile("S0003", 7)
        lo.notch_amp = 0.1
        hi = sample_profile("S0003", 7)
        hi.notch_amp = 0.9
        # The notch knob never enters the instantaneous rate model.
        for minute in range(0, 7 * 24 * 60, 17):
            h = minute / 60.0 % 24.0
            dow = minute // (24 * 60) + 1
            assert heart_rate_bpm(lo, h, dow) == heart_rate_bpm(hi, h, dow)
        recs_lo = list(synth_recordings(lo, 1, "all", 7, coverage=0.05))
        recs_hi = list(synth_recordings(hi, 1, "all", 7, coverage=0.05))
        assert not np.allclose(recs_lo[0].ppg, recs_hi[0].ppg)
        # identical ACC (same rng stream, rate params untouched)
        np.testing.assert_allclose(recs_lo[0].acc, recs_hi[0].acc)

    def test_unknown_scenario_rejected(self):
        p = sample_profile("S0004", 8)
        with pytest.raises(InputError):
            list(synth_recordings(p, 1, "lunchtime", 8))

    def test_weeks_validated(self):
        p = sample_profile("S0005", 9)
        with pytest.raises(InputError):
            list(synth_recordings(p, 0, "all", 9))


class TestLabels:
    def test_positive_rates_balanced(self):
        rows = label_tasks(make_cohort(200, 42))
        for task in ("morph", "rhythm", "combined"):
            ys = [r["y"] for r in rows if r["task"] == task]
            rate = np.mean(ys)
            assert 0.4 <= rate <= 0.6, (task, rate)

    def test_combined_is_xnor(self):
        profiles = make_cohort(50, 13)
        rows = label_tasks(profiles)
        by = {}
        for r in rows:
            by.setdefault(r["subject_id"], {})[r["task"]] = r["y"]
        for sid, t in by.items():
            assert t["combined"] == int(t["morph"] == t["rhythm"])

    def test_degenerate_cohort_rejected(self):
        with pytest.raises(InputError):
            label_tasks(make_cohort(1, 42))


class TestSeparability:
    """Planted phenotypes must be recoverable from signals by construction."""

    def test_oracle_classifiers(self, oracle_cohort):
        profiles, labels, recs = oracle_cohort
        subjects = [p.subject_id for p in profiles]
        notch_scores = np.array([notch_oracle_score(recs[s]) for s in subjects])
        shift_scores = np.array([abs(rhythm_oracle_score(recs[s])) for s in subjects])
        y_morph = np.array([labels["morph"][s] for s in subjects])
        y_rhythm = np.array([labels["rhythm"][s] for s in subjects])
        assert auroc(notch_scores, y_morph) > 0.95
        assert auroc(shift_scores, y_rhythm) > 0.95
        assert auroc(notch_scores, y_rhythm) <= 0.6
        assert auroc(shift_scores, y_morph) <= 0.6
