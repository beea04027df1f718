"""Expert-crafted PPG/ACC features for the behavior-centric baseline.

Ten cardiac statistics derive from inter-beat (NN) intervals detected on the
normalized PPG row of each 15 s segment; nine kinematic statistics derive
from the raw three-axis 15 s acceleration window.  Segments whose beat
detection fails (< 3 beats) or whose kinematic statistics are undefined
(e.g. constant signal) are marked invalid rather than emitting NaN.

Conventions fixed here so independent oracles agree:
  * SDNN uses the population (divide-by-N) standard deviation.
  * Percentiles interpolate linearly.
  * Shannon entropies use 10 equal-width bins over [min, max], natural log,
    empty bins skipped; a constant series has entropy 0.
  * Kurtosis is the population Pearson kurtosis m4 / m2**2 (normal ~ 3).
  * Jerk is the first difference of the PC1 series times the sample rate;
    its lag-1 autocorrelation coefficient is divided by the PC1 variance,
    with 0/0 defined as 0.
  * The sleep coefficient counts how many of 16 log-spaced thresholds
    between 1e-3 and 1 the window's magnitude peak-to-peak range exceeds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .config import WEEK_BINS

PPG_FEATURES = [
    "Heart_Rate_BPM_Mean",
    "RR_Mean_Msec",
    "RR_Median_Msec",
    "RR_20th_Percentile_Msec",
    "RR_80th_Percentile_Msec",
    "RMSSD_Msec",
    "SDNN_Msec",
    "Shannon_Ent_RR_Nats",
    "Shannon_Ent_RR_Diffs_Nats",
    "PNN30_Percent",
]
ACC_FEATURES = [
    "Log_Energy",
    "Log_Energy_Ratio",
    "Jerk_Autocorr_Ratio",
    "Covariance_Condition",
    "Zero_Crossing_Avg_Seconds",
    "Zero_Crossing_Std_Seconds",
    "Robust_Arm_Tilt",
    "Kurtosis",
    "Sleep_Coefficient",
]
FEATURE_NAMES = PPG_FEATURES + ACC_FEATURES

CONDITION_CAP = 1e12
SLEEP_THRESHOLDS = np.logspace(-3.0, 0.0, 16)

PPG_VALID = 0x01
ACC_VALID = 0x02


def detect_beats(ppg_row, fs: float = 100.0, refractory_s: float = 0.33,
                 threshold_frac: float = 0.5, rolling_max_s: float = 3.0) -> np.ndarray:
    """Find systolic peaks: local maxima above an adaptive rolling threshold.

    The threshold is ``threshold_frac`` times the rolling 3 s maximum, and
    accepted peaks must be separated by the refractory period.  Returns a
    strictly increasing index array (possibly shorter than 3, in which case
    the segment is HRV-invalid).
    """
    x = np.asarray(ppg_row, dtype=np.float64)
    if x.ndim != 1 or x.size < 3:
        return np.empty(0, dtype=np.int64)
    if not np.any(x > 0):
        return np.empty(0, dtype=np.int64)
    win = max(3, int(round(rolling_max_s * fs)) | 1)
    rolling = ndimage.maximum_filter1d(x, size=win, mode="nearest")
    interior = (x[1:-1] >= x[:-2]) & (x[1:-1] > x[2:])
    cand = np.flatnonzero(interior) + 1
    cand = cand[(x[cand] >= threshold_frac * rolling[cand]) & (x[cand] > 0)]
    refractory = int(round(refractory_s * fs))
    peaks = []
    last = -refractory
    for idx in cand:
        if idx - last >= refractory:
            peaks.append(idx)
            last = idx
    return np.asarray(peaks, dtype=np.int64)


def nn_intervals_ms(beats: np.ndarray, fs: float = 100.0) -> np.ndarray:
    return np.diff(np.asarray(beats, dtype=np.float64)) / fs * 1000.0


def shannon_entropy(series, n_bins: int = 10) -> float:
    """Histogram entropy in nats over equal-width bins spanning [min, max]."""
    series = np.asarray(series, dtype=np.float64)
    if series.size == 0:
        return 0.0
    lo, hi = series.min(), series.max()
    if hi == lo:
        return 0.0
    counts, _ = np.histogram(series, bins=n_bins, range=(lo, hi))
    p = counts[counts > 0] / series.size
    return float(-(p * np.log(p)).sum())


def hrv_features(nn_ms, pnn_threshold_ms: float = 30.0,
                 entropy_bins: int = 10) -> np.ndarray | None:
    """The 10 PPG scalars, in PPG_FEATURES order; None if < 2 intervals."""
    nn = np.asarray(nn_ms, dtype=np.float64)
    if nn.size < 2:
        return None
    diffs = np.diff(nn)
    p20, p50, p80 = np.percentile(nn, [20, 50, 80])
    return np.array([
        60000.0 / nn.mean(),
        nn.mean(),
        p50,
        p20,
        p80,
        float(np.sqrt(np.mean(diffs ** 2))),
        float(nn.std()),
        shannon_entropy(nn, entropy_bins),
        shannon_entropy(diffs, entropy_bins),
        100.0 * float(np.mean(np.abs(diffs) > pnn_threshold_ms)),
    ])


def _lag1_autocorr(x: np.ndarray) -> float:
    if x.size < 2:
        return 0.0
    c = x - x.mean()
    denom = float(np.dot(c, c))
    if denom == 0.0:
        return 0.0
    return float(np.dot(c[:-1], c[1:]) / denom)


def acc_features(acc_window, fs: float = 100.0) -> tuple[np.ndarray, bool]:
    """The 9 ACC scalars (ACC_FEATURES order) and an overall validity flag.

    PC1 comes from the eigendecomposition of the 3x3 sample covariance.
    Undefined statistics (no zero crossings, constant magnitude, zero
    energy) invalidate the window; a rank-deficient covariance is reported
    as the capped sentinel without invalidating the rest.
    """
    w = np.asarray(acc_window, dtype=np.float64)
    if w.shape[0] != 3 or w.shape[1] < 4:
        raise ValueError("acc window must have shape (3, n) with n >= 4")
    valid = True
    out = np.zeros(len(ACC_FEATURES))

    rms = np.sqrt(np.mean(w ** 2, axis=1))
    rms_sum = float(rms.sum())
    if rms_sum > 0:
        out[0] = np.log(rms_sum)
    else:
        valid = False

    cov = np.cov(w, bias=True)
    evals, evecs = np.linalg.eigh(cov)
    lam_max = float(evals[-1])
    lam_min = float(evals[0])
    pc1 = evecs[:, -1] @ (w - w.mean(axis=1, keepdims=True))

    total_energy = float(np.mean(np.sum(w ** 2, axis=0)))
    if lam_max > 0 and total_energy > 0:
        out[1] = np.log(lam_max / total_energy)
    else:
        valid = False

    if lam_max > 0:
        out[2] = _lag1_autocorr(np.diff(pc1) * fs) / lam_max
    else:
        out[2] = 0.0

    if lam_min <= lam_max * 1e-12 or lam_min <= 0:
        out[3] = CONDITION_CAP
    else:
        out[3] = min(lam_max / lam_min, CONDITION_CAP)

    crossings = np.flatnonzero(pc1[:-1] * pc1[1:] < 0) + 1
    if crossings.size >= 2:
        gaps = np.diff(crossings) / fs
        out[4] = gaps.mean()
        out[5] = gaps.std()
    else:
        valid = False

    tilt = float(np.mean(np.sqrt(w[0] ** 2 + w[2] ** 2)))
    if tilt > 0:
        out[6] = np.log(tilt)
    else:
        valid = False

    mag = np.sqrt(np.sum(w ** 2, axis=0))
    m2 = float(np.mean((mag - mag.mean()) ** 2))
    if m2 > 0:
        out[7] = float(np.mean((mag - mag.mean()) ** 4)) / m2 ** 2
    else:
        valid = False

    out[8] = float(np.sum(np.ptp(mag) > SLEEP_THRESHOLDS))
    return out, valid


def segment_features(ppg_row, acc_window, fs: float = 100.0,
                     refractory_s: float = 0.33, threshold_frac: float = 0.5,
                     rolling_max_s: float = 3.0, pnn_threshold_ms: float = 30.0,
                     entropy_bins: int = 10) -> tuple[np.ndarray, int]:
    """Full 19-vector for one segment plus its validity bitmask."""
    vec = np.zeros(len(FEATURE_NAMES))
    validity = 0
    beats = detect_beats(ppg_row, fs, refractory_s, threshold_frac, rolling_max_s)
    if beats.size >= 3:
        hrv = hrv_features(nn_intervals_ms(beats, fs), pnn_threshold_ms, entropy_bins)
        if hrv is not None:
            vec[:len(PPG_FEATURES)] = hrv
            validity |= PPG_VALID
    acc_vec, acc_ok = acc_features(acc_window, fs)
    vec[len(PPG_FEATURES):] = acc_vec if acc_ok else 0.0
    if acc_ok:
        validity |= ACC_VALID
    return vec, validity


@dataclass
class FeatureSequence:
    """One week of 5-minute feature bins with a validity mask."""

    subject_id: str
    week_start: int
    tz_offset_min: int
    values: np.ndarray     # (2016, 19)
    missing: np.ndarray    # (2016,) bool
    counts: np.ndarray     # (2016,) contributing segments


def aggregate_bins(vectors, timestamps, valid, subject_id: str, week_start: int,
                   tz_offset_min: int = 0, bin_seconds: int = 300) -> FeatureSequence:
    """Average valid per-segment vectors into 5-minute bins for one week.

    Bins with no valid contributor are masked missing; segments outside the
    week are ignored.
    """
    vectors = np.asarray(vectors, dtype=np.float64).reshape(-1, len(FEATURE_NAMES))
    timestamps = np.asarray(timestamps, dtype=np.int64)
    valid = np.asarray(valid, dtype=bool)
    values = np.zeros((WEEK_BINS, len(FEATURE_NAMES)))
    counts = np.zeros(WEEK_BINS, dtype=np.int64)
    rel = timestamps - week_start
    in_week = (rel >= 0) & (rel < WEEK_BINS * bin_seconds) & valid
    idx = rel[in_week] // bin_seconds
    np.add.at(values, idx, vectors[in_week])
    np.add.at(counts, idx, 1)
    nonzero = counts > 0
    values[nonzero] /= counts[nonzero, None]
    return FeatureSequence(subject_id, week_start, tz_offset_min,
                           values, ~nonzero, counts)


def fit_standardization(sequences: list[FeatureSequence]) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean/std over all valid bins of the training split."""
    rows = [seq.values[~seq.missing] for seq in sequences if (~seq.missing).any()]
    if not rows:
        raise ValueError("no valid bins to fit standardization statistics")
    stacked = np.concatenate(rows, axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    std = np.where(std == 0.0, 1.0, std)
    return mean, std


def standardize(seq: FeatureSequence, mean: np.ndarray, std: np.ndarray) -> FeatureSequence:
    values = np.where(seq.missing[:, None], 0.0, (seq.values - mean) / std)
    return FeatureSequence(seq.subject_id, seq.week_start, seq.tz_offset_min,
                           values, seq.missing.copy(), seq.counts.copy())
