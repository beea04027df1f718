"""Deterministic preprocessing of raw recordings into normalized segments.

Pipeline order: three-axis ACC magnitude, polyphase FIR resampling of both
modalities to 100 Hz, linear-phase FIR bandpass (1-12 Hz for PPG, 0.5-49 Hz
for ACC magnitude), then per-window z-score normalization of consecutive
non-overlapping 15 s windows aligned to the recording start.

All filters use a Kaiser window designed for 60 dB stopband attenuation and
a 0.5 Hz transition width.  Filtering zero-pads at the edges and compensates
the group delay, so every emitted sample index lines up with its input time.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np
from scipy import signal as sps

from .shards import RawRecording

TARGET_HZ = 100.0
SEGMENT_SECONDS = 15.0
PPG_BAND = (1.0, 12.0)
ACC_BAND = (0.5, 49.0)
TRANSITION_HZ = 0.5
STOPBAND_DB = 60.0
RATIO_DENOMINATOR_CAP = 1000

# A window row whose spread is this small relative to its largest sample is
# treated as constant (off-body sensor) and emitted as all zeros.
_DEGENERATE_REL_STD = 1e-8


class InputError(ValueError):
    """Caller-side contract violation on preprocessing inputs."""


@dataclass
class Segment:
    """One normalized 15 s, 2-channel window (row 0 PPG, row 1 ACC magnitude)."""

    subject_id: str
    timestamp: int            # epoch seconds of window start
    tz_offset_min: int
    data: np.ndarray          # (2, 1500) float
    degenerate_ppg: bool = False
    degenerate_acc: bool = False

    @property
    def degenerate(self) -> bool:
        return self.degenerate_ppg or self.degenerate_acc


@dataclass
class SegmentizeReport:
    n_segments: int = 0
    n_dropped_nan: int = 0
    n_too_short: int = 0
    n_degenerate: int = 0


def acc_magnitude(x, y, z) -> np.ndarray:
    """Element-wise Euclidean magnitude of the three acceleration axes."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if not (x.shape == y.shape == z.shape) or x.ndim != 1 or x.size < 1:
        raise InputError("acc axes must be equal-length 1-D arrays")
    return np.sqrt(x * x + y * y + z * z)


@lru_cache(maxsize=64)
def _lowpass_taps(up: int, down: int, from_hz: float, transition_hz: float,
                  stopband_db: float) -> np.ndarray:
    fs_up = from_hz * up
    to_hz = from_hz * up / down
    cutoff = min(from_hz, to_hz) / 2.0
    # +3 dB design margin: the polyphase branches aggregate leakage from all
    # up-1 images, which can push total deviation just past the nominal
    # ripple of a minimum-order design.
    numtaps, beta = sps.kaiserord(stopband_db + 3.0, transition_hz / (fs_up / 2.0))
    numtaps += 1 - numtaps % 2
    # resample_poly scales a user-provided window by `up` itself, so the
    # taps here keep unit DC gain.
    return sps.firwin(numtaps, cutoff, window=("kaiser", beta), fs=fs_up)


def resample_poly(x, from_hz: float, to_hz: float,
                  transition_hz: float = TRANSITION_HZ,
                  stopband_db: float = STOPBAND_DB,
                  denominator_cap: int = RATIO_DENOMINATOR_CAP) -> np.ndarray:
    """Polyphase FIR resampling with a Kaiser-windowed anti-alias filter.

    Output length is round(len(x) * to_hz / from_hz).  Identical rates return
    an unmodified copy.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InputError("resample_poly expects a 1-D signal")
    if from_hz <= 0 or to_hz <= 0:
        raise InputError("sample rates must be positive")
    if from_hz == to_hz:
        return x.copy()
    exact = to_hz / from_hz
    frac = Fraction(exact).limit_denominator(denominator_cap)
    if frac.numerator == 0 or abs(float(frac) - exact) > 1e-9 * exact:
        raise InputError(
            f"rate ratio {to_hz}/{from_hz} is not rationalizable with "
            f"denominator <= {denominator_cap}")
    up, down = frac.numerator, frac.denominator
    taps = _lowpass_taps(up, down, float(from_hz), transition_hz, stopband_db)
    y = sps.resample_poly(x, up, down, window=taps)
    n_out = int(round(x.size * exact))
    if y.size < n_out:
        y = np.concatenate([y, np.full(n_out - y.size, y[-1])])
    return y[:n_out]


@lru_cache(maxsize=64)
def _bandpass_taps(low_hz: float, high_hz: float, fs: float,
                   transition_hz: float, stopband_db: float) -> np.ndarray:
    numtaps, beta = sps.kaiserord(stopband_db, transition_hz / (fs / 2.0))
    numtaps += 1 - numtaps % 2
    return sps.firwin(numtaps, [low_hz, high_hz], pass_zero=False,
                      window=("kaiser", beta), fs=fs)


def bandpass_fir(x, low_hz: float, high_hz: float, fs: float,
                 transition_hz: float = TRANSITION_HZ,
                 stopband_db: float = STOPBAND_DB) -> np.ndarray:
    """Zero-padded linear-phase FIR bandpass with group-delay compensation."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InputError("bandpass_fir expects a 1-D signal")
    if not (0 < low_hz < high_hz < fs / 2.0):
        raise InputError(f"invalid band [{low_hz}, {high_hz}] for fs={fs}")
    taps = _bandpass_taps(float(low_hz), float(high_hz), float(fs),
                          transition_hz, stopband_db)
    delay = (taps.size - 1) // 2
    full = sps.fftconvolve(x, taps, mode="full")
    return full[delay:delay + x.size]


def _zscore_row(row: np.ndarray) -> tuple[np.ndarray, bool]:
    std = row.std()
    scale = max(1.0, float(np.max(np.abs(row))) if row.size else 1.0)
    if std < _DEGENERATE_REL_STD * scale:
        return np.zeros_like(row), True
    return (row - row.mean()) / std, False


def segmentize(rec: RawRecording,
               target_hz: float = TARGET_HZ,
               segment_seconds: float = SEGMENT_SECONDS,
               ppg_band: tuple[float, float] = PPG_BAND,
               acc_band: tuple[float, float] = ACC_BAND,
               transition_hz: float = TRANSITION_HZ,
               stopband_db: float = STOPBAND_DB) -> tuple[list[Segment], SegmentizeReport]:
    """Convert one recording into normalized segments.

    Windows are aligned to the recording start.  Windows containing NaN after
    filtering are dropped and counted; constant rows are emitted as zeros and
    flagged degenerate.
    """
    report = SegmentizeReport()
    mag = acc_magnitude(rec.acc[0], rec.acc[1], rec.acc[2])
    ppg = resample_poly(rec.ppg, rec.ppg_hz, target_hz, transition_hz, stopband_db)
    mag = resample_poly(mag, rec.acc_hz, target_hz, transition_hz, stopband_db)
    n = min(ppg.size, mag.size)
    seg_len = int(round(segment_seconds * target_hz))
    if n < seg_len:
        report.n_too_short = 1
        return [], report
    ppg = bandpass_fir(ppg[:n], *ppg_band, target_hz, transition_hz, stopband_db)
    mag = bandpass_fir(mag[:n], *acc_band, target_hz, transition_hz, stopband_db)

    segments: list[Segment] = []
    for k in range(n // seg_len):
        sl = slice(k * seg_len, (k + 1) * seg_len)
        window = np.stack([ppg[sl], mag[sl]])
        if not np.all(np.isfinite(window)):
            report.n_dropped_nan += 1
            continue
        row_p, deg_p = _zscore_row(window[0])
        row_a, deg_a = _zscore_row(window[1])
        seg = Segment(
            subject_id=rec.subject_id,
            timestamp=int(rec.start_epoch_s) + int(round(k * segment_seconds)),
            tz_offset_min=rec.tz_offset_min,
            data=np.stack([row_p, row_a]),
            degenerate_ppg=deg_p,
            degenerate_acc=deg_a,
        )
        if seg.degenerate:
            report.n_degenerate += 1
        segments.append(seg)
    report.n_segments = len(segments)
    return segments, report
