import numpy as np
import pytest
import torch

from hiersig.shards import RawRecording


@pytest.fixture(autouse=True)
def _fixed_torch_threads():
    torch.set_num_threads(2)


def make_recording(subject_id="S0000", start=1704067200, tz=-300,
                   duration_s=60.0, ppg_hz=25.0, acc_hz=25.0, seed=0,
                   ppg=None, acc=None):
    """A plain sinusoid-plus-noise recording for preprocessing tests."""
    rng = np.random.default_rng(seed)
    n_p = int(round(duration_s * ppg_hz))
    n_a = int(round(duration_s * acc_hz))
    if ppg is None:
        t = np.arange(n_p) / ppg_hz
        ppg = np.sin(2 * np.pi * 1.2 * t) + 0.1 * rng.standard_normal(n_p)
    if acc is None:
        t = np.arange(n_a) / acc_hz
        acc = np.stack([
            0.3 * np.sin(2 * np.pi * 2.0 * t) + 0.05 * rng.standard_normal(n_a),
            0.2 * np.cos(2 * np.pi * 2.0 * t) + 0.05 * rng.standard_normal(n_a),
            1.0 + 0.1 * np.sin(2 * np.pi * 4.0 * t) + 0.05 * rng.standard_normal(n_a),
        ])
    return RawRecording(subject_id, start, tz, ppg, ppg_hz, acc, acc_hz)


def gaussian_pulse_train(bpm, fs=100.0, duration_s=15.0, width_s=0.05,
                         offset_s=0.3):
    """Clean PPG-like pulse train with known beat positions."""
    n = int(round(duration_s * fs))
    t = np.arange(n) / fs
    period = 60.0 / bpm
    beats = np.arange(offset_s, duration_s, period)
    sig = np.zeros(n)
    for b in beats:
        sig += np.exp(-((t - b) ** 2) / (2 * width_s ** 2))
    return sig, beats
