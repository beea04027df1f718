"""Synthetic multi-subject cohort with planted, separable phenotypes.

Each subject carries a static waveform-morphology knob (the relative height
of a secondary pulse bump) and a week-scale rhythm knob (how far their
circadian peak shifts on weekends).  The two are sampled independently and
bimodally, which yields three binary tasks:

  * ``morph``     visible only in waveform shape,
  * ``rhythm``    visible only in week-scale timing,
  * ``combined``  the XNOR of the two, unavailable to either cue alone.

PPG is a train of two-Gaussian pulses whose instantaneous rate follows a
24 h sinusoid (phase-shifted on weekends); ACC is activity oscillation gated
by the same rhythm on top of gravity.  Missingness is expressed as time
gaps: a recording is emitted only for covered bins, never as sentinel
samples.  Generation is deterministic given (master seed, subject id).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from .config import BIN_SECONDS, WEEK_BINS, subseed
from .shards import RawRecording
from .timeutil import (DAY_SECONDS, WEEK_SECONDS, SCENARIOS, calendar_indices,
                       date_to_local_midnight_epoch, scenario_allows, week_start_for)

NOTCH_DELAY_S = 0.25     # secondary bump lag behind the systolic peak
NOTCH_WIDTH_S = 0.045
STEP_HZ = 1.9            # dominant gait oscillation
PEAK_HOUR = 14.0         # circadian activity/heart-rate peak (weekday)


class InputError(ValueError):
    pass


@dataclass
class SubjectProfile:
    subject_id: str
    base_hr_bpm: float
    notch_amp: float         # in [0, 1]
    pulse_width_s: float
    circ_amp: float          # relative HR modulation depth
    circ_phase_h: float
    weekend_shift_h: float
    activity: float          # g
    noise: float

    def to_dict(self) -> dict:
        return asdict(self)


def sample_profile(subject_id: str, master_seed: int) -> SubjectProfile:
    rng = np.random.default_rng(subseed(master_seed, "profile", subject_id))
    u = rng.random(9)
    notch_high = u[1] < 0.5
    shift_high = u[5] < 0.5
    return SubjectProfile(
        subject_id=subject_id,
        base_hr_bpm=55.0 + 20.0 * u[0],
        notch_amp=(0.60 + 0.15 * u[2]) if notch_high else (0.12 + 0.12 * u[2]),
        pulse_width_s=0.055 + 0.030 * u[3],
        circ_amp=0.10 + 0.08 * u[4],
        circ_phase_h=-1.0 + 2.0 * u[6],
        weekend_shift_h=(4.5 + 1.5 * u[7]) if shift_high else (0.3 + 0.6 * u[7]),
        activity=0.4 + 0.6 * u[8],
        noise=0.04 + 0.06 * rng.random(),
    )


def make_cohort(n_subjects: int, master_seed: int) -> list[SubjectProfile]:
    return [sample_profile(f"S{i:04d}", master_seed) for i in range(n_subjects)]


def label_tasks(profiles: list[SubjectProfile]) -> list[dict]:
    """Binary task rows (subject_id, task, y) with cohort-median thresholds."""
    if len(profiles) < 2:
        raise InputError("a task needs both classes; cohort of < 2 is degenerate")
    notch = np.array([p.notch_amp for p in profiles])
    shift = np.array([p.weekend_shift_h for p in profiles])
    morph = notch > np.median(notch)
    rhythm = shift > np.median(shift)
    combined = morph == rhythm
    rows = []
    for task, labels in (("morph", morph), ("rhythm", rhythm), ("combined", combined)):
        if labels.all() or not labels.any():
            raise InputError(f"task {task!r} is single-class on this cohort")
        rows.extend({"subject_id": p.subject_id, "task": task, "y": int(y)}
                    for p, y in zip(profiles, labels))
    return rows


def peak_hour(profile: SubjectProfile, dow: int) -> float:
    p = PEAK_HOUR + profile.circ_phase_h
    if dow >= 6:
        p += profile.weekend_shift_h
    return p


def heart_rate_bpm(profile: SubjectProfile, local_hour: float, dow: int) -> float:
    phase = 2.0 * math.pi * (local_hour - peak_hour(profile, dow)) / 24.0
    return profile.base_hr_bpm * (1.0 + profile.circ_amp * math.cos(phase))


def activity_gate(profile: SubjectProfile, local_hour: float, dow: int) -> float:
    phase = 2.0 * math.pi * (local_hour - peak_hour(profile, dow)) / 24.0
    return profile.activity * max(0.0, math.cos(phase)) ** 2


def _pulse_train(t: np.ndarray, hr_bpm: float, profile: SubjectProfile,
                 rng: np.random.Generator) -> np.ndarray:
    period = 60.0 / hr_bpm
    offset = rng.random() * period
    n_beats = int(math.ceil((t[-1] + period) / period)) + 1
    beats = offset + period * np.arange(-1, n_beats)
    dt = t[None, :] - beats[:, None]
    sig = np.exp(-dt ** 2 / (2.0 * profile.pulse_width_s ** 2))
    sig += profile.notch_amp * np.exp(
        -(dt - NOTCH_DELAY_S) ** 2 / (2.0 * NOTCH_WIDTH_S ** 2))
    return sig.sum(axis=0)


def synth_one_recording(profile: SubjectProfile, start_epoch_s: int,
                        tz_offset_min: int, duration_s: float,
                        ppg_hz: float, acc_hz: float,
                        rng: np.random.Generator) -> RawRecording:
    """Synthesize one contiguous recording starting at ``start_epoch_s``."""
    dow, tod = calendar_indices(start_epoch_s, tz_offset_min)
    local_hour = (tod - 1) / 12.0
    hr = heart_rate_bpm(profile, local_hour, dow)
    gate = activity_gate(profile, local_hour, dow)

    n_ppg = int(round(duration_s * ppg_hz))
    t_ppg = np.arange(n_ppg) / ppg_hz
    ppg = _pulse_train(t_ppg, hr, profile, rng)
    ppg += profile.noise * rng.standard_normal(n_ppg)

    n_acc = int(round(duration_s * acc_hz))
    t_acc = np.arange(n_acc) / acc_hz
    ph = rng.uniform(0.0, 2.0 * math.pi, size=3)
    noise = profile.noise * rng.standard_normal((3, n_acc))
    x = gate * np.sin(2 * math.pi * STEP_HZ * t_acc + ph[0]) + noise[0]
    y = 0.4 * gate * np.sin(2 * math.pi * STEP_HZ * t_acc + ph[1]) + noise[1]
    z = 1.0 + 0.5 * gate * np.sin(2 * math.pi * 2 * STEP_HZ * t_acc + ph[2]) + noise[2]
    return RawRecording(profile.subject_id, start_epoch_s, tz_offset_min,
                        ppg, ppg_hz, np.stack([x, y, z]), acc_hz)


def synth_recordings(profile: SubjectProfile, weeks: int, scenario: str,
                     master_seed: int, coverage: float = 0.3,
                     recording_seconds: float = 16.0,
                     ppg_hz: float = 25.0, acc_hz: float = 25.0,
                     tz_offset_min: int = -300,
                     start_date: str = "2024-01-01"):
    """Yield the subject's recordings for ``weeks`` calendar weeks.

    Bin coverage is drawn once per bin regardless of scenario so that
    changing the scenario only removes recordings, never reshuffles the
    coverage pattern.
    """
    if weeks < 1:
        raise InputError("weeks must be >= 1")
    if scenario not in SCENARIOS:
        raise InputError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")
    start_epoch = date_to_local_midnight_epoch(start_date, tz_offset_min)
    week0 = week_start_for(start_epoch, tz_offset_min)
    cov_rng = np.random.default_rng(
        subseed(master_seed, "coverage", profile.subject_id))
    for w in range(weeks):
        wk_start = week0 + w * WEEK_SECONDS
        covered = cov_rng.random(WEEK_BINS) < coverage
        for b in np.flatnonzero(covered):
            epoch = wk_start + int(b) * BIN_SECONDS
            dow, tod = calendar_indices(epoch, tz_offset_min)
            if not scenario_allows(dow, tod, scenario):
                continue
            sig_rng = np.random.default_rng(
                subseed(master_seed, "signal", profile.subject_id, w, int(b)))
            yield synth_one_recording(profile, epoch, tz_offset_min,
                                      recording_seconds, ppg_hz, acc_hz, sig_rng)
