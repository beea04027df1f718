"""Calendar arithmetic on epoch seconds with fixed per-subject UTC offsets.

Weeks are anchored to local Monday 00:00; a week holds 2016 five-minute
bins, a day 288.  Day-of-week and time-of-day indices are 1-based: Monday
00:00-00:05 maps to (1, 1) and Sunday 23:55-24:00 to (7, 288).
"""

from __future__ import annotations

import datetime

from .config import BIN_SECONDS, DOW_BINS, TOD_BINS, WEEK_BINS

DAY_SECONDS = 86400
WEEK_SECONDS = 7 * DAY_SECONDS

SCENARIOS = ("all", "day", "night", "weekday", "weekend")

# Local-time windows retained by each missingness scenario, as 1-based
# (dow, tod) predicates.  Daytime is 09:00-21:00, nighttime 00:00-06:00.
_DAY_TOD = (9 * 12 + 1, 21 * 12)       # tod 109..252
_NIGHT_TOD = (1, 6 * 12)               # tod 1..72


def local_seconds(epoch_s: int, tz_offset_min: int) -> int:
    return int(epoch_s) + int(tz_offset_min) * 60


def calendar_indices(epoch_s: int, tz_offset_min: int) -> tuple[int, int]:
    """(day-of-week 1..7 Monday-first, time-of-day bin 1..288)."""
    loc = local_seconds(epoch_s, tz_offset_min)
    day = loc // DAY_SECONDS
    dow = (day + 3) % 7 + 1          # 1970-01-01 was a Thursday
    tod = (loc % DAY_SECONDS) // BIN_SECONDS + 1
    return int(dow), int(tod)


def week_start_for(epoch_s: int, tz_offset_min: int) -> int:
    """Epoch seconds (UTC) of the local Monday 00:00 containing ``epoch_s``."""
    loc = local_seconds(epoch_s, tz_offset_min)
    day = loc // DAY_SECONDS
    monday = day - (day + 3) % 7
    return int(monday * DAY_SECONDS - tz_offset_min * 60)


def bin_index(epoch_s: int, week_start: int) -> int:
    """0-based bin position of a timestamp within its Monday-anchored week."""
    return int((int(epoch_s) - int(week_start)) // BIN_SECONDS)


def bin_calendar(t: int) -> tuple[int, int]:
    """Calendar indices of 0-based week bin ``t`` (weeks start Monday 00:00)."""
    if not 0 <= t < WEEK_BINS:
        raise ValueError(f"bin index {t} outside the {WEEK_BINS}-bin week")
    return t // TOD_BINS + 1, t % TOD_BINS + 1


def scenario_allows(dow: int, tod: int, scenario: str) -> bool:
    if scenario == "all":
        return True
    if scenario == "day":
        return _DAY_TOD[0] <= tod <= _DAY_TOD[1]
    if scenario == "night":
        return _NIGHT_TOD[0] <= tod <= _NIGHT_TOD[1]
    if scenario == "weekday":
        return dow <= 5
    if scenario == "weekend":
        return dow >= 6
    raise ValueError(f"unknown scenario {scenario!r}")


def scenario_bin_mask(scenario: str):
    """Boolean keep-mask over the 2016 week bins for a scenario."""
    import numpy as np

    keep = np.empty(WEEK_BINS, dtype=bool)
    for t in range(WEEK_BINS):
        dow, tod = bin_calendar(t)
        keep[t] = scenario_allows(dow, tod, scenario)
    return keep


def calendar_indices_vec(epochs, tz_offsets_min):
    """Vectorized calendar_indices over aligned epoch/offset arrays."""
    import numpy as np

    loc = np.asarray(epochs, dtype=np.int64) + np.asarray(tz_offsets_min, dtype=np.int64) * 60
    day = loc // DAY_SECONDS
    dow = (day + 3) % 7 + 1
    tod = (loc % DAY_SECONDS) // BIN_SECONDS + 1
    return dow, tod


def scenario_allows_vec(dow, tod, scenario: str):
    import numpy as np

    dow = np.asarray(dow)
    tod = np.asarray(tod)
    if scenario == "all":
        return np.ones(dow.shape, dtype=bool)
    if scenario == "day":
        return (tod >= _DAY_TOD[0]) & (tod <= _DAY_TOD[1])
    if scenario == "night":
        return (tod >= _NIGHT_TOD[0]) & (tod <= _NIGHT_TOD[1])
    if scenario == "weekday":
        return dow <= 5
    if scenario == "weekend":
        return dow >= 6
    raise ValueError(f"unknown scenario {scenario!r}")


def date_to_local_midnight_epoch(iso_date: str, tz_offset_min: int) -> int:
    """UTC epoch seconds of local midnight on the given calendar date."""
    d = datetime.date.fromisoformat(iso_date)
    days = (d - datetime.date(1970, 1, 1)).days
    return days * DAY_SECONDS - tz_offset_min * 60
