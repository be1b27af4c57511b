"""Time-restricted-eating domain math.

Everything here is pure: cycle boundaries, eating-window computation, fast
outcome evaluation, the two study metrics, group randomization, and the
outcome-to-feedback mapping. Duration arithmetic runs on a cycle-relative
minute grid so times after midnight land in the evening's cycle.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from datetime import date, datetime

from .clock import ClockTime, cycle_date_of

BASELINE_GROUP = "baseline"
CONTROL_GROUP = "control"
RESTRICTED_GROUP = "restricted"

OUTCOME_SUCCESS = "success"
OUTCOME_TOO_SHORT = "too_short"
OUTCOME_TOO_LONG = "too_long"
OUTCOME_LATE_END = "late_end"
OUTCOME_INCOMPLETE = "incomplete"

OUTCOMES = (
    OUTCOME_SUCCESS,
    OUTCOME_TOO_SHORT,
    OUTCOME_TOO_LONG,
    OUTCOME_LATE_END,
    OUTCOME_INCOMPLETE,
)


@dataclass(frozen=True)
class StudyConfig:
    study_id: str
    timezone: str = "UTC"
    groups: tuple[tuple[str, str], ...] = ()  # (group_id, protocol_id)
    baseline_days: int = 14
    window_target_minutes: int = 10 * 60
    window_tolerance_minutes: int = 60
    latest_end: ClockTime = field(default_factory=lambda: ClockTime(20, 0))
    cycle_start: ClockTime = field(default_factory=lambda: ClockTime(4, 0))
    checkpoint_interval_minutes: int = 15
    randomization_seed: int = 0
    display_name: str = ""

    def __post_init__(self) -> None:
        if self.window_target_minutes - self.window_tolerance_minutes <= 0:
            raise ValueError("window tolerance swallows the whole target")
        if not self.cycle_start.day_minutes() < self.latest_end.day_minutes():
            raise ValueError("cycle_start must precede latest_end within the day")

    def minutes_into_cycle(self, t: ClockTime) -> int:
        return t.cycle_minutes(self.cycle_start)

    def latest_end_minutes(self) -> int:
        return self.latest_end.cycle_minutes(self.cycle_start)


@dataclass(frozen=True)
class EatingWindow:
    start: ClockTime
    target_end: ClockTime
    earliest_ok: ClockTime
    latest_ok: ClockTime


@dataclass(frozen=True)
class FastRecord:
    participant_id: str
    cycle_date: date
    start: ClockTime | None = None
    end: ClockTime | None = None
    duration_minutes: int | None = None
    outcome: str = OUTCOME_INCOMPLETE


@dataclass(frozen=True)
class GroupAssignment:
    participant_id: str
    group_id: str
    effective_from: date
    assigned_by: str


class WindowError(ValueError):
    """Raised when no compliant eating window can exist for a start time."""


def cycle_of(instant: datetime, config: StudyConfig) -> date:
    """The study cycle (logical day) a UTC instant belongs to."""
    return cycle_date_of(instant, config.timezone, config.cycle_start)


def compute_window(start: ClockTime, config: StudyConfig) -> EatingWindow:
    """Eating window for a start time: target span, tolerance band, curfew.

    The upper bound is clamped one minute short of the evening curfew; the
    target end is itself clamped into the band. Raises WindowError when the
    start falls at or after the curfew, where no compliant window exists.
    """
    start_m = config.minutes_into_cycle(start)
    curfew_m = config.latest_end_minutes()
    if start_m >= curfew_m:
        raise WindowError(f"start {start} is not before {config.latest_end}")
    latest_ok_m = min(start_m + config.window_target_minutes + config.window_tolerance_minutes,
                      curfew_m - 1)
    target_m = min(start_m + config.window_target_minutes, latest_ok_m)
    earliest_m = start_m + config.window_target_minutes - config.window_tolerance_minutes

    def back(minutes: int) -> ClockTime:
        return ClockTime.from_minutes(minutes + config.cycle_start.day_minutes())

    return EatingWindow(
        start=start,
        target_end=back(target_m),
        earliest_ok=back(earliest_m),
        latest_ok=back(latest_ok_m),
    )


def evaluate_fast(start: ClockTime, end: ClockTime, config: StudyConfig) -> str:
    """Outcome of one day's eating window, per the group rules.

    Success means the eating duration sits inside the tolerance band
    (inclusive at both bounds) and the last calories land strictly before
    the evening curfew. Both times must belong to the same cycle with the
    end after the start; anything else is the caller's input error.
    """
    start_m = config.minutes_into_cycle(start)
    end_m = config.minutes_into_cycle(end)
    if end_m <= start_m:
        raise ValueError("end must come after start within one cycle")
    duration = end_m - start_m
    low = config.window_target_minutes - config.window_tolerance_minutes
    high = config.window_target_minutes + config.window_tolerance_minutes
    if duration < low:
        return OUTCOME_TOO_SHORT
    if duration > high:
        return OUTCOME_TOO_LONG
    if end_m >= config.latest_end_minutes():
        return OUTCOME_LATE_END
    return OUTCOME_SUCCESS


def make_fast_record(participant_id: str, cycle: date,
                     start: ClockTime | None, end: ClockTime | None,
                     config: StudyConfig) -> FastRecord:
    """Assemble one cycle's FastRecord; incomplete when either time is missing."""
    record = FastRecord(participant_id, cycle, start, end)
    if start is None or end is None:
        return record
    start_m = config.minutes_into_cycle(start)
    end_m = config.minutes_into_cycle(end)
    if end_m <= start_m:
        return record  # nonsensical pair recorded as incomplete data
    return replace(
        record,
        duration_minutes=end_m - start_m,
        outcome=evaluate_fast(start, end, config),
    )


def success_rate(records: list[FastRecord] | tuple[FastRecord, ...], days_enrolled: int) -> float:
    """Successful fasts over enrollment days.

    Days with no record count against the rate because the denominator is
    enrollment, not reporting. Zero days enrolled means a fresh 100%.
    """
    if days_enrolled <= 0:
        return 1.0
    wins = sum(1 for r in records if r.outcome == OUTCOME_SUCCESS)
    return wins / days_enrolled


def format_percent(fraction: float) -> str:
    """One-decimal percent rendering, e.g. 0.0979... -> '9.8%'."""
    return f"{fraction * 100:.1f}%"


@dataclass(frozen=True)
class ErrorRate:
    fraction: float
    defined: bool  # False when there were no outgoing messages at all

    def percent(self) -> str:
        return format_percent(self.fraction)


def error_rate(unrecognized_inbound: int, outgoing_total: int) -> ErrorRate:
    """Unrecognized inbound messages over total outgoing messages."""
    if outgoing_total <= 0:
        return ErrorRate(0.0, defined=False)
    return ErrorRate(unrecognized_inbound / outgoing_total, defined=True)


def randomize_group(participant_id: str, seed: int) -> str:
    """Deterministic 50/50 draw between control and restricted.

    A pure function of (seed, participant_id): the same participant always
    lands in the same group for a given study seed.
    """
    digest = hashlib.sha256(f"{seed}:{participant_id}".encode("utf-8")).digest()
    return CONTROL_GROUP if digest[0] % 2 == 0 else RESTRICTED_GROUP


FEEDBACK_BY_OUTCOME = {
    OUTCOME_SUCCESS: "good_window",
    OUTCOME_TOO_SHORT: "too_short_info",
    OUTCOME_TOO_LONG: "too_long_info",
    OUTCOME_LATE_END: "late_end_info",
}


def feedback_for(outcome: str, neutral: bool = False) -> str:
    """Template id for an outcome.

    Control and baseline participants get a neutral acknowledgment for
    every outcome; restricted participants get outcome-specific guidance.
    """
    if neutral:
        return "ack_neutral"
    try:
        return FEEDBACK_BY_OUTCOME[outcome]
    except KeyError:
        raise ValueError(f"no feedback defined for outcome {outcome!r}") from None
