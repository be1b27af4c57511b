"""Wall-clock times and study-cycle arithmetic.

A study cycle is a logical day that starts at a configurable local time
(04:00 by default) and ends one minute before the same time the next
calendar day. All duration math happens on a cycle-relative minute grid
so that post-midnight times sort after evening times within one cycle.
"""
from __future__ import annotations

from dataclasses import dataclass
from datetime import date, datetime, timedelta, timezone
from zoneinfo import ZoneInfo

MINUTES_PER_DAY = 24 * 60


@dataclass(frozen=True, order=True)
class ClockTime:
    """A local time of day with minute resolution."""

    hour: int
    minute: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.hour <= 23:
            raise ValueError(f"hour out of range: {self.hour}")
        if not 0 <= self.minute <= 59:
            raise ValueError(f"minute out of range: {self.minute}")

    @classmethod
    def from_minutes(cls, total: int) -> "ClockTime":
        total %= MINUTES_PER_DAY
        return cls(total // 60, total % 60)

    @classmethod
    def parse(cls, text: str) -> "ClockTime":
        """Parse strict 'HH:MM' (24-hour). Raises ValueError otherwise."""
        parts = text.strip().split(":")
        if len(parts) != 2 or not all(p.isdigit() for p in parts):
            raise ValueError(f"not a HH:MM time: {text!r}")
        return cls(int(parts[0]), int(parts[1]))

    def day_minutes(self) -> int:
        return self.hour * 60 + self.minute

    def cycle_minutes(self, cycle_start: "ClockTime") -> int:
        """Minutes elapsed since the cycle boundary, in [0, 1440)."""
        return (self.day_minutes() - cycle_start.day_minutes()) % MINUTES_PER_DAY

    def hhmm(self) -> str:
        return f"{self.hour:02d}:{self.minute:02d}"

    def twelve_hour(self) -> str:
        """Participant-facing rendering, e.g. '4:30 PM'."""
        suffix = "AM" if self.hour < 12 else "PM"
        h = self.hour % 12 or 12
        return f"{h}:{self.minute:02d} {suffix}"

    def __str__(self) -> str:
        return self.hhmm()


def to_local(instant: datetime, tz_name: str) -> datetime:
    """Convert a UTC instant to study-local wall time."""
    if instant.tzinfo is None:
        instant = instant.replace(tzinfo=timezone.utc)
    return instant.astimezone(ZoneInfo(tz_name))


def local_instant(day: date, at: ClockTime, tz_name: str) -> datetime:
    """UTC instant for a local wall time.

    Ambiguous wall times (DST fall-back) resolve to the earlier instant;
    skipped wall times resolve per fold=0 extrapolation.
    """
    local = datetime(day.year, day.month, day.day, at.hour, at.minute,
                     tzinfo=ZoneInfo(tz_name), fold=0)
    return local.astimezone(timezone.utc)


def cycle_date_of(instant: datetime, tz_name: str, cycle_start: ClockTime) -> date:
    """The cycle a UTC instant belongs to.

    Local times at or after the cycle boundary belong to that local date;
    earlier times belong to the previous date's cycle.
    """
    local = to_local(instant, tz_name)
    if (local.hour, local.minute) < (cycle_start.hour, cycle_start.minute):
        return local.date() - timedelta(days=1)
    return local.date()


def next_fire_utc(after: datetime, fire_at: ClockTime, tz_name: str) -> datetime:
    """First UTC instant strictly after `after` when the local clock reads fire_at."""
    local = to_local(after, tz_name)
    candidate = local_instant(local.date(), fire_at, tz_name)
    while candidate <= after:
        local = local + timedelta(days=1)
        candidate = local_instant(local.date(), fire_at, tz_name)
    return candidate


def utc_now() -> datetime:
    return datetime.now(timezone.utc)


def parse_utc(text: str) -> datetime:
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


def fmt_utc(instant: datetime) -> str:
    return instant.astimezone(timezone.utc).isoformat().replace("+00:00", "Z")
