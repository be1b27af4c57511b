"""Inbound message sanitization and intent classification.

Participants report with two keywords, STARTCAL and ENDCAL, followed by a
time of day. Classification is deliberately literal: keywords must appear
as whole words, misspellings are not guessed at, and an hour between 1 and
12 with no AM/PM marker is ambiguous and triggers a clarification request
rather than a guess.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from datetime import datetime

from .clock import ClockTime

MAX_MESSAGE_CHARS = 512

KEYWORDS = ("startcal", "endcal")

_WS_RE = re.compile(r"\s+")
# hour, optional :minutes, optional meridiem with or without periods,
# attached or detached ("7am", "7 a.m.", "7:00 PM").
_TIME_RE = re.compile(r"(?<![0-9:])(\d{1,2})(?::(\d{2}))?\s*(a\.?m\.?|p\.?m\.?)?(?![0-9])")


@dataclass(frozen=True)
class InboundMessage:
    sender_handle: str
    raw_body: str
    received_at: datetime  # set on ingestion, never trusted from the sender
    study_id: str


@dataclass(frozen=True)
class Intent:
    """Classified meaning of a sanitized message.

    variant is one of: startcal, endcal, ambiguous_time, invalid_time,
    unknown. The time is present exactly when the variant is a resolved
    report; keyword is present for every keyword-bearing variant.
    """

    variant: str
    time: ClockTime | None = None
    keyword: str | None = None
    note: str | None = None

    @property
    def is_report(self) -> bool:
        return self.variant in KEYWORDS


UNKNOWN = Intent("unknown")


def sanitize(raw: str) -> str:
    """Normalize arbitrary input to a bounded, printable, lowercase form.

    Control characters are dropped, whitespace runs collapse to single
    spaces, and the result is trimmed and capped at 512 characters. The
    function is total and idempotent.
    """
    cleaned = "".join(ch for ch in raw if ch.isprintable() or ch in "\t\n\r")
    cleaned = _WS_RE.sub(" ", cleaned).strip().lower()
    cleaned = cleaned[:MAX_MESSAGE_CHARS].strip()
    return cleaned


def sanitize_bytes(raw: bytes) -> str:
    """sanitize() for raw wire payloads; invalid UTF-8 bytes are dropped."""
    return sanitize(raw.decode("utf-8", errors="ignore"))


@dataclass(frozen=True)
class TimeParse:
    """Outcome of reading a clock time out of free text."""

    status: str  # "ok" | "ambiguous" | "invalid"
    time: ClockTime | None = None
    extra_tokens: bool = False


def parse_clock_time(fragment: str) -> TimeParse:
    """Extract a time of day from the text around a keyword.

    Accepts "7", "7:30", "7am", "7 pm", "7:00 a.m." and 24-hour "19:30".
    Hours 1 through 12 with no meridiem are ambiguous, never guessed.
    The first readable time wins; later candidates are flagged so the
    caller can note the choice in the audit trail.
    """
    first: TimeParse | None = None
    candidates = 0
    for m in _TIME_RE.finditer(fragment):
        parsed = _resolve(m)
        if parsed is None:
            continue
        candidates += 1
        if first is None:
            first = parsed
    if first is None:
        return TimeParse("invalid")
    if candidates > 1:
        return TimeParse(first.status, first.time, extra_tokens=True)
    return first


def _resolve(m: re.Match) -> TimeParse | None:
    hour = int(m.group(1))
    minute = int(m.group(2)) if m.group(2) else 0
    meridiem = m.group(3)
    if minute > 59:
        return None
    if meridiem:
        if not 1 <= hour <= 12:
            return None
        if meridiem.startswith("p"):
            hour = 12 if hour == 12 else hour + 12
        else:
            hour = 0 if hour == 12 else hour
        return TimeParse("ok", ClockTime(hour, minute))
    if hour > 23:
        return None
    if 1 <= hour <= 12:
        return TimeParse("ambiguous")
    return TimeParse("ok", ClockTime(hour, minute))


_KEYWORD_RES = {kw: re.compile(rf"\b{kw}\b") for kw in KEYWORDS}


def classify(text: str) -> Intent:
    """Classify sanitized text into an Intent. Total; never raises.

    Exactly one keyword present as a word triggers time extraction from
    the rest of the message. No keyword, or both keywords, is unknown.
    """
    present = [kw for kw in KEYWORDS if _KEYWORD_RES[kw].search(text)]
    if len(present) != 1:
        return UNKNOWN
    keyword = present[0]
    remainder = _KEYWORD_RES[keyword].sub(" ", text)
    parsed = parse_clock_time(remainder)
    if parsed.status == "ok":
        note = "extra time tokens ignored" if parsed.extra_tokens else None
        return Intent(keyword, time=parsed.time, keyword=keyword, note=note)
    if parsed.status == "ambiguous":
        return Intent("ambiguous_time", keyword=keyword)
    return Intent("invalid_time", keyword=keyword)
