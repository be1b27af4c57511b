"""Deterministic, seeded simulation of a running study.

Drives a real service (engine, storage, gateway, simulated provider) with
scripted participant behavior over a simulated clock. Every stream of
choices is keyed by (seed, participant id), so a fixed seed reproduces the
exact same message traffic, audit log, and report, byte for byte.

A scenario script is JSON:

    {
      "cohorts": [
        {"count": 20, "group": "restricted",
         "compliance": 1.0, "ambiguity": 0.0, "silence": 0.0, "noise": 0.0}
      ],
      "randomize_after_baseline": false
    }
"""
from __future__ import annotations

import csv
import io
import json
import random
from dataclasses import dataclass
from datetime import date, datetime, timedelta
from pathlib import Path

from .clock import ClockTime, local_instant
from .config import StudyDescriptor
from .service import StudyService
from .study import BASELINE_GROUP

SIM_START_CYCLE = date(2021, 9, 9)


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Cohort:
    count: int
    group: str
    compliance: float = 1.0
    ambiguity: float = 0.0
    silence: float = 0.0
    noise: float = 0.0


@dataclass(frozen=True)
class Scenario:
    cohorts: tuple[Cohort, ...]
    randomize_after_baseline: bool = False

    @classmethod
    def parse(cls, raw: dict) -> "Scenario":
        cohorts = []
        for spec in raw.get("cohorts", []):
            try:
                cohort = Cohort(
                    count=int(spec["count"]),
                    group=str(spec["group"]),
                    compliance=float(spec.get("compliance", 1.0)),
                    ambiguity=float(spec.get("ambiguity", 0.0)),
                    silence=float(spec.get("silence", 0.0)),
                    noise=float(spec.get("noise", 0.0)),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ScenarioError(f"bad cohort spec {spec!r}: {exc}") from None
            for name in ("compliance", "ambiguity", "silence", "noise"):
                value = getattr(cohort, name)
                if not 0.0 <= value <= 1.0:
                    raise ScenarioError(f"{name} must be a probability, got {value}")
            if cohort.count < 1:
                raise ScenarioError("cohort count must be >= 1")
            cohorts.append(cohort)
        if not cohorts:
            raise ScenarioError("scenario defines no cohorts")
        return cls(tuple(cohorts), bool(raw.get("randomize_after_baseline", False)))

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ScenarioError(f"cannot read scenario {path}: {exc}") from None
        return cls.parse(raw)


def _plan_day(rng: random.Random, cohort: Cohort) -> list[tuple[int, str]]:
    """One participant-day as (minute offset from local midnight, body) sends."""
    sends: list[tuple[int, str]] = []
    if rng.random() < cohort.silence:
        return sends
    start_m = rng.randrange(6 * 60, 10 * 60)       # start between 06:00 and 10:00
    if rng.random() < cohort.compliance:
        span = rng.randrange(9 * 60 + 10, 11 * 60 - 10)
        end_m = min(start_m + span, 19 * 60 + 55)
    elif rng.random() < 0.5:
        end_m = start_m + rng.randrange(5 * 60, 8 * 60)       # too short
    else:
        end_m = min(start_m + rng.randrange(11 * 60 + 20, 12 * 60 + 30), 23 * 60)
    start_t = ClockTime.from_minutes(start_m)
    end_t = ClockTime.from_minutes(end_m)

    def report(keyword: str, t: ClockTime, at_m: int) -> None:
        if rng.random() < cohort.ambiguity:
            hour_12 = t.hour % 12 or 12
            sends.append((at_m, f"{keyword} {hour_12}"))           # no am/pm: ambiguous
            sends.append((at_m + 7, f"{keyword} {t.twelve_hour()}"))
        else:
            sends.append((at_m, f"{keyword} {t.twelve_hour()}"))

    report("STARTCAL", start_t, start_m)
    report("ENDCAL", end_t, end_m)
    if rng.random() < cohort.noise:
        sends.append((start_m + 30, "how am i doing so far?"))
    return sorted(sends)


def run_simulation(descriptor: StudyDescriptor, scenario: Scenario, seed: int,
                   days: int, data_dir: str | Path) -> tuple[dict, StudyService]:
    """Run the scripted study and return (report, service)."""
    if days < 1:
        raise ScenarioError("simulation needs at least one day")
    service = StudyService(descriptor, data_dir, fast_storage=True)
    tz = descriptor.config.timezone
    cycle_start = descriptor.config.cycle_start

    def at(day_index: int, minute_of_day: int) -> datetime:
        day = SIM_START_CYCLE + timedelta(days=day_index)
        if minute_of_day < cycle_start.day_minutes():
            day += timedelta(days=1)
        return local_instant(day, ClockTime.from_minutes(minute_of_day), tz)

    participants: list[tuple[str, str, Cohort]] = []
    index = 0
    for cohort in scenario.cohorts:
        for _ in range(cohort.count):
            index += 1
            participants.append((f"p{index:04d}", f"+1555{index:07d}", cohort))

    enroll_at = at(0, cycle_start.day_minutes() + 30)
    for pid, handle, cohort in participants:
        service.engine.enroll(pid, handle, cohort.group, enroll_at, actor="sim")

    randomized_on: dict[str, str] = {}
    timer_minutes = sorted({t.fire_at.day_minutes()
                            for p in descriptor.protocols.values() for t in p.timers})
    for day_index in range(days):
        agenda: list[tuple[datetime, str, str | None]] = []
        for pid, handle, cohort in participants:
            rng = random.Random(f"{seed}:{pid}:{day_index}")
            for minute, body in _plan_day(rng, cohort):
                agenda.append((at(day_index, minute), handle, body))
        for minute in timer_minutes:
            agenda.append((at(day_index, minute), "", None))  # bare tick beat
        agenda.sort(key=lambda item: (item[0], item[1]))
        for when, handle, body in agenda:
            service.engine.tick(when)
            service.engine.process_pending()
            if body is not None:
                service.gateway.handle_inbound({"From": handle, "Body": body}, when)
                service.engine.process_pending()
            service.gateway.pump(when)
        rollover = at(day_index + 1, cycle_start.day_minutes())
        service.engine.tick(rollover)
        service.engine.process_pending()
        service.gateway.pump(rollover)
        if scenario.randomize_after_baseline:
            boundary = day_index + 1
            if boundary == descriptor.config.baseline_days:
                for pid, _handle, cohort in participants:
                    if cohort.group == BASELINE_GROUP:
                        group = service.randomize(pid, "sim", rollover)
                        randomized_on[pid] = group
    report = _build_report(service, scenario, seed, days, participants, randomized_on)
    return report, service


def _build_report(service: StudyService, scenario: Scenario, seed: int, days: int,
                  participants, randomized_on: dict[str, str]) -> dict:
    metrics = service.metrics()
    by_template: dict[str, int] = {}
    by_category: dict[str, int] = {}
    for record in service.store.query_audit(kind="MSG_OUT"):
        template = record.payload.get("template") or "(raw)"
        category = record.payload.get("category") or "unknown"
        by_template[template] = by_template.get(template, 0) + 1
        by_category[category] = by_category.get(category, 0) + 1
    per_participant = {}
    for pid, handle, cohort in participants:
        instance = service.engine.instances[pid]
        per_participant[pid] = {
            "group": instance.group_id,
            "initial_group": cohort.group,
            "randomized_to": randomized_on.get(pid),
            "success_rate": metrics["success_rates"][pid],
        }
    return {
        "seed": seed,
        "days": days,
        "participant_count": len(participants),
        "study_id": service.study_id,
        "messages_in": metrics["messages_in"],
        "messages_out": metrics["messages_out"],
        "unrecognized_inbound": metrics["unrecognized_inbound"],
        "error_rate": metrics["error_rate"],
        "error_rate_percent": metrics["error_rate_percent"],
        "mean_success_rate": metrics["mean_success_rate"],
        "reminder_messages": metrics["reminder_messages"],
        "outbound_by_category": dict(sorted(by_category.items())),
        "outbound_by_template": dict(sorted(by_template.items())),
        "per_participant": per_participant,
    }


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def report_csv(report: dict) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer)
    writer.writerow(["participant_id", "group", "initial_group", "success_rate"])
    for pid in sorted(report["per_participant"]):
        row = report["per_participant"][pid]
        writer.writerow([pid, row["group"], row["initial_group"], row["success_rate"]])
    return buffer.getvalue()
