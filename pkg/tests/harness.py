"""Scripted-scenario harness with crash injection.

A scenario is a list of steps applied to a real StudyService. The harness
can arm a simulated crash after the Nth storage commit: the exception
surfaces mid-step, every in-memory object is discarded, and a fresh
service is opened over the same data directory, exactly like a process
restart. The provider object survives crashes because it stands in for
the outside world.
"""
from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime
from pathlib import Path

from smartstate.clock import fmt_utc
from smartstate.config import StudyDescriptor
from smartstate.gateway import SimProvider
from smartstate.intake import sanitize
from smartstate.service import StudyService


class SimulatedCrash(Exception):
    pass


@dataclass(frozen=True)
class Step:
    at: datetime
    kind: str                 # "sms" | "tick" | "enroll" | "reassign"
    handle: str = ""
    body: str = ""
    participant_id: str = ""
    group: str = ""


def sms(at: datetime, handle: str, body: str) -> Step:
    return Step(at, "sms", handle=handle, body=body)


def tick(at: datetime) -> Step:
    return Step(at, "tick")


def enroll(at: datetime, participant_id: str, handle: str, group: str) -> Step:
    return Step(at, "enroll", handle=handle, participant_id=participant_id, group=group)


def reassign(at: datetime, participant_id: str, group: str) -> Step:
    return Step(at, "reassign", participant_id=participant_id, group=group)


def _arm_crash(service: StudyService, after_commits: int) -> None:
    remaining = {"n": after_commits}

    def on_commit():
        remaining["n"] -= 1
        if remaining["n"] == 0:
            raise SimulatedCrash()

    service.store.on_commit = on_commit


def _message_already_accepted(service: StudyService, step: Step) -> bool:
    wanted_at = fmt_utc(step.at)
    wanted_body = sanitize(step.body)
    for message in service.store.query_messages(handle=step.handle, direction="in"):
        if fmt_utc(message.at) == wanted_at and message.body == wanted_body:
            return True
    return False


def apply_step(service: StudyService, step: Step, resuming: bool = False) -> None:
    service.engine.tick(step.at)
    service.engine.process_pending()
    if step.kind == "sms":
        if not (resuming and _message_already_accepted(service, step)):
            service.gateway.handle_inbound({"From": step.handle, "Body": step.body},
                                           step.at)
        service.engine.process_pending()
    elif step.kind == "enroll":
        if service.store.get_participant(step.participant_id) is None:
            service.engine.enroll(step.participant_id, step.handle, step.group, step.at)
    elif step.kind == "reassign":
        instance = service.engine.instances[step.participant_id]
        if instance.group_id != step.group:
            service.engine.reassign_protocol(step.participant_id, step.group,
                                             "harness", step.at)
    service.gateway.pump(step.at)


def run_script(descriptor: StudyDescriptor, data_dir: Path, steps: list[Step],
               provider: SimProvider | None = None,
               crash_after_commits: int | None = None,
               fast_storage: bool = False) -> StudyService:
    """Run steps to completion, surviving at most one injected crash."""
    provider = provider if provider is not None else SimProvider()
    service = StudyService(descriptor, data_dir, provider=provider,
                           fast_storage=fast_storage)
    if crash_after_commits is not None:
        _arm_crash(service, crash_after_commits)
    crashed_at: int | None = None
    for index, step in enumerate(steps):
        try:
            apply_step(service, step)
        except SimulatedCrash:
            crashed_at = index
            break
    if crashed_at is None:
        return service
    service.store.on_commit = None
    service.close()
    # Restart: reopen the same data directory with fresh objects.
    service = StudyService(descriptor, data_dir, provider=provider,
                           fast_storage=fast_storage)
    for index in range(crashed_at, len(steps)):
        apply_step(service, steps[index], resuming=(index == crashed_at))
    return service


def count_commits(descriptor: StudyDescriptor, data_dir: Path, steps: list[Step],
                  provider: SimProvider | None = None,
                  fast_storage: bool = False) -> int:
    provider = provider if provider is not None else SimProvider()
    service = StudyService(descriptor, data_dir, provider=provider,
                           fast_storage=fast_storage)
    counter = {"n": 0}

    def on_commit():
        counter["n"] += 1

    service.store.on_commit = on_commit
    for step in steps:
        apply_step(service, step)
    service.close()
    return counter["n"]


def snapshot(service: StudyService) -> dict:
    """Comparable view of everything the crash-equivalence criterion cares about."""
    states = {
        pid: {
            "state": inst.current_state,
            "cycle": inst.cycle_date.isoformat(),
            "group": inst.group_id,
            "cycle_vars": dict(inst.cycle_vars),
        }
        for pid, inst in sorted(service.engine.instances.items())
    }
    fasts = [
        (r.participant_id, r.cycle_date.isoformat(),
         r.start.hhmm() if r.start else None,
         r.end.hhmm() if r.end else None, r.outcome)
        for r in service.store.fasts_for()
    ]
    with service.store.lock:
        outbound = sorted(
            (row["idempotency_key"], row["status"])
            for row in service.store.raw.execute(
                "SELECT idempotency_key, status FROM outbound").fetchall()
        )
    audit_seqs = [r.seq for r in service.store.query_audit()]
    delivered = sorted(key for _, _, key in service.gateway.provider.transcript)
    return {
        "states": states,
        "fasts": fasts,
        "outbound": outbound,
        "delivered_keys": delivered,
        "audit_gap_free": audit_seqs == list(range(min(audit_seqs),
                                                   min(audit_seqs) + len(audit_seqs)))
        if audit_seqs else True,
    }
