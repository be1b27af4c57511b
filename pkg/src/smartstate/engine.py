"""Per-participant state machine execution.

The engine owns every live MachineInstance for one study. Inbound intents
and timer firings become EngineEvents with a per-participant sequence
number, queued durably and dispatched strictly in order. Each dispatch is
one storage transaction: the state change, its audit records, any fast
records, and any outbound messages commit together, so a crash at any
point either sees the whole event applied or none of it. Outbound effects
carry stable idempotency keys and are deduplicated on enqueue, which makes
delivery exactly-once as far as any observer can tell.
"""
from __future__ import annotations

import hashlib
import json
import sqlite3
import time as _time
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from pathlib import Path

from . import templates as tpl
from .clock import ClockTime, fmt_utc, local_instant, parse_utc
from .dsl import CYCLE_EVENT, ProtocolDef
from .intake import Intent
from .store import Participant, Store, StorageError
from .study import (
    OUTCOME_INCOMPLETE,
    StudyConfig,
    WindowError,
    compute_window,
    cycle_of,
    feedback_for,
    make_fast_record,
    success_rate,
)

CHECKPOINT_FORMAT_VERSION = 1

# Message categories, used for metrics and the per-cycle reminder cap.
CAT_PROTOCOL = "protocol"  # direct response to an accepted report
CAT_REMINDER = "reminder"  # timer-driven nudges
CAT_ERROR = "error"        # replies to unrecognized/ambiguous/invalid input
CAT_SYSTEM = "system"      # everything else (success-rate texts, rejections)

_RETRY_ATTEMPTS = 3
_RETRY_BASE_SECONDS = 0.1


class EngineError(RuntimeError):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


@dataclass(frozen=True)
class EngineEvent:
    kind: str  # "intent" | "timer" | "rollover"
    name: str  # protocol event name; for non-report intents, the intent variant
    payload: dict
    occurred_at: datetime
    seq: int

    def payload_json(self) -> str:
        return json.dumps({"name": self.name, **self.payload}, sort_keys=True)


@dataclass(frozen=True)
class ActionEffect:
    kind: str  # "outbound_message" | "data_record"
    idempotency_key: str
    payload: dict


@dataclass
class MachineInstance:
    participant_id: str
    protocol_id: str
    protocol_version: int
    group_id: str
    current_state: str
    cycle_date: date
    enrolled_cycle: date
    cycle_vars: dict = field(default_factory=dict)
    fired_timers: set = field(default_factory=set)
    last_event_seq: int = 0
    state_entered_at: datetime | None = None

    def copy(self, **changes) -> "MachineInstance":
        base = MachineInstance(
            participant_id=self.participant_id,
            protocol_id=self.protocol_id,
            protocol_version=self.protocol_version,
            group_id=self.group_id,
            current_state=self.current_state,
            cycle_date=self.cycle_date,
            enrolled_cycle=self.enrolled_cycle,
            cycle_vars=dict(self.cycle_vars),
            fired_timers=set(self.fired_timers),
            last_event_seq=self.last_event_seq,
            state_entered_at=self.state_entered_at,
        )
        for key, value in changes.items():
            setattr(base, key, value)
        return base

    def as_dict(self) -> dict:
        return {
            "participant_id": self.participant_id,
            "protocol_id": self.protocol_id,
            "protocol_version": self.protocol_version,
            "group_id": self.group_id,
            "current_state": self.current_state,
            "cycle_date": self.cycle_date.isoformat(),
            "enrolled_cycle": self.enrolled_cycle.isoformat(),
            "cycle_vars": dict(self.cycle_vars),
            "fired_timers": sorted(self.fired_timers),
            "last_event_seq": self.last_event_seq,
            "state_entered_at": fmt_utc(self.state_entered_at) if self.state_entered_at else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MachineInstance":
        return cls(
            participant_id=d["participant_id"],
            protocol_id=d["protocol_id"],
            protocol_version=d["protocol_version"],
            group_id=d["group_id"],
            current_state=d["current_state"],
            cycle_date=date.fromisoformat(d["cycle_date"]),
            enrolled_cycle=date.fromisoformat(d["enrolled_cycle"]),
            cycle_vars=dict(d.get("cycle_vars") or {}),
            fired_timers=set(d.get("fired_timers") or []),
            last_event_seq=d.get("last_event_seq", 0),
            state_entered_at=parse_utc(d["state_entered_at"]) if d.get("state_entered_at") else None,
        )


@dataclass
class DispatchResult:
    instance: MachineInstance
    effects: list[ActionEffect]
    audits: list[tuple[str, dict]]  # (kind, payload) in emit order


def idempotency_key(participant_id: str, cycle: date, kind: str, seq: int, index: int) -> str:
    """Stable identifier for one logical effect of one event."""
    raw = f"{participant_id}|{cycle.isoformat()}|{kind}|{seq}|{index}"
    return hashlib.sha256(raw.encode("utf-8")).hexdigest()[:24]


class Engine:
    """Executor for all participants of one study."""

    def __init__(self, store: Store, config: StudyConfig,
                 protocols: dict[str, ProtocolDef]):
        self.store = store
        self.config = config
        self.protocols = dict(protocols)
        for group_id, protocol_id in config.groups:
            if protocol_id not in self.protocols:
                raise EngineError("MISSING_PROTOCOL",
                                  f"group {group_id!r} needs protocol {protocol_id!r}")
        self.instances: dict[str, MachineInstance] = {}
        self._load_instances()

    # -- bootstrap ----------------------------------------------------------

    def _load_instances(self) -> None:
        with self.store.lock:
            rows = self.store.raw.execute(
                "SELECT * FROM instances WHERE active = 1"
            ).fetchall()
        for row in rows:
            inst = self._instance_from_row(row)
            if inst.protocol_id not in self.protocols:
                raise EngineError("MISSING_PROTOCOL",
                                  f"instance for {inst.participant_id} references"
                                  f" unknown protocol {inst.protocol_id!r}")
            self.instances[inst.participant_id] = inst

    @staticmethod
    def _instance_from_row(row) -> MachineInstance:
        return MachineInstance(
            participant_id=row["participant_id"],
            protocol_id=row["protocol_id"],
            protocol_version=row["protocol_version"],
            group_id=row["group_id"],
            current_state=row["current_state"],
            cycle_date=date.fromisoformat(row["cycle_date"]),
            enrolled_cycle=date.fromisoformat(row["enrolled_cycle"]),
            cycle_vars=json.loads(row["cycle_vars"]),
            fired_timers=set(json.loads(row["fired_timers"])),
            last_event_seq=row["last_event_seq"],
            state_entered_at=parse_utc(row["state_entered_at"]) if row["state_entered_at"] else None,
        )

    def protocol_for(self, instance: MachineInstance) -> ProtocolDef:
        return self.protocols[instance.protocol_id]

    def group_protocol(self, group_id: str) -> ProtocolDef:
        for gid, pid in self.config.groups:
            if gid == group_id:
                return self.protocols[pid]
        raise EngineError("UNKNOWN_GROUP", f"no group {group_id!r} in study")

    def _cycle_of(self, instant: datetime) -> date:
        return cycle_of(instant, self.config)

    # -- enrollment -----------------------------------------------------------

    def enroll(self, participant_id: str, handle: str, group_id: str,
               now: datetime, actor: str = "system") -> MachineInstance:
        """Create a participant and their machine in the group's protocol."""
        with self.store.lock:
            return self._enroll(participant_id, handle, group_id, now, actor)

    def _enroll(self, participant_id: str, handle: str, group_id: str,
                now: datetime, actor: str) -> MachineInstance:
        if participant_id in self.instances or self.store.get_participant(participant_id):
            raise EngineError("DUPLICATE_INSTANCE",
                              f"participant {participant_id!r} already has a machine")
        if self.store.participant_by_handle(handle) is not None:
            raise EngineError("DUPLICATE_HANDLE", f"handle {handle!r} already enrolled")
        protocol = self.group_protocol(group_id)
        cycle = self._cycle_of(now)
        instance = MachineInstance(
            participant_id=participant_id,
            protocol_id=protocol.protocol_id,
            protocol_version=protocol.version,
            group_id=group_id,
            current_state=protocol.initial_state,
            cycle_date=cycle,
            enrolled_cycle=cycle,
            state_entered_at=now,
        )
        participant = Participant(participant_id, handle, self.config.study_id, now, group_id)
        with self.store.tx() as conn:
            self.store.insert_participant(participant, conn=conn)
            self.store.insert_assignment(participant_id, group_id, cycle, actor, conn=conn)
            self._insert_instance(instance, conn)
            self.store.append_audit(
                now, actor, "CONFIG_CHANGE",
                {"action": "create_participant", "group_id": group_id, "handle": handle},
                participant_id=participant_id, conn=conn,
            )
        self.instances[participant_id] = instance
        return instance

    def _insert_instance(self, inst: MachineInstance, conn) -> None:
        conn.execute(
            "INSERT INTO instances (participant_id, active, protocol_id, protocol_version,"
            " group_id, current_state, cycle_date, enrolled_cycle, cycle_vars, fired_timers,"
            " last_event_seq, state_entered_at)"
            " VALUES (?, 1, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)",
            (inst.participant_id, inst.protocol_id, inst.protocol_version, inst.group_id,
             inst.current_state, inst.cycle_date.isoformat(), inst.enrolled_cycle.isoformat(),
             json.dumps(inst.cycle_vars, sort_keys=True), json.dumps(sorted(inst.fired_timers)),
             inst.last_event_seq,
             fmt_utc(inst.state_entered_at) if inst.state_entered_at else None),
        )

    def _update_instance(self, inst: MachineInstance, conn) -> None:
        conn.execute(
            "UPDATE instances SET protocol_id=?, protocol_version=?, group_id=?,"
            " current_state=?, cycle_date=?, enrolled_cycle=?, cycle_vars=?, fired_timers=?,"
            " last_event_seq=?, state_entered_at=?"
            " WHERE participant_id=? AND active=1",
            (inst.protocol_id, inst.protocol_version, inst.group_id, inst.current_state,
             inst.cycle_date.isoformat(), inst.enrolled_cycle.isoformat(),
             json.dumps(inst.cycle_vars, sort_keys=True), json.dumps(sorted(inst.fired_timers)),
             inst.last_event_seq,
             fmt_utc(inst.state_entered_at) if inst.state_entered_at else None,
             inst.participant_id),
        )

    def _require_instance(self, participant_id: str) -> MachineInstance:
        try:
            return self.instances[participant_id]
        except KeyError:
            raise EngineError("UNKNOWN_PARTICIPANT",
                              f"no machine for participant {participant_id!r}") from None

    # -- event intake ---------------------------------------------------------

    def ingest_intent(self, participant_id: str, intent: Intent,
                      occurred_at: datetime, conn=None) -> EngineEvent:
        """Queue a classified inbound message as the participant's next event."""
        self._require_instance(participant_id)
        payload = {
            "variant": intent.variant,
            "keyword": intent.keyword,
            "time": intent.time.hhmm() if intent.time else None,
        }
        if intent.note:
            payload["note"] = intent.note
        return self._enqueue(participant_id, "intent", intent.variant, payload,
                             occurred_at, conn)

    def _enqueue(self, participant_id: str, kind: str, name: str, payload: dict,
                 occurred_at: datetime, conn=None,
                 mark_fired: str | None = None) -> EngineEvent:
        """Durably append the participant's next event; seq comes from storage."""

        def write(c) -> EngineEvent:
            row = c.execute(
                "SELECT COALESCE(MAX(seq), 0) + 1 AS next FROM events WHERE participant_id=?",
                (participant_id,),
            ).fetchone()
            event = EngineEvent(kind, name, payload, occurred_at, int(row["next"]))
            c.execute(
                "INSERT INTO events (participant_id, seq, kind, payload, occurred_at)"
                " VALUES (?, ?, ?, ?, ?)",
                (participant_id, event.seq, kind, event.payload_json(), fmt_utc(occurred_at)),
            )
            if mark_fired:
                inst = self.instances[participant_id]
                c.execute(
                    "UPDATE instances SET fired_timers=? WHERE participant_id=? AND active=1",
                    (json.dumps(sorted(inst.fired_timers | {mark_fired})), participant_id),
                )
            return event

        if conn is not None:
            event = write(conn)
        else:
            with self.store.tx() as c:
                event = write(c)
        if mark_fired:
            self.instances[participant_id].fired_timers.add(mark_fired)
        return event

    # -- timers -----------------------------------------------------------------

    def _timer_fire_instant(self, inst: MachineInstance, fire_at: ClockTime) -> datetime:
        """UTC instant this timer's wall-clock time occurs within the current cycle."""
        day = inst.cycle_date
        if fire_at.day_minutes() < self.config.cycle_start.day_minutes():
            day = day + timedelta(days=1)  # after midnight, still this cycle
        return local_instant(day, fire_at, self.config.timezone)

    def _rollover_instant(self, inst: MachineInstance) -> datetime:
        return local_instant(inst.cycle_date + timedelta(days=1),
                             self.config.cycle_start, self.config.timezone)

    def pending_timers(self, participant_id: str) -> list[tuple[str, datetime]]:
        """(timer name, next fire instant) pairs armed for the current state."""
        inst = self._require_instance(participant_id)
        protocol = self.protocol_for(inst)
        out = []
        for timer in protocol.timers_active_in(inst.current_state):
            if timer.name in inst.fired_timers:
                continue
            out.append((timer.name, self._timer_fire_instant(inst, timer.fire_at)))
        out.append((CYCLE_EVENT, self._rollover_instant(inst)))
        return sorted(out, key=lambda pair: (pair[1], pair[0]))

    def tick(self, now: datetime) -> list[tuple[str, EngineEvent]]:
        """Queue every due timer and rollover event. At most once per cycle each."""
        with self.store.lock:
            return self._tick(now)

    def _tick(self, now: datetime) -> list[tuple[str, EngineEvent]]:
        due: list[tuple[datetime, str, str, str, dict]] = []
        for pid, inst in self.instances.items():
            protocol = self.protocol_for(inst)
            entered = inst.state_entered_at
            for timer in protocol.timers_active_in(inst.current_state):
                if timer.name in inst.fired_timers:
                    continue
                fire_at = self._timer_fire_instant(inst, timer.fire_at)
                if fire_at > now:
                    continue
                if entered is not None and fire_at < entered:
                    continue  # state entered after the moment passed; never fire late
                due.append((fire_at, pid, "timer", timer.emits, {"timer": timer.name}))
            rollover_at = self._rollover_instant(inst)
            if rollover_at <= now and not self._rollover_pending(pid):
                due.append((rollover_at, pid, "rollover", CYCLE_EVENT,
                            {"new_cycle": self._cycle_of(now).isoformat()}))
        emitted = []
        for fire_at, pid, kind, name, payload in sorted(due, key=lambda d: (d[0], d[1], d[3])):
            mark = payload.get("timer") if kind == "timer" else None
            event = self._enqueue(pid, kind, name, payload, fire_at, mark_fired=mark)
            emitted.append((pid, event))
        return emitted

    def _rollover_pending(self, participant_id: str) -> bool:
        with self.store.lock:
            row = self.store.raw.execute(
                "SELECT 1 FROM events WHERE participant_id=? AND kind='rollover'"
                " AND status='pending' LIMIT 1",
                (participant_id,),
            ).fetchone()
        return row is not None

    # -- processing ---------------------------------------------------------------

    def process_pending(self, max_events: int | None = None) -> int:
        """Dispatch queued events in per-participant seq order. Returns count.

        Selection and application of one event happen under the store lock,
        so concurrent drains (scheduler beat plus a webhook handler) never
        double-process a row.
        """
        processed = 0
        while max_events is None or processed < max_events:
            with self.store.lock:
                row = self._next_pending()
                if row is None:
                    break
                self._process_row(row)
            processed += 1
        return processed

    def _next_pending(self):
        with self.store.lock:
            return self.store.raw.execute(
                "SELECT e.* FROM events e JOIN instances i"
                " ON i.participant_id = e.participant_id AND i.active = 1"
                " WHERE e.status = 'pending' AND e.seq = i.last_event_seq + 1"
                " ORDER BY e.id LIMIT 1"
            ).fetchone()

    def _process_row(self, row) -> None:
        pid = row["participant_id"]
        instance = self.instances.get(pid)
        if instance is None:
            with self.store.tx() as conn:
                conn.execute("UPDATE events SET status='orphaned' WHERE id=?", (row["id"],))
            return
        payload = json.loads(row["payload"])
        name = payload.pop("name")
        event = EngineEvent(row["kind"], name, payload, parse_utc(row["occurred_at"]), row["seq"])
        if event.seq != instance.last_event_seq + 1:
            raise EngineError("STALE_EVENT",
                              f"event seq {event.seq} does not follow {instance.last_event_seq}")
        result = self.dispatch(instance, event)

        def apply(conn):
            conn.execute("UPDATE events SET status='done' WHERE id=?", (row["id"],))
            self._update_instance(result.instance, conn)
            for kind, audit_payload in result.audits:
                self.store.append_audit(event.occurred_at, "system", kind, audit_payload,
                                        participant_id=pid, conn=conn)
            for effect in result.effects:
                self._apply_effect(result.instance, event, effect, conn)

        try:
            self._with_retries(apply)
        except StorageError:
            with self.store.tx() as conn:
                conn.execute("UPDATE events SET status='parked' WHERE id=?", (row["id"],))
                self.store.append_audit(
                    event.occurred_at, "system", "FAULT",
                    {"code": "EVENT_PARKED", "event_seq": event.seq, "event": event.name},
                    participant_id=pid, conn=conn,
                )
            return
        self.instances[pid] = result.instance

    def _with_retries(self, fn) -> None:
        delay = _RETRY_BASE_SECONDS
        for attempt in range(1, _RETRY_ATTEMPTS + 1):
            try:
                with self.store.tx() as conn:
                    fn(conn)
                return
            except sqlite3.OperationalError:
                if attempt == _RETRY_ATTEMPTS:
                    raise StorageError("persistence failed after retries") from None
                _time.sleep(delay)
                delay *= 2

    def _apply_effect(self, instance: MachineInstance, event: EngineEvent,
                      effect: ActionEffect, conn) -> None:
        if effect.kind == "data_record":
            record = effect.payload.get("fast_record")
            if record is not None:
                self.store.upsert_fast(record, conn=conn)
            return
        if effect.kind == "outbound_message":
            p = effect.payload
            inserted = conn.execute(
                "INSERT OR IGNORE INTO outbound (idempotency_key, participant_id, handle,"
                " body, category, enqueued_at) VALUES (?, ?, ?, ?, ?, ?)",
                (effect.idempotency_key, instance.participant_id, p["handle"], p["body"],
                 p["category"], fmt_utc(event.occurred_at)),
            ).rowcount
            if inserted:
                seq = self.store.append_audit(
                    event.occurred_at, "system", "MSG_OUT",
                    {"template": p["template"], "category": p["category"],
                     "idempotency_key": effect.idempotency_key, "event_seq": event.seq},
                    participant_id=instance.participant_id, conn=conn,
                )
                self.store.record_message("out", p["handle"], event.occurred_at, p["body"],
                                          seq, idempotency_key=effect.idempotency_key,
                                          conn=conn)

    # -- dispatch -------------------------------------------------------------

    def dispatch(self, instance: MachineInstance, event: EngineEvent) -> DispatchResult:
        """Compute the successor instance and effects for one event.

        Deterministic given the instance, the event, and the recorded fast
        history; writes nothing itself.
        """
        protocol = self.protocol_for(instance)
        handle = self._handle_for(instance.participant_id)
        ctx = _DispatchCtx(self, instance, event, protocol, handle)

        if event.kind == "intent" and event.payload.get("variant") not in ("startcal", "endcal"):
            return ctx.reply_to_unrecognized()

        event_name = CYCLE_EVENT if event.kind == "rollover" else event.name
        transition = protocol.transition_for(instance.current_state, event_name)
        if transition is None:
            if event.kind == "intent":
                return ctx.reply_not_applicable()
            return ctx.ignore_internal()
        return ctx.take(transition)

    def _handle_for(self, participant_id: str) -> str:
        participant = self.store.get_participant(participant_id)
        return participant.handle if participant else participant_id

    # -- researcher operations --------------------------------------------------

    def manual_transition(self, participant_id: str, target_state: str,
                          actor: str, now: datetime) -> MachineInstance:
        """Silent researcher move: no template actions fire, fully audited."""
        with self.store.lock:
            return self._manual_transition(participant_id, target_state, actor, now)

    def _manual_transition(self, participant_id: str, target_state: str,
                           actor: str, now: datetime) -> MachineInstance:
        instance = self._require_instance(participant_id)
        protocol = self.protocol_for(instance)
        if target_state not in protocol.state_names():
            raise EngineError("UNKNOWN_STATE",
                              f"protocol {protocol.protocol_id!r} has no state {target_state!r}")
        if not actor:
            raise EngineError("UNAUTHENTICATED", "manual transitions require a researcher actor")
        before = instance.current_state
        updated = instance.copy(current_state=target_state, state_entered_at=now)
        with self.store.tx() as conn:
            self._update_instance(updated, conn)
            self.store.append_audit(
                now, actor, "MANUAL_TRANSITION",
                {"from": before, "to": target_state, "protocol": protocol.key()},
                participant_id=participant_id, conn=conn,
            )
        self.instances[participant_id] = updated
        return updated

    def reassign_protocol(self, participant_id: str, new_group: str, actor: str,
                          now: datetime, checkpoint_path: str | Path | None = None) -> MachineInstance:
        """Archive the current machine and start fresh in the new group's protocol.

        The participant's event queue must be drained first; a checkpoint is
        taken synchronously before the swap, and the swap itself is a single
        transaction carrying exactly one GROUP_REASSIGNED audit record.
        """
        with self.store.lock:
            return self._reassign_protocol(participant_id, new_group, actor, now,
                                           checkpoint_path)

    def _reassign_protocol(self, participant_id: str, new_group: str, actor: str,
                           now: datetime,
                           checkpoint_path: str | Path | None) -> MachineInstance:
        instance = self._require_instance(participant_id)
        new_protocol = self.group_protocol(new_group)
        if self._has_pending_events(participant_id):
            raise EngineError("PENDING_EVENTS",
                              "participant has unflushed events; retry after processing")
        if checkpoint_path is not None:
            self.save_checkpoint(checkpoint_path, now)
        effective = self._cycle_of(now)
        fresh = MachineInstance(
            participant_id=participant_id,
            protocol_id=new_protocol.protocol_id,
            protocol_version=new_protocol.version,
            group_id=new_group,
            current_state=new_protocol.initial_state,
            cycle_date=effective,
            enrolled_cycle=effective,
            last_event_seq=instance.last_event_seq,
            state_entered_at=now,
        )
        old_group = instance.group_id
        with self.store.tx() as conn:
            conn.execute(
                "UPDATE instances SET active=0 WHERE participant_id=? AND active=1",
                (participant_id,),
            )
            self._insert_instance(fresh, conn)
            self.store.update_participant(participant_id, group_id=new_group, conn=conn)
            self.store.insert_assignment(participant_id, new_group, effective, actor, conn=conn)
            self.store.append_audit(
                now, actor, "GROUP_REASSIGNED",
                {"old_group": old_group, "new_group": new_group,
                 "old_protocol": f"{instance.protocol_id}@{instance.protocol_version}",
                 "new_protocol": new_protocol.key(),
                 "effective_cycle": effective.isoformat()},
                participant_id=participant_id, conn=conn,
            )
        self.instances[participant_id] = fresh
        return fresh

    def _has_pending_events(self, participant_id: str) -> bool:
        with self.store.lock:
            row = self.store.raw.execute(
                "SELECT 1 FROM events WHERE participant_id=? AND status='pending' LIMIT 1",
                (participant_id,),
            ).fetchone()
        return row is not None

    # -- checkpointing ----------------------------------------------------------

    def save_checkpoint(self, path: str | Path, now: datetime) -> Path:
        """Self-contained snapshot: instances, timers, watermarks, participants."""
        snapshot = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "taken_at": fmt_utc(now),
            "study_id": self.config.study_id,
            "protocols": {p.protocol_id: p.version for p in self.protocols.values()},
            "audit_seq_watermark": self.store.max_audit_seq(),
            "participants": [p.as_dict() for p in self.store.list_participants()],
            "instances": [inst.as_dict() for inst in
                          sorted(self.instances.values(), key=lambda i: i.participant_id)],
        }
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(snapshot, indent=2, sort_keys=True), encoding="utf-8")
        tmp.replace(path)
        return path

    @classmethod
    def restore(cls, checkpoint_path: str | Path, store: Store, config: StudyConfig,
                protocols: dict[str, ProtocolDef]) -> "Engine":
        """Rebuild an engine from a checkpoint file plus protocol definitions.

        Fails closed: a format version mismatch or a missing protocol refuses
        to start rather than guessing.
        """
        snapshot = json.loads(Path(checkpoint_path).read_text(encoding="utf-8"))
        if snapshot.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise EngineError("VERSION_MISMATCH",
                              f"checkpoint format {snapshot.get('format_version')!r}"
                              f" != {CHECKPOINT_FORMAT_VERSION}")
        for pid, version in snapshot.get("protocols", {}).items():
            known = protocols.get(pid)
            if known is None or known.version != version:
                raise EngineError("MISSING_PROTOCOL",
                                  f"checkpoint needs protocol {pid}@{version}")
        for d in snapshot.get("instances", []):
            if d["protocol_id"] not in protocols:
                raise EngineError("MISSING_PROTOCOL",
                                  f"checkpoint instance references {d['protocol_id']!r}")
        engine = cls(store, config, protocols)
        with store.tx() as conn:
            for p in snapshot.get("participants", []):
                if store.get_participant(p["participant_id"]) is None:
                    store.insert_participant(
                        Participant(p["participant_id"], p["handle"], p["study_id"],
                                    parse_utc(p["enrolled_at"]), p["group_id"], p["status"]),
                        conn=conn,
                    )
            for d in snapshot.get("instances", []):
                inst = MachineInstance.from_dict(d)
                if inst.participant_id in engine.instances:
                    conn.execute(
                        "UPDATE instances SET active=0 WHERE participant_id=? AND active=1",
                        (inst.participant_id,),
                    )
                engine._insert_instance(inst, conn)
                engine.instances[inst.participant_id] = inst
        # Audit sequence numbers are never reused: restoring into a fresh
        # store advances its counter past the checkpoint's watermark.
        store.advance_audit_seq(int(snapshot.get("audit_seq_watermark", 0)))
        return engine


class _AbortTransition(Exception):
    """Rolls the whole transition back; optionally replies and audits."""

    def __init__(self, reply_template: str | None = None, fault: dict | None = None):
        super().__init__(reply_template or "aborted")
        self.reply_template = reply_template
        self.fault = fault


class _DispatchCtx:
    """Work area for one dispatch: staged instance plus accumulating effects."""

    def __init__(self, engine: Engine, instance: MachineInstance, event: EngineEvent,
                 protocol: ProtocolDef, handle: str):
        self.engine = engine
        self.config = engine.config
        self.event = event
        self.protocol = protocol
        self.handle = handle
        self.original = instance
        self.staged = instance.copy(last_event_seq=event.seq)
        self.effects: list[ActionEffect] = []
        self.audits: list[tuple[str, dict]] = []
        self._effect_index = 0

    # .. effect helpers ..

    def _key(self, kind: str) -> str:
        key = idempotency_key(self.original.participant_id, self.original.cycle_date,
                              kind, self.event.seq, self._effect_index)
        self._effect_index += 1
        return key

    def send(self, template_id: str, category: str, extra: dict | None = None) -> None:
        body_tpl = tpl.resolve(template_id, self.protocol.templates)
        if body_tpl is None:
            self.audits.append(("FAULT", {"code": "MISSING_TEMPLATE", "template": template_id}))
            return
        try:
            body = tpl.render(template_id, body_tpl, self._render_context(extra or {}))
        except tpl.UnresolvedPlaceholder as exc:
            self.audits.append(("FAULT", {
                "code": "UNRESOLVED_PLACEHOLDER",
                "template": template_id,
                "placeholder": exc.name,
            }))
            return
        self.effects.append(ActionEffect(
            kind="outbound_message",
            idempotency_key=self._key(f"send:{template_id}"),
            payload={"handle": self.handle, "body": body, "template": template_id,
                     "category": category},
        ))

    def data(self, record_kind: str, payload: dict) -> None:
        self.effects.append(ActionEffect(
            kind="data_record",
            idempotency_key=self._key(f"data:{record_kind}"),
            payload={"record_kind": record_kind, **payload},
        ))

    def _render_context(self, extra: dict) -> dict:
        cv = self.staged.cycle_vars
        ctx = {
            "participant_id": self.original.participant_id,
            "handle": self.handle,
            "study_id": self.config.study_id,
            "group_id": self.staged.group_id,
            "cycle_date": self.original.cycle_date.isoformat(),
            "latest_end": self.config.latest_end.twelve_hour(),
        }
        if cv.get("start_time"):
            ctx["start_time"] = ClockTime.parse(cv["start_time"]).twelve_hour()
        if cv.get("end_time"):
            ctx["end_time"] = ClockTime.parse(cv["end_time"]).twelve_hour()
        window = cv.get("window")
        if window:
            ctx["window_target"] = ClockTime.parse(window["target_end"]).twelve_hour()
            ctx["window_earliest"] = ClockTime.parse(window["earliest_ok"]).twelve_hour()
            ctx["window_latest"] = ClockTime.parse(window["latest_ok"]).twelve_hour()
        keyword = self.event.payload.get("keyword")
        if keyword:
            ctx["event_keyword"] = keyword.upper()
        time_str = self.event.payload.get("time")
        if time_str:
            ctx["time"] = ClockTime.parse(time_str).twelve_hour()
        ctx.update(extra)
        return ctx

    # .. terminal shapes ..

    def reply_to_unrecognized(self) -> DispatchResult:
        """Ambiguous, invalid, or unknown inbound: correct-the-sender reply only."""
        variant = self.event.payload.get("variant")
        keyword = self.event.payload.get("keyword")
        if variant in ("ambiguous_time", "invalid_time") and keyword:
            template_id = f"ambiguous_{keyword}"
        else:
            template_id = "unknown_message"
        self.send(template_id, CAT_ERROR)
        return self._done()

    def reply_not_applicable(self) -> DispatchResult:
        self.send("not_applicable", CAT_SYSTEM)
        return self._done()

    def ignore_internal(self) -> DispatchResult:
        """Timer or rollover event with no matching transition: drop quietly."""
        if self.event.kind == "rollover":
            self._advance_cycle()
        return self._done()

    def take(self, transition) -> DispatchResult:
        category = {"timer": CAT_REMINDER, "rollover": CAT_SYSTEM}.get(
            self.event.kind, CAT_PROTOCOL)
        try:
            for action in transition.actions:
                self._run_action(action, category)
            target_def = next(s for s in self.protocol.states if s.name == transition.target)
            for action in target_def.entry_actions:
                self._run_action(action, category)
        except _AbortTransition as abort:
            return self._aborted(abort)
        self.staged.current_state = transition.target
        self.staged.state_entered_at = self.event.occurred_at
        self.audits.append(("TRANSITION", {
            "from": self.original.current_state,
            "event": transition.event,
            "to": transition.target,
            "protocol": self.protocol.key(),
            "event_seq": self.event.seq,
            "event_kind": self.event.kind,
        }))
        if self.event.kind == "rollover":
            self._advance_cycle()
        return self._done()

    def _aborted(self, abort: _AbortTransition) -> DispatchResult:
        """Discard all staged work; emit only the abort's own reply and audits."""
        fresh = _DispatchCtx(self.engine, self.original, self.event,
                             self.protocol, self.handle)
        if abort.fault:
            fresh.audits.append(("FAULT", abort.fault))
        if abort.reply_template:
            fresh.send(abort.reply_template, CAT_SYSTEM)
        if self.event.kind == "rollover":
            fresh._advance_cycle()
        return fresh._done()

    def _done(self) -> DispatchResult:
        return DispatchResult(self.staged, self.effects, self.audits)

    def _advance_cycle(self) -> None:
        self.staged.cycle_date = date.fromisoformat(self.event.payload["new_cycle"])
        self.staged.fired_timers = set()

    # .. actions ..

    def _run_action(self, action, category: str) -> None:
        handler = getattr(self, f"_act_{action.kind}", None)
        if handler is None:
            raise _AbortTransition(fault={"code": "UNKNOWN_ACTION", "action": action.kind})
        handler(action, category)

    def _event_time(self) -> str | None:
        return self.event.payload.get("time")

    def _record_time(self, field_name: str) -> None:
        new = self._event_time()
        if new is None:
            raise _AbortTransition(fault={"code": "MISSING_TIME", "field": field_name})
        old = self.staged.cycle_vars.get(field_name)
        if old is not None and old != new:
            self.audits.append(("CORRECTION", {
                "field": field_name, "old": old, "new": new,
                "cycle_date": self.original.cycle_date.isoformat(),
            }))
        self.staged.cycle_vars[field_name] = new
        self.data(field_name, {"value": new,
                               "cycle_date": self.original.cycle_date.isoformat()})

    def _act_record_start(self, action, category: str) -> None:
        self._record_time("start_time")

    def _act_record_end(self, action, category: str) -> None:
        self._record_time("end_time")

    def _act_compute_window(self, action, category: str) -> None:
        start = self.staged.cycle_vars.get("start_time")
        if start is None:
            raise _AbortTransition(fault={"code": "MISSING_TIME", "field": "start_time"})
        try:
            window = compute_window(ClockTime.parse(start), self.config)
        except WindowError:
            raise _AbortTransition(reply_template="start_too_late") from None
        self.staged.cycle_vars["window"] = {
            "start": window.start.hhmm(),
            "target_end": window.target_end.hhmm(),
            "earliest_ok": window.earliest_ok.hhmm(),
            "latest_ok": window.latest_ok.hhmm(),
        }

    def _act_send_template(self, action, category: str) -> None:
        self.send(action.param, category)

    def _act_evaluate_cycle(self, action, category: str) -> None:
        cv = self.staged.cycle_vars
        start = ClockTime.parse(cv["start_time"]) if cv.get("start_time") else None
        end = ClockTime.parse(cv["end_time"]) if cv.get("end_time") else None
        if start is not None and end is not None:
            start_m = self.config.minutes_into_cycle(start)
            end_m = self.config.minutes_into_cycle(end)
            if end_m <= start_m:
                raise _AbortTransition(reply_template="end_before_start")
        record = make_fast_record(self.original.participant_id, self.original.cycle_date,
                                  start, end, self.config)
        self.data("fast_record", {"fast_record": record, "outcome": record.outcome})
        if record.outcome == OUTCOME_INCOMPLETE:
            return
        template_id = feedback_for(record.outcome, neutral=(action.param == "neutral"))
        minutes = record.duration_minutes or 0
        self.send(template_id, category, extra={
            "duration_hours": f"{minutes / 60:g}",
            "duration_minutes": str(minutes),
            "outcome": record.outcome,
        })

    def _act_send_success_rate(self, action, category: str) -> None:
        pid = self.original.participant_id
        through = self.original.cycle_date
        by_cycle = {r.cycle_date: r for r in self.engine.store.fasts_for(pid, through=through)}
        for effect in self.effects:  # records staged earlier in this same dispatch
            if effect.payload.get("record_kind") == "fast_record":
                record = effect.payload["fast_record"]
                if record.cycle_date <= through:
                    by_cycle[record.cycle_date] = record
        records = [r for r in by_cycle.values() if r.cycle_date >= self.staged.enrolled_cycle]
        days = (through - self.staged.enrolled_cycle).days + 1
        rate = success_rate(records, days)
        self.send("success_rate_update", CAT_SYSTEM, extra={
            "rate_percent": f"{rate * 100:.1f}",
        })

    def _act_reset_cycle(self, action, category: str) -> None:
        cv = self.staged.cycle_vars
        cycle = self.original.cycle_date
        already = self.engine.store.fast_exists(self.original.participant_id, cycle)
        staged_record = any(e.payload.get("record_kind") == "fast_record" for e in self.effects)
        if not already and not staged_record:
            start = ClockTime.parse(cv["start_time"]) if cv.get("start_time") else None
            end = ClockTime.parse(cv["end_time"]) if cv.get("end_time") else None
            record = make_fast_record(self.original.participant_id, cycle, start, end, self.config)
            self.data("fast_record", {"fast_record": record, "outcome": record.outcome})
        self.staged.cycle_vars = {}
