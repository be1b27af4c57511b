"""Durable storage: audit log, messages, fast records, queues.

One sqlite file per study keeps each study's data fully independent and
makes backups a file copy. All writes go through a single serialized
writer; the audit sequence is assigned by the database and is gap-free
because audit rows are never deleted or rewritten.
"""
from __future__ import annotations

import json
import sqlite3
import threading
from dataclasses import dataclass
from datetime import date, datetime
from pathlib import Path

from .clock import ClockTime, fmt_utc, parse_utc
from .study import FastRecord

SCHEMA_VERSION = 1

AUDIT_KINDS = (
    "MSG_IN",
    "MSG_OUT",
    "TRANSITION",
    "MANUAL_TRANSITION",
    "GROUP_REASSIGNED",
    "CORRECTION",
    "FAULT",
    "CONFIG_CHANGE",
)

_SCHEMA = """
CREATE TABLE IF NOT EXISTS meta (
    k TEXT PRIMARY KEY,
    v TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS audit (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    at TEXT NOT NULL,
    actor TEXT NOT NULL,
    kind TEXT NOT NULL,
    participant_id TEXT,
    study_id TEXT NOT NULL,
    payload TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS messages (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    direction TEXT NOT NULL CHECK (direction IN ('in', 'out')),
    handle TEXT NOT NULL,
    at TEXT NOT NULL,
    body TEXT NOT NULL,
    intent TEXT,
    idempotency_key TEXT,
    audit_seq INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS fasts (
    participant_id TEXT NOT NULL,
    cycle_date TEXT NOT NULL,
    start TEXT,
    end TEXT,
    duration_minutes INTEGER,
    outcome TEXT NOT NULL,
    PRIMARY KEY (participant_id, cycle_date)
);
CREATE TABLE IF NOT EXISTS participants (
    participant_id TEXT PRIMARY KEY,
    handle TEXT NOT NULL UNIQUE,
    study_id TEXT NOT NULL,
    enrolled_at TEXT NOT NULL,
    group_id TEXT NOT NULL,
    status TEXT NOT NULL DEFAULT 'active'
);
CREATE TABLE IF NOT EXISTS assignments (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    participant_id TEXT NOT NULL,
    group_id TEXT NOT NULL,
    effective_from TEXT NOT NULL,
    assigned_by TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS instances (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    participant_id TEXT NOT NULL,
    active INTEGER NOT NULL DEFAULT 1,
    protocol_id TEXT NOT NULL,
    protocol_version INTEGER NOT NULL,
    group_id TEXT NOT NULL,
    current_state TEXT NOT NULL,
    cycle_date TEXT NOT NULL,
    enrolled_cycle TEXT NOT NULL,
    cycle_vars TEXT NOT NULL DEFAULT '{}',
    fired_timers TEXT NOT NULL DEFAULT '[]',
    last_event_seq INTEGER NOT NULL DEFAULT 0,
    state_entered_at TEXT
);
CREATE UNIQUE INDEX IF NOT EXISTS idx_instances_active
    ON instances (participant_id) WHERE active = 1;
CREATE TABLE IF NOT EXISTS events (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    participant_id TEXT NOT NULL,
    seq INTEGER NOT NULL,
    kind TEXT NOT NULL,
    payload TEXT NOT NULL,
    occurred_at TEXT NOT NULL,
    status TEXT NOT NULL DEFAULT 'pending',
    UNIQUE (participant_id, seq)
);
CREATE TABLE IF NOT EXISTS outbound (
    idempotency_key TEXT PRIMARY KEY,
    participant_id TEXT,
    handle TEXT NOT NULL,
    body TEXT NOT NULL,
    category TEXT NOT NULL DEFAULT 'protocol',
    attempts INTEGER NOT NULL DEFAULT 0,
    next_attempt_at TEXT,
    status TEXT NOT NULL DEFAULT 'queued',
    enqueued_at TEXT NOT NULL
);
"""


@dataclass(frozen=True)
class AuditRecord:
    seq: int
    at: datetime
    actor: str
    kind: str
    participant_id: str | None
    study_id: str
    payload: dict

    def as_dict(self) -> dict:
        return {
            "seq": self.seq,
            "at": fmt_utc(self.at),
            "actor": self.actor,
            "kind": self.kind,
            "participant_id": self.participant_id,
            "study_id": self.study_id,
            "payload": self.payload,
        }


@dataclass(frozen=True)
class Participant:
    participant_id: str
    handle: str
    study_id: str
    enrolled_at: datetime
    group_id: str
    status: str = "active"

    def as_dict(self) -> dict:
        return {
            "participant_id": self.participant_id,
            "handle": self.handle,
            "study_id": self.study_id,
            "enrolled_at": fmt_utc(self.enrolled_at),
            "group_id": self.group_id,
            "status": self.status,
        }


@dataclass(frozen=True)
class StoredMessage:
    direction: str
    handle: str
    at: datetime
    body: str
    intent: str | None
    idempotency_key: str | None
    audit_seq: int

    def as_dict(self) -> dict:
        return {
            "direction": self.direction,
            "handle": self.handle,
            "at": fmt_utc(self.at),
            "body": self.body,
            "intent": self.intent,
            "idempotency_key": self.idempotency_key,
            "audit_seq": self.audit_seq,
        }


class StorageError(RuntimeError):
    pass


class Store:
    """System of record for one study."""

    def __init__(self, path: str | Path, study_id: str, fast: bool = False):
        """Open or create the study's data file.

        fast=True relaxes fsync durability (for simulations, where the file
        is throwaway); live deployments keep the default.
        """
        self.path = Path(path)
        self.study_id = study_id
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.RLock()
        self._conn = sqlite3.connect(str(self.path), check_same_thread=False)
        self._conn.row_factory = sqlite3.Row
        # Test seam: called after every committed transaction (crash injection).
        self.on_commit = None
        with self._lock:
            self._conn.execute("PRAGMA journal_mode=WAL")
            self._conn.execute(f"PRAGMA synchronous={'OFF' if fast else 'FULL'}")
            self._conn.executescript(_SCHEMA)
            self._conn.execute(
                "INSERT OR IGNORE INTO meta (k, v) VALUES ('schema_version', ?)",
                (str(SCHEMA_VERSION),),
            )
            self._conn.commit()

    def close(self) -> None:
        with self._lock:
            self._conn.close()

    # -- transactions -------------------------------------------------------

    def tx(self) -> "_Tx":
        return _Tx(self)

    # -- audit --------------------------------------------------------------

    def append_audit(self, at: datetime, actor: str, kind: str,
                     payload: dict, participant_id: str | None = None,
                     conn: sqlite3.Connection | None = None) -> int:
        """Append one immutable audit record; returns its sequence number."""
        if kind not in AUDIT_KINDS:
            raise StorageError(f"unknown audit kind {kind!r}")
        c = conn or self._conn
        with self._lock:
            cur = c.execute(
                "INSERT INTO audit (at, actor, kind, participant_id, study_id, payload)"
                " VALUES (?, ?, ?, ?, ?, ?)",
                (fmt_utc(at), actor, kind, participant_id, self.study_id,
                 json.dumps(payload, sort_keys=True)),
            )
            if conn is None:
                c.commit()
            return int(cur.lastrowid)

    def query_audit(self, participant_id: str | None = None, kind: str | None = None,
                    since: datetime | None = None, until: datetime | None = None,
                    limit: int | None = None) -> list[AuditRecord]:
        clauses, params = ["1=1"], []
        if participant_id is not None:
            clauses.append("participant_id = ?")
            params.append(participant_id)
        if kind is not None:
            clauses.append("kind = ?")
            params.append(kind)
        if since is not None:
            clauses.append("at >= ?")
            params.append(fmt_utc(since))
        if until is not None:
            clauses.append("at <= ?")
            params.append(fmt_utc(until))
        sql = f"SELECT * FROM audit WHERE {' AND '.join(clauses)} ORDER BY seq"
        if limit is not None:
            sql += f" LIMIT {int(limit)}"
        with self._lock:
            rows = self._conn.execute(sql, params).fetchall()
        return [self._audit_row(r) for r in rows]

    @staticmethod
    def _audit_row(row: sqlite3.Row) -> AuditRecord:
        return AuditRecord(
            seq=row["seq"],
            at=parse_utc(row["at"]),
            actor=row["actor"],
            kind=row["kind"],
            participant_id=row["participant_id"],
            study_id=row["study_id"],
            payload=json.loads(row["payload"]),
        )

    def max_audit_seq(self) -> int:
        with self._lock:
            row = self._conn.execute("SELECT MAX(seq) AS m FROM audit").fetchone()
        return int(row["m"] or 0)

    def advance_audit_seq(self, watermark: int) -> None:
        """Ensure future audit seqs land strictly above `watermark`."""
        if watermark <= self.max_audit_seq():
            return
        with self._lock:
            updated = self._conn.execute(
                "UPDATE sqlite_sequence SET seq = ? WHERE name = 'audit'",
                (watermark,),
            ).rowcount
            if not updated:
                self._conn.execute(
                    "INSERT INTO sqlite_sequence (name, seq) VALUES ('audit', ?)",
                    (watermark,),
                )
            self._conn.commit()

    # -- messages -----------------------------------------------------------

    def record_message(self, direction: str, handle: str, at: datetime, body: str,
                       audit_seq: int, intent: str | None = None,
                       idempotency_key: str | None = None,
                       conn: sqlite3.Connection | None = None) -> None:
        c = conn or self._conn
        with self._lock:
            c.execute(
                "INSERT INTO messages (direction, handle, at, body, intent,"
                " idempotency_key, audit_seq) VALUES (?, ?, ?, ?, ?, ?, ?)",
                (direction, handle, fmt_utc(at), body, intent, idempotency_key, audit_seq),
            )
            if conn is None:
                c.commit()

    def query_messages(self, handle: str | None = None,
                       direction: str | None = None) -> list[StoredMessage]:
        clauses, params = ["1=1"], []
        if handle is not None:
            clauses.append("handle = ?")
            params.append(handle)
        if direction is not None:
            clauses.append("direction = ?")
            params.append(direction)
        sql = f"SELECT * FROM messages WHERE {' AND '.join(clauses)} ORDER BY id"
        with self._lock:
            rows = self._conn.execute(sql, params).fetchall()
        return [
            StoredMessage(
                direction=r["direction"], handle=r["handle"], at=parse_utc(r["at"]),
                body=r["body"], intent=r["intent"],
                idempotency_key=r["idempotency_key"], audit_seq=r["audit_seq"],
            )
            for r in rows
        ]

    def count_messages(self, direction: str) -> int:
        with self._lock:
            row = self._conn.execute(
                "SELECT COUNT(*) AS n FROM messages WHERE direction = ?", (direction,)
            ).fetchone()
        return int(row["n"])

    # -- fast records ---------------------------------------------------------

    def upsert_fast(self, record: FastRecord, conn: sqlite3.Connection | None = None) -> None:
        c = conn or self._conn
        with self._lock:
            c.execute(
                "INSERT INTO fasts (participant_id, cycle_date, start, end,"
                " duration_minutes, outcome) VALUES (?, ?, ?, ?, ?, ?)"
                " ON CONFLICT (participant_id, cycle_date) DO UPDATE SET"
                " start=excluded.start, end=excluded.end,"
                " duration_minutes=excluded.duration_minutes, outcome=excluded.outcome",
                (
                    record.participant_id,
                    record.cycle_date.isoformat(),
                    record.start.hhmm() if record.start else None,
                    record.end.hhmm() if record.end else None,
                    record.duration_minutes,
                    record.outcome,
                ),
            )
            if conn is None:
                c.commit()

    def fast_exists(self, participant_id: str, cycle: date) -> bool:
        with self._lock:
            row = self._conn.execute(
                "SELECT 1 FROM fasts WHERE participant_id = ? AND cycle_date = ?",
                (participant_id, cycle.isoformat()),
            ).fetchone()
        return row is not None

    def fasts_for(self, participant_id: str | None = None,
                  through: date | None = None) -> list[FastRecord]:
        clauses, params = ["1=1"], []
        if participant_id is not None:
            clauses.append("participant_id = ?")
            params.append(participant_id)
        if through is not None:
            clauses.append("cycle_date <= ?")
            params.append(through.isoformat())
        sql = (f"SELECT * FROM fasts WHERE {' AND '.join(clauses)}"
               " ORDER BY participant_id, cycle_date")
        with self._lock:
            rows = self._conn.execute(sql, params).fetchall()
        return [
            FastRecord(
                participant_id=r["participant_id"],
                cycle_date=date.fromisoformat(r["cycle_date"]),
                start=ClockTime.parse(r["start"]) if r["start"] else None,
                end=ClockTime.parse(r["end"]) if r["end"] else None,
                duration_minutes=r["duration_minutes"],
                outcome=r["outcome"],
            )
            for r in rows
        ]

    # -- participants ---------------------------------------------------------

    def insert_participant(self, p: Participant, conn: sqlite3.Connection | None = None) -> None:
        c = conn or self._conn
        with self._lock:
            c.execute(
                "INSERT INTO participants (participant_id, handle, study_id,"
                " enrolled_at, group_id, status) VALUES (?, ?, ?, ?, ?, ?)",
                (p.participant_id, p.handle, p.study_id, fmt_utc(p.enrolled_at),
                 p.group_id, p.status),
            )
            if conn is None:
                c.commit()

    def update_participant(self, participant_id: str, *, group_id: str | None = None,
                           status: str | None = None,
                           conn: sqlite3.Connection | None = None) -> None:
        c = conn or self._conn
        with self._lock:
            if group_id is not None:
                c.execute("UPDATE participants SET group_id = ? WHERE participant_id = ?",
                          (group_id, participant_id))
            if status is not None:
                c.execute("UPDATE participants SET status = ? WHERE participant_id = ?",
                          (status, participant_id))
            if conn is None:
                c.commit()

    def get_participant(self, participant_id: str) -> Participant | None:
        with self._lock:
            row = self._conn.execute(
                "SELECT * FROM participants WHERE participant_id = ?", (participant_id,)
            ).fetchone()
        return self._participant_row(row) if row else None

    def participant_by_handle(self, handle: str) -> Participant | None:
        with self._lock:
            row = self._conn.execute(
                "SELECT * FROM participants WHERE handle = ?", (handle,)
            ).fetchone()
        return self._participant_row(row) if row else None

    def list_participants(self) -> list[Participant]:
        with self._lock:
            rows = self._conn.execute(
                "SELECT * FROM participants ORDER BY participant_id"
            ).fetchall()
        return [self._participant_row(r) for r in rows]

    @staticmethod
    def _participant_row(row: sqlite3.Row) -> Participant:
        return Participant(
            participant_id=row["participant_id"],
            handle=row["handle"],
            study_id=row["study_id"],
            enrolled_at=parse_utc(row["enrolled_at"]),
            group_id=row["group_id"],
            status=row["status"],
        )

    def insert_assignment(self, participant_id: str, group_id: str, effective_from: date,
                          assigned_by: str, conn: sqlite3.Connection | None = None) -> None:
        c = conn or self._conn
        with self._lock:
            c.execute(
                "INSERT INTO assignments (participant_id, group_id, effective_from,"
                " assigned_by) VALUES (?, ?, ?, ?)",
                (participant_id, group_id, effective_from.isoformat(), assigned_by),
            )
            if conn is None:
                c.commit()

    def assignments_for(self, participant_id: str) -> list[dict]:
        with self._lock:
            rows = self._conn.execute(
                "SELECT * FROM assignments WHERE participant_id = ? ORDER BY id",
                (participant_id,),
            ).fetchall()
        return [dict(r) for r in rows]

    # -- backup ---------------------------------------------------------------

    def backup_to(self, dest_dir: str | Path) -> Path:
        """Consistent copy of the study's data file into dest_dir."""
        dest_dir = Path(dest_dir)
        dest_dir.mkdir(parents=True, exist_ok=True)
        target = dest_dir / self.path.name
        with self._lock:
            out = sqlite3.connect(str(target))
            try:
                self._conn.backup(out)
            finally:
                out.close()
        return target

    @property
    def raw(self) -> sqlite3.Connection:
        return self._conn

    @property
    def lock(self) -> threading.RLock:
        return self._lock


class _Tx:
    """Serialized write transaction over the store's single connection."""

    def __init__(self, store: Store):
        self.store = store

    def __enter__(self) -> sqlite3.Connection:
        self.store.lock.acquire()
        self.store.raw.execute("BEGIN")
        return self.store.raw

    def __exit__(self, exc_type, exc, tb) -> None:
        try:
            if exc_type is None:
                self.store.raw.commit()
                if self.store.on_commit is not None:
                    self.store.on_commit()
            else:
                self.store.raw.rollback()
        finally:
            self.store.lock.release()


def export_csv(store: Store, out_dir: str | Path) -> list[Path]:
    """Write fasts.csv, messages.csv, audit.csv for one study.

    RFC 4180 quoting, UTF-8, header row, deterministic row order; exporting
    twice with no new data produces byte-identical files.
    """
    import csv

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []

    fasts_path = out / "fasts.csv"
    with open(fasts_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["participant_id", "cycle_date", "start", "end", "duration_minutes", "outcome"])
        for r in store.fasts_for():
            w.writerow([
                r.participant_id, r.cycle_date.isoformat(),
                r.start.hhmm() if r.start else "",
                r.end.hhmm() if r.end else "",
                r.duration_minutes if r.duration_minutes is not None else "",
                r.outcome,
            ])
    paths.append(fasts_path)

    messages_path = out / "messages.csv"
    with open(messages_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["direction", "at", "body", "intent"])
        for m in store.query_messages():
            w.writerow([m.direction, fmt_utc(m.at), m.body, m.intent or ""])
    paths.append(messages_path)

    audit_path = out / "audit.csv"
    with open(audit_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["seq", "at", "actor", "kind", "participant_id"])
        for a in store.query_audit():
            w.writerow([a.seq, fmt_utc(a.at), a.actor, a.kind, a.participant_id or ""])
    paths.append(audit_path)
    return paths
