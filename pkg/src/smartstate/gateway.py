"""Messaging bridge: provider abstraction, outbound queue, inbound webhook.

Two providers ship with the service. `sim` is an in-memory provider for
tests and simulations: it records a transcript and can be scripted to fail
deliveries. `webhook` speaks a Twilio-shaped contract: inbound messages
arrive as form-encoded POSTs and outbound messages leave as JSON POSTs to
a configured URL with a bearer token.

The gateway never touches machine state. Inbound handling parses, audits,
and queues; outbound handling drains the durable queue written by the
engine, retrying with exponential backoff and writing a FAULT audit record
when a message is finally undeliverable.
"""
from __future__ import annotations

import json
import os
import re
import threading
import urllib.request
from dataclasses import dataclass, field
from datetime import datetime, timedelta

from .clock import fmt_utc
from .engine import CAT_ERROR, Engine
from .intake import InboundMessage, classify, sanitize
from .store import Store

MAX_DELIVERY_ATTEMPTS = 5
BACKOFF_BASE_SECONDS = 1.0
BACKOFF_FACTOR = 4.0

PROVIDER_TOKEN_ENV = "SMARTSTATE_PROVIDER_TOKEN"

_UNRESOLVED_RE = re.compile(r"\{[a-zA-Z0-9_]+\}")


@dataclass(frozen=True)
class DeliveryResult:
    ok: bool
    detail: str = ""


class SimProvider:
    """Deterministic in-memory provider; scriptable failures, full transcript."""

    name = "sim"

    def __init__(self):
        self.transcript: list[tuple[str, str, str]] = []  # (handle, body, key)
        self._seen_keys: set[str] = set()
        self._fail_counts: dict[str, int] = {}
        self._fail_all = 0

    def script_failure(self, handle: str, times: int) -> None:
        self._fail_counts[handle] = self._fail_counts.get(handle, 0) + times

    def script_failures_for_all(self, times: int) -> None:
        self._fail_all += times

    def send(self, handle: str, body: str, idempotency_key: str) -> DeliveryResult:
        if self._fail_all > 0:
            self._fail_all -= 1
            return DeliveryResult(False, "scripted failure")
        remaining = self._fail_counts.get(handle, 0)
        if remaining > 0:
            self._fail_counts[handle] = remaining - 1
            return DeliveryResult(False, "scripted failure")
        if idempotency_key not in self._seen_keys:  # retried keys deliver once
            self._seen_keys.add(idempotency_key)
            self.transcript.append((handle, body, idempotency_key))
        return DeliveryResult(True)

    def bodies_for(self, handle: str) -> list[str]:
        return [body for h, body, _ in self.transcript if h == handle]


class WebhookProvider:
    """Outbound delivery by HTTP POST, JSON {to, body, key}, bearer auth."""

    name = "webhook"

    def __init__(self, endpoint: str, token: str | None = None, timeout: float = 10.0):
        self.endpoint = endpoint
        self.token = token if token is not None else os.environ.get(PROVIDER_TOKEN_ENV, "")
        self.timeout = timeout

    def send(self, handle: str, body: str, idempotency_key: str) -> DeliveryResult:
        payload = json.dumps({"to": handle, "body": body, "key": idempotency_key})
        request = urllib.request.Request(
            self.endpoint,
            data=payload.encode("utf-8"),
            headers={
                "Content-Type": "application/json",
                "Authorization": f"Bearer {self.token}",
            },
            method="POST",
        )
        try:
            with urllib.request.urlopen(request, timeout=self.timeout) as resp:
                if 200 <= resp.status < 300:
                    return DeliveryResult(True)
                return DeliveryResult(False, f"status {resp.status}")
        except Exception as exc:  # network errors are always retryable
            return DeliveryResult(False, str(exc))


@dataclass
class InboundOutcome:
    accepted: bool
    status_code: int
    detail: str = ""
    participant_id: str | None = None


@dataclass
class Gateway:
    store: Store
    engine: Engine
    provider: object = field(default_factory=SimProvider)
    # Single pump at a time: the scheduler beat and a webhook handler may
    # both try to drain the queue.
    _pump_lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    # -- outbound ------------------------------------------------------------

    def enqueue_outbound(self, handle: str, body: str, idempotency_key: str,
                         category: str, now: datetime,
                         participant_id: str | None = None) -> bool:
        """Queue one rendered message. Duplicate keys are silent no-ops."""
        if _UNRESOLVED_RE.search(body):
            self.store.append_audit(now, "system", "FAULT", {
                "code": "UNRESOLVED_PLACEHOLDER",
                "idempotency_key": idempotency_key,
            }, participant_id=participant_id)
            return False
        with self.store.tx() as conn:
            inserted = conn.execute(
                "INSERT OR IGNORE INTO outbound (idempotency_key, participant_id, handle,"
                " body, category, enqueued_at) VALUES (?, ?, ?, ?, ?, ?)",
                (idempotency_key, participant_id, handle, body, category, fmt_utc(now)),
            ).rowcount
            if inserted:
                seq = self.store.append_audit(now, "system", "MSG_OUT", {
                    "template": None, "category": category,
                    "idempotency_key": idempotency_key,
                }, participant_id=participant_id, conn=conn)
                self.store.record_message("out", handle, now, body, seq,
                                          idempotency_key=idempotency_key, conn=conn)
        return bool(inserted)

    def pump(self, now: datetime) -> int:
        """Attempt every due queued delivery; reschedule or park failures."""
        with self._pump_lock:
            return self._pump(now)

    def _pump(self, now: datetime) -> int:
        with self.store.lock:
            rows = self.store.raw.execute(
                "SELECT * FROM outbound WHERE status='queued' AND"
                " (next_attempt_at IS NULL OR next_attempt_at <= ?)"
                " ORDER BY enqueued_at, idempotency_key",
                (fmt_utc(now),),
            ).fetchall()
        attempted = 0
        for row in rows:
            attempted += 1
            result: DeliveryResult = self.provider.send(
                row["handle"], row["body"], row["idempotency_key"])
            attempts = row["attempts"] + 1
            if result.ok:
                with self.store.tx() as conn:
                    conn.execute(
                        "UPDATE outbound SET status='delivered', attempts=? WHERE idempotency_key=?",
                        (attempts, row["idempotency_key"]),
                    )
                continue
            if attempts >= MAX_DELIVERY_ATTEMPTS:
                with self.store.tx() as conn:
                    conn.execute(
                        "UPDATE outbound SET status='failed', attempts=? WHERE idempotency_key=?",
                        (attempts, row["idempotency_key"]),
                    )
                    self.store.append_audit(now, "system", "FAULT", {
                        "code": "DELIVERY_FAILED",
                        "idempotency_key": row["idempotency_key"],
                        "attempts": attempts,
                        "detail": result.detail,
                    }, participant_id=row["participant_id"], conn=conn)
                continue
            delay = BACKOFF_BASE_SECONDS * (BACKOFF_FACTOR ** (attempts - 1))
            with self.store.tx() as conn:
                conn.execute(
                    "UPDATE outbound SET attempts=?, next_attempt_at=? WHERE idempotency_key=?",
                    (attempts, fmt_utc(now + timedelta(seconds=delay)), row["idempotency_key"]),
                )
        return attempted

    def undelivered_count(self) -> int:
        with self.store.lock:
            row = self.store.raw.execute(
                "SELECT COUNT(*) AS n FROM outbound WHERE status='queued'"
            ).fetchone()
        return int(row["n"])

    def delivered_keys(self) -> list[str]:
        with self.store.lock:
            rows = self.store.raw.execute(
                "SELECT idempotency_key FROM outbound WHERE status='delivered'"
                " ORDER BY idempotency_key"
            ).fetchall()
        return [r["idempotency_key"] for r in rows]

    # -- inbound -------------------------------------------------------------

    def handle_inbound(self, form: dict, now: datetime) -> InboundOutcome:
        """Accept one provider webhook POST (form fields From and Body)."""
        handle = (form.get("From") or "").strip()
        raw_body = form.get("Body")
        if not handle or raw_body is None:
            self.store.append_audit(now, "system", "FAULT", {
                "code": "MALFORMED_WEBHOOK",
                "have_from": bool(handle),
                "have_body": raw_body is not None,
            })
            return InboundOutcome(False, 400, "missing From or Body")
        message = InboundMessage(
            sender_handle=handle,
            raw_body=sanitize(str(raw_body)),
            received_at=now,  # ingestion time, never the sender's claim
            study_id=self.store.study_id,
        )
        participant = self.store.participant_by_handle(handle)
        if participant is None:
            with self.store.tx() as conn:
                seq = self.store.append_audit(now, "system", "MSG_IN", {
                    "code": "UNKNOWN_SENDER", "handle": handle,
                }, conn=conn)
                self.store.record_message("in", handle, message.received_at,
                                          message.raw_body, seq, conn=conn)
            return InboundOutcome(True, 204, "unknown sender")
        intent = classify(message.raw_body)
        with self.store.tx() as conn:
            seq = self.store.append_audit(now, participant.participant_id, "MSG_IN", {
                "intent": intent.variant,
                "keyword": intent.keyword,
                "time": intent.time.hhmm() if intent.time else None,
                "note": intent.note,
            }, participant_id=participant.participant_id, conn=conn)
            self.store.record_message("in", handle, message.received_at,
                                      message.raw_body, seq,
                                      intent=intent.variant, conn=conn)
            self.engine.ingest_intent(participant.participant_id, intent, now, conn=conn)
        return InboundOutcome(True, 204, participant_id=participant.participant_id)

    # -- metrics ----------------------------------------------------------------

    def error_response_count(self) -> int:
        """MSG_OUT records whose category marks a did-not-understand reply."""
        count = 0
        for record in self.store.query_audit(kind="MSG_OUT"):
            if record.payload.get("category") == CAT_ERROR:
                count += 1
        return count
