from __future__ import annotations

from datetime import timedelta

import pytest
from helpers import utc

from smartstate.engine import CAT_PROTOCOL
from smartstate.gateway import MAX_DELIVERY_ATTEMPTS, SimProvider

AT = utc("2021-09-09T13:00")

AMBIGUOUS_REPLY = (
    "Your STARTCAL time was not understood. Please send 'STARTCAL' again "
    "with your starting time including 'am' or 'pm'."
)


@pytest.fixture()
def enrolled(engine):
    engine.enroll("p1", "+1000", "restricted", AT)
    return engine


class TestEnqueueOutbound:
    def test_duplicate_key_is_single_delivery(self, gateway, enrolled):
        for _ in range(2):
            gateway.enqueue_outbound("+1000", "hello", "key-1", CAT_PROTOCOL, AT,
                                     participant_id="p1")
        gateway.pump(AT)
        gateway.pump(AT)
        assert gateway.provider.transcript == [("+1000", "hello", "key-1")]
        assert gateway.store.count_messages("out") == 1

    def test_unresolved_placeholder_faults_instead_of_sending(self, gateway, enrolled):
        queued = gateway.enqueue_outbound("+1000", "window ends {window_end}",
                                          "key-2", CAT_PROTOCOL, AT)
        assert queued is False
        gateway.pump(AT)
        assert gateway.provider.transcript == []
        faults = gateway.store.query_audit(kind="FAULT")
        assert faults and faults[0].payload["code"] == "UNRESOLVED_PLACEHOLDER"

    def test_ambiguous_startcal_reply_byte_exact(self, gateway, enrolled):
        gateway.handle_inbound({"From": "+1000", "Body": "startcal 7"}, AT)
        gateway.engine.process_pending()
        gateway.pump(AT)
        assert gateway.provider.transcript[-1][1] == AMBIGUOUS_REPLY


class TestPump:
    def test_scripted_failures_then_success_counts_attempts(self, gateway, enrolled):
        provider: SimProvider = gateway.provider
        provider.script_failure("+1000", 2)
        gateway.enqueue_outbound("+1000", "hi", "key-3", CAT_PROTOCOL, AT)
        now = AT
        gateway.pump(now)                                  # attempt 1 fails
        now += timedelta(seconds=1)
        gateway.pump(now)                                  # attempt 2 fails
        now += timedelta(seconds=4)
        gateway.pump(now)                                  # attempt 3 delivers
        assert provider.transcript == [("+1000", "hi", "key-3")]
        with gateway.store.lock:
            row = gateway.store.raw.execute(
                "SELECT attempts, status FROM outbound WHERE idempotency_key='key-3'"
            ).fetchone()
        assert (row["attempts"], row["status"]) == (3, "delivered")

    def test_backoff_delays_next_attempt(self, gateway, enrolled):
        gateway.provider.script_failure("+1000", 1)
        gateway.enqueue_outbound("+1000", "hi", "key-4", CAT_PROTOCOL, AT)
        gateway.pump(AT)
        # Item is rescheduled one second out; an immediate pump skips it.
        assert gateway.pump(AT) == 0
        assert gateway.pump(AT + timedelta(seconds=1)) == 1

    def test_terminal_failure_after_max_attempts(self, gateway, enrolled):
        gateway.provider.script_failure("+1000", 99)
        gateway.enqueue_outbound("+1000", "hi", "key-5", CAT_PROTOCOL, AT)
        now = AT
        for _ in range(MAX_DELIVERY_ATTEMPTS):
            gateway.pump(now)
            now += timedelta(seconds=300)
        assert gateway.undelivered_count() == 0
        faults = gateway.store.query_audit(kind="FAULT")
        assert faults[-1].payload["code"] == "DELIVERY_FAILED"
        assert faults[-1].payload["attempts"] == MAX_DELIVERY_ATTEMPTS
        gateway.pump(now)
        assert gateway.provider.transcript == []

    def test_empty_queue_noop(self, gateway):
        assert gateway.pump(AT) == 0


class TestInbound:
    def test_known_sender_audited_then_dispatched(self, gateway, enrolled):
        outcome = gateway.handle_inbound(
            {"From": "+1000", "Body": "STARTCAL 7:00 AM"}, AT)
        assert outcome.accepted and outcome.status_code == 204
        audits = gateway.store.query_audit()
        kinds = [a.kind for a in audits]
        assert "MSG_IN" in kinds
        # MSG_IN lands before any dispatch side effects.
        assert kinds.index("MSG_IN") < len(kinds)
        gateway.engine.process_pending()
        assert gateway.engine.instances["p1"].current_state == "start_calories"

    def test_unknown_sender_audited_without_dispatch(self, gateway, enrolled):
        outcome = gateway.handle_inbound(
            {"From": "+9999", "Body": "STARTCAL 7:00 AM"}, AT)
        assert outcome.accepted
        assert outcome.participant_id is None
        gateway.engine.process_pending()
        assert gateway.engine.instances["p1"].current_state == "initial"
        msg_in = gateway.store.query_audit(kind="MSG_IN")
        assert msg_in[0].payload.get("code") == "UNKNOWN_SENDER"

    def test_missing_body_rejected_with_fault(self, gateway, enrolled):
        outcome = gateway.handle_inbound({"From": "+1000"}, AT)
        assert not outcome.accepted and outcome.status_code == 400
        faults = gateway.store.query_audit(kind="FAULT")
        assert faults[0].payload["code"] == "MALFORMED_WEBHOOK"

    def test_every_acceptance_yields_exactly_one_msg_in(self, gateway, enrolled):
        bodies = ["startcal 7:00 am", "endcal 4:30 pm", "gibberish", "startcal 7"]
        for i, body in enumerate(bodies):
            gateway.handle_inbound({"From": "+1000", "Body": body},
                                   AT + timedelta(minutes=i))
        assert len(gateway.store.query_audit(kind="MSG_IN")) == len(bodies)
        assert gateway.store.count_messages("in") == len(bodies)


class TestGoldenTranscript:
    def test_full_day_conversation_matches_script(self, engine, gateway):
        """One restricted-group day, end to end, frozen word for word."""
        engine.enroll("p1", "+1000", "restricted", AT)
        script = [
            (utc("2021-09-09T13:05"), "STARTCAL 7:00 AM"),
            (utc("2021-09-09T14:00"), "startcal 7"),
            (utc("2021-09-09T16:30"), "whats for lunch"),
            (utc("2021-09-09T20:35"), "ENDCAL 4:30 PM"),
        ]
        for at, body in script:
            gateway.handle_inbound({"From": "+1000", "Body": body}, at)
            gateway.engine.process_pending()
            gateway.pump(at)
        engine.tick(utc("2021-09-10T08:00"))
        engine.process_pending()
        gateway.pump(utc("2021-09-10T08:00"))

        expected = [
            "Thanks! Your calorie start time of 7:00 AM is recorded. Aim to "
            "finish eating between 4:00 PM and 6:00 PM (target 5:00 PM).",
            "Your STARTCAL time was not understood. Please send 'STARTCAL' "
            "again with your starting time including 'am' or 'pm'.",
            "Your message was not understood. Please send 'STARTCAL' or "
            "'ENDCAL' followed by the time, for example 'STARTCAL 7:00 AM'.",
            "Keep up the good work! You consumed calories for 9.5 hours "
            "today, right inside your target window.",
            "Your current success rate is 100.0%. Keep working toward your "
            "eating window every day!",
        ]
        assert gateway.provider.bodies_for("+1000") == expected


class TestMessageConservation:
    def test_out_audit_equals_out_messages_equals_unique_keys(self, gateway, enrolled):
        now = AT
        for body in ("startcal 7:00 am", "startcal 7", "what", "endcal 4:30 pm"):
            gateway.handle_inbound({"From": "+1000", "Body": body}, now)
            gateway.engine.process_pending()
            gateway.pump(now)
            now += timedelta(minutes=5)
        out_audits = gateway.store.query_audit(kind="MSG_OUT")
        out_messages = gateway.store.query_messages(direction="out")
        keys = {m.idempotency_key for m in out_messages}
        assert len(out_audits) == len(out_messages) == len(keys)
