"""Shared test utilities."""
from __future__ import annotations

from datetime import datetime, timezone
from importlib.resources import files

from smartstate.clock import ClockTime
from smartstate.dsl import ProtocolDef, parse_protocol
from smartstate.study import StudyConfig

FIXTURE_NAMES = ("baseline", "control", "restricted")


def utc(text: str) -> datetime:
    """'2021-09-09T13:00' -> aware UTC datetime."""
    return datetime.fromisoformat(text).replace(tzinfo=timezone.utc)


def fixture_source(name: str) -> str:
    return files("smartstate").joinpath(f"protocols/{name}.fsm").read_text(encoding="utf-8")


def fixture_protocol(name: str) -> ProtocolDef:
    result = parse_protocol(fixture_source(name))
    assert result.ok, [str(d) for d in result.diagnostics]
    return result.protocol


def all_protocols() -> dict[str, ProtocolDef]:
    protocols = {}
    for name in FIXTURE_NAMES:
        protocol = fixture_protocol(name)
        protocols[protocol.protocol_id] = protocol
    return protocols


def make_config(**overrides) -> StudyConfig:
    defaults = dict(
        study_id="tre_test",
        timezone="America/New_York",
        groups=(("baseline", "baseline"), ("control", "control"),
                ("restricted", "restricted")),
        randomization_seed=42,
    )
    defaults.update(overrides)
    return StudyConfig(**defaults)


def ct(text: str) -> ClockTime:
    return ClockTime.parse(text)


TWO_STATE_SRC = """
protocol tiny version 1
initial begin
events go stay

state begin {
  on go -> done
}

state done {
  on stay -> done
}
"""
