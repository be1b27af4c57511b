"""Outbound message templates and placeholder rendering.

Protocol files own the study-specific wording; the engine carries a small
set of built-in replies for situations that exist before or outside any
state machine (ambiguous times, unrecognized messages, reports that do not
apply to the current state). A protocol may override a built-in by defining
a template with the same id.
"""
from __future__ import annotations

import re

from .dsl import PLACEHOLDER_VOCABULARY

_PLACEHOLDER_RE = re.compile(r"\{([a-zA-Z0-9_]+)\}")

BUILTIN_TEMPLATES: dict[str, str] = {
    "ambiguous_startcal": (
        "Your STARTCAL time was not understood. Please send 'STARTCAL' again "
        "with your starting time including 'am' or 'pm'."
    ),
    "ambiguous_endcal": (
        "Your ENDCAL time was not understood. Please send 'ENDCAL' again "
        "with your ending time including 'am' or 'pm'."
    ),
    "unknown_message": (
        "Your message was not understood. Please send 'STARTCAL' or 'ENDCAL' "
        "followed by the time, for example 'STARTCAL 7:00 AM'."
    ),
    "not_applicable": (
        "Your {event_keyword} message was received but does not apply to your "
        "current study step, so nothing was changed."
    ),
    "start_too_late": (
        "Your calorie start time must be before {latest_end}, so your start "
        "time was not recorded. Please try again tomorrow with an earlier start."
    ),
    "end_before_start": (
        "Your ENDCAL time must come after your STARTCAL time of {start_time}. "
        "Please check the time and send ENDCAL again."
    ),
}


class UnresolvedPlaceholder(KeyError):
    """A template referenced a value the current context cannot supply."""

    def __init__(self, template_id: str, name: str):
        super().__init__(name)
        self.template_id = template_id
        self.name = name


def render(template_id: str, body: str, context: dict[str, str]) -> str:
    """Substitute {name} placeholders; unknown names are a hard error."""

    def sub(m: re.Match) -> str:
        name = m.group(1)
        if name not in context or context[name] is None:
            raise UnresolvedPlaceholder(template_id, name)
        return str(context[name])

    return _PLACEHOLDER_RE.sub(sub, body)


def resolve(template_id: str, protocol_templates: dict[str, str]) -> str | None:
    """Template body by id: protocol definition first, then built-ins."""
    if template_id in protocol_templates:
        return protocol_templates[template_id]
    return BUILTIN_TEMPLATES.get(template_id)


def check_vocabulary() -> None:
    """Built-in templates must honor the same placeholder contract as protocols."""
    for template_id, body in BUILTIN_TEMPLATES.items():
        for m in _PLACEHOLDER_RE.finditer(body):
            if m.group(1) not in PLACEHOLDER_VOCABULARY:
                raise AssertionError(
                    f"built-in {template_id} uses unknown placeholder {m.group(1)}"
                )


check_vocabulary()
