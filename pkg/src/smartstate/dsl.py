"""Protocol definition language: parse, validate, render.

A study group's state machine is written as a small line-oriented text
format (conventionally a `.fsm` file):

    protocol control version 1
    initial initial
    events startcal endcal remind_start cycle_end

    template startcal_ack "Thanks! Your start time of {start_time} is recorded."

    state initial {
      on startcal -> start_calories { record_start; send_template(startcal_ack) }
      on cycle_end -> initial { reset_cycle }
    }

    timer startcalreminder at 12:00 emits remind_start in [initial]

Identifiers are case-insensitive on input and normalized to lowercase
[a-z0-9_]. `#` starts a line comment. Parsing never raises on bad input;
problems come back as Diagnostics with line numbers.
"""
from __future__ import annotations

import re
from collections import deque
from dataclasses import dataclass, field

from .clock import ClockTime

# Event the engine raises at every cycle boundary. Protocols that want the
# automatic end-of-day transition declare it and add transitions on it.
CYCLE_EVENT = "cycle_end"

ACTION_KINDS = {
    "send_template",
    "compute_window",
    "record_start",
    "record_end",
    "evaluate_cycle",
    "send_success_rate",
    "reset_cycle",
}

EVALUATE_MODES = {"feedback", "neutral"}

# Templates an evaluate_cycle action resolves through at runtime.
FEEDBACK_TEMPLATES = ("good_window", "too_short_info", "too_long_info", "late_end_info")
NEUTRAL_TEMPLATE = "ack_neutral"
SUCCESS_RATE_TEMPLATE = "success_rate_update"

# Placeholder names the runtime guarantees it can resolve when rendering
# outbound message templates. Anything else is a validation error.
PLACEHOLDER_VOCABULARY = frozenset({
    "participant_id",
    "handle",
    "study_id",
    "group_id",
    "time",
    "start_time",
    "end_time",
    "window_target",
    "window_earliest",
    "window_latest",
    "latest_end",
    "duration_hours",
    "duration_minutes",
    "rate_percent",
    "outcome",
    "event_keyword",
    "cycle_date",
})

_IDENT_RE = re.compile(r"^[a-z0-9_]+$")
_PLACEHOLDER_RE = re.compile(r"\{([^{}]*)\}")


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" | "warning"
    code: str
    message: str
    line: int = 0
    column: int = 0

    def __str__(self) -> str:
        loc = f"{self.line}:{self.column}: " if self.line else ""
        return f"{loc}{self.severity}[{self.code}]: {self.message}"


def _error(code: str, message: str, line: int = 0, column: int = 0) -> Diagnostic:
    return Diagnostic("error", code, message, line, column)


def _warning(code: str, message: str, line: int = 0, column: int = 0) -> Diagnostic:
    return Diagnostic("warning", code, message, line, column)


@dataclass(frozen=True)
class ActionSpec:
    kind: str
    param: str | None = None

    def __str__(self) -> str:
        return self.kind if self.param is None else f"{self.kind}({self.param})"


@dataclass(frozen=True)
class StateDef:
    name: str
    entry_actions: tuple[ActionSpec, ...] = ()
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class TransitionDef:
    source: str
    event: str
    target: str
    actions: tuple[ActionSpec, ...] = ()
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class TimerDef:
    name: str
    fire_at: ClockTime
    emits: str
    active_in: tuple[str, ...] = ()
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class ProtocolDef:
    protocol_id: str
    version: int
    initial_state: str
    states: tuple[StateDef, ...]
    events: tuple[str, ...]
    transitions: tuple[TransitionDef, ...]
    timers: tuple[TimerDef, ...]
    templates: dict[str, str]

    def state_names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.states)

    def transition_table(self) -> dict[tuple[str, str], TransitionDef]:
        table: dict[tuple[str, str], TransitionDef] = {}
        for t in self.transitions:
            table.setdefault((t.source, t.event), t)
        return table

    def transition_for(self, state: str, event: str) -> TransitionDef | None:
        return self.transition_table().get((state, event))

    def timers_active_in(self, state: str) -> tuple[TimerDef, ...]:
        return tuple(t for t in self.timers if state in t.active_in)

    def key(self) -> str:
        return f"{self.protocol_id}@{self.version}"


@dataclass
class ParseResult:
    protocol: ProtocolDef | None
    diagnostics: list[Diagnostic]

    @property
    def ok(self) -> bool:
        return self.protocol is not None and not any(
            d.severity == "error" for d in self.diagnostics
        )


# ---------------------------------------------------------------------------
# Parsing


def _norm_ident(token: str) -> str:
    return token.lower()


def _parse_actions(blob: str, line_no: int, diags: list[Diagnostic]) -> tuple[ActionSpec, ...]:
    actions = []
    for chunk in blob.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        m = re.match(r"^([a-zA-Z0-9_]+)(?:\(([^()]*)\))?$", chunk)
        if not m:
            diags.append(_error("SYNTAX", f"malformed action {chunk!r}", line_no))
            continue
        kind = _norm_ident(m.group(1))
        param = _norm_ident(m.group(2).strip()) if m.group(2) is not None else None
        if kind not in ACTION_KINDS:
            diags.append(_error("UNKNOWN_ACTION", f"unknown action {kind!r}", line_no))
            continue
        actions.append(ActionSpec(kind, param))
    return tuple(actions)


class _Parser:
    def __init__(self, source: str):
        self.lines = source.splitlines()
        self.diags: list[Diagnostic] = []
        self.protocol_id: str | None = None
        self.version: int | None = None
        self.initial: str | None = None
        self.states: list[StateDef] = []
        self.events: list[str] = []
        self.transitions: list[TransitionDef] = []
        self.timers: list[TimerDef] = []
        self.templates: dict[str, str] = {}
        self.template_lines: dict[str, int] = {}

    def err(self, code: str, message: str, line_no: int) -> None:
        self.diags.append(_error(code, message, line_no))

    def run(self) -> ParseResult:
        i = 0
        n = len(self.lines)
        while i < n:
            raw = self.lines[i]
            line_no = i + 1
            text = self._strip_comment(raw).strip()
            i += 1
            if not text:
                continue
            tokens = text.split()
            head = tokens[0].lower()
            if head == "protocol":
                self._parse_protocol_decl(tokens, line_no)
            elif head == "initial":
                self._parse_initial(tokens, line_no)
            elif head in ("event", "events"):
                self._parse_events(tokens, line_no)
            elif head == "template":
                self._parse_template(text, line_no)
            elif head == "timer":
                self._parse_timer(text, line_no)
            elif head == "state":
                i = self._parse_state_block(tokens, text, i, line_no)
            else:
                self.err("SYNTAX", f"unrecognized declaration {head!r}", line_no)
        return self._finish()

    @staticmethod
    def _strip_comment(line: str) -> str:
        # A '#' inside a quoted template body is literal text.
        out = []
        in_quote = False
        prev = ""
        for ch in line:
            if ch == '"' and prev != "\\":
                in_quote = not in_quote
            if ch == "#" and not in_quote:
                break
            out.append(ch)
            prev = ch
        return "".join(out)

    def _check_ident(self, token: str, what: str, line_no: int) -> str | None:
        ident = _norm_ident(token)
        if not _IDENT_RE.match(ident):
            self.err("BAD_IDENTIFIER", f"invalid {what} name {token!r}", line_no)
            return None
        return ident

    def _parse_protocol_decl(self, tokens: list[str], line_no: int) -> None:
        if self.protocol_id is not None:
            self.err("DUPLICATE_DECLARATION", "protocol declared twice", line_no)
            return
        if len(tokens) != 4 or tokens[2].lower() != "version" or not tokens[3].isdigit():
            self.err("SYNTAX", "expected: protocol <id> version <n>", line_no)
            return
        ident = self._check_ident(tokens[1], "protocol", line_no)
        if ident:
            self.protocol_id = ident
            self.version = int(tokens[3])

    def _parse_initial(self, tokens: list[str], line_no: int) -> None:
        if self.initial is not None:
            self.err("DUPLICATE_DECLARATION", "initial state declared twice", line_no)
            return
        if len(tokens) != 2:
            self.err("SYNTAX", "expected: initial <state>", line_no)
            return
        ident = self._check_ident(tokens[1], "state", line_no)
        if ident:
            self.initial = ident

    def _parse_events(self, tokens: list[str], line_no: int) -> None:
        if len(tokens) < 2:
            self.err("SYNTAX", "expected: events <name>...", line_no)
            return
        for token in tokens[1:]:
            ident = self._check_ident(token, "event", line_no)
            if ident is None:
                continue
            if ident in self.events:
                self.err("DUPLICATE_DECLARATION", f"event {ident!r} declared twice", line_no)
            else:
                self.events.append(ident)

    def _parse_template(self, text: str, line_no: int) -> None:
        m = re.match(r'^template\s+(\S+)\s+"(.*)"\s*$', text, re.IGNORECASE | re.DOTALL)
        if not m:
            self.err("SYNTAX", 'expected: template <id> "text"', line_no)
            return
        ident = self._check_ident(m.group(1), "template", line_no)
        if ident is None:
            return
        if ident in self.templates:
            self.err("DUPLICATE_DECLARATION", f"template {ident!r} declared twice", line_no)
            return
        body = m.group(2).replace('\\"', '"')
        self.templates[ident] = body
        self.template_lines[ident] = line_no

    def _parse_timer(self, text: str, line_no: int) -> None:
        m = re.match(
            r"^timer\s+(\S+)\s+at\s+(\S+)\s+emits\s+(\S+)\s+in\s+\[([^\]]*)\]\s*$",
            text,
            re.IGNORECASE,
        )
        if not m:
            self.err("SYNTAX", "expected: timer <name> at HH:MM emits <event> in [states]", line_no)
            return
        name = self._check_ident(m.group(1), "timer", line_no)
        emits = self._check_ident(m.group(3), "event", line_no)
        if name is None or emits is None:
            return
        try:
            fire_at = ClockTime.parse(m.group(2))
        except ValueError:
            self.err("BAD_TIME", f"invalid fire time {m.group(2)!r}", line_no)
            return
        if any(t.name == name for t in self.timers):
            self.err("DUPLICATE_DECLARATION", f"timer {name!r} declared twice", line_no)
            return
        active: list[str] = []
        for token in m.group(4).split(","):
            token = token.strip()
            if not token:
                continue
            ident = self._check_ident(token, "state", line_no)
            if ident and ident not in active:
                active.append(ident)
        self.timers.append(TimerDef(name, fire_at, emits, tuple(sorted(active)), line_no))

    def _parse_state_block(self, tokens: list[str], text: str, i: int, line_no: int) -> int:
        m = re.match(r"^state\s+(\S+)\s*\{\s*$", text, re.IGNORECASE)
        if not m:
            self.err("SYNTAX", "expected: state <name> {", line_no)
            return i
        name = self._check_ident(m.group(1), "state", line_no)
        if name is not None and any(s.name == name for s in self.states):
            self.err("DUPLICATE_DECLARATION", f"state {name!r} declared twice", line_no)
            name = None
        entry: tuple[ActionSpec, ...] = ()
        closed = False
        n = len(self.lines)
        while i < n:
            raw = self.lines[i]
            inner_no = i + 1
            inner = self._strip_comment(raw).strip()
            i += 1
            if not inner:
                continue
            if inner == "}":
                closed = True
                break
            if inner.lower().startswith("entry"):
                em = re.match(r"^entry\s*\{(.*)\}\s*$", inner, re.IGNORECASE)
                if not em:
                    self.err("SYNTAX", "expected: entry { actions }", inner_no)
                    continue
                entry = _parse_actions(em.group(1), inner_no, self.diags)
                continue
            if inner.lower().startswith("on"):
                tm = re.match(
                    r"^on\s+(\S+)\s*->\s*(\S+?)\s*(?:\{(.*)\})?\s*$", inner, re.IGNORECASE
                )
                if not tm:
                    self.err("SYNTAX", "expected: on <event> -> <state> { actions }", inner_no)
                    continue
                event = self._check_ident(tm.group(1), "event", inner_no)
                target = self._check_ident(tm.group(2), "state", inner_no)
                if event is None or target is None:
                    continue
                actions = _parse_actions(tm.group(3) or "", inner_no, self.diags)
                if name is not None:
                    self.transitions.append(
                        TransitionDef(name, event, target, actions, inner_no)
                    )
                continue
            self.err("SYNTAX", f"unrecognized line in state block: {inner!r}", inner_no)
        if not closed:
            self.err("SYNTAX", f"unclosed state block for {m.group(1)!r}", line_no)
        if name is not None:
            self.states.append(StateDef(name, entry, line_no))
        return i

    def _finish(self) -> ParseResult:
        if self.protocol_id is None:
            self.err("SYNTAX", "missing protocol declaration", 1)
        if self.initial is None:
            self.err("NO_INITIAL", "missing initial state declaration", 1)
        if not self.states:
            self.err("SYNTAX", "no states declared", 1)
        if any(d.severity == "error" for d in self.diags):
            return ParseResult(None, self.diags)
        protocol = ProtocolDef(
            protocol_id=self.protocol_id,
            version=self.version or 1,
            initial_state=self.initial,
            states=tuple(self.states),
            events=tuple(self.events),
            transitions=tuple(self.transitions),
            timers=tuple(self.timers),
            templates=dict(self.templates),
        )
        # Reference resolution is part of parsing: a protocol that names
        # missing states, events, or templates never comes back usable.
        self.diags.extend(_structural_diagnostics(protocol))
        if any(d.severity == "error" for d in self.diags):
            return ParseResult(None, self.diags)
        return ParseResult(protocol, self.diags)


def parse_protocol(source: str) -> ParseResult:
    """Parse DSL text. Deterministic; all failures are diagnostics."""
    return _Parser(source).run()


# ---------------------------------------------------------------------------
# Validation


def _structural_diagnostics(p: ProtocolDef) -> list[Diagnostic]:
    diags: list[Diagnostic] = []
    names = [s.name for s in p.states]
    declared = set(names)
    events = set(p.events)

    for s in p.states:
        if names.count(s.name) > 1:
            diags.append(_error("DUPLICATE_DECLARATION", f"state {s.name!r} declared twice", s.line))
    if p.initial_state not in declared:
        diags.append(_error("UNDECLARED_STATE", f"initial state {p.initial_state!r} is not declared"))

    seen_pairs: set[tuple[str, str]] = set()
    for t in p.transitions:
        if t.source not in declared:
            diags.append(_error("UNDECLARED_STATE", f"transition source {t.source!r} is not a state", t.line))
        if t.target not in declared:
            diags.append(_error("UNDECLARED_STATE", f"transition target {t.target!r} is not a state", t.line))
        if t.event not in events:
            diags.append(_error("UNDECLARED_EVENT", f"event {t.event!r} is not declared", t.line))
        pair = (t.source, t.event)
        if pair in seen_pairs:
            diags.append(_error(
                "NONDETERMINISTIC",
                f"two transitions on ({t.source}, {t.event})",
                t.line,
            ))
        seen_pairs.add(pair)

    for timer in p.timers:
        if timer.emits not in events:
            diags.append(_error("UNDECLARED_EVENT", f"timer emits undeclared event {timer.emits!r}", timer.line))
        for s in timer.active_in:
            if s not in declared:
                diags.append(_error("UNDECLARED_STATE", f"timer active in unknown state {s!r}", timer.line))

    for holder, actions in _iter_actions(p):
        for a in actions:
            diags.extend(_check_action(a, p, holder))
    return diags


def _iter_actions(p: ProtocolDef):
    for s in p.states:
        if s.entry_actions:
            yield s.line, s.entry_actions
    for t in p.transitions:
        if t.actions:
            yield t.line, t.actions


def _check_action(a: ActionSpec, p: ProtocolDef, line: int) -> list[Diagnostic]:
    diags: list[Diagnostic] = []
    if a.kind == "send_template":
        if not a.param:
            diags.append(_error("BAD_PARAM", "send_template requires a template id", line))
        elif a.param not in p.templates:
            diags.append(_error("UNKNOWN_TEMPLATE", f"template {a.param!r} is not defined", line))
    elif a.kind == "evaluate_cycle":
        if a.param not in EVALUATE_MODES:
            diags.append(_error(
                "BAD_PARAM",
                f"evaluate_cycle requires a mode in {sorted(EVALUATE_MODES)}",
                line,
            ))
        elif a.param == "feedback":
            for needed in FEEDBACK_TEMPLATES:
                if needed not in p.templates:
                    diags.append(_error(
                        "UNKNOWN_TEMPLATE",
                        f"evaluate_cycle(feedback) needs template {needed!r}",
                        line,
                    ))
        elif NEUTRAL_TEMPLATE not in p.templates:
            diags.append(_error(
                "UNKNOWN_TEMPLATE",
                f"evaluate_cycle(neutral) needs template {NEUTRAL_TEMPLATE!r}",
                line,
            ))
    elif a.kind == "send_success_rate":
        if a.param is not None:
            diags.append(_error("BAD_PARAM", "send_success_rate takes no parameter", line))
        if SUCCESS_RATE_TEMPLATE not in p.templates:
            diags.append(_error(
                "UNKNOWN_TEMPLATE",
                f"send_success_rate needs template {SUCCESS_RATE_TEMPLATE!r}",
                line,
            ))
    elif a.param is not None:
        diags.append(_error("BAD_PARAM", f"{a.kind} takes no parameter", line))
    return diags


def _reachable_states(p: ProtocolDef) -> set[str]:
    adjacency: dict[str, set[str]] = {s.name: set() for s in p.states}
    for t in p.transitions:
        if t.source in adjacency:
            adjacency[t.source].add(t.target)
    seen = {p.initial_state}
    queue = deque([p.initial_state])
    while queue:
        current = queue.popleft()
        for nxt in adjacency.get(current, ()):
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return seen


def validate_protocol(p: ProtocolDef) -> list[Diagnostic]:
    """Full soundness check; empty list means deployable.

    Errors cover broken references, nondeterminism, unreachable states and
    dead ends. Warnings (unused templates, timers nothing listens to) never
    block deployment.
    """
    diags = _structural_diagnostics(p)

    reachable = _reachable_states(p)
    for s in p.states:
        if s.name not in reachable:
            diags.append(_error("UNREACHABLE_STATE", f"state {s.name!r} is unreachable from {p.initial_state!r}", s.line))

    outgoing = {t.source for t in p.transitions}
    timed = {name for timer in p.timers for name in timer.active_in}
    for s in p.states:
        if s.name not in outgoing and s.name not in timed:
            diags.append(_error(
                "DEAD_END_STATE",
                f"state {s.name!r} has no outgoing transition and no active timer",
                s.line,
            ))

    table = {(t.source, t.event) for t in p.transitions}
    for timer in p.timers:
        for s in timer.active_in:
            if (s, timer.emits) not in table:
                diags.append(_warning(
                    "TIMER_IGNORED",
                    f"timer {timer.name!r} fires {timer.emits!r} in {s!r} but no transition handles it",
                    timer.line,
                ))

    used_templates = _used_template_ids(p)
    for template_id, body in p.templates.items():
        if template_id not in used_templates:
            diags.append(_warning("UNUSED_TEMPLATE", f"template {template_id!r} is never sent"))
        for m in _PLACEHOLDER_RE.finditer(body):
            name = m.group(1)
            if name not in PLACEHOLDER_VOCABULARY:
                diags.append(_error(
                    "UNKNOWN_PLACEHOLDER",
                    f"template {template_id!r} uses unresolvable placeholder {{{name}}}",
                ))

    used_events = {t.event for t in p.transitions} | {t.emits for t in p.timers}
    for event in p.events:
        if event not in used_events:
            diags.append(_warning("UNUSED_EVENT", f"event {event!r} is declared but never used"))
    return diags


def _used_template_ids(p: ProtocolDef) -> set[str]:
    used: set[str] = set()
    for _, actions in _iter_actions(p):
        for a in actions:
            if a.kind == "send_template" and a.param:
                used.add(a.param)
            elif a.kind == "evaluate_cycle" and a.param == "feedback":
                used.update(FEEDBACK_TEMPLATES)
            elif a.kind == "evaluate_cycle" and a.param == "neutral":
                used.add(NEUTRAL_TEMPLATE)
            elif a.kind == "send_success_rate":
                used.add(SUCCESS_RATE_TEMPLATE)
    return used


# ---------------------------------------------------------------------------
# Rendering


def render_dot(p: ProtocolDef) -> str:
    """Graphviz digraph for a protocol. Byte-deterministic.

    One node per state (the initial state drawn as a double circle), one
    solid labeled edge per transition, and one dashed edge per (timer,
    active state) pair pointing at the state the timer's event would move
    it to (a self loop when nothing handles the event).
    """
    lines = [f"digraph {p.protocol_id} {{", "  rankdir=LR;"]
    for s in p.states:
        shape = "doublecircle" if s.name == p.initial_state else "circle"
        lines.append(f'  "{s.name}" [shape={shape}];')
    for t in p.transitions:
        lines.append(f'  "{t.source}" -> "{t.target}" [label="{t.event}"];')
    table = p.transition_table()
    for timer in p.timers:
        for s in timer.active_in:
            hit = table.get((s, timer.emits))
            target = hit.target if hit else s
            label = f"{timer.name} @ {timer.fire_at.hhmm()}"
            lines.append(f'  "{s}" -> "{target}" [label="{label}", style=dashed];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def pretty_print(p: ProtocolDef) -> str:
    """Canonical DSL text; parse_protocol(pretty_print(p)) == p."""
    out: list[str] = [f"protocol {p.protocol_id} version {p.version}", ""]
    out.append(f"initial {p.initial_state}")
    if p.events:
        out.append("events " + " ".join(p.events))
    out.append("")
    for template_id, body in p.templates.items():
        escaped = body.replace('"', '\\"')
        out.append(f'template {template_id} "{escaped}"')
    if p.templates:
        out.append("")
    by_source: dict[str, list[TransitionDef]] = {}
    for t in p.transitions:
        by_source.setdefault(t.source, []).append(t)
    for s in p.states:
        out.append(f"state {s.name} {{")
        if s.entry_actions:
            out.append("  entry { " + "; ".join(str(a) for a in s.entry_actions) + " }")
        for t in by_source.get(s.name, []):
            suffix = ""
            if t.actions:
                suffix = " { " + "; ".join(str(a) for a in t.actions) + " }"
            out.append(f"  on {t.event} -> {t.target}{suffix}")
        out.append("}")
        out.append("")
    for timer in p.timers:
        states = ", ".join(timer.active_in)
        out.append(
            f"timer {timer.name} at {timer.fire_at.hhmm()} emits {timer.emits} in [{states}]"
        )
    return "\n".join(out).rstrip("\n") + "\n"
