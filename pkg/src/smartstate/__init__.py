"""SmartState: finite-state-machine automation for study protocols over SMS."""

from .clock import ClockTime
from .dsl import (
    Diagnostic,
    ProtocolDef,
    parse_protocol,
    pretty_print,
    render_dot,
    validate_protocol,
)
from .intake import Intent, classify, parse_clock_time, sanitize
from .study import (
    EatingWindow,
    FastRecord,
    StudyConfig,
    compute_window,
    cycle_of,
    error_rate,
    evaluate_fast,
    feedback_for,
    randomize_group,
    success_rate,
)

__version__ = "0.1.0"

__all__ = [
    "ClockTime",
    "Diagnostic",
    "ProtocolDef",
    "parse_protocol",
    "pretty_print",
    "render_dot",
    "validate_protocol",
    "Intent",
    "classify",
    "parse_clock_time",
    "sanitize",
    "EatingWindow",
    "FastRecord",
    "StudyConfig",
    "compute_window",
    "cycle_of",
    "error_rate",
    "evaluate_fast",
    "feedback_for",
    "randomize_group",
    "success_rate",
    "__version__",
]
