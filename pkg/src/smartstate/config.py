"""Declarative service configuration.

One TOML file configures the whole deployment: server binding, researcher
API tokens, and any number of studies. Every study names its groups and
the protocol file backing each group; all protocol files are parsed and
validated at load time so a misconfigured study can never start.
"""
from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .clock import ClockTime
from .dsl import ProtocolDef, parse_protocol, validate_protocol
from .study import StudyConfig

DATA_DIR_ENV = "SMARTSTATE_DATA_DIR"
CONFIG_ENV = "SMARTSTATE_CONFIG"


class ConfigError(RuntimeError):
    pass


@dataclass(frozen=True)
class StudyDescriptor:
    study_id: str
    display_name: str
    config: StudyConfig
    protocols: dict[str, ProtocolDef]       # protocol_id -> definition
    group_protocols: dict[str, str]         # group_id -> protocol_id
    protocol_paths: dict[str, Path]         # group_id -> source file


@dataclass(frozen=True)
class AppConfig:
    studies: tuple[StudyDescriptor, ...]
    tokens: dict[str, str] = field(default_factory=dict)  # label -> token
    host: str = "127.0.0.1"
    port: int = 8800

    def study(self, study_id: str) -> StudyDescriptor | None:
        for s in self.studies:
            if s.study_id == study_id:
                return s
        return None

    def actor_for_token(self, token: str) -> str | None:
        for label, value in self.tokens.items():
            if value == token:
                return label
        return None


def load_config(path: str | Path) -> AppConfig:
    """Load and fully validate a deployment configuration. Fails closed."""
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid TOML: {exc}") from None

    studies = []
    seen_ids = set()
    for section in raw.get("study", []):
        descriptor = _load_study(section, base_dir=path.parent)
        if descriptor.study_id in seen_ids:
            raise ConfigError(f"study {descriptor.study_id!r} configured twice")
        seen_ids.add(descriptor.study_id)
        studies.append(descriptor)
    if not studies:
        raise ConfigError(f"config file {path} defines no studies")

    server = raw.get("server", {})
    tokens = dict(raw.get("auth", {}).get("tokens", {}))
    return AppConfig(
        studies=tuple(studies),
        tokens=tokens,
        host=server.get("host", "127.0.0.1"),
        port=int(server.get("port", 8800)),
    )


def _load_study(section: dict, base_dir: Path) -> StudyDescriptor:
    try:
        study_id = section["id"]
        group_files = section["groups"]
    except KeyError as exc:
        raise ConfigError(f"study section missing required key {exc}") from None
    if not group_files:
        raise ConfigError(f"study {study_id!r} defines no groups")

    protocols: dict[str, ProtocolDef] = {}
    group_protocols: dict[str, str] = {}
    protocol_paths: dict[str, Path] = {}
    for group_id, file_name in group_files.items():
        file_path = (base_dir / file_name).resolve()
        protocol = load_protocol_file(file_path)
        protocols[protocol.protocol_id] = protocol
        group_protocols[group_id] = protocol.protocol_id
        protocol_paths[group_id] = file_path

    config = StudyConfig(
        study_id=study_id,
        timezone=section.get("timezone", "UTC"),
        groups=tuple((g, pid) for g, pid in group_protocols.items()),
        baseline_days=int(section.get("baseline_days", 14)),
        window_target_minutes=int(section.get("window_target_minutes", 600)),
        window_tolerance_minutes=int(section.get("window_tolerance_minutes", 60)),
        latest_end=ClockTime.parse(section.get("latest_end", "20:00")),
        cycle_start=ClockTime.parse(section.get("cycle_start", "04:00")),
        checkpoint_interval_minutes=int(section.get("checkpoint_interval_minutes", 15)),
        randomization_seed=int(section.get("randomization_seed", 0)),
        display_name=section.get("display_name", study_id),
    )
    return StudyDescriptor(
        study_id=study_id,
        display_name=config.display_name,
        config=config,
        protocols=protocols,
        group_protocols=group_protocols,
        protocol_paths=protocol_paths,
    )


def load_protocol_file(path: str | Path) -> ProtocolDef:
    """Parse and validate one .fsm file; any error diagnostic is fatal."""
    path = Path(path)
    try:
        source = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"protocol file not found: {path}") from None
    result = parse_protocol(source)
    if result.protocol is None:
        problems = "; ".join(str(d) for d in result.diagnostics if d.severity == "error")
        raise ConfigError(f"protocol {path} failed to parse: {problems}")
    issues = validate_protocol(result.protocol)
    errors = [d for d in issues if d.severity == "error"]
    if errors:
        problems = "; ".join(str(d) for d in errors)
        raise ConfigError(f"protocol {path} failed validation: {problems}")
    return result.protocol
