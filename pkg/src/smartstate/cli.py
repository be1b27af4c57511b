"""Operator command line: serve, validate, diagram, simulate, export, backup."""
from __future__ import annotations

import json
import os
from pathlib import Path

import click

from .clock import utc_now
from .config import CONFIG_ENV, DATA_DIR_ENV, ConfigError, load_config
from .dsl import parse_protocol, render_dot, validate_protocol
from .service import ServiceRegistry
from .sim import Scenario, ScenarioError, report_csv, report_json, run_simulation


def _load_app_config(config_path: str | None):
    path = config_path or os.environ.get(CONFIG_ENV)
    if not path:
        raise click.UsageError(f"no config file given (flag --config or ${CONFIG_ENV})")
    try:
        return load_config(path)
    except ConfigError as exc:
        raise click.ClickException(str(exc)) from None


def _data_dir(option_value: str | None) -> Path:
    return Path(option_value or os.environ.get(DATA_DIR_ENV, "./data"))


@click.group()
def main():
    """Study protocol automation service."""


@main.command()
@click.argument("protocol_file", type=click.Path(exists=True, dir_okay=False))
def validate(protocol_file: str):
    """Parse and validate a .fsm protocol file."""
    source = Path(protocol_file).read_text(encoding="utf-8")
    result = parse_protocol(source)
    diagnostics = list(result.diagnostics)
    if result.protocol is not None:
        diagnostics.extend(validate_protocol(result.protocol))
    for diag in diagnostics:
        click.echo(str(diag))
    errors = [d for d in diagnostics if d.severity == "error"]
    if errors:
        raise SystemExit(1)
    protocol = result.protocol
    click.echo(
        f"ok: {protocol.protocol_id} v{protocol.version}: "
        f"{len(protocol.states)} states, {len(protocol.transitions)} transitions, "
        f"{len(protocol.timers)} timers"
    )


@main.command()
@click.argument("protocol_file", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--out", type=click.Path(dir_okay=False), default=None,
              help="write DOT here instead of stdout")
def diagram(protocol_file: str, out: str | None):
    """Render a protocol file as a Graphviz DOT digraph."""
    source = Path(protocol_file).read_text(encoding="utf-8")
    result = parse_protocol(source)
    if result.protocol is None:
        for diag in result.diagnostics:
            click.echo(str(diag), err=True)
        raise SystemExit(1)
    dot = render_dot(result.protocol)
    if out:
        Path(out).write_text(dot, encoding="utf-8")
    else:
        click.echo(dot, nl=False)


@main.command()
@click.option("--config", "config_path", default=None, help=f"config file (or ${CONFIG_ENV})")
@click.option("--data-dir", default=None, help=f"data directory (or ${DATA_DIR_ENV})")
@click.option("--host", default=None)
@click.option("--port", type=int, default=None)
@click.option("--console-dir", default=None, help="static console assets to serve")
def serve(config_path, data_dir, host, port, console_dir):
    """Run the management API, webhook, and scheduler."""
    import threading
    import time

    import uvicorn

    from .api import create_app

    app_config = _load_app_config(config_path)
    registry = ServiceRegistry.from_config(app_config, _data_dir(data_dir))
    app = create_app(registry, console_dir=console_dir)

    stop = threading.Event()

    def beat():
        while not stop.is_set():
            registry.run_once(utc_now())
            stop.wait(1.0)

    worker = threading.Thread(target=beat, name="scheduler", daemon=True)
    worker.start()
    try:
        uvicorn.run(app, host=host or app_config.host, port=port or app_config.port,
                    log_level="info")
    finally:
        stop.set()
        worker.join(timeout=5)
        registry.close()


@main.command()
@click.option("--config", "config_path", default=None)
@click.option("--data-dir", default=None)
@click.option("--study", "study_id", required=True)
@click.option("--out", "out_dir", default=None, help="directory for the CSV files")
def export(config_path, data_dir, study_id, out_dir):
    """Write fasts.csv, messages.csv, audit.csv for one study."""
    app_config = _load_app_config(config_path)
    registry = ServiceRegistry.from_config(app_config, _data_dir(data_dir))
    try:
        service = registry.get(study_id)
        if service is None:
            raise click.ClickException(f"unknown study {study_id!r}")
        from .store import export_csv

        paths = export_csv(service.store, out_dir or service.export_dir())
        for path in paths:
            click.echo(str(path))
    finally:
        registry.close()


@main.command()
@click.option("--config", "config_path", default=None)
@click.option("--data-dir", default=None)
@click.option("--dest", required=True, help="directory to hold the timestamped backup")
@click.option("--study", "study_id", default=None, help="one study (default: all)")
def backup(config_path, data_dir, dest, study_id):
    """Copy study data into a timestamped backup directory."""
    app_config = _load_app_config(config_path)
    registry = ServiceRegistry.from_config(app_config, _data_dir(data_dir))
    try:
        targets = ([registry.get(study_id)] if study_id
                   else list(registry.services.values()))
        if not targets or targets[0] is None:
            raise click.ClickException(f"unknown study {study_id!r}")
        for service in targets:
            path = service.backup(dest)
            click.echo(str(path))
    finally:
        registry.close()


@main.command()
@click.option("--config", "config_path", default=None)
@click.option("--study", "study_id", required=True)
@click.option("--scenario", "scenario_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--days", type=int, default=30, show_default=True)
@click.option("--out", "out_dir", required=True, help="report output directory")
def simulate(config_path, study_id, scenario_path, seed, days, out_dir):
    """Run a seeded scripted study and write report.json / report.csv."""
    import tempfile

    app_config = _load_app_config(config_path)
    descriptor = app_config.study(study_id)
    if descriptor is None:
        raise click.ClickException(f"unknown study {study_id!r}")
    try:
        scenario = Scenario.load(scenario_path)
    except ScenarioError as exc:
        raise click.ClickException(str(exc)) from None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory(prefix="smartstate-sim-") as sim_dir:
        report, service = run_simulation(descriptor, scenario, seed, days, sim_dir)
        try:
            (out / "report.json").write_text(report_json(report), encoding="utf-8")
            (out / "report.csv").write_text(report_csv(report), encoding="utf-8")
        finally:
            service.close()
    click.echo(json.dumps({
        "participants": report["participant_count"],
        "days": report["days"],
        "mean_success_rate": report["mean_success_rate"],
        "error_rate_percent": report["error_rate_percent"],
        "messages_out": report["messages_out"],
    }, sort_keys=True))


if __name__ == "__main__":
    main()
