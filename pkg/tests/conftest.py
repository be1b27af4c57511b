from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from helpers import all_protocols, fixture_protocol, make_config  # noqa: E402

from smartstate.config import StudyDescriptor  # noqa: E402
from smartstate.engine import Engine  # noqa: E402
from smartstate.gateway import Gateway, SimProvider  # noqa: E402
from smartstate.store import Store  # noqa: E402


@pytest.fixture(scope="session")
def protocols():
    return all_protocols()


@pytest.fixture()
def study_config():
    return make_config()


@pytest.fixture()
def control_protocol():
    return fixture_protocol("control")


@pytest.fixture()
def restricted_protocol():
    return fixture_protocol("restricted")


@pytest.fixture()
def store(tmp_path, study_config):
    s = Store(tmp_path / "store.db", study_config.study_id)
    yield s
    s.close()


@pytest.fixture()
def engine(store, study_config, protocols):
    return Engine(store, study_config, protocols)


@pytest.fixture()
def gateway(store, engine):
    return Gateway(store, engine, SimProvider())


@pytest.fixture()
def descriptor(study_config, protocols) -> StudyDescriptor:
    return StudyDescriptor(
        study_id=study_config.study_id,
        display_name="Test Study",
        config=study_config,
        protocols=dict(protocols),
        group_protocols={g: p for g, p in study_config.groups},
        protocol_paths={},
    )
