from __future__ import annotations

from pathlib import Path

import pytest
from helpers import utc

from smartstate.config import ConfigError, load_config, load_protocol_file
from smartstate.engine import EngineError
from smartstate.service import StudyService

REPO_ROOT = Path(__file__).resolve().parent.parent
SAMPLE_CONFIG = REPO_ROOT / "smartstate.toml"

ENROLL_AT = utc("2021-09-09T13:00")


class TestConfig:
    def test_sample_config_loads(self):
        app_config = load_config(SAMPLE_CONFIG)
        study = app_config.study("tre_main")
        assert study is not None
        assert set(study.group_protocols) == {"baseline", "control", "restricted"}
        assert study.config.timezone == "America/New_York"
        assert app_config.actor_for_token("change-me") == "demo-researcher"
        assert app_config.actor_for_token("wrong") is None

    def test_missing_config_fails_closed(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.toml")

    def test_invalid_protocol_fails_closed(self, tmp_path):
        bad = tmp_path / "bad.fsm"
        bad.write_text("protocol broken version 1\ninitial a\nevents e\n"
                       "state a {\n  on e -> missing\n}\n")
        config_file = tmp_path / "app.toml"
        config_file.write_text(
            '[[study]]\nid = "s"\ntimezone = "UTC"\n[study.groups]\ng = "bad.fsm"\n')
        with pytest.raises(ConfigError) as excinfo:
            load_config(config_file)
        assert "UNDECLARED_STATE" in str(excinfo.value)

    def test_unreachable_state_fails_validation_at_load(self, tmp_path):
        bad = tmp_path / "bad.fsm"
        bad.write_text(
            "protocol broken version 1\ninitial a\nevents e\n"
            "state a {\n  on e -> a\n}\n"
            "state island {\n  on e -> island\n}\n")
        with pytest.raises(ConfigError) as excinfo:
            load_protocol_file(bad)
        assert "UNREACHABLE_STATE" in str(excinfo.value)

    def test_config_without_studies_rejected(self, tmp_path):
        config_file = tmp_path / "app.toml"
        config_file.write_text('[server]\nport = 1\n')
        with pytest.raises(ConfigError):
            load_config(config_file)


class TestRandomize:
    def test_requires_baseline_group(self, descriptor, tmp_path):
        service = StudyService(descriptor, tmp_path)
        service.engine.enroll("p1", "+1000", "control", ENROLL_AT)
        with pytest.raises(EngineError) as excinfo:
            service.randomize("p1", "alice", utc("2021-10-01T13:00"))
        assert excinfo.value.code == "GROUP_PRECONDITION"
        service.close()

    def test_requires_baseline_complete_unless_forced(self, descriptor, tmp_path):
        service = StudyService(descriptor, tmp_path)
        service.engine.enroll("p1", "+1000", "baseline", ENROLL_AT)
        with pytest.raises(EngineError) as excinfo:
            service.randomize("p1", "alice", utc("2021-09-15T13:00"))
        assert excinfo.value.code == "BASELINE_INCOMPLETE"
        group = service.randomize("p1", "alice", utc("2021-09-15T13:00"), force=True)
        assert group in ("control", "restricted")
        forced = [a for a in service.store.query_audit(kind="CONFIG_CHANGE")
                  if a.payload.get("action") == "force_randomize"]
        assert len(forced) == 1
        service.close()

    def test_after_fourteen_cycles(self, descriptor, tmp_path):
        service = StudyService(descriptor, tmp_path)
        service.engine.enroll("p1", "+1000", "baseline", ENROLL_AT)
        group = service.randomize("p1", "alice", utc("2021-09-23T13:00"))
        assert group in ("control", "restricted")
        assert service.engine.instances["p1"].group_id == group
        service.close()

    def test_same_draw_every_time(self, descriptor, tmp_path):
        draws = set()
        for attempt in range(3):
            service = StudyService(descriptor, tmp_path / str(attempt))
            service.engine.enroll("p1", "+1000", "baseline", ENROLL_AT)
            draws.add(service.randomize("p1", "alice", utc("2021-09-23T13:00")))
            service.close()
        assert len(draws) == 1


class TestReassignService:
    def test_same_group_is_audited_noop(self, descriptor, tmp_path):
        service = StudyService(descriptor, tmp_path)
        service.engine.enroll("p1", "+1000", "baseline", ENROLL_AT)
        result = service.reassign("p1", "baseline", "alice", ENROLL_AT)
        assert result["no_change"] is True
        assert service.store.query_audit(kind="GROUP_REASSIGNED") == []
        noops = [a for a in service.store.query_audit(kind="CONFIG_CHANGE")
                 if a.payload.get("action") == "reassign_noop"]
        assert len(noops) == 1
        service.close()

    def test_cross_group_delegates_to_engine(self, descriptor, tmp_path):
        service = StudyService(descriptor, tmp_path)
        service.engine.enroll("p1", "+1000", "baseline", ENROLL_AT)
        result = service.reassign("p1", "control", "alice", utc("2021-09-23T13:00"))
        assert result == {"old_group": "baseline", "new_group": "control",
                          "no_change": False, "effective_cycle": "2021-09-23"}
        service.close()


class TestCheckpointCadence:
    def test_checkpoint_every_interval(self, descriptor, tmp_path):
        service = StudyService(descriptor, tmp_path)
        service.engine.enroll("p1", "+1000", "baseline", ENROLL_AT)
        assert service.maybe_checkpoint(ENROLL_AT) is True
        assert service.maybe_checkpoint(ENROLL_AT) is False
        later = utc("2021-09-09T13:20")
        assert service.maybe_checkpoint(later) is True
        assert service.checkpoint_path().exists()
        service.close()


class TestBackup:
    def test_backup_creates_timestamped_copy(self, descriptor, tmp_path):
        service = StudyService(descriptor, tmp_path / "data")
        service.engine.enroll("p1", "+1000", "baseline", ENROLL_AT)
        service.maybe_checkpoint(ENROLL_AT)
        dest = service.backup(tmp_path / "backups", now=ENROLL_AT)
        assert dest.name == "tre_test-20210909T130000Z"
        assert (dest / "store.db").exists()
        assert (dest / "checkpoint.json").exists()
        service.close()


class TestMetrics:
    def test_fresh_participant_is_hundred_percent(self, descriptor, tmp_path):
        service = StudyService(descriptor, tmp_path)
        service.engine.enroll("p1", "+1000", "restricted", ENROLL_AT)
        assert service.participant_success_rate("p1") == 1.0
        metrics = service.metrics()
        assert metrics["messages_out"] == 0
        assert metrics["error_rate_defined"] is False
        service.close()
