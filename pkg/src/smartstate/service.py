"""Composition of engine, storage, and gateway into a running study service."""
from __future__ import annotations

import shutil
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path

from .clock import utc_now
from .config import AppConfig, StudyDescriptor
from .engine import Engine, EngineError
from .gateway import Gateway, SimProvider
from .store import Store, export_csv
from .study import BASELINE_GROUP, error_rate, randomize_group, success_rate


class StudyService:
    """Everything needed to run one study end to end."""

    def __init__(self, descriptor: StudyDescriptor, data_dir: str | Path,
                 provider=None, fast_storage: bool = False):
        self.descriptor = descriptor
        self.study_id = descriptor.study_id
        self.data_dir = Path(data_dir) / descriptor.study_id
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.store = Store(self.data_dir / "store.db", descriptor.study_id,
                           fast=fast_storage)
        self.engine = Engine(self.store, descriptor.config, descriptor.protocols)
        self.gateway = Gateway(self.store, self.engine, provider or SimProvider())
        self._last_checkpoint: datetime | None = None

    # -- lifecycle -----------------------------------------------------------

    def run_once(self, now: datetime | None = None) -> None:
        """One scheduler beat: fire timers, drain events, attempt deliveries."""
        now = now or utc_now()
        self.engine.tick(now)
        self.engine.process_pending()
        self.gateway.pump(now)
        self.maybe_checkpoint(now)

    def checkpoint_path(self) -> Path:
        return self.data_dir / "checkpoint.json"

    def maybe_checkpoint(self, now: datetime) -> bool:
        interval = timedelta(minutes=self.descriptor.config.checkpoint_interval_minutes)
        if self._last_checkpoint is not None and now - self._last_checkpoint < interval:
            return False
        self.engine.save_checkpoint(self.checkpoint_path(), now)
        self._last_checkpoint = now
        return True

    def close(self) -> None:
        self.store.close()

    # -- researcher operations -------------------------------------------------

    def randomize(self, participant_id: str, actor: str, now: datetime,
                  force: bool = False) -> str:
        """Draw the participant's post-baseline group and reassign them.

        Requires the participant to be in baseline with the baseline period
        complete; a researcher can force early randomization, which is
        itself audited.
        """
        instance = self.engine.instances.get(participant_id)
        if instance is None:
            raise EngineError("UNKNOWN_PARTICIPANT", f"no machine for {participant_id!r}")
        self._require_active(participant_id)
        if instance.group_id != BASELINE_GROUP:
            raise EngineError("GROUP_PRECONDITION",
                              f"participant is in {instance.group_id!r}, not baseline")
        elapsed = (self.engine._cycle_of(now) - instance.enrolled_cycle).days
        if elapsed < self.descriptor.config.baseline_days:
            if not force:
                raise EngineError("BASELINE_INCOMPLETE",
                                  f"only {elapsed} of {self.descriptor.config.baseline_days}"
                                  " baseline days elapsed")
            self.store.append_audit(now, actor, "CONFIG_CHANGE", {
                "action": "force_randomize",
                "baseline_days_elapsed": elapsed,
            }, participant_id=participant_id)
        group = randomize_group(participant_id, self.descriptor.config.randomization_seed)
        self.engine.reassign_protocol(participant_id, group, actor, now,
                                      checkpoint_path=self.checkpoint_path())
        return group

    def reassign(self, participant_id: str, group_id: str, actor: str,
                 now: datetime) -> dict:
        """Move a participant to another group's protocol.

        Reassigning to the current group is an audited no-op so interface
        retries stay safe.
        """
        instance = self.engine.instances.get(participant_id)
        if instance is None:
            raise EngineError("UNKNOWN_PARTICIPANT", f"no machine for {participant_id!r}")
        self._require_active(participant_id)
        old_group = instance.group_id
        if group_id == old_group:
            self.store.append_audit(now, actor, "CONFIG_CHANGE", {
                "action": "reassign_noop", "group_id": group_id,
            }, participant_id=participant_id)
            return {"old_group": old_group, "new_group": group_id, "no_change": True}
        fresh = self.engine.reassign_protocol(participant_id, group_id, actor, now,
                                              checkpoint_path=self.checkpoint_path())
        return {"old_group": old_group, "new_group": fresh.group_id, "no_change": False,
                "effective_cycle": fresh.cycle_date.isoformat()}

    def _require_active(self, participant_id: str) -> None:
        participant = self.store.get_participant(participant_id)
        if participant is not None and participant.status != "active":
            raise EngineError("PARTICIPANT_INACTIVE",
                              f"participant {participant_id!r} is {participant.status}")

    def export_dir(self) -> Path:
        return self.data_dir / "export"

    def export(self) -> list[Path]:
        return export_csv(self.store, self.export_dir())

    # -- reporting ---------------------------------------------------------------

    def participant_success_rate(self, participant_id: str) -> float:
        """Rate over completed cycles; a brand-new participant starts at 1.0."""
        instance = self.engine.instances.get(participant_id)
        if instance is None:
            raise EngineError("UNKNOWN_PARTICIPANT", f"no machine for {participant_id!r}")
        completed = (instance.cycle_date - instance.enrolled_cycle).days
        if completed <= 0:
            return 1.0
        records = [
            r for r in self.store.fasts_for(participant_id)
            if instance.enrolled_cycle <= r.cycle_date < instance.cycle_date
        ]
        return success_rate(records, completed)

    def metrics(self) -> dict:
        """Study-wide numbers: the two study metrics plus message volumes."""
        outgoing = self.store.count_messages("out")
        unrecognized = self.gateway.error_response_count()
        rate = error_rate(unrecognized, outgoing)
        per_participant = {
            pid: self.participant_success_rate(pid)
            for pid in sorted(self.engine.instances)
        }
        mean = (sum(per_participant.values()) / len(per_participant)
                if per_participant else 1.0)
        reminders = sum(
            1 for a in self.store.query_audit(kind="MSG_OUT")
            if a.payload.get("category") == "reminder"
        )
        return {
            "study_id": self.study_id,
            "messages_in": self.store.count_messages("in"),
            "messages_out": outgoing,
            "unrecognized_inbound": unrecognized,
            "error_rate": rate.fraction,
            "error_rate_percent": rate.percent(),
            "error_rate_defined": rate.defined,
            "reminder_messages": reminders,
            "success_rates": {pid: round(v, 6) for pid, v in per_participant.items()},
            "mean_success_rate": round(mean, 6),
        }

    def backup(self, dest_root: str | Path, now: datetime | None = None) -> Path:
        """Timestamped copy of the study's data directory."""
        now = now or utc_now()
        stamp = now.strftime("%Y%m%dT%H%M%SZ")
        dest = Path(dest_root) / f"{self.study_id}-{stamp}"
        dest.mkdir(parents=True, exist_ok=True)
        self.store.backup_to(dest)
        for extra in self.data_dir.glob("checkpoint*.json"):
            shutil.copy2(extra, dest / extra.name)
        return dest


@dataclass
class ServiceRegistry:
    """All configured studies, keyed by id. Construction fails closed."""

    services: dict[str, StudyService]
    app_config: AppConfig

    @classmethod
    def from_config(cls, app_config: AppConfig, data_dir: str | Path,
                    provider_factory=None) -> "ServiceRegistry":
        services = {}
        for descriptor in app_config.studies:
            provider = provider_factory(descriptor) if provider_factory else None
            services[descriptor.study_id] = StudyService(descriptor, data_dir, provider)
        return cls(services=services, app_config=app_config)

    def get(self, study_id: str) -> StudyService | None:
        return self.services.get(study_id)

    def run_once(self, now: datetime | None = None) -> None:
        for service in self.services.values():
            service.run_once(now)

    def close(self) -> None:
        for service in self.services.values():
            service.close()
