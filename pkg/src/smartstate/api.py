"""Management REST API and the inbound message webhook.

Researcher endpoints authenticate with static bearer tokens from the
config file; the token's label becomes the audited actor identity. The
webhook and health endpoints are open (the provider cannot hold a
researcher token). Errors come back as {"code", "message"} JSON.
"""
from __future__ import annotations

import io
import zipfile
from datetime import datetime
from pathlib import Path
from typing import Callable, Optional

from fastapi import Depends, FastAPI, Form, Header, HTTPException, Request
from fastapi.responses import JSONResponse, PlainTextResponse, Response
from pydantic import BaseModel

from .clock import fmt_utc, utc_now
from .dsl import render_dot
from .engine import EngineError
from .service import ServiceRegistry, StudyService
from .study import format_percent

_CONFLICT_CODES = {"DUPLICATE_INSTANCE", "DUPLICATE_HANDLE", "PENDING_EVENTS",
                   "GROUP_PRECONDITION", "BASELINE_INCOMPLETE", "STALE_EVENT",
                   "PARTICIPANT_INACTIVE"}
_NOT_FOUND_CODES = {"UNKNOWN_PARTICIPANT", "UNKNOWN_GROUP", "UNKNOWN_STATE",
                    "MISSING_PROTOCOL"}


class CreateParticipantBody(BaseModel):
    handle: str
    group: str
    participant_id: Optional[str] = None


class ReassignBody(BaseModel):
    group: Optional[str] = None
    randomize: bool = False
    force: bool = False


class TransitionBody(BaseModel):
    target: str


def _http_error(status: int, code: str, message: str) -> HTTPException:
    return HTTPException(status_code=status, detail={"code": code, "message": message})


def _engine_error_to_http(exc: EngineError) -> HTTPException:
    if exc.code in _NOT_FOUND_CODES:
        return _http_error(404, exc.code, str(exc))
    if exc.code in _CONFLICT_CODES:
        return _http_error(409, exc.code, str(exc))
    return _http_error(400, exc.code, str(exc))


def create_app(registry: ServiceRegistry, clock: Callable[[], datetime] = utc_now,
               console_dir: str | Path | None = None) -> FastAPI:
    app = FastAPI(title="smartstate", docs_url=None, redoc_url=None)
    tokens = registry.app_config.tokens

    @app.exception_handler(HTTPException)
    async def _flat_errors(request: Request, exc: HTTPException):
        detail = exc.detail
        if not isinstance(detail, dict):
            detail = {"code": "ERROR", "message": str(detail)}
        return JSONResponse(status_code=exc.status_code, content=detail)

    def actor(authorization: str = Header(default="")) -> str:
        if not tokens:
            return "anonymous"
        if authorization.startswith("Bearer "):
            label = registry.app_config.actor_for_token(authorization[len("Bearer "):])
            if label is not None:
                return label
        raise _http_error(401, "UNAUTHENTICATED", "missing or invalid bearer token")

    def study_or_404(study_id: str) -> StudyService:
        service = registry.get(study_id)
        if service is None:
            raise _http_error(404, "UNKNOWN_STUDY", f"no study {study_id!r}")
        return service

    def find_participant(participant_id: str) -> tuple[StudyService, object]:
        for service in registry.services.values():
            participant = service.store.get_participant(participant_id)
            if participant is not None:
                return service, participant
        raise _http_error(404, "UNKNOWN_PARTICIPANT", f"no participant {participant_id!r}")

    # -- read endpoints ---------------------------------------------------------

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "studies": sorted(registry.services)}

    @app.get("/studies")
    def studies(_: str = Depends(actor)):
        return [
            {
                "study_id": s.descriptor.study_id,
                "display_name": s.descriptor.display_name,
                "timezone": s.descriptor.config.timezone,
                "groups": sorted(s.descriptor.group_protocols),
            }
            for s in registry.services.values()
        ]

    @app.get("/studies/{study_id}/participants")
    def participants(study_id: str, _: str = Depends(actor)):
        service = study_or_404(study_id)
        rows = []
        for participant in service.store.list_participants():
            instance = service.engine.instances.get(participant.participant_id)
            messages = service.store.query_messages(handle=participant.handle)
            last_at = max((m.at for m in messages), default=None)
            rate = (service.participant_success_rate(participant.participant_id)
                    if instance else None)
            rows.append({
                "participant_id": participant.participant_id,
                "handle": participant.handle,
                "group": participant.group_id,
                "status": participant.status,
                "current_state": instance.current_state if instance else None,
                "cycle_date": instance.cycle_date.isoformat() if instance else None,
                "last_message_at": fmt_utc(last_at) if last_at else None,
                "success_rate": round(rate, 6) if rate is not None else None,
                # Preformatted so clients can display it without any math.
                "success_rate_percent": format_percent(rate) if rate is not None else None,
            })
        return rows

    @app.get("/studies/{study_id}/metrics")
    def metrics(study_id: str, _: str = Depends(actor)):
        return study_or_404(study_id).metrics()

    @app.get("/studies/{study_id}/audit")
    def study_audit(study_id: str, participant: Optional[str] = None,
                    kind: Optional[str] = None, limit: Optional[int] = None,
                    _: str = Depends(actor)):
        service = study_or_404(study_id)
        records = service.store.query_audit(participant_id=participant, kind=kind,
                                            limit=limit)
        return [r.as_dict() for r in records]

    @app.get("/participants/{participant_id}/audit")
    def participant_audit(participant_id: str, kind: Optional[str] = None,
                          _: str = Depends(actor)):
        service, _participant = find_participant(participant_id)
        records = service.store.query_audit(participant_id=participant_id, kind=kind)
        return [r.as_dict() for r in records]

    @app.get("/participants/{participant_id}/messages")
    def participant_messages(participant_id: str, _: str = Depends(actor)):
        service, participant = find_participant(participant_id)
        return [m.as_dict() for m in service.store.query_messages(handle=participant.handle)]

    @app.get("/studies/{study_id}/groups/{group_id}/diagram",
             response_class=PlainTextResponse)
    def diagram(study_id: str, group_id: str, _: str = Depends(actor)):
        service = study_or_404(study_id)
        protocol_id = service.descriptor.group_protocols.get(group_id)
        if protocol_id is None:
            raise _http_error(404, "UNKNOWN_GROUP", f"no group {group_id!r}")
        return render_dot(service.descriptor.protocols[protocol_id])

    @app.get("/studies/{study_id}/export")
    def export(study_id: str, _: str = Depends(actor)):
        service = study_or_404(study_id)
        paths = service.export()
        buffer = io.BytesIO()
        with zipfile.ZipFile(buffer, "w", zipfile.ZIP_DEFLATED) as zf:
            for path in paths:
                info = zipfile.ZipInfo(path.name, date_time=(1980, 1, 1, 0, 0, 0))
                zf.writestr(info, path.read_bytes())
        return Response(
            content=buffer.getvalue(),
            media_type="application/zip",
            headers={"Content-Disposition":
                     f'attachment; filename="{study_id}-export.zip"'},
        )

    @app.get("/console-config")
    def console_config():
        return {
            "studies": [
                {"study_id": s.descriptor.study_id,
                 "display_name": s.descriptor.display_name,
                 "groups": sorted(s.descriptor.group_protocols)}
                for s in registry.services.values()
            ],
            "poll_interval_ms": 5000,
        }

    # -- mutations ----------------------------------------------------------------

    @app.post("/studies/{study_id}/participants", status_code=201)
    def create_participant(study_id: str, body: CreateParticipantBody,
                           actor_label: str = Depends(actor)):
        service = study_or_404(study_id)
        participant_id = body.participant_id or f"p{len(service.store.list_participants()) + 1:04d}"
        try:
            instance = service.engine.enroll(participant_id, body.handle, body.group,
                                             clock(), actor=actor_label)
        except EngineError as exc:
            raise _engine_error_to_http(exc) from None
        return {
            "participant_id": participant_id,
            "handle": body.handle,
            "group": instance.group_id,
            "current_state": instance.current_state,
            "cycle_date": instance.cycle_date.isoformat(),
        }

    @app.post("/participants/{participant_id}/group")
    def reassign(participant_id: str, body: ReassignBody,
                 actor_label: str = Depends(actor)):
        service, _participant = find_participant(participant_id)
        now = clock()
        try:
            if body.randomize:
                group = service.randomize(participant_id, actor_label, now,
                                          force=body.force)
                return {"old_group": "baseline", "new_group": group,
                        "randomized": True, "no_change": False}
            if not body.group:
                raise _http_error(400, "MISSING_GROUP", "body needs group or randomize")
            return service.reassign(participant_id, body.group, actor_label, now)
        except EngineError as exc:
            raise _engine_error_to_http(exc) from None

    @app.post("/participants/{participant_id}/transition")
    def manual_transition(participant_id: str, body: TransitionBody,
                          actor_label: str = Depends(actor)):
        service, _participant = find_participant(participant_id)
        try:
            before = service.engine.instances[participant_id].current_state
            instance = service.engine.manual_transition(participant_id, body.target,
                                                        actor_label, clock())
        except EngineError as exc:
            raise _engine_error_to_http(exc) from None
        return {"participant_id": participant_id, "from": before,
                "to": instance.current_state}

    # -- webhook -------------------------------------------------------------------

    @app.post("/webhook/sms")
    def webhook_sms(From: str = Form(default=""), Body: str = Form(default=None),
                    study: Optional[str] = None):
        now = clock()
        services = list(registry.services.values())
        if study is not None:
            services = [study_or_404(study)]
        elif len(services) > 1:
            # Route by enrollment; fall back to the first study for auditing.
            owners = [s for s in services
                      if From and s.store.participant_by_handle(From) is not None]
            services = owners or services[:1]
        outcome = services[0].gateway.handle_inbound({"From": From, "Body": Body}, now)
        services[0].engine.process_pending()
        services[0].gateway.pump(now)
        if not outcome.accepted:
            raise _http_error(outcome.status_code, "MALFORMED_WEBHOOK", outcome.detail)
        return Response(status_code=204)

    if console_dir is not None and Path(console_dir).is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/console", StaticFiles(directory=str(console_dir), html=True),
                  name="console")

    return app
