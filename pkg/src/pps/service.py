"""HTTP API tying ingest, processing, review, and reporting together.

Every mutating endpoint is bearer-token authenticated and role-checked;
review-module errors map one-to-one onto HTTP statuses (403 role, 404
unknown, 409 state conflicts, 422 bad payload). Processing runs on an
in-process queue with at most one job per batch.
"""

from __future__ import annotations

import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict

from fastapi import Depends, FastAPI, Header, HTTPException, Query, Request
from fastapi.responses import JSONResponse, Response

from . import ingest, pipeline, reporting, review
from .config import ProcessingParameters, ServiceConfig
from .reporting import fmt_g
from .review import Archive, User, WorkflowError


class JobRunner:
    """At most one processing job per batch; batches run independently."""

    def __init__(self, store: Archive, config: ServiceConfig,
                 inline: bool = False):
        self.store = store
        self.config = config
        self.inline = inline
        self._pool = ThreadPoolExecutor(max_workers=4)
        self._active: set[str] = set()
        self._lock = threading.Lock()

    def submit(self, batch_id: str, params: ProcessingParameters,
               user: User) -> dict:
        with self._lock:
            if batch_id in self._active:
                raise HTTPException(409, "processing already in progress")
            self._active.add(batch_id)
        self.store.set_job(batch_id, "queued", 0.0)
        if self.inline:
            self._run(batch_id, params, user)
        else:
            self._pool.submit(self._run, batch_id, params, user)
        return self.store.get_job(batch_id) or {
            "batch_id": batch_id, "phase": "queued", "progress": 0.0}

    def _run(self, batch_id: str, params: ProcessingParameters,
             user: User) -> None:
        try:
            self.store.set_job(batch_id, "running", 0.1)
            bundle = ingest.unpack_run_bundle(self.store.load_bundle(batch_id))
            processed = pipeline.process_bundle(
                bundle, params, self.config.calibration, self.config.offsets)
            self.store.set_job(batch_id, "running", 0.8)
            rev = self.store.record_revision(
                batch_id, user, params.to_json(), processed.results,
                processed.segments, processed.flags, processed.artifacts,
                processed.trend)
            self.store.write_qc_trend_artifact(
                batch_id, rev, bundle.manifest.robot_id, user.id)
            self.store.set_job(batch_id, "done", 1.0)
        except Exception as exc:  # recorded, surfaced through the status API
            self.store.set_job(batch_id, "failed", 1.0, f"{exc}")
        finally:
            with self._lock:
                self._active.discard(batch_id)


def _workflow_status(exc: WorkflowError) -> int:
    if isinstance(exc, review.ForbiddenRole):
        return 403
    if isinstance(exc, review.UnknownBatch):
        return 404
    if isinstance(exc, (review.EmptyComment, review.UnknownSegment,
                        review.UnknownFlag)):
        return 422
    return 409  # state conflicts: InvalidTransition, OpenFlags, etc.


def _segment_row(seg: dict) -> dict:
    data = seg.get("data", {})
    avg = data.get("averaged")
    fwd = data.get("forward")
    rev = data.get("reverse")

    def block(r):
        if r is None:
            return None
        return {"mass_g": fmt_g(r["mass_g"]), "tmu_g": fmt_g(r["tmu_g"]),
                "mda_g": fmt_g(r["mda_g"]),
                "density_g_per_ft": fmt_g(r["density_g_per_ft"]),
                "sigma_g": fmt_g(r["sigma_g"]),
                "lump_flagged": r["lump_flagged"],
                "max_position_in": r["max_position_in"]}

    return {
        "number": seg["number"],
        "start_ft": reporting.fmt_ft(seg["start_in"] / 12.0),
        "end_ft": reporting.fmt_ft(seg["end_in"] / 12.0),
        "start_in": seg["start_in"], "end_in": seg["end_in"],
        "kind": seg["kind"], "status": seg["status"],
        "rejection_reason": seg["rejection_reason"],
        "open_flag_count": seg["open_flag_count"],
        "reported": block(avg), "forward": block(fwd), "reverse": block(rev),
        "images": data.get("images", []),
        "qc": data.get("qc", {}),
        "geometry": data.get("geometry"),
    }


def _batch_summary(view: dict) -> dict:
    return {
        "id": view["id"], "state": view["state"],
        "revision": view["revision"],
        "returned_from_pm": view["returned_from_pm"],
        "robot_id": view["robot_id"], "start_time": view["start_time"],
        "request": view["request"],
        "invalid_reason": view["invalid_reason"],
        "approved_by": view["approved_by"],
        "approved_by_name": view["approved_by_name"],
        "approved_at": view["approved_at"],
        "parameters": view["parameters"],
        "ingest_issues": view["ingest_issues"],
        "segments": [_segment_row(s) for s in view["segments"]],
        "flags": view["flags"],
        "comments": view["comments"],
        "replicate": view["results"].get("replicate") if view["results"] else None,
        "qc": {k: view["results"]["qc"].get(k) for k in
               ("pre", "post", "full_pipe", "contamination")}
              if view["results"] else None,
        "trajectory": view["results"].get("trajectory") if view["results"] else None,
        "calibration": view["results"].get("calibration") if view["results"] else None,
        "plan_notes": view["results"].get("plan_notes", []) if view["results"] else [],
        "artifacts": {
            "trajectory_csv": view["artifacts"].get("trajectory.csv"),
            "mass_curve_fwd": view["artifacts"].get("mass_curve_fwd.csv"),
            "mass_curve_rev": view["artifacts"].get("mass_curve_rev.csv"),
        } if view["artifacts"] else {},
        "segment_artifacts": {
            str(s["number"]): {
                "heatmap": view["artifacts"].get(f"heatmap_seg{s['number']}.png"),
                "heatmap_dev": view["artifacts"].get(
                    f"heatmap_dev_seg{s['number']}.png"),
                "mesh": view["artifacts"].get(f"mesh_seg{s['number']}.off"),
                "spectrum": view["artifacts"].get(
                    f"spectrum_seg{s['number']}.csv"),
                "images": [view["artifacts"].get(f"images/{f}")
                           for f in s.get("data", {}).get("images", [])
                           if view["artifacts"].get(f"images/{f}")],
            } for s in view["segments"]} if view["segments"] else {},
    }


def create_app(config: ServiceConfig | None = None,
               inline_jobs: bool = False) -> FastAPI:
    config = config or ServiceConfig()
    app = FastAPI(title="pps", version="0.1.0")
    store = Archive(config.archive_root)
    jobs = JobRunner(store, config, inline=inline_jobs)
    app.state.store = store
    app.state.config = config
    app.state.jobs = jobs

    users = {token: User(id=uid, display_name=name, role=role)
             for token, (uid, name, role) in config.tokens.items()}

    def auth(authorization: str | None = Header(default=None)) -> User:
        if not authorization or not authorization.startswith("Bearer "):
            raise HTTPException(401, "missing bearer token")
        token = authorization.removeprefix("Bearer ").strip()
        user = users.get(token)
        if user is None:
            raise HTTPException(401, "unknown token")
        store.ensure_user(user)
        return user

    @app.exception_handler(WorkflowError)
    def workflow_error(_request: Request, exc: WorkflowError):
        return JSONResponse(
            status_code=_workflow_status(exc),
            content={"error": type(exc).__name__, "detail": str(exc)})

    @app.exception_handler(reporting.ReportingError)
    def reporting_error(_request: Request, exc: reporting.ReportingError):
        code = 409 if isinstance(exc, reporting.NotApproved) else 422
        return JSONResponse(status_code=code,
                            content={"error": type(exc).__name__,
                                     "detail": str(exc)})

    def view_or_404(batch_id: str) -> dict:
        return store.batch_view(batch_id)

    @app.post("/api/batches", status_code=201)
    async def upload(request: Request, user: User = Depends(auth)):
        body = await request.body()
        if not body:
            raise HTTPException(422, "empty body; expected a bundle zip")
        try:
            bundle = ingest.unpack_run_bundle(body)
        except ingest.IngestError as exc:
            raise HTTPException(422, f"{type(exc).__name__}: {exc}")
        issues = ingest.validate_bundle(bundle)
        fatal = [i for i in issues if i.fatal]
        if fatal:
            raise HTTPException(
                422, {"error": "FatalIngestIssue",
                      "issues": [asdict(i) for i in fatal]})
        batch_id = str(ingest.make_batch_id(bundle.manifest.robot_id,
                                            bundle.manifest.start_time))
        store.create_batch(
            batch_id, body,
            manifest={"robot_id": bundle.manifest.robot_id,
                      "fov_length_in": bundle.manifest.fov_length_in,
                      "pipe_diameter_in": bundle.manifest.pipe_diameter_in,
                      "channel_count": bundle.manifest.channel_count,
                      "energy_cal": asdict(bundle.manifest.energy_cal),
                      "qc_live_time_s": bundle.manifest.qc_live_time_s},
            request=asdict(bundle.request),
            issues=[asdict(i) for i in issues],
            user=user, robot_id=bundle.manifest.robot_id,
            start_time_iso=bundle.manifest.start_time.isoformat())
        return {"batch_id": batch_id, "state": review.UPLOADED,
                "issues": [asdict(i) for i in issues]}

    @app.get("/api/batches")
    def list_batches(user: User = Depends(auth)):
        return {"batches": store.list_batches()}

    @app.get("/api/batches/{batch_id}")
    def get_batch(batch_id: str, user: User = Depends(auth)):
        return _batch_summary(view_or_404(batch_id))

    @app.post("/api/batches/{batch_id}/process")
    async def process(batch_id: str, request: Request,
                      user: User = Depends(auth)):
        if user.role != review.ROLE_ANALYST:
            raise HTTPException(403, "processing requires the analyst role")
        state = store.batch_state(batch_id)
        if state not in (review.UPLOADED, review.PROCESSED):
            raise HTTPException(409, f"cannot process from state {state}")
        body = await request.body()
        overrides = {}
        if body:
            payload = json.loads(body)
            overrides = payload.get("params", {})
        try:
            params = ProcessingParameters().apply_overrides(overrides)
        except (KeyError, TypeError, ValueError) as exc:
            raise HTTPException(422, f"bad parameters: {exc}")
        return jobs.submit(batch_id, params, user)

    @app.get("/api/batches/{batch_id}/status")
    def status(batch_id: str, user: User = Depends(auth)):
        store.batch_state(batch_id)
        job = store.get_job(batch_id)
        if job is None:
            return {"batch_id": batch_id, "phase": "none", "progress": 0.0,
                    "error": None}
        return job

    @app.get("/api/batches/{batch_id}/segments/{number}")
    def segment_detail(batch_id: str, number: int,
                       user: User = Depends(auth)):
        summary = _batch_summary(view_or_404(batch_id))
        for seg in summary["segments"]:
            if seg["number"] == number:
                seg = dict(seg)
                seg["artifacts"] = summary["segment_artifacts"].get(
                    str(number), {})
                return seg
        raise HTTPException(404, f"segment {number} not found")

    @app.post("/api/batches/{batch_id}/flags/{flag_id}/clear")
    async def clear_flag(batch_id: str, flag_id: str, request: Request,
                         user: User = Depends(auth)):
        payload = json.loads(await request.body() or b"{}")
        store.clear_flag(batch_id, flag_id, payload.get("comment", ""), user)
        return _batch_summary(view_or_404(batch_id))

    @app.post("/api/batches/{batch_id}/segments/{number}/reject")
    async def reject_segment(batch_id: str, number: int, request: Request,
                             user: User = Depends(auth)):
        payload = json.loads(await request.body() or b"{}")
        store.reject_segment(batch_id, number, payload.get("reason", ""), user)
        return _batch_summary(view_or_404(batch_id))

    @app.post("/api/batches/{batch_id}/comments")
    async def add_comment(batch_id: str, request: Request,
                          user: User = Depends(auth)):
        payload = json.loads(await request.body() or b"{}")
        store.add_comment(batch_id, payload.get("scope", "batch"),
                          payload.get("segment"), payload.get("text", ""), user)
        return _batch_summary(view_or_404(batch_id))

    def _transition(batch_id: str, action: str, user: User) -> dict:
        store.transition(batch_id, action, user)
        return _batch_summary(view_or_404(batch_id))

    @app.post("/api/batches/{batch_id}/lock")
    def lock(batch_id: str, user: User = Depends(auth)):
        return _transition(batch_id, "lock", user)

    @app.post("/api/batches/{batch_id}/approve")
    def approve(batch_id: str, user: User = Depends(auth)):
        return _transition(batch_id, "approve", user)

    @app.post("/api/batches/{batch_id}/return")
    def return_to_analyst(batch_id: str, user: User = Depends(auth)):
        return _transition(batch_id, "return", user)

    @app.get("/api/batches/{batch_id}/report")
    def report(batch_id: str, draft: bool = Query(default=True),
               user: User = Depends(auth)):
        view = view_or_404(batch_id)
        trend = store.qc_trend(view["robot_id"], limit=30)
        doc = reporting.build_report(view, trend, draft=draft)
        payload = reporting.render_report(doc)
        name = "report_draft.html" if draft else "report.html"
        store.put_artifact(batch_id, view["revision"], name, payload,
                           "text/html")
        return Response(content=payload, media_type="text/html")

    @app.get("/api/batches/{batch_id}/ncs")
    def ncs(batch_id: str, user: User = Depends(auth)):
        view = view_or_404(batch_id)
        params = view["parameters"] or {}
        threshold = params.get("ncs_threshold_g",
                               ProcessingParameters().ncs_threshold_g)
        rows = reporting.build_ncs_table(view, threshold)
        payload = reporting.render_ncs(batch_id, rows)
        store.put_artifact(batch_id, view["revision"], "ncs.html", payload,
                           "text/html")
        return Response(content=payload, media_type="text/html")

    @app.get("/api/batches/{batch_id}/conda")
    def conda(batch_id: str, user: User = Depends(auth)):
        view = view_or_404(batch_id)
        payload = reporting.build_conda_export(view)
        store.put_artifact(batch_id, view["revision"], "conda.csv", payload,
                           "text/csv")
        return Response(content=payload, media_type="text/csv")

    @app.get("/api/qc/trend")
    def qc_trend(robot: str = Query(...), user: User = Depends(auth)):
        return {"robot_id": robot, "entries": store.qc_trend(robot, limit=30)}

    @app.get("/api/artifacts/{artifact_id}")
    def artifact(artifact_id: str, user: User = Depends(auth)):
        try:
            payload, media, name = store.get_artifact(artifact_id)
        except review.UnknownBatch:
            raise HTTPException(404, "unknown artifact")
        return Response(content=payload, media_type=media,
                        headers={"X-Artifact-Name": name})

    return app
