"""Local HTTP service for the analyst loop.

Sessions live as JSON files in a data directory, one lock per session;
steps run on a worker thread behind a polled job resource so the HTTP
acceptor never blocks on the solver.  Handlers are stateless over the
persisted files: a restart loses nothing that finished.
"""

from __future__ import annotations

import json
import os
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse, PlainTextResponse
from fastapi.staticfiles import StaticFiles

from . import pipeline
from .fitting import ResidualMatrix, box_constrained_ls, compute_residual
from .recovery import BregmanConfig
from .spectra import (
    ReferenceLibrary,
    SpectraError,
    format_spectra_csv,
    load_library,
    parse_spectra_csv,
    MixtureMatrix,
)

MAX_BODY_BYTES = 64 * 1024 * 1024
VIEW_MAX_POINTS = 2048


@dataclass
class Job:
    id: str
    session_id: str
    status: str = "running"  # running | done | failed
    result: dict | None = None
    error: str | None = None


@dataclass
class SessionStore:
    data_dir: str
    library: ReferenceLibrary
    locks: dict[str, threading.Lock] = field(default_factory=dict)
    decisions: dict[str, list[dict]] = field(default_factory=dict)
    guard: threading.Lock = field(default_factory=threading.Lock)

    def _path(self, session_id: str) -> str:
        return os.path.join(self.data_dir, f"session-{session_id}.json")

    def lock_for(self, session_id: str) -> threading.Lock:
        with self.guard:
            return self.locks.setdefault(session_id, threading.Lock())

    def exists(self, session_id: str) -> bool:
        return os.path.exists(self._path(session_id))

    def save(self, session: pipeline.Session, pending: list[dict]) -> None:
        payload = pipeline.session_to_payload(session)
        payload["pending_decisions"] = pending
        tmp = self._path(session.id) + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True)
        os.replace(tmp, self._path(session.id))

    def load(self, session_id: str) -> tuple[pipeline.Session, list[dict]]:
        with open(self._path(session_id), "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        session = pipeline.session_from_payload(payload, self.library)
        return session, payload.get("pending_decisions", [])


def _downsample(wavenumbers: np.ndarray, values: np.ndarray):
    stride = max(1, int(np.ceil(len(wavenumbers) / VIEW_MAX_POINTS)))
    return wavenumbers[::stride].tolist(), values[::stride].tolist()


def session_view(session: pipeline.Session, pending: list[dict]) -> dict:
    """Pure projection of session state for clients."""
    wn = session.data.grid.wavenumbers
    decided = {d["candidate_index"]: d for d in pending}
    iterations = []
    for rec in session.iteration_log:
        iterations.append(
            {
                "index": rec.index,
                "residual_norm": rec.residual_norm,
                "residual_rel": rec.residual_rel,
                "negative_fraction": rec.negative_fraction,
                "rows_kept": rec.rows_kept,
                "candidate_count": len(rec.candidates),
                "decisions": [
                    {"candidate_index": d.candidate_index, "action": d.action, "name": d.name}
                    for d in rec.decisions_applied
                ],
                "status_after": rec.status_after,
            }
        )
    candidates = []
    if session.status == "awaiting_confirmation" and session.iteration_log:
        rec = session.iteration_log[-1]
        for cand in rec.candidates:
            grid, spec = _downsample(wn, cand.spectrum)
            match = next((m for m in rec.matches if m.candidate_index == cand.index), None)
            candidates.append(
                {
                    "index": cand.index,
                    "wavenumbers": grid,
                    "spectrum": spec,
                    "concentrations": cand.concentrations.tolist(),
                    "score": cand.score,
                    "matches": [{"name": n, "similarity": s} for n, s in match.ranked]
                    if match
                    else [],
                    "pending_decision": decided.get(cand.index),
                }
            )
    return {
        "id": session.id,
        "status": session.status,
        "laser_wavelengths_nm": list(session.data.laser_wavelengths),
        "known": [
            {
                "name": c.name,
                "bound": c.bound,
                "origin": c.origin,
                "confirmed_iteration": c.confirmed_iteration,
                "match_score": c.match_score,
            }
            for c in session.known
        ],
        "iterations": iterations,
        "candidates": candidates,
    }


def _current_residual(session: pipeline.Session) -> np.ndarray:
    """Residual under the current known set (recomputed, deterministic)."""
    X = session.data
    if not session.known:
        return X.values.copy()
    A = np.column_stack([c.spectrum for c in session.known])
    names = session.known_names
    bounds = pipeline._fit_bounds(session)
    S = box_constrained_ls(X, A, names, bounds,
                           tol=session.config.fit_tol, max_iter=session.config.fit_max_iter)
    return compute_residual(X, A, S, clamp=False).values


def create_app(data_dir: str, library_dir: str | None = None,
               static_dir: str | None = None) -> FastAPI:
    os.makedirs(data_dir, exist_ok=True)
    if library_dir:
        library = load_library(library_dir)
    else:
        library = ReferenceLibrary({})
    store = SessionStore(data_dir=data_dir, library=library)
    jobs: dict[str, Job] = {}
    jobs_guard = threading.Lock()
    executor = ThreadPoolExecutor(max_workers=2)
    idempotency_path = os.path.join(data_dir, "idempotency.json")

    app = FastAPI(title="specunmix analyst service")

    def _idempotency_map() -> dict:
        if os.path.exists(idempotency_path):
            with open(idempotency_path, "r", encoding="utf-8") as fh:
                return json.load(fh)
        return {}

    def _remember_key(key: str, session_id: str) -> None:
        mapping = _idempotency_map()
        mapping[key] = session_id
        tmp = idempotency_path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(mapping, fh, sort_keys=True)
        os.replace(tmp, idempotency_path)

    @app.post("/sessions")
    async def create_session(request: Request):
        raw = await request.body()
        if len(raw) > MAX_BODY_BYTES:
            return JSONResponse({"error": "payload too large"}, status_code=413)
        try:
            body = json.loads(raw)
        except json.JSONDecodeError as exc:
            return JSONResponse({"error": f"malformed JSON: {exc}"}, status_code=400)
        key = request.headers.get("Idempotency-Key")
        if key:
            existing = _idempotency_map().get(key)
            if existing and store.exists(existing):
                return JSONResponse({"id": existing}, status_code=200)
        try:
            data = parse_spectra_csv(body["csv"])
            knowns = [(k["name"], float(k["bound"])) for k in body.get("knowns", [])]
            config = pipeline.config_from_dict(body.get("config", {}))
            session = pipeline.new_session(
                data,
                store.library,
                knowns,
                total_bound=body.get("total_bound"),
                config=config,
                session_id=uuid.uuid4().hex[:12],
            )
        except (SpectraError, KeyError, TypeError, ValueError) as exc:
            return JSONResponse({"error": str(exc)}, status_code=400)
        with store.lock_for(session.id):
            store.save(session, [])
        if key:
            _remember_key(key, session.id)
        return JSONResponse({"id": session.id}, status_code=201)

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str):
        if not store.exists(session_id):
            return JSONResponse({"error": "unknown session"}, status_code=404)
        with store.lock_for(session_id):
            session, pending = store.load(session_id)
        return session_view(session, pending)

    def _run_step(job: Job, session_id: str):
        try:
            with store.lock_for(session_id):
                session, pending = store.load(session_id)
                decisions = [
                    pipeline.Decision(d["candidate_index"], d["action"], d.get("name"))
                    for d in pending
                ]
                pipeline.run_iteration(session, decisions)
                store.save(session, [])
                job.result = session_view(session, [])
                job.status = "done"
        except Exception as exc:
            job.status = "failed"
            job.error = str(exc)

    @app.post("/sessions/{session_id}/step")
    def step(session_id: str):
        if not store.exists(session_id):
            return JSONResponse({"error": "unknown session"}, status_code=404)
        with store.lock_for(session_id):
            session, pending = store.load(session_id)
            if session.status in ("converged", "exhausted"):
                return JSONResponse(session_view(session, pending), status_code=200)
            if session.status == "awaiting_confirmation":
                undecided = [
                    c.index
                    for c in session.iteration_log[-1].candidates
                    if c.index not in {d["candidate_index"] for d in pending}
                ]
                if undecided:
                    return JSONResponse(
                        {"error": "undecided candidates block the step",
                         "undecided": undecided},
                        status_code=409,
                    )
        job = Job(id=uuid.uuid4().hex[:12], session_id=session_id)
        with jobs_guard:
            jobs[job.id] = job
        executor.submit(_run_step, job, session_id)
        return JSONResponse({"job_id": job.id}, status_code=202)

    @app.get("/jobs/{job_id}")
    def get_job(job_id: str):
        with jobs_guard:
            job = jobs.get(job_id)
        if job is None:
            return JSONResponse({"error": "unknown job"}, status_code=404)
        if job.status == "running":
            return JSONResponse({"status": "running"}, status_code=200)
        if job.status == "failed":
            return JSONResponse({"status": "failed", "error": job.error}, status_code=200)
        return JSONResponse({"status": "done", "view": job.result}, status_code=200)

    @app.post("/sessions/{session_id}/candidates/{index}/decision")
    async def decide(session_id: str, index: int, request: Request):
        if not store.exists(session_id):
            return JSONResponse({"error": "unknown session"}, status_code=404)
        try:
            body = json.loads(await request.body())
        except json.JSONDecodeError as exc:
            return JSONResponse({"error": f"malformed JSON: {exc}"}, status_code=400)
        action = body.get("action")
        name = body.get("name")
        if action not in ("confirm", "reject"):
            return JSONResponse({"error": "action must be confirm or reject"}, status_code=400)
        if action == "confirm" and not name:
            return JSONResponse({"error": "confirm needs a name"}, status_code=400)
        with store.lock_for(session_id):
            session, pending = store.load(session_id)
            if session.status != "awaiting_confirmation":
                return JSONResponse({"error": "no candidates awaiting decisions"}, status_code=409)
            candidates = {c.index for c in session.iteration_log[-1].candidates}
            if index not in candidates:
                return JSONResponse({"error": "unknown candidate"}, status_code=404)
            if any(d["candidate_index"] == index for d in pending):
                return JSONResponse({"error": "candidate already decided"}, status_code=409)
            if action == "confirm" and name in session.known_names:
                return JSONResponse(
                    {"error": f"{name!r} is already a known component"}, status_code=400
                )
            pending.append({"candidate_index": index, "action": action, "name": name})
            store.save(session, pending)
        return JSONResponse({"ok": True, "pending": pending}, status_code=200)

    @app.get("/sessions/{session_id}/residual.csv")
    def residual_csv(session_id: str):
        if not store.exists(session_id):
            return JSONResponse({"error": "unknown session"}, status_code=404)
        with store.lock_for(session_id):
            session, _ = store.load(session_id)
            values = _current_residual(session)
        csv_text = format_spectra_csv(
            MixtureMatrix.from_values(session.data.grid, values, session.data.laser_wavelengths)
        )
        return PlainTextResponse(csv_text, media_type="text/csv")

    @app.get("/sessions/{session_id}/data.csv")
    def data_csv(session_id: str):
        if not store.exists(session_id):
            return JSONResponse({"error": "unknown session"}, status_code=404)
        with store.lock_for(session_id):
            session, _ = store.load(session_id)
        return PlainTextResponse(format_spectra_csv(session.data), media_type="text/csv")

    @app.get("/sessions/{session_id}/report.json")
    def report_json(session_id: str):
        from .report import build_report

        if not store.exists(session_id):
            return JSONResponse({"error": "unknown session"}, status_code=404)
        with store.lock_for(session_id):
            session, _ = store.load(session_id)
        return JSONResponse(build_report(session), status_code=200)

    @app.get("/library")
    def get_library():
        entries = []
        for name, spec in store.library.entries.items():
            grid, values = _downsample(spec.grid.wavenumbers, spec.intensities)
            entries.append({"name": name, "wavenumbers": grid, "spectrum": values})
        return {"entries": entries}

    if static_dir:
        app.mount("/", StaticFiles(directory=static_dir, html=True), name="ui")
    return app
