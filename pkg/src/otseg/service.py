"""Interactive HTTP job service.

Sessions hold an uploaded image plus the current scribble state; solves run
asynchronously on a worker pool with progress reported every 10 solver
iterations, cancellation at the same boundary, and results retrievable as
16-bit probability PNGs (client rethresholdable) or thresholded label PNGs.

State is in memory only: results live in an LRU store (configurable cap)
and idle sessions expire after a TTL (default 1 hour). Handlers touch
session/job metadata under one short-lived lock and never block on compute;
solves for the same session are serialized by a per-session lock, and a new
solve request cancels the session's previous unfinished job.

The same pipeline function as the CLI (models.segment_scribbles) produces
the maps, so equal config + seed gives byte-identical PNG payloads.
"""

from __future__ import annotations

import io
import json
import threading
import time
import uuid
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, Request, Response
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from . import pngio
from .cli import _SOLVER_KEYS
from .errors import OtsegError

__all__ = ["create_app", "main", "DEFAULT_RESULT_CAP", "DEFAULT_SESSION_TTL"]

DEFAULT_RESULT_CAP = 32
DEFAULT_SESSION_TTL = 3600.0   # seconds of idleness before a session expires
PROGRESS_EVERY = 10            # solver iterations per progress/cancel check

SOLVE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {**_SOLVER_KEYS, "seed": {"type": "integer", "minimum": 0}},
}

STROKE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["label", "radius", "points"],
    "properties": {
        "label": {"type": "integer", "minimum": 1, "maximum": 255},
        "radius": {"type": "integer", "minimum": 0},
        "points": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "array",
                "minItems": 2,
                "maxItems": 2,
                "items": {"type": "integer", "minimum": 0},
            },
        },
    },
}

SCRIBBLE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "strokes": {"type": "array", "items": STROKE_SCHEMA},
        "mask": {"type": "array",
                 "items": {"type": "array",
                           "items": {"type": "integer",
                                     "minimum": 0, "maximum": 255}}},
    },
}


@dataclass
class Job:
    id: str
    session_id: str
    config: dict
    max_iter: int
    status: str = "queued"      # queued -> running -> done|failed|cancelled
    iteration: int = 0
    error: str | None = None
    cancel_requested: bool = False

    @property
    def progress(self) -> float:
        if self.status == "done":
            return 1.0
        return min(1.0, self.iteration / max(self.max_iter, 1))

    def as_dict(self) -> dict:
        out = {
            "job_id": self.id,
            "session_id": self.session_id,
            "status": self.status,
            "progress": self.progress,
            "iteration": self.iteration,
            "max_iter": self.max_iter,
        }
        if self.error is not None:
            out["error"] = self.error
        return out


@dataclass
class Session:
    id: str
    image: np.ndarray           # float64 (h, w, c)
    scribbles: np.ndarray       # int32 (h, w), 0 = unlabeled
    created: float
    touched: float
    current_job: str | None = None
    solve_lock: threading.Lock = field(default_factory=threading.Lock)

    @property
    def shape(self):
        return self.image.shape[:2]

    def n_labels(self) -> int:
        return int((np.unique(self.scribbles) != 0).sum())


class ResultStore:
    """Per-session latest result, LRU-evicted beyond ``cap`` entries."""

    def __init__(self, cap: int):
        self.cap = int(cap)
        self._data: OrderedDict[str, dict] = OrderedDict()

    def put(self, session_id: str, payload: dict) -> None:
        self._data.pop(session_id, None)
        self._data[session_id] = payload
        while len(self._data) > self.cap:
            self._data.popitem(last=False)

    def get(self, session_id: str):
        payload = self._data.get(session_id)
        if payload is not None:
            self._data.move_to_end(session_id)
        return payload

    def drop(self, session_id: str) -> None:
        self._data.pop(session_id, None)


def _error(status: int, message: str) -> JSONResponse:
    return JSONResponse({"error": message}, status_code=status)


def _rasterize_strokes(strokes, shape) -> np.ndarray:
    """Round-brush rasterization onto a fresh mask.

    Stroke points are (x, y) = (column, row); each segment between
    consecutive points is sampled densely and stamped with a disc of the
    stroke's integer radius (dx^2 + dy^2 <= radius^2).
    """
    h, w = shape
    mask = np.zeros((h, w), dtype=np.int32)
    for stroke in strokes:
        label = stroke["label"]
        radius = stroke["radius"]
        dy, dx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
        disc = np.argwhere(dx ** 2 + dy ** 2 <= radius ** 2) - radius
        pts = stroke["points"]
        centers = set()
        for (x0, y0), (x1, y1) in zip(pts, pts[1:] or pts):
            steps = max(abs(x1 - x0), abs(y1 - y0), 1)
            for s in range(steps + 1):
                cx = round(x0 + (x1 - x0) * s / steps)
                cy = round(y0 + (y1 - y0) * s / steps)
                centers.add((cx, cy))
        for cx, cy in centers:
            for oy, ox in disc:
                px, py = cx + ox, cy + oy
                if 0 <= px < w and 0 <= py < h:
                    mask[py, px] = label
    return mask


def create_app(result_cap: int = DEFAULT_RESULT_CAP,
               session_ttl: float = DEFAULT_SESSION_TTL,
               workers: int | None = None) -> FastAPI:
    import jsonschema

    from .features import ScribbleSet
    from .models import SegConfig, segment_scribbles, threshold_labels

    if workers is None:
        import os
        env = os.environ.get("OTSEG_THREADS")
        workers = int(env) if env else (os.cpu_count() or 2)

    app = FastAPI(title="otseg service", openapi_url="/spec")
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
        allow_headers=["*"])

    lock = threading.RLock()
    sessions: dict[str, Session] = {}
    jobs: dict[str, Job] = {}
    results = ResultStore(result_cap)
    executor = ThreadPoolExecutor(max_workers=workers,
                                  thread_name_prefix="otseg-worker")
    app.state.sessions = sessions
    app.state.jobs = jobs
    app.state.results = results
    app.state.executor = executor

    def _sweep(now: float) -> None:
        # called under `lock`; drops sessions idle beyond the TTL
        dead = [sid for sid, s in sessions.items()
                if now - s.touched > session_ttl]
        for sid in dead:
            sessions.pop(sid, None)
            results.drop(sid)

    def _touch(session: Session) -> None:
        session.touched = time.monotonic()

    # ------------------------------------------------------------------
    # sessions

    @app.post("/sessions", status_code=201)
    async def create_session(request: Request):
        body = await request.body()
        size = pngio.sniff_png_size(body)
        if size is not None and (size[0] == 0 or size[1] == 0):
            return _error(422, f"image declares degenerate size {size}")
        try:
            image = pngio.load_image(bytes(body))
        except Exception:
            return _error(415, "body is not a decodable image")
        if image.shape[0] == 0 or image.shape[1] == 0:
            return _error(422, "image has zero pixels")
        sid = uuid.uuid4().hex
        now = time.monotonic()
        with lock:
            _sweep(now)
            sessions[sid] = Session(
                id=sid, image=image,
                scribbles=np.zeros(image.shape[:2], dtype=np.int32),
                created=now, touched=now)
        return {"session_id": sid}

    @app.get("/sessions/{sid}")
    def get_session(sid: str):
        with lock:
            session = sessions.get(sid)
            if session is None:
                return _error(404, "unknown session")
            _touch(session)
            h, w = session.shape
            return {
                "session_id": sid,
                "width": w,
                "height": h,
                "labels": sorted(int(v) for v in np.unique(session.scribbles)
                                 if v != 0),
                "current_job": session.current_job,
            }

    @app.put("/sessions/{sid}/scribbles", status_code=204)
    async def put_scribbles(sid: str, request: Request):
        body = await request.body()
        with lock:
            session = sessions.get(sid)
            if session is None:
                return _error(404, "unknown session")
            _touch(session)
            shape = session.shape
        ctype = request.headers.get("content-type", "")
        if "json" in ctype:
            try:
                doc = json.loads(body)
            except json.JSONDecodeError:
                return _error(422, "scribble payload is not valid JSON")
            try:
                jsonschema.validate(doc, SCRIBBLE_SCHEMA)
            except jsonschema.ValidationError as exc:
                return _error(422, f"invalid scribble payload: {exc.message}")
            if "mask" in doc:
                mask = np.asarray(doc["mask"], dtype=np.int32)
                if mask.ndim != 2 or mask.shape != shape:
                    return _error(
                        422, f"mask shape {mask.shape} does not match image "
                             f"{shape}")
            else:
                strokes = doc.get("strokes", [])
                if not strokes:
                    return Response(status_code=204)
                for stroke in strokes:
                    for x, y in stroke["points"]:
                        if x >= shape[1] or y >= shape[0]:
                            return _error(
                                422, f"stroke point ({x}, {y}) lies outside "
                                     f"the {shape[1]}x{shape[0]} image")
                mask = _rasterize_strokes(strokes, shape)
        else:
            try:
                mask = pngio.read_label_png(bytes(body))
            except Exception:
                return _error(415, "scribble body is neither JSON nor an "
                                   "indexed PNG")
            if mask.shape != shape:
                return _error(422, f"mask shape {mask.shape} does not match "
                                   f"image {shape}")
        with lock:
            session = sessions.get(sid)
            if session is None:
                return _error(404, "unknown session")
            session.scribbles = mask.astype(np.int32)
            _touch(session)
        return Response(status_code=204)

    # ------------------------------------------------------------------
    # jobs

    def _run_job(job: Job) -> None:
        with lock:
            session = sessions.get(job.session_id)
            if session is None:
                job.status = "failed"
                job.error = "session expired"
                return
            if job.cancel_requested:
                job.status = "cancelled"
                return
        with session.solve_lock:
            with lock:
                if job.cancel_requested:
                    job.status = "cancelled"
                    return
                job.status = "running"
                image = session.image
                mask = session.scribbles.copy()
                config = dict(job.config)

            def on_progress(iteration, u, residual):
                job.iteration = iteration

            def want_cancel():
                return job.cancel_requested

            try:
                seg_config = SegConfig(
                    variant=config.get("variant", "sinkhorn_prox"),
                    rho=config.get("rho", 0.1),
                    lam=config.get("lambda", 100.0),
                    cost_kind=("euclidean_p"
                               if config.get("cost_kind") == "euclidean"
                               else config.get("cost_kind", "exp_concave")),
                    gamma=config.get("gamma"),
                    cost_p=config.get("cost_p", 1.0),
                    M=config.get("bins"),
                    feature_kind=config.get("features", "rgb"),
                    tol=config.get("tol", 1e-6),
                    max_iter=job.max_iter,
                    threshold=config.get("threshold", 0.5),
                    seed=config.get("seed", 0),
                    r=config.get("precond_r", 1.0),
                    delta=config.get("precond_delta", 1.0),
                )
                res = segment_scribbles(image, mask, seg_config,
                                        callback=on_progress,
                                        cancel=want_cancel)
            except (OtsegError, ValueError) as exc:
                with lock:
                    job.status = "failed"
                    job.error = str(exc)
                return
            with lock:
                if res.report.cancelled:
                    # partial result discarded by contract
                    job.status = "cancelled"
                    return
                results.put(job.session_id, {
                    "probabilities": res.probabilities,
                    "threshold": seg_config.threshold,
                    "energy": res.energy,
                    "iterations": res.report.iterations,
                    "converged": res.report.converged,
                    "near_binarity": res.near_binarity,
                })
                job.iteration = res.report.iterations
                job.status = "done"

    @app.post("/sessions/{sid}/solve", status_code=202)
    async def solve_session(sid: str, request: Request):
        body = await request.body()
        doc = {}
        if body:
            try:
                doc = json.loads(body)
            except json.JSONDecodeError:
                return _error(422, "solve config is not valid JSON")
            try:
                jsonschema.validate(doc, SOLVE_SCHEMA)
            except jsonschema.ValidationError as exc:
                return _error(422, f"invalid solve config: {exc.message}")
        with lock:
            session = sessions.get(sid)
            if session is None:
                return _error(404, "unknown session")
            _touch(session)
            if session.n_labels() < 2:
                return _error(
                    409, f"need at least 2 scribbled classes before solving, "
                         f"found {session.n_labels()}")
            if session.current_job is not None:
                previous = jobs.get(session.current_job)
                if previous is not None and previous.status in ("queued",
                                                                "running"):
                    previous.cancel_requested = True
                    if previous.status == "queued":
                        previous.status = "cancelled"
            job = Job(id=uuid.uuid4().hex, session_id=sid, config=doc,
                      max_iter=int(doc.get("max_iter", 5000)))
            jobs[job.id] = job
            session.current_job = job.id
        executor.submit(_run_job, job)
        return {"job_id": job.id}

    @app.get("/jobs/{jid}")
    def job_status(jid: str):
        with lock:
            job = jobs.get(jid)
            if job is None:
                return _error(404, "unknown job")
            return job.as_dict()

    @app.delete("/jobs/{jid}", status_code=202)
    def cancel_job(jid: str):
        with lock:
            job = jobs.get(jid)
            if job is None:
                return _error(404, "unknown job")
            if job.status == "queued":
                job.cancel_requested = True
                job.status = "cancelled"
            elif job.status == "running":
                job.cancel_requested = True
            return job.as_dict()

    # ------------------------------------------------------------------
    # results

    @app.get("/sessions/{sid}/result")
    def get_result(sid: str, format: str = "prob16", threshold: float = 0.5):
        if format not in ("prob16", "labels"):
            return _error(422, f"unknown format {format!r}")
        if not (0.0 < threshold < 1.0):
            return _error(422, "threshold must lie strictly between 0 and 1")
        with lock:
            session = sessions.get(sid)
            if session is None:
                return _error(404, "unknown session")
            _touch(session)
            payload = results.get(sid)
        if payload is None:
            return _error(404, "no result available for this session")
        probs = payload["probabilities"]
        buf = io.BytesIO()
        if format == "prob16":
            if probs.shape[0] == 2:
                pngio.write_prob16_png(buf, probs[1])
            else:
                pngio.write_prob16_png(buf, probs.reshape(-1, probs.shape[2]))
        else:
            # threshold the 16-bit quantization the prob16 format serves, so
            # server labels equal a client rethreshold of those bytes at any t
            quant = np.rint(probs * 65535.0) / 65535.0
            pngio.write_label_png(buf, threshold_labels(quant, threshold))
        return Response(content=buf.getvalue(), media_type="image/png")

    @app.get("/sessions/{sid}/result/meta")
    def get_result_meta(sid: str):
        with lock:
            session = sessions.get(sid)
            if session is None:
                return _error(404, "unknown session")
            _touch(session)
            payload = results.get(sid)
        if payload is None:
            return _error(404, "no result available for this session")
        return {k: v for k, v in payload.items() if k != "probabilities"} | {
            "phases": int(payload["probabilities"].shape[0])}

    @app.get("/healthz")
    def healthz():
        with lock:
            return {"sessions": len(sessions), "jobs": len(jobs)}

    return app


def main(argv=None) -> int:
    import argparse

    import uvicorn

    parser = argparse.ArgumentParser(
        prog="otseg-serve", description="Interactive segmentation service.")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8765)
    parser.add_argument("--result-cap", type=int, default=DEFAULT_RESULT_CAP)
    parser.add_argument("--session-ttl", type=float,
                        default=DEFAULT_SESSION_TTL)
    parser.add_argument("--workers", type=int, default=None,
                        help="solver worker threads (default: OTSEG_THREADS "
                             "or CPU count)")
    args = parser.parse_args(argv)
    app = create_app(result_cap=args.result_cap, session_ttl=args.session_ttl,
                     workers=args.workers)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


if __name__ == "__main__":
    import sys

    sys.exit(main())
