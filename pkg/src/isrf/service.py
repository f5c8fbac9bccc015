"""HTTP session service: scene loading, frame rendering, stroke submission,
growth, undo, edits, and mask export.

State model: scenes are immutable once loaded; every session owns a stroke
history and a pending-edit stack.  Mutations on one session are serialized
by a non-blocking lock (a concurrent mutation gets 409); renders read
immutable snapshots and may run concurrently.  Nothing here writes to the
scene archive on disk.
"""

from __future__ import annotations

import io as stdio
import json
import os
import threading
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Query, Request
from fastapi.responses import JSONResponse, Response

from . import __version__
from .edit import EditOp, apply_edits
from .errors import InvalidInputError, IsrfError
from .grow import (
    BilateralParams,
    SegmentationSession,
    Stroke,
    apply_stroke,
    continue_growth,
    undo,
)
from .io import load_scene, write_image
from .render import Camera, FieldSource, MaskedSource, render_image

SCENE_ROOT_ENV = "ISRF_SCENE_ROOT"


class SessionHandle:
    def __init__(self, session_id: str, scene_id: str, session: SegmentationSession):
        self.session_id = session_id
        self.scene_id = scene_id
        self.session = session
        self.edits: list[EditOp] = []
        self.lock = threading.Lock()  # one in-flight mutation per session

    def stats(self, changed=0, iterations=0):
        mask = self.session.current_mask
        return {
            "voxels_added_or_removed": int(changed),
            "iterations": int(iterations),
            "mask_stats": {
                "popcount": mask.popcount(),
                "total": mask.geometry.node_count,
            },
        }


def _error(status: int, kind: str, message: str) -> JSONResponse:
    return JSONResponse({"kind": kind, "message": message}, status_code=status)


def _resolve_scene_path(path: str) -> Path:
    root = os.environ.get(SCENE_ROOT_ENV)
    p = Path(path)
    if root:
        p = (Path(root) / p).resolve() if not p.is_absolute() else p.resolve()
        if not str(p).startswith(str(Path(root).resolve()) + os.sep) and p != Path(root).resolve():
            raise InvalidInputError(f"scene path escapes {SCENE_ROOT_ENV}")
    return p


def create_app() -> FastAPI:
    app = FastAPI(title="isrf", version=__version__)
    scenes: dict[str, object] = {}
    sessions: dict[str, SessionHandle] = {}
    counters = {"scene": 0, "session": 0, "edit": 0}
    registry_lock = threading.Lock()
    app.state.scenes = scenes
    app.state.sessions = sessions

    @app.exception_handler(IsrfError)
    async def isrf_error_handler(request: Request, exc: IsrfError):
        return _error(422, exc.kind, str(exc))

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.post("/scenes")
    def post_scene(body: dict):
        if "path" not in body:
            raise InvalidInputError("body needs a 'path'")
        archive = load_scene(_resolve_scene_path(body["path"]))
        with registry_lock:
            counters["scene"] += 1
            scene_id = f"scene-{counters['scene']}"
            scenes[scene_id] = archive
        return {"scene_id": scene_id}

    @app.post("/sessions")
    def post_session(body: dict):
        scene_id = body.get("scene_id")
        if scene_id not in scenes:
            return _error(404, "unknown_scene", f"no scene {scene_id!r}")
        archive = scenes[scene_id]
        with registry_lock:
            counters["session"] += 1
            session_id = f"session-{counters['session']}"
            sessions[session_id] = SessionHandle(
                session_id, scene_id,
                SegmentationSession(archive.field, archive.decoder),
            )
        return {"session_id": session_id}

    def _get_session(session_id: str) -> SessionHandle | None:
        return sessions.get(session_id)

    @app.get("/scenes/{scene_id}/frame")
    def get_frame(scene_id: str, cam: str = Query(...), mode: str = "rgb",
                  width: int | None = None, height: int | None = None,
                  session: str | None = None):
        if scene_id not in scenes:
            return _error(404, "unknown_scene", f"no scene {scene_id!r}")
        archive = scenes[scene_id]
        camera = Camera.from_json(json.loads(cam))
        if width and height:
            camera = camera.scaled(width, height)
        handle = None
        if session is not None:
            handle = _get_session(session)
            if handle is None or handle.scene_id != scene_id:
                return _error(404, "unknown_session", f"no session {session!r} on this scene")
        if mode not in ("rgb", "feature", "depth", "alpha", "mask_overlay"):
            raise InvalidInputError(f"unknown frame mode {mode!r}")

        source = FieldSource(archive.field, archive.decoder)
        if handle is not None and handle.edits:
            source = apply_edits(archive.field, archive.decoder, handle.edits)

        if mode == "mask_overlay":
            rgb = render_image(None, None, camera, "rgb", source=source)
            if handle is not None and handle.session.current_mask.popcount() > 0:
                fg_alpha = render_image(
                    None, None, camera, "alpha",
                    source=MaskedSource(source, handle.session.current_mask, "fg"),
                )
                sel = fg_alpha > 0.1
                green = np.array([0.0, 1.0, 0.0])
                rgb[sel] = 0.5 * rgb[sel] + 0.5 * green
            img = rgb
        elif mode == "rgb":
            img = render_image(None, None, camera, "rgb", source=source)
        elif mode == "feature":
            feat = render_image(None, None, camera, "feature", source=source)
            img = _feature_preview(feat)
        elif mode == "depth":
            depth = render_image(None, None, camera, "depth", source=source)
            lo, hi = float(depth.min()), float(depth.max())
            img = (depth - lo) / (hi - lo) if hi > lo else np.zeros_like(depth)
        else:  # alpha
            img = render_image(None, None, camera, "alpha", source=source)
        return Response(content=_png_bytes(img), media_type="image/png")

    @app.post("/sessions/{session_id}/stroke")
    def post_stroke(session_id: str, body: dict):
        handle = _get_session(session_id)
        if handle is None:
            return _error(404, "unknown_session", f"no session {session_id!r}")
        if not handle.lock.acquire(blocking=False):
            return _error(409, "busy", "another mutation is in flight")
        try:
            stroke = Stroke(
                camera=Camera.from_json(body["camera"]),
                polyline=[tuple(p) for p in body["polyline"]],
                radius=int(body.get("radius", 4)),
                polarity=body.get("polarity", "positive"),
            )
            params = BilateralParams.from_json(body.get("params") or {})
            before = handle.session.current_mask
            apply_stroke(handle.session, stroke, params)
            after = handle.session.current_mask
            changed = int(np.count_nonzero(before.bits != after.bits))
            return handle.stats(changed, handle.session.history[-1].iterations)
        finally:
            handle.lock.release()

    @app.post("/sessions/{session_id}/grow")
    def post_grow(session_id: str, body: dict):
        handle = _get_session(session_id)
        if handle is None:
            return _error(404, "unknown_session", f"no session {session_id!r}")
        if not handle.lock.acquire(blocking=False):
            return _error(409, "busy", "another mutation is in flight")
        try:
            extra = int(body.get("extra_iters", 1))
            params = BilateralParams.from_json(body.get("params") or {})
            before = handle.session.current_mask
            _, iters = continue_growth(handle.session, extra, params)
            after = handle.session.current_mask
            changed = int(np.count_nonzero(before.bits != after.bits))
            return handle.stats(changed, iters)
        finally:
            handle.lock.release()

    @app.post("/sessions/{session_id}/undo")
    def post_undo(session_id: str):
        handle = _get_session(session_id)
        if handle is None:
            return _error(404, "unknown_session", f"no session {session_id!r}")
        if not handle.lock.acquire(blocking=False):
            return _error(409, "busy", "another mutation is in flight")
        try:
            before = handle.session.current_mask
            undo(handle.session)
            after = handle.session.current_mask
            return handle.stats(int(np.count_nonzero(before.bits != after.bits)), 0)
        finally:
            handle.lock.release()

    @app.get("/sessions/{session_id}/mask")
    def get_mask(session_id: str):
        handle = _get_session(session_id)
        if handle is None:
            return _error(404, "unknown_session", f"no session {session_id!r}")
        return Response(
            content=handle.session.current_mask.pack(),
            media_type="application/octet-stream",
        )

    @app.post("/sessions/{session_id}/edit")
    def post_edit(session_id: str, body: dict):
        handle = _get_session(session_id)
        if handle is None:
            return _error(404, "unknown_session", f"no session {session_id!r}")
        if not handle.lock.acquire(blocking=False):
            return _error(409, "busy", "another mutation is in flight")
        try:
            op = _edit_from_json(body, handle)
            handle.edits.append(op)
            with registry_lock:
                counters["edit"] += 1
                return {"edit_id": f"edit-{counters['edit']}"}
        finally:
            handle.lock.release()

    def _edit_from_json(body: dict, handle: SessionHandle) -> EditOp:
        kind = body.get("kind")
        mask = None
        if body.get("mask") == "current":
            mask = handle.session.current_mask
        elif body.get("mask"):
            archive = scenes[handle.scene_id]
            if body["mask"] not in archive.masks:
                raise InvalidInputError(f"scene has no mask {body['mask']!r}")
            mask = archive.masks[body["mask"]]
        return EditOp(
            kind=kind,
            mask=mask,
            t=np.asarray(body["t"], dtype=np.float64) if body.get("t") else None,
            color_matrix=np.asarray(body["color_matrix"], dtype=np.float64)
            if body.get("color_matrix") else None,
            color_offset=np.asarray(body["color_offset"], dtype=np.float64)
            if body.get("color_offset") else None,
        )

    _mount_frontend(app)
    return app


def _mount_frontend(app: FastAPI) -> None:
    """Serve the built browser client at /ui when it exists (dev convenience;
    the client only ever talks to the JSON/PNG API)."""
    frontend = Path(__file__).resolve().parents[2] / "frontend"
    if (frontend / "dist").is_dir() and (frontend / "index.html").is_file():
        from fastapi.staticfiles import StaticFiles

        app.mount("/ui", StaticFiles(directory=frontend, html=True), name="ui")


def _feature_preview(feat: np.ndarray) -> np.ndarray:
    take = feat[..., : min(3, feat.shape[-1])]
    if take.shape[-1] < 3:
        take = np.concatenate([take] * 3, axis=-1)[..., :3]
    lo, hi = take.min(), take.max()
    if hi - lo < 1e-12:
        return np.full(take.shape, 0.5)
    return (take - lo) / (hi - lo)


def _png_bytes(img: np.ndarray) -> bytes:
    from PIL import Image

    buf = stdio.BytesIO()
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    if data.ndim == 2:
        data = np.repeat(data[:, :, None], 3, axis=2)
    Image.fromarray(data, "RGB").save(buf, format="PNG")
    return buf.getvalue()


def serve(listen: str = "127.0.0.1:7860"):
    import uvicorn

    host, _, port = listen.rpartition(":")
    uvicorn.run(create_app(), host=host or "127.0.0.1", port=int(port))
