"""Recorder service: authoritative game dynamics behind a small HTTP API.

The browser client never simulates; it sends controls at a fixed tick and
renders the states this service returns. Sessions live in memory, one
authoritative trace each; committing writes a demonstration file in the
same format the training pipeline consumes.

Endpoints (JSON):
  GET    /api/levels                     -> {"levels": [ids]}
  GET    /api/levels/{id}                -> level file contents
  POST   /api/sessions {level_id}        -> {"session_id", "state", ...}
  POST   /api/sessions/{id}/tick {u, v}  -> {"t", "state", "predicates", "score", "done"}
  POST   /api/sessions/{id}/commit       -> {"path", "n_steps", "score"}
  DELETE /api/sessions/{id}
  WS     /api/sessions/{id}/stream       -> tick payloads over a socket

Controls are clamped server-side to the level bounds, so committed
demonstrations always satisfy them.
"""

from __future__ import annotations

import itertools
import json
import threading
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, WebSocket, WebSocketDisconnect
from fastapi.responses import FileResponse, JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .domain import (
    Control, Demonstration, NeedleState, TraceHistory, level_to_dict,
    load_level, save_demo, score, step,
)

API_VERSION = 1
TICK_RATE = 30  # client sampling rate, ticks per second


class TickRequest(BaseModel):
    u: float
    v: float


class SessionStart(BaseModel):
    level_id: str


class _Session:
    def __init__(self, sid, level):
        self.sid = sid
        self.level = level
        self.state = level.start_state
        self.history = TraceHistory(level)
        self.history.update(self.state.x, self.state.y)
        self.states = [[self.state.x, self.state.y, self.state.theta]]
        self.controls = []
        self.done = False
        self.lock = threading.Lock()

    def tick(self, u, v):
        if self.done:
            raise HTTPException(status_code=409, detail="session already finished")
        lvl = self.level
        u = float(np.clip(u, -lvl.u_max, lvl.u_max))
        v = float(np.clip(v, 0.0, lvl.v_max))
        self.controls.append([u, v])
        self.state = step(self.state, Control(u, v))
        self.history.update(self.state.x, self.state.y)
        self.states.append([self.state.x, self.state.y, self.state.theta])
        preds = self.history.predicates(self.state)
        if preds.at_exit:
            self.done = True
        return self.payload(preds)

    def payload(self, preds=None):
        if preds is None:
            preds = self.history.predicates(self.state)
        m = score(np.array(self.states), self.level)
        return {
            "t": len(self.controls),
            "state": {"x": self.state.x, "y": self.state.y, "theta": self.state.theta},
            "predicates": {
                "needle_in_gate": preds.needle_in_gate,
                "has_prev_gate": preds.has_prev_gate,
                "gate_closed": list(preds.gate_closed),
                "gate_open": list(preds.gate_open),
                "at_exit": preds.at_exit,
            },
            "score": m.as_dict(),
            "done": self.done,
        }

    def demonstration(self):
        if not self.controls:
            raise HTTPException(status_code=400, detail="empty session cannot be committed")
        controls = self.controls + [[0.0, 0.0]]
        return Demonstration(self.level.level_id, np.array(self.states), np.array(controls))


def create_app(levels_dir, out_dir, ui_dir=None) -> FastAPI:
    levels_dir = Path(levels_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    app = FastAPI(title="needleplan recorder", version=str(API_VERSION))
    sessions = {}
    counter = itertools.count(1)

    def level_ids():
        return sorted(p.stem for p in levels_dir.glob("*.json"))

    def get_level(level_id):
        path = levels_dir / f"{level_id}.json"
        if not path.exists():
            raise HTTPException(status_code=404, detail=f"unknown level {level_id!r}")
        return load_level(path)

    def get_session(sid) -> _Session:
        if sid not in sessions:
            raise HTTPException(status_code=404, detail=f"unknown session {sid!r}")
        return sessions[sid]

    @app.get("/api/levels")
    def list_levels():
        return {"version": API_VERSION, "levels": level_ids()}

    @app.get("/api/levels/{level_id}")
    def fetch_level(level_id: str):
        return level_to_dict(get_level(level_id))

    @app.post("/api/sessions")
    def start_session(req: SessionStart):
        level = get_level(req.level_id)
        sid = f"s{next(counter):04d}"
        sess = _Session(sid, level)
        sessions[sid] = sess
        out = sess.payload()
        out["session_id"] = sid
        out["tick_rate"] = TICK_RATE
        return out

    @app.post("/api/sessions/{sid}/tick")
    def tick(sid: str, req: TickRequest):
        sess = get_session(sid)
        with sess.lock:
            return sess.tick(req.u, req.v)

    @app.post("/api/sessions/{sid}/commit")
    def commit(sid: str):
        sess = get_session(sid)
        with sess.lock:
            demo = sess.demonstration()
            path = out_dir / f"demo_{sess.level.level_id}_{sid}.json"
            save_demo(demo, path)
            m = score(demo.states, sess.level)
        del sessions[sid]
        return {"path": str(path), "n_steps": demo.n_steps, "score": m.as_dict()}

    @app.delete("/api/sessions/{sid}")
    def discard(sid: str):
        get_session(sid)
        del sessions[sid]
        return JSONResponse({"discarded": sid})

    @app.websocket("/api/sessions/{sid}/stream")
    async def stream(ws: WebSocket, sid: str):
        await ws.accept()
        try:
            sess = sessions.get(sid)
            if sess is None:
                await ws.send_text(json.dumps({"error": f"unknown session {sid!r}"}))
                await ws.close()
                return
            while True:
                msg = await ws.receive_text()
                req = json.loads(msg)
                with sess.lock:
                    try:
                        out = sess.tick(float(req["u"]), float(req["v"]))
                    except HTTPException as e:
                        out = {"error": e.detail}
                await ws.send_text(json.dumps(out))
        except WebSocketDisconnect:
            pass  # incomplete sessions stay uncommitted

    if ui_dir is not None and Path(ui_dir).exists():
        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")
    else:
        @app.get("/")
        def index():
            return {"service": "needleplan recorder", "api": "/api/levels"}

    return app


def serve(levels_dir, out_dir, port, ui_dir=None, host="127.0.0.1"):
    import uvicorn

    app = create_app(levels_dir, out_dir, ui_dir=ui_dir)
    uvicorn.run(app, host=host, port=port, log_level="warning")
