"""FastAPI service exposing the inference engine.

Stateless endpoints mirror the CLI subcommands (event generation, one-shot
runs, three-way comparisons, FLOP and fractal reports, random model
generation). Stateful sessions hold a sliding window plus a retained
network state per stream, so clients can push events incrementally and read
low-latency outputs; sessions of different streams share the immutable
loaded models.
"""

from __future__ import annotations

import base64
import os
import threading
import uuid

import numpy as np
from fastapi import FastAPI, HTTPException

from evsparse import __version__
from evsparse.analysis import (
    FlopLedger,
    format_sig,
    fractal_to_csv,
    fractal_to_json,
    ledger_for_run,
    ledger_to_csv,
)
from evsparse.engine import EngineStateError, init_state, process_event, resync
from evsparse.events import (
    Event,
    EventFileError,
    EventStream,
    generate_events,
    load_frames_dir,
    parse_events,
    read_events,
    render_events,
    synthetic_frames,
)
from evsparse.model import (
    ModelFormatError,
    NetworkSpec,
    NetworkValidationError,
    load_model,
    load_model_bytes,
    model_bytes,
    random_layers,
    small_template,
    vgg13_template,
)
from evsparse.pipeline import (
    CompareResult,
    RunResult,
    compare_stream,
    dense_trace,
    fractal_for_stream,
    run_stream,
    sparse_trace_for_active,
)
from evsparse.representations import SlidingWindowState, build, channels_for_kind
from evsparse.sparse import compute_active_sites
from evsparse import schemas

__all__ = ["app", "create_app"]

_USER_ERRORS = (
    ValueError,
    EventFileError,
    ModelFormatError,
    NetworkValidationError,
    EngineStateError,
    FileNotFoundError,
)


def _resolve_model(req) -> NetworkSpec:
    if req.model_b64:
        return load_model_bytes(base64.b64decode(req.model_b64))
    if req.model_path:
        return load_model(req.model_path)
    raise ValueError("provide model_b64 or model_path")


def _resolve_stream(req) -> EventStream:
    if req.events_text is not None:
        return parse_events(req.events_text)
    if req.events_path:
        return read_events(req.events_path)
    raise ValueError("provide events_text or events_path")


def _sig(v: float) -> float:
    return float(format_sig(v))


def _ledger_rows(ledger: FlopLedger) -> list[schemas.LedgerRowModel]:
    return [schemas.LedgerRowModel(**vars(row)) for row in ledger.rows]


def _run_csv(res: RunResult) -> str:
    per_update = res.ledger.total / max(1, res.updates)
    head = [
        "mode,representation,window,batch,events_total,events_primed,updates,total_flops,flops_per_update",
        ",".join(
            [res.mode, res.representation]
            + [format_sig(v) for v in (res.window, res.batch, res.events_total,
                                       res.events_primed, res.updates, res.ledger.total, per_update)]
        ),
        "",
        ledger_to_csv(res.ledger).rstrip("\n"),
        "",
        "output_index,value",
    ]
    head.extend(f"{i},{format_sig(float(v))}" for i, v in enumerate(res.output))
    return "\n".join(head) + "\n"


def _run_report(res: RunResult) -> schemas.RunReport:
    return schemas.RunReport(
        mode=res.mode,
        representation=res.representation,
        window=res.window,
        batch=res.batch,
        events_total=res.events_total,
        events_primed=res.events_primed,
        updates=res.updates,
        total_flops=res.ledger.total,
        flops_per_update=_sig(res.ledger.total / max(1, res.updates)),
        rows=_ledger_rows(res.ledger),
        output=[_sig(float(v)) for v in res.output],
        csv=_run_csv(res),
    )


def _mode_summary(res: RunResult) -> schemas.ModeSummary:
    return schemas.ModeSummary(
        mode=res.mode,
        updates=res.updates,
        total_flops=res.ledger.total,
        flops_per_update=_sig(res.ledger.total / max(1, res.updates)),
        rows=_ledger_rows(res.ledger),
        output=[_sig(float(v)) for v in res.output],
    )


def _compare_csv(cmp: CompareResult) -> str:
    lines = [
        "representation,window,batch,events_total,events_primed,updates,max_abs_deviation,max_rel_deviation",
        ",".join(
            [cmp.representation]
            + [format_sig(v) for v in (cmp.window, cmp.batch, cmp.events_total, cmp.events_primed,
                                       cmp.updates, cmp.max_abs_dev, cmp.max_rel_dev)]
        ),
        "",
        "mode,updates,total_flops,flops_per_update",
    ]
    for res in (cmp.dense, cmp.sparse, cmp.async_):
        lines.append(
            f"{res.mode},{format_sig(res.updates)},{format_sig(res.ledger.total)},"
            f"{format_sig(res.ledger.total / max(1, res.updates))}"
        )
    lines.append("")
    for res in (cmp.dense, cmp.sparse, cmp.async_):
        lines.append(ledger_to_csv(res.ledger).rstrip("\n"))
        lines.append("")
    lines.append("output_mode,index,value")
    for res in (cmp.dense, cmp.sparse, cmp.async_):
        lines.extend(f"{res.mode},{i},{format_sig(float(v))}" for i, v in enumerate(res.output))
    lines.append("")
    lines.append("step,abs_deviation,rel_deviation")
    lines.extend(
        f"{i},{format_sig(a)},{format_sig(r)}"
        for i, (a, r) in enumerate(zip(cmp.step_abs_dev, cmp.step_rel_dev))
    )
    return "\n".join(lines) + "\n"


class _Session:
    def __init__(self, net: NetworkSpec, representation: str, window: int, dtype):
        self.id = uuid.uuid4().hex[:12]
        self.lock = threading.Lock()
        self.net = net
        self.representation = representation
        self.window = window
        self.dtype = dtype
        self.win = SlidingWindowState(representation, net.input_width, net.input_height, window, dtype)
        self.state = None
        self.events_seen = 0
        self.updates = 0
        self.async_flops = 0

    def initialize(self, priming: list[Event]) -> None:
        if priming:
            self.win.prime(priming)
            self.events_seen = len(self.win.buffer)
        self.state = init_state(self.net, self.win.representation, self.dtype)

    def push(self, events: list[Event], batch: int) -> np.ndarray:
        output = self.state.output.copy()
        chunks = [events] if batch <= 0 else [events[i : i + batch] for i in range(0, len(events), batch)]
        for chunk in chunks:
            if not chunk:
                continue
            update = self.win.push_batch(chunk) if len(chunk) > 1 else self.win.push_event(chunk[0])
            output = process_event(self.state, update)
            self.async_flops += ledger_for_run(self.state.last_trace, "async").total
            self.updates += 1
        self.events_seen += len(events)
        return output

    def info(self) -> schemas.SessionInfo:
        return schemas.SessionInfo(
            session_id=self.id,
            model_name=self.net.name,
            representation=self.representation,
            window=self.window,
            buffer_fill=len(self.win.buffer),
            events_seen=self.events_seen,
            updates=self.updates,
            async_flops=self.async_flops,
            output=[_sig(float(v)) for v in self.state.output],
        )


def create_app() -> FastAPI:
    app = FastAPI(title="evsparse", version=__version__,
                  description="Event-driven sparse convolutional inference service")
    sessions: dict[str, _Session] = {}
    registry_lock = threading.Lock()

    @app.exception_handler(Exception)
    async def _unhandled(request, exc):  # pragma: no cover - safety net
        raise exc

    def _get_session(session_id: str) -> _Session:
        with registry_lock:
            session = sessions.get(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail=f"no session {session_id}")
        return session

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.post("/gen-events", response_model=schemas.GenEventsResponse)
    def gen_events(req: schemas.GenEventsRequest):
        try:
            if req.synthetic:
                seq = synthetic_frames(req.synthetic, req.width, req.height, req.steps, req.dt_us)
            elif req.frames_dir:
                seq = load_frames_dir(req.frames_dir, req.dt_us)
            else:
                raise ValueError("provide synthetic or frames_dir")
            stream = generate_events(seq, req.threshold)
        except _USER_ERRORS as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return schemas.GenEventsResponse(
            width=stream.width, height=stream.height, count=len(stream), events_text=render_events(stream)
        )

    @app.post("/models/random", response_model=schemas.RandomModelResponse)
    def random_model_endpoint(req: schemas.RandomModelRequest):
        seed = req.seed if req.seed is not None else int(os.environ.get("ASYNC_SPARSE_SEED", "42"))
        try:
            if req.template == "vgg13":
                size = (req.width or 128, req.height or 96)
                template = vgg13_template(size, req.representation, req.fc_out, req.window)
            elif req.template == "small":
                template = small_template(req.blocks, req.width or 16, req.height or 16, req.base_channels,
                                          req.representation, req.fc_out, req.window)
            else:
                raise ValueError(f"unknown template {req.template!r}, choose vgg13 or small")
            rng = np.random.default_rng(seed)
            layers = random_layers(template, rng)
            raw = model_bytes(
                (template.input_width, template.input_height, channels_for_kind(template.representation)),
                layers, name=template.name, representation=template.representation, window=template.window,
            )
        except _USER_ERRORS as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return schemas.RandomModelResponse(
            name=template.name, seed=seed, layers=len(layers), model_b64=base64.b64encode(raw).decode("ascii")
        )

    @app.post("/run", response_model=schemas.RunReport)
    def run(req: schemas.RunRequest):
        try:
            net = _resolve_model(req)
            stream = _resolve_stream(req)
            result = run_stream(net, stream, req.mode, req.representation, req.window, req.batch)
        except _USER_ERRORS as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return _run_report(result)

    @app.post("/compare", response_model=schemas.CompareReport)
    def compare(req: schemas.CompareRequest):
        try:
            net = _resolve_model(req)
            stream = _resolve_stream(req)
            cmp = compare_stream(net, stream, req.representation, req.window, req.batch)
        except _USER_ERRORS as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return schemas.CompareReport(
            representation=cmp.representation,
            window=cmp.window,
            batch=cmp.batch,
            events_total=cmp.events_total,
            events_primed=cmp.events_primed,
            updates=cmp.updates,
            max_abs_deviation=_sig(cmp.max_abs_dev),
            max_rel_deviation=_sig(cmp.max_rel_dev),
            step_abs_deviation=[_sig(v) for v in cmp.step_abs_dev],
            step_rel_deviation=[_sig(v) for v in cmp.step_rel_dev],
            dense=_mode_summary(cmp.dense),
            sparse=_mode_summary(cmp.sparse),
            **{"async": _mode_summary(cmp.async_)},
            csv=_compare_csv(cmp),
        )

    @app.post("/flops", response_model=schemas.FlopsReport)
    def flops(req: schemas.FlopsRequest):
        try:
            net = _resolve_model(req)
            if req.mode == "dense":
                ledger = ledger_for_run(dense_trace(net), "dense")
                updates = 1
            elif req.mode == "sparse":
                stream = _resolve_stream(req)
                representation = req.representation or net.representation
                window = req.window or net.window
                rep = build(representation, stream.events[-window:], stream.width, stream.height)
                ledger = ledger_for_run(sparse_trace_for_active(net, compute_active_sites(rep)), "sparse")
                updates = 1
            elif req.mode == "async":
                stream = _resolve_stream(req)
                result = run_stream(net, stream, "async", req.representation, req.window, req.batch)
                ledger = result.ledger
                updates = result.updates
            else:
                raise ValueError(f"unknown mode {req.mode!r}")
        except _USER_ERRORS as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return schemas.FlopsReport(
            mode=req.mode, updates=updates, total_flops=ledger.total,
            rows=_ledger_rows(ledger), csv=ledger_to_csv(ledger),
        )

    @app.post("/fractal", response_model=schemas.FractalReport)
    def fractal(req: schemas.FractalRequest):
        try:
            stream = _resolve_stream(req)
            estimate = fractal_for_stream(stream, req.representation, req.window, req.radii, req.center)
        except _USER_ERRORS as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        data = fractal_to_json(estimate)
        return schemas.FractalReport(
            center=tuple(data["center"]), radii=data["radii"], patch_sides=data["patch_sides"],
            counts=data["counts"], slope=data["slope"], residual=data["residual"],
            csv=fractal_to_csv(estimate),
        )

    @app.post("/sessions", response_model=schemas.SessionInfo)
    def create_session(req: schemas.SessionCreateRequest):
        try:
            net = _resolve_model(req)
            representation = req.representation or net.representation
            if channels_for_kind(representation) != net.input_channels:
                raise ValueError(f"{representation} does not match network input channels")
            dtype = np.dtype(req.dtype)
            if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
                raise ValueError("dtype must be float32 or float64")
            session = _Session(net, representation, req.window or net.window, dtype)
            priming = parse_events(req.events_text).events if req.events_text else []
            session.initialize(priming)
        except _USER_ERRORS as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        with registry_lock:
            sessions[session.id] = session
        return session.info()

    @app.get("/sessions", response_model=list[schemas.SessionInfo])
    def list_sessions():
        with registry_lock:
            active = list(sessions.values())
        return [s.info() for s in active]

    @app.get("/sessions/{session_id}", response_model=schemas.SessionInfo)
    def session_info(session_id: str):
        return _get_session(session_id).info()

    @app.post("/sessions/{session_id}/events", response_model=schemas.SessionPushResponse)
    def push_events(session_id: str, req: schemas.SessionPushRequest):
        session = _get_session(session_id)
        try:
            if req.events is not None:
                events = [Event(*e) for e in req.events]
            elif req.events_text is not None:
                stream = parse_events(req.events_text)
                if (stream.width, stream.height) != (session.net.input_width, session.net.input_height):
                    raise ValueError("pushed stream resolution does not match the session model")
                events = stream.events
            else:
                raise ValueError("provide events or events_text")
            with session.lock:
                updates_before = session.updates
                flops_before = session.async_flops
                output = session.push(events, req.batch)
                return schemas.SessionPushResponse(
                    session_id=session.id,
                    events_pushed=len(events),
                    updates=session.updates - updates_before,
                    async_flops=session.async_flops - flops_before,
                    buffer_fill=len(session.win.buffer),
                    output=[_sig(float(v)) for v in output],
                )
        except _USER_ERRORS as exc:
            raise HTTPException(status_code=400, detail=str(exc))

    @app.post("/sessions/{session_id}/resync", response_model=schemas.SessionInfo)
    def resync_session(session_id: str):
        session = _get_session(session_id)
        with session.lock:
            resync(session.state)
        return session.info()

    @app.delete("/sessions/{session_id}")
    def delete_session(session_id: str):
        with registry_lock:
            if sessions.pop(session_id, None) is None:
                raise HTTPException(status_code=404, detail=f"no session {session_id}")
        return {"deleted": session_id}

    return app


app = create_app()
