"""End-to-end stream pipelines: events -> representation -> engine -> ledger.

Run semantics follow the three execution modes:

* ``dense`` / ``sparse``: one synchronous forward over the representation of
  the final window (dense per-update cost is constant, so totals scale
  linearly with the number of updates);
* ``async``: the window is primed with the first ``window`` events, the
  remaining events drive per-event (or per-batch) incremental updates of the
  retained state, and per-update FLOP ledgers are accumulated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from evsparse.analysis import (
    DEFAULT_RADII,
    FlopLedger,
    FractalEstimate,
    active_centroid,
    fractal_dimension,
    ledger_for_run,
    merge_ledgers,
)
from evsparse.engine import init_state, process_event
from evsparse.events import EventStream
from evsparse.model import NetworkSpec
from evsparse.representations import SlidingWindowState, build, channels_for_kind
from evsparse.sparse import LayerTrace, build_rulebook, dense_forward, sparse_forward

__all__ = [
    "CompareResult",
    "RunResult",
    "compare_stream",
    "dense_trace",
    "fractal_for_stream",
    "run_stream",
    "sparse_trace_for_active",
]


@dataclass
class RunResult:
    mode: str
    representation: str
    window: int
    batch: int
    events_total: int
    events_primed: int
    updates: int
    ledger: FlopLedger
    output: np.ndarray


@dataclass
class CompareResult:
    representation: str
    window: int
    batch: int
    events_total: int
    events_primed: int
    updates: int
    dense: RunResult
    sparse: RunResult
    async_: RunResult
    step_abs_dev: list[float] = field(default_factory=list)
    step_rel_dev: list[float] = field(default_factory=list)

    @property
    def max_abs_dev(self) -> float:
        return max(self.step_abs_dev, default=0.0)

    @property
    def max_rel_dev(self) -> float:
        return max(self.step_rel_dev, default=0.0)


def dense_trace(net: NetworkSpec) -> list[LayerTrace]:
    """Analytic dense execution trace; needs no input data."""
    trace = []
    for i, (layer, _, _, in_c, out_w, out_h, out_c) in enumerate(net.chain()):
        if layer.kind == "fc":
            trace.append(LayerTrace(i, "fc", 1, 1, layer.in_channels, layer.out_channels))
        else:
            trace.append(LayerTrace(i, layer.kind, out_h, out_w, in_c, out_c, layer.kernel))
    return trace


def sparse_trace_for_active(net: NetworkSpec, active: set[tuple[int, int]]) -> list[LayerTrace]:
    """Synchronous-sparse execution trace from active-site geometry alone
    (rulebook sizes and pooled activity need no numeric values)."""
    trace = []
    w, h = net.input_width, net.input_height
    sites = set(active)
    rulebooks: dict[int, int] = {}
    for i, (layer, *_dims) in enumerate(net.chain()):
        if layer.kind == "conv":
            n_r = rulebooks.get(layer.kernel)
            if n_r is None:
                n_r = build_rulebook(sites, layer.kernel, w, h).n_rules
                rulebooks[layer.kernel] = n_r
            trace.append(LayerTrace(i, "conv", h, w, layer.in_channels, layer.out_channels,
                                    layer.kernel, n_r, len(sites)))
        elif layer.kind == "relu":
            c = trace[-1].c_out if trace else net.input_channels
            trace.append(LayerTrace(i, "relu", h, w, c, c, 0, 0, len(sites)))
        elif layer.kind == "maxpool":
            k = layer.kernel
            sites = {(x // k, y // k) for x, y in sites}
            w //= k
            h //= k
            rulebooks = {}
            c = trace[-1].c_out if trace else net.input_channels
            trace.append(LayerTrace(i, "maxpool", h, w, c, c, k, 0, len(sites)))
        else:
            trace.append(LayerTrace(i, "fc", 1, 1, layer.in_channels, layer.out_channels))
    return trace


def _check_stream(net: NetworkSpec, stream: EventStream, representation: str) -> None:
    if channels_for_kind(representation) != net.input_channels:
        raise ValueError(
            f"{representation} representation has {channels_for_kind(representation)} channels, "
            f"network expects {net.input_channels}"
        )
    if (stream.width, stream.height) != (net.input_width, net.input_height):
        raise ValueError(
            f"stream resolution {stream.width}x{stream.height} does not match network input "
            f"{net.input_width}x{net.input_height}"
        )


def _batches(events, batch: int):
    if batch <= 0:
        if events:
            yield events
        return
    for i in range(0, len(events), batch):
        yield events[i : i + batch]


def run_stream(
    net: NetworkSpec,
    stream: EventStream,
    mode: str,
    representation: str | None = None,
    window: int | None = None,
    batch: int = 1,
    dtype=np.float32,
) -> RunResult:
    representation = representation or net.representation
    window = window or net.window
    _check_stream(net, stream, representation)
    events = stream.events

    if mode in ("dense", "sparse"):
        rep = build(representation, events[-window:], stream.width, stream.height, dtype)
        fwd = dense_forward(net, rep) if mode == "dense" else sparse_forward(net, rep)
        return RunResult(mode, representation, window, batch, len(events), min(window, len(events)),
                         1, ledger_for_run(fwd.trace, mode), fwd.output)
    if mode != "async":
        raise ValueError(f"unknown mode {mode!r}")

    win = SlidingWindowState(representation, stream.width, stream.height, window, dtype)
    primed = events[: min(window, len(events))]
    win.prime(primed)
    state = init_state(net, win.representation, dtype)
    ledgers = []
    updates = 0
    output = state.output.copy()
    for chunk in _batches(events[len(primed) :], batch):
        update = win.push_batch(chunk) if len(chunk) > 1 else win.push_event(chunk[0])
        output = process_event(state, update)
        ledgers.append(ledger_for_run(state.last_trace, "async"))
        updates += 1
    ledger = merge_ledgers(ledgers) if ledgers else FlopLedger("async", updates=0)
    return RunResult("async", representation, window, batch, len(events), len(primed),
                     updates, ledger, output)


def compare_stream(
    net: NetworkSpec,
    stream: EventStream,
    representation: str | None = None,
    window: int | None = None,
    batch: int = 1,
    dtype=np.float32,
) -> CompareResult:
    """Run all three modes over one stream, checking the async output against
    a from-scratch sparse forward after every update."""
    representation = representation or net.representation
    window = window or net.window
    _check_stream(net, stream, representation)
    events = stream.events

    win = SlidingWindowState(representation, stream.width, stream.height, window, dtype)
    primed = events[: min(window, len(events))]
    win.prime(primed)
    state = init_state(net, win.representation, dtype)
    async_ledgers = []
    sparse_ledgers = []
    step_abs = []
    step_rel = []
    async_out = state.output.copy()
    sparse_out = sparse_forward(net, win.representation).output
    updates = 0
    for chunk in _batches(events[len(primed) :], batch):
        update = win.push_batch(chunk) if len(chunk) > 1 else win.push_event(chunk[0])
        async_out = process_event(state, update)
        async_ledgers.append(ledger_for_run(state.last_trace, "async"))
        ref = sparse_forward(net, win.representation)
        sparse_out = ref.output
        sparse_ledgers.append(ledger_for_run(ref.trace, "sparse"))
        abs_dev = float(np.max(np.abs(async_out - sparse_out)))
        scale = float(max(np.max(np.abs(sparse_out)), 1e-12))
        step_abs.append(abs_dev)
        step_rel.append(abs_dev / scale)
        updates += 1

    if not sparse_ledgers:
        ref = sparse_forward(net, win.representation)
        sparse_ledgers = [ledger_for_run(ref.trace, "sparse")]
    sparse_res = RunResult("sparse", representation, window, batch, len(events), len(primed),
                           max(updates, 1), merge_ledgers(sparse_ledgers), sparse_out)
    async_res = RunResult("async", representation, window, batch, len(events), len(primed), updates,
                          merge_ledgers(async_ledgers) if async_ledgers else FlopLedger("async", updates=0),
                          async_out)
    dense_fwd = dense_forward(net, build(representation, events[-window:], stream.width, stream.height, dtype))
    dense_ledger = merge_ledgers([ledger_for_run(dense_trace(net), "dense")] * max(updates, 1))
    dense_res = RunResult("dense", representation, window, batch, len(events), len(primed),
                          max(updates, 1), dense_ledger, dense_fwd.output)
    return CompareResult(representation, window, batch, len(events), len(primed), updates,
                         dense_res, sparse_res, async_res, step_abs, step_rel)


def fractal_for_stream(
    stream: EventStream,
    representation: str = "histogram",
    window: int = 25_000,
    radii=None,
    center: tuple[int, int] | None = None,
) -> FractalEstimate:
    """Fractal-dimension estimate of the active-site pattern of a stream's
    final window, centered at the active centroid unless given."""
    rep = build(representation, stream.events[-window:], stream.width, stream.height)
    if center is None:
        center = active_centroid(rep)
    if radii is None:
        limit = (min(stream.width, stream.height) - 1) // 2
        radii = [r for r in DEFAULT_RADII if r <= limit] or list(DEFAULT_RADII[:2])
    return fractal_dimension(rep, center, radii)
