"""Computation accounting and fractal-dimension estimation.

FLOP conventions: one multiply, one add, and one comparison (pooling, ReLU)
each count as a single operation. Per-layer costs:

====================  =================================  =========================
op                    dense                              sparse / async
====================  =================================  =========================
convolution           H_out * W_out * c_out*(2k^2c_in-1) N_r * c_in * (2c_out + 1)
max pooling           H_out * W_out * c * k^2            N_a * c * k^2
fully connected       2 * c_in * c_out                   2 * c_in * c_out
ReLU                  H_out * W_out * c                  N_a * c
====================  =================================  =========================

``N_r`` counts convolution rules (input/output site pairs actually used:
the full rulebook for synchronous sparse runs, the per-event incremental
rulebook plus newly-active recompute rules for asynchronous runs) and
``N_a`` counts the sites an operation actually touches. The asynchronous
fully connected update costs ``n(2c_out + 1)`` for ``n`` changed slots
(per-slot delta plus one multiply-accumulate per output).

The fractal dimension of an active-site pattern around a pixel is the
log-log slope of the active count within a centered square patch against
the patch side, fitted by ordinary least squares over the given radii.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from evsparse.representations import Representation
from evsparse.sparse import LayerTrace

__all__ = [
    "DEFAULT_RADII",
    "FlopLedger",
    "FractalEstimate",
    "LedgerRow",
    "active_centroid",
    "flops_async_fc",
    "flops_dense_conv",
    "flops_dense_pool",
    "flops_dense_relu",
    "flops_fc",
    "flops_sparse_conv",
    "flops_sparse_pool",
    "flops_sparse_relu",
    "format_sig",
    "fractal_dimension",
    "fractal_to_csv",
    "fractal_to_json",
    "ledger_for_run",
    "ledger_to_csv",
    "ledger_to_json",
    "merge_ledgers",
]

DEFAULT_RADII = (1, 2, 3, 4, 6, 8, 12, 16)


def format_sig(value, digits: int = 9) -> str:
    """Render a numeric report field with 9 significant digits."""
    return f"{value:.{digits}g}"


def flops_dense_conv(h_out: int, w_out: int, c_in: int, c_out: int, kernel: int) -> int:
    if min(h_out, w_out, c_in, c_out, kernel) <= 0:
        raise ValueError("dimensions must be positive")
    return h_out * w_out * c_out * (2 * kernel * kernel * c_in - 1)


def flops_sparse_conv(n_r: int, c_in: int, c_out: int) -> int:
    if n_r < 0:
        raise ValueError("rule count must be non-negative")
    return n_r * c_in * (2 * c_out + 1)


def flops_dense_pool(h_out: int, w_out: int, channels: int, kernel: int) -> int:
    return h_out * w_out * channels * kernel * kernel


def flops_sparse_pool(n_a: int, channels: int, kernel: int) -> int:
    return n_a * channels * kernel * kernel


def flops_fc(c_in: int, c_out: int) -> int:
    return 2 * c_in * c_out


def flops_async_fc(n_slots: int, c_out: int) -> int:
    return n_slots * (2 * c_out + 1)


def flops_dense_relu(h_out: int, w_out: int, channels: int) -> int:
    return h_out * w_out * channels


def flops_sparse_relu(n_a: int, channels: int) -> int:
    return n_a * channels


@dataclass
class LedgerRow:
    layer: int
    op: str
    mode: str
    h_out: int
    w_out: int
    c_in: int
    c_out: int
    kernel: int
    n_r: int
    n_a: int
    counted_flops: int
    analytic_flops: int


@dataclass
class FlopLedger:
    """Per-layer FLOP accounting of one run (or a sum of runs)."""

    mode: str
    rows: list[LedgerRow] = field(default_factory=list)
    updates: int = 1

    @property
    def total(self) -> int:
        return sum(r.counted_flops for r in self.rows)

    def layer_flops(self, layer: int) -> int:
        return sum(r.counted_flops for r in self.rows if r.layer == layer)


def _row_flops(trace: LayerTrace, mode: str) -> int:
    if trace.op == "conv":
        if mode == "dense":
            return flops_dense_conv(trace.h_out, trace.w_out, trace.c_in, trace.c_out, trace.kernel)
        return flops_sparse_conv(trace.n_r, trace.c_in, trace.c_out)
    if trace.op == "maxpool":
        if mode == "dense":
            return flops_dense_pool(trace.h_out, trace.w_out, trace.c_out, trace.kernel)
        return flops_sparse_pool(trace.n_a, trace.c_out, trace.kernel)
    if trace.op == "relu":
        if mode == "dense":
            return flops_dense_relu(trace.h_out, trace.w_out, trace.c_in)
        return flops_sparse_relu(trace.n_a, trace.c_in)
    if trace.op == "fc":
        if mode == "async":
            return flops_async_fc(trace.n_a, trace.c_out)
        return flops_fc(trace.c_in, trace.c_out)
    raise ValueError(f"unknown op {trace.op!r} in trace")


def ledger_for_run(trace: list[LayerTrace], mode: str) -> FlopLedger:
    """Evaluate the per-layer FLOP formulas on a measured execution trace.

    The counters are the formulas applied to measured rule/site counts, so
    ``counted_flops == analytic_flops`` on every row by construction; the
    instrumentation cross-checks live in the test suite.
    """
    if mode not in ("dense", "sparse", "async"):
        raise ValueError(f"unknown mode {mode!r}")
    ledger = FlopLedger(mode)
    for t in trace:
        flops = _row_flops(t, mode)
        ledger.rows.append(
            LedgerRow(t.index, t.op, mode, t.h_out, t.w_out, t.c_in, t.c_out, t.kernel,
                      t.n_r, t.n_a, flops, flops)
        )
    return ledger


def merge_ledgers(ledgers: list[FlopLedger]) -> FlopLedger:
    """Sum per-layer FLOPs across updates of the same network and mode."""
    if not ledgers:
        raise ValueError("no ledgers to merge")
    merged = FlopLedger(ledgers[0].mode, updates=0)
    by_layer: dict[tuple[int, str], LedgerRow] = {}
    for ledger in ledgers:
        if ledger.mode != merged.mode:
            raise ValueError("cannot merge ledgers of different modes")
        merged.updates += ledger.updates
        for row in ledger.rows:
            key = (row.layer, row.op)
            if key in by_layer:
                acc = by_layer[key]
                acc.n_r += row.n_r
                acc.n_a += row.n_a
                acc.counted_flops += row.counted_flops
                acc.analytic_flops += row.analytic_flops
            else:
                by_layer[key] = LedgerRow(**vars(row))
    merged.rows = [by_layer[k] for k in sorted(by_layer)]
    return merged


_LEDGER_COLUMNS = ("layer", "op", "mode", "h_out", "w_out", "c_in", "c_out",
                   "kernel", "n_r", "n_a", "counted_flops", "analytic_flops")


def ledger_to_csv(ledger: FlopLedger) -> str:
    lines = [",".join(_LEDGER_COLUMNS)]
    for row in ledger.rows:
        values = [getattr(row, col) for col in _LEDGER_COLUMNS]
        lines.append(",".join(v if isinstance(v, str) else format_sig(v) for v in values))
    lines.append(f"total,,{ledger.mode},,,,,,,,{format_sig(ledger.total)},{format_sig(ledger.total)}")
    return "\n".join(lines) + "\n"


def ledger_to_json(ledger: FlopLedger) -> dict:
    return {
        "mode": ledger.mode,
        "updates": ledger.updates,
        "total_flops": ledger.total,
        "rows": [vars(row).copy() for row in ledger.rows],
    }


@dataclass
class FractalEstimate:
    """Box-count growth of active sites around a center pixel with the
    fitted log-log slope."""

    center: tuple[int, int]
    radii: list[int]
    counts: list[int]
    slope: float
    residual: float


def _active_mask(source: Representation | np.ndarray) -> np.ndarray:
    if isinstance(source, Representation):
        return source.active_mask()
    arr = np.asarray(source)
    if arr.ndim == 3:
        return np.any(arr != 0, axis=2)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D active map, got shape {arr.shape}")
    return arr != 0


def active_centroid(source: Representation | np.ndarray) -> tuple[int, int]:
    """The active site nearest the active-mass centroid (contour-like data
    keeps its centroid in an inactive void); map center if nothing is active."""
    mask = _active_mask(source)
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return (mask.shape[1] // 2, mask.shape[0] // 2)
    cx, cy = float(xs.mean()), float(ys.mean())
    nearest = np.argmin((xs - cx) ** 2 + (ys - cy) ** 2)
    return (int(xs[nearest]), int(ys[nearest]))


def fractal_dimension(
    source: Representation | np.ndarray,
    center: tuple[int, int],
    radii=DEFAULT_RADII,
) -> FractalEstimate:
    """Fit the log-log growth rate of active-site counts over centered square
    patches (side ``2r + 1``, clipped at the image border).

    A slope of 2 means the pattern fills the plane; contour-like data grows
    slower than quadratically.
    """
    mask = _active_mask(source)
    height, width = mask.shape
    cx, cy = center
    if not (0 <= cx < width and 0 <= cy < height):
        raise ValueError(f"center {center} out of bounds for {width}x{height}")
    radii = sorted(set(int(r) for r in radii))
    if len(radii) < 2:
        raise ValueError("need at least 2 radii")
    if radii[0] < 1:
        raise ValueError("radii must be >= 1")

    counts = []
    for r in radii:
        window = mask[max(0, cy - r) : cy + r + 1, max(0, cx - r) : cx + r + 1]
        counts.append(int(window.sum()))

    usable = [(r, c) for r, c in zip(radii, counts) if c > 0]
    if len(usable) < 2:
        raise ValueError(f"fewer than 2 radii have active sites around {center}")
    log_side = np.log([2 * r + 1 for r, _ in usable])
    log_count = np.log([c for _, c in usable])
    (slope, intercept), res = np.polyfit(log_side, log_count, 1), 0.0
    fitted = slope * log_side + intercept
    res = float(np.sum((log_count - fitted) ** 2))
    return FractalEstimate((cx, cy), radii, counts, float(slope), res)


def fractal_to_csv(estimate: FractalEstimate) -> str:
    lines = ["radius,patch_side,active_count,center_x,center_y,slope,residual"]
    for r, c in zip(estimate.radii, estimate.counts):
        lines.append(
            ",".join(
                format_sig(v)
                for v in (r, 2 * r + 1, c, estimate.center[0], estimate.center[1],
                          estimate.slope, estimate.residual)
            )
        )
    return "\n".join(lines) + "\n"


def fractal_to_json(estimate: FractalEstimate) -> dict:
    return {
        "center": list(estimate.center),
        "radii": list(estimate.radii),
        "patch_sides": [2 * r + 1 for r in estimate.radii],
        "counts": list(estimate.counts),
        "slope": float(format_sig(estimate.slope)),
        "residual": float(format_sig(estimate.residual)),
    }


def json_report(data: dict) -> str:
    """Stable JSON rendering for report files."""
    return json.dumps(data, indent=2, sort_keys=True) + "\n"
