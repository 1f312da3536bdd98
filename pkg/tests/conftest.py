"""Shared test helpers: random fixtures and independent oracles.

The oracles here deliberately avoid the code paths they check: dense layer
math plus explicit masking stands in for the sparse chain, and naive loops
stand in for the vectorized kernels.
"""

from __future__ import annotations

import numpy as np

from evsparse.events import Event, EventStream
from evsparse.representations import Representation
from evsparse.sparse import (
    LayerSpec,
    SparseFeatureMap,
    dense_conv,
    dense_fc,
    dense_maxpool,
    dense_relu,
)


def random_sites(rng, width, height, density=0.2):
    mask = rng.random((height, width)) < density
    ys, xs = np.nonzero(mask)
    return [(int(x), int(y)) for x, y in zip(xs, ys)]


def random_sparse_map(rng, width, height, channels, density=0.2, dtype=np.float32, nonneg=False):
    sites = random_sites(rng, width, height, density)
    fmap = SparseFeatureMap.from_sites(width, height, channels, sites, dtype)
    if sites:
        values = rng.normal(size=(len(sites), channels))
        if nonneg:
            values = np.abs(values)
        # keep every active site's vector nonzero
        values[np.all(values == 0, axis=1), 0] = 1.0
        fmap.pre[:] = values.astype(dtype)
    return fmap


def random_conv(rng, kernel, c_in, c_out, dtype=np.float32):
    bound = 1.0 / np.sqrt(kernel * kernel * c_in)
    weights = rng.uniform(-bound, bound, size=(kernel, kernel, c_in, c_out)).astype(dtype)
    bias = rng.uniform(-0.1, 0.1, size=c_out).astype(dtype)
    return LayerSpec.conv(kernel, c_in, c_out, weights, bias)


def random_fc(rng, in_features, out_features, dtype=np.float32):
    bound = 1.0 / np.sqrt(in_features)
    weights = rng.uniform(-bound, bound, size=(out_features, in_features)).astype(dtype)
    bias = rng.uniform(-0.1, 0.1, size=out_features).astype(dtype)
    return LayerSpec.fc(in_features, out_features, weights, bias)


def random_event_stream(rng, width, height, count, max_dt=50):
    """Random in-bounds events with non-decreasing timestamps."""
    t = 0
    events = []
    for _ in range(count):
        t += int(rng.integers(0, max_dt))
        events.append(
            Event(int(rng.integers(0, width)), int(rng.integers(0, height)), t, int(rng.choice([-1, 1])))
        )
    return EventStream(width, height, events)


def naive_dense_conv(values, layer):
    """Quadruple-loop same-padded convolution; the independent conv oracle."""
    h, w, c_in = values.shape
    k, r = layer.kernel, layer.kernel // 2
    out = np.zeros((h, w, layer.out_channels), dtype=values.dtype)
    for y in range(h):
        for x in range(w):
            for co in range(layer.out_channels):
                acc = layer.bias[co]
                for a in range(k):
                    for b in range(k):
                        yy, xx = y + a - r, x + b - r
                        if 0 <= yy < h and 0 <= xx < w:
                            for ci in range(c_in):
                                acc += layer.weights[a, b, ci, co] * values[yy, xx, ci]
                out[y, x, co] = acc
    return out


def masked_reference_forward(net, rep: Representation):
    """Equivalence oracle for the sparse chain: dense layer math with
    submanifold masking (inactive outputs forced to zero, pooled activity =
    any active input in the window). Valid wherever pooling inputs are
    non-negative, which holds for post-relu stacks."""
    values = rep.values.astype(np.float64)
    mask = rep.active_mask()
    layer_values = []
    output = None
    for layer in net.layers:
        if layer.kind == "conv":
            values = dense_conv(values, layer) * mask[..., None]
        elif layer.kind == "relu":
            values = dense_relu(values)
        elif layer.kind == "maxpool":
            k = layer.kernel
            values = dense_maxpool(values, k)
            mask = dense_maxpool(mask[..., None].astype(np.float64), k)[..., 0] > 0
            values = values * mask[..., None]
        elif layer.kind == "fc":
            output = dense_fc(values, layer)
            layer_values.append(output)
            break
        layer_values.append(values)
    return layer_values, output, mask


def direct_front_evaluation(f0, newly_active, newly_inactive, active, kernels, width, height):
    """Literal per-layer evaluation of the receptive-field / rulebook
    recurrences, independent of the engine's frontier shortcut.

    Per layer, every site of the previous receptive field (with newly
    inactive sites carried as generators of their vanishing contribution)
    emits a rule onto each in-bounds active target whose activity did not
    change; the next receptive field is the target set. Returns a list of
    (receptive_field_with_carried_inactive, rule_triple_set) per layer.
    """
    from evsparse.sparse import kernel_offsets

    newly_active = set(newly_active)
    newly_inactive = set(newly_inactive)
    changed = newly_active | newly_inactive
    generators = set(f0) | changed
    results = []
    for kernel in kernels:
        rules = set()
        targets = set()
        for i in generators:
            for dx, dy in kernel_offsets(kernel):
                j = (i[0] - dx, i[1] - dy)
                if not (0 <= j[0] < width and 0 <= j[1] < height):
                    continue
                if j not in active:
                    continue
                targets.add(j)
                if j not in changed:
                    rules.add(((dx, dy), i, j))
        effective = targets | newly_inactive
        results.append((effective, rules))
        generators = effective
    return results


def assert_allclose_rel(actual, expected, rtol, atol=1e-6, context=""):
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    scale = np.maximum(np.abs(actual), np.abs(expected))
    bad = np.abs(actual - expected) > rtol * scale + atol
    assert not np.any(bad), (
        f"{context}: {bad.sum()} elements exceed rtol={rtol} atol={atol}; "
        f"worst diff {np.abs(actual - expected).max()}"
    )


def state_matches_forward(state, fwd, rtol, atol, context=""):
    """Compare a retained engine state against a fresh sparse forward."""
    assert state.active_sets[0] == set(fwd.input_map.sites), f"{context}: input active sets differ"
    for idx, fmap in enumerate(state.maps):
        if fmap is None:
            continue
        ref = fwd.layer_maps[idx]
        assert set(fmap.sites) == set(ref.sites), f"{context}: layer {idx} active sets differ"
        assert_allclose_rel(fmap.to_dense("act"), ref.to_dense("act"), rtol, atol, f"{context}: layer {idx} act")
        assert_allclose_rel(fmap.to_dense("pre"), ref.to_dense("pre"), rtol, atol, f"{context}: layer {idx} pre")
    assert_allclose_rel(state.output, fwd.output, rtol, atol, f"{context}: output")
