"""Sparse feature maps, rulebooks, and the synchronous layer zoo.

Coordinate conventions used throughout:

* a site is an ``(x, y)`` pixel pair; dense arrays are indexed ``[y, x, c]``;
* a kernel offset ``(dx, dy)`` relates an input site ``i`` to an output site
  ``j`` by ``i - j = (dx, dy)``, i.e. output ``j`` reads input ``j + (dx, dy)``;
* conv weights have shape ``(k, k, c_in, c_out)`` indexed ``[dy + r, dx + r]``
  with ``r = k // 2``, so dense evaluation is a same-padded cross-correlation;
* fully-connected layers flatten feature maps in ``(y, x, c)`` order.

Submanifold sparse convolutions evaluate only at active sites (pixels with a
nonzero feature vector) and force inactive outputs to zero, so conv stacks at
one resolution share a single active set. Sparse max pooling takes the max
over active sites only; an all-negative active window therefore pools to a
negative value, unlike dense pooling over a zero-filled map.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from evsparse.model import NetworkSpec
    from evsparse.representations import Representation

__all__ = [
    "LayerSpec",
    "SparseFeatureMap",
    "Rulebook",
    "ForwardResult",
    "LayerTrace",
    "compute_active_sites",
    "build_rulebook",
    "ssc_forward",
    "relu_forward",
    "sparse_maxpool",
    "fc_forward",
    "sparse_forward",
    "dense_conv",
    "dense_maxpool",
    "dense_relu",
    "dense_fc",
    "dense_forward",
]

Site = tuple[int, int]


@dataclass
class LayerSpec:
    """One network layer: conv (same-padded, stride 1, odd kernel), maxpool
    (kernel == stride), relu, or fc."""

    kind: str
    kernel: int = 0
    in_channels: int = 0
    out_channels: int = 0
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None

    @classmethod
    def conv(cls, kernel: int, in_channels: int, out_channels: int, weights: np.ndarray, bias: np.ndarray) -> LayerSpec:
        return cls("conv", kernel, in_channels, out_channels, weights, bias)

    @classmethod
    def maxpool(cls, kernel: int) -> LayerSpec:
        return cls("maxpool", kernel)

    @classmethod
    def relu(cls) -> LayerSpec:
        return cls("relu")

    @classmethod
    def fc(cls, in_features: int, out_features: int, weights: np.ndarray, bias: np.ndarray) -> LayerSpec:
        return cls("fc", 0, in_features, out_features, weights, bias)

    def validate(self) -> None:
        if self.kind == "conv":
            if self.kernel < 1 or self.kernel % 2 == 0:
                raise ValueError(f"conv kernel must be odd and positive, got {self.kernel}")
            expected = (self.kernel, self.kernel, self.in_channels, self.out_channels)
            if self.weights is None or self.weights.shape != expected:
                got = None if self.weights is None else self.weights.shape
                raise ValueError(f"conv weights shape {got}, expected {expected}")
            if self.bias is None or self.bias.shape != (self.out_channels,):
                raise ValueError("conv bias shape mismatch")
        elif self.kind == "maxpool":
            if self.kernel < 2:
                raise ValueError(f"maxpool kernel must be >= 2, got {self.kernel}")
        elif self.kind == "fc":
            expected = (self.out_channels, self.in_channels)
            if self.weights is None or self.weights.shape != expected:
                got = None if self.weights is None else self.weights.shape
                raise ValueError(f"fc weights shape {got}, expected {expected}")
            if self.bias is None or self.bias.shape != (self.out_channels,):
                raise ValueError("fc bias shape mismatch")
        elif self.kind != "relu":
            raise ValueError(f"unknown layer kind {self.kind!r}")


class SparseFeatureMap:
    """Per-layer activations stored only at active sites.

    Site lookup is a hash map from coordinate to a row of a contiguous
    feature matrix. ``pre`` holds pre-activations and ``act`` the values
    after the layer's nonlinearity; for linear layers the two alias the
    same array. Queries at non-active sites return zeros.
    """

    def __init__(self, width: int, height: int, channels: int, dtype=np.float32):
        self.width = width
        self.height = height
        self.channels = channels
        self.dtype = np.dtype(dtype)
        self.index: dict[Site, int] = {}
        self.sites: list[Site] = []
        self.pre = np.zeros((0, channels), dtype=dtype)
        self.act = self.pre

    @classmethod
    def from_sites(cls, width: int, height: int, channels: int, sites: list[Site], dtype=np.float32) -> SparseFeatureMap:
        m = cls(width, height, channels, dtype)
        m.sites = list(sites)
        m.index = {s: i for i, s in enumerate(m.sites)}
        m.pre = np.zeros((len(m.sites), channels), dtype=dtype)
        m.act = m.pre
        return m

    @classmethod
    def from_representation(cls, rep: Representation, dtype=None) -> SparseFeatureMap:
        dtype = rep.values.dtype if dtype is None else dtype
        mask = rep.active_mask()
        ys, xs = np.nonzero(mask)
        sites = [(int(x), int(y)) for y, x in zip(ys, xs)]
        m = cls.from_sites(rep.width, rep.height, rep.channels, sites, dtype)
        if sites:
            m.pre[:] = rep.values[ys, xs].astype(dtype)
        return m

    @property
    def n_active(self) -> int:
        return len(self.sites)

    def activation_at(self, site: Site) -> np.ndarray:
        row = self.index.get(site)
        if row is None:
            return np.zeros(self.channels, dtype=self.dtype)
        return self.act[row].copy()

    def pre_activation_at(self, site: Site) -> np.ndarray:
        row = self.index.get(site)
        if row is None:
            return np.zeros(self.channels, dtype=self.dtype)
        return self.pre[row].copy()

    def to_dense(self, which: str = "act") -> np.ndarray:
        out = np.zeros((self.height, self.width, self.channels), dtype=self.dtype)
        if self.sites:
            arr = self.act if which == "act" else self.pre
            xs = np.fromiter((s[0] for s in self.sites), dtype=np.intp, count=len(self.sites))
            ys = np.fromiter((s[1] for s in self.sites), dtype=np.intp, count=len(self.sites))
            out[ys, xs] = arr
        return out

    def add_site(self, site: Site) -> int:
        """Append a zero row for a newly active site and return its row index."""
        if site in self.index:
            raise ValueError(f"site {site} already active")
        row = len(self.sites)
        self.sites.append(site)
        self.index[site] = row
        zero = np.zeros((1, self.channels), dtype=self.dtype)
        aliased = self.act is self.pre
        self.pre = np.concatenate([self.pre, zero])
        self.act = self.pre if aliased else np.concatenate([self.act, zero])
        return row

    def remove_site(self, site: Site) -> None:
        """Drop a site's row, swapping the last row into its place."""
        row = self.index.pop(site)
        last = len(self.sites) - 1
        aliased = self.act is self.pre
        if row != last:
            moved = self.sites[last]
            self.sites[row] = moved
            self.index[moved] = row
            self.pre[row] = self.pre[last]
            if not aliased:
                self.act[row] = self.act[last]
        self.sites.pop()
        self.pre = self.pre[:last]
        self.act = self.pre if aliased else self.act[:last]

    def clone(self) -> SparseFeatureMap:
        m = SparseFeatureMap(self.width, self.height, self.channels, self.dtype)
        m.sites = list(self.sites)
        m.index = dict(self.index)
        m.pre = self.pre.copy()
        m.act = m.pre if self.act is self.pre else self.act.copy()
        return m


def _sorted_sites(sites) -> list[Site]:
    return sorted(sites, key=lambda s: (s[1], s[0]))


def kernel_offsets(kernel: int) -> list[Site]:
    """Centered (dx, dy) offsets of an odd kernel, in row-major order."""
    r = kernel // 2
    return [(dx, dy) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]


class Rulebook:
    """Per kernel-offset lists of (input row, output row) pairs over a fixed
    site ordering, with ``input - output == offset`` and both sites active."""

    def __init__(self, kernel: int, sites: list[Site]):
        self.kernel = kernel
        self.sites = sites
        self.in_rows: dict[Site, np.ndarray] = {}
        self.out_rows: dict[Site, np.ndarray] = {}

    @property
    def offsets(self) -> list[Site]:
        return kernel_offsets(self.kernel)

    @property
    def n_rules(self) -> int:
        return sum(len(v) for v in self.in_rows.values())

    def pairs(self, offset: Site) -> list[tuple[Site, Site]]:
        """(input site, output site) pairs stored under one offset."""
        ins = self.in_rows.get(offset)
        if ins is None:
            return []
        outs = self.out_rows[offset]
        return [(self.sites[i], self.sites[j]) for i, j in zip(ins.tolist(), outs.tolist())]

    def all_pairs(self) -> set[tuple[Site, Site, Site]]:
        """Set of (offset, input site, output site) triples."""
        out: set[tuple[Site, Site, Site]] = set()
        for k in self.offsets:
            for i, j in self.pairs(k):
                out.add((k, i, j))
        return out


def compute_active_sites(rep: Representation) -> set[Site]:
    """Exactly the pixels whose channel vector is not all-zero."""
    ys, xs = np.nonzero(rep.active_mask())
    return {(int(x), int(y)) for x, y in zip(xs, ys)}


def _rulebook_for_order(sites: list[Site], kernel: int, width: int, height: int) -> Rulebook:
    rb = Rulebook(kernel, sites)
    n = len(sites)
    if n == 0:
        return rb
    coords = np.asarray(sites, dtype=np.intp)
    grid = np.full((height, width), -1, dtype=np.intp)
    grid[coords[:, 1], coords[:, 0]] = np.arange(n)
    out_all = np.arange(n)
    for dx, dy in kernel_offsets(kernel):
        ix = coords[:, 0] + dx
        iy = coords[:, 1] + dy
        valid = (ix >= 0) & (ix < width) & (iy >= 0) & (iy < height)
        rows = grid[iy[valid], ix[valid]]
        hit = rows >= 0
        if np.any(hit):
            rb.in_rows[(dx, dy)] = rows[hit]
            rb.out_rows[(dx, dy)] = out_all[valid][hit]
    return rb


def build_rulebook(active: set[Site] | list[Site], kernel: int, width: int, height: int) -> Rulebook:
    """Enumerate all in-bounds rules over an active set (canonical site order)."""
    if kernel % 2 == 0 or kernel < 1:
        raise ValueError(f"kernel must be odd and positive, got {kernel}")
    return _rulebook_for_order(_sorted_sites(active), kernel, width, height)


def rulebook_for_map(fmap: SparseFeatureMap, kernel: int) -> Rulebook:
    """Rulebook whose rows are aligned with ``fmap``'s storage order."""
    return _rulebook_for_order(fmap.sites, kernel, fmap.width, fmap.height)


def _check_rulebook(fmap: SparseFeatureMap, rb: Rulebook) -> None:
    if rb.sites is not fmap.sites and rb.sites != fmap.sites:
        raise ValueError("rulebook site order does not match the feature map")


def ssc_forward(fmap: SparseFeatureMap, layer: LayerSpec, rb: Rulebook) -> SparseFeatureMap:
    """Submanifold sparse convolution: evaluate only at active sites; the
    output shares the input's active set and inactive outputs stay zero."""
    if layer.kind != "conv":
        raise ValueError(f"expected conv layer, got {layer.kind}")
    if fmap.channels != layer.in_channels:
        raise ValueError(f"input has {fmap.channels} channels, layer expects {layer.in_channels}")
    if rb.kernel != layer.kernel:
        raise ValueError(f"rulebook kernel {rb.kernel} != layer kernel {layer.kernel}")
    _check_rulebook(fmap, rb)

    out = SparseFeatureMap(fmap.width, fmap.height, layer.out_channels, fmap.dtype)
    out.sites = fmap.sites
    out.index = fmap.index
    weights = layer.weights.astype(fmap.dtype, copy=False)
    bias = layer.bias.astype(fmap.dtype, copy=False)
    out.pre = np.tile(bias, (fmap.n_active, 1))
    r = layer.kernel // 2
    for offset in rb.offsets:
        in_rows = rb.in_rows.get(offset)
        if in_rows is None:
            continue
        dx, dy = offset
        w_k = weights[dy + r, dx + r]
        # Per offset the output rows are unique, so fancy-index += is safe.
        out.pre[rb.out_rows[offset]] += fmap.act[in_rows] @ w_k
    out.act = out.pre
    return out


def relu_forward(fmap: SparseFeatureMap) -> SparseFeatureMap:
    out = SparseFeatureMap(fmap.width, fmap.height, fmap.channels, fmap.dtype)
    out.sites = fmap.sites
    out.index = fmap.index
    out.pre = fmap.act.copy()
    out.act = np.maximum(out.pre, 0)
    return out


def sparse_maxpool(fmap: SparseFeatureMap, kernel: int) -> SparseFeatureMap:
    """Max pooling over active sites only. An output site is active iff its
    window contains at least one active input."""
    if fmap.width % kernel or fmap.height % kernel:
        raise ValueError(f"pool kernel {kernel} does not divide {fmap.width}x{fmap.height}")
    groups: dict[Site, list[int]] = {}
    for row, (x, y) in enumerate(fmap.sites):
        groups.setdefault((x // kernel, y // kernel), []).append(row)
    out = SparseFeatureMap.from_sites(
        fmap.width // kernel, fmap.height // kernel, fmap.channels, _sorted_sites(groups), fmap.dtype
    )
    for site, rows in groups.items():
        out.pre[out.index[site]] = fmap.act[rows].max(axis=0)
    return out


def fc_forward(fmap: SparseFeatureMap | np.ndarray, layer: LayerSpec) -> np.ndarray:
    """Fully-connected head over the (y, x, c)-flattened map; inactive sites
    contribute zeros."""
    if layer.kind != "fc":
        raise ValueError(f"expected fc layer, got {layer.kind}")
    dense = fmap.to_dense() if isinstance(fmap, SparseFeatureMap) else fmap
    flat = np.ascontiguousarray(dense).reshape(-1)
    if flat.shape[0] != layer.in_channels:
        raise ValueError(f"flattened input has {flat.shape[0]} features, layer expects {layer.in_channels}")
    weights = layer.weights.astype(flat.dtype, copy=False)
    bias = layer.bias.astype(flat.dtype, copy=False)
    return weights @ flat + bias


@dataclass
class LayerTrace:
    """Measured quantities of one executed layer, enough to evaluate the
    per-layer FLOP formulas."""

    index: int
    op: str
    h_out: int
    w_out: int
    c_in: int
    c_out: int
    kernel: int = 0
    n_r: int = 0
    n_a: int = 0


@dataclass
class ForwardResult:
    """Per-layer outputs of one forward pass plus its execution trace."""

    input_map: SparseFeatureMap | np.ndarray
    layer_maps: list
    output: np.ndarray
    trace: list[LayerTrace]
    rulebooks: dict[int, Rulebook] = field(default_factory=dict)


def sparse_forward(net: NetworkSpec, rep: Representation, dtype=None) -> ForwardResult:
    """Chain submanifold sparse layers over a representation.

    Rulebooks are rebuilt after every resolution change and shared by all
    conv layers of a stage that use the same kernel size.
    """
    current = SparseFeatureMap.from_representation(rep, dtype)
    result = ForwardResult(current, [], np.zeros(0), [])
    stage_rulebooks: dict[int, Rulebook] = {}
    for idx, layer in enumerate(net.layers):
        if layer.kind == "conv":
            rb = stage_rulebooks.get(layer.kernel)
            if rb is None:
                rb = rulebook_for_map(current, layer.kernel)
                stage_rulebooks[layer.kernel] = rb
            current = ssc_forward(current, layer, rb)
            result.rulebooks[idx] = rb
            result.trace.append(
                LayerTrace(idx, "conv", current.height, current.width, layer.in_channels,
                           layer.out_channels, layer.kernel, rb.n_rules, current.n_active)
            )
        elif layer.kind == "relu":
            current = relu_forward(current)
            result.trace.append(
                LayerTrace(idx, "relu", current.height, current.width, current.channels,
                           current.channels, 0, 0, current.n_active)
            )
        elif layer.kind == "maxpool":
            current = sparse_maxpool(current, layer.kernel)
            stage_rulebooks = {}
            result.trace.append(
                LayerTrace(idx, "maxpool", current.height, current.width, current.channels,
                           current.channels, layer.kernel, 0, current.n_active)
            )
        elif layer.kind == "fc":
            result.output = fc_forward(current, layer)
            result.trace.append(
                LayerTrace(idx, "fc", 1, 1, layer.in_channels, layer.out_channels)
            )
            result.layer_maps.append(result.output)
            break
        else:
            raise ValueError(f"unknown layer kind {layer.kind!r}")
        result.layer_maps.append(current)
    return result


def dense_conv(values: np.ndarray, layer: LayerSpec) -> np.ndarray:
    """Textbook same-padded stride-1 convolution (cross-correlation)."""
    h, w, c_in = values.shape
    if c_in != layer.in_channels:
        raise ValueError(f"input has {c_in} channels, layer expects {layer.in_channels}")
    k = layer.kernel
    r = k // 2
    padded = np.pad(values, ((r, r), (r, r), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(0, 1))
    # windows[y, x, c, a, b] = input[y + a - r, x + b - r, c]
    cols = windows.transpose(0, 1, 3, 4, 2).reshape(h * w, k * k * c_in)
    w_mat = layer.weights.astype(values.dtype, copy=False).reshape(k * k * c_in, layer.out_channels)
    out = cols @ w_mat + layer.bias.astype(values.dtype, copy=False)
    return out.reshape(h, w, layer.out_channels)


def dense_maxpool(values: np.ndarray, kernel: int) -> np.ndarray:
    h, w, c = values.shape
    if h % kernel or w % kernel:
        raise ValueError(f"pool kernel {kernel} does not divide {w}x{h}")
    return values.reshape(h // kernel, kernel, w // kernel, kernel, c).max(axis=(1, 3))


def dense_relu(values: np.ndarray) -> np.ndarray:
    return np.maximum(values, 0)


def dense_fc(values: np.ndarray, layer: LayerSpec) -> np.ndarray:
    flat = np.ascontiguousarray(values).reshape(-1)
    if flat.shape[0] != layer.in_channels:
        raise ValueError(f"flattened input has {flat.shape[0]} features, layer expects {layer.in_channels}")
    return layer.weights.astype(flat.dtype, copy=False) @ flat + layer.bias.astype(flat.dtype, copy=False)


def dense_forward(net: NetworkSpec, rep: Representation, dtype=None) -> ForwardResult:
    """Textbook dense inference over the zero-filled representation; the
    "standard convolution" comparison mode."""
    current = rep.values.astype(dtype) if dtype is not None else rep.values.copy()
    result = ForwardResult(current, [], np.zeros(0), [])
    for idx, layer in enumerate(net.layers):
        if layer.kind == "conv":
            current = dense_conv(current, layer)
            result.trace.append(
                LayerTrace(idx, "conv", current.shape[0], current.shape[1], layer.in_channels,
                           layer.out_channels, layer.kernel)
            )
        elif layer.kind == "relu":
            current = dense_relu(current)
            result.trace.append(
                LayerTrace(idx, "relu", current.shape[0], current.shape[1], current.shape[2], current.shape[2])
            )
        elif layer.kind == "maxpool":
            current = dense_maxpool(current, layer.kernel)
            result.trace.append(
                LayerTrace(idx, "maxpool", current.shape[0], current.shape[1], current.shape[2],
                           current.shape[2], layer.kernel)
            )
        elif layer.kind == "fc":
            result.output = dense_fc(current, layer)
            result.trace.append(LayerTrace(idx, "fc", 1, 1, layer.in_channels, layer.out_channels))
            result.layer_maps.append(result.output)
            break
        else:
            raise ValueError(f"unknown layer kind {layer.kind!r}")
        result.layer_maps.append(current)
    return result
