"""Asynchronous per-event updates of a retained sparse network state.

Instead of recomputing every layer when an event arrives, the engine keeps
all layer activations and propagates only the change: a receptive field of
touched sites grows layer by layer together with an incremental rulebook,
surviving-active outputs receive weighted increments of their inputs'
deltas, newly active sites are recomputed in full, newly inactive sites are
zeroed, pooling stages recompute exactly the windows the front touches, and
the fully connected head adds the weighted delta of the changed slots.
After every committed update the state equals a from-scratch sparse forward
of the current input (up to float accumulation order; ``resync`` restores
bit-fresh values).

Incremental receptive fields and rulebooks are built from the frontier set
only: at each conv layer with an unchanged kernel size, rules already
gathered at earlier layers remain valid, so only sites that newly entered
the receptive field contribute new rules. Sites whose activity changed are
carried along the whole stack: newly inactive sites keep propagating their
vanishing contribution as rule inputs but never receive rules as outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from evsparse.representations import Representation, SparseUpdate
from evsparse.sparse import LayerTrace, SparseFeatureMap, kernel_offsets, sparse_forward

__all__ = [
    "EngineStateError",
    "NetworkState",
    "UpdateFront",
    "init_state",
    "propagate_front",
    "update_conv_layer",
    "update_relu_layer",
    "update_pool_layer",
    "update_fc",
    "process_event",
    "resync",
]

Site = tuple[int, int]


class EngineStateError(RuntimeError):
    """Internal consistency failure; the state may be half-updated and should
    be rebuilt with ``resync``."""


@dataclass
class UpdateFront:
    """Receptive-field propagation state at one resolution.

    ``sites`` is the effective receptive field (including carried
    newly-inactive sites), ``frontier`` the not-yet-propagated boundary,
    ``rules`` the cumulative incremental rulebook keyed by kernel offset.
    """

    sites: set[Site]
    frontier: set[Site]
    rules: dict[Site, list[tuple[Site, Site]]]
    newly_active: set[Site]
    newly_inactive: set[Site]
    last_kernel: int | None = None

    @classmethod
    def initial(cls, touched, newly_active=(), newly_inactive=()) -> UpdateFront:
        sites = set(touched) | set(newly_active) | set(newly_inactive)
        return cls(
            sites=sites,
            frontier=set(sites),
            rules={},
            newly_active=set(newly_active),
            newly_inactive=set(newly_inactive),
        )

    @property
    def rule_count(self) -> int:
        return sum(len(v) for v in self.rules.values())

    def rule_pairs(self) -> set[tuple[Site, Site, Site]]:
        """Set of (offset, input site, output site) triples."""
        return {(k, i, j) for k, pairs in self.rules.items() for i, j in pairs}


def propagate_front(front: UpdateFront, kernel: int, active: set[Site], width: int, height: int) -> UpdateFront:
    """Expand the receptive field and incremental rulebook to the next conv
    layer.

    A rule (i, i - k) is added for every reachable output that is active and
    did not change activity this step; outputs that merely became reachable
    join the receptive field. With an unchanged kernel size only frontier
    sites need to be considered; a kernel change forces re-evaluation from
    the whole receptive field, which yields the same sets as the incremental
    path does for homogeneous stacks.
    """
    changed = front.newly_active | front.newly_inactive
    if front.rules and front.last_kernel is not None and front.last_kernel != kernel:
        generators: set[Site] = front.sites
        rules: dict[Site, list[tuple[Site, Site]]] = {}
    else:
        generators = front.frontier
        rules = {k: list(v) for k, v in front.rules.items()}
    sites = set(front.sites)
    new_sites: set[Site] = set()
    for i in generators:
        ix, iy = i
        for dx, dy in kernel_offsets(kernel):
            j = (ix - dx, iy - dy)
            if not (0 <= j[0] < width and 0 <= j[1] < height):
                continue
            if j not in active:
                continue
            if j not in changed:
                rules.setdefault((dx, dy), []).append((i, j))
            if j not in sites:
                new_sites.add(j)
    sites |= new_sites
    return UpdateFront(
        sites=sites,
        frontier=new_sites,
        rules=rules,
        newly_active=set(front.newly_active),
        newly_inactive=set(front.newly_inactive),
        last_kernel=kernel,
    )


@dataclass
class _Level:
    width: int
    height: int


class NetworkState:
    """All retained data of one asynchronously updated stream.

    Single-owner mutable; distinct streams may run in parallel on the same
    immutable NetworkSpec.
    """

    def __init__(self, net, dtype=np.float32):
        self.net = net
        self.dtype = np.dtype(dtype)
        self.levels: list[_Level] = []
        self.layer_level: list[int] = []
        w, h = net.input_width, net.input_height
        self.levels.append(_Level(w, h))
        for layer in net.layers:
            self.layer_level.append(len(self.levels) - 1)
            if layer.kind == "maxpool":
                w //= layer.kernel
                h //= layer.kernel
                self.levels.append(_Level(w, h))
        self.input_values = np.zeros((net.input_height, net.input_width, net.input_channels), dtype=dtype)
        self.active_sets: list[set[Site]] = [set() for _ in self.levels]
        self.maps: list[SparseFeatureMap | None] = [None] * len(net.layers)
        self.output = np.zeros(net.layers[-1].out_channels, dtype=dtype)
        # Persistent synchronous rulebooks, one per (resolution level, kernel),
        # patched in place as sites activate and deactivate.
        self.rulebooks: dict[tuple[int, int], dict[Site, set[tuple[Site, Site]]]] = {}
        self.last_trace: list[LayerTrace] = []
        self.events_processed = 0

    def input_activation(self, site: Site) -> np.ndarray:
        return self.input_values[site[1], site[0]]

    def sync_rule_count(self, level: int, kernel: int) -> int:
        per_offset = self.rulebooks.get((level, kernel), {})
        return sum(len(v) for v in per_offset.values())

    def _accessor(self, layer_idx: int):
        """Current activation lookup for the input of a layer."""
        if layer_idx == 0:
            return lambda s: self.input_values[s[1], s[0]]
        fmap = self.maps[layer_idx - 1]
        if fmap is None:
            raise EngineStateError(f"layer {layer_idx} has no retained input map")
        return fmap.activation_at


def init_state(net, rep: Representation, dtype=None) -> NetworkState:
    """Materialize the retained state with one synchronous sparse forward."""
    if (rep.width, rep.height, rep.channels) != (net.input_width, net.input_height, net.input_channels):
        raise ValueError(
            f"representation {rep.width}x{rep.height}x{rep.channels} does not match network input "
            f"{net.input_width}x{net.input_height}x{net.input_channels}"
        )
    dtype = rep.values.dtype if dtype is None else np.dtype(dtype)
    state = NetworkState(net, dtype)
    fwd = sparse_forward(net, rep, dtype)
    state.input_values = rep.values.astype(dtype).copy()
    state.active_sets[0] = set(fwd.input_map.sites)
    level = 0
    for idx, layer in enumerate(net.layers):
        obj = fwd.layer_maps[idx] if idx < len(fwd.layer_maps) else None
        state.maps[idx] = obj.clone() if isinstance(obj, SparseFeatureMap) else None
        if layer.kind == "maxpool":
            level += 1
            state.active_sets[level] = set(fwd.layer_maps[idx].sites)
    state.output = fwd.output.astype(dtype).copy()
    for idx, rb in fwd.rulebooks.items():
        key = (state.layer_level[idx], net.layers[idx].kernel)
        if key not in state.rulebooks:
            state.rulebooks[key] = {
                offset: set(rb.pairs(offset)) for offset in rb.offsets if offset in rb.in_rows
            }
    return state


def _patch_rulebooks(state: NetworkState, level: int, added, removed) -> None:
    """Keep persistent rulebooks consistent with the new active set."""
    if not added and not removed:
        return
    active = state.active_sets[level]
    lvl = state.levels[level]
    for (rb_level, kernel), per_offset in state.rulebooks.items():
        if rb_level != level:
            continue
        offsets = kernel_offsets(kernel)
        for v in removed:
            vx, vy = v
            for off in offsets:
                rules = per_offset.get(off)
                if not rules:
                    continue
                rules.discard(((vx + off[0], vy + off[1]), v))
                rules.discard((v, (vx - off[0], vy - off[1])))
        for u in added:
            ux, uy = u
            for off in offsets:
                i = (ux + off[0], uy + off[1])
                if 0 <= i[0] < lvl.width and 0 <= i[1] < lvl.height and i in active:
                    per_offset.setdefault(off, set()).add((i, u))
                j = (ux - off[0], uy - off[1])
                if 0 <= j[0] < lvl.width and 0 <= j[1] < lvl.height and j in active:
                    per_offset.setdefault(off, set()).add((u, j))


def _delta_of(site: Site, current, old: dict[Site, np.ndarray], cache: dict[Site, np.ndarray], layer_idx: int):
    d = cache.get(site)
    if d is None:
        prev = old.get(site)
        if prev is None:
            raise EngineStateError(f"missing previous-value cache entry for {site} feeding layer {layer_idx}")
        d = current(site) - prev
        cache[site] = d
    return d


def update_conv_layer(state: NetworkState, front: UpdateFront, layer_idx: int, input_old: dict[Site, np.ndarray]):
    """Apply one event's change to a conv layer.

    Surviving-active outputs accumulate rule-weighted input deltas into
    their retained pre-activations; newly active outputs are recomputed in
    full over their active neighborhood; newly inactive outputs are cleared.
    Returns (snapshot of this layer's previous activations at every touched
    site, number of rules used).
    """
    layer = state.net.layers[layer_idx]
    fmap = state.maps[layer_idx]
    current = state._accessor(layer_idx)
    weights = layer.weights.astype(state.dtype, copy=False)
    r = layer.kernel // 2
    out_old: dict[Site, np.ndarray] = {}
    delta_cache: dict[Site, np.ndarray] = {}
    n_rules = 0

    for offset, pairs in front.rules.items():
        if not pairs:
            continue
        w_k = weights[offset[1] + r, offset[0] + r]
        deltas = np.empty((len(pairs), layer.in_channels), dtype=state.dtype)
        rows = np.empty(len(pairs), dtype=np.intp)
        for n, (i, j) in enumerate(pairs):
            deltas[n] = _delta_of(i, current, input_old, delta_cache, layer_idx)
            row = fmap.index.get(j)
            if row is None:
                raise EngineStateError(f"rule output {j} is not active at layer {layer_idx}")
            rows[n] = row
            if j not in out_old:
                out_old[j] = fmap.act[row].copy()
        # Output rows are unique per offset, so fancy-index += is safe.
        fmap.pre[rows] += deltas @ w_k
        n_rules += len(pairs)

    active = state.active_sets[state.layer_level[layer_idx]]
    lvl = state.levels[state.layer_level[layer_idx]]
    bias = layer.bias.astype(state.dtype, copy=False)
    for u in sorted(front.newly_active, key=lambda s: (s[1], s[0])):
        out_old.setdefault(u, np.zeros(layer.out_channels, dtype=state.dtype))
        if u in fmap.index:
            raise EngineStateError(f"newly active site {u} already stored at layer {layer_idx}")
        row = fmap.add_site(u)
        value = bias.copy()
        for dx, dy in kernel_offsets(layer.kernel):
            i = (u[0] + dx, u[1] + dy)
            if 0 <= i[0] < lvl.width and 0 <= i[1] < lvl.height and i in active:
                value += current(i) @ weights[dy + r, dx + r]
                n_rules += 1
        fmap.pre[row] = value

    for v in sorted(front.newly_inactive, key=lambda s: (s[1], s[0])):
        row = fmap.index.get(v)
        if row is not None:
            out_old.setdefault(v, fmap.act[row].copy())
            fmap.remove_site(v)
        else:
            out_old.setdefault(v, np.zeros(layer.out_channels, dtype=state.dtype))
    return out_old, n_rules


def update_relu_layer(state: NetworkState, front: UpdateFront, layer_idx: int, input_old: dict[Site, np.ndarray]):
    """Recompute the nonlinearity at exactly the touched sites."""
    fmap = state.maps[layer_idx]
    current = state._accessor(layer_idx)
    changed = front.newly_active | front.newly_inactive
    out_old: dict[Site, np.ndarray] = {}
    n_processed = 0
    for s in input_old:
        if s in changed:
            continue
        row = fmap.index.get(s)
        if row is None:
            raise EngineStateError(f"surviving site {s} is not stored at layer {layer_idx}")
        out_old[s] = fmap.act[row].copy()
        pre = current(s)
        fmap.pre[row] = pre
        fmap.act[row] = np.maximum(pre, 0)
        n_processed += 1
    for u in sorted(front.newly_active, key=lambda s: (s[1], s[0])):
        out_old.setdefault(u, np.zeros(fmap.channels, dtype=state.dtype))
        row = fmap.add_site(u)
        pre = current(u)
        fmap.pre[row] = pre
        fmap.act[row] = np.maximum(pre, 0)
        n_processed += 1
    for v in sorted(front.newly_inactive, key=lambda s: (s[1], s[0])):
        row = fmap.index.get(v)
        if row is not None:
            out_old.setdefault(v, fmap.act[row].copy())
            fmap.remove_site(v)
        else:
            out_old.setdefault(v, np.zeros(fmap.channels, dtype=state.dtype))
    return out_old, n_processed


def update_pool_layer(state: NetworkState, front: UpdateFront, layer_idx: int, input_old: dict[Site, np.ndarray]):
    """Recompute every pooling window the front touches and derive the
    downscaled front.

    A window whose recomputed value and activity are unchanged stops the
    propagation. Activity transitions update the pooled active set and patch
    the persistent rulebooks of the following stage.
    """
    layer = state.net.layers[layer_idx]
    fmap = state.maps[layer_idx]
    current = state._accessor(layer_idx)
    k = layer.kernel
    in_level = state.layer_level[layer_idx]
    out_level = in_level + 1
    in_active = state.active_sets[in_level]

    touched = set(input_old) | front.newly_active | front.newly_inactive
    windows = sorted({(x // k, y // k) for x, y in touched}, key=lambda s: (s[1], s[0]))
    out_old: dict[Site, np.ndarray] = {}
    changed_sites: set[Site] = set()
    new_active: set[Site] = set()
    new_inactive: set[Site] = set()
    n_recomputed = 0
    for wsite in windows:
        wx, wy = wsite
        members = []
        for yy in range(wy * k, wy * k + k):
            for xx in range(wx * k, wx * k + k):
                if (xx, yy) in in_active:
                    members.append(current((xx, yy)))
        row = fmap.index.get(wsite)
        if members:
            n_recomputed += 1
            new_val = np.maximum.reduce(members) if len(members) > 1 else np.asarray(members[0])
            if row is not None:
                if np.array_equal(fmap.act[row], new_val):
                    continue
                out_old[wsite] = fmap.act[row].copy()
                fmap.pre[row] = new_val
                changed_sites.add(wsite)
            else:
                out_old[wsite] = np.zeros(fmap.channels, dtype=state.dtype)
                row = fmap.add_site(wsite)
                fmap.pre[row] = new_val
                new_active.add(wsite)
        elif row is not None:
            out_old[wsite] = fmap.act[row].copy()
            fmap.remove_site(wsite)
            new_inactive.add(wsite)

    state.active_sets[out_level] |= new_active
    state.active_sets[out_level] -= new_inactive
    _patch_rulebooks(state, out_level, new_active, new_inactive)
    new_front = UpdateFront.initial(changed_sites, new_active, new_inactive)
    return out_old, new_front, n_recomputed


def update_fc(state: NetworkState, input_old: dict[Site, np.ndarray]):
    """Add the weighted delta of every changed flattened slot to the retained
    output vector. Returns the number of changed slots."""
    layer = state.net.layers[-1]
    current = state._accessor(len(state.net.layers) - 1)
    weights = layer.weights.astype(state.dtype, copy=False)
    lvl = state.levels[-1]
    channels = layer.in_channels // (lvl.width * lvl.height)
    n_slots = 0
    if input_old:
        total = np.zeros(layer.out_channels, dtype=state.dtype)
        for s in sorted(input_old, key=lambda t: (t[1], t[0])):
            delta = current(s) - input_old[s]
            base = (s[1] * lvl.width + s[0]) * channels
            total += weights[:, base : base + channels] @ delta
            n_slots += channels
        state.output += total
    return n_slots


def _apply_input_update(state: NetworkState, update: SparseUpdate) -> dict[Site, np.ndarray]:
    """Apply a representation delta to the retained input layer, validating
    it against the stored values. Returns old input values per touched site."""
    net = state.net
    active0 = state.active_sets[0]
    input_old: dict[Site, np.ndarray] = {}
    for site, delta in update.sites:
        x, y = site
        if not (0 <= x < net.input_width and 0 <= y < net.input_height):
            raise EngineStateError(f"update site {site} out of bounds")
        if site in input_old:
            raise EngineStateError(f"duplicate update site {site}")
        if delta.shape != (net.input_channels,):
            raise EngineStateError(f"update at {site} has {delta.shape} channels")
        old = state.input_values[y, x].copy()
        input_old[site] = old
        state.input_values[y, x] = old + delta.astype(state.dtype, copy=False)

    newly_active = set(update.newly_active)
    newly_inactive = set(update.newly_inactive)
    for site in newly_active:
        if site not in input_old or np.any(input_old[site] != 0):
            raise EngineStateError(f"newly active site {site} had a nonzero stored value")
        if site in active0:
            raise EngineStateError(f"newly active site {site} was already active")
    for site in newly_inactive:
        if site not in input_old or site not in active0:
            raise EngineStateError(f"newly inactive site {site} was not an active stored site")
        if np.any(state.input_values[site[1], site[0]] != 0):
            raise EngineStateError(f"newly inactive site {site} still has a nonzero value")
    for site, old in input_old.items():
        pre_zero = not np.any(old != 0)
        post_zero = not np.any(state.input_values[site[1], site[0]] != 0)
        if pre_zero and not post_zero and site not in newly_active:
            raise EngineStateError(f"site {site} activated without being declared newly active")
        if not pre_zero and post_zero and site not in newly_inactive:
            raise EngineStateError(f"site {site} deactivated without being declared newly inactive")

    active0 |= newly_active
    active0 -= newly_inactive
    _patch_rulebooks(state, 0, newly_active, newly_inactive)
    return input_old


def process_event(state: NetworkState, update: SparseUpdate) -> np.ndarray:
    """Propagate one coalesced representation update through every layer.

    The update must come from the same stream's sliding window (single event
    or coalesced batch). Returns the current network output.
    """
    net = state.net
    input_old = _apply_input_update(state, update)
    front = UpdateFront.initial(input_old.keys(), update.newly_active, update.newly_inactive)

    trace: list[LayerTrace] = []
    prev_old = input_old
    for idx, layer in enumerate(net.layers):
        level = state.layer_level[idx]
        lvl = state.levels[level]
        if layer.kind == "conv":
            front = propagate_front(front, layer.kernel, state.active_sets[level], lvl.width, lvl.height)
            prev_old, n_rules = update_conv_layer(state, front, idx, prev_old)
            trace.append(
                LayerTrace(idx, "conv", lvl.height, lvl.width, layer.in_channels, layer.out_channels,
                           layer.kernel, n_rules, len(state.active_sets[level]))
            )
        elif layer.kind == "relu":
            prev_old, n_processed = update_relu_layer(state, front, idx, prev_old)
            c = state.maps[idx].channels
            trace.append(LayerTrace(idx, "relu", lvl.height, lvl.width, c, c, 0, 0, n_processed))
        elif layer.kind == "maxpool":
            prev_old, front, n_recomputed = update_pool_layer(state, front, idx, prev_old)
            out = state.levels[level + 1]
            c = state.maps[idx].channels
            trace.append(LayerTrace(idx, "maxpool", out.height, out.width, c, c, layer.kernel, 0, n_recomputed))
        elif layer.kind == "fc":
            n_slots = update_fc(state, prev_old)
            trace.append(LayerTrace(idx, "fc", 1, 1, layer.in_channels, layer.out_channels, 0, 0, n_slots))
        else:
            raise EngineStateError(f"unknown layer kind {layer.kind!r}")
    state.last_trace = trace
    state.events_processed += 1
    return state.output.copy()


def resync(state: NetworkState) -> None:
    """Recompute the retained state from scratch, discarding accumulated
    float drift. The input layer and event counters are preserved."""
    rep = Representation(
        state.net.input_width,
        state.net.input_height,
        state.net.input_channels,
        state.input_values.copy(),
        state.net.representation,
    )
    fresh = init_state(state.net, rep, state.dtype)
    state.input_values = fresh.input_values
    state.active_sets = fresh.active_sets
    state.maps = fresh.maps
    state.output = fresh.output
    state.rulebooks = fresh.rulebooks
