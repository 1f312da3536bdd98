import copy

import numpy as np
import pytest

from conftest import (
    assert_allclose_rel,
    direct_front_evaluation,
    random_conv,
    random_event_stream,
    random_fc,
    state_matches_forward,
)
from evsparse.engine import (
    EngineStateError,
    UpdateFront,
    init_state,
    process_event,
    propagate_front,
    resync,
    update_conv_layer,
    update_fc,
)
from evsparse.events import Event
from evsparse.model import NetworkSpec, random_model, small_template
from evsparse.representations import SlidingWindowState, SparseUpdate, build
from evsparse.sparse import LayerSpec, build_rulebook, sparse_forward


def primed_pipeline(net, stream, window, n_prime, dtype=np.float32):
    win = SlidingWindowState(net.representation, net.input_width, net.input_height, window, dtype)
    win.prime(stream.events[:n_prime])
    state = init_state(net, copy.deepcopy(win.representation), dtype)
    return win, state


class TestInitState:
    def test_zero_representation_all_inactive(self):
        net = random_model(0, small_template(blocks=2, width=8, height=8))
        state = init_state(net, build("histogram", [], 8, 8))
        assert all(not s for s in state.active_sets)
        assert all(m is None or m.n_active == 0 for m in state.maps)
        assert state.output == pytest.approx(net.layers[-1].bias)

    def test_equivalence_by_construction(self):
        rng = np.random.default_rng(0)
        net = random_model(1, small_template(blocks=2, width=8, height=8))
        stream = random_event_stream(rng, 8, 8, 60)
        rep = build("histogram", stream.events, 8, 8)
        state = init_state(net, rep)
        state_matches_forward(state, sparse_forward(net, rep), rtol=1e-6, atol=1e-7)

    def test_active_counts_match_forward(self):
        rng = np.random.default_rng(1)
        net = random_model(2, small_template(blocks=2, width=16, height=16))
        stream = random_event_stream(rng, 16, 16, 400)
        rep = build("histogram", stream.events, 16, 16)
        state = init_state(net, rep)
        fwd = sparse_forward(net, rep)
        for idx, fmap in enumerate(state.maps):
            if fmap is not None:
                assert fmap.n_active == fwd.layer_maps[idx].n_active

    def test_shape_mismatch_rejected(self):
        net = random_model(0, small_template(blocks=1, width=8, height=8))
        with pytest.raises(ValueError, match="match"):
            init_state(net, build("histogram", [], 4, 4))


class TestPropagateFront:
    def test_fully_active_grows_to_neighborhood(self):
        active = {(x, y) for x in range(7) for y in range(7)}
        front = UpdateFront.initial({(3, 3)})
        out = propagate_front(front, 3, active, 7, 7)
        expected = {(x, y) for x in range(2, 5) for y in range(2, 5)}
        assert out.sites == expected
        assert out.rule_count == 9
        assert all(i == (3, 3) for _, i, _ in out.rule_pairs())

    def test_lonely_site_keeps_self_rule(self):
        front = UpdateFront.initial({(2, 2)})
        out = propagate_front(front, 3, {(2, 2)}, 5, 5)
        assert out.sites == {(2, 2)}
        assert out.rule_pairs() == {((0, 0), (2, 2), (2, 2))}

    def test_newly_inactive_propagates_outward_but_receives_nothing(self):
        s = (2, 2)
        active = {(1, 2), (3, 2), (2, 1)}  # s itself already removed from A_t
        front = UpdateFront.initial({s}, newly_inactive={s})
        out = propagate_front(front, 3, active, 5, 5)
        assert active <= out.sites
        assert s in out.sites  # carried along for zeroing at each layer
        pairs = out.rule_pairs()
        assert all(j != s for _, _, j in pairs)
        assert {i for _, i, _ in pairs} == {s}

    def test_matches_direct_evaluation_over_layers(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            width, height = 9, 8
            active = {
                (int(x), int(y))
                for x, y in zip(rng.integers(0, width, 25), rng.integers(0, height, 25))
            }
            site = (int(rng.integers(0, width)), int(rng.integers(0, height)))
            f0 = {site}
            newly_active: set = set()
            newly_inactive: set = set()
            case = rng.integers(0, 3)
            if case == 0:
                active.add(site)  # surviving active site
            elif case == 1:
                active.add(site)
                newly_active.add(site)
            else:
                active.discard(site)
                newly_inactive.add(site)
            kernels = [3, 3, 3]
            front = UpdateFront.initial(f0, newly_active, newly_inactive)
            direct = direct_front_evaluation(f0, newly_active, newly_inactive, active, kernels, width, height)
            for (expect_sites, expect_rules), kernel in zip(direct, kernels):
                front = propagate_front(front, kernel, active, width, height)
                assert front.sites == expect_sites
                assert front.rule_pairs() == expect_rules

    def test_kernel_change_reevaluates(self):
        rng = np.random.default_rng(3)
        active = {(int(x), int(y)) for x, y in zip(rng.integers(0, 11, 40), rng.integers(0, 11, 40))}
        f0 = {(5, 5)}
        active |= f0
        kernels = [3, 5]
        front = UpdateFront.initial(f0)
        direct = direct_front_evaluation(f0, set(), set(), active, kernels, 11, 11)
        for (expect_sites, expect_rules), kernel in zip(direct, kernels):
            front = propagate_front(front, kernel, active, 11, 11)
            assert front.sites == expect_sites
            assert front.rule_pairs() == expect_rules


def one_conv_state(value=2.0, channels=1):
    """Network of one conv + fc with a single active input site at (2, 2)."""
    rng = np.random.default_rng(4)
    conv = random_conv(rng, 3, channels, channels)
    fc = random_fc(rng, 5 * 5 * channels, 2)
    net = NetworkSpec(5, 5, channels, [conv, fc], representation="histogram")
    values = np.zeros((5, 5, channels), np.float32)
    values[2, 2] = value
    from evsparse.representations import Representation

    rep = Representation(5, 5, channels, values, "histogram")
    return net, init_state(net, rep)


class TestUpdateConvLayer:
    def test_zero_delta_leaves_state_unchanged(self):
        net, state = one_conv_state()
        before = state.maps[0].to_dense().copy()
        front = propagate_front(UpdateFront.initial({(2, 2)}), 3, state.active_sets[0], 5, 5)
        old = {(2, 2): state.input_values[2, 2].copy()}  # delta == 0
        update_conv_layer(state, front, 0, old)
        assert np.array_equal(state.maps[0].to_dense(), before)

    def test_single_site_delta_applies_center_weight(self):
        net, state = one_conv_state(value=2.0)
        delta = np.array([0.5], np.float32)
        old = {(2, 2): state.input_values[2, 2].copy()}
        state.input_values[2, 2] += delta
        before = state.maps[0].pre_activation_at((2, 2))
        front = propagate_front(UpdateFront.initial({(2, 2)}), 3, state.active_sets[0], 5, 5)
        _, n_rules = update_conv_layer(state, front, 0, old)
        assert n_rules == 1
        expected = before + net.layers[0].weights[1, 1, 0, 0] * delta
        assert state.maps[0].pre_activation_at((2, 2)) == pytest.approx(expected, abs=1e-7)

    def test_missing_cache_entry_raises(self):
        net, state = one_conv_state()
        front = propagate_front(UpdateFront.initial({(2, 2)}), 3, state.active_sets[0], 5, 5)
        with pytest.raises(EngineStateError, match="cache"):
            update_conv_layer(state, front, 0, {})

    def test_thousand_events_match_fresh_forward(self):
        rng = np.random.default_rng(5)
        net = random_model(6, small_template(blocks=2, width=12, height=12, base_channels=4))
        stream = random_event_stream(rng, 12, 12, 1300)
        win, state = primed_pipeline(net, stream, window=250, n_prime=200)
        for e in stream.events[200:1200]:
            process_event(state, win.push_event(e))
        fwd = sparse_forward(net, win.representation)
        state_matches_forward(state, fwd, rtol=1e-4, atol=1e-5, context="after 1000 events")


class TestUpdatePoolAndFc:
    def test_unchanged_window_stops_propagation(self):
        rng = np.random.default_rng(6)
        net = random_model(7, small_template(blocks=1, width=8, height=8, base_channels=3))
        # two events in one pooling window; the non-max one will change
        rep = build("histogram", [Event(0, 0, 0, 1), Event(1, 1, 1, 1), Event(1, 1, 2, 1)], 8, 8)
        state = init_state(net, rep)
        pool_idx = next(i for i, l in enumerate(net.layers) if l.kind == "maxpool")
        before_front = state.maps[pool_idx].to_dense().copy()
        # craft an update that cannot win any max: push the (0,0) count from 1 to 1 (no-op delta is
        # invalid), so instead check via process_event on a a site that loses the max comparison
        upd = SparseUpdate(sites=[((0, 0), np.array([1.0, 0.0], np.float32))])
        process_event(state, upd)
        pool_trace = [t for t in state.last_trace if t.op == "maxpool"][0]
        assert pool_trace.n_a >= 1
        # deeper conv layers saw work only if the pooled value changed
        changed = not np.array_equal(state.maps[pool_idx].to_dense(), before_front)
        deeper = [t for t in state.last_trace if t.index > pool_idx and t.op == "conv"]
        if not changed:
            assert all(t.n_r == 0 for t in deeper)

    def test_window_gains_first_active_site(self):
        net = random_model(8, small_template(blocks=1, width=8, height=8, base_channels=3))
        rep = build("histogram", [Event(0, 0, 0, 1)], 8, 8)
        state = init_state(net, rep)
        pool_idx = next(i for i, l in enumerate(net.layers) if l.kind == "maxpool")
        assert (3, 3) not in state.maps[pool_idx].index
        upd = SparseUpdate(sites=[((7, 7), np.array([1.0, 0.0], np.float32))], newly_active=[(7, 7)])
        process_event(state, upd)
        # pooled site (3,3) newly active; equals the only active input's features
        relu_before_pool = state.maps[pool_idx - 1]
        assert np.array_equal(
            state.maps[pool_idx].activation_at((3, 3)), relu_before_pool.activation_at((7, 7))
        )

    def test_fc_empty_front_unchanged(self):
        net, state = one_conv_state()
        before = state.output.copy()
        assert update_fc(state, {}) == 0
        assert np.array_equal(state.output, before)

    def test_fc_single_slot_column_update(self):
        net, state = one_conv_state()
        fmap = state.maps[0]
        site = (2, 2)
        old = {site: fmap.activation_at(site)}
        delta = np.array([0.25], np.float32)
        fmap.pre[fmap.index[site]] += delta
        before = state.output.copy()
        update_fc(state, old)
        slot = (site[1] * 5 + site[0]) * 1
        expected = before + net.layers[-1].weights[:, slot] * delta
        assert state.output == pytest.approx(expected, abs=1e-7)

    def test_conv_pool_conv_stream_equivalence(self):
        rng = np.random.default_rng(9)
        net = random_model(10, small_template(blocks=2, width=8, height=8, base_channels=3))
        stream = random_event_stream(rng, 8, 8, 500)
        win, state = primed_pipeline(net, stream, window=60, n_prime=50)
        for e in stream.events[50:450]:
            process_event(state, win.push_event(e))
            fwd = sparse_forward(net, win.representation)
            assert_allclose_rel(state.output, fwd.output, rtol=1e-4, atol=1e-5)


class TestProcessEvent:
    def test_empty_update_is_identity(self):
        net, state = one_conv_state()
        before = state.output.copy()
        out = process_event(state, SparseUpdate())
        assert np.array_equal(out, before)
        # conv rows carry n_a = current active count; the work counters stay 0
        assert all(t.n_r == 0 for t in state.last_trace)
        assert all(t.n_a == 0 for t in state.last_trace if t.op != "conv")

    def test_first_event_into_empty_representation(self):
        net = random_model(11, small_template(blocks=2, width=8, height=8))
        state = init_state(net, build("histogram", [], 8, 8))
        win = SlidingWindowState("histogram", 8, 8, window_size=10)
        out = process_event(state, win.push_event(Event(4, 3, 0, 1)))
        fwd = sparse_forward(net, win.representation)
        assert_allclose_rel(out, fwd.output, rtol=1e-5, atol=1e-6)
        state_matches_forward(state, fwd, rtol=1e-5, atol=1e-6)

    def test_sequential_stream_stepwise_equivalence(self):
        rng = np.random.default_rng(12)
        net = random_model(13, small_template(blocks=2, width=12, height=12, base_channels=4))
        stream = random_event_stream(rng, 12, 12, 700)
        win, state = primed_pipeline(net, stream, window=120, n_prime=100)
        for i, e in enumerate(stream.events[100:600]):
            out = process_event(state, win.push_event(e))
            fwd = sparse_forward(net, win.representation)
            assert_allclose_rel(out, fwd.output, rtol=1e-4, atol=1e-5, context=f"event {i}")
        state_matches_forward(state, sparse_forward(net, win.representation), rtol=1e-4, atol=1e-5)

    def test_undeclared_activation_rejected(self):
        net = random_model(14, small_template(blocks=1, width=8, height=8))
        state = init_state(net, build("histogram", [], 8, 8))
        bad = SparseUpdate(sites=[((1, 1), np.array([1.0, 0.0], np.float32))])
        with pytest.raises(EngineStateError, match="declared"):
            process_event(state, bad)

    def test_duplicate_site_rejected(self):
        net, state = one_conv_state()
        d = np.array([1.0], np.float32)
        bad = SparseUpdate(sites=[((2, 2), d), ((2, 2), d)])
        with pytest.raises(EngineStateError, match="duplicate"):
            process_event(state, bad)

    def test_false_newly_active_rejected(self):
        net, state = one_conv_state()
        bad = SparseUpdate(sites=[((2, 2), np.array([1.0], np.float32))], newly_active=[(2, 2)])
        with pytest.raises(EngineStateError, match="nonzero stored value"):
            process_event(state, bad)


class TestInvariants:
    def test_monotone_front_growth_and_ball_bound(self):
        rng = np.random.default_rng(15)
        active = {(int(x), int(y)) for x, y in zip(rng.integers(0, 15, 90), rng.integers(0, 15, 90))}
        u = (7, 7)
        active.add(u)
        front = UpdateFront.initial({u})
        prev_size = 1
        for layer in range(1, 5):
            front = propagate_front(front, 3, active, 15, 15)
            assert len(front.sites) >= prev_size
            prev_size = len(front.sites)
            radius = layer  # (k - 1) / 2 per conv with k = 3
            assert all(max(abs(x - u[0]), abs(y - u[1])) <= radius for x, y in front.sites)

    def test_incremental_rules_subset_of_sync_plus_newly_active(self):
        rng = np.random.default_rng(16)
        net = random_model(17, small_template(blocks=1, width=10, height=10, base_channels=3))
        stream = random_event_stream(rng, 10, 10, 300)
        win, state = primed_pipeline(net, stream, window=40, n_prime=30)
        for e in stream.events[30:200]:
            old_rb = {
                key: {off: set(pairs) for off, pairs in per.items()}
                for key, per in state.rulebooks.items()
            }
            update = win.push_event(e)
            # reconstruct the front the conv layer saw
            touched = [s for s, _ in update.sites]
            front = UpdateFront.initial(touched, update.newly_active, update.newly_inactive)
            process_event(state, update)
            front = propagate_front(front, 3, state.active_sets[0], 10, 10)
            newly_active_inputs = set(update.newly_active)
            for off, i, j in front.rule_pairs():
                in_old = (i, j) in old_rb[(0, 3)].get(off, set())
                assert in_old or i in newly_active_inputs, f"rule {(off, i, j)} from nowhere"

    def test_work_bound_patch_rule_count(self):
        # pool-free stack: rules at conv depth l bounded by k^2 * actives
        # within the centered patch of size 1 + (k-1) * l
        rng = np.random.default_rng(18)
        convs = [random_conv(rng, 3, 2, 3), random_conv(rng, 3, 3, 3), random_conv(rng, 3, 3, 3)]
        layers = [convs[0], LayerSpec.relu(), convs[1], LayerSpec.relu(), convs[2],
                  random_fc(rng, 12 * 12 * 3, 2)]
        net = NetworkSpec(12, 12, 2, layers, representation="histogram")
        stream = random_event_stream(rng, 12, 12, 160)
        win = SlidingWindowState("histogram", 12, 12, window_size=1000)
        win.prime(stream.events[:40])
        state = init_state(net, copy.deepcopy(win.representation))
        for e in stream.events[40:140]:
            process_event(state, win.push_event(e))
            u = (e.x, e.y)
            depth = 0
            for t in state.last_trace:
                if t.op != "conv":
                    continue
                depth += 1
                radius = depth  # (k - 1) * l / 2 with k = 3
                n_l = sum(
                    1 for (x, y) in state.active_sets[0]
                    if max(abs(x - u[0]), abs(y - u[1])) <= radius
                )
                assert t.n_r <= n_l * 9, f"layer depth {depth}: {t.n_r} > {n_l} * 9"

    def test_batch_and_single_events_agree(self):
        rng = np.random.default_rng(19)
        net = random_model(20, small_template(blocks=2, width=12, height=12, base_channels=4))
        stream = random_event_stream(rng, 12, 12, 400)
        win_a, state_a = primed_pipeline(net, stream, window=80, n_prime=60)
        win_b, state_b = primed_pipeline(net, stream, window=80, n_prime=60)
        rest = stream.events[60:360]
        out_a = out_b = None
        for e in rest:
            out_a = process_event(state_a, win_a.push_event(e))
        for i in range(0, len(rest), 100):
            out_b = process_event(state_b, win_b.push_batch(rest[i : i + 100]))
        assert_allclose_rel(out_a, out_b, rtol=1e-4, atol=1e-5)
        state_matches_forward(state_b, sparse_forward(net, win_b.representation), rtol=1e-4, atol=1e-5)

    def test_persistent_rulebooks_match_rebuild(self):
        rng = np.random.default_rng(21)
        net = random_model(22, small_template(blocks=2, width=12, height=8, base_channels=3))
        stream = random_event_stream(rng, 12, 8, 500)
        win, state = primed_pipeline(net, stream, window=50, n_prime=40)
        for e in stream.events[40:440]:
            process_event(state, win.push_event(e))
        for (level, kernel), per_offset in state.rulebooks.items():
            lvl = state.levels[level]
            expected = build_rulebook(state.active_sets[level], kernel, lvl.width, lvl.height).all_pairs()
            got = {(off, i, j) for off, pairs in per_offset.items() for i, j in pairs}
            assert got == expected, f"level {level} kernel {kernel}"

    def test_drift_bounded_and_resync_exact(self):
        rng = np.random.default_rng(23)
        net = random_model(24, small_template(blocks=2, width=12, height=12, base_channels=4))
        stream = random_event_stream(rng, 12, 12, 10_300)
        win, state = primed_pipeline(net, stream, window=200, n_prime=150)
        for e in stream.events[150:10_150]:
            process_event(state, win.push_event(e))
        fwd = sparse_forward(net, win.representation)
        assert_allclose_rel(state.output, fwd.output, rtol=1e-3, atol=1e-4, context="drift after 1e4 events")
        resync(state)
        # histogram counts are exact integers, so resync reproduces the
        # fresh forward bit for bit
        assert np.array_equal(state.output, fwd.output)
        state_matches_forward(state, fwd, rtol=0, atol=0)

    def test_heterogeneous_kernels_equivalent(self):
        rng = np.random.default_rng(25)
        layers = [random_conv(rng, 3, 2, 3), LayerSpec.relu(), random_conv(rng, 5, 3, 3),
                  LayerSpec.relu(), random_conv(rng, 3, 3, 2), random_fc(rng, 10 * 10 * 2, 2)]
        net = NetworkSpec(10, 10, 2, layers, representation="histogram")
        stream = random_event_stream(rng, 10, 10, 260)
        win, state = primed_pipeline(net, stream, window=50, n_prime=40)
        for e in stream.events[40:240]:
            out = process_event(state, win.push_event(e))
            fwd = sparse_forward(net, win.representation)
            assert_allclose_rel(out, fwd.output, rtol=1e-4, atol=1e-5)

    def test_float64_mode_tight_equivalence(self):
        rng = np.random.default_rng(26)
        net = random_model(27, small_template(blocks=2, width=12, height=12, base_channels=4)).astype(np.float64)
        stream = random_event_stream(rng, 12, 12, 700)
        win, state = primed_pipeline(net, stream, window=100, n_prime=80, dtype=np.float64)
        for e in stream.events[80:680]:
            out = process_event(state, win.push_event(e))
        fwd = sparse_forward(net, win.representation)
        assert np.max(np.abs(out - fwd.output)) <= 1e-9
