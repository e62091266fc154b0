import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgerca import metricdetect as md
from edgerca import synth
from edgerca import topostack as ts
from edgerca.synth import ScaleEvent, ScenarioSpec, SystemSpec
from edgerca.telemetry import EntityRef, IncidentWindow, NodeInfo, Segment, TopologySnapshot

W = IncidentWindow(0.0, 600.0, 5.0)


def _snap(at, n_instances=1, call=False):
    nodes = [NodeInfo(EntityRef("svc", "service"), "cloud"),
             NodeInfo(EntityRef("h1", "server"), "cloud")]
    own, host = [], []
    for i in range(n_instances):
        nodes.append(NodeInfo(EntityRef(f"svc-{i}", "instance"), "cloud", "h1"))
        own.append(("svc", f"svc-{i}"))
        host.append((f"svc-{i}", "h1"))
    calls = ()
    if call:
        nodes.append(NodeInfo(EntityRef("db", "service"), "cloud"))
        calls = (("svc", "db"),)
    return TopologySnapshot(at, tuple(nodes), calls, tuple(own), tuple(host))


def _features(ids):
    """Feature matrix with a constant slot for every metric of the given nodes."""
    from edgerca.telemetry import SCHEMA, MetricSeries, MetricSeriesSet
    series = []
    for eid, kind in ids:
        for m in SCHEMA[kind]:
            series.append(MetricSeries(EntityRef(eid, kind), m, W.grid.copy(), np.full(W.n_steps, 1.0)))
    return md.assemble_features(MetricSeriesSet.from_series(series, W))


NONE = md.AnomalousSet(())


def test_identical_snapshots_one_interval():
    ivs = ts.detect_change_points([_snap(t) for t in (-5.0, 60.0, 120.0)], W)
    assert [(iv.start, iv.end) for iv in ivs] == [(0.0, 600.0)]


def test_added_instance_splits():
    ivs = ts.detect_change_points([_snap(-5.0), _snap(300.0, 2)], W)
    assert [(iv.start, iv.end) for iv in ivs] == [(0.0, 300.0), (300.0, 600.0)]


def test_no_snapshot_before_start():
    with pytest.raises(ts.TopologyError):
        ts.detect_change_points([_snap(10.0)], W)


def test_small_graph():
    f = _features([("svc", "service"), ("svc-0", "instance"), ("h1", "server")])
    g = ts.build_graph(ts.TopologyInterval(0.0, 600.0, _snap(0.0)), f, NONE)
    assert len(g.nodes) == 3
    assert g.edges == {"call": [], "ownership": [("svc", "svc-0")], "hosting": [("svc-0", "h1")]}
    assert g.node_features["svc"].shape == (120, 1)
    assert g.node_features["svc-0"].shape == (120, 3)


def test_call_edge_direction():
    f = _features([("svc", "service"), ("db", "service"), ("svc-0", "instance"), ("h1", "server")])
    g = ts.build_graph(ts.TopologyInterval(0.0, 600.0, _snap(0.0, call=True)), f, NONE)
    assert g.edges["call"] == [("svc", "db")]
    assert g.in_neighbors("db") == ["svc"]


def test_node_without_slots_named():
    f = _features([("svc", "service"), ("h1", "server")])
    with pytest.raises(ts.TopologyError, match="svc-0"):
        ts.build_graph(ts.TopologyInterval(0.0, 600.0, _snap(0.0)), f, NONE)


def test_interval_too_short():
    f = _features([("svc", "service"), ("svc-0", "instance"), ("h1", "server")])
    with pytest.raises(ts.TopologyError):
        ts.build_graph(ts.TopologyInterval(0.0, 5.0, _snap(0.0)), f, NONE)


def test_static_stack_size_one():
    f = _features([("svc", "service"), ("svc-0", "instance"), ("h1", "server")])
    stack = ts.build_stack([_snap(-5.0), _snap(60.0)], f, NONE, W)
    assert len(stack) == 1 and stack.graphs[0].steps == (0, 120)


def test_off_grid_change_snaps_forward():
    f = _features([("svc", "service"), ("svc-0", "instance"), ("svc-1", "instance"), ("h1", "server")])
    stack = ts.build_stack([_snap(-5.0), _snap(302.0, 2)], f, NONE, W)
    assert [iv.start for iv in stack.intervals] == [0.0, 305.0]
    assert [g.steps for g in stack.graphs] == [(0, 61), (61, 120)]


def test_short_interval_merges_back():
    f = _features([("svc", "service"), ("svc-0", "instance"), ("svc-1", "instance"), ("h1", "server")])
    stack = ts.build_stack([_snap(-5.0), _snap(300.0, 2), _snap(302.0, 1)], f, NONE, W)
    assert [g.steps for g in stack.graphs] == [(0, 61), (61, 120)]
    # the 1-step interval with two instances is absorbed by its predecessor
    assert [len(g.of_kind("instance")) for g in stack.graphs] == [1, 1]


def test_anomalies_projected():
    f = _features([("svc", "service"), ("svc-0", "instance"), ("svc-1", "instance"), ("h1", "server")])
    gone = EntityRef("svc-1", "instance")
    a = md.AnomalousSet((gone,), {"svc-1": ("cpu",)})
    stack = ts.build_stack([_snap(-5.0, 2), _snap(300.0, 1)], f, a, W)
    assert [g.anomalous.ids for g in stack.graphs] == [["svc-1"], []]


# synthetic scenarios checked against their own script


def _scripted(events, seed=4):
    spec = ScenarioSpec(scale_events=events, seed=seed)
    gen = synth.generate_bundle(spec)
    b = gen.bundle
    f = md.assemble_features(b.metrics)
    return gen, ts.build_stack(b.snapshots, f, md.detect_anomalies(f), b.window)


def test_three_changes_four_intervals():
    events = [ScaleEvent(100.0, "shop-svc1"), ScaleEvent(250.0, "books-svc2"),
              ScaleEvent(430.0, "shop-svc1", "remove")]
    gen, stack = _scripted(events)
    w = gen.bundle.window
    ivs = ts.detect_change_points(gen.bundle.snapshots, w)
    assert [iv.start for iv in ivs] == [w.start] + gen.manifest["change_points"]
    assert [iv.start for iv in stack.intervals] == [w.start] + gen.manifest["change_points"]
    n_inst = [len(g.of_kind("instance")) for g in stack.graphs]
    base = n_inst[0]
    assert n_inst == [base, base + 1, base + 2, base + 1]


def test_hipster_like_manifest():
    spec = ScenarioSpec(systems=[SystemSpec("hipster", 10)],
                        segments=[Segment("cloud", "cloud"), Segment("edge-1", "edge")],
                        servers_per_segment={"cloud": 2, "edge-1": 2}, seed=9)
    gen = synth.generate_bundle(spec)
    f = md.assemble_features(gen.bundle.metrics)
    stack = ts.build_stack(gen.bundle.snapshots, f, md.detect_anomalies(f), gen.bundle.window)
    man = stack.graphs[0].manifest()
    assert man["nodes"] == {"service": gen.manifest["services"], "instance": gen.manifest["instances"],
                            "server": gen.manifest["servers"]}
    assert man["nodes"]["service"] == 10 and man["nodes"]["server"] == 4
    assert man["edges"]["call"] == gen.manifest["call_edges"]
    assert man["edges"]["ownership"] == man["edges"]["hosting"] == gen.manifest["instances"]
    assert len(stack.graphs[0].segments) == 2


@settings(max_examples=15, deadline=None)
@given(st.lists(st.tuples(st.floats(1.0, 590.0), st.sampled_from(["shop-svc1", "books-svc2", "shop-svc2"])),
                max_size=4))
def test_stack_properties(raw):
    events = [ScaleEvent(round(t, 1), s) for t, s in raw]
    gen, stack = _scripted(events, seed=2)
    w = gen.bundle.window
    # contiguous, disjoint, exhaustive
    assert stack.intervals[0].start == w.start and stack.intervals[-1].end == w.end
    for a, b in zip(stack.intervals, stack.intervals[1:]):
        assert a.end == b.start
        assert a.steps[1] == b.steps[0]
    assert stack.intervals[0].steps[0] == 0 and stack.intervals[-1].steps[1] == w.n_steps
    for iv, g in zip(stack.intervals, stack.graphs):
        assert g.n_steps >= 2
        for feats in g.node_features.values():
            assert feats.shape[0] == g.n_steps
        ids = set(g.ids)
        assert set(g.anomalous.ids) <= ids
        for et in ts.EDGE_TYPES:
            assert all(a in ids and b in ids for a, b in g.edges[et])
        seg = {n.entity.id: n.segment for n in g.nodes}
        assert all(seg[i] == seg[s] for i, s in g.edges["hosting"])
    # topology is constant inside every raw change-point interval
    for iv in ts.detect_change_points(gen.bundle.snapshots, w):
        inside = [s for s in gen.bundle.snapshots if iv.start < s.at < iv.end]
        assert all(s.signature() == iv.snapshot.signature() for s in inside)
    _, again = _scripted(events, seed=2)
    assert again.dump() == stack.dump()
