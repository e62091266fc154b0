import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgerca import metricdetect as md
from edgerca.telemetry import EntityRef, IncidentWindow, MetricSeries, MetricSeriesSet
from oracles import flat_birch

W = IncidentWindow(0.0, 600.0, 5.0)


def _set(columns):
    """MetricSeriesSet from {(id, kind, metric): values on W's grid}."""
    out = []
    for (eid, kind, metric), vals in columns.items():
        out.append(MetricSeries(EntityRef(eid, kind), metric, W.grid.copy(), np.asarray(vals, dtype=float)))
    return MetricSeriesSet.from_series(out, W)


def test_three_four_five():
    out = md.l2_rows(np.array([[3.0, 4.0], [0.0, 0.0]]))
    assert out[0].tolist() == [0.6, 0.8]
    assert out[1].tolist() == [0.0, 0.0]


def test_row_norms():
    rng = np.random.default_rng(0)
    cols = {}
    for i in range(3):
        for m in ("cpu", "memory", "net_latency"):
            cols[(f"i{i}", "instance", m)] = rng.uniform(0, 100, size=120)
    f = md.assemble_features(_set(cols))
    assert f.values.shape == (120, 9)
    norms = np.sqrt((f.values ** 2).sum(axis=1))
    assert np.all(np.abs(norms - 1) < 1e-7)
    again = md.assemble_features(_set(cols))
    assert np.array_equal(again.values, f.values)


def test_rescaled_metrics_give_identical_features(cpu_bundle):
    m = cpu_bundle.bundle.metrics
    a, b = md.assemble_features(m), md.assemble_features(m.scaled(10.0))
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(md.l2_rows(a.raw), md.l2_rows(b.raw))


def test_empty_set_rejected():
    with pytest.raises(md.DetectError):
        md.assemble_features(MetricSeriesSet({}, W))


def test_identical_points():
    assert md.birch_cluster([0.3] * 10)[0] == 1


def test_two_groups():
    count, assign = md.birch_cluster([0, 0, 0, 1, 1, 1], 0.07)
    assert count == 2 and assign == [0, 0, 0, 1, 1, 1]


def test_two_gaussians_against_oracle():
    rng = np.random.default_rng(1)
    pts = np.concatenate([rng.normal(0, 0.01, 100), rng.normal(1, 0.01, 100)])
    rng.shuffle(pts)
    count, assign = md.birch_cluster(pts, 0.07)
    assert count == 2
    assert (count, assign) == flat_birch(pts, 0.07)


def test_radius_invariant_on_leaves():
    rng = np.random.default_rng(2)
    tree = md.CFTree(0.05, branching=4)
    for x in rng.uniform(0, 1, 300):
        tree.insert([x])
    for s in tree.subclusters:
        assert s.radius() <= 0.05
        r2 = s.ss / s.n - float(s.centroid() @ s.centroid())
        assert abs(np.sqrt(max(r2, 0)) - s.radius()) < 1e-6
    assert sum(s.n for s in tree.subclusters) == 300


def test_constant_series_no_anomaly():
    cols = {("s", "service", "latency"): np.full(120, 10.0),
            ("i", "instance", "cpu"): np.full(120, 20.0)}
    assert len(md.detect_anomalies(md.assemble_features(_set(cols)))) == 0


def test_step_flags_that_node():
    # row normalisation moves every other slot a little when one slot jumps;
    # with a realistic slot count that shift stays well inside beta
    step = np.where(np.arange(120) < 60, 0.1, 0.9)
    cols = {("s", "service", "latency"): step}
    for i in range(7):
        for m in ("cpu", "memory", "net_latency"):
            cols[(f"i{i}", "instance", m)] = np.full(120, 0.5)
    f = md.assemble_features(_set(cols))
    a = md.detect_anomalies(f, 0.07)
    assert a.ids == ["s"]
    # the normalised column really separates by more than beta
    col = f.values[:, f.columns_of("s")[0]]
    assert col[60:].min() - col[:60].max() > 0.07
    assert md.birch_cluster(col, 0.07) == flat_birch(col, 0.07)


def test_cpu_injection_in_anomalous_set(cpu_bundle):
    f = md.assemble_features(cpu_bundle.bundle.metrics)
    a = md.detect_anomalies(f)
    target = cpu_bundle.truth.target
    service = target.rsplit("-", 1)[0]
    assert target in a and service in a
    assert a.anomalous_metrics[target][0] == "cpu"


def test_rows_mode_runs(cpu_bundle):
    f = md.assemble_features(cpu_bundle.bundle.metrics)
    a = md.detect_anomalies(f, mode="rows")
    assert all(a.anomalous_metrics[e] for e in a.ids)
    with pytest.raises(ValueError):
        md.detect_anomalies(f, mode="nope")


def test_anomalous_set_validates():
    e = EntityRef("x", "service")
    with pytest.raises(md.DetectError):
        md.AnomalousSet((e,), {})


points = st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=200)


@settings(max_examples=100, deadline=None)
@given(points, st.floats(0.01, 0.3))
def test_matches_flat_oracle(pts, beta):
    count, assign = md.birch_cluster(pts, beta, branching=10_000)
    assert (count, assign) == flat_birch(pts, beta)


@settings(max_examples=60, deadline=None)
@given(points)
def test_wide_threshold_single_cluster(pts):
    spread = max(pts) - min(pts)
    assert md.birch_cluster(pts, spread + 1e-9)[0] == 1


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-5, 5, allow_nan=False), min_size=1, max_size=60),
       st.floats(0.01, 1.0), st.floats(1.0, 3.0))
def test_l2_scale_invariant(row, k, factor):
    raw = np.array([row])
    a, b = md.l2_rows(raw), md.l2_rows(raw * factor)
    assert np.allclose(a, b, atol=1e-12)


def _step_detected(jump):
    cols = {("s", "service", "latency"): np.where(np.arange(120) < 60, 0.3, 0.3 + jump)}
    cols.update({(f"i{i}", "instance", "cpu"): np.full(120, 0.5) for i in range(20)})
    return "s" in md.detect_anomalies(md.assemble_features(_set(cols)))


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 2.0), st.floats(1.0, 4.0))
def test_amplifying_keeps_node(jump, amp):
    if _step_detected(jump):
        assert _step_detected(jump * amp)
