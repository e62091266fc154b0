"""Metric feature assembly and Birch-based anomaly detection."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .telemetry import SCHEMA


class DetectError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureMatrix:
    entities: tuple
    metric_slots: tuple  # (EntityRef, metric name), column order
    grid: np.ndarray
    values: np.ndarray  # row-wise L2 normalised
    raw: np.ndarray

    def columns_of(self, entity_id):
        return [j for j, (e, _) in enumerate(self.metric_slots) if e.id == entity_id]

    def slot_index(self):
        return {(e.id, m): j for j, (e, m) in enumerate(self.metric_slots)}


# normalised features are rounded to this many decimals, so rescaling the raw
# metrics (which moves the result by an ulp or so) gives bit-identical input
FEATURE_DECIMALS = 8


def l2_rows(raw):
    norms = np.sqrt(np.sum(raw * raw, axis=1, keepdims=True))
    out = np.zeros_like(raw)
    nz = norms[:, 0] > 0
    out[nz] = raw[nz] / norms[nz]
    return out


def assemble_features(metrics, window=None):
    window = window or metrics.window
    if not len(metrics):
        raise DetectError("cannot assemble features from an empty metric set")
    slots = []
    cols = []
    for entity in metrics.entities:
        for metric in SCHEMA[entity.kind]:
            s = metrics.series.get((entity.id, metric))
            if s is None:
                continue
            slots.append((entity, metric))
            cols.append(s.on_grid(window))
    raw = np.column_stack(cols)
    raw.setflags(write=False)
    values = np.round(l2_rows(raw), FEATURE_DECIMALS) + 0.0
    values.setflags(write=False)
    entities = tuple(dict.fromkeys(e for e, _ in slots))
    return FeatureMatrix(entities, tuple(slots), window.grid, values, raw)


# --------------------------------------------------------------------------
# Birch


class _Sub:
    """Leaf subcluster: clustering feature (N, LS, SS) plus a stable id.

    The radius comes from a running centred sum of squares, which stays exact
    for repeated points where ``SS/N - |LS/N|^2`` cancels to rounding noise.
    """

    __slots__ = ("id", "n", "ls", "ss", "m2")

    def __init__(self, sid, x):
        self.id = sid
        self.n = 1
        self.ls = x.copy()
        self.ss = float(x @ x)
        self.m2 = 0.0

    def centroid(self):
        return self.ls / self.n

    def _m2_with(self, x):
        old = self.ls / self.n
        new = (self.ls + x) / (self.n + 1)
        return self.m2 + float((x - old) @ (x - new))

    def merged_radius(self, x):
        return np.sqrt(max(self._m2_with(x), 0.0) / (self.n + 1))

    def radius(self):
        return np.sqrt(max(self.m2, 0.0) / self.n)

    def absorb(self, x):
        self.m2 = self._m2_with(x)
        self.n += 1
        self.ls += x
        self.ss += float(x @ x)


class _Node:
    __slots__ = ("leaf", "entries", "n", "ls")

    def __init__(self, leaf, dim):
        self.leaf = leaf
        self.entries = []  # _Sub for leaves, _Node for internal nodes
        self.n = 0
        self.ls = np.zeros(dim)

    def centroid(self):
        return self.ls / self.n

    def recompute(self):
        self.n = sum(e.n for e in self.entries)
        self.ls = np.sum([e.ls for e in self.entries], axis=0)


def _nearest(entries, x):
    best, best_d = 0, np.inf
    for i, e in enumerate(entries):
        d = float(np.sum((e.ls / e.n - x) ** 2))
        if d < best_d:
            best, best_d = i, d
    return best


class CFTree:
    """Threshold-driven CF tree without a global refinement phase."""

    def __init__(self, threshold, branching=50, dim=1):
        if threshold <= 0:
            raise ValueError("threshold must be positive")
        if branching < 2:
            raise ValueError("branching must be >= 2")
        self.threshold = threshold
        self.branching = branching
        self.dim = dim
        self.root = _Node(True, dim)
        self.subclusters = []

    def insert(self, x):
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        path = []
        node = self.root
        while not node.leaf:
            path.append(node)
            node = node.entries[_nearest(node.entries, x)]
        path.append(node)
        sub = None
        if node.entries:
            cand = node.entries[_nearest(node.entries, x)]
            if cand.merged_radius(x) <= self.threshold:
                cand.absorb(x)
                sub = cand
        if sub is None:
            sub = _Sub(len(self.subclusters), x)
            self.subclusters.append(sub)
            node.entries.append(sub)
        for n in path:
            n.n += 1
            n.ls = n.ls + x
        self._split_up(path)
        return sub.id

    def _split_up(self, path):
        for depth in range(len(path) - 1, -1, -1):
            node = path[depth]
            if len(node.entries) <= self.branching:
                return
            a, b = self._split(node)
            if depth == 0:
                root = _Node(False, self.dim)
                root.entries = [a, b]
                root.recompute()
                self.root = root
            else:
                parent = path[depth - 1]
                i = next(k for k, e in enumerate(parent.entries) if e is node)
                parent.entries[i:i + 1] = [a, b]

    def _split(self, node):
        cents = np.array([e.ls / e.n for e in node.entries])
        d = np.sum((cents[:, None, :] - cents[None, :, :]) ** 2, axis=-1)
        i, j = np.unravel_index(np.argmax(d), d.shape)
        a, b = _Node(node.leaf, self.dim), _Node(node.leaf, self.dim)
        for k, e in enumerate(node.entries):
            (a if d[k, i] <= d[k, j] else b).entries.append(e)
        a.recompute()
        b.recompute()
        return a, b

    @property
    def n_subclusters(self):
        return len(self.subclusters)


def birch_cluster(points, threshold=0.07, branching=50):
    """Insert points in order; returns (leaf subcluster count, assignments)."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        raise ValueError("birch_cluster needs at least one point")
    if pts.ndim == 1:
        pts = pts[:, None]
    tree = CFTree(threshold, branching, dim=pts.shape[1])
    assign = [tree.insert(p) for p in pts]
    return tree.n_subclusters, assign


# --------------------------------------------------------------------------
# anomalies


@dataclass(frozen=True)
class AnomalousSet:
    nodes: tuple
    anomalous_metrics: dict = field(default_factory=dict)
    beta: float = 0.07

    def __post_init__(self):
        for e in self.nodes:
            if not self.anomalous_metrics.get(e.id):
                raise DetectError(f"anomalous node {e.id} lists no anomalous metric")

    @property
    def ids(self):
        return [e.id for e in self.nodes]

    def __len__(self):
        return len(self.nodes)

    def __contains__(self, entity_id):
        return entity_id in self.anomalous_metrics

    def restricted_to(self, node_ids):
        keep = tuple(e for e in self.nodes if e.id in node_ids)
        return AnomalousSet(keep, {e.id: self.anomalous_metrics[e.id] for e in keep}, self.beta)

    def to_dict(self, window=None):
        return {
            "nodes": [{"id": e.id, "kind": e.kind, "metrics": list(self.anomalous_metrics[e.id])}
                      for e in self.nodes],
            "beta": self.beta,
            "window": window.to_dict() if window is not None else None,
        }


def detect_anomalies(features, beta=0.07, mode="slot", branching=50):
    """Flag metric slots whose normalised series splits into more than one Birch subcluster.

    ``mode="rows"`` clusters the per-timestep row vectors instead and blames the
    slots along which the resulting subcluster centroids spread by more than ``beta``.
    """
    m = len(features.metric_slots)
    flagged = np.zeros(m, dtype=bool)
    if mode == "slot":
        for j in range(m):
            count, _ = birch_cluster(features.values[:, j], beta, branching)
            flagged[j] = count > 1
    elif mode == "rows":
        tree = CFTree(beta, branching, dim=m)
        for row in features.values:
            tree.insert(row)
        if tree.n_subclusters > 1:
            cents = np.array([s.centroid() for s in tree.subclusters])
            flagged = (cents.max(axis=0) - cents.min(axis=0)) > beta
    else:
        raise ValueError(f"unknown mode {mode!r}")
    metrics = {}
    for j in np.flatnonzero(flagged):
        e, name = features.metric_slots[j]
        metrics.setdefault(e, []).append(name)
    nodes = tuple(e for e in features.entities if e in metrics)
    return AnomalousSet(nodes, {e.id: tuple(metrics[e]) for e in nodes}, beta)
