"""Heterogeneous dynamic topology stack: one typed graph per constant-topology interval."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .telemetry import INSTANCE, KINDS, SCHEMA, SERVER, SERVICE

CALL, OWNERSHIP, HOSTING = "call", "ownership", "hosting"
EDGE_TYPES = (CALL, OWNERSHIP, HOSTING)
# source and destination kind of each edge type
EDGE_KINDS = {CALL: (SERVICE, SERVICE), OWNERSHIP: (SERVICE, INSTANCE), HOSTING: (INSTANCE, SERVER)}


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class TopologyInterval:
    start: float
    end: float
    snapshot: object
    steps: tuple = ()  # grid index range [k0, k1), filled in by build_stack

    def __post_init__(self):
        if not self.end > self.start:
            raise TopologyError(f"empty interval [{self.start}, {self.end})")


@dataclass
class HeteroGraph:
    nodes: list  # NodeInfo, ordered service, instance, server, then id
    edges: dict  # edge type -> list of (src id, dst id)
    segments: tuple
    node_features: dict  # id -> (timesteps, input_dim)
    anomalous: object
    steps: tuple

    @property
    def ids(self):
        return [n.entity.id for n in self.nodes]

    @property
    def n_steps(self):
        return self.steps[1] - self.steps[0]

    def of_kind(self, kind):
        return [n for n in self.nodes if n.entity.kind == kind]

    def in_neighbors(self, node_id):
        return sorted({a for et in EDGE_TYPES for a, b in self.edges[et] if b == node_id})

    def manifest(self):
        return {
            "steps": list(self.steps),
            "nodes": {k: sum(n.entity.kind == k for n in self.nodes) for k in KINDS},
            "edges": {et: len(self.edges[et]) for et in EDGE_TYPES},
            "anomalous": list(self.anomalous.ids),
        }


@dataclass
class TopologyStack:
    intervals: list
    graphs: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.intervals) != len(self.graphs) or not self.graphs:
            raise TopologyError("stack needs one graph per interval and at least one interval")

    def __len__(self):
        return len(self.graphs)

    def dump(self):
        return {
            "intervals": [{"start": iv.start, "end": iv.end, "steps": list(iv.steps)}
                          for iv in self.intervals],
            "graphs": [g.manifest() for g in self.graphs],
        }

    def write(self, path):
        with open(path, "w") as fh:
            json.dump(self.dump(), fh, indent=2, sort_keys=True)


def detect_change_points(snapshots, window):
    current = None
    later = []
    for s in snapshots:
        if s.at <= window.start:
            current = s
        elif s.at < window.end:
            later.append(s)
    if current is None:
        raise TopologyError(f"no topology snapshot at or before window start {window.start}")
    bounds = [(window.start, current)]
    sig = current.signature()
    for s in later:
        new_sig = s.signature()
        if new_sig != sig:
            if s.at == bounds[-1][0]:
                bounds[-1] = (s.at, s)
            else:
                bounds.append((s.at, s))
            sig = new_sig
    ends = [b[0] for b in bounds[1:]] + [window.end]
    return [TopologyInterval(start, end, snap) for (start, snap), end in zip(bounds, ends)]


def _ordered_nodes(snapshot):
    rank = {SERVICE: 0, INSTANCE: 1, SERVER: 2}
    return sorted(snapshot.nodes, key=lambda n: (rank[n.entity.kind], n.entity.id))


def build_graph(interval, features, anomalies, steps=None):
    if steps is None:
        g = features.grid
        idx = np.flatnonzero((g >= interval.start) & (g < interval.end))
        steps = (int(idx[0]), int(idx[-1]) + 1) if idx.size else (0, 0)
    k0, k1 = steps
    if k1 - k0 < 2:
        raise TopologyError(f"interval [{interval.start}, {interval.end}) covers fewer than 2 timesteps")
    snap = interval.snapshot
    nodes = _ordered_nodes(snap)
    slot = features.slot_index()
    feats = {}
    for n in nodes:
        cols = [slot.get((n.entity.id, m)) for m in SCHEMA[n.entity.kind]]
        if all(c is None for c in cols):
            raise TopologyError(f"node {n.entity.id} has no metric slots")
        block = np.zeros((k1 - k0, len(cols)))
        for i, c in enumerate(cols):
            if c is not None:
                block[:, i] = features.values[k0:k1, c]
        feats[n.entity.id] = block
    edges = {CALL: list(snap.call_edges), OWNERSHIP: list(snap.ownership_edges),
             HOSTING: list(snap.hosting_edges)}
    present = {n.entity.id for n in nodes}
    segments = snap.segments or tuple(sorted({n.segment for n in nodes}))
    return HeteroGraph(nodes, edges, segments, feats, anomalies.restricted_to(present), (k0, k1))


def build_stack(snapshots, features, anomalies, window):
    intervals = detect_change_points(snapshots, window)
    n = window.n_steps
    # snap boundaries to the next grid point
    starts = [min(n, max(0, math.ceil((iv.start - window.start) / window.sample_interval - 1e-9)))
              for iv in intervals]
    spans = [[iv, s, e] for iv, s, e in zip(intervals, starts, starts[1:] + [n])]
    merged = []
    for span in spans:
        if merged and span[2] - span[1] < 2:
            merged[-1][2] = span[2]
        else:
            merged.append(span)
    if len(merged) > 1 and merged[0][2] - merged[0][1] < 2:
        first = merged.pop(0)
        merged[0][1] = first[1]
    final = []
    for iv, s, e in merged:
        start = window.start + s * window.sample_interval
        end = window.start + e * window.sample_interval if e < n else window.end
        final.append(TopologyInterval(start, end, iv.snapshot, (s, e)))
    graphs = [build_graph(iv, features, anomalies, iv.steps) for iv in final]
    return TopologyStack(final, graphs)
