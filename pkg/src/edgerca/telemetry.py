"""Data model and file ingestion for metrics, topology, packets and logs."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

SERVICE, INSTANCE, SERVER = "service", "instance", "server"
KINDS = (SERVICE, INSTANCE, SERVER)

# per-kind metric schema, in column order
SCHEMA = {
    SERVICE: ("latency",),
    INSTANCE: ("cpu", "memory", "net_latency"),
    SERVER: ("cpu", "memory", "net_latency"),
}
UNITS = {"latency": "ms", "cpu": "percent", "memory": "percent", "net_latency": "ms"}

METRICS_HEADER = ["entity_id", "kind", "system", "metric", "timestamp", "value"]


class TelemetryError(ValueError):
    pass


class ParseError(TelemetryError):
    def __init__(self, path, line, msg):
        super().__init__(f"{path}:{line}: {msg}")
        self.line = line


class IngestionError(TelemetryError):
    pass


class ValidationError(TelemetryError):
    pass


@dataclass(frozen=True, order=True)
class EntityRef:
    id: str
    kind: str
    system: str = ""

    def __post_init__(self):
        if not self.id:
            raise ValidationError("entity id must be non-empty")
        if self.kind not in KINDS:
            raise ValidationError(f"unknown entity kind {self.kind!r}")


@dataclass(frozen=True)
class IncidentWindow:
    start: float
    end: float
    sample_interval: float = 5.0

    def __post_init__(self):
        if not self.end > self.start:
            raise ValidationError("window end must be after start")
        if not self.sample_interval > 0:
            raise ValidationError("sample_interval must be positive")

    @classmethod
    def around(cls, onset, before=300.0, after=300.0, sample_interval=5.0):
        return cls(onset - before, onset + after, sample_interval)

    @property
    def n_steps(self):
        return int(round((self.end - self.start) / self.sample_interval))

    @property
    def grid(self):
        return self.start + self.sample_interval * np.arange(self.n_steps)

    def snap(self, ts):
        """Grid index nearest to ``ts``."""
        return int(round((ts - self.start) / self.sample_interval))

    def contains(self, ts):
        return self.start <= ts <= self.end

    def to_dict(self):
        return {"start": self.start, "end": self.end, "sample_interval": self.sample_interval}


@dataclass(frozen=True)
class MetricSeries:
    entity: EntityRef
    metric: str
    timestamps: np.ndarray
    values: np.ndarray
    unit: str = ""

    def __post_init__(self):
        if len(self.timestamps) != len(self.values):
            raise ValidationError(f"{self.entity.id}/{self.metric}: length mismatch")
        if len(self.timestamps) > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise ValidationError(f"{self.entity.id}/{self.metric}: timestamps not increasing")
        if self.metric not in SCHEMA[self.entity.kind]:
            raise ValidationError(f"{self.entity.kind} {self.entity.id} cannot carry {self.metric!r}")
        self.timestamps.setflags(write=False)
        self.values.setflags(write=False)

    @property
    def key(self):
        return (self.entity.id, self.metric)

    def on_grid(self, window):
        """Dense values on the window grid: nearest-point snapping, LOCF fill, leading zeros."""
        n = window.n_steps
        out = np.full(n, np.nan)
        for ts, v in zip(self.timestamps, self.values):
            k = window.snap(ts)
            if k < 0 or k >= n:
                continue
            if not np.isnan(out[k]):
                raise IngestionError(
                    f"{self.entity.id}/{self.metric}: two samples snap to grid point {k}")
            out[k] = v
        last = 0.0
        for k in range(n):
            if np.isnan(out[k]):
                out[k] = last
            else:
                last = out[k]
        return out


@dataclass(frozen=True)
class MetricSeriesSet:
    series: dict
    window: IncidentWindow

    def __post_init__(self):
        for key, s in self.series.items():
            if key != s.key:
                raise ValidationError(f"series keyed {key} but carries {s.key}")

    @classmethod
    def from_series(cls, series, window):
        out = {}
        for s in series:
            if s.key in out:
                raise IngestionError(f"duplicate series {s.key}")
            out[s.key] = s
        return cls(out, window)

    def __len__(self):
        return len(self.series)

    def __iter__(self):
        return iter(self.series.values())

    @property
    def entities(self):
        return sorted({s.entity for s in self.series.values()})

    def sliced(self, window):
        out = []
        for s in self.series.values():
            keep = (s.timestamps >= window.start) & (s.timestamps <= window.end)
            if keep.any():
                out.append(MetricSeries(s.entity, s.metric, s.timestamps[keep].copy(),
                                        s.values[keep].copy(), s.unit))
        return MetricSeriesSet.from_series(out, window)

    def scaled(self, factor):
        return MetricSeriesSet.from_series(
            [MetricSeries(s.entity, s.metric, s.timestamps.copy(), s.values * factor, s.unit)
             for s in self.series.values()], self.window)

    def schema_complete(self):
        have = {}
        for e, m in self.series:
            have.setdefault(e, set()).add(m)
        kinds = {s.entity.id: s.entity.kind for s in self.series.values()}
        return all(have[e] == set(SCHEMA[kinds[e]]) for e in have)


def load_metrics(path, window):
    path = Path(path)
    rows = {}
    kinds = {}
    seen = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != METRICS_HEADER:
            raise ParseError(path, 1, f"expected header {','.join(METRICS_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 6:
                raise ParseError(path, lineno, f"expected 6 fields, got {len(row)}")
            eid, kind, system, metric, ts, value = row
            try:
                ts, value = float(ts), float(value)
                entity = EntityRef(eid, kind, system)
            except (ValueError, ValidationError) as exc:
                raise ParseError(path, lineno, str(exc)) from None
            if metric not in SCHEMA[kind]:
                raise ParseError(path, lineno, f"{kind} cannot carry metric {metric!r}")
            if kinds.setdefault(eid, entity) != entity:
                raise ParseError(path, lineno, f"entity {eid} changes kind or system")
            if (eid, metric, ts) in seen:
                raise IngestionError(f"{path}:{lineno}: duplicate sample for {eid}/{metric} at {ts}")
            seen.add((eid, metric, ts))
            if window.contains(ts):
                rows.setdefault((eid, metric), []).append((ts, value))
    series = []
    for (eid, metric), pts in rows.items():
        pts.sort()
        ts = np.array([p[0] for p in pts])
        vs = np.array([p[1] for p in pts])
        series.append(MetricSeries(kinds[eid], metric, ts, vs, UNITS.get(metric, "")))
    return MetricSeriesSet.from_series(series, window)


def write_metrics(path, metrics):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for key in sorted(metrics.series):
            s = metrics.series[key]
            for ts, v in zip(s.timestamps, s.values):
                w.writerow([s.entity.id, s.entity.kind, s.entity.system, s.metric,
                            repr(float(ts)), repr(float(v))])


# --------------------------------------------------------------------------
# topology


@dataclass(frozen=True)
class Segment:
    name: str
    role: str  # "cloud" | "edge"


@dataclass(frozen=True)
class NodeInfo:
    entity: EntityRef
    segment: str
    host: str | None = None


@dataclass(frozen=True)
class TopologySnapshot:
    at: float
    nodes: tuple
    call_edges: tuple = ()
    ownership_edges: tuple = ()
    hosting_edges: tuple = ()
    segments: tuple = ()

    def __post_init__(self):
        validate_snapshot(self)

    @property
    def node_map(self):
        return {n.entity.id: n for n in self.nodes}

    def signature(self):
        """Everything that defines the topology, for change detection."""
        return (frozenset((n.entity, n.segment, n.host) for n in self.nodes),
                frozenset(self.call_edges), frozenset(self.ownership_edges),
                frozenset(self.hosting_edges))

    def to_dict(self):
        d = {
            "at": self.at,
            "nodes": [dict({"id": n.entity.id, "kind": n.entity.kind, "system": n.entity.system,
                            "segment": n.segment}, **({"host": n.host} if n.host else {}))
                      for n in self.nodes],
            "call_edges": [list(e) for e in self.call_edges],
            "ownership_edges": [list(e) for e in self.ownership_edges],
            "hosting_edges": [list(e) for e in self.hosting_edges],
        }
        if self.segments:
            d["segments"] = [{"name": s.name, "role": s.role} for s in self.segments]
        return d


def validate_snapshot(snap):
    nodes = {}
    for n in snap.nodes:
        if n.entity.id in nodes:
            raise ValidationError(f"duplicate node {n.entity.id} at {snap.at}")
        nodes[n.entity.id] = n
    typed = (("call", snap.call_edges, SERVICE, SERVICE),
             ("ownership", snap.ownership_edges, SERVICE, INSTANCE),
             ("hosting", snap.hosting_edges, INSTANCE, SERVER))
    for label, edges, src_kind, dst_kind in typed:
        for a, b in edges:
            if a not in nodes or b not in nodes:
                raise ValidationError(f"{label} edge ({a}, {b}) has a dangling endpoint at {snap.at}")
            if nodes[a].entity.kind != src_kind or nodes[b].entity.kind != dst_kind:
                raise ValidationError(f"{label} edge ({a}, {b}) joins wrong node kinds")
    hosts = {}
    for a, b in snap.hosting_edges:
        if a in hosts:
            raise ValidationError(f"instance {a} has two hosting edges ({a}, {hosts[a]}), ({a}, {b})")
        hosts[a] = b
    for n in snap.nodes:
        if n.entity.kind != INSTANCE:
            continue
        if n.entity.id not in hosts:
            raise ValidationError(f"instance {n.entity.id} has no hosting server")
        server = nodes[hosts[n.entity.id]]
        if n.host is not None and n.host != server.entity.id:
            raise ValidationError(f"instance {n.entity.id} host field disagrees with hosting edge")
        if n.segment != server.segment:
            raise ValidationError(f"instance {n.entity.id} segment {n.segment} differs from "
                                  f"server {server.entity.id} segment {server.segment}")
    if snap.segments:
        names = [s.name for s in snap.segments]
        if len(set(names)) != len(names):
            raise ValidationError("segment names must be unique")
        if not any(s.role == "cloud" for s in snap.segments):
            raise ValidationError("at least one cloud segment is required")


def _infer_segments(nodes):
    names = sorted({n.segment for n in nodes if n.segment})
    return tuple(Segment(s, "cloud" if "cloud" in s.lower() else "edge") for s in names)


def snapshot_from_dict(d):
    nodes = []
    for n in d["nodes"]:
        nodes.append(NodeInfo(EntityRef(n["id"], n["kind"], n.get("system", "")),
                              n.get("segment", ""), n.get("host")))
    if "segments" in d:
        segments = tuple(Segment(s["name"], s["role"]) for s in d["segments"])
    else:
        segments = _infer_segments(nodes)
    return TopologySnapshot(
        at=float(d["at"]), nodes=tuple(nodes),
        call_edges=tuple(tuple(e) for e in d.get("call_edges", [])),
        ownership_edges=tuple(tuple(e) for e in d.get("ownership_edges", [])),
        hosting_edges=tuple(tuple(e) for e in d.get("hosting_edges", [])),
        segments=segments)


def load_topology(path):
    path = Path(path)
    snaps = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(path, lineno, str(exc)) from None
            try:
                snap = snapshot_from_dict(d)
            except KeyError as exc:
                raise ParseError(path, lineno, f"missing key {exc}") from None
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
            if snaps and snap.at < snaps[-1].at:
                raise ParseError(path, lineno, "snapshot timestamps must be non-decreasing")
            snaps.append(snap)
    return snaps


def write_topology(path, snapshots):
    with open(path, "w") as fh:
        for s in snapshots:
            fh.write(json.dumps(s.to_dict(), sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# packets


@dataclass(frozen=True, order=True)
class Address:
    addr: str
    kind: str = "host"  # host | container
    segment: str = ""

    def __str__(self):
        return f"{self.kind}:{self.addr}@{self.segment}"

    @classmethod
    def parse(cls, text):
        """Inverse of ``str()``: ``kind:addr@segment``."""
        kind, _, rest = text.partition(":")
        addr, _, seg = rest.partition("@")
        if kind not in ("host", "container") or not addr:
            raise ValueError(f"bad address {text!r}")
        return cls(addr, kind, seg)


@dataclass(frozen=True)
class PacketRecord:
    ts: float
    proto: str
    src: Address
    dst: Address
    seq: int | None = None
    ack: int | None = None
    payload_len: int = 0
    flags: frozenset = frozenset()
    direction: str | None = None

    def __post_init__(self):
        if self.ts < 0:
            raise ValidationError("packet ts must be >= 0")
        if self.proto == "TCP" and self.seq is None:
            raise ValidationError("TCP record without seq")
        if self.proto == "UDP" and self.direction not in ("request", "response"):
            raise ValidationError("UDP record needs direction request|response")
        if self.proto not in ("TCP", "UDP"):
            raise ValidationError(f"unknown protocol {self.proto!r}")

    def to_dict(self):
        d = {"ts": self.ts, "proto": self.proto,
             "src": {"addr": self.src.addr, "kind": self.src.kind, "segment": self.src.segment},
             "dst": {"addr": self.dst.addr, "kind": self.dst.kind, "segment": self.dst.segment},
             "payload_len": self.payload_len, "flags": sorted(self.flags)}
        if self.seq is not None:
            d["seq"] = self.seq
        if self.ack is not None:
            d["ack"] = self.ack
        if self.direction is not None:
            d["direction"] = self.direction
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(ts=float(d["ts"]), proto=d["proto"],
                   src=Address(d["src"]["addr"], d["src"].get("kind", "host"), d["src"].get("segment", "")),
                   dst=Address(d["dst"]["addr"], d["dst"].get("kind", "host"), d["dst"].get("segment", "")),
                   seq=d.get("seq"), ack=d.get("ack"), payload_len=int(d.get("payload_len", 0)),
                   flags=frozenset(f for f in d.get("flags", []) if f != "none"),
                   direction=d.get("direction"))


def load_packets(path, window):
    path = Path(path)
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = PacketRecord.from_dict(json.loads(line))
            except (json.JSONDecodeError, KeyError, ValidationError, TypeError) as exc:
                raise ParseError(path, lineno, str(exc)) from None
            if window.contains(rec.ts):
                out.append(rec)
    out.sort(key=lambda r: r.ts)
    return out


def write_packets(path, packets):
    with open(path, "w") as fh:
        for p in packets:
            fh.write(json.dumps(p.to_dict(), sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# logs


@dataclass(frozen=True)
class RawLogLine:
    ts: float | None
    source: str
    text: str

    def __post_init__(self):
        if not self.text.strip():
            raise ValidationError("empty log line")


def split_timestamp(line):
    """Peel an optional leading ISO-8601 timestamp off a log line."""
    head, _, rest = line.partition(" ")
    try:
        ts = datetime.fromisoformat(head.replace("Z", "+00:00")).timestamp()
    except ValueError:
        return None, line
    return ts, rest


def load_logs(path, source=""):
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line.strip():
                continue
            ts, text = split_timestamp(line)
            out.append(RawLogLine(ts, source, text))
    return out


# --------------------------------------------------------------------------
# bundles

BUNDLE_FILES = ("bundle.json", "metrics.csv", "topology.jsonl", "packets.jsonl", "kernel.log")


@dataclass
class Bundle:
    window: IncidentWindow
    metrics: MetricSeriesSet
    snapshots: list
    packets: list
    logs: list
    meta: dict = field(default_factory=dict)


class BundleError(TelemetryError):
    pass


def load_bundle(path):
    path = Path(path)
    missing = [f for f in BUNDLE_FILES if not (path / f).exists()]
    if missing:
        raise BundleError(f"bundle {path} is missing {', '.join(missing)}")
    meta = json.loads((path / "bundle.json").read_text())
    window = IncidentWindow(**meta["window"])
    return Bundle(
        window=window,
        metrics=load_metrics(path / "metrics.csv", window),
        snapshots=load_topology(path / "topology.jsonl"),
        packets=load_packets(path / "packets.jsonl", window),
        logs=load_logs(path / "kernel.log", source=path.name),
        meta=meta,
    )
