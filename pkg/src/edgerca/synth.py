"""Seeded desk-scale incident bundles for cloud-edge hybrid deployments.

A bundle holds topology snapshots, a 5 s metric grid over a 600 s window,
per-key packet streams and the matching kernel log, plus the ground truth of
the injected failure. Everything is a pure function of the scenario and seed.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import telemetry as tm
from .kerneldetect import TrafficKey, key_for
from .logparse import format_tcp_line, format_udp_line
from .telemetry import (INSTANCE, SERVER, SERVICE, Address, EntityRef, IncidentWindow,
                        MetricSeries, MetricSeriesSet, NodeInfo, PacketRecord, Segment,
                        TopologySnapshot)

KERNEL_KINDS = ("loss", "duplication", "corruption", "reorder", "delay", "jitter")
APP_KINDS = ("cpu", "memory", "net_latency")
ALL_KINDS = tuple(("kernel", k) for k in KERNEL_KINDS) + tuple(("application", k) for k in APP_KINDS)

CALLER_ATTENUATION = 0.6
COHOST_ATTENUATION = 0.3
EPOCH0 = 1_700_000_000.0


class SpecError(ValueError):
    pass


@dataclass
class SystemSpec:
    name: str
    n_services: int


@dataclass
class FailureSpec:
    level: str  # kernel | application
    kind: str
    target: str | None = None  # instance id, or "src|dst" traffic key; None picks one from the seed
    onset_offset: float = 300.0  # seconds after window start
    duration: float = 150.0
    rate: float = 0.3  # kernel: fraction of affected packets
    delta: float | None = None  # application: metric shift, kind default if None

    def __post_init__(self):
        valid = KERNEL_KINDS if self.level == "kernel" else APP_KINDS if self.level == "application" else ()
        if self.kind not in valid:
            raise SpecError(f"failure kind {self.kind!r} invalid for level {self.level!r}")
        if not 120 <= self.duration <= 180:
            raise SpecError("failure duration must be within [120, 180] s")


@dataclass
class ScaleEvent:
    offset: float  # seconds after window start
    service: str
    action: str = "add"  # add | remove


DEFAULT_DELTAS = {"cpu": 65.0, "memory": 60.0, "net_latency": 55.0}


@dataclass
class ScenarioSpec:
    systems: list = field(default_factory=lambda: [SystemSpec("shop", 4), SystemSpec("books", 3)])
    segments: list = field(default_factory=lambda: [Segment("cloud", "cloud"), Segment("edge-1", "edge"),
                                                    Segment("edge-2", "edge")])
    servers_per_segment: dict = field(default_factory=lambda: {"cloud": 2, "edge-1": 1, "edge-2": 1})
    placement: dict = field(default_factory=dict)  # service -> segment; unset ones drawn from the seed
    max_replicas: int = 2
    cross_system_calls: int = 1
    latency_ms: tuple = (8.0, 25.0)
    cpu_pct: tuple = (10.0, 30.0)
    memory_pct: tuple = (20.0, 35.0)
    intra_rtt_ms: tuple = (0.5, 2.0)
    cross_segment_latency_inflation: float = 10.0
    noise: float = 0.05
    tcp_segments_per_key: int = 100
    udp_exchanges_per_key: int = 60
    scale_events: list = field(default_factory=list)
    failure: FailureSpec | None = None
    seed: int = 0
    start: float = EPOCH0
    sample_interval: float = 5.0

    def __post_init__(self):
        if len(self.systems) < 1:
            raise SpecError("need at least one microservice system")
        if not self.cross_segment_latency_inflation > 1:
            raise SpecError("cross-segment latency inflation must exceed 1")
        names = {s.name for s in self.segments}
        if len(names) != len(self.segments):
            raise SpecError("segment names must be unique")
        if not any(s.role == "cloud" for s in self.segments):
            raise SpecError("need a cloud segment")
        for svc, seg in self.placement.items():
            if seg not in names:
                raise SpecError(f"placement of {svc} references unknown segment {seg!r}")
        for seg in self.servers_per_segment:
            if seg not in names:
                raise SpecError(f"servers_per_segment references unknown segment {seg!r}")

    @property
    def alpha(self):
        return len(self.systems)

    @property
    def window(self):
        return IncidentWindow(self.start, self.start + 600.0, self.sample_interval)


def spec_from_dict(d):
    d = dict(d)
    if "systems" in d:
        d["systems"] = [SystemSpec(**s) for s in d["systems"]]
    if "segments" in d:
        d["segments"] = [Segment(**s) for s in d["segments"]]
    if d.get("failure") is not None:
        d["failure"] = FailureSpec(**d["failure"])
    if "scale_events" in d:
        d["scale_events"] = [ScaleEvent(**e) for e in d["scale_events"]]
    for k in ("latency_ms", "cpu_pct", "memory_pct", "intra_rtt_ms"):
        if k in d:
            d[k] = tuple(d[k])
    try:
        return ScenarioSpec(**d)
    except TypeError as exc:
        raise SpecError(str(exc)) from None


def spec_to_dict(spec):
    return json.loads(json.dumps(asdict(spec)))


# --------------------------------------------------------------------------
# topology


@dataclass
class World:
    services: list  # EntityRef
    segment_of: dict  # node id -> segment
    servers: list
    instances: dict  # service id -> [instance ids], current replicas
    host_of: dict  # instance id -> server id
    calls: list  # (caller, callee)
    base: dict  # (id, metric) -> baseline mean
    rtt: dict  # frozenset(segment pair) -> ms
    addr: dict  # node id -> ip
    system_of: dict
    spare: int = 0


def _build_world(spec, rng):
    segs = [s.name for s in spec.segments]
    servers = []
    segment_of = {}
    system_of = {}
    for seg in segs:
        for k in range(spec.servers_per_segment.get(seg, 1)):
            sid = f"{seg}-node-{k + 1}"
            servers.append(sid)
            segment_of[sid] = seg
    services = []
    calls = []
    for sysspec in spec.systems:
        names = [f"{sysspec.name}-svc{i}" for i in range(sysspec.n_services)]
        for i, name in enumerate(names):
            services.append(EntityRef(name, SERVICE, sysspec.name))
            system_of[name] = sysspec.name
            if i > 0:
                calls.append((names[int(rng.integers(0, i))], name))
            seg = spec.placement.get(name)
            segment_of[name] = seg if seg is not None else segs[int(rng.integers(0, len(segs)))]
    # direct dependencies across systems
    by_sys = {}
    for s in services:
        by_sys.setdefault(s.system, []).append(s.id)
    sys_names = list(by_sys)
    if len(sys_names) > 1:
        for k in range(spec.cross_system_calls):
            a = sys_names[k % len(sys_names)]
            b = sys_names[(k + 1) % len(sys_names)]
            caller = by_sys[a][int(rng.integers(0, len(by_sys[a])))]
            callee = by_sys[b][1 + int(rng.integers(0, len(by_sys[b]) - 1))] if len(by_sys[b]) > 1 else by_sys[b][0]
            if (caller, callee) not in calls:
                calls.append((caller, callee))
    instances = {}
    host_of = {}
    for s in services:
        seg = segment_of[s.id]
        local = [sv for sv in servers if segment_of[sv] == seg]
        if not local:
            raise SpecError(f"segment {seg} has no servers for {s.id}")
        reps = int(rng.integers(1, spec.max_replicas + 1))
        instances[s.id] = []
        for r in range(reps):
            iid = f"{s.id}-{r}"
            instances[s.id].append(iid)
            host_of[iid] = local[int(rng.integers(0, len(local)))]
            segment_of[iid] = seg
            system_of[iid] = s.system
    for sv in servers:
        system_of[sv] = ""
    rtt = {}
    for i, a in enumerate(segs):
        for b in segs[i:]:
            base = float(rng.uniform(*spec.intra_rtt_ms))
            rtt[frozenset((a, b))] = base if a == b else base * spec.cross_segment_latency_inflation
    addr = {}
    for k, sv in enumerate(servers):
        addr[sv] = f"10.{segs.index(segment_of[sv])}.0.{k + 1}"
    w = World(services, segment_of, servers, instances, host_of, calls, {}, rtt, addr, system_of)
    for iid in list(host_of):
        _add_instance_addr(w, iid)
    _baselines(w, spec, rng)
    return w


def _add_instance_addr(w, iid):
    seg_idx = sorted({s for s in w.segment_of.values()}).index(w.segment_of[iid])
    w.addr[iid] = f"172.{16 + seg_idx}.{len(w.addr) // 250}.{len(w.addr) % 250 + 2}"


def _instance_net(w, iid):
    """Mean RTT over the links this instance's service uses for its calls."""
    svc = iid.rsplit("-", 1)[0]
    seg = w.segment_of[iid]
    peers = [b for a, b in w.calls if a == svc] + [a for a, b in w.calls if b == svc]
    if not peers:
        return w.rtt[frozenset((seg, seg))]
    return float(np.mean([w.rtt[frozenset((seg, w.segment_of[p]))] for p in peers]))


def _baselines(w, spec, rng):
    own = {s.id: float(rng.uniform(*spec.latency_ms)) for s in w.services}

    def latency(svc, seen=()):
        total = own[svc]
        for a, b in w.calls:
            if a == svc and b not in seen:
                total += 0.5 * latency(b, seen + (svc,)) + call_rtt(w, a, b)
        return total

    for s in w.services:
        w.base[(s.id, "latency")] = latency(s.id)
    for svc, insts in w.instances.items():
        for iid in insts:
            _instance_baseline(w, spec, rng, iid)
    for sv in w.servers:
        w.base[(sv, "memory")] = float(rng.uniform(*spec.memory_pct))
        w.base[(sv, "net_latency")] = w.rtt[frozenset((w.segment_of[sv], w.segment_of[sv]))]


def _instance_baseline(w, spec, rng, iid):
    w.base[(iid, "cpu")] = float(rng.uniform(*spec.cpu_pct))
    w.base[(iid, "memory")] = float(rng.uniform(*spec.memory_pct))
    w.base[(iid, "net_latency")] = _instance_net(w, iid)


def call_rtt(w, caller, callee):
    return w.rtt[frozenset((w.segment_of[caller], w.segment_of[callee]))]


def _snapshot(w, spec, at):
    segs = tuple(spec.segments)
    nodes = []
    for s in w.services:
        nodes.append(NodeInfo(s, w.segment_of[s.id]))
    own, host = [], []
    for s in w.services:
        for iid in w.instances[s.id]:
            nodes.append(NodeInfo(EntityRef(iid, INSTANCE, s.system), w.segment_of[iid], w.host_of[iid]))
            own.append((s.id, iid))
            host.append((iid, w.host_of[iid]))
    for sv in w.servers:
        nodes.append(NodeInfo(EntityRef(sv, SERVER, ""), w.segment_of[sv]))
    return TopologySnapshot(at, tuple(nodes), tuple(w.calls), tuple(own), tuple(host), segs)


# --------------------------------------------------------------------------
# failures on metrics


def upstream_hops(calls, service):
    """Caller distance from ``service`` (the service itself at 0)."""
    hops = {service: 0}
    frontier = [service]
    while frontier:
        nxt = []
        for s in frontier:
            for a, b in calls:
                if b == s and a not in hops:
                    hops[a] = hops[s] + 1
                    nxt.append(a)
        frontier = nxt
    return hops


def _metric_effects(w, spec, failure, target):
    """(id, metric) -> (additive shift, shape) for an application failure."""
    delta = failure.delta if failure.delta is not None else DEFAULT_DELTAS[failure.kind]
    metric = failure.kind
    shape = "ramp" if metric == "memory" else "step"
    eff = {(target, metric): (delta, shape)}
    svc = target.rsplit("-", 1)[0]
    for other in (i for i, h in w.host_of.items() if h == w.host_of[target] and i != target):
        eff[(other, metric)] = (COHOST_ATTENUATION * delta, shape)
    # the failure's delta is read as milliseconds of extra response time at the owning service
    for s, hop in upstream_hops(w.calls, svc).items():
        eff[(s, "latency")] = (CALLER_ATTENUATION ** hop * delta, shape)
    return eff


def _shape(kind, t, onset, duration):
    on = (t >= onset) & (t < onset + duration)
    if kind == "step":
        return on.astype(float)
    ramp = np.clip((t - onset) / 15.0, 0.0, 1.0)
    return np.where(on, ramp, 0.0)


# --------------------------------------------------------------------------
# packets


def _tcp_stream(rng, a, b, t0, t1, n, rtt):
    out = []
    seq = int(rng.integers(1, 2 ** 20))
    times = np.sort(rng.uniform(t0, t1, size=n))
    out.append(dict(ts=float(times[0]) - 0.01, src=a, dst=b, seq=seq, ack=None, n=0, flags={"SYN"}))
    out.append(dict(ts=float(times[0]) - 0.01 + rtt, src=b, dst=a, seq=7000, ack=seq + 1,
                    n=0, flags={"SYN", "ACK"}))
    seq += 1
    for t in times:
        length = int(rng.integers(40, 1400))
        out.append(dict(ts=float(t), src=a, dst=b, seq=seq, ack=7001, n=length, flags={"ACK"}))
        out.append(dict(ts=float(t) + rtt, src=b, dst=a, seq=7001, ack=seq + length, n=0, flags={"ACK"},
                        acks=True))
        seq += length
    return out


def _udp_stream(rng, a, b, t0, t1, n, rtt):
    out = []
    for t in np.sort(rng.uniform(t0, t1, size=n)):
        out.append(dict(ts=float(t), src=a, dst=b, n=64, direction="request"))
        out.append(dict(ts=float(t) + rtt, src=b, dst=a, n=128, direction="response"))
    return out


def _perturb(rng, records, proto, kind, rate, lo, hi):
    """Apply a kernel failure kind to the records timed within [lo, hi)."""
    out = []
    i = 0
    recs = sorted(records, key=lambda r: r["ts"])
    while i < len(recs):
        r = recs[i]
        hit = lo <= r["ts"] < hi and rng.random() < rate
        if not hit:
            out.append(r)
        elif kind == "loss":
            pass
        elif kind == "duplication":
            out.append(r)
            out.append(dict(r, ts=r["ts"] + 1e-4))
        elif kind == "corruption":
            if proto == "TCP" and r.get("acks"):
                out.append(dict(r, ack=(r["ack"] ^ 0x5A5A) or 1))
            elif proto == "TCP" and r["n"] > 0:
                out.append(r)  # captured on the wire, discarded by the receiver
                _drop_ack_of(recs, i, r)
            elif proto == "UDP" and r["direction"] == "request":
                out.append(r)
                _drop_response_of(recs, i)
            # corrupted UDP responses are discarded before reaching the client
        elif kind == "reorder":
            if proto == "TCP" and r["n"] > 0:
                _reorder(recs, i, r)
            out.append(r)
        elif kind == "delay":
            out.append(dict(r, ts=r["ts"] + 1.5))
        elif kind == "jitter":
            out.append(dict(r, ts=r["ts"] + float(rng.uniform(0.0, 3.0))))
        i += 1
    return out


def _drop_ack_of(recs, i, data):
    want = data["seq"] + data["n"]
    for j in range(i + 1, len(recs)):
        if recs[j].get("acks") and recs[j]["ack"] == want and recs[j]["src"] == data["dst"]:
            recs[j] = dict(recs[j], dropped=True)
            return


def _drop_response_of(recs, i):
    req = recs[i]
    for j in range(i + 1, len(recs)):
        r = recs[j]
        if r.get("direction") == "response" and r["src"] == req["dst"] and not r.get("dropped"):
            recs[j] = dict(r, dropped=True)
            return


def _reorder(recs, i, data):
    """Segment arrives after its successor: the receiver's ack for it is
    replaced by a duplicate ack, and the successor's ack becomes cumulative."""
    want = data["seq"] + data["n"]
    for j in range(i + 1, len(recs)):
        r = recs[j]
        if r.get("acks") and r["ack"] == want and r["src"] == data["dst"]:
            recs[j] = dict(r, ack=data["seq"])
            return


def _records_to_packets(recs, proto):
    out = []
    for r in recs:
        if r.get("dropped"):
            continue
        if proto == "TCP":
            out.append(PacketRecord(ts=round(r["ts"], 6), proto="TCP", src=r["src"], dst=r["dst"],
                                    seq=r["seq"], ack=r["ack"], payload_len=r["n"],
                                    flags=frozenset(r["flags"])))
        else:
            out.append(PacketRecord(ts=round(r["ts"], 6), proto="UDP", src=r["src"], dst=r["dst"],
                                    payload_len=r["n"], direction=r["direction"]))
    return out


def traffic_pairs(w):
    """(Address a, Address b, rtt ms) for every monitored key."""
    pairs = []
    for i, s1 in enumerate(w.servers):
        for s2 in w.servers[i + 1:]:
            a = Address(w.addr[s1], "host", w.segment_of[s1])
            b = Address(w.addr[s2], "host", w.segment_of[s2])
            pairs.append((a, b, w.rtt[frozenset((a.segment, b.segment))]))
    master = w.servers[0]
    for svc, insts in sorted(w.instances.items()):
        for iid in insts:
            a = Address(w.addr[iid], "container", w.segment_of[iid])
            b = Address(w.addr[master], "host", w.segment_of[master])
            pairs.append((a, b, w.rtt[frozenset((a.segment, b.segment))]))
    for caller, callee in w.calls:
        ia, ib = w.instances[caller][0], w.instances[callee][0]
        a = Address(w.addr[ia], "container", w.segment_of[ia])
        b = Address(w.addr[ib], "container", w.segment_of[ib])
        pairs.append((a, b, w.rtt[frozenset((a.segment, b.segment))]))
    return pairs


# --------------------------------------------------------------------------
# bundle


@dataclass
class GroundTruth:
    target: str
    kind_of_target: str  # instance | traffic_key
    level: str
    kind: str
    onset: float
    duration: float
    key: dict | None = None

    def to_dict(self):
        d = {"target": self.target, "target_type": self.kind_of_target, "level": self.level,
             "kind": self.kind, "onset": self.onset, "duration": self.duration}
        if self.key is not None:
            d["key"] = self.key
        return d


@dataclass
class GeneratedBundle:
    spec: ScenarioSpec
    bundle: tm.Bundle
    truth: GroundTruth | None
    world: World
    manifest: dict


def _pick_instance(w, rng):
    ids = sorted(w.host_of)
    return ids[int(rng.integers(0, len(ids)))]


def generate_bundle(spec):
    rng = np.random.default_rng(spec.seed)
    w = _build_world(spec, rng)
    window = spec.window
    grid = window.grid
    failure = spec.failure
    onset = window.start + (failure.onset_offset if failure else 300.0)

    # topology with scale events; snapshots every 60 s plus one just before the window
    events = sorted(spec.scale_events, key=lambda e: e.offset)
    births = {iid: window.start - 60.0 for iid in w.host_of}
    deaths = {}
    snaps = [_snapshot(w, spec, window.start - 5.0)]
    times = sorted({window.start + 60.0 * k for k in range(1, 10)} | {window.start + e.offset for e in events})
    ev = 0
    for t in times:
        while ev < len(events) and window.start + events[ev].offset <= t:
            _apply_scale(w, spec, rng, events[ev], window.start + events[ev].offset, births, deaths)
            ev += 1
        snaps.append(_snapshot(w, spec, t))

    truth = None
    effects = {}
    key_target = None
    if failure is not None and failure.level == "application":
        target = failure.target or _pick_instance(w, rng)
        if target not in w.host_of:
            raise SpecError(f"unknown target instance {target!r}")
        effects = _metric_effects(w, spec, failure, target)
        truth = GroundTruth(target, "instance", "application", failure.kind, onset, failure.duration)

    # metrics
    series = []
    server_load = {sv: np.zeros(len(grid)) for sv in w.servers}
    server_mem = {sv: np.zeros(len(grid)) for sv in w.servers}
    instance_rows = {}
    for (nid, metric), mean in sorted(w.base.items()):
        if nid in w.servers:
            continue
        values = mean * (1.0 + spec.noise * rng.standard_normal(len(grid)))
        if (nid, metric) in effects:
            shift, shape = effects[(nid, metric)]
            values = values + shift * _shape(shape, grid, onset, failure.duration)
        if metric in ("cpu", "memory"):
            values = np.clip(values, 0.0, 100.0)
        values = np.maximum(values, 0.0)
        instance_rows[(nid, metric)] = values
    for (nid, metric), values in instance_rows.items():
        alive = (grid >= births.get(nid, -np.inf)) & (grid < deaths.get(nid, np.inf))
        if nid in w.host_of:
            host = w.host_of[nid]
            if metric == "cpu":
                server_load[host] += np.where(alive, values, 0.0)
            elif metric == "memory":
                server_mem[host] += np.where(alive, values, 0.0)
        kind = SERVICE if metric == "latency" else INSTANCE
        ent = EntityRef(nid, kind, w.system_of[nid])
        series.append(MetricSeries(ent, metric, grid[alive].copy(), values[alive].copy(), tm.UNITS[metric]))
    for sv in w.servers:
        ent = EntityRef(sv, SERVER, "")
        cpu = np.clip(5.0 + 0.5 * server_load[sv] * (1.0 + spec.noise * rng.standard_normal(len(grid))), 0, 100)
        mem = np.clip(w.base[(sv, "memory")] * (1.0 + spec.noise * rng.standard_normal(len(grid)))
                      + 0.25 * server_mem[sv], 0, 100)
        net = w.base[(sv, "net_latency")] * (1.0 + spec.noise * rng.standard_normal(len(grid)))
        for metric, vals in (("cpu", cpu), ("memory", mem), ("net_latency", np.maximum(net, 0.0))):
            series.append(MetricSeries(ent, metric, grid.copy(), vals, tm.UNITS[metric]))
    metrics = MetricSeriesSet.from_series(series, window)

    # packets
    pairs = traffic_pairs(w)
    if failure is not None and failure.level == "kernel":
        keys = [key_for(PacketRecord(0.0, "UDP", a, b, direction="request")) for a, b, _ in pairs]
        if failure.target:
            idx = next((i for i, k in enumerate(keys) if f"{k.src}|{k.dst}" == failure.target), None)
            if idx is None:
                raise SpecError(f"unknown traffic key {failure.target!r}")
        else:
            cross = [i for i, k in enumerate(keys) if k.cross_segment and k.granularity == "HostPair"]
            idx = cross[int(rng.integers(0, len(cross)))]
        key_target = keys[idx]
        truth = GroundTruth(f"{key_target.src}|{key_target.dst}", "traffic_key", "kernel", failure.kind,
                            onset, failure.duration, key_target.to_dict())
    packets = []
    lo, hi = window.start + 1.0, window.end - 5.0
    for i, (a, b, rtt) in enumerate(pairs):
        tcp = _tcp_stream(rng, a, b, lo, hi, spec.tcp_segments_per_key, rtt / 1000.0)
        udp = _udp_stream(rng, a, b, lo, hi, spec.udp_exchanges_per_key, rtt / 1000.0)
        if key_target is not None and key_for(PacketRecord(0.0, "UDP", a, b, direction="request")) == key_target:
            tcp = _perturb(rng, tcp, "TCP", failure.kind, failure.rate, onset, onset + failure.duration)
            udp = _perturb(rng, udp, "UDP", failure.kind, failure.rate, onset, onset + failure.duration)
        packets += _records_to_packets(tcp, "TCP") + _records_to_packets(udp, "UDP")
    packets = [p for p in packets if window.contains(p.ts)]
    packets.sort(key=lambda p: (p.ts, p.proto, str(p.src), str(p.dst), p.seq or 0))
    logs = [tm.RawLogLine(p.ts, "kernel", format_tcp_line(p) if p.proto == "TCP" else format_udp_line(p))
            for p in packets]

    meta = {"window": window.to_dict(), "systems": [s.name for s in spec.systems], "seed": spec.seed,
            "alpha": spec.alpha}
    bundle = tm.Bundle(window, metrics, snaps, packets, logs, meta)
    manifest = {
        "services": len(w.services),
        "instances": sum(len(v) for v in w.instances.values()),
        "servers": len(w.servers),
        "segments": len(spec.segments),
        "call_edges": len(w.calls),
        "snapshots": len(snaps),
        "change_points": [window.start + e.offset for e in events],
    }
    return GeneratedBundle(spec, bundle, truth, w, manifest)


def _apply_scale(w, spec, rng, event, at, births, deaths):
    svc = event.service
    if svc not in w.instances:
        raise SpecError(f"scale event for unknown service {svc!r}")
    if event.action == "add":
        w.spare += 1
        iid = f"{svc}-{len(w.instances[svc]) + 10 * w.spare}"
        seg = w.segment_of[svc]
        local = [sv for sv in w.servers if w.segment_of[sv] == seg]
        w.instances[svc].append(iid)
        w.host_of[iid] = local[int(rng.integers(0, len(local)))]
        w.segment_of[iid] = seg
        w.system_of[iid] = w.system_of[svc]
        _add_instance_addr(w, iid)
        _instance_baseline(w, spec, rng, iid)
        births[iid] = at
    elif event.action == "remove":
        if len(w.instances[svc]) < 2:
            raise SpecError(f"cannot remove the last instance of {svc}")
        iid = w.instances[svc].pop()
        deaths[iid] = at
    else:
        raise SpecError(f"unknown scale action {event.action!r}")


def _iso(ts):
    return datetime.fromtimestamp(ts, tz=timezone.utc).isoformat(timespec="microseconds")


def write_bundle(gen, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    b = gen.bundle
    (out / "bundle.json").write_text(json.dumps(b.meta, indent=2, sort_keys=True) + "\n")
    tm.write_metrics(out / "metrics.csv", b.metrics)
    tm.write_topology(out / "topology.jsonl", b.snapshots)
    tm.write_packets(out / "packets.jsonl", b.packets)
    with open(out / "kernel.log", "w") as fh:
        for line in b.logs:
            fh.write(f"{_iso(line.ts)} {line.text}\n")
    if gen.truth is not None:
        (out / "ground_truth.json").write_text(json.dumps(gen.truth.to_dict(), indent=2, sort_keys=True) + "\n")
    return out


def generate_corpus(base, n, seeds=None, matrix=ALL_KINDS):
    """``n`` bundles cycling round-robin through ``matrix`` of (level, kind)."""
    if n < 1:
        raise SpecError("corpus size must be >= 1")
    seeds = list(seeds) if seeds is not None else [base.seed + i for i in range(n)]
    if len(set(seeds)) != len(seeds) or len(seeds) < n:
        raise SpecError("corpus seeds must be distinct and at least n")
    out = []
    for i in range(n):
        level, kind = matrix[i % len(matrix)]
        prev = base.failure
        failure = FailureSpec(level, kind, None,
                              prev.onset_offset if prev else 300.0,
                              prev.duration if prev else 150.0,
                              prev.rate if prev else 0.3)
        out.append(generate_bundle(replace(base, failure=failure, seed=seeds[i])))
    return out
