"""Kernel-level failure detection by transport-layer packet matching.

TCP data packets are matched to the acknowledgement that covers them
(``ack == seq + len``); UDP requests are matched to a response inside an RTT
bound. Keys whose match rate drops under the threshold are named as culprits.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field

HOST_PAIR = "HostPair"
CONTAINER_HOST = "ContainerHost"
CONTAINER_PAIR = "ContainerPair"

SEQ_MOD = 2 ** 32


class ConfigError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class TrafficKey:
    granularity: str
    src: str
    dst: str
    segments: tuple

    @property
    def cross_segment(self):
        return self.segments[0] != self.segments[1]

    def to_dict(self):
        return {"granularity": self.granularity, "src": self.src, "dst": self.dst,
                "segments": list(self.segments)}


def key_for(packet):
    """Direction-independent key; the container end goes first for container-host pairs."""
    a, b = packet.src, packet.dst
    kinds = {a.kind, b.kind}
    if kinds == {"host"}:
        gran = HOST_PAIR
    elif kinds == {"container"}:
        gran = CONTAINER_PAIR
    else:
        gran = CONTAINER_HOST
    if gran == CONTAINER_HOST:
        if a.kind != "container":
            a, b = b, a
    elif (b.addr, b.segment) < (a.addr, a.segment):
        a, b = b, a
    return TrafficKey(gran, a.addr, b.addr, (a.segment, b.segment))


def group_by_key(packets):
    out = defaultdict(list)
    for p in packets:
        out[key_for(p)].append(p)
    for ps in out.values():
        ps.sort(key=lambda p: p.ts)
    return dict(out)


@dataclass
class MatchReport:
    key: TrafficKey | None
    matched: int = 0
    unmatched_seq: list = field(default_factory=list)
    unmatched_req: list = field(default_factory=list)
    duplicates: int = 0
    # (ts, proto, status, seq or ts) per initiating packet; status is matched, orphan or duplicate
    outcomes: list = field(default_factory=list, repr=False)

    def _count(self, proto, status):
        return sum(1 for o in self.outcomes if o[1] == proto and o[2] == status)

    @property
    def orphans(self):
        return len(self.unmatched_seq) + len(self.unmatched_req)

    @property
    def match_rate(self):
        total = self.matched + self.orphans
        return self.matched / total if total else 1.0

    @property
    def duplicate_rate(self):
        total = self.matched + self.orphans
        return self.duplicates / total if total else 0.0

    def protocol_rate(self, proto):
        ok = self._count(proto, "matched")
        total = ok + self._count(proto, "orphan")
        return ok / total if total else 1.0

    @property
    def health(self):
        """Worst of the per-protocol match rates and the TCP non-duplicate share."""
        tcp = sum(1 for o in self.outcomes if o[1] == "TCP")
        dup = self.duplicates / tcp if tcp else self.duplicate_rate
        return min(self.match_rate, self.protocol_rate("TCP"), self.protocol_rate("UDP"), 1.0 - dup)

    def merged(self, other):
        return MatchReport(self.key or other.key, self.matched + other.matched,
                           self.unmatched_seq + other.unmatched_seq,
                           self.unmatched_req + other.unmatched_req,
                           self.duplicates + other.duplicates,
                           sorted(self.outcomes + other.outcomes, key=lambda o: o[0]))

    def restricted(self, lo, hi):
        """Report over the initiating packets timed in [lo, hi)."""
        sub = MatchReport(self.key)
        for o in self.outcomes:
            if not lo <= o[0] < hi:
                continue
            sub.outcomes.append(o)
            ts, proto, status, ident = o
            if status == "matched":
                sub.matched += 1
            elif status == "duplicate":
                sub.duplicates += 1
            elif proto == "TCP":
                sub.unmatched_seq.append(ident)
            else:
                sub.unmatched_req.append(ident)
        return sub


def _seg_len(p):
    return p.payload_len + ("SYN" in p.flags) + ("FIN" in p.flags)


def match_tcp(packets, window=None, key=None):
    if window is not None:
        packets = [p for p in packets if window.contains(p.ts)]
    packets = sorted(packets, key=lambda p: p.ts)
    acks = defaultdict(list)  # (sender, receiver, value) -> ack timestamps
    for p in packets:
        if p.proto != "TCP":
            raise ValueError("match_tcp got a non-TCP record")
        if "ACK" in p.flags and p.ack is not None:
            acks[(p.src, p.dst, p.ack % SEQ_MOD)].append(p.ts)
    cursor = defaultdict(int)
    seen = set()
    report = MatchReport(key)
    for p in packets:
        n = _seg_len(p)
        if n <= 0:
            continue
        ident = (p.src, p.dst, p.seq, n)
        if ident in seen:
            report.duplicates += 1
            report.outcomes.append((p.ts, "TCP", "duplicate", p.seq))
            continue
        seen.add(ident)
        slot = (p.dst, p.src, (p.seq + n) % SEQ_MOD)
        times = acks.get(slot, ())
        j = cursor[slot]
        while j < len(times) and times[j] <= p.ts:
            j += 1
        if j < len(times):
            report.matched += 1
            report.outcomes.append((p.ts, "TCP", "matched", p.seq))
            j += 1
        else:
            report.unmatched_seq.append(p.seq)
            report.outcomes.append((p.ts, "TCP", "orphan", p.seq))
        cursor[slot] = j
    return report


def match_udp(packets, rtt_limit=1.0, key=None):
    if rtt_limit <= 0:
        raise ConfigError("rtt_limit must be positive")
    packets = sorted(packets, key=lambda p: p.ts)
    responses = defaultdict(list)  # (responder, client) -> timestamps
    for p in packets:
        if p.proto != "UDP":
            raise ValueError("match_udp got a non-UDP record")
        if p.direction == "response":
            responses[(p.src, p.dst)].append(p.ts)
    cursor = defaultdict(int)
    report = MatchReport(key)
    for p in packets:
        if p.direction != "request":
            continue
        slot = (p.dst, p.src)
        times = responses.get(slot, ())
        j = cursor[slot]
        # consumed responses always form a prefix of the still-usable ones
        while j < len(times) and times[j] <= p.ts:
            j += 1
        if j < len(times) and times[j] - p.ts <= rtt_limit:
            report.matched += 1
            report.outcomes.append((p.ts, "UDP", "matched", p.ts))
            j += 1
        else:
            report.unmatched_req.append(p.ts)
            report.outcomes.append((p.ts, "UDP", "orphan", p.ts))
        cursor[slot] = j
    return report


def match_key(key, packets, rtt_limit=1.0):
    tcp = [p for p in packets if p.proto == "TCP"]
    udp = [p for p in packets if p.proto == "UDP"]
    return match_tcp(tcp, key=key).merged(match_udp(udp, rtt_limit, key=key))


def match_all(packets, rtt_limit=1.0):
    return [match_key(k, ps, rtt_limit) for k, ps in sorted(group_by_key(packets).items())]


def worst_window(report, width=60.0, min_count=10):
    """Sub-report of the ``width``-second bucket with the lowest health.

    Failures last a fraction of the incident window, so a key-wide rate would
    dilute them. Buckets with fewer than ``min_count`` initiating packets are
    ignored; if none qualifies the full report is returned.
    """
    if width <= 0:
        raise ConfigError("bucket width must be positive")
    if not report.outcomes:
        return report
    t0 = min(o[0] for o in report.outcomes)
    t1 = max(o[0] for o in report.outcomes)
    worst = None
    k = 0
    while t0 + k * width <= t1:
        sub = report.restricted(t0 + k * width, t0 + (k + 1) * width)
        if len(sub.outcomes) >= min_count and (worst is None or sub.health < worst.health):
            worst = sub
        k += 1
    return worst if worst is not None else report


@dataclass
class KernelVerdict:
    failure: bool
    culprits: list  # (TrafficKey, health)
    window: object = None

    def to_dict(self):
        return {
            "failure": self.failure,
            "culprits": [{**k.to_dict(), "match_rate": rate} for k, rate in self.culprits],
            "window": self.window.to_dict() if self.window is not None else None,
        }


def detect_kernel_failure(reports, fail_threshold=0.9, window=None):
    """Two passes: cross-segment keys first; intra-segment keys are only
    blamed when at least one cross-segment key is healthy (or none exist)."""
    if not 0 < fail_threshold <= 1:
        raise ConfigError("fail_threshold must be in (0, 1]")
    cross = [r for r in reports if r.key.cross_segment]
    intra = [r for r in reports if not r.key.cross_segment]
    bad_cross = [r for r in cross if r.health < fail_threshold]
    culprits = sorted(bad_cross, key=lambda r: (r.health, r.key))
    if not cross or len(bad_cross) < len(cross):
        culprits += sorted((r for r in intra if r.health < fail_threshold),
                           key=lambda r: (r.health, r.key))
    ranked = [(r.key, r.health) for r in culprits]
    return KernelVerdict(bool(ranked), ranked, window)
