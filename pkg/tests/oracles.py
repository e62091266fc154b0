"""Independent reference implementations used as test oracles.

Each one is written the slow, obvious way and shares no code with the
package beyond the record types.
"""
import math

import networkx as nx
import numpy as np


def flat_birch(points, threshold):
    """Sequential insertion into a flat list of subclusters kept as member lists.

    Each point joins the subcluster with the nearest centroid if the
    population standard deviation of the enlarged member set stays within
    ``threshold``; otherwise it opens a new one. Matches a CF tree as long as
    no node ever splits.
    """
    groups = []
    assign = []
    for x in points:
        x = float(x)
        best, best_d = None, math.inf
        for i, members in enumerate(groups):
            d = (float(np.mean(members)) - x) ** 2
            if d < best_d:
                best, best_d = i, d
        if best is not None and float(np.std(groups[best] + [x])) <= threshold:
            groups[best].append(x)
            assign.append(best)
            continue
        groups.append([x])
        assign.append(len(groups) - 1)
    return len(groups), assign


def tcp_max_matching(packets):
    """Maximum bipartite matching between unique data segments and acks.

    A segment (s, len L) sent a->b can pair with any ACK-flagged b->a packet
    carrying ack == s + L that is strictly later. Repeated (src, dst, seq, len)
    segments are retransmissions and take no part.
    """
    g = nx.Graph()
    segs, acks = [], []
    seen = set()
    for i, p in enumerate(sorted(packets, key=lambda p: p.ts)):
        n = p.payload_len + ("SYN" in p.flags) + ("FIN" in p.flags)
        if n > 0:
            ident = (p.src, p.dst, p.seq, n)
            if ident not in seen:
                seen.add(ident)
                segs.append((("s", i), p, n))
        if "ACK" in p.flags and p.ack is not None:
            acks.append((("a", i), p))
    g.add_nodes_from(s[0] for s in segs)
    g.add_nodes_from(a[0] for a in acks)
    for sid, sp, n in segs:
        want = (sp.seq + n) % 2 ** 32
        for aid, ap in acks:
            if ap.src == sp.dst and ap.dst == sp.src and ap.ack % 2 ** 32 == want and ap.ts > sp.ts:
                g.add_edge(sid, aid)
    top = [s[0] for s in segs]
    m = nx.bipartite.hopcroft_karp_matching(g, top_nodes=top) if g.number_of_edges() else {}
    matched = sum(1 for s in top if s in m)
    return matched, len(segs) - matched, len(packets_dups(packets))


def packets_dups(packets):
    seen, dups = set(), []
    for p in sorted(packets, key=lambda p: p.ts):
        n = p.payload_len + ("SYN" in p.flags) + ("FIN" in p.flags)
        if n <= 0:
            continue
        ident = (p.src, p.dst, p.seq, n)
        if ident in seen:
            dups.append(p)
        seen.add(ident)
    return dups


def udp_greedy(packets, rtt_limit):
    """Each request, in time order, takes the earliest unused response from
    the peer with 0 < dt <= rtt_limit. Quadratic scan over all responses."""
    reqs = sorted((p for p in packets if p.direction == "request"), key=lambda p: p.ts)
    resps = sorted((p for p in packets if p.direction == "response"), key=lambda p: p.ts)
    used = [False] * len(resps)
    matched = 0
    for q in reqs:
        for j, r in enumerate(resps):
            if used[j] or r.src != q.dst or r.dst != q.src:
                continue
            if 0 < r.ts - q.ts <= rtt_limit:
                used[j] = True
                matched += 1
                break
    return matched, len(reqs) - matched


def udp_max_matching(packets, rtt_limit):
    """Maximum matching under the same RTT window, via networkx."""
    reqs = [(i, p) for i, p in enumerate(packets) if p.direction == "request"]
    resps = [(i, p) for i, p in enumerate(packets) if p.direction == "response"]
    g = nx.Graph()
    g.add_nodes_from(("q", i) for i, _ in reqs)
    g.add_nodes_from(("r", i) for i, _ in resps)
    for i, q in reqs:
        for j, r in resps:
            if r.src == q.dst and r.dst == q.src and 0 < r.ts - q.ts <= rtt_limit:
                g.add_edge(("q", i), ("r", j))
    top = [("q", i) for i, _ in reqs]
    m = nx.bipartite.hopcroft_karp_matching(g, top_nodes=top) if g.number_of_edges() else {}
    return sum(1 for t in top if t in m)


def finite_diff(f, x, eps=1e-6):
    """Central differences of scalar f at array x."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        up = f(x)
        x[idx] = old - eps
        down = f(x)
        x[idx] = old
        g[idx] = (up - down) / (2 * eps)
    return g


def softmax(v):
    v = np.asarray(v, dtype=np.float64)
    e = np.exp(v - v.max())
    return e / e.sum()
