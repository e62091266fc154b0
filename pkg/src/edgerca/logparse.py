"""Fixed-depth prefix-tree log template mining (Drain style).

Lines are routed by token count, then by their leading tokens, to a leaf
holding candidate clusters; the most similar cluster above the threshold
absorbs the line and its template is generalised where tokens differ.
"""
from __future__ import annotations

import copy
import json
import re
from dataclasses import dataclass, field

from .telemetry import Address, PacketRecord, RawLogLine

WILDCARD = "<*>"
_NUMERIC = re.compile(r"\d")


class ExtractionError(ValueError):
    pass


@dataclass
class LogCluster:
    id: int
    template: list
    support: int = 1

    @property
    def template_str(self):
        return " ".join(self.template)

    @property
    def n_wildcards(self):
        return sum(t == WILDCARD for t in self.template)

    def params_of(self, tokens):
        return [tok for tok, t in zip(tokens, self.template) if t == WILDCARD]


@dataclass(frozen=True)
class FieldMap:
    """Template family regex plus the wildcard index of each named role.

    Named groups in ``pattern`` supply roles that are literal template tokens.
    """

    pattern: str
    protocol: str
    roles: dict

    def match(self, template_str):
        return re.fullmatch(self.pattern, template_str)


_W = re.escape(WILDCARD)
_FLAGS = r"\[[A-Z.\-]+\]"
DEFAULT_FIELD_MAPS = (
    FieldMap(rf"TCP {_W} > {_W} seq {_W} ack {_W} len {_W} flags {_W}", "TCP",
             {"src": 0, "dst": 1, "seq": 2, "ack": 3, "len": 4, "flags": 5}),
    FieldMap(rf"TCP {_W} > {_W} seq {_W} ack {_W} len {_W} flags (?P<flags>{_FLAGS})", "TCP",
             {"src": 0, "dst": 1, "seq": 2, "ack": 3, "len": 4}),
    FieldMap(rf"TCP {_W} > {_W} seq {_W} ack {_W}", "TCP",
             {"src": 0, "dst": 1, "seq": 2, "ack": 3}),
    FieldMap(rf"UDP {_W} > {_W} len {_W} {_W}", "UDP",
             {"src": 0, "dst": 1, "len": 2, "direction": 3}),
    FieldMap(rf"UDP {_W} > {_W} len {_W} (?P<direction>request|response)", "UDP",
             {"src": 0, "dst": 1, "len": 2}),
)


def load_field_maps(path):
    with open(path) as fh:
        raw = json.load(fh)
    return tuple(FieldMap(d["pattern"], d["protocol"], dict(d["roles"])) for d in raw)


@dataclass
class ValidContent:
    protocol: str
    endpoints: tuple | None = None
    packet_numbers: tuple | None = None
    sizes: int | None = None
    raw_params: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return {"protocol": self.protocol, "endpoints": self.endpoints,
                "packet_numbers": self.packet_numbers, "sizes": self.sizes,
                "raw_params": self.raw_params, **self.extra}


class _Node:
    __slots__ = ("children", "clusters")

    def __init__(self):
        self.children = {}
        self.clusters = []


@dataclass
class TemplateTree:
    depth: int = 4
    similarity_threshold: float = 0.4
    max_children: int = 100
    field_maps: tuple = DEFAULT_FIELD_MAPS
    clusters: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if not 0 < self.similarity_threshold < 1:
            raise ValueError("similarity_threshold must be in (0, 1)")
        self._root = _Node()
        self._next_id = 1
        for c in self.clusters.values():
            self._leaf(c.template, create=True).clusters.append(c.id)
        if self.clusters:
            self._next_id = max(self.clusters) + 1

    # routing -------------------------------------------------------------
    def _leaf(self, tokens, create):
        node = self._root.children.get(len(tokens))
        if node is None:
            if not create:
                return None
            node = self._root.children[len(tokens)] = _Node()
        for tok in tokens[: min(self.depth - 2, len(tokens))]:
            key = WILDCARD if _NUMERIC.search(tok) else tok
            child = node.children.get(key)
            if child is None and not create:
                child = node.children.get(WILDCARD)
                if child is None:
                    return None
            elif child is None:
                if len(node.children) >= self.max_children:
                    key = WILDCARD
                    child = node.children.get(WILDCARD)
                if child is None:
                    child = node.children[key] = _Node()
            node = child
        return node

    def _best(self, leaf, masked):
        best, best_sim = None, -1.0
        for cid in leaf.clusters:
            tpl = self.clusters[cid].template
            same = sum(t == w or t == WILDCARD for t, w in zip(tpl, masked))
            sim = same / len(masked)
            if sim >= self.similarity_threshold and sim > best_sim:
                best, best_sim = cid, sim
        return best

    # public --------------------------------------------------------------
    def add(self, text):
        """Absorb one line; returns (cluster, original tokens)."""
        tokens = text.split()
        if not tokens:
            raise ValueError("cannot parse an empty line")
        masked = [WILDCARD if _NUMERIC.search(t) else t for t in tokens]
        leaf = self._leaf(masked, create=True)
        cid = self._best(leaf, masked)
        if cid is None:
            cid = self._next_id
            self._next_id += 1
            self.clusters[cid] = LogCluster(cid, masked)
            leaf.clusters.append(cid)
        else:
            c = self.clusters[cid]
            c.template = [t if t == w else WILDCARD for t, w in zip(c.template, masked)]
            c.support += 1
        return self.clusters[cid], tokens

    def match(self, text):
        """Find the cluster for a line without modifying the tree."""
        tokens = text.split()
        masked = [WILDCARD if _NUMERIC.search(t) else t for t in tokens]
        leaf = self._leaf(masked, create=False)
        if leaf is None:
            return None, tokens
        cid = self._best(leaf, masked)
        return (self.clusters[cid] if cid is not None else None), tokens

    def dump(self):
        return [{"id": c.id, "template": c.template, "support": c.support}
                for c in sorted(self.clusters.values(), key=lambda c: c.id)]


def parse_line(tree, line):
    text = line.text if isinstance(line, RawLogLine) else line
    cluster, tokens = tree.add(text)
    return cluster.id, extract_valid_content(cluster, cluster.params_of(tokens), tree.field_maps)


def prune_long_tail(tree, min_support=3):
    if min_support < 1:
        raise ValueError("min_support must be >= 1")
    out = copy.deepcopy(tree)
    out.clusters = {cid: c for cid, c in out.clusters.items() if c.support >= min_support}
    stack = [out._root]
    while stack:
        node = stack.pop()
        node.clusters = [cid for cid in node.clusters if cid in out.clusters]
        stack.extend(node.children.values())
    return out


_FLAG_LETTERS = {"S": "SYN", "F": "FIN", ".": "ACK", "P": "PSH", "R": "RST"}


def parse_flags(text):
    return frozenset(_FLAG_LETTERS[ch] for ch in text.strip("[]") if ch in _FLAG_LETTERS)


def extract_valid_content(cluster, raw_params, field_maps=DEFAULT_FIELD_MAPS):
    tpl = cluster.template_str
    for fm in field_maps:
        m = fm.match(tpl)
        if m is None:
            continue
        vals = dict(m.groupdict())
        for role, idx in fm.roles.items():
            if idx >= len(raw_params):
                raise ExtractionError(
                    f"field map role {role!r} wants wildcard {idx}, template {tpl!r} has {len(raw_params)}")
            vals[role] = raw_params[idx]
        seq_ack = None
        if "seq" in vals and "ack" in vals:
            seq_ack = (int(vals["seq"]), int(vals["ack"]))
        extra = {k: vals[k] for k in ("flags", "direction") if k in vals}
        return ValidContent(
            protocol=fm.protocol,
            endpoints=(vals.get("src"), vals.get("dst")),
            packet_numbers=seq_ack,
            sizes=int(vals["len"]) if "len" in vals else None,
            raw_params=list(raw_params),
            extra=extra,
        )
    return ValidContent("OTHER", raw_params=list(raw_params))


def _address(text):
    try:
        return Address.parse(text)
    except ValueError:
        return Address(text)


def to_packet(content, ts):
    """PacketRecord from a network valid-content record; None for OTHER."""
    if content.protocol == "TCP" and content.packet_numbers is not None:
        src, dst = content.endpoints
        seq, ack = content.packet_numbers
        flags = parse_flags(content.extra.get("flags", "[.]"))
        return PacketRecord(ts=ts, proto="TCP", src=_address(src), dst=_address(dst),
                            seq=seq, ack=ack if "ACK" in flags else None,
                            payload_len=content.sizes or 0, flags=flags - {"PSH", "RST"})
    if content.protocol == "UDP" and content.extra.get("direction") in ("request", "response"):
        src, dst = content.endpoints
        return PacketRecord(ts=ts, proto="UDP", src=_address(src), dst=_address(dst),
                            payload_len=content.sizes or 0, direction=content.extra["direction"])
    return None


@dataclass
class ParsedCorpus:
    tree: TemplateTree
    assignments: list  # (line, cluster id or None, ValidContent or None)

    def packets(self):
        out = []
        for line, cid, vc in self.assignments:
            if vc is None or line.ts is None:
                continue
            p = to_packet(vc, line.ts)
            if p is not None:
                out.append(p)
        out.sort(key=lambda p: p.ts)
        return out


def parse_corpus(lines, tree=None, min_support=3):
    """Parse a closed window of lines, prune the long tail, then extract
    valid content against the final templates."""
    tree = tree or TemplateTree()
    routed = [(line, *tree.add(line.text)) for line in lines]
    pruned = prune_long_tail(tree, min_support)
    assignments = []
    for line, cluster, tokens in routed:
        final = pruned.clusters.get(cluster.id)
        if final is None:
            assignments.append((line, None, None))
            continue
        vc = extract_valid_content(final, final.params_of(tokens), pruned.field_maps)
        assignments.append((line, final.id, vc))
    return ParsedCorpus(pruned, assignments)


def write_templates(path, tree):
    with open(path, "w") as fh:
        for row in tree.dump():
            fh.write(json.dumps(row) + "\n")


def format_tcp_line(p):
    flags = "".join(ch for ch, name in (("S", "SYN"), ("F", "FIN")) if name in p.flags)
    flags += "." if "ACK" in p.flags else ""
    return (f"TCP {p.src} > {p.dst} seq {p.seq} ack {p.ack if p.ack is not None else 0} "
            f"len {p.payload_len} flags [{flags or '-'}]")


def format_udp_line(p):
    return f"UDP {p.src} > {p.dst} len {p.payload_len} {p.direction}"
