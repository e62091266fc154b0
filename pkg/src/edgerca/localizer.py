"""Per-incident graph model that ranks root-cause candidates.

Each interval graph is encoded by typed neighbourhood aggregation and an
LSTM over its timesteps; a node-wise softmax attention pools it to a vector
and gives every node a score. An LSTM over the pooled vectors weights the
graphs. Training fits the backward-propagation and segment-aggregation
objectives on this single incident, then nodes are ranked by their
accumulated probability.
"""
from __future__ import annotations

import time
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import AdamState, Tape, TrainingError, adam_step
from .telemetry import INSTANCE, SCHEMA, SERVER, SERVICE
from .topostack import EDGE_KINDS, EDGE_TYPES

KIND_ORDER = (SERVICE, INSTANCE, SERVER)


class LocalizeError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 0.01
    halve_every: int = 200
    gamma: float = 1e-5
    patience: int = 5
    max_epochs: int = 1000
    seed: int = 0
    hidden: int = 64

    def __post_init__(self):
        for name in ("lr0", "halve_every", "gamma", "patience", "max_epochs", "hidden"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


# --------------------------------------------------------------------------
# incident preparation


@dataclass
class _GraphPlan:
    graph: object
    ids: list
    blocks: dict  # kind -> (T, N_kind, d_kind) feature array
    mixers: dict  # edge type -> (N, N_src) averaging matrix
    select: np.ndarray  # (N, V) graph node -> universe position
    design: np.ndarray = None  # (T, N, K) raw self and neighbour-mean features
    layout: tuple = ()  # (param name, half of enc.wx) per design column block


@dataclass
class Incident:
    """Constant structure shared by every epoch of one incident."""

    universe: list
    entities: dict
    plans: list
    anomalous: list
    pairs: list  # (anomalous position, predecessor universe position)
    segment_of: dict
    centering: np.ndarray

    @property
    def a_index(self):
        pos = {nid: i for i, nid in enumerate(self.universe)}
        return np.array([pos[a] for a in self.anomalous], dtype=np.int64)


def segment_assignment(graphs):
    """Instances and servers keep their own segment; a service takes the
    majority segment of its instances (ties to the smallest name) and falls
    back to its declared segment when it has no instances."""
    out = {}
    declared = {}
    votes = {}
    for g in graphs:
        seg = {n.entity.id: n.segment for n in g.nodes}
        for n in g.nodes:
            if n.entity.kind == SERVICE:
                votes.setdefault(n.entity.id, Counter())
                declared.setdefault(n.entity.id, n.segment)
            else:
                out[n.entity.id] = n.segment
        for svc, inst in g.edges["ownership"]:
            votes[svc][seg[inst]] += 1
    for svc, c in votes.items():
        if c:
            top = max(c.values())
            out[svc] = min(s for s, k in c.items() if k == top)
        else:
            out[svc] = declared[svc]
    return out


def _mixers(graph, pos):
    """Row-normalised in-neighbour averaging per edge type, then divided by the
    number of edge types that reach the node."""
    n = len(graph.nodes)
    kind_pos = {k: {nid.entity.id: i for i, nid in enumerate(graph.of_kind(k))} for k in KIND_ORDER}
    raw = {}
    for et in EDGE_TYPES:
        edges = graph.edges[et]
        if not edges:
            continue
        src_kind = EDGE_KINDS[et][0]
        m = np.zeros((n, len(kind_pos[src_kind])))
        for a, b in edges:
            m[pos[b], kind_pos[src_kind][a]] = 1.0
        deg = m.sum(axis=1, keepdims=True)
        m = np.divide(m, deg, out=np.zeros_like(m), where=deg > 0)
        raw[et] = m
    reach = sum((m.sum(axis=1) > 0).astype(float) for m in raw.values()) if raw else np.zeros(n)
    scale = np.divide(1.0, reach, out=np.zeros(n), where=reach > 0)
    return {et: m * scale[:, None] for et, m in raw.items()}


def _design(plan):
    """Constant design tensor: each node's own features in its kind's column
    block, the averaged in-neighbour features of every edge type, then a ones
    column that carries the encoder bias."""
    t = next(iter(plan.blocks.values())).shape[0]
    n = len(plan.ids)
    cols, layout = [], []
    row = 0
    for kind in KIND_ORDER:
        d = len(SCHEMA[kind])
        block = np.zeros((t, n, d))
        if kind in plan.blocks:
            k = plan.blocks[kind].shape[1]
            block[:, row:row + k] = plan.blocks[kind]
            row += k
        cols.append(block)
        layout.append((f"self.{kind}", "self"))
    for et in EDGE_TYPES:
        d = len(SCHEMA[EDGE_KINDS[et][0]])
        if et in plan.mixers:
            cols.append(plan.mixers[et] @ plan.blocks[EDGE_KINDS[et][0]])
        else:
            cols.append(np.zeros((t, n, d)))
        layout.append((f"edge.{et}", "neighbour"))
    cols.append(np.ones((t, n, 1)))
    return np.concatenate(cols, axis=2), tuple(layout)


def prepare(stack, anomalies):
    entities = {}
    for g in stack.graphs:
        for n in g.nodes:
            entities[n.entity.id] = n.entity
    universe = sorted(entities)
    upos = {nid: i for i, nid in enumerate(universe)}
    plans = []
    preds = {}
    for g in stack.graphs:
        ids = g.ids
        pos = {nid: i for i, nid in enumerate(ids)}
        blocks = {}
        for kind in KIND_ORDER:
            members = g.of_kind(kind)
            if members:
                blocks[kind] = np.stack([g.node_features[m.entity.id] for m in members], axis=1)
        sel = np.zeros((len(ids), len(universe)))
        for i, nid in enumerate(ids):
            sel[i, upos[nid]] = 1.0
        plan = _GraphPlan(g, ids, blocks, _mixers(g, pos), sel)
        plan.design, plan.layout = _design(plan)
        plans.append(plan)
        for nid in ids:
            if nid in anomalies:
                preds.setdefault(nid, set()).update(g.in_neighbors(nid))
    anomalous = [nid for nid in universe if nid in anomalies]
    if not anomalous:
        raise LocalizeError("no anomalous nodes: localization cannot start")
    pairs = [(i, upos[p]) for i, a in enumerate(anomalous) for p in sorted(preds[a])]
    seg = segment_assignment(stack.graphs)
    centering = centering_matrix([seg[n] for n in universe])
    return Incident(universe, entities, plans, anomalous, pairs, seg, centering)


# --------------------------------------------------------------------------
# parameters


@dataclass
class ModelState:
    params: dict
    hidden: int

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    @property
    def tensors(self):
        return list(self.params.values())

    def all_finite(self):
        return all(np.all(np.isfinite(p.data)) for p in self.params.values())


def _xavier(rng, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def init_state(n_anomalous, hidden=64, seed=0):
    rng = np.random.default_rng(seed)
    h = hidden
    p = {}
    for et in EDGE_TYPES:
        d = len(SCHEMA[EDGE_KINDS[et][0]])
        p[f"edge.{et}"] = _xavier(rng, d, h)
    for kind in KIND_ORDER:
        p[f"self.{kind}"] = _xavier(rng, len(SCHEMA[kind]), h)
    p["enc.wx"] = _xavier(rng, 2 * h, 4 * h)
    p["enc.wh"] = _xavier(rng, h, 4 * h)
    p["enc.b"] = np.zeros(4 * h)
    p["att.w"] = _xavier(rng, h, 1)
    p["stack.wx"] = _xavier(rng, h, 4 * h)
    p["stack.wh"] = _xavier(rng, h, 4 * h)
    p["stack.b"] = np.zeros(4 * h)
    p["score.w"] = _xavier(rng, h, 1)
    p["w_bp"] = np.ones(n_anomalous)
    return ModelState({k: dc.parameter(v, k) for k, v in p.items()}, h)


# --------------------------------------------------------------------------
# model pieces


def _zeros(*shape):
    return dc.Tensor(np.zeros(shape))


def hetero_conv(graph, t, state):
    """Features of every node at timestep ``t`` (relative to the interval): the
    self projection concatenated with the mean over edge types of the mean
    transformed in-neighbour features. Returns an (N, 2h) tensor."""
    h = state.hidden
    ids = graph.ids
    pos = {nid: i for i, nid in enumerate(ids)}
    parts = []
    for kind in KIND_ORDER:
        members = graph.of_kind(kind)
        if members:
            f = np.stack([graph.node_features[m.entity.id][t] for m in members])
            parts.append(dc.matmul(f, state[f"self.{kind}"]))
    self_part = dc.concat(parts, axis=0)
    neigh = None
    for et, mix in _mixers(graph, pos).items():
        src = graph.of_kind(EDGE_KINDS[et][0])
        f = np.stack([graph.node_features[m.entity.id][t] for m in src])
        term = dc.mix(mix, dc.matmul(f, state[f"edge.{et}"]))
        neigh = term if neigh is None else dc.add(neigh, term)
    if neigh is None:
        neigh = _zeros(len(ids), h)
    return dc.concat([self_part, neigh], axis=1)


def _conv_projection(plan, state):
    """All-timestep input projection ``conv(x) @ enc.wx + enc.b`` as a (T, N, 4h) tensor.

    The convolution is linear and its neighbour averaging acts on constant
    inputs, so the encoder's input weights are folded into the per-type maps
    and the whole grid needs a single matmul against the design tensor.
    """
    h = state.hidden
    wx = state["enc.wx"]
    halves = {"self": dc.getitem(wx, slice(0, h)), "neighbour": dc.getitem(wx, slice(h, 2 * h))}
    rows = [dc.matmul(state[name], halves[half]) for name, half in plan.layout]
    rows.append(dc.reshape(state["enc.b"], (1, 4 * h)))
    return dc.matmul(plan.design, dc.concat(rows, axis=0))


def lstm_reference(xproj, wh):
    """Gate-by-gate LSTM from elementary ops; same contract as ``dc.lstm_seq``.

    Far slower, kept to cross-check the fused sequence op.
    """
    xproj, wh = dc.as_tensor(xproj), dc.as_tensor(wh)
    T, B, _ = xproj.shape
    h = wh.shape[0]
    hid = _zeros(B, h)
    cell = _zeros(B, h)
    out = []
    for t in range(T):
        z = dc.add(dc.getitem(xproj, t), dc.matmul(hid, wh))
        i = dc.sigmoid(dc.getitem(z, (slice(None), slice(0, h))))
        f = dc.sigmoid(dc.getitem(z, (slice(None), slice(h, 2 * h))))
        o = dc.sigmoid(dc.getitem(z, (slice(None), slice(2 * h, 3 * h))))
        g = dc.tanh(dc.getitem(z, (slice(None), slice(3 * h, 4 * h))))
        cell = dc.add(dc.mul(f, cell), dc.mul(i, g))
        hid = dc.mul(o, dc.tanh(cell))
        out.append(hid)
    return dc.stack(out, axis=0)


def temporal_encode(sequence, state):
    """Final hidden state of the intra-interval encoder over a (T, 2h) or
    (T, N, 2h) sequence of convolution outputs."""
    seq = dc.as_tensor(sequence)
    if seq.shape[0] < 2:
        raise LocalizeError("temporal encoding needs at least 2 timesteps")
    squeeze = seq.data.ndim == 2
    if squeeze:
        seq = dc.reshape(seq, (seq.shape[0], 1, seq.shape[1]))
    xs = dc.add(dc.matmul(seq, state["enc.wx"]), state["enc.b"])
    last = dc.getitem(dc.lstm_seq(xs, state["enc.wh"]), -1)
    return dc.reshape(last, (state.hidden,)) if squeeze else last


def attention_pool(node_seq, state):
    """``node_seq`` is (T, N, h). Returns (pooled (1, h), omega (T, N), r (N,))."""
    node_seq = dc.as_tensor(node_seq)
    t, n, h = node_seq.shape
    scores = dc.reshape(dc.matmul(node_seq, state["att.w"]), (t, n))
    omega = dc.softmax(scores, axis=1)
    pooled = dc.matmul(dc.reshape(omega, (1, t * n)), dc.reshape(node_seq, (t * n, h)))
    return pooled, omega, dc.max(omega, axis=0)


def stack_encode(pooled, state):
    """Graph probabilities r_g (L,) from the pooled graph vectors, in order."""
    h = state.hidden
    n = len(pooled)
    xs = dc.add(dc.matmul(dc.stack(pooled, axis=0), state["stack.wx"]), state["stack.b"])
    seq = dc.reshape(dc.lstm_seq(xs, state["stack.wh"]), (n, h))
    return dc.softmax(dc.reshape(dc.matmul(seq, state["score.w"]), (n,)), axis=0)


def node_probabilities(r_graph, r_nodes, selects):
    """R over the universe: sum over graphs of r_g times each present node's r."""
    rows = [dc.matmul(dc.reshape(r, (1, r.shape[0])), sel) for r, sel in zip(r_nodes, selects)]
    mat = dc.concat(rows, axis=0)
    return dc.reshape(dc.matmul(dc.reshape(r_graph, (1, len(rows))), mat), (mat.shape[1],))


def loss_bp(R, a_index, pairs, w_bp):
    """Anomalous nodes pulled toward probability 1, their predecessors toward
    the node's learnable propagation strength."""
    if len(a_index) == 0:
        raise LocalizeError("no anomalous nodes: localization cannot start")
    loss = dc.squared_error(dc.take(R, a_index), 1.0)
    if pairs:
        ai = np.array([p[0] for p in pairs], dtype=np.int64)
        bi = np.array([p[1] for p in pairs], dtype=np.int64)
        loss = dc.add(loss, dc.squared_error(dc.take(w_bp, ai), dc.take(R, bi)))
    return loss


def loss_tp(R, centering):
    """Within-segment spread of probabilities around the segment mean."""
    v = R.shape[0]
    return dc.squared_error(dc.mix(centering, dc.reshape(R, (v, 1))), 0.0)


def centering_matrix(segments):
    segments = list(segments)
    v = len(segments)
    c = np.zeros((v, v))
    for s in sorted(set(segments)):
        idx = [i for i, x in enumerate(segments) if x == s]
        c[np.ix_(idx, idx)] = np.eye(len(idx)) - 1.0 / len(idx)
    return c


@dataclass
class GraphForward:
    projections: object  # (T, N, 4h) encoder input projections
    node_states: object  # (T, N, h)
    node_features: object  # (N, h) final hidden state per node
    omega: object
    pooled: object
    r_nodes: object


@dataclass
class Forward:
    graphs: list
    r_graph: object
    R: object
    loss_bp: object = None
    loss_tp: object = None
    loss: object = None


def forward(incident, state):
    graphs = []
    for plan in incident.plans:
        proj = _conv_projection(plan, state)
        t, n = proj.shape[0], proj.shape[1]
        seq = dc.lstm_seq(proj, state["enc.wh"])
        pooled, omega, r = attention_pool(seq, state)
        graphs.append(GraphForward(proj, seq, dc.getitem(seq, -1), omega, pooled, r))
    r_graph = stack_encode([g.pooled for g in graphs], state)
    R = node_probabilities(r_graph, [g.r_nodes for g in graphs], [p.select for p in incident.plans])
    bp = loss_bp(R, incident.a_index, incident.pairs, state["w_bp"])
    tp = loss_tp(R, incident.centering)
    return Forward(graphs, r_graph, R, bp, tp, dc.add(bp, tp))


# --------------------------------------------------------------------------
# training and ranking


@dataclass
class RootCauseRanking:
    entries: list  # (EntityRef, probability), best first
    r_graph: list
    r_nodes: list  # per graph: {node id: r}
    epochs: int = 0
    losses: list = field(default_factory=list)
    wall_time_s: float = 0.0

    @property
    def ids(self):
        return [e.id for e, _ in self.entries]

    def rank_of(self, node_id):
        for i, (e, _) in enumerate(self.entries, start=1):
            if e.id == node_id:
                return i
        return None

    def to_list(self, digits=6):
        return [{"id": e.id, "kind": e.kind, "probability": round(float(p), digits)}
                for e, p in self.entries]


def rank(incident, fw):
    R = fw.R.data
    # ties at report precision fall back to the node id, so tiny float drift cannot reorder
    order = sorted(range(len(incident.universe)), key=lambda i: (-round(float(R[i]), 6), incident.universe[i]))
    entries = [(incident.entities[incident.universe[i]], float(R[i])) for i in order]
    r_nodes = [dict(zip(p.ids, g.r_nodes.data.tolist())) for p, g in zip(incident.plans, fw.graphs)]
    return RootCauseRanking(entries, fw.r_graph.data.tolist(), r_nodes)


def fit(incident, config):
    """Train a fresh model on one incident; returns (state, per-epoch losses)."""
    state = init_state(len(incident.anomalous), config.hidden, config.seed)
    params = state.tensors
    adam = AdamState.for_params(params, lr=config.lr0)
    losses = []
    calm = 0
    for epoch in range(1, config.max_epochs + 1):
        adam.lr = config.lr0 * 0.5 ** ((epoch - 1) // config.halve_every)
        with Tape() as tape:
            fw = forward(incident, state)
        loss = float(fw.loss.data)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss at epoch {epoch}", epoch=epoch)
        grads = dc.backward(tape, fw.loss, params)
        adam_step(params, grads, adam, epoch)
        if losses and abs(loss - losses[-1]) < config.gamma:
            calm += 1
        else:
            calm = 0
        losses.append(loss)
        if calm >= config.patience:
            break
    return state, losses


def train_localize(stack, anomalies, config=None, incident=None):
    config = config or TrainConfig()
    t0 = time.perf_counter()
    incident = incident or prepare(stack, anomalies)
    state, losses = fit(incident, config)
    out = rank(incident, forward(incident, state))
    out.epochs = len(losses)
    out.losses = losses
    out.wall_time_s = time.perf_counter() - t0
    return out
