"""Small tape-based reverse-mode autodiff over numpy arrays.

Only the operations the localizer needs are provided. Everything is float64.
Ops record onto the innermost active :class:`Tape`; outside a tape they just
compute values, which is what the finite-difference checker relies on.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

_ids = itertools.count()
_active: list["Tape"] = []


class ShapeError(ValueError):
    def __init__(self, op, *shapes):
        super().__init__(f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}")
        self.op = op
        self.shapes = shapes


class TrainingError(RuntimeError):
    def __init__(self, msg, epoch=None, param=None):
        super().__init__(msg)
        self.epoch = epoch
        self.param = param


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "id", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self.id = next(_ids)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class Tape:
    """Operations in creation order, which is already a topological order."""

    nodes: list = field(default_factory=list)
    leaves: dict = field(default_factory=dict)

    def __enter__(self):
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.remove(self)
        return False

    def record(self, out, parents, backward):
        out._parents = parents
        out._backward = backward
        out.requires_grad = True
        for p in parents:
            if p._backward is None:
                self.leaves[p.id] = p
        self.nodes.append(out)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value, parents, backward):
    out = Tensor(value)
    if _active and any(p.requires_grad for p in parents):
        _active[-1].record(out, parents, backward)
    return out


def _acc(t, g, fresh=False):
    """Add ``g`` into ``t.grad``. ``fresh`` arrays belong to nobody else and are
    stored as they are; anything else is copied first, since backward rules
    hand the same array to several parents."""
    if not t.requires_grad:
        return
    if t.grad is None:
        if fresh and g.shape == t.data.shape:
            t.grad = g
        else:
            t.grad = np.array(np.broadcast_to(g, t.data.shape), dtype=np.float64)
    else:
        t.grad += g


# --------------------------------------------------------------------------
# forward ops


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if b.data.ndim != 2 or a.data.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _acc(a, g @ b.data.T, fresh=True)
        if b.requires_grad:
            a2 = a.data.reshape(-1, a.shape[-1])
            _acc(b, a2.T @ g.reshape(-1, g.shape[-1]), fresh=True)

    return _make(out, (a, b), backward)


def mix(m, x):
    """Left-multiply ``x`` by a constant matrix over its second-to-last axis.

    ``m`` is (p, q) and ``x`` is (..., q, k); the result is (..., p, k).
    """
    m = np.asarray(m, dtype=np.float64)
    x = as_tensor(x)
    if m.ndim != 2 or x.data.ndim < 2 or x.shape[-2] != m.shape[1]:
        raise ShapeError("mix", m.shape, x.shape)

    def backward(g):
        _acc(x, m.T @ g, fresh=True)

    return _make(m @ x.data, (x,), backward)


def _check_binary(op, a, b):
    if a.shape == b.shape:
        return False
    nd = b.data.ndim
    if nd and nd < a.data.ndim and a.shape[-nd:] == b.shape:
        return True
    raise ShapeError(op, a.shape, b.shape)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    trailing = _check_binary("add", a, b)

    def backward(g):
        _acc(a, g)
        if b.requires_grad:
            _acc(b, g.reshape(-1, *b.shape).sum(axis=0) if trailing else g)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("sub", a.shape, b.shape)

    def backward(g):
        _acc(a, g)
        _acc(b, -g, fresh=True)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("mul", a.shape, b.shape)

    def backward(g):
        _acc(a, g * b.data, fresh=True)
        _acc(b, g * a.data, fresh=True)

    return _make(a.data * b.data, (a, b), backward)


def scale(a, c):
    a = as_tensor(a)
    c = float(c)

    def backward(g):
        _acc(a, c * g, fresh=True)

    return _make(c * a.data, (a,), backward)


def concat(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in ts]) from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def backward(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _acc(t, g[tuple(idx)])

    return _make(out, tuple(ts), backward)


def stack(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("stack", *[t.shape for t in ts]) from None

    def backward(g):
        for i, t in enumerate(ts):
            if t.requires_grad:
                _acc(t, np.take(g, i, axis=axis))

    return _make(out, tuple(ts), backward)


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None

    def backward(g):
        _acc(a, g.reshape(a.shape))

    return _make(out, (a,), backward)


def getitem(a, key):
    """Basic (slice / int) indexing; no advanced indexing."""
    a = as_tensor(a)
    out = a.data[key]

    def backward(g):
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[key] += g

    return _make(out, (a,), backward)


def take(a, indices, axis=0):
    """Gather along ``axis`` with an integer index array; repeats allowed."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)
    out = np.take(a.data, indices, axis=axis)

    def backward(g):
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        moved = np.moveaxis(a.grad, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))

    return _make(out, (a,), backward)


def sum(a, axis=None):  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            _acc(a, np.broadcast_to(g, a.shape))
        else:
            _acc(a, np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return _make(out, (a,), backward)


def mean(a, axis=None):
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def max(a, axis=0):  # noqa: A001
    """Max along ``axis``; the gradient goes to the first maximal element."""
    a = as_tensor(a)
    arg = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def backward(g):
        if not a.requires_grad:
            return
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        _acc(a, full)

    return _make(out, (a,), backward)


def sigmoid(a):
    a = as_tensor(a)
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def backward(g):
        _acc(a, g * s * (1.0 - s), fresh=True)

    return _make(s, (a,), backward)


def tanh(a):
    a = as_tensor(a)
    t = np.tanh(a.data)

    def backward(g):
        _acc(a, g * (1.0 - t * t), fresh=True)

    return _make(t, (a,), backward)


def lstm_seq(xproj, wh):
    """Unrolled LSTM over precomputed input projections.

    ``xproj`` is (T, B, 4h) and already holds ``x @ Wx + b``; ``wh`` is (h, 4h).
    Gate order along the last axis: input, forget, output, candidate. The
    state starts at zero. Returns every hidden state as (T, B, h).

    One tape node for the whole sequence: recording each gate of each step
    costs far more in interpreter overhead than the arithmetic itself. The
    localizer keeps a gate-by-gate version built from the primitive ops, and
    the tests hold the two to the same values and gradients.
    """
    xproj, wh = as_tensor(xproj), as_tensor(wh)
    if xproj.data.ndim != 3 or wh.data.ndim != 2 or wh.shape[1] != 4 * wh.shape[0] \
            or xproj.shape[2] != wh.shape[1]:
        raise ShapeError("lstm_seq", xproj.shape, wh.shape)
    T, B, _ = xproj.shape
    h = wh.shape[0]
    W = wh.data
    WT = np.ascontiguousarray(W.T)
    # work in a (4h, B) layout so that every gate is a contiguous block of rows
    X = np.ascontiguousarray(np.swapaxes(xproj.data, 1, 2))
    # sigmoid(x) = (tanh(x / 2) + 1) / 2, so a single tanh call covers all four gates
    pre = np.r_[np.full(3 * h, 0.5), np.ones(h)][:, None]
    A = np.empty((T, 4 * h, B))  # gate activations: input, forget, output, candidate
    C = np.empty((T, h, B))
    TC = np.empty((T, h, B))
    HT = np.empty((T, h, B))
    work = np.empty((h, B))
    for t in range(T):
        z = A[t]
        if t:
            np.dot(WT, HT[t - 1], out=z)
            z += X[t]
        else:
            z[...] = X[0]
        z *= pre
        np.tanh(z, out=z)
        zs = z[:3 * h]
        zs += 1.0
        zs *= 0.5
        if t:
            np.multiply(z[h:2 * h], C[t - 1], out=C[t])
        else:
            C[t] = 0.0
        np.multiply(z[:h], z[3 * h:], out=work)
        C[t] += work
        np.tanh(C[t], out=TC[t])
        np.multiply(z[2 * h:3 * h], TC[t], out=HT[t])
    H = np.ascontiguousarray(np.swapaxes(HT, 1, 2))

    def backward(g):
        G = np.ascontiguousarray(np.swapaxes(g, 1, 2))
        D = np.empty((T, 4 * h, B))
        dh = np.empty((h, B))
        dcell = np.empty((h, B))
        dc_next = np.zeros((h, B))
        tmp = np.empty((h, B))
        for t in range(T - 1, -1, -1):
            a = A[t]
            i, f, o, cand = a[:h], a[h:2 * h], a[2 * h:3 * h], a[3 * h:]
            tc = TC[t]
            dz = D[t]
            if t < T - 1:
                np.dot(W, D[t + 1], out=dh)
                dh += G[t]
            else:
                dh[...] = G[t]
            # d cell = dc_next + dh * o * (1 - tanh(c)^2)
            np.multiply(tc, tc, out=tmp)
            np.subtract(1.0, tmp, out=tmp)
            tmp *= o
            tmp *= dh
            np.add(dc_next, tmp, out=dcell)
            # gate sensitivities: s(1 - s) for the sigmoid gates, 1 - g^2 for the candidate
            np.subtract(1.0, a[:3 * h], out=dz[:3 * h])
            dz[:3 * h] *= a[:3 * h]
            np.multiply(cand, cand, out=dz[3 * h:])
            np.subtract(1.0, dz[3 * h:], out=dz[3 * h:])
            dz[:h] *= cand
            dz[:h] *= dcell
            if t:
                dz[h:2 * h] *= C[t - 1]
                dz[h:2 * h] *= dcell
            else:
                dz[h:2 * h] = 0.0
            dz[2 * h:3 * h] *= tc
            dz[2 * h:3 * h] *= dh
            dz[3 * h:] *= i
            dz[3 * h:] *= dcell
            np.multiply(dcell, f, out=dc_next)
        dx = np.ascontiguousarray(np.swapaxes(D, 1, 2))
        if wh.requires_grad:
            # dW = sum_t h_{t-1}^T dz_t
            dw = H[:-1].reshape(-1, h).T @ dx[1:].reshape(-1, 4 * h) if T > 1 else np.zeros_like(W)
            _acc(wh, dw, fresh=True)
        if xproj.requires_grad:
            _acc(xproj, dx, fresh=True)

    return _make(H, (xproj, wh), backward)


def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _acc(a, s * (g - (g * s).sum(axis=axis, keepdims=True)), fresh=True)

    return _make(s, (a,), backward)


def squared_error(a, b):
    """Sum of squared differences; ``b`` may be a tensor, array or scalar."""
    a = as_tensor(a)
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ShapeError("squared_error", a.shape, b.shape)
        bd = b.data
    else:
        bd = np.broadcast_to(np.asarray(b, dtype=np.float64), a.shape)
        b = None
    diff = a.data - bd
    parents = (a,) if b is None else (a, b)

    def backward(g):
        _acc(a, 2.0 * g * diff, fresh=True)
        if b is not None:
            _acc(b, -2.0 * g * diff, fresh=True)

    return _make(np.sum(diff * diff), parents, backward)


# --------------------------------------------------------------------------
# gradients


def backward(tape, loss, params=()):
    """Reverse sweep from a scalar ``loss``; returns gradients for ``params``.

    Parameters the loss does not reach get zeros.
    """
    if loss.data.ndim != 0:
        raise ShapeError("backward (loss must be scalar)", loss.shape)
    if loss._backward is None and loss not in params:
        raise ValueError("loss is not recorded on the tape")
    for n in tape.nodes:
        n.grad = None
    for leaf in tape.leaves.values():
        leaf.grad = None
    for p in params:
        p.grad = None
    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(tape.nodes):
        if node.grad is not None:
            node._backward(node.grad)
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def grad_check(f, params, eps=1e-5, floor=1e-12):
    """Largest coordinate-wise relative error between analytic and central-difference gradients.

    ``f`` takes no arguments and returns a scalar loss built from ``params``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    with Tape() as tape:
        loss = f()
    grads = backward(tape, loss, params)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f().data)
            flat[i] = orig - eps
            down = float(f().data)
            flat[i] = orig
            num = (up - down) / (2 * eps)
            err = abs(num - gflat[i]) / np.max([abs(num), abs(gflat[i]), floor])
            worst = err if err > worst else worst
    return worst


# --------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr=0.01, **kw):
        return cls(lr=lr, m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params], **kw)


def adam_step(params, grads, state, epoch=None):
    """One bias-corrected Adam update, in place on ``params.data``."""
    if len(state.m) != len(params):
        raise ShapeError("adam_step", (len(params),), (len(state.m),))
    for p, g in zip(params, grads):
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {p.name!r} at epoch {epoch}",
                                epoch=epoch, param=p.name)
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if m.shape != p.shape:
            raise ShapeError("adam_step", p.shape, m.shape)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def parameter(data, name):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def save_params(path, params):
    """Flat named-tensor dump (npz) for debugging."""
    np.savez(path, **{p.name: p.data for p in params})
