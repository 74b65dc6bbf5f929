"""Minimal reverse-mode autodiff over numpy float64 arrays.

Only the kernels the address tagger needs are provided: affine maps,
embedding lookups, concatenation, masked state carry, a fused LSTM cell,
softmax cross-entropy and plain SGD. Every op records its parents and a
closure that pushes ``out.grad`` back to them; ``backward`` walks the tape
in reverse topological order.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import AllMasked, DimensionMismatch, NotScalar

DTYPE = np.float64

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them on the tape."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Tensor], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    # never in place: g may be shared with another node's grad
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(out: Tensor) -> None:
    """Accumulate d(out)/d(leaf) into ``leaf.grad`` for every leaf on the tape.

    Interior gradients are recomputed from scratch on each call; leaf
    gradients accumulate until ``zero_grad``.
    """
    if out.data.size != 1:
        raise NotScalar(f"backward needs a scalar output, got shape {out.shape}")
    if not out.requires_grad:
        return
    order = _topo_order(out)
    for node in order:
        if not node.is_leaf:
            node.grad = None
    out.grad = np.ones_like(out.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- elementary ops -----------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    def bw(out):
        _accum(a, _unbroadcast(out.grad, a.shape))
        _accum(b, _unbroadcast(out.grad, b.shape))
    return _node(a.data + b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bw(out):
        _accum(a, _unbroadcast(out.grad * b.data, a.shape))
        _accum(b, _unbroadcast(out.grad * a.data, b.shape))
    return _node(a.data * b.data, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionMismatch(f"matmul {a.shape} @ {b.shape}")

    def bw(out):
        _accum(a, out.grad @ b.data.T)
        _accum(b, a.data.T @ out.grad)
    return _node(a.data @ b.data, (a, b), bw)


def tensor_sum(a: Tensor) -> Tensor:
    def bw(out):
        _accum(a, np.broadcast_to(out.grad, a.shape).copy())
    return _node(np.asarray(a.data.sum()), (a,), bw)


def getitem(a: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing."""
    def bw(out):
        g = np.zeros_like(a.data)
        g[key] = out.grad
        _accum(a, g)
    return _node(np.array(a.data[key]), (a,), bw)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def bw(out):
        _accum(a, out.grad.reshape(a.shape))
    return _node(a.data.reshape(shape), (a,), bw)


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    s = sigmoid_np(a.data)

    def bw(out):
        _accum(a, out.grad * s * (1.0 - s))
    return _node(s, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)

    def bw(out):
        _accum(a, out.grad * (1.0 - t * t))
    return _node(t, (a,), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w.T + b for x of shape (..., in) and w of shape (out, in)."""
    if x.shape[-1] != w.shape[1]:
        raise DimensionMismatch(f"linear: input dim {x.shape[-1]} != weight in-dim {w.shape[1]}")
    y = x.data @ w.data.T
    if b is not None:
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bw(out):
        g = out.grad
        g2 = g.reshape(-1, g.shape[-1])
        _accum(x, g @ w.data)
        _accum(w, g2.T @ x.data.reshape(-1, x.shape[-1]))
        if b is not None:
            _accum(b, g2.sum(axis=0))
    return _node(y, parents, bw)


def take_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: rows ``ids`` of a 2-D table."""
    ids = np.asarray(ids, dtype=np.intp)

    def bw(out):
        g = np.zeros_like(table.data)
        np.add.at(g, ids, out.grad)
        _accum(table, g)
    return _node(table.data[ids], (table,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    axis = axis % tensors[0].data.ndim
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(out):
        for t, g in zip(tensors, np.split(out.grad, bounds, axis=axis)):
            _accum(t, g)
    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


# -- LSTM ---------------------------------------------------------------

@dataclass
class LstmCellParams:
    """Gate weights stacked as [input, forget, cell candidate, output]."""

    w_ih: Tensor
    w_hh: Tensor
    b: Tensor
    input_dim: int
    hidden_dim: int

    def __post_init__(self) -> None:
        h4 = 4 * self.hidden_dim
        if self.w_ih.shape != (h4, self.input_dim):
            raise DimensionMismatch(f"w_ih shape {self.w_ih.shape} != {(h4, self.input_dim)}")
        if self.w_hh.shape != (h4, self.hidden_dim):
            raise DimensionMismatch(f"w_hh shape {self.w_hh.shape} != {(h4, self.hidden_dim)}")
        if self.b.shape != (h4,):
            raise DimensionMismatch(f"bias shape {self.b.shape} != {(h4,)}")

    @classmethod
    def init(cls, rng: np.random.Generator, input_dim: int, hidden_dim: int, name: str = "lstm") -> "LstmCellParams":
        k = 1.0 / np.sqrt(hidden_dim)
        return cls(
            parameter(rng.uniform(-k, k, (4 * hidden_dim, input_dim)), f"{name}.w_ih"),
            parameter(rng.uniform(-k, k, (4 * hidden_dim, hidden_dim)), f"{name}.w_hh"),
            parameter(np.zeros(4 * hidden_dim), f"{name}.b"),
            input_dim,
            hidden_dim,
        )

    @classmethod
    def zeros(cls, input_dim: int, hidden_dim: int, name: str = "lstm") -> "LstmCellParams":
        return cls(
            parameter(np.zeros((4 * hidden_dim, input_dim)), f"{name}.w_ih"),
            parameter(np.zeros((4 * hidden_dim, hidden_dim)), f"{name}.w_hh"),
            parameter(np.zeros(4 * hidden_dim), f"{name}.b"),
            input_dim,
            hidden_dim,
        )

    def parameters(self) -> list[Tensor]:
        return [self.w_ih, self.w_hh, self.b]


def _lstm_gates(x: Tensor, h: Tensor, p: LstmCellParams) -> Tensor:
    H = p.hidden_dim
    z = x.data @ p.w_ih.data.T + h.data @ p.w_hh.data.T + p.b.data
    a = np.empty_like(z)
    a[..., : 2 * H] = sigmoid_np(z[..., : 2 * H])
    a[..., 2 * H : 3 * H] = np.tanh(z[..., 2 * H : 3 * H])
    a[..., 3 * H :] = sigmoid_np(z[..., 3 * H :])

    def bw(out):
        deriv = a * (1.0 - a)
        g_part = a[..., 2 * H : 3 * H]
        deriv[..., 2 * H : 3 * H] = 1.0 - g_part * g_part
        dz = out.grad * deriv
        dz2 = dz.reshape(-1, 4 * H)
        _accum(x, dz @ p.w_ih.data)
        _accum(h, dz @ p.w_hh.data)
        _accum(p.w_ih, dz2.T @ x.data.reshape(-1, p.input_dim))
        _accum(p.w_hh, dz2.T @ h.data.reshape(-1, H))
        _accum(p.b, dz2.sum(axis=0))
    return _node(a, (x, h, p.w_ih, p.w_hh, p.b), bw)


def _lstm_cell(gates: Tensor, c: Tensor, H: int) -> Tensor:
    a = gates.data
    i, f, g = a[..., :H], a[..., H : 2 * H], a[..., 2 * H : 3 * H]

    def bw(out):
        dc = out.grad
        da = np.zeros_like(a)
        da[..., :H] = dc * g
        da[..., H : 2 * H] = dc * c.data
        da[..., 2 * H : 3 * H] = dc * i
        _accum(gates, da)
        _accum(c, dc * f)
    return _node(f * c.data + i * g, (gates, c), bw)


def _lstm_hidden(gates: Tensor, cell: Tensor, H: int) -> Tensor:
    o = gates.data[..., 3 * H :]
    tc = np.tanh(cell.data)

    def bw(out):
        dh = out.grad
        da = np.zeros_like(gates.data)
        da[..., 3 * H :] = dh * tc
        _accum(gates, da)
        _accum(cell, dh * o * (1.0 - tc * tc))
    return _node(o * tc, (gates, cell), bw)


def lstm_step(x: Tensor, h: Tensor, c: Tensor, p: LstmCellParams) -> tuple[Tensor, Tensor]:
    """One LSTM step; ``x``, ``h``, ``c`` are vectors or row batches."""
    if x.shape[-1] != p.input_dim:
        raise DimensionMismatch(f"lstm input dim {x.shape[-1]} != {p.input_dim}")
    if h.shape[-1] != p.hidden_dim or c.shape != h.shape:
        raise DimensionMismatch(f"lstm state shapes {h.shape}/{c.shape}, hidden dim {p.hidden_dim}")
    if x.shape[:-1] != h.shape[:-1]:
        raise DimensionMismatch(f"lstm batch shapes differ: {x.shape} vs {h.shape}")
    gates = _lstm_gates(x, h, p)
    c_new = _lstm_cell(gates, c, p.hidden_dim)
    h_new = _lstm_hidden(gates, c_new, p.hidden_dim)
    return h_new, c_new


# Whole-sequence LSTM with manual backpropagation through time. The cell
# math is identical to ``lstm_step``; weight gradients are summed over all
# steps with one matmul each.

_GATE_SCALE: dict[int, np.ndarray] = {}


def _gate_scale(H: int) -> np.ndarray:
    """Per-row factor folded into the gate weights: -1 for i, f, o and -2 for g.

    With it a single exp pass yields every gate, since sigmoid(z) = 1 / (1 + exp(-z))
    and tanh(z) = 2 * sigmoid(2z) - 1. Powers of two keep the scaling exact.
    """
    if H not in _GATE_SCALE:
        k = np.full(4 * H, -1.0)
        k[2 * H : 3 * H] = -2.0
        _GATE_SCALE[H] = k
    return _GATE_SCALE[H]


def gate_prescale(w_ih: np.ndarray, w_hh: np.ndarray, b: np.ndarray, H: int):
    """Scaled copies of the cell weights for ``cell_forward``."""
    k = _gate_scale(H)
    return w_ih * k[:, None], w_hh * k[:, None], b * k


def cell_forward(zx: np.ndarray, h: np.ndarray, c: np.ndarray, w_hh: np.ndarray, H: int):
    """One cell update given the prescaled input projection ``zx`` (bias included).

    ``zx`` and ``w_hh`` come from ``gate_prescale``. Leading axes are batch
    axes; a stacked ``w_hh`` of shape ``(D, 4H, H)`` updates ``D`` independent
    cells at once.
    """
    a = h @ np.swapaxes(w_hh, -1, -2)
    a += zx
    with np.errstate(over="ignore"):
        np.exp(a, out=a)
    a += 1.0
    np.reciprocal(a, out=a)
    g = a[..., 2 * H : 3 * H]
    g *= 2.0
    g -= 1.0
    c_new = a[..., H : 2 * H] * c
    c_new += a[..., :H] * g
    tc = np.tanh(c_new)
    return a, c_new, tc, a[..., 3 * H :] * tc


def cell_backward(dh: np.ndarray, dc: np.ndarray, a: np.ndarray, c_prev: np.ndarray, tc: np.ndarray, H: int):
    """Gate pre-activation grads and carried-cell grad for one step."""
    i, f, g, o = a[..., :H], a[..., H : 2 * H], a[..., 2 * H : 3 * H], a[..., 3 * H :]
    dct = dh * o
    dct *= 1.0 - tc * tc
    dct += dc
    dz = a * (1.0 - a)
    dz[..., 2 * H : 3 * H] = 1.0 - g * g
    dz[..., :H] *= dct * g
    dz[..., H : 2 * H] *= dct * c_prev
    dz[..., 2 * H : 3 * H] *= dct * i
    dz[..., 3 * H :] *= dh * tc
    return dz, dct * f


def _active_counts(lengths: np.ndarray, T: int) -> tuple[np.ndarray, np.ndarray]:
    """Rows sorted longest first, and how many of them are still running at each step."""
    perm = np.argsort(-lengths, kind="stable")
    counts = (lengths[perm][None, :] > np.arange(T)[:, None]).sum(axis=1)
    return perm, counts


def lstm_sequence(x: Tensor, p: LstmCellParams, lengths=None, reverse: bool = False) -> Tensor:
    """Run ``p`` over ``x`` of shape ``(T, B, input_dim)`` from a zero state.

    Row ``b`` only updates on steps ``t < lengths[b]``; elsewhere its state is
    carried unchanged. With ``reverse`` the steps run ``T-1 .. 0``. Returns
    the carried states as ``(T, B, 2H)`` with ``[..., :H] = h`` and
    ``[..., H:] = c``; the final state sits at index ``T-1`` (or ``0`` when
    reversed).
    """
    T, B, I = x.shape
    H = p.hidden_dim
    if I != p.input_dim:
        raise DimensionMismatch(f"lstm input dim {I} != {p.input_dim}")
    lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
    # rows run longest first so the live rows at every step form a prefix
    perm, counts = _active_counts(lengths, T)
    xs = x.data[:, perm]
    order = range(T - 1, -1, -1) if reverse else range(T)
    w_ih, w_hh = p.w_ih.data, p.w_hh.data
    # project only the live (t, row) pairs, packed step by step
    live = np.arange(B)[None, :] < counts[:, None]
    x_live = xs[live]
    sw_ih, sw_hh, sb = gate_prescale(w_ih, w_hh, p.b.data, H)
    zx = x_live @ sw_ih.T + sb
    offsets = np.concatenate([[0], np.cumsum(counts)])
    prev = np.zeros((B, 2 * H))
    out = np.empty((T, B, 2 * H))
    tape = []
    for t in order:
        n = counts[t]
        out[t] = prev
        if n:
            h, c = prev[:n, :H], prev[:n, H:]
            a, c_new, tc, h_new = cell_forward(zx[offsets[t] : offsets[t] + n], h, c, sw_hh, H)
            tape.append((t, n, a, h, c, tc))
            out[t, :n, :H] = h_new
            out[t, :n, H:] = c_new
        prev = out[t]
    inverse = np.empty_like(perm)
    inverse[perm] = np.arange(B)

    def bw(node):
        g = node.grad[:, perm]
        d = np.zeros((B, 2 * H))
        dz_live = np.empty_like(zx)
        h_live = np.empty((len(zx), H))
        steps = iter(reversed(tape))
        pending = next(steps, None)
        for t in order[::-1]:
            d += g[t]
            if pending is not None and pending[0] == t:
                _, n, a, h_prev, c_prev, tc = pending
                pending = next(steps, None)
                dz, dc_prev = cell_backward(d[:n, :H], d[:n, H:], a, c_prev, tc, H)
                d[:n, :H] = dz @ w_hh
                d[:n, H:] = dc_prev
                dz_live[offsets[t] : offsets[t] + n] = dz
                h_live[offsets[t] : offsets[t] + n] = h_prev
        dx = np.zeros((T, B, I))
        dx[live] = dz_live @ w_ih
        _accum(x, dx[:, inverse])
        _accum(p.w_ih, dz_live.T @ x_live)
        _accum(p.w_hh, dz_live.T @ h_live)
        _accum(p.b, dz_live.sum(axis=0))

    return _node(out[:, inverse], (x, p.w_ih, p.w_hh, p.b), bw)


def lstm_final(x: Tensor, cells: Sequence[LstmCellParams], lengths=None) -> Tensor:
    """Final ``[h, c]`` states of ``D`` independent LSTMs run in lockstep.

    ``x`` has shape ``(D, T, B, input_dim)``, one input stream per cell, all
    starting from a zero state; row ``b`` stops after ``lengths[b]`` steps.
    Returns ``(D, B, 2H)``. Cheaper than ``lstm_sequence`` when only the last
    state is needed, e.g. for both directions of a BiLSTM (feed the second
    stream each row reversed within its length).
    """
    D, T, B, I = x.shape
    if len(cells) != D:
        raise DimensionMismatch(f"{len(cells)} cells for {D} input streams")
    H = cells[0].hidden_dim
    if any(p.input_dim != I or p.hidden_dim != H for p in cells):
        raise DimensionMismatch(f"lstm_final cells must all map {I} -> {H}")
    lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
    if lengths.shape != (B,) or lengths.min(initial=1) < 1 or lengths.max(initial=1) > T:
        raise DimensionMismatch("lengths must lie in 1..T for every row")
    perm, counts = _active_counts(lengths, T)
    w_ih = np.stack([p.w_ih.data for p in cells])
    w_hh = np.stack([p.w_hh.data for p in cells])
    bias = np.stack([p.b.data for p in cells])
    live = np.arange(B)[None, :] < counts[:, None]
    x_live = x.data[:, :, perm][:, live]
    k = _gate_scale(H)
    sw_hh = w_hh * k[:, None]
    zx = x_live @ np.swapaxes(w_ih * k[:, None], 1, 2) + (bias * k)[:, None, :]
    offsets = np.concatenate([[0], np.cumsum(counts)])
    ends = np.append(counts[1:], 0)
    steps = int(lengths.max())
    h = np.zeros((D, B, H))
    c = np.zeros((D, B, H))
    final = np.empty((D, B, 2 * H))
    tape = []
    for t in range(steps):
        n, done = counts[t], ends[t]
        h, c = h[:, :n], c[:, :n]
        a, c_new, tc, h_new = cell_forward(zx[:, offsets[t] : offsets[t] + n], h, c, sw_hh, H)
        tape.append((a, h, c, tc))
        final[:, done:n, :H] = h_new[:, done:n]
        final[:, done:n, H:] = c_new[:, done:n]
        h, c = h_new, c_new
    inverse = np.empty_like(perm)
    inverse[perm] = np.arange(B)

    def bw(node):
        g = node.grad[:, perm]
        dh = np.zeros((D, 0, H))
        dc = np.zeros((D, 0, H))
        dz_live = np.empty_like(zx)
        h_live = np.empty((D, len(x_live[0]), H))
        for t in range(steps - 1, -1, -1):
            n, done = counts[t], ends[t]
            a, h_prev, c_prev, tc = tape[t]
            # rows done..n ended at this step and start receiving gradient here
            dh = np.concatenate([dh, g[:, done:n, :H]], axis=1)
            dc = np.concatenate([dc, g[:, done:n, H:]], axis=1)
            dz, dc = cell_backward(dh, dc, a, c_prev, tc, H)
            dh = dz @ w_hh
            dz_live[:, offsets[t] : offsets[t] + n] = dz
            h_live[:, offsets[t] : offsets[t] + n] = h_prev
        dx = np.zeros((D, T, B, I))
        dx[:, live] = dz_live @ w_ih
        _accum(x, dx[:, :, inverse])
        dz_t = np.swapaxes(dz_live, 1, 2)
        gw_ih, gw_hh, gb = dz_t @ x_live, dz_t @ h_live, dz_live.sum(axis=1)
        for k, p in enumerate(cells):
            _accum(p.w_ih, gw_ih[k])
            _accum(p.w_hh, gw_hh[k])
            _accum(p.b, gb[k])

    parents = (x,) + tuple(t for p in cells for t in (p.w_ih, p.w_hh, p.b))
    return _node(final[:, inverse], parents, bw)


# -- softmax / loss -----------------------------------------------------

def softmax(v, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (max subtraction)."""
    v = np.asarray(v, dtype=DTYPE)
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=DTYPE)
    shifted = v - v.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean of -log softmax(logits)[target] over unmasked rows."""
    targets = np.asarray(targets, dtype=np.intp)
    n, k = logits.shape
    mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if targets.shape != (n,) or mask.shape != (n,):
        raise DimensionMismatch(f"targets/mask must have shape ({n},)")
    count = int(mask.sum())
    if count == 0:
        raise AllMasked("every position is masked")
    safe = np.where(mask, targets, 0)
    if safe.min() < 0 or safe.max() >= k:
        raise ValueError(f"target ids must lie in 0..{k - 1}")
    logp = log_softmax(logits.data)
    picked = logp[np.arange(n), safe]
    loss = -(picked * mask).sum() / count

    def bw(out):
        g = np.exp(logp)
        g[np.arange(n), safe] -= 1.0
        g *= (mask / count)[:, None] * out.grad
        _accum(logits, g)
    return _node(np.asarray(loss), (logits,), bw)


def sgd_step(params: Iterable[Tensor], lr: float) -> None:
    """In-place ``p <- p - lr * grad``; parameters without a gradient are untouched."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for p in params:
        if p.grad is not None:
            p.data -= lr * p.grad


# -- finite differences -------------------------------------------------

def finite_difference(loss_fn: Callable[[], float], param: Tensor, index: tuple[int, ...],
                      eps: float = 1e-5) -> float:
    """Central difference of ``loss_fn`` w.r.t. one entry of ``param``."""
    original = param.data[index]
    try:
        param.data[index] = original + eps
        up = loss_fn()
        param.data[index] = original - eps
        down = loss_fn()
    finally:
        param.data[index] = original
    return (up - down) / (2.0 * eps)


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def gradient_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], samples_per_param: int,
                   rng: np.random.Generator, eps: float = 1e-5,
                   candidates: dict[str, np.ndarray] | None = None) -> list[dict]:
    """Compare reverse-mode gradients with central differences.

    ``candidates`` optionally restricts, per parameter name, which flat
    indices may be sampled (e.g. embedding rows the loss actually touches).
    Returns one record per sampled entry.
    """
    zero_grad(params)
    loss = loss_fn()
    backward(loss)
    analytic = {id(p): (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for p in params}

    def value() -> float:
        with no_grad():
            return float(loss_fn().data)

    records = []
    for p in params:
        pool = None if candidates is None else candidates.get(p.name)
        pool = np.arange(p.size) if pool is None else np.asarray(pool)
        chosen = rng.choice(pool, size=min(samples_per_param, len(pool)), replace=False)
        for flat in chosen:
            idx = np.unravel_index(int(flat), p.shape)
            num = finite_difference(value, p, idx, eps)
            ana = float(analytic[id(p)][idx])
            records.append({"param": p.name, "index": tuple(int(i) for i in idx),
                            "analytic": ana, "numeric": num, "rel_error": relative_error(ana, num)})
    zero_grad(params)
    return records
