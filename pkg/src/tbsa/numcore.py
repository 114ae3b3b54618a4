"""A small reverse-mode autodiff core on top of numpy.

Graphs are built eagerly: every operation returns a :class:`Var` that
remembers its parents and a closure propagating the upstream gradient.
The LSTM sequence and the sentiment-consistency carry are fused ops with
hand-written backward passes; everything else is elementwise or dense.
All arithmetic is float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, NamedTuple, Optional, Sequence

import numpy as np

LOG_CLAMP = 1e-12


class Var:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, value, parents: Sequence["Var"] = (), backward: Optional[Callable] = None,
                 requires_grad: bool = False, name: Optional[str] = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self._parents = tuple(parents)
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in self._parents)
        self.name = name

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Var{tag}(shape={self.value.shape})"

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        if self.value.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {self.value.shape}")
        order = _toposort(self)
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar; all broadcast like numpy
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -_as_var(other))

    def __rsub__(self, other):
        return add(_as_var(other), -self)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def _toposort(root: Var) -> list[Var]:
    order, seen, stack = [], set(), [(root, False)]
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


def _as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def param(value, name: Optional[str] = None) -> Var:
    """Leaf variable that collects a gradient."""
    return Var(value, requires_grad=True, name=name)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)

    def backward(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(g, b.shape))

    return Var(a.value + b.value, (a, b), backward)


def mul(a, b) -> Var:
    a, b = _as_var(a), _as_var(b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.value, b.shape))

    return Var(a.value * b.value, (a, b), backward)


def scale(a: Var, k: float) -> Var:
    return Var(a.value * k, (a,), lambda g: a._accum(g * k))


def reduce_sum(a: Var, axis=None) -> Var:
    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape))

    return Var(a.value.sum(axis=axis), (a,), backward)


def reshape(a: Var, shape) -> Var:
    return Var(a.value.reshape(shape), (a,), lambda g: a._accum(g.reshape(a.shape)))


def take(a: Var, index) -> Var:
    def backward(g):
        full = np.zeros_like(a.value)
        np.add.at(full, index, g)
        a._accum(full)

    return Var(a.value[index], (a,), backward)


def concat(parts: Sequence[Var], axis: int = -1) -> Var:
    parts = [_as_var(p) for p in parts]
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g):
        for p, piece in zip(parts, np.split(g, sizes, axis=axis)):
            p._accum(piece)

    return Var(np.concatenate([p.value for p in parts], axis=axis), parts, backward)


def linear(W, x) -> Var:
    """``W @ x`` for a vector ``x``, or row-wise ``x @ W.T`` for a (T, n) matrix."""
    W, x = _as_var(W), _as_var(x)
    if W.value.ndim != 2 or x.value.ndim not in (1, 2) or W.shape[1] != x.shape[-1]:
        raise ValueError(f"linear: cannot apply W{W.shape} to x{x.shape}")

    def backward(g):
        if x.value.ndim == 1:
            W._accum(np.outer(g, x.value))
            x._accum(W.value.T @ g)
        else:
            W._accum(g.T @ x.value)
            x._accum(g @ W.value)

    return Var(x.value @ W.value.T, (W, x), backward)


def matmul(a, b) -> Var:
    """``a @ b`` for a (k,) or (T, k) left operand and a (k, m) right operand."""
    a, b = _as_var(a), _as_var(b)
    if b.value.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul: shapes {a.shape} and {b.shape} do not align")

    def backward(g):
        a._accum(g @ b.value.T)
        if a.value.ndim == 1:
            b._accum(np.outer(a.value, g))
        else:
            b._accum(a.value.T @ g)

    return Var(a.value @ b.value, (a, b), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Var:
    a = _as_var(a)
    out = _sigmoid(a.value)
    return Var(out, (a,), lambda g: a._accum(g * out * (1.0 - out)))


def tanh(a) -> Var:
    a = _as_var(a)
    out = np.tanh(a.value)
    return Var(out, (a,), lambda g: a._accum(g * (1.0 - out * out)))


def _softmax(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(v) -> Var:
    """Softmax over the last axis."""
    v = _as_var(v)
    if not np.all(np.isfinite(v.value)):
        raise ValueError("softmax input must be finite")
    out = _softmax(v.value)

    def backward(g):
        v._accum(out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return Var(out, (v,), backward)


def masked_softmax(logits, mask: np.ndarray) -> Var:
    """Row softmax over the entries where ``mask`` is true; zero elsewhere."""
    logits = _as_var(logits)
    shifted = np.where(mask, logits.value, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        logits._accum(out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return Var(out, (logits,), backward)


def cross_entropy(p, y) -> Var:
    """``-log p[y]`` with ``p[y]`` clamped at 1e-12.

    For a (T, K) matrix and T gold indices this is the mean over rows.
    """
    p = _as_var(p)
    y = np.asarray(y, dtype=np.int64)
    k = p.shape[-1]
    if np.any(y < 0) or np.any(y >= k):
        raise ValueError(f"gold index out of range for {k} classes")
    if p.value.ndim == 1:
        if y.ndim != 0:
            raise ValueError("a single distribution needs a single gold index")
        rows = ()
        n = 1
    else:
        if y.shape != (p.shape[0],):
            raise ValueError(f"{p.shape[0]} distributions but {y.shape} gold indices")
        rows = (np.arange(p.shape[0]),)
        n = p.shape[0]
    picked = p.value[rows + (y,)]
    clamped = np.maximum(picked, LOG_CLAMP)
    loss = -np.log(clamped).sum() / n

    def backward(g):
        full = np.zeros_like(p.value)
        full[rows + (y,)] = np.where(picked > LOG_CLAMP, -1.0 / clamped, 0.0) * (g / n)
        p._accum(full)

    return Var(loss, (p,), backward)


def dropout(v, rate: float, rng: Optional[np.random.Generator], training: bool) -> Var:
    """Inverted dropout; identity when not training or when rate is 0."""
    v = _as_var(v)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return v
    keep = (rng.random(v.shape) >= rate) / (1.0 - rate)
    return mul(v, Var(keep))


def glorot_init(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    if rows < 1 or cols < 1:
        raise ValueError("glorot_init needs positive dimensions")
    a = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-a, a, size=(rows, cols))


def uniform_init(shape, bound: float, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


# LSTM ---------------------------------------------------------------------

class LstmParams(NamedTuple):
    """One LSTM direction. Gate blocks are stacked in the order i, f, o, g.

    ``w_x`` is (4h, n), ``w_h`` is (4h, h) and ``b`` is (4h,). Fields may hold
    plain arrays or :class:`Var` leaves.
    """

    w_x: object
    w_h: object
    b: object

    @property
    def hidden_size(self) -> int:
        return _val(self.w_h).shape[1]

    @property
    def input_size(self) -> int:
        return _val(self.w_x).shape[1]


def _val(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def init_lstm(input_size: int, hidden_size: int, rng: np.random.Generator) -> LstmParams:
    w_x = np.concatenate([glorot_init(hidden_size, input_size, rng) for _ in range(4)])
    w_h = np.concatenate([glorot_init(hidden_size, hidden_size, rng) for _ in range(4)])
    return LstmParams(w_x, w_h, np.zeros(4 * hidden_size))


def _check_lstm(p: LstmParams, n: int) -> int:
    w_x, w_h, b = _val(p.w_x), _val(p.w_h), _val(p.b)
    h = w_h.shape[1]
    if w_x.shape != (4 * h, n) or w_h.shape != (4 * h, h) or b.shape != (4 * h,):
        raise ValueError(f"LSTM params {w_x.shape}/{w_h.shape}/{b.shape} do not fit input size {n}")
    return h


def lstm_cell(x, h_prev, c_prev, p: LstmParams) -> tuple[np.ndarray, np.ndarray]:
    """One LSTM step on plain arrays; returns ``(h, c)``."""
    x = np.asarray(x, dtype=np.float64)
    h = _check_lstm(p, x.shape[0])
    h_prev = np.asarray(h_prev, dtype=np.float64)
    c_prev = np.asarray(c_prev, dtype=np.float64)
    if h_prev.shape != (h,) or c_prev.shape != (h,):
        raise ValueError(f"LSTM state must have shape ({h},)")
    a = _val(p.w_x) @ x + _val(p.w_h) @ h_prev + _val(p.b)
    i, f, o = _sigmoid(a[:h]), _sigmoid(a[h:2 * h]), _sigmoid(a[2 * h:3 * h])
    g = np.tanh(a[3 * h:])
    c = f * c_prev + i * g
    return o * np.tanh(c), c


def lstm_sequence(X, p: LstmParams, reverse: bool = False) -> Var:
    """Run one LSTM direction over the rows of ``X`` (T, n); returns (T, h).

    With ``reverse`` the sequence is consumed from the end, and row t of the
    output is still aligned with input row t.
    """
    X = _as_var(X)
    w_x, w_h, b = (_as_var(q) for q in p)
    T, n = X.shape
    h = _check_lstm(p, n)
    order = range(T - 1, -1, -1) if reverse else range(T)

    A = X.value @ w_x.value.T + b.value
    H = np.zeros((T, h))
    C = np.zeros((T, h))
    gates = np.zeros((T, 4 * h))
    H_prev = np.zeros((T, h))
    C_prev = np.zeros((T, h))
    hp, cp = np.zeros(h), np.zeros(h)
    for t in order:
        a = A[t] + w_h.value @ hp
        act = np.concatenate([_sigmoid(a[:3 * h]), np.tanh(a[3 * h:])])
        i, f, o, g = act[:h], act[h:2 * h], act[2 * h:3 * h], act[3 * h:]
        c = f * cp + i * g
        H_prev[t], C_prev[t] = hp, cp
        hp, cp = o * np.tanh(c), c
        H[t], C[t], gates[t] = hp, cp, act

    def backward(G):
        dA = np.zeros((T, 4 * h))
        dh_next, dc_next = np.zeros(h), np.zeros(h)
        for t in reversed(list(order)):
            i, f, o, g = gates[t, :h], gates[t, h:2 * h], gates[t, 2 * h:3 * h], gates[t, 3 * h:]
            tc = np.tanh(C[t])
            dh = G[t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            da = np.concatenate([
                dc * g * i * (1.0 - i),
                dc * C_prev[t] * f * (1.0 - f),
                dh * tc * o * (1.0 - o),
                dc * i * (1.0 - g * g),
            ])
            dA[t] = da
            dh_next = w_h.value.T @ da
            dc_next = dc * f
        X._accum(dA @ w_x.value)
        w_x._accum(dA.T @ X.value)
        w_h._accum(dA.T @ H_prev)
        b._accum(dA.sum(axis=0))

    return Var(H, (X, w_x, w_h, b), backward)


def bilstm(seq, p_fwd: LstmParams, p_bwd: LstmParams) -> Var:
    """Concatenate forward and backward LSTM states per position: (T, 2h)."""
    X = _as_var(seq) if isinstance(seq, Var) else Var(np.asarray(seq, dtype=np.float64))
    if X.value.ndim != 2 or X.shape[0] == 0:
        raise ValueError("bilstm needs a non-empty (T, n) sequence")
    if p_fwd.hidden_size != p_bwd.hidden_size:
        raise ValueError("both LSTM directions must share the hidden size")
    return concat([lstm_sequence(X, p_fwd), lstm_sequence(X, p_bwd, reverse=True)], axis=-1)


def gated_carry(H, G) -> Var:
    """``out[0] = H[0]``; ``out[t] = G[t] * H[t] + (1 - G[t]) * out[t-1]``."""
    H, G = _as_var(H), _as_var(G)
    if H.shape != G.shape or H.value.ndim != 2 or H.shape[0] == 0:
        raise ValueError(f"gated_carry needs matching non-empty (T, k) inputs, got {H.shape}, {G.shape}")
    h, g = H.value, G.value
    out = np.empty_like(h)
    out[0] = h[0]
    for t in range(1, h.shape[0]):
        out[t] = g[t] * h[t] + (1.0 - g[t]) * out[t - 1]

    def backward(D):
        dH = np.zeros_like(h)
        dG = np.zeros_like(g)
        carry = np.zeros(h.shape[1])
        for t in range(h.shape[0] - 1, 0, -1):
            carry = carry + D[t]
            dH[t] = g[t] * carry
            dG[t] = (h[t] - out[t - 1]) * carry
            carry = (1.0 - g[t]) * carry
        dH[0] = carry + D[0]
        H._accum(dH)
        G._accum(dG)

    return Var(out, (H, G), backward)


# gradients and optimisation -----------------------------------------------

def gradients(loss: Var, params: Mapping[str, Var]) -> dict[str, np.ndarray]:
    """Reverse-mode gradient of a scalar ``loss`` for each named leaf."""
    loss.backward()
    return {
        name: (np.zeros_like(v.value) if v.grad is None else v.grad)
        for name, v in params.items()
    }


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.9
    eps: float = 1e-8
    lr: float = 1e-3
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: Optional[float] = None) -> None:
    """Bias-corrected Adam update, in place, for every parameter in ``grads``."""
    lr = state.lr if lr is None else lr
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def global_norm(grads: Iterable[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
