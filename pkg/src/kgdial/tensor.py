"""Dense float64 tensors with a tape-based reverse-mode autodiff.

A :class:`Tape` is built fresh for every forward pass.  Parameters enter the
tape through :meth:`Tape.watch`; every primitive applied to a watched tensor
appends a :class:`Record` holding a pure forward function and its
vector-Jacobian product.  Tensors created without a tape are plain constants,
so the same model code runs untracked (and cheaply) at inference time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operands or parameter blocks have incompatible dimensions."""


class NumericalError(FloatingPointError):
    """A non-finite value reached an operation that requires finite input."""


@dataclass
class Record:
    op: str
    inputs: tuple  # node id (int) for tracked inputs, the raw array otherwise
    output: int
    fwd: Callable
    vjp: Callable


@dataclass
class Tape:
    """Ordered record of executed primitives for one forward pass."""

    records: list = field(default_factory=list)
    values: list = field(default_factory=list)
    leaves: dict = field(default_factory=dict)  # node id -> parameter name

    def _new_node(self, value: np.ndarray) -> int:
        self.values.append(value)
        return len(self.values) - 1

    def watch(self, name: str, value) -> "Tensor":
        """Register a trainable parameter and return its tracked tensor."""
        if name in self.leaves.values():
            raise ValueError(f"parameter {name!r} already watched on this tape")
        arr = np.asarray(value, dtype=DTYPE)
        node = self._new_node(arr)
        self.leaves[node] = name
        return Tensor(arr, self, node)

    def replay(self, leaf_values: Mapping[str, np.ndarray] | None = None) -> list:
        """Re-execute every record from the leaves and return all node values.

        With no overrides the result is bit-identical to the recorded values.
        """
        leaf_values = leaf_values or {}
        values = [None] * len(self.values)
        for node, name in self.leaves.items():
            values[node] = np.asarray(leaf_values.get(name, self.values[node]), dtype=DTYPE)
        for rec in self.records:
            args = [values[i] if isinstance(i, int) else i for i in rec.inputs]
            values[rec.output] = rec.fwd(*args)
        return values


class Tensor:
    __slots__ = ("data", "tape", "node")
    __array_ufunc__ = None  # make ndarray-op-Tensor dispatch to Tensor's reflected methods

    def __init__(self, data, tape: Tape | None = None, node: int | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.node is not None

    def __repr__(self) -> str:
        flag = ", tracked" if self.tracked else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _apply(op: str, fwd: Callable, vjp: Callable, *operands) -> Tensor:
    tensors = [as_tensor(x) for x in operands]
    out = fwd(*(t.data for t in tensors))
    tape = None
    for t in tensors:
        if t.tracked:
            if tape is not None and t.tape is not tape:
                raise ValueError("operands recorded on different tapes")
            tape = t.tape
    if tape is None:
        return Tensor(out)
    node = tape._new_node(out)
    inputs = tuple(t.node if t.tracked else t.data for t in tensors)
    tape.records.append(Record(op, inputs, node, fwd, vjp))
    return Tensor(out, tape, node)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    return _apply(
        "add",
        np.add,
        lambda g, x, y, out: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)),
        a, b,
    )


def sub(a, b) -> Tensor:
    return _apply(
        "sub",
        np.subtract,
        lambda g, x, y, out: (_unbroadcast(g, x.shape), -_unbroadcast(g, y.shape)),
        a, b,
    )


def mul(a, b) -> Tensor:
    return _apply(
        "mul",
        np.multiply,
        lambda g, x, y, out: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
        a, b,
    )


def _sigmoid(x):
    # tanh form: overflow-free and exact at 0
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    return _apply("sigmoid", _sigmoid, lambda g, x, out: (g * out * (1.0 - out),), a)


def tanh(a) -> Tensor:
    return _apply("tanh", np.tanh, lambda g, x, out: (g * (1.0 - out * out),), a)


def exp(a) -> Tensor:
    return _apply("exp", np.exp, lambda g, x, out: (g * out,), a)


def log(a) -> Tensor:
    def fwd(x):
        with np.errstate(divide="ignore"):
            return np.log(x)

    return _apply("log", fwd, lambda g, x, out: (g / x,), a)


# -- reductions and shape ------------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    def vjp(g, x, out):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _apply("sum", lambda x: np.sum(x, axis=axis, keepdims=keepdims), vjp, a)


def reshape(a, shape: tuple) -> Tensor:
    return _apply(
        "reshape",
        lambda x: np.reshape(x, shape),
        lambda g, x, out: (np.reshape(g, x.shape),),
        a,
    )


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    def fwd(*xs):
        return np.concatenate(xs, axis=axis)

    def vjp(g, *args):
        xs = args[:-1]
        bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return tuple(np.split(g, bounds, axis=axis))

    return _apply("concat", fwd, vjp, *parts)


def index(a, key) -> Tensor:
    """Basic (slice/int) indexing; the key is static."""

    def vjp(g, x, out):
        full = np.zeros_like(x)
        full[key] = g
        return (full,)

    return _apply("index", lambda x: x[key], vjp, a)


def take_rows(table, ids) -> Tensor:
    """Row gather ``table[ids]`` (embedding lookup)."""
    ids = np.asarray(ids, dtype=np.int64)

    def vjp(g, t, out):
        full = np.zeros_like(t)
        np.add.at(full, ids, g)
        return (full,)

    return _apply("take_rows", lambda t: t[ids], vjp, table)


def pick(a, ids) -> Tensor:
    """Select ``a[b, ids[b]]`` for each row ``b`` of a 2-D tensor."""
    ids = np.asarray(ids, dtype=np.int64)
    rows = np.arange(len(ids))

    def vjp(g, x, out):
        full = np.zeros_like(x)
        full[rows, ids] = g
        return (full,)

    return _apply("pick", lambda x: x[rows, ids], vjp, a)


# -- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a`` of any rank >= 1 and a 2-D ``b``."""

    def fwd(x, w):
        if w.ndim != 2 or x.shape[-1] != w.shape[0]:
            raise ShapeError(f"matmul shapes {x.shape} and {w.shape} do not align")
        return x @ w

    def vjp(g, x, w, out):
        gx = g @ w.T
        gw = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, w.shape[1])
        return gx, gw

    return _apply("matmul", fwd, vjp, a, b)


def einsum(subscripts: str, a, b) -> Tensor:
    """Two-operand einsum with explicit (ellipsis-free) subscripts."""
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    if "." in subscripts:
        raise ValueError("einsum op needs explicit subscripts")

    def fwd(x, y):
        if len(sa) != x.ndim or len(sb) != y.ndim:
            raise ShapeError(f"einsum {subscripts!r} got shapes {x.shape}, {y.shape}")
        return np.einsum(subscripts, x, y)

    def grad_for(target, target_shape, other_sub, other, g):
        keep = "".join(c for c in target if c in out_sub or c in other_sub)
        part = np.einsum(f"{out_sub},{other_sub}->{keep}", g, other)
        if keep == target:
            return part
        # indices summed only inside the target operand broadcast back
        expand = tuple(i for i, c in enumerate(target) if c not in keep)
        part = np.expand_dims(part, expand)
        return np.broadcast_to(part, target_shape).copy()

    def vjp(g, x, y, out):
        return grad_for(sa, x.shape, sb, y, g), grad_for(sb, y.shape, sa, x, g)

    return _apply("einsum", fwd, vjp, a, b)


# -- probability ---------------------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    def fwd(x):
        if not np.all(np.isfinite(x)):
            raise NumericalError("softmax received non-finite logits")
        z = np.exp(x - np.max(x, axis=axis, keepdims=True))
        return z / np.sum(z, axis=axis, keepdims=True)

    def vjp(g, x, out):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _apply("softmax", fwd, vjp, a)


def normalize_or_uniform(a, eps: float = 1e-12) -> tuple[Tensor, np.ndarray]:
    """Normalize the last axis to sum 1; rows with mass <= eps become uniform.

    Returns the normalized tensor and a boolean array flagging fallback rows.
    """

    def fwd(x):
        total = np.sum(x, axis=-1, keepdims=True)
        dead = total <= eps
        safe = np.where(dead, 1.0, total)
        return np.where(dead, 1.0 / x.shape[-1], x / safe)

    def vjp(g, x, out):
        total = np.sum(x, axis=-1, keepdims=True)
        dead = total <= eps
        safe = np.where(dead, 1.0, total)
        gx = (g - np.sum(g * out, axis=-1, keepdims=True)) / safe
        return (np.where(dead, 0.0, gx),)

    t = as_tensor(a)
    dead = np.sum(t.data, axis=-1) <= eps
    return _apply("normalize", fwd, vjp, t), dead


# -- differentiation -----------------------------------------------------------

def backward(loss: Tensor, tape: Tape | None = None) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` w.r.t. every parameter watched on the tape.

    Watched parameters with no path to the loss get a zero gradient.
    """
    tape = tape or loss.tape
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        raise ValueError("loss was not computed on a tape")
    grads: dict[int, np.ndarray] = {}
    if loss.tracked:
        grads[loss.node] = np.ones_like(loss.data)
    for rec in reversed(tape.records):
        g = grads.pop(rec.output, None)
        if g is None:
            continue
        args = [tape.values[i] if isinstance(i, int) else i for i in rec.inputs]
        in_grads = rec.vjp(g, *args, tape.values[rec.output])
        for src, gi in zip(rec.inputs, in_grads):
            if not isinstance(src, int):
                continue
            if src in grads:
                grads[src] = grads[src] + gi
            else:
                grads[src] = gi
    out = {}
    for node, name in tape.leaves.items():
        g = grads.get(node)
        out[name] = np.zeros_like(tape.values[node]) if g is None else np.asarray(g).reshape(tape.values[node].shape)
    return out


# -- recurrent cell ------------------------------------------------------------

def gru_step(x, h, w_in, w_hid, b_in, b_hid) -> Tensor:
    """One GRU update.

    ``w_in`` is (input, 3H) and ``w_hid`` is (H, 3H), gate blocks ordered
    reset, update, candidate::

        r = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
        z = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
        n = tanh(x W_in + b_in + r * (h W_hn + b_hn))
        h' = (1 - z) * n + z * h
    """
    x, h = as_tensor(x), as_tensor(h)
    w_in, w_hid = as_tensor(w_in), as_tensor(w_hid)
    hidden = h.shape[-1]
    if w_hid.shape != (hidden, 3 * hidden):
        raise ShapeError(f"state size {hidden} does not match recurrent block {w_hid.shape}")
    if w_in.shape != (x.shape[-1], 3 * hidden):
        raise ShapeError(f"input size {x.shape[-1]} / state {hidden} do not match input block {w_in.shape}")
    gi = matmul(x, w_in) + b_in
    gh = matmul(h, w_hid) + b_hid
    H = hidden
    r = sigmoid(index(gi, (..., slice(0, H))) + index(gh, (..., slice(0, H))))
    z = sigmoid(index(gi, (..., slice(H, 2 * H))) + index(gh, (..., slice(H, 2 * H))))
    n = tanh(index(gi, (..., slice(2 * H, 3 * H))) + r * index(gh, (..., slice(2 * H, 3 * H))))
    return n + z * (h - n)


# -- optimizer -----------------------------------------------------------------

@dataclass(frozen=True)
class AdamState:
    step: int = 0
    m: Mapping[str, np.ndarray] = field(default_factory=dict)
    v: Mapping[str, np.ndarray] = field(default_factory=dict)


def adam_update(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam step; returns new arrays and new state.

    Parameters without a gradient entry are copied through untouched.
    """
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    unknown = set(grads) - set(params)
    if unknown:
        raise KeyError(f"gradients for unknown parameters: {sorted(unknown)}")
    t = state.step + 1
    m, v = dict(state.m), dict(state.v)
    new = dict(params)
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name in sorted(grads):
        g = grads[name]
        m_prev = m.get(name)
        v_prev = v.get(name)
        m[name] = (1 - beta1) * g if m_prev is None else beta1 * m_prev + (1 - beta1) * g
        v[name] = (1 - beta2) * g * g if v_prev is None else beta2 * v_prev + (1 - beta2) * g * g
        new[name] = params[name] - lr * (m[name] / c1) / (np.sqrt(v[name] / c2) + eps)
    return new, AdamState(t, m, v)


def numerical_gradient(fn: Callable[[Mapping[str, np.ndarray]], float],
                       arrays: Mapping[str, np.ndarray], step: float = 1e-5) -> dict[str, np.ndarray]:
    """Central finite differences of scalar ``fn`` w.r.t. every entry of ``arrays``."""
    base = {k: np.array(v, dtype=DTYPE) for k, v in arrays.items()}
    out = {}
    for name, arr in base.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = fn(base)
            flat[i] = orig - step
            down = fn(base)
            flat[i] = orig
            g.reshape(-1)[i] = (up - down) / (2 * step)
        out[name] = g
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b|| / max(||a||, ||b||)``; 0 when both vanish."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)
