"""Reverse-mode differentiation over dense float64 matrices.

Every value is a 2-D array. Column vectors are the convention for features:
a batch of ``B`` feature vectors of width ``d`` is a ``d x B`` matrix, and a
"set" of vectors is laid out as columns, so ``sum_set`` reduces across
columns.

Nodes are only recorded on the tape when at least one input requires a
gradient; evaluating with constant parameters therefore costs no bookkeeping.
"""
from __future__ import annotations

import itertools
import math
from typing import Callable, Sequence

import numpy as np

_counter = itertools.count()


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError, ValueError):
    """Operand shapes are incompatible with the requested primitive."""


class UnsupportedOpError(AutodiffError, KeyError):
    """The requested primitive kind is not registered."""


class TapeNode:
    __slots__ = ("value", "_grad", "op", "parents", "requires_grad", "_backward", "order")

    def __init__(
        self,
        value,
        requires_grad: bool = False,
        op: str = "leaf",
        parents: tuple = (),
        backward: Callable | None = None,
    ):
        value = np.asarray(value, dtype=np.float64)
        if value.ndim != 2:
            raise ShapeError(f"TapeNode values are matrices, got ndim={value.ndim}")
        self.value = value
        self._grad = None
        self.op = op
        self.parents = parents
        self.requires_grad = requires_grad
        self._backward = backward
        self.order = next(_counter)

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g) -> None:
        self._grad = None if g is None else np.asarray(g, dtype=np.float64)

    def zero_grad(self) -> None:
        self._grad = None

    def __repr__(self) -> str:
        return f"TapeNode(op={self.op}, shape={self.value.shape}, requires_grad={self.requires_grad})"

    # operator sugar, used sparingly by the network code
    def __add__(self, other: "TapeNode") -> "TapeNode":
        return add(self, other)

    def __sub__(self, other: "TapeNode") -> "TapeNode":
        return subtract(self, other)

    def __mul__(self, other: "TapeNode") -> "TapeNode":
        return multiply(self, other)

    def __matmul__(self, other: "TapeNode") -> "TapeNode":
        return matmul(self, other)

    @property
    def T(self) -> "TapeNode":
        return transpose(self)


def const(value) -> TapeNode:
    return TapeNode(np.asarray(value, dtype=np.float64))


def param(value) -> TapeNode:
    return TapeNode(np.array(value, dtype=np.float64), requires_grad=True)


def _node(value, op, parents, backward) -> TapeNode:
    if any(p.requires_grad for p in parents):
        return TapeNode(value, requires_grad=True, op=op, parents=tuple(parents), backward=backward)
    return TapeNode(value, op=op)


def _same_shape(op: str, a: TapeNode, b: TapeNode) -> None:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"{op}: shapes {a.value.shape} and {b.value.shape} differ")


# ---------------------------------------------------------------- primitives

def matmul(a: TapeNode, b: TapeNode) -> TapeNode:
    av, bv = a.value, b.value
    if av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: {av.shape} @ {bv.shape}")

    def back(g):
        return (g @ bv.T if a.requires_grad else None, av.T @ g if b.requires_grad else None)

    return _node(av @ bv, "matmul", (a, b), back)


def add(a: TapeNode, b: TapeNode) -> TapeNode:
    _same_shape("add", a, b)
    return _node(a.value + b.value, "add", (a, b), lambda g: (g, g))


def subtract(a: TapeNode, b: TapeNode) -> TapeNode:
    _same_shape("subtract", a, b)
    return _node(a.value - b.value, "subtract", (a, b), lambda g: (g, -g))


def multiply(a: TapeNode, b: TapeNode) -> TapeNode:
    _same_shape("multiply", a, b)
    av, bv = a.value, b.value

    def back(g):
        return (g * bv if a.requires_grad else None, g * av if b.requires_grad else None)

    return _node(av * bv, "multiply", (a, b), back)


def scale(a: TapeNode, c: float) -> TapeNode:
    c = float(c)
    return _node(a.value * c, "scale", (a,), lambda g: (g * c,))


def concat_rows(parts: Sequence[TapeNode]) -> TapeNode:
    if not parts:
        raise ShapeError("concat_rows: no inputs")
    cols = parts[0].value.shape[1]
    if any(p.value.shape[1] != cols for p in parts):
        raise ShapeError("concat_rows: column counts differ")
    bounds = np.cumsum([0] + [p.value.shape[0] for p in parts])

    def back(g):
        return tuple(g[bounds[k]:bounds[k + 1]] for k in range(len(parts)))

    return _node(np.concatenate([p.value for p in parts], axis=0), "concat_rows", tuple(parts), back)


def slice_rows(a: TapeNode, start: int, stop: int) -> TapeNode:
    rows = a.value.shape[0]
    if not 0 <= start < stop <= rows:
        raise ShapeError(f"slice_rows: [{start}:{stop}] outside {rows} rows")

    def back(g):
        out = np.zeros_like(a.value)
        out[start:stop] = g
        return (out,)

    return _node(a.value[start:stop], "slice_rows", (a,), back)


def concat_cols(parts: Sequence[TapeNode]) -> TapeNode:
    if not parts:
        raise ShapeError("concat_cols: no inputs")
    rows = parts[0].value.shape[0]
    if any(p.value.shape[0] != rows for p in parts):
        raise ShapeError("concat_cols: row counts differ")
    bounds = np.cumsum([0] + [p.value.shape[1] for p in parts])

    def back(g):
        return tuple(g[:, bounds[k]:bounds[k + 1]] for k in range(len(parts)))

    return _node(np.concatenate([p.value for p in parts], axis=1), "concat_cols", tuple(parts), back)


def slice_cols(a: TapeNode, start: int, stop: int) -> TapeNode:
    cols = a.value.shape[1]
    if not 0 <= start < stop <= cols:
        raise ShapeError(f"slice_cols: [{start}:{stop}] outside {cols} columns")

    def back(g):
        out = np.zeros_like(a.value)
        out[:, start:stop] = g
        return (out,)

    return _node(a.value[:, start:stop], "slice_cols", (a,), back)


def gather_cols(a: TapeNode, index) -> TapeNode:
    index = np.asarray(index, dtype=np.intp)
    if index.ndim != 1 or (index.size and (index.min() < 0 or index.max() >= a.value.shape[1])):
        raise ShapeError("gather_cols: index out of range")

    def back(g):
        out = np.zeros_like(a.value)
        np.add.at(out.T, index, g.T)
        return (out,)

    return _node(a.value[:, index], "gather_cols", (a,), back)


def reshape(a: TapeNode, rows: int, cols: int) -> TapeNode:
    if rows * cols != a.value.size:
        raise ShapeError(f"reshape: {a.value.shape} -> ({rows}, {cols})")
    shape = a.value.shape
    return _node(a.value.reshape(rows, cols), "reshape", (a,), lambda g: (g.reshape(shape),))


def transpose(a: TapeNode) -> TapeNode:
    return _node(a.value.T, "transpose", (a,), lambda g: (g.T,))


def relu(a: TapeNode) -> TapeNode:
    x = a.value
    return _node(np.maximum(x, 0.0), "relu", (a,), lambda g: (g * (x > 0),))


def elu(a: TapeNode) -> TapeNode:
    """ELU with alpha = 1."""
    x = a.value
    pos = x > 0
    neg = np.expm1(np.minimum(x, 0.0))
    out = np.where(pos, x, neg)
    return _node(out, "elu", (a,), lambda g: (g * np.where(pos, 1.0, neg + 1.0),))


def sigmoid(a: TapeNode) -> TapeNode:
    # tanh form never overflows
    s = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _node(s, "sigmoid", (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: TapeNode) -> TapeNode:
    t = np.tanh(a.value)
    return _node(t, "tanh", (a,), lambda g: (g * (1.0 - t * t),))


def abs_(a: TapeNode) -> TapeNode:
    # subgradient at 0 is 0
    x = a.value
    return _node(np.abs(x), "abs", (a,), lambda g: (g * np.sign(x),))


def square(a: TapeNode) -> TapeNode:
    x = a.value
    return _node(x * x, "square", (a,), lambda g: (2.0 * g * x,))


def sum_all(a: TapeNode) -> TapeNode:
    shape = a.value.shape
    return _node(np.array([[a.value.sum()]]), "sum_all", (a,), lambda g: (np.full(shape, g[0, 0]),))


def sum_set(a: TapeNode) -> TapeNode:
    """Sum the columns (set elements) of ``a`` into one column."""
    shape = a.value.shape
    return _node(a.value.sum(axis=1, keepdims=True), "sum_set", (a,),
                 lambda g: (np.broadcast_to(g, shape),))


def mean_set(a: TapeNode) -> TapeNode:
    shape = a.value.shape
    n = shape[1]
    if n == 0:
        raise ShapeError("mean_set: empty set")
    return _node(a.value.mean(axis=1, keepdims=True), "mean_set", (a,),
                 lambda g: (np.broadcast_to(g / n, shape),))


def affine(x: TapeNode, w: TapeNode, b: TapeNode) -> TapeNode:
    """``w @ x`` plus the bias column ``b`` added to every column."""
    xv, wv, bv = x.value, w.value, b.value
    if wv.shape[1] != xv.shape[0] or bv.shape != (wv.shape[0], 1):
        raise ShapeError(f"affine: w{wv.shape} x{xv.shape} b{bv.shape}")

    def back(g):
        return (
            wv.T @ g if x.requires_grad else None,
            g @ xv.T if w.requires_grad else None,
            g.sum(axis=1, keepdims=True) if b.requires_grad else None,
        )

    return _node(wv @ xv + bv, "affine", (x, w, b), back)


def batch_matvec(w_flat: TapeNode, x: TapeNode, rows: int) -> TapeNode:
    """Column-wise matrix-vector product.

    Column ``k`` of ``w_flat`` holds a ``rows x c`` matrix in row-major order,
    which multiplies column ``k`` of ``x`` (height ``c``).
    """
    c, n = x.value.shape
    if w_flat.value.shape != (rows * c, n):
        raise ShapeError(f"batch_matvec: w{w_flat.value.shape} vs x{x.value.shape}, rows={rows}")
    w3 = w_flat.value.reshape(rows, c, n)
    xv = x.value

    def back(g):
        gw = (g[:, None, :] * xv[None, :, :]).reshape(rows * c, n) if w_flat.requires_grad else None
        gx = np.einsum("rcn,rn->cn", w3, g) if x.requires_grad else None
        return gw, gx

    return _node(np.einsum("rcn,cn->rn", w3, xv), "batch_matvec", (w_flat, x), back)


PRIMITIVES: dict[str, Callable[..., TapeNode]] = {
    "matmul": matmul,
    "add": add,
    "subtract": subtract,
    "multiply": multiply,
    "scale": scale,
    "concat_rows": lambda *parts: concat_rows(parts),
    "slice_rows": slice_rows,
    "concat_cols": lambda *parts: concat_cols(parts),
    "slice_cols": slice_cols,
    "gather_cols": gather_cols,
    "reshape": reshape,
    "transpose": transpose,
    "relu": relu,
    "elu": elu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "abs": abs_,
    "square": square,
    "sum_all": sum_all,
    "sum_set": sum_set,
    "mean_set": mean_set,
    "affine": affine,
    "batch_matvec": batch_matvec,
}


def apply_primitive(kind: str, inputs: Sequence[TapeNode], **attrs) -> TapeNode:
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise UnsupportedOpError(kind) from None
    return fn(*inputs, **attrs)


# ------------------------------------------------------------------ backward

def _reachable(root: TapeNode) -> list[TapeNode]:
    seen = {id(root)}
    stack = [root]
    out = []
    while stack:
        node = stack.pop()
        out.append(node)
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                stack.append(p)
    out.sort(key=lambda n: n.order, reverse=True)
    return out


def backward(loss: TapeNode) -> None:
    """Accumulate d(loss)/d(node) into every reachable node that requires grad."""
    if loss.value.shape != (1, 1):
        raise ShapeError(f"backward needs a 1x1 loss, got {loss.value.shape}")
    if not loss.requires_grad:
        return
    seed = np.ones((1, 1))
    loss._grad = seed if loss._grad is None else loss._grad + seed
    for node in _reachable(loss):
        if node._backward is None or node._grad is None:
            continue
        grads = node._backward(node._grad)
        for p, g in zip(node.parents, grads):
            if g is None or not p.requires_grad:
                continue
            # never accumulate in place: arrays may be shared between branches
            p._grad = g if p._grad is None else p._grad + g


# ----------------------------------------------------------------- parameters

class ParamStore:
    """Online parameters, their target copies and Adam state."""

    def __init__(self):
        self.online: dict[str, TapeNode] = {}
        self.target: dict[str, np.ndarray] = {}
        self.adam_m: dict[str, np.ndarray] = {}
        self.adam_v: dict[str, np.ndarray] = {}
        self.step = 0

    def __contains__(self, name: str) -> bool:
        return name in self.online

    def __len__(self) -> int:
        return len(self.online)

    def names(self) -> list[str]:
        return list(self.online)

    def add(self, name: str, value: np.ndarray) -> TapeNode:
        if name in self.online:
            raise KeyError(f"parameter {name!r} already registered")
        value = np.array(value, dtype=np.float64)
        if value.ndim != 2:
            raise ShapeError(f"{name}: parameters are matrices")
        self.online[name] = param(value)
        self.target[name] = value.copy()
        self.adam_m[name] = np.zeros_like(value)
        self.adam_v[name] = np.zeros_like(value)
        return self.online[name]

    def add_weight(self, name: str, rows: int, cols: int, rng: np.random.Generator) -> TapeNode:
        bound = 1.0 / math.sqrt(cols)
        return self.add(name, rng.uniform(-bound, bound, size=(rows, cols)))

    def add_bias(self, name: str, rows: int) -> TapeNode:
        return self.add(name, np.zeros((rows, 1)))

    def values(self) -> dict[str, np.ndarray]:
        return {k: n.value for k, n in self.online.items()}

    def frozen(self, which: str = "online") -> dict[str, TapeNode]:
        """Constant views of a parameter set, for forward passes without a tape."""
        if which == "online":
            return {k: TapeNode(n.value) for k, n in self.online.items()}
        if which == "target":
            return {k: TapeNode(v) for k, v in self.target.items()}
        raise ValueError(f"unknown parameter set {which!r}")

    def zero_grad(self) -> None:
        for node in self.online.values():
            node.zero_grad()

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(n._grad ** 2)) for n in self.online.values() if n._grad is not None))

    def clip_grad_norm(self, max_norm: float) -> float:
        norm = self.grad_norm()
        if norm > max_norm > 0:
            factor = max_norm / (norm + 1e-12)
            for n in self.online.values():
                if n._grad is not None:
                    n._grad = n._grad * factor
        return norm

    def sync_target(self) -> None:
        for k, n in self.online.items():
            self.target[k] = n.value.copy()

    def save(self, path, metadata: dict[str, str] | None = None) -> None:
        arrays = {}
        for k, n in self.online.items():
            arrays[f"online/{k}"] = n.value
            arrays[f"target/{k}"] = self.target[k]
            arrays[f"adam_m/{k}"] = self.adam_m[k]
            arrays[f"adam_v/{k}"] = self.adam_v[k]
        arrays["meta/step"] = np.array([self.step], dtype=np.int64)
        for k, v in (metadata or {}).items():
            arrays[f"meta/{k}"] = np.array(v)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> tuple["ParamStore", dict[str, str]]:
        store = cls()
        meta = {}
        with np.load(path, allow_pickle=False) as data:
            keys = list(data.keys())
            for key in keys:
                if key.startswith("online/"):
                    name = key[len("online/"):]
                    store.add(name, data[key])
            for name in store.online:
                store.target[name] = data[f"target/{name}"].copy()
                store.adam_m[name] = data[f"adam_m/{name}"].copy()
                store.adam_v[name] = data[f"adam_v/{name}"].copy()
            store.step = int(data["meta/step"][0])
            for key in keys:
                if key.startswith("meta/") and key != "meta/step":
                    meta[key[len("meta/"):]] = str(data[key])
        return store, meta


def adam_step(store: ParamStore, lr: float = 5e-4, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update of every online parameter, then zero grads."""
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, node in store.online.items():
        g = node._grad
        m = store.adam_m[name] * beta1
        v = store.adam_v[name] * beta2
        if g is not None:
            m += (1.0 - beta1) * g
            v += (1.0 - beta2) * g * g
        store.adam_m[name] = m
        store.adam_v[name] = v
        if g is None and not m.any():
            continue
        node.value = node.value - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    store.zero_grad()


def sync_target(store: ParamStore) -> None:
    store.sync_target()


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of ``f`` with respect to the array ``x`` (mutated in place)."""
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = out.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        fp = f()
        flat[k] = orig - h
        fm = f()
        flat[k] = orig
        gflat[k] = (fp - fm) / (2 * h)
    return out


def linear(x: TapeNode, p: dict[str, TapeNode], name: str) -> TapeNode:
    return affine(x, p[f"{name}.w"], p[f"{name}.b"])


def ones(rows: int, cols: int) -> TapeNode:
    return TapeNode(np.ones((rows, cols)))


def broadcast_rows(row: TapeNode, rows: int) -> TapeNode:
    """Repeat a 1 x n row ``rows`` times via an explicit outer product."""
    return matmul(ones(rows, 1), row)
