"""Array-level reverse-mode tape with forward-mode spatial tangents.

Every operation on a :class:`Var` appends a node to its :class:`Tape`. A
:class:`Dual` pairs a value with its three spatial partials (stacked on a
leading axis of length 3); because both halves are ordinary tape nodes,
reverse-mode differentiation of anything built from the spatial gradient
yields mixed second derivatives d2f/dtheta dx.

The functional helpers (``sin``, ``softplus``, ``linear``, ...) dispatch on
their argument: plain numpy arrays run untaped, ``Var`` records on the tape,
and ``Dual`` propagates tangents through whichever of the two it wraps. The
same network code therefore serves inference, forward-mode gradients and
training.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class InvalidNodeError(ValueError):
    pass


class NumericError(FloatingPointError):
    def __init__(self, message: str, node: int):
        super().__init__(f"{message} (node {node})")
        self.node = node


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tape:
    """Append-only record of operations in topological order."""

    def __init__(self):
        self._values: list[np.ndarray] = []
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list[Callable | None] = []
        self._kinds: list[str] = []

    def __len__(self) -> int:
        return len(self._values)

    def record(self, kind: str, value, parents: Sequence["Var"] = (), vjp=None) -> "Var":
        ids = tuple(p.node for p in parents)
        node = len(self._values)
        assert all(i < node for i in ids)
        self._values.append(np.asarray(value, dtype=float))
        self._parents.append(ids)
        self._vjps.append(vjp)
        self._kinds.append(kind)
        return Var(self, node)

    def leaf(self, value, kind: str = "leaf") -> "Var":
        return self.record(kind, value)

    def mark(self) -> int:
        return len(self._values)

    def truncate(self, mark: int) -> None:
        del self._values[mark:]
        del self._parents[mark:]
        del self._vjps[mark:]
        del self._kinds[mark:]

    def kind(self, node: int) -> str:
        return self._kinds[node]

    def gradients(self, loss: "Var", wrt: Sequence["Var"]) -> list[np.ndarray]:
        """d loss / d v for each v in ``wrt`` (zeros where unreachable)."""
        if loss.tape is not self or not 0 <= loss.node < len(self._values):
            raise InvalidNodeError(f"node {loss.node} is not on this tape")
        if self._values[loss.node].size != 1:
            raise InvalidNodeError(f"node {loss.node} is not a scalar")
        grads: list[np.ndarray | None] = [None] * (loss.node + 1)
        grads[loss.node] = np.ones_like(self._values[loss.node])
        for node in range(loss.node, -1, -1):
            g = grads[node]
            if g is None or self._vjps[node] is None:
                continue
            # non-finite partials are reported below rather than warned about
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                parent_grads = self._vjps[node](g)
            for pid, pg in zip(self._parents[node], parent_grads):
                if pg is None:
                    continue
                if not np.all(np.isfinite(pg)):
                    raise NumericError(f"non-finite partial from {self._kinds[node]!r}", node)
                grads[pid] = pg if grads[pid] is None else grads[pid] + pg
        out = []
        for v in wrt:
            g = grads[v.node] if v.node < len(grads) else None
            out.append(np.zeros_like(self._values[v.node]) if g is None else g)
        return out


class Var:
    __slots__ = ("tape", "node")
    __array_priority__ = 100

    def __init__(self, tape: Tape, node: int):
        self.tape = tape
        self.node = node

    @property
    def value(self) -> np.ndarray:
        return self.tape._values[self.node]

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Var(node={self.node}, shape={self.shape})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        if p == 2:
            return mul(self, self)
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis, keepdims)


def value_of(x):
    if isinstance(x, Var):
        return x.value
    if isinstance(x, Dual):
        return Dual(value_of(x.val), value_of(x.tan))
    return x


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


@dataclass
class Dual:
    """Value plus its three spatial partials (``tan`` has a leading axis of 3)."""

    val: object
    tan: object

    @property
    def shape(self):
        return np.shape(value_of(self.val))

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        if not isinstance(idx, tuple):
            idx = (idx,)
        return Dual(getitem(self.val, idx), getitem(self.tan, (slice(None),) + idx))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return Dual(reshape(self.val, shape), reshape(self.tan, (3,) + tuple(shape)))

    def gradient(self):
        """Spatial gradient with the component axis moved last."""
        return moveaxis(self.tan, 0, -1)


# ---------------------------------------------------------------- binary ops


def _binary(kind, a, b, f, vjp_a, vjp_b):
    tape = _tape_of(a, b)
    if tape is None:
        return f(a, b)
    av, bv = value_of(a), value_of(b)
    out = f(av, bv)
    parents, fns = [], []
    if isinstance(a, Var):
        parents.append(a)
        fns.append(lambda g: _unbroadcast(vjp_a(g, av, bv, out), np.shape(av)))
    if isinstance(b, Var):
        parents.append(b)
        fns.append(lambda g: _unbroadcast(vjp_b(g, av, bv, out), np.shape(bv)))
    return tape.record(kind, out, parents, lambda g: [fn(g) for fn in fns])


def add(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        a, b = _dualize(a), _dualize(b)
        return Dual(add(a.val, b.val), _add_tan(a.tan, b.tan))
    return _binary("add", a, b, np.add, lambda g, a, b, o: g, lambda g, a, b, o: g)


def sub(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        a, b = _dualize(a), _dualize(b)
        return Dual(sub(a.val, b.val), _add_tan(a.tan, None if b.tan is None else mul(b.tan, -1.0)))
    return _binary("sub", a, b, np.subtract, lambda g, a, b, o: g, lambda g, a, b, o: -g)


def mul(a, b):
    if isinstance(a, Dual) and isinstance(b, Dual):
        ta = None if a.tan is None else mul(a.tan, b.val)
        tb = None if b.tan is None else mul(a.val, b.tan)
        return Dual(mul(a.val, b.val), _add_tan(ta, tb))
    if isinstance(a, Dual):
        return Dual(mul(a.val, b), mul(a.tan, b))
    if isinstance(b, Dual):
        return Dual(mul(a, b.val), mul(a, b.tan))
    return _binary("mul", a, b, np.multiply, lambda g, a, b, o: g * b, lambda g, a, b, o: g * a)


def div(a, b):
    if isinstance(b, Dual):
        inv = reciprocal(b)
        return mul(a, inv)
    if isinstance(a, Dual):
        return Dual(div(a.val, b), div(a.tan, b))
    return _binary("div", a, b, np.divide, lambda g, a, b, o: g / b, lambda g, a, b, o: -g * o / b)


def reciprocal(x):
    if isinstance(x, Dual):
        r = reciprocal(x.val)
        return Dual(r, mul(x.tan, mul(mul(r, r), -1.0)))
    return _unary("reciprocal", x, lambda v: 1.0 / v, lambda g, v, o: -g * o * o)


def maximum(a, c: float):
    """Elementwise max against a constant; gradient passes where a >= c."""
    return _unary("maximum", a, lambda v: np.maximum(v, c), lambda g, v, o: g * (v >= c))


def _dualize(x) -> Dual:
    return x if isinstance(x, Dual) else Dual(x, None)


def _add_tan(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return add(a, b)


# ----------------------------------------------------------------- unary ops


def _unary(kind, x, f, vjp):
    if not isinstance(x, Var):
        return f(x)
    v = x.value
    out = f(v)
    return x.tape.record(kind, out, [x], lambda g: [vjp(g, v, out)])


def _softplus_np(v, beta):
    bv = beta * v
    return (np.maximum(bv, 0.0) + np.log1p(np.exp(-np.abs(bv)))) / beta


def _sigmoid_np(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sin(x):
    if isinstance(x, Dual):
        return Dual(sin(x.val), mul(cos(x.val), x.tan))
    return _unary("sin", x, np.sin, lambda g, v, o: g * np.cos(v))


def cos(x):
    if isinstance(x, Dual):
        return Dual(cos(x.val), mul(mul(sin(x.val), -1.0), x.tan))
    return _unary("cos", x, np.cos, lambda g, v, o: -g * np.sin(v))


def exp(x):
    if isinstance(x, Dual):
        e = exp(x.val)
        return Dual(e, mul(e, x.tan))
    return _unary("exp", x, np.exp, lambda g, v, o: g * o)


def log(x):
    if isinstance(x, Dual):
        return Dual(log(x.val), div(x.tan, x.val))
    return _unary("log", x, np.log, lambda g, v, o: g / v)


def sqrt(x):
    if isinstance(x, Dual):
        r = sqrt(x.val)
        return Dual(r, div(x.tan, mul(r, 2.0)))
    return _unary("sqrt", x, np.sqrt, lambda g, v, o: 0.5 * g / o)


def power(x, p: float):
    if isinstance(x, Dual):
        return Dual(power(x.val, p), mul(mul(power(x.val, p - 1), float(p)), x.tan))
    return _unary("power", x, lambda v: v**p, lambda g, v, o: g * p * v ** (p - 1))


def absolute(x):
    if isinstance(x, Dual):
        return Dual(absolute(x.val), mul(np.sign(value_of(x.val)), x.tan))
    return _unary("abs", x, np.abs, lambda g, v, o: g * np.sign(v))


def sigmoid(x, scale: float = 1.0):
    """1 / (1 + exp(-scale * x))."""
    if isinstance(x, Dual):
        s = sigmoid(x.val, scale)
        return Dual(s, mul(mul(mul(s, sub(1.0, s)), scale), x.tan))
    return _unary(
        "sigmoid", x, lambda v: _sigmoid_np(scale * v), lambda g, v, o: g * scale * o * (1.0 - o)
    )


def _softplus_parts(v, beta):
    """softplus_beta(v) and its derivative sigmoid(beta v), sharing one exp."""
    bv = beta * v
    e = np.exp(-np.abs(bv))
    sp = (np.maximum(bv, 0.0) + np.log1p(e)) / beta
    r = 1.0 / (1.0 + e)
    sig = np.where(bv >= 0, r, e * r)
    return sp, sig


def softplus(x, beta: float = 1.0):
    if isinstance(x, Dual):
        v = x.val
        if not isinstance(v, Var):
            sp, sig = _softplus_parts(v, beta)
            return Dual(sp, mul(sig, x.tan))
        sp, sig = _softplus_parts(v.value, beta)
        tape = v.tape
        sp_node = tape.record("softplus", sp, [v], lambda g: [g * sig])
        sig_node = tape.record("sigmoid", sig, [v], lambda g: [g * beta * sig * (1.0 - sig)])
        return Dual(sp_node, mul(sig_node, x.tan))
    if not isinstance(x, Var):
        return _softplus_np(x, beta)
    sp, sig = _softplus_parts(x.value, beta)
    return x.tape.record("softplus", sp, [x], lambda g: [g * sig])


def relu(x):
    if isinstance(x, Dual):
        return Dual(relu(x.val), mul(value_of(x.val) > 0, x.tan))
    return _unary("relu", x, lambda v: np.maximum(v, 0.0), lambda g, v, o: g * (v > 0))


def clip(x, lo: float, hi: float):
    return _unary(
        "clip", x, lambda v: np.clip(v, lo, hi), lambda g, v, o: g * ((v >= lo) & (v <= hi))
    )


# ------------------------------------------------------------ structural ops


def matmul(a, w):
    """``a @ w`` with ``w`` two-dimensional; ``a`` may carry leading axes."""
    if isinstance(a, Dual):
        return Dual(matmul(a.val, w), None if a.tan is None else matmul(a.tan, w))
    tape = _tape_of(a, w)
    if tape is None:
        return a @ w
    av, wv = value_of(a), value_of(w)
    out = av @ wv
    parents, fns = [], []
    if isinstance(a, Var):
        parents.append(a)
        fns.append(lambda g: g @ wv.T)
    if isinstance(w, Var):
        parents.append(w)
        k = wv.shape[0]
        fns.append(lambda g: av.reshape(-1, k).T @ g.reshape(-1, wv.shape[1]))
    return tape.record("matmul", out, parents, lambda g: [fn(g) for fn in fns])


def linear(x, w, b=None):
    y = matmul(x, w)
    return y if b is None else add(y, b)


def vsum(x, axis=None, keepdims=False):
    if isinstance(x, Dual):
        if axis is None:
            raise ValueError("Dual sums need an explicit negative axis")
        return Dual(vsum(x.val, axis, keepdims), vsum(x.tan, axis, keepdims))
    if not isinstance(x, Var):
        return np.sum(x, axis=axis, keepdims=keepdims)
    v = x.value

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return [np.broadcast_to(g, v.shape).copy()]

    return x.tape.record("sum", np.sum(v, axis=axis, keepdims=keepdims), [x], vjp)


def mean(x, axis=None):
    n = np.size(value_of(x)) if axis is None else np.shape(value_of(x))[axis]
    return mul(vsum(x, axis), 1.0 / n)


def reshape(x, shape):
    if not isinstance(x, Var):
        return np.reshape(x, shape)
    src = x.value.shape
    return x.tape.record("reshape", x.value.reshape(shape), [x], lambda g: [g.reshape(src)])


def moveaxis(x, src: int, dst: int):
    if not isinstance(x, Var):
        return np.moveaxis(x, src, dst)
    return x.tape.record(
        "moveaxis", np.moveaxis(x.value, src, dst), [x], lambda g: [np.moveaxis(g, dst, src)]
    )


def getitem(x, idx):
    if isinstance(x, Dual):
        return x[idx]
    if not isinstance(x, Var):
        return x[idx]
    v = x.value
    out = v[idx]

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(p is None or p is Ellipsis or isinstance(p, (slice, int)) for p in parts)

    def vjp(g):
        full = np.zeros_like(v)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return [full]

    return x.tape.record("getitem", out, [x], vjp)


def concat(xs: Sequence, axis: int = -1):
    if axis >= 0:
        raise ValueError("concat uses negative axes so Dual tangents line up")
    if any(isinstance(x, Dual) for x in xs):
        ds = [_dualize(x) for x in xs]
        vals = [d.val for d in ds]
        tans = []
        for d in ds:
            if d.tan is None:
                shape = (3,) + np.shape(value_of(d.val))
                tans.append(np.zeros(shape))
            else:
                tans.append(d.tan)
        return Dual(concat(vals, axis), concat(tans, axis))
    tape = _tape_of(*xs)
    vals = [value_of(x) for x in xs]
    if tape is None:
        return np.concatenate(vals, axis=axis)
    out = np.concatenate(vals, axis=axis)
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]
    parents = [x for x in xs if isinstance(x, Var)]
    is_var = [isinstance(x, Var) for x in xs]

    def vjp(g):
        parts = np.split(g, splits, axis=axis)
        return [p for p, keep in zip(parts, is_var) if keep]

    return tape.record("concat", out, parents, vjp)


def where(cond: np.ndarray, a, b):
    """Select ``a`` where ``cond`` else ``b``; ``cond`` is a constant mask."""
    tape = _tape_of(a, b)
    if tape is None:
        return np.where(cond, a, b)
    av, bv = value_of(a), value_of(b)
    out = np.where(cond, av, bv)
    parents, fns = [], []
    if isinstance(a, Var):
        parents.append(a)
        fns.append(lambda g: _unbroadcast(np.where(cond, g, 0.0), np.shape(av)))
    if isinstance(b, Var):
        parents.append(b)
        fns.append(lambda g: _unbroadcast(np.where(cond, 0.0, g), np.shape(bv)))
    return tape.record("where", out, parents, lambda g: [fn(g) for fn in fns])


def exclusive_cumprod(x):
    """T_i = prod_{j<i} x_j along the last axis (T_0 = 1).

    The backward pass uses a reverse recurrence instead of dividing by x_j,
    so it stays exact when some factor is zero.
    """
    v = value_of(x)
    out = np.ones_like(v)
    out[..., 1:] = np.cumprod(v[..., :-1], axis=-1)
    if not isinstance(x, Var):
        return out

    def vjp(g):
        n = v.shape[-1]
        # acc_j = sum_{i>j} g_i prod_{j<k<i} x_k
        acc = np.zeros_like(v)
        run = np.zeros(v.shape[:-1])
        for j in range(n - 2, -1, -1):
            run = g[..., j + 1] + v[..., j + 1] * run
            acc[..., j] = run
        return [acc * out]

    return x.tape.record("excl_cumprod", out, [x], vjp)


# ------------------------------------------------------------------ params


@dataclass
class ParameterStore:
    """Flat parameter vector with a named layout of (name, offset, shape)."""

    values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    layout: list[tuple[str, int, tuple]] = field(default_factory=list)

    def add(self, name: str, value) -> None:
        value = np.asarray(value, dtype=float)
        if any(n == name for n, _, _ in self.layout):
            raise KeyError(f"duplicate parameter {name!r}")
        offset = self.values.size
        self.layout.append((name, offset, value.shape))
        self.values = np.concatenate([self.values, value.ravel()])

    def __len__(self) -> int:
        return self.values.size

    def names(self) -> list[str]:
        return [n for n, _, _ in self.layout]

    def slice_of(self, name: str) -> slice:
        for n, off, shape in self.layout:
            if n == name:
                return slice(off, off + int(np.prod(shape, dtype=int)))
        raise KeyError(name)

    def view(self, name: str) -> np.ndarray:
        for n, off, shape in self.layout:
            if n == name:
                return self.values[off : off + int(np.prod(shape, dtype=int))].reshape(shape)
        raise KeyError(name)

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: self.view(n) for n in self.names()}

    def bind(self, tape: Tape) -> "BoundParameters":
        leaves = {n: tape.leaf(self.view(n).copy(), kind="param") for n in self.names()}
        return BoundParameters(self, tape, leaves)

    def check(self) -> None:
        covered = 0
        for _, off, shape in self.layout:
            if off != covered:
                raise ValueError("parameter layout is not contiguous")
            covered += int(np.prod(shape, dtype=int))
        if covered != self.values.size:
            raise ValueError("parameter layout does not cover the store")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite parameter values")

    def copy(self) -> "ParameterStore":
        return ParameterStore(self.values.copy(), list(self.layout))


@dataclass
class BoundParameters:
    store: ParameterStore
    tape: Tape
    leaves: dict[str, Var]

    def __getitem__(self, name: str) -> Var:
        return self.leaves[name]


def backward(loss: Var, params: BoundParameters) -> np.ndarray:
    """Gradient of ``loss`` aligned with ``params.store.values``."""
    names = params.store.names()
    grads = loss.tape.gradients(loss, [params.leaves[n] for n in names])
    out = np.zeros_like(params.store.values)
    for n, g in zip(names, grads):
        out[params.store.slice_of(n)] = g.ravel()
    return out


def spatial_eval(fn: Callable[[Dual], Dual], x):
    """Evaluate ``fn`` at points ``x`` (shape (..., 3)) with spatial gradients.

    Returns ``(value, grad)`` where ``grad`` has shape ``value.shape + (3,)``.
    If ``fn`` records on a tape, ``grad`` is itself a tape node.
    """
    xv = value_of(x)
    eye = np.eye(3).reshape((3,) + (1,) * (np.ndim(xv) - 1) + (3,))
    tan = np.broadcast_to(eye, (3,) + np.shape(xv))
    out = fn(Dual(x, tan))
    return out.val, out.gradient()
