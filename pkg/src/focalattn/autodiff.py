"""Small define-by-run reverse-mode differentiation over dense float64 arrays.

A :class:`Tape` records every primitive as it is executed.  ``backward`` walks
the record once in reverse, so the recording order doubles as the topological
order of the graph.  Values are plain ``numpy`` arrays held read-only; the tape
owns the gradient buffers.

Example::

    tape = Tape()
    x = tape.variable(np.array(3.0))
    loss = x * x
    grads = backward(loss)   # grads[x.id] == 6.0
"""
from __future__ import annotations

import itertools
from typing import Callable, Mapping

import numpy as np

__all__ = [
    "DimensionError",
    "DomainError",
    "Tape",
    "Variable",
    "as_tensor",
    "backward",
    "finite_diff_check",
    "set_checked",
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "power",
    "sigmoid",
    "tanh",
    "clip",
    "reshape",
    "sum",
    "mean",
    "softmax_axis",
    "broadcast_add",
    "broadcast_mul",
]

_CHECKED = True


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An operand lies outside the domain of an operation."""


def set_checked(flag: bool) -> bool:
    """Toggle finiteness/domain checks; returns the previous setting."""
    global _CHECKED
    prev, _CHECKED = _CHECKED, bool(flag)
    return prev


def as_tensor(x) -> np.ndarray:
    """Return an immutable float64 array, rejecting NaN/Inf in checked mode."""
    arr = np.array(x, dtype=np.float64)
    if _CHECKED and not np.all(np.isfinite(arr)):
        raise DomainError("tensor contains non-finite values")
    arr.setflags(write=False)
    return arr


class Variable:
    __slots__ = ("tape", "id", "value", "requires_grad", "_parents", "_rule", "__weakref__")

    def __init__(self, tape: "Tape", value: np.ndarray, requires_grad: bool,
                 parents=(), rule=None):
        self.tape = tape
        self.value = value
        self.requires_grad = requires_grad
        self._parents = parents
        self._rule = rule
        self.id = tape._register(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def grad(self) -> np.ndarray:
        return self.tape.grad(self)

    def __repr__(self) -> str:
        return f"Variable(id={self.id}, shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, k):
        return power(self, k)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Ordered record of primitive applications.

    A tape is confined to one thread.  Build a fresh one per forward pass.
    """

    def __init__(self):
        self._nodes: list[Variable] = []
        self._grads: dict[int, np.ndarray] = {}
        self._ids = itertools.count()

    def _register(self, var: Variable) -> int:
        self._nodes.append(var)
        return next(self._ids)

    def __len__(self) -> int:
        return len(self._nodes)

    def variable(self, value, requires_grad: bool = True) -> Variable:
        return Variable(self, as_tensor(value), requires_grad)

    def constant(self, value) -> Variable:
        return Variable(self, as_tensor(value), False)

    def grad(self, var: Variable) -> np.ndarray:
        g = self._grads.get(var.id)
        return np.zeros_like(var.value) if g is None else g

    def reset(self) -> None:
        self._grads.clear()


def _lift(tape: Tape, x) -> Variable:
    if isinstance(x, Variable):
        if x.tape is not tape:
            raise ValueError("operands live on different tapes")
        return x
    return tape.constant(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Variable):
            return x.tape
    raise TypeError("at least one operand must be a Variable")


def _make(tape: Tape, value: np.ndarray, parents, rule) -> Variable:
    value = np.asarray(value, dtype=np.float64)
    if _CHECKED and not np.all(np.isfinite(value)):
        raise DomainError("operation produced non-finite values")
    value.setflags(write=False)
    needs = any(p.requires_grad for p in parents)
    return Variable(tape, value, needs, parents if needs else (), rule if needs else None)


def _check_same(a: Variable, b: Variable, op: str) -> None:
    # 0-d operands act as scalars; anything else must match exactly
    if a.value.ndim == 0 or b.value.ndim == 0:
        return
    if a.shape != b.shape:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unscalar(g: np.ndarray, like: Variable) -> np.ndarray:
    if like.value.ndim == 0 and g.ndim > 0:
        return np.asarray(g.sum())
    return g


# ---------------------------------------------------------------- primitives

def matmul(a, b) -> Variable:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value
    return _make(tape, av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a: Variable) -> Variable:
    if a.value.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return _make(a.tape, a.value.T, (a,), lambda g: (g.T,))


def reshape(a: Variable, shape) -> Variable:
    old = a.shape
    return _make(a.tape, a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def add(a, b) -> Variable:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check_same(a, b, "add")
    return _make(tape, a.value + b.value, (a, b),
                 lambda g: (_unscalar(g, a), _unscalar(g, b)))


def sub(a, b) -> Variable:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check_same(a, b, "sub")
    return _make(tape, a.value - b.value, (a, b),
                 lambda g: (_unscalar(g, a), _unscalar(-g, b)))


def mul(a, b) -> Variable:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check_same(a, b, "mul")
    av, bv = a.value, b.value
    return _make(tape, av * bv, (a, b),
                 lambda g: (_unscalar(g * bv, a), _unscalar(g * av, b)))


def div(a, b) -> Variable:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    _check_same(a, b, "div")
    av, bv = a.value, b.value
    if _CHECKED and np.any(bv == 0):
        raise DomainError("div: division by zero")
    out = av / bv
    return _make(tape, out, (a, b),
                 lambda g: (_unscalar(g / bv, a), _unscalar(-g * out / bv, b)))


def neg(a: Variable) -> Variable:
    return _make(a.tape, -a.value, (a,), lambda g: (-g,))


def exp(a: Variable) -> Variable:
    out = np.exp(a.value)
    return _make(a.tape, out, (a,), lambda g: (g * out,))


def log(a: Variable) -> Variable:
    av = a.value
    if _CHECKED and np.any(av <= 0):
        raise DomainError("log: non-positive operand")
    return _make(a.tape, np.log(av), (a,), lambda g: (g / av,))


def power(a: Variable, k: float) -> Variable:
    """Elementwise ``a ** k`` for a constant real exponent."""
    av = a.value
    k = float(k)
    if _CHECKED and not k.is_integer() and np.any(av < 0):
        raise DomainError("power: negative base with fractional exponent")
    return _make(a.tape, av ** k, (a,), lambda g: (g * k * av ** (k - 1.0),))


def sigmoid(a: Variable) -> Variable:
    av = a.value
    out = np.empty_like(av)
    pos = av >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
    e = np.exp(av[~pos])
    out[~pos] = e / (1.0 + e)
    return _make(a.tape, out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Variable) -> Variable:
    out = np.tanh(a.value)
    return _make(a.tape, out, (a,), lambda g: (g * (1.0 - out * out),))


def clip(a: Variable, lo: float, hi: float) -> Variable:
    """Clamp to ``[lo, hi]``; gradient passes only where the input is inside."""
    av = a.value
    inside = (av >= lo) & (av <= hi)
    return _make(a.tape, np.clip(av, lo, hi), (a,), lambda g: (g * inside,))


def sum(a: Variable, axis: int | None = None) -> Variable:  # noqa: A001
    av = a.value
    if axis is None:
        return _make(a.tape, av.sum(), (a,), lambda g: (np.broadcast_to(g, av.shape).copy(),))
    axis = _norm_axis(axis, av.ndim)
    return _make(a.tape, av.sum(axis=axis), (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, axis), av.shape).copy(),))


def mean(a: Variable, axis: int | None = None) -> Variable:
    n = a.value.size if axis is None else a.shape[_norm_axis(axis, a.value.ndim)]
    return mul(sum(a, axis), 1.0 / n)


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def softmax_axis(x: Variable, axis: int) -> Variable:
    """Softmax along ``axis`` with max-subtraction for stability."""
    xv = x.value
    axis = _norm_axis(axis, xv.ndim)
    z = np.exp(xv - xv.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(x.tape, out, (x,), rule)


def _vector_shape(m: Variable, v: Variable, axis: int, op: str) -> tuple[int, ...]:
    if m.value.ndim != 2 or v.value.ndim != 1:
        raise DimensionError(f"{op}: expected matrix and vector, got {m.shape} and {v.shape}")
    axis = _norm_axis(axis, 2)
    if m.shape[axis] != v.shape[0]:
        raise DimensionError(
            f"{op}: vector of length {v.shape[0]} does not fit axis {axis} of {m.shape}")
    return (-1, 1) if axis == 0 else (1, -1)


def broadcast_add(m, v, axis: int) -> Variable:
    """Add vector ``v`` along matrix axis ``axis``.

    ``axis=0``: ``v[r]`` is added to every entry of row ``r``.
    ``axis=1``: ``v[k]`` is added to every entry of column ``k``.
    """
    tape = _tape_of(m, v)
    m, v = _lift(tape, m), _lift(tape, v)
    shp = _vector_shape(m, v, axis, "broadcast_add")
    red = 1 if shp == (-1, 1) else 0
    return _make(tape, m.value + v.value.reshape(shp), (m, v),
                 lambda g: (g, g.sum(axis=red)))


def broadcast_mul(m, v, axis: int) -> Variable:
    """Multiply matrix ``m`` by vector ``v`` along ``axis`` (see :func:`broadcast_add`)."""
    tape = _tape_of(m, v)
    m, v = _lift(tape, m), _lift(tape, v)
    shp = _vector_shape(m, v, axis, "broadcast_mul")
    red = 1 if shp == (-1, 1) else 0
    mv, vv = m.value, v.value.reshape(shp)
    return _make(tape, mv * vv, (m, v), lambda g: (g * vv, (g * mv).sum(axis=red)))


# ------------------------------------------------------------------ backward

def backward(loss: Variable) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(var) for every variable on the tape.

    Returns a map from variable id to gradient.  Variables that do not
    influence ``loss`` keep an all-zero gradient.
    """
    if loss.value.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    tape.reset()
    grads = tape._grads
    grads[loss.id] = np.ones_like(loss.value)
    for node in reversed(tape._nodes[: loss.id + 1]):
        g = grads.get(node.id)
        if g is None or node._rule is None:
            continue
        for parent, pg in zip(node._parents, node._rule(g)):
            if not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg
    return {n.id: tape.grad(n) for n in tape._nodes if n.requires_grad}


def finite_diff_check(
    f: Callable[[Tape, Mapping[str, Variable]], Variable],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
    return_details: bool = False,
):
    """Compare reverse-mode gradients of ``f`` with central differences.

    ``f(tape, variables)`` must build a scalar on ``tape`` from the named
    variables.  Returns the maximum over every coordinate of
    ``|analytic - numeric| / (|analytic| + |numeric| + 1e-12)``; with
    ``return_details`` also a per-parameter breakdown.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    tape = Tape()
    vars_ = {k: tape.variable(v) for k, v in base.items()}
    backward(f(tape, vars_))
    analytic = {k: tape.grad(v) for k, v in vars_.items()}

    def value(point):
        t = Tape()
        out = f(t, {k: t.variable(v, requires_grad=False) for k, v in point.items()})
        val = float(out.value)
        if not np.isfinite(val):
            raise DomainError("f evaluated to a non-finite value")
        return val

    worst = 0.0
    per_param = {}
    for name, arr in base.items():
        err = 0.0
        flat = arr.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = value(base)
            flat[j] = orig - h
            fm = value(base)
            flat[j] = orig
            num = (fp - fm) / (2.0 * h)
            ana = float(analytic[name].reshape(-1)[j])
            err = max(err, abs(ana - num) / (abs(ana) + abs(num) + 1e-12))
        per_param[name] = err
        worst = max(worst, err)
    return (worst, per_param) if return_details else worst
