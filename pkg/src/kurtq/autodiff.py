"""Tape-based reverse-mode differentiation over the tensor kernels.

Every differentiable operation appends a node to the :class:`Tape` that
produced its inputs. Nodes are appended in execution order, so the tape is
already topologically sorted and :func:`backward` just walks it in
reverse, summing gradient contributions when a value fans out.

Non-smooth points follow fixed conventions: ``relu'(0) = 0`` and
fake-quantization uses the straight-through estimator (gradient passes
where ``|t| <= 127 * scale``, zero elsewhere).
"""
from __future__ import annotations

import numpy as np

from . import quant
from . import tensor as tc
from .errors import ContractError, DimensionError


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name", "tape")

    def __init__(self, tape, value, parents=(), backward_fn=None, requires_grad=False, name=None):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Var{label} shape={self.value.shape} dtype={self.value.dtype}>"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    def __init__(self):
        self.nodes: list[Var] = []

    def var(self, value, name=None, requires_grad=True) -> Var:
        """Register a leaf (parameter or input)."""
        v = Var(self, np.asarray(value), requires_grad=requires_grad, name=name)
        self.nodes.append(v)
        return v

    def const(self, value) -> Var:
        return self.var(value, requires_grad=False)

    def record(self, value, parents, backward_fn) -> Var:
        needs = any(p.requires_grad for p in parents)
        v = Var(self, value, parents if needs else (), backward_fn if needs else None, needs)
        if needs:
            self.nodes.append(v)
        return v


def _tape(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise ContractError("operation needs at least one Var operand")


def _lift(tape, x):
    return x if isinstance(x, Var) else tape.const(np.asarray(x))


def backward(tape: Tape, loss: Var) -> dict:
    """Back-propagate from the scalar ``loss``.

    Fills ``.grad`` on every node that requires it and returns a mapping of
    named leaves to their gradients.
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    for node in tape.nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(tape.nodes):
        if node.grad is None or node.backward_fn is None:
            continue
        grads = node.backward_fn(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g
    out = {}
    for node in tape.nodes:
        if node.name is not None and node.requires_grad:
            out[node.name] = node.grad if node.grad is not None else np.zeros_like(node.value)
    return out


def _unbroadcast(g, shape):
    # bias-style broadcast only: collapse leading axes
    if g.shape == shape:
        return g
    return g.reshape(-1, shape[-1]).sum(axis=0).reshape(shape)


# -- operations --------------------------------------------------------------

def matmul(a, b) -> Var:
    tape = _tape(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    out = tc.matmul(a.value, b.value)

    def bw(g):
        return (np.matmul(g, np.swapaxes(b.value, -1, -2)),
                np.matmul(np.swapaxes(a.value, -1, -2), g))

    return tape.record(out, (a, b), bw)


def add(a, b) -> Var:
    tape = _tape(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    out = tc.elementwise("add", a.value, b.value)
    return tape.record(out, (a, b), lambda g: (g, _unbroadcast(g, b.value.shape)))


def sub(a, b) -> Var:
    tape = _tape(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    out = tc.elementwise("sub", a.value, b.value)
    return tape.record(out, (a, b), lambda g: (g, -_unbroadcast(g, b.value.shape)))


def mul(a, b) -> Var:
    tape = _tape(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    out = tc.elementwise("mul", a.value, b.value)
    return tape.record(out, (a, b),
                       lambda g: (g * b.value, _unbroadcast(g * a.value, b.value.shape)))


def scale(a: Var, c: float) -> Var:
    c = a.value.dtype.type(c)
    return a.tape.record(a.value * c, (a,), lambda g: (g * c,))


def add_const(a: Var, c: float) -> Var:
    return a.tape.record(a.value + a.value.dtype.type(c), (a,), lambda g: (g,))


def square(a: Var) -> Var:
    return a.tape.record(a.value * a.value, (a,), lambda g: (2 * g * a.value,))


def total(a: Var) -> Var:
    """Sum of all elements, as a 0-d value."""
    return a.tape.record(a.value.sum(), (a,), lambda g: (np.broadcast_to(g, a.value.shape).copy(),))


def add_n(xs) -> Var:
    xs = list(xs)
    tape = _tape(*xs)
    out = xs[0].value
    for x in xs[1:]:
        out = out + x.value
    return tape.record(out, tuple(xs), lambda g: tuple(g for _ in xs))


def mean_axis(a: Var, axis: int) -> Var:
    n = a.value.shape[axis]
    out = a.value.mean(axis=axis)

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis), a.value.shape) / a.value.dtype.type(n),)

    return a.tape.record(out, (a,), bw)


def reshape(a: Var, shape) -> Var:
    old = a.value.shape
    return a.tape.record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Var, axes) -> Var:
    inv = np.argsort(axes)
    return a.tape.record(np.ascontiguousarray(a.value.transpose(axes)), (a,),
                         lambda g: (g.transpose(inv),))


def relu(a: Var) -> Var:
    mask = a.value > 0
    return a.tape.record(tc.relu(a.value), (a,), lambda g: (g * mask,))


def softmax(a: Var) -> Var:
    """Softmax over the last axis."""
    y = tc.softmax_rows(a.value)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return a.tape.record(y, (a,), bw)


def layer_norm(x: Var, gain: Var, bias: Var, eps: float = 1e-5) -> Var:
    tape = _tape(x, gain, bias)
    x, gain, bias = _lift(tape, x), _lift(tape, gain), _lift(tape, bias)
    xv = x.value
    n = xv.shape[-1]
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + xv.dtype.type(eps))
    xhat = xc * rstd
    out = xhat * gain.value + bias.value

    def bw(g):
        gx = g * gain.value
        dx = rstd * (gx - gx.mean(axis=-1, keepdims=True)
                     - xhat * (gx * xhat).sum(axis=-1, keepdims=True) / xv.dtype.type(n))
        return dx, _unbroadcast(g * xhat, gain.value.shape), _unbroadcast(g, bias.value.shape)

    return tape.record(out, (x, gain, bias), bw)


def embedding(table: Var, ids) -> Var:
    ids = np.asarray(ids, dtype=np.int64)
    out = table.value[ids]

    def bw(g):
        dt = np.zeros_like(table.value)
        np.add.at(dt, ids.reshape(-1), g.reshape(-1, table.value.shape[-1]))
        return (dt,)

    return table.tape.record(out, (table,), bw)


def cross_entropy(logits: Var, labels) -> Var:
    """Mean softmax cross-entropy of ``logits[B, C]`` against integer ``labels[B]``."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.value
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise DimensionError(f"cross_entropy: logits {z.shape} vs labels {labels.shape}")
    zs = z - z.max(axis=-1, keepdims=True)
    logp = zs - np.log(np.exp(zs).sum(axis=-1, keepdims=True))
    rows = np.arange(z.shape[0])
    loss = -logp[rows, labels].mean()

    def bw(g):
        d = np.exp(logp)
        d[rows, labels] -= 1
        return (g * d / z.dtype.type(z.shape[0]),)

    return logits.tape.record(np.asarray(loss, dtype=z.dtype), (logits,), bw)


def fake_quant(a: Var, scale) -> Var:
    """Quantize-dequantize forward, straight-through backward."""
    out = quant.fake_quant(a.value, scale)
    mask = quant.ste_mask(a.value, scale)
    return a.tape.record(out, (a,), lambda g: (g * mask,))


# -- finite-difference oracle ------------------------------------------------

def grad_check(f, x, eps: float = 1e-5) -> float:
    """Largest elementwise relative error between the tape gradient of ``f``
    at ``x`` and a central difference.

    ``f`` takes a :class:`Var` and returns a scalar :class:`Var`. ``x`` is
    promoted to float64 so the difference quotient is not swamped by FP32
    round-off; closed-over FP32 tensors promote along with it.
    """
    x = np.array(x, dtype=np.float64)
    tape = Tape()
    xv = tape.var(x, name="x")
    backward(tape, f(xv))
    analytic = xv.grad if xv.grad is not None else np.zeros_like(x)

    def value(z):
        return float(f(Tape().var(z)).value)

    numeric = np.empty_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = value(x)
        flat[i] = old - eps
        down = value(x)
        flat[i] = old
        numeric.reshape(-1)[i] = (up - down) / (2 * eps)
    err = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-8)
    return float(err.max()) if err.size else 0.0
