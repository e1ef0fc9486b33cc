"""Minimal dense tensor with tape-based reverse-mode autodiff.

Everything is backed by numpy arrays in f32 or f64. Ops record backward
closures on the active Tape; `backward` replays the tape in reverse with
fixed-order += accumulation, so gradients are bit-reproducible.
"""

from __future__ import annotations

import math

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)


class TensorError(ValueError):
    pass


def _check_finite(arr, op, allow_neg_inf=False):
    if np.isnan(arr).any():
        raise TensorError(f"{op}: NaN in result")
    if allow_neg_inf:
        if np.isposinf(arr).any():
            raise TensorError(f"{op}: +inf in result")
    elif not np.isfinite(arr).all():
        raise TensorError(f"{op}: non-finite value in result")


class Tensor:
    def __init__(self, data, dtype=None, requires_grad=False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def detach(self):
        return Tensor(self.data.copy(), requires_grad=False)

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"


class TapeNode:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable ops; confined to one thread."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _push_tape(self)
        return self

    def __exit__(self, *exc):
        _pop_tape(self)
        return False


_TAPE_STACK = []


def _push_tape(tape):
    _TAPE_STACK.append(tape)


def _pop_tape(tape):
    if not _TAPE_STACK or _TAPE_STACK[-1] is not tape:
        raise TensorError("tape stack corrupted")
    _TAPE_STACK.pop()


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(op, inputs, out_data, backward_fn, allow_neg_inf=False):
    _check_finite(out_data, op, allow_neg_inf=allow_neg_inf)
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.nodes.append(TapeNode(op, inputs, out, backward_fn))
    return out


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


# ---------------------------------------------------------------- elementwise


def add(a, b, allow_neg_inf=False):
    a, b = as_tensor(a), as_tensor(b, like=a)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", (a, b), out, bw, allow_neg_inf=allow_neg_inf)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b, like=a)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", (a, b), out, bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b, like=a)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", (a, b), out, bw)


def neg(a):
    return _record("neg", (a,), -a.data, lambda g: (-g,))


def scale(a, s):
    s = float(s)
    return _record("scale", (a,), a.data * s, lambda g: (g * s,))


def square(a):
    return _record("square", (a,), a.data * a.data, lambda g: (2.0 * a.data * g,))


def sqrt(a):
    out = np.sqrt(a.data)

    def bw(g):
        return (g * 0.5 / out,)

    return _record("sqrt", (a,), out, bw)


def reciprocal(a):
    out = 1.0 / a.data

    def bw(g):
        return (-g * out * out,)

    return _record("reciprocal", (a,), out, bw)


def tanh(a):
    out = np.tanh(a.data)

    def bw(g):
        return (g * (1.0 - out * out),)

    return _record("tanh", (a,), out, bw)


def exp(a):
    out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _record("exp", (a,), out, bw)


# ---------------------------------------------------------------- structural


def reshape(a, shape):
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def bw(g):
        return (g.reshape(a.shape),)

    return _record("reshape", (a,), out, bw)


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))

    def bw(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _record("transpose", (a,), out, bw)


def roll(a, shifts, axes):
    shifts = tuple(shifts)
    axes = tuple(axes)
    out = np.roll(a.data, shifts, axis=axes)
    inv = tuple(-s for s in shifts)

    def bw(g):
        return (np.roll(g, inv, axis=axes),)

    return _record("roll", (a,), out, bw)


def gather(a, indices, axis=0):
    """Index-select along `axis`; backward is fixed-order scatter-add."""
    idx = np.asarray(indices)
    if idx.ndim != 1:
        raise TensorError("gather: indices must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[axis]):
        raise TensorError(
            f"gather: index out of range for axis {axis} of extent {a.shape[axis]}"
        )
    out = np.take(a.data, idx, axis=axis)

    def bw(g):
        ga = np.zeros(a.shape, dtype=a.dtype)
        np.add.at(np.moveaxis(ga, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (ga,)

    return _record("gather", (a,), out, bw)


def sum_(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", (a,), out, bw)


def mean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.data.size
    else:
        n = a.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ------------------------------------------------------------------- matmul


def matmul(a, b):
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise TensorError("matmul: operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise TensorError(
            f"matmul: inner dims mismatch {a.shape} @ {b.shape}"
        )
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", (a, b), out, bw)


def linear(x, w, b=None):
    y = matmul(x, w)
    if b is not None:
        y = add(y, b)
    return y


# ------------------------------------------------------------- fused kernels


def softmax_lastdim(x):
    """Stable softmax over the last dim; -inf entries map to exact 0."""
    if x.shape[-1] < 1:
        raise TensorError("softmax: empty last dim")
    m = np.max(x.data, axis=-1, keepdims=True)
    if np.isneginf(m).any():
        raise TensorError("softmax: row with all entries masked (-inf)")
    z = x.data - m
    e = np.where(np.isneginf(z), 0.0, np.exp(z))
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _record("softmax", (x,), out, bw)


def layer_norm(x, gamma, beta, eps=1e-6):
    """Normalize the last dim to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise TensorError("layer_norm: eps must be > 0")
    mu = mean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = mean(square(xc), axis=-1, keepdims=True)
    inv = reciprocal(sqrt(add(var, as_tensor(eps, like=x))))
    return add(mul(mul(xc, inv), gamma), beta)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """tanh-approximation GELU."""
    inner = scale(add(x, scale(mul(square(x), x), 0.044715)), _GELU_C)
    return mul(scale(x, 0.5), add(tanh(inner), as_tensor(1.0, like=x)))


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of [N, C] logits against int labels [N]."""
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise TensorError("cross_entropy: labels must be [N] ints")
    n, c = logits.shape
    if labels.min() < 0 or labels.max() >= c:
        raise TensorError("cross_entropy: label out of range")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=-1))
    out = np.mean(logsumexp - z[np.arange(n), labels])

    def bw(g):
        p = np.exp(z)
        p /= p.sum(axis=-1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _record("cross_entropy", (logits,), out, bw)


# ----------------------------------------------------------------- backward


def backward(loss, tape):
    """Populate .grad of every requires_grad tensor reachable from loss."""
    if loss.data.size != 1:
        raise TensorError("backward: loss must be a scalar")
    if not tape.nodes:
        raise TensorError("backward: empty tape")
    produced = {id(n.output) for n in tape.nodes}
    grads = {id(loss): np.ones_like(loss.data)}
    leaf = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None:
                continue
            key = id(t)
            if key in produced:
                grads[key] = grads[key] + gi if key in grads else gi
            elif t.requires_grad:
                if key in leaf:
                    leaf[key] = (t, leaf[key][1] + gi)
                else:
                    leaf[key] = (t, gi)
    for t, g in leaf.values():
        t.accumulate_grad(g)


class ParamStore:
    """Named parameter map with lexicographic iteration order."""

    def __init__(self):
        self._params = {}

    def add(self, name, tensor):
        if name in self._params:
            raise TensorError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return sorted(self._params)

    def items(self):
        return [(n, self._params[n]) for n in self.names()]

    def zero_grad(self):
        for _, p in self.items():
            p.zero_grad()

    def state_arrays(self):
        return {n: p.data for n, p in self.items()}


# --------------------------------------------------------------- grad check


def grad_check(f, x, h=1e-5):
    """Max relative error between analytic grad of f at x and central differences.

    f maps a Tensor to a scalar Tensor; f64 only.
    """
    if x.dtype != np.float64:
        raise TensorError("grad_check: f64 only")
    if not (1e-6 <= h <= 1e-4):
        raise TensorError("grad_check: h must be in [1e-6, 1e-4]")
    x.requires_grad = True
    x.zero_grad()
    with Tape() as tape:
        y = f(x)
    if not np.isfinite(y.data).all():
        raise TensorError("grad_check: non-finite f(x)")
    backward(y, tape)
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x).item()
        flat[i] = orig - h
        fm = f(x).item()
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * h)
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / max(1.0, abs(a))
        worst = max(worst, err)
    return worst
