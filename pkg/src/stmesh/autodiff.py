"""Minimal dense-tensor autodiff engine.

Reverse-mode on a define-by-run tape: every op that produces a tensor
requiring grad appends its backward closure to a module-global tape, and
``backward()`` replays the tape in reverse.  Appending order guarantees each
node is visited after all of its consumers, so no explicit topological sort
is needed.  One graph per forward pass; the tape is cleared after backward
and a second backward on the same loss raises.

All buffers are float64.  NaN/Inf checking at op boundaries is opt-in via
``set_debug_checks(True)`` (or STMESH_DEBUG_NAN=1).
"""

from __future__ import annotations

import os

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "parameter",
    "backward",
    "zero_grad",
    "matmul",
    "softmax",
    "layer_norm",
    "conv2d",
    "relu",
    "gelu",
    "sigmoid",
    "exp",
    "log",
    "concat",
    "gradcheck",
    "set_debug_checks",
    "tape_size",
]


class TensorError(Exception):
    """Shape mismatch, detached graph, or invalid numeric state."""


_DEBUG_CHECKS = os.environ.get("STMESH_DEBUG_NAN", "") == "1"


def set_debug_checks(enabled):
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


# The global tape: list of output tensors in execution order.
_TAPE: list["Tensor"] = []
_TAPE_GENERATION = 0


def tape_size():
    return len(_TAPE)


def _check_finite(arr, where):
    if _DEBUG_CHECKS and not np.all(np.isfinite(arr)):
        raise TensorError(f"non-finite values produced by {where}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_tape_gen")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._tape_gen = None

    # -- bookkeeping -------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)

    @property
    def T(self):
        return transpose(self, None)


def tensor(data):
    return Tensor(data)


def parameter(data):
    """A trainable leaf."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out, backward_fn):
    out._backward = backward_fn
    out._tape_gen = _TAPE_GENERATION
    _TAPE.append(out)
    return out


def _make(data, inputs, backward_fn, opname):
    _check_finite(data, opname)
    out = Tensor(data)
    if any(i.requires_grad for i in inputs):
        out.requires_grad = True
        _record(out, backward_fn)
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise ops -------------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def bw(out):
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad, b.shape))

    return _make(out_data, (a, b), bw, "add")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data - b.data

    def bw(out):
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-out.grad, b.shape))

    return _make(out_data, (a, b), bw, "sub")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def bw(out):
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad * a.data, b.shape))

    return _make(out_data, (a, b), bw, "mul")


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data / b.data

    def bw(out):
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-out.grad * a.data / (b.data ** 2), b.shape))

    return _make(out_data, (a, b), bw, "div")


def neg(a):
    a = _as_tensor(a)

    def bw(out):
        if a.requires_grad:
            a._accumulate(-out.grad)

    return _make(-a.data, (a,), bw, "neg")


def square(a):
    return mul(a, a)


def exp(a):
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def bw(out):
        if a.requires_grad:
            a._accumulate(out.grad * out_data)

    return _make(out_data, (a,), bw, "exp")


def log(a):
    a = _as_tensor(a)
    out_data = np.log(a.data)

    def bw(out):
        if a.requires_grad:
            a._accumulate(out.grad / a.data)

    return _make(out_data, (a,), bw, "log")


def sqrt(a):
    a = _as_tensor(a)
    out_data = np.sqrt(a.data)

    def bw(out):
        if a.requires_grad:
            a._accumulate(out.grad * 0.5 / out_data)

    return _make(out_data, (a,), bw, "sqrt")


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0

    def bw(out):
        if a.requires_grad:
            a._accumulate(out.grad * mask)

    return _make(a.data * mask, (a,), bw, "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a):
    """Tanh-approximation GELU; backward uses the exact derivative of the
    approximation."""
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def bw(out):
        if a.requires_grad:
            dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
            d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner
            a._accumulate(out.grad * d)

    return _make(out_data, (a,), bw, "gelu")


def sigmoid(a):
    a = _as_tensor(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def bw(out):
        if a.requires_grad:
            a._accumulate(out.grad * out_data * (1.0 - out_data))

    return _make(out_data, (a,), bw, "sigmoid")


# -- reductions / shape ops ------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(out):
        if a.requires_grad:
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape))

    return _make(out_data, (a,), bw, "sum")


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    if axis is None:
        n = a.size
    else:
        n = a.shape[axis] if isinstance(axis, int) else int(np.prod([a.shape[i] for i in axis]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape):
    a = _as_tensor(a)

    def bw(out):
        if a.requires_grad:
            a._accumulate(out.grad.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), bw, "reshape")


def transpose(a, axes=None):
    a = _as_tensor(a)
    out_data = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def bw(out):
        if a.requires_grad:
            a._accumulate(np.transpose(out.grad, inv))

    return _make(out_data, (a,), bw, "transpose")


def getitem(a, idx):
    a = _as_tensor(a)
    out_data = a.data[idx]

    def bw(out):
        if a.requires_grad:
            g = np.zeros_like(a.data)
            np.add.at(g, idx, out.grad)
            a._accumulate(g)

    return _make(np.array(out_data), (a,), bw, "getitem")


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(out):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * out.grad.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(out.grad[tuple(sl)])

    return _make(out_data, tuple(tensors), bw, "concat")


def stack(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def bw(out):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(np.take(out.grad, i, axis=axis))

    return _make(out_data, tuple(tensors), bw, "stack")


# -- core numeric kernels --------------------------------------------------


def matmul(a, b):
    """Matrix product; supports stacked leading batch dims (numpy semantics),
    with gradients reduced over broadcast batch axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.data.ndim > 1 else 0]:
        raise TensorError(f"matmul inner dims mismatch: {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def bw(out):
        if a.requires_grad:
            da = np.matmul(out.grad, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(da, a.shape))
        if b.requires_grad:
            db = np.matmul(np.swapaxes(a.data, -1, -2), out.grad)
            b._accumulate(_unbroadcast(db, b.shape))

    return _make(out_data, (a, b), bw, "matmul")


def softmax(a, axis=-1):
    """Row-max is subtracted before exponentiation (shift-invariance makes
    this gradient-neutral)."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(out):
        if a.requires_grad:
            inner = (out.grad * s).sum(axis=axis, keepdims=True)
            a._accumulate(s * (out.grad - inner))

    return _make(s, (a,), bw, "softmax")


def logsumexp(a, axis=-1, keepdims=False):
    a = _as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    se = e.sum(axis=axis, keepdims=True)
    out_data = m + np.log(se)
    soft = e / se
    if not keepdims:
        out_data = np.squeeze(out_data, axis=axis)

    def bw(out):
        if a.requires_grad:
            g = out.grad
            if not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(g * soft)

    return _make(out_data, (a,), bw, "logsumexp")


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise TensorError("layer_norm eps must be > 0")
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gain.data + bias.data
    d = x.shape[-1]

    def bw(out):
        gdy = out.grad * gain.data
        if x.requires_grad:
            m1 = gdy.mean(axis=-1, keepdims=True)
            m2 = (gdy * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv * (gdy - m1 - xhat * m2))
        if gain.requires_grad:
            g = out.grad * xhat
            gain._accumulate(g.reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(out.grad.reshape(-1, d).sum(axis=0))

    return _make(out_data, (x, gain, bias), bw, "layer_norm")


def _im2col_indices(c_in, h, w, k, stride, pad):
    # floor semantics: trailing rows/cols that do not fit a full window are
    # dropped, matching the usual convolution output-size convention
    h_out = (h + 2 * pad - k) // stride + 1
    w_out = (w + 2 * pad - k) // stride + 1
    if h_out < 1 or w_out < 1:
        raise TensorError(
            f"conv2d kernel k={k} larger than padded input {h}x{w} (pad={pad})"
        )
    i0 = np.repeat(np.arange(k), k)
    i0 = np.tile(i0, c_in)
    i1 = stride * np.repeat(np.arange(h_out), w_out)
    j0 = np.tile(np.arange(k), k * c_in)
    j1 = stride * np.tile(np.arange(w_out), h_out)
    i = i0.reshape(-1, 1) + i1.reshape(1, -1)
    j = j0.reshape(-1, 1) + j1.reshape(1, -1)
    ch = np.repeat(np.arange(c_in), k * k).reshape(-1, 1)
    return ch, i, j, h_out, w_out


def conv2d(x, w, stride=1, pad=0):
    """Cross-correlation of a C_in x H x W image with C_out x C_in x k x k
    filters."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise TensorError("conv2d expects x: CxHxW and w: OCxCxkxk")
    c_in, h, wd = x.shape
    oc, c_in_w, k, k2 = w.shape
    if c_in != c_in_w or k != k2:
        raise TensorError(f"conv2d channel/kernel mismatch: x {x.shape}, w {w.shape}")
    ch, ii, jj, h_out, w_out = _im2col_indices(c_in, h, wd, k, stride, pad)
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = xp[ch, ii, jj]  # (C*k*k, H'*W')
    wf = w.data.reshape(oc, -1)
    out_data = (wf @ cols).reshape(oc, h_out, w_out)

    def bw(out):
        dout = out.grad.reshape(oc, -1)
        if w.requires_grad:
            w._accumulate((dout @ cols.T).reshape(w.shape))
        if x.requires_grad:
            dcols = wf.T @ dout
            dxp = np.zeros((c_in, h + 2 * pad, wd + 2 * pad))
            np.add.at(dxp, (ch, ii, jj), dcols)
            if pad:
                dxp = dxp[:, pad:-pad, pad:-pad]
            x._accumulate(dxp)

    return _make(out_data, (x, w), bw, "conv2d")


# -- backward driver -------------------------------------------------------


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf, then clear
    the tape.  ``loss`` must be a scalar produced by the current tape."""
    global _TAPE, _TAPE_GENERATION
    if loss.size != 1:
        raise TensorError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad or loss._tape_gen != _TAPE_GENERATION or not _TAPE:
        raise TensorError(
            "loss is detached from the active tape (already consumed by a "
            "previous backward, or built from non-grad inputs)"
        )
    loss.grad = np.ones_like(loss.data)
    for node in reversed(_TAPE):
        if node.grad is not None and node._backward is not None:
            node._backward(node)
    for node in _TAPE:
        # intermediate grads are transient; leaves keep theirs
        node.grad = None
        node._backward = None
    _TAPE = []
    _TAPE_GENERATION += 1


def reset_tape():
    """Discard any recorded forward graph without running backward."""
    global _TAPE, _TAPE_GENERATION
    for node in _TAPE:
        node._backward = None
    _TAPE = []
    _TAPE_GENERATION += 1


def zero_grad(params):
    for p in params:
        p.zero_grad()


# -- finite-difference verification ---------------------------------------


def gradcheck(fn, inputs, h=1e-5):
    """Max elementwise error between analytic and central-difference grads.

    ``fn`` maps the tensors in ``inputs`` to a scalar Tensor.  The error is
    |a - n| / max(1, |a| + |n|): relative for large gradients, absolute for
    small ones.
    """
    for t in inputs:
        t.requires_grad = True
        t.zero_grad()
    reset_tape()
    loss = fn(*inputs)
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            reset_tape()
            fp = float(fn(*inputs).data)
            flat[i] = orig - h
            reset_tape()
            fm = float(fn(*inputs).data)
            flat[i] = orig
            num[i] = (fp - fm) / (2 * h)
        reset_tape()
        num = num.reshape(t.data.shape)
        err = np.abs(a - num) / np.maximum(1.0, np.abs(a) + np.abs(num))
        worst = max(worst, float(err.max()))
    for t in inputs:
        t.zero_grad()
    return worst
