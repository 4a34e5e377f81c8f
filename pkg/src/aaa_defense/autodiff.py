"""Dense tensors with reverse-mode automatic differentiation.

The graph is rebuilt on every forward pass (define-by-run): each produced
tensor remembers its parents and a closure that maps the upstream gradient
to parent gradients. ``backward`` walks the graph once and then consumes it.

Default precision is fp32; wrap verification code in ``precision("fp64")``
to get gradients that can be compared against central finite differences.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np


class AutodiffError(RuntimeError):
    pass


class ShapeError(AutodiffError):
    """Operand shapes incompatible for an op."""


class UnknownOpError(AutodiffError):
    pass


class MissingGradientError(AutodiffError):
    pass


_STATE = {"dtype": np.float32, "grad_enabled": True}


def default_dtype():
    return _STATE["dtype"]


@contextmanager
def precision(mode):
    """Switch the default dtype: "fp32" (training) or "fp64" (verification)."""
    if mode not in ("fp32", "fp64"):
        raise ValueError(f"unknown precision mode {mode!r}")
    old = _STATE["dtype"]
    _STATE["dtype"] = np.float64 if mode == "fp64" else np.float32
    try:
        yield
    finally:
        _STATE["dtype"] = old


@contextmanager
def no_grad():
    """Disable graph recording (evaluation / attack bookkeeping)."""
    old = _STATE["grad_enabled"]
    _STATE["grad_enabled"] = False
    try:
        yield
    finally:
        _STATE["grad_enabled"] = old


class Tensor:
    """A dense n-d array, optionally a differentiable leaf."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _STATE["dtype"])
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def _tracked(self):
        return self.requires_grad or self._backward is not None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, like_dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=like_dtype or _STATE["dtype"])


def _node(data, parents, backward_fn):
    """Create a result tensor, recording the op if any parent is tracked."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    if _STATE["grad_enabled"] and any(p._tracked() for p in parents):
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise and reduction ops ------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b, a.dtype)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}")

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(data, (a, b), bwd)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b, a.dtype)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}")

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(data, (a, b), bwd)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b, a.dtype)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _node(data, (a, b), bwd)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        # skip either side when its leaf is not tracked (frozen parameters)
        return (g @ bd.T if a._tracked() else None,
                ad.T @ g if b._tracked() else None)

    return _node(ad @ bd, (a, b), bwd)


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0

    def bwd(g):
        return (g * mask,)

    return _node(np.where(mask, a.data, 0), (a,), bwd)


def sigmoid(a):
    a = _as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _node(out, (a,), bwd)


def tanh(a):
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _node(out, (a,), bwd)


def clamp01(a):
    a = _as_tensor(a)
    mask = (a.data >= 0.0) & (a.data <= 1.0)

    def bwd(g):
        return (g * mask,)

    return _node(np.clip(a.data, 0.0, 1.0), (a,), bwd)


def flatten(a):
    a = _as_tensor(a)
    if a.data.ndim < 2:
        raise ShapeError(f"flatten: need a batched tensor, got shape {a.shape}")
    shape = a.shape

    def bwd(g):
        return (g.reshape(shape),)

    return _node(a.data.reshape(shape[0], -1), (a,), bwd)


def concat_channels(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channels: expects [N,C,H,W] operands")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(
            f"concat_channels: incompatible shapes {a.shape} and {b.shape}")
    ca = a.shape[1]

    def bwd(g):
        return g[:, :ca], g[:, ca:]

    return _node(np.concatenate([a.data, b.data], axis=1), (a, b), bwd)


def mean(a):
    a = _as_tensor(a)
    n = a.size
    shape = a.shape

    def bwd(g):
        return (np.full(shape, g / n, dtype=a.data.dtype),)

    return _node(np.asarray(a.data.mean(), dtype=a.data.dtype), (a,), bwd)


def mse(a, b):
    a, b = _as_tensor(a), _as_tensor(b, a.dtype)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes differ, {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = a.size

    def bwd(g):
        d = (2.0 * g / n) * diff
        return d, -d

    return _node(np.asarray((diff * diff).mean(), dtype=a.data.dtype), (a, b), bwd)


def sum_along(a, axis, keepdims=False):
    a = _as_tensor(a)
    shape = a.shape

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(a.data.dtype, copy=False),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def sum_all(a):
    a = _as_tensor(a)
    shape = a.shape

    def bwd(g):
        return (np.full(shape, g, dtype=a.data.dtype),)

    return _node(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), bwd)


def max_along(a, axis):
    """Max reduction; the gradient flows to the first maximal entry."""
    a = _as_tensor(a)
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    shape = a.shape

    def bwd(g):
        grad = np.zeros(shape, dtype=a.data.dtype)
        np.put_along_axis(grad, np.expand_dims(idx, axis),
                          np.expand_dims(g, axis), axis=axis)
        return (grad,)

    return _node(np.squeeze(out, axis=axis), (a,), bwd)


def maximum(a, b):
    a, b = _as_tensor(a), _as_tensor(b, a.dtype)
    mask = a.data >= b.data  # ties route the gradient to the first operand

    def bwd(g):
        return (_unbroadcast(g * mask, a.shape),
                _unbroadcast(g * ~mask, b.shape))

    return _node(np.maximum(a.data, b.data), (a, b), bwd)


# -- softmax cross-entropy ---------------------------------------------------


def softmax(logits):
    """Plain numpy softmax over the last axis (no graph recording)."""
    logits = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of softmax(logits) against integer labels."""
    logits = _as_tensor(logits)
    y = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    y = np.atleast_1d(y.astype(np.int64))
    z = logits.data if logits.data.ndim == 2 else logits.data.reshape(1, -1)
    n, k = z.shape
    if y.shape != (n,):
        raise ShapeError(
            f"softmax_cross_entropy: logits {z.shape} vs labels {y.shape}")
    if y.min() < 0 or y.max() >= k:
        raise ShapeError(f"softmax_cross_entropy: label out of range [0,{k})")
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    losses = lse - z[np.arange(n), y]
    probs = np.exp(z - lse[:, None])
    in_shape = logits.shape

    def bwd(g):
        grad = probs.copy()
        grad[np.arange(n), y] -= 1.0
        grad *= g / n
        return (grad.reshape(in_shape).astype(logits.data.dtype, copy=False),)

    return _node(np.asarray(losses.mean(), dtype=logits.data.dtype),
                 (logits,), bwd)


def cross_entropy_per_example(logits, labels):
    """Numpy helper: per-example CE losses (no graph)."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    y = np.asarray(labels, dtype=np.int64)
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    return lse - z[np.arange(z.shape[0]), y]


# -- spatial ops -------------------------------------------------------------


def _im2col(x, kh, kw, stride):
    """View of sliding windows, shape [N,C,kh,kw,OH,OW] (no copy)."""
    n, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    sn, sc, sh, sw = x.strides
    return np.lib.stride_tricks.as_strided(
        x, (n, c, kh, kw, oh, ow),
        (sn, sc, sh, sw, sh * stride, sw * stride), writeable=False)


def _col2im(dcols, x_shape, kh, kw, stride):
    """Adjoint of ``_im2col``: scatter-add windows back into an image."""
    n, c, h, w = x_shape
    oh, ow = dcols.shape[-2:]
    dx = np.zeros(x_shape, dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride] += \
                dcols[:, :, i, j]
    return dx


def _pad_hw(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-d convolution: x [N,C,H,W], w [F,C,kh,kw], b [F] or None."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} vs weight {w.shape}")
    f, c, kh, kw = w.shape
    xp = _pad_hw(x.data, padding)
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError(f"conv2d: kernel {(kh, kw)} larger than padded "
                         f"input {xp.shape[2:]}")
    n = x.shape[0]
    cols = _im2col(xp, kh, kw, stride)
    oh, ow = cols.shape[-2:]
    colmat = np.ascontiguousarray(cols).reshape(n, c * kh * kw, oh * ow)
    wmat = w.data.reshape(f, c * kh * kw)
    out = np.matmul(wmat, colmat).reshape(n, f, oh, ow)
    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (f,):
            raise ShapeError(f"conv2d: bias {b.shape}, expected ({f},)")
        out = out + b.data[None, :, None, None]
        parents.append(b)

    def bwd(g):
        gmat = g.reshape(n, f, oh * ow)
        dw = None
        if w._tracked():
            dw = np.tensordot(gmat, colmat,
                              axes=([0, 2], [0, 2])).reshape(w.shape)
        dx = None
        if x._tracked():
            dcolmat = np.matmul(wmat.T, gmat)  # [N, C*kh*kw, OH*OW]
            dcols = dcolmat.reshape(n, c, kh, kw, oh, ow)
            dxp = _col2im(dcols, xp.shape, kh, kw, stride)
            dx = dxp if padding == 0 else \
                dxp[:, :, padding:padding + x.shape[2],
                    padding:padding + x.shape[3]]
        grads = [dx, dw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if b._tracked() else None)
        return grads

    return _node(out, parents, bwd)


def transpose_conv2d(x, w, b=None, stride=1, padding=0, output_padding=0):
    """Transposed convolution: x [N,C,H,W], w [C,F,kh,kw] -> [N,F,OH,OW].

    OH = (H-1)*stride - 2*padding + kh + output_padding.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"transpose_conv2d: input {x.shape} vs weight {w.shape}")
    n, c, h, wd = x.shape
    _, f, kh, kw = w.shape
    oh = (h - 1) * stride - 2 * padding + kh + output_padding
    ow = (wd - 1) * stride - 2 * padding + kw + output_padding
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"transpose_conv2d: non-positive output {(oh, ow)}")
    fh = (h - 1) * stride + kh + output_padding
    fw = (wd - 1) * stride + kw + output_padding
    full = np.zeros((n, f, fh, fw), dtype=x.data.dtype)
    # [N,H,W,F,kh,kw] -> [N,F,kh,kw,H,W]
    contrib = np.tensordot(x.data, w.data, axes=([1], [0]))
    contrib = contrib.transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            full[:, :, i:i + h * stride:stride, j:j + wd * stride:stride] += \
                contrib[:, :, i, j]
    out = full[:, :, padding:padding + oh, padding:padding + ow]
    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (f,):
            raise ShapeError(f"transpose_conv2d: bias {b.shape}, expected ({f},)")
        out = out + b.data[None, :, None, None]
        parents.append(b)

    def bwd(g):
        gfull = np.zeros((n, f, fh, fw), dtype=g.dtype)
        gfull[:, :, padding:padding + oh, padding:padding + ow] = g
        windows = np.ascontiguousarray(
            _im2col(gfull, kh, kw, stride))  # [N,F,kh,kw,H,W]
        dx = dw = None
        if x._tracked():
            dx = np.tensordot(windows, w.data,
                              axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)
        if w._tracked():
            dw = np.tensordot(x.data, windows, axes=([0, 2, 3], [0, 4, 5]))
        grads = [dx, dw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if b._tracked() else None)
        return grads

    return _node(np.ascontiguousarray(out), parents, bwd)


def max_pool2x2(x):
    """2x2 max pooling with stride 2; ties keep the first (row-major) max."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool2x2: expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2x2: spatial dims must be even, got {(h, w)}")
    oh, ow = h // 2, w // 2
    tiles = x.data.reshape(n, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5)
    tiles = np.ascontiguousarray(tiles).reshape(n, c, oh, ow, 4)
    idx = tiles.argmax(axis=-1)
    out = np.take_along_axis(tiles, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        dtiles = np.zeros((n, c, oh, ow, 4), dtype=g.dtype)
        np.put_along_axis(dtiles, idx[..., None], g[..., None], axis=-1)
        dx = dtiles.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (np.ascontiguousarray(dx).reshape(n, c, h, w),)

    return _node(out, (x,), bwd)


# -- op dispatcher -----------------------------------------------------------

_OPS = {
    "add": add,
    "mul": mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "transpose_conv2d": transpose_conv2d,
    "max_pool2x2": max_pool2x2,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "flatten": flatten,
    "concat_channels": concat_channels,
    "softmax_cross_entropy": softmax_cross_entropy,
    "mse": mse,
    "mean": mean,
    "clamp01": clamp01,
}


def forward(op_kind, *inputs, **attrs):
    """Apply a named op; records it on the tape when an input requires grad."""
    try:
        op = _OPS[op_kind]
    except KeyError:
        raise UnknownOpError(f"unknown op_kind {op_kind!r}") from None
    return op(*inputs, **attrs)


OP_KINDS = tuple(_OPS)


# -- reverse pass ------------------------------------------------------------


class GradientMap:
    """Gradients keyed by tensor identity, one entry per requires_grad leaf."""

    def __init__(self, entries):
        # entries: dict id(tensor) -> (tensor, grad tensor)
        self._entries = entries

    def __contains__(self, t):
        return id(t) in self._entries

    def __getitem__(self, t):
        try:
            return self._entries[id(t)][1]
        except KeyError:
            raise MissingGradientError(
                f"no gradient recorded for tensor with shape {t.shape}"
            ) from None

    def __len__(self):
        return len(self._entries)

    def items(self):
        return [(src, grad) for src, grad in self._entries.values()]


def backward(loss):
    """Reverse-mode sweep from a scalar loss; consumes the tape."""
    if not isinstance(loss, Tensor):
        raise AutodiffError("backward expects a Tensor")
    if loss.size != 1:
        raise AutodiffError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward is None:
        raise AutodiffError("empty tape: loss was not produced by recorded ops")

    # iterative topological sort
    topo, visited = [], set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p._tracked():
                stack.append((p, False))

    grads = {id(loss): np.asarray(1.0, dtype=loss.data.dtype)}
    for node in reversed(topo):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p._tracked():
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg

    entries = {}
    for node in topo:
        if node._backward is None and node.requires_grad and id(node) in grads:
            g = grads[id(node)]
            if not np.all(np.isfinite(g)):
                raise AutodiffError("non-finite gradient encountered")
            entries[id(node)] = (node, Tensor(g, dtype=node.data.dtype))
        # consume the tape
        node._parents = ()
        node._backward = None
    return GradientMap(entries)


# -- verification ------------------------------------------------------------


def grad_check(function, point, step=1e-4):
    """Max relative error between analytic and central-difference gradients.

    ``function`` maps a Tensor to a scalar Tensor. Must run in fp64 mode.
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    if default_dtype() != np.float64:
        raise AutodiffError("grad_check must run inside precision('fp64')")
    x = Tensor(np.asarray(point.data if isinstance(point, Tensor) else point,
                          dtype=np.float64), requires_grad=True)
    loss = function(x)
    analytic = backward(loss)[x].data
    if not np.all(np.isfinite(analytic)):
        raise AutodiffError("grad_check: non-finite analytic gradient")

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = function(x).item()
            flat[i] = orig - step
            fm = function(x).item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2 * step)
    if not np.all(np.isfinite(numeric)):
        raise AutodiffError("grad_check: non-finite finite-difference value")
    a = analytic.reshape(-1)
    denom = np.maximum(1e-12, np.abs(a) + np.abs(numeric))
    return float(np.max(np.abs(a - numeric) / denom))


# -- Adam --------------------------------------------------------------------


@dataclass
class AdamState:
    """Bias-corrected Adam with per-parameter moment buffers."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    _m: dict = field(default_factory=dict)
    _v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """Apply one Adam update in place to every trainable parameter."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p in params:
        if not p.requires_grad:
            continue
        if p not in grads:
            raise MissingGradientError(
                f"adam_step: no gradient for trainable parameter {p.shape}")
        g = grads[p].data
        key = id(p)
        m = state._m.get(key)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
            state._m[key], state._v[key] = m, v
        else:
            v = state._v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.data -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(
            p.data.dtype, copy=False)
