"""Dense tensors with tape-based reverse-mode differentiation.

Values live in numpy arrays (float32 by default; float64 works everywhere and is
what the gradient checks use). An operation records a backward rule only while
a :class:`Tape` is active *and* one of its inputs requires a gradient, so plain
inference never allocates tape nodes.

There is no broadcasting except against scalars: elementwise ops on tensors of
different non-scalar shapes raise :class:`ShapeMismatch`.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyTape, NonDeterministicFunction, NotScalarLoss, ShapeMismatch

DEFAULT_DTYPE = np.float32

_local = threading.local()
_faults: set[str] = set()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


@dataclass
class _Node:
    inputs: tuple
    output: Tensor
    backward: object


class Tape:
    """Ordered record of differentiable operations for one forward pass.

    Use as a context manager; operations executed inside the ``with`` block are
    recorded. :func:`backward` consumes the tape.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.tapes.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, output, inputs, backward):
        self.nodes.append(_Node(tuple(inputs), output, backward))

    def backward(self, loss):
        backward(loss, self)


def active_tape():
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_grad():
    """Suspend recording, e.g. for an optimizer update inside a training loop."""
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


@contextlib.contextmanager
def inject_fault(op):
    """Debug hook: make ``op``'s backward rule deliberately wrong.

    Only ``"sigmoid"`` is wired. Used as a negative control for gradient checks.
    """
    _faults.add(op)
    try:
        yield
    finally:
        _faults.discard(op)


def _lift(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _result(data, inputs, backward_fn):
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype)
    if needs:
        tape.record(out, inputs, backward_fn)
    return out


def _reduce_to(g, shape):
    # undo scalar broadcasting
    if g.shape == shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)


def _check_elementwise(a, b, opname):
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeMismatch(f"{opname}: shapes {a.shape} and {b.shape} differ")


def backward(loss, tape):
    """Backpropagate from scalar ``loss`` through ``tape``.

    Gradients accumulate into ``.grad`` of every leaf tensor that requires one.
    The tape is cleared afterwards; a second call raises :class:`EmptyTape`.
    """
    if tape is None or not tape.nodes:
        raise EmptyTape("tape has no recorded operations")
    if loss.size != 1:
        raise NotScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    produced = {id(n.output) for n in tape.nodes}
    if id(loss) not in produced:
        raise ValueError("loss was not produced by this tape")

    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if id(t) not in produced:
                leaves[key] = t
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for key, t in leaves.items():
        g = grads[key].astype(t.dtype, copy=False).reshape(t.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g
    tape.nodes.clear()


# -- elementwise ----------------------------------------------------------------


def add(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else a), _lift(b, a)
    _check_elementwise(a, b, "add")
    out = a.data + b.data

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _result(out, (a, b), bw)


def sub(a, b):
    b = _lift(b, a)
    _check_elementwise(a, b, "sub")
    out = a.data - b.data

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _result(out, (a, b), bw)


def mul(a, b):
    a, b = _lift(a, b if isinstance(b, Tensor) else a), _lift(b, a)
    _check_elementwise(a, b, "mul")
    out = a.data * b.data

    def bw(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _result(out, (a, b), bw)


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,))


def relu(x):
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


def prelu(x, alpha):
    """max(0,x) + alpha*min(0,x) with a single shared slope tensor of size 1."""
    if not isinstance(alpha, Tensor):
        alpha = Tensor(np.asarray([alpha], dtype=x.dtype))
    if alpha.size != 1:
        raise ShapeMismatch("prelu expects a single shared slope")
    a = alpha.data.reshape(())
    neg_part = np.minimum(x.data, 0)
    out = np.maximum(x.data, 0) + a * neg_part

    def bw(g):
        dx = np.where(x.data > 0, g, a * g)
        da = np.asarray(np.sum(g * neg_part), dtype=alpha.dtype).reshape(alpha.shape)
        return dx, da

    return _result(out.astype(x.dtype, copy=False), (x, alpha), bw)


def _sigmoid(v):
    # split by sign to avoid overflow in exp
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x):
    s = _sigmoid(x.data)

    def bw(g):
        if "sigmoid" in _faults:
            return (g * s,)
        return (g * s * (1.0 - s),)

    return _result(s, (x,), bw)


def tanh(x):
    t = np.tanh(x.data)
    return _result(t, (x,), lambda g: (g * (1.0 - t * t),))


def sqrt(x):
    r = np.sqrt(x.data)
    return _result(r, (x,), lambda g: (g * 0.5 / r,))


def power(x, p):
    """x**p for a constant exponent; x must be positive where p is fractional."""
    out = x.data ** p
    return _result(out, (x,), lambda g: (g * p * x.data ** (p - 1),))


# -- linear algebra ---------------------------------------------------------------


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def bw(g):
        da = g @ b.data.T if a.requires_grad else None
        db = a.data.T @ g if b.requires_grad else None
        return da, db

    return _result(out, (a, b), bw)


def linear(x, weight, bias=None):
    """x @ weight.T + bias over the last axis; x is [in] or [N x in]."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeMismatch(f"linear: input width {x.shape[-1]} != weight in-dim {weight.shape[1]}")
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data.T
    if bias is not None:
        out += bias.data
    out = out.reshape(x.shape[:-1] + (weight.shape[0],))
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, weight.shape[0])
        dx = (g2 @ weight.data).reshape(x.shape) if x.requires_grad else None
        dw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return dx, dw
        return dx, dw, g2.sum(axis=0)

    return _result(out, inputs, bw)


# -- shape manipulation -----------------------------------------------------------


def reshape(x, shape):
    out = x.data.reshape(shape)
    return _result(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None):
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _result(np.ascontiguousarray(out), (x,), lambda g: (np.transpose(g, inv),))


def concat(tensors, axis=-1):
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(out, tensors, bw)


def index(x, key):
    out = x.data[key]

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        return (full,)

    return _result(np.ascontiguousarray(out), (x,), bw)


def tsum(x, axis=None):
    out = np.asarray(np.sum(x.data, axis=axis, dtype=np.float64), dtype=x.dtype)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).astype(x.dtype),)

    return _result(out, (x,), bw)


def mean(x, axis=None):
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    out = np.asarray(np.mean(x.data, axis=axis, dtype=np.float64), dtype=x.dtype)

    def bw(g):
        if axis is None:
            return (np.full(x.shape, g.reshape(()) / count, dtype=x.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis) / count, x.shape).astype(x.dtype),)

    return _result(out, (x,), bw)


# -- fused layers -----------------------------------------------------------------


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize each vector along the last axis; statistics in float64."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch(f"layer_norm: feature dim {d} vs gamma {gamma.shape}")
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=-1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = (xhat * gamma.data + beta.data).astype(x.dtype)

    def bw(g):
        gd = g.astype(np.float64)
        dxhat = gd * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        dgamma = (gd * xhat).sum(axis=lead)
        dbeta = gd.sum(axis=lead)
        return dx.astype(x.dtype), dgamma.astype(x.dtype), dbeta.astype(x.dtype)

    return _result(out, (x, gamma, beta), bw)


def lstm_sequence(x, w, u, b, h0=None, c0=None):
    """Run a unidirectional LSTM over the rows of ``x`` ([T x in]).

    Gate order in ``w``/``u``/``b`` rows is (input, forget, cell, output).
    Returns ``(H, (h_T, c_T))``: the [T x d] output tensor and the final state
    as plain arrays.
    """
    d = u.shape[1]
    if w.shape != (4 * d, x.shape[-1]) or u.shape != (4 * d, d) or b.shape != (4 * d,):
        raise ShapeMismatch("lstm_sequence: inconsistent weight shapes")
    steps = x.shape[0]
    dtype = x.dtype
    h = np.zeros(d, dtype) if h0 is None else np.asarray(h0, dtype)
    c = np.zeros(d, dtype) if c0 is None else np.asarray(c0, dtype)
    if h.shape != (d,) or c.shape != (d,):
        raise ShapeMismatch(f"lstm state must have shape ({d},)")
    xw = x.data @ w.data.T + b.data
    ut = np.ascontiguousarray(u.data.T)
    hs = np.empty((steps, d), dtype)
    record = active_tape() is not None and any(t.requires_grad for t in (x, w, u, b))
    if record:
        gates = np.empty((steps, 4 * d), dtype)
        cs = np.empty((steps + 1, d), dtype)
        cs[0] = c
        h_prev = np.empty((steps, d), dtype)
    for t in range(steps):
        z = xw[t] + h @ ut
        i = _sigmoid(z[:d])
        f = _sigmoid(z[d:2 * d])
        gg = np.tanh(z[2 * d:3 * d])
        o = _sigmoid(z[3 * d:])
        if record:
            h_prev[t] = h
            gates[t, :d], gates[t, d:2 * d], gates[t, 2 * d:3 * d], gates[t, 3 * d:] = i, f, gg, o
        c = f * c + i * gg
        h = o * np.tanh(c)
        hs[t] = h
        if record:
            cs[t + 1] = c
    final = (h.copy(), c.copy())

    def bw(gH):
        dz = np.empty((steps, 4 * d), dtype)
        dh_next = np.zeros(d, dtype)
        dc_next = np.zeros(d, dtype)
        for t in range(steps - 1, -1, -1):
            i, f = gates[t, :d], gates[t, d:2 * d]
            gg, o = gates[t, 2 * d:3 * d], gates[t, 3 * d:]
            tc = np.tanh(cs[t + 1])
            dh = gH[t] + dh_next
            dc = dh * o * (1 - tc * tc) + dc_next
            dz[t, :d] = dc * gg * i * (1 - i)
            dz[t, d:2 * d] = dc * cs[t] * f * (1 - f)
            dz[t, 2 * d:3 * d] = dc * i * (1 - gg * gg)
            dz[t, 3 * d:] = dh * tc * o * (1 - o)
            dc_next = dc * f
            dh_next = dz[t] @ u.data
        dx = dz @ w.data
        dw = dz.T @ x.data
        du = dz.T @ h_prev
        db = dz.sum(axis=0)
        return dx, dw, du, db

    if record:
        out = _result(hs, (x, w, u, b), bw)
    else:
        out = Tensor(hs, dtype=dtype)
    return out, final


def frame(x, window, hop):
    """Slice a signal [T] (or [C x T]) into overlapping frames [F x window] ([F x C x window]).

    F = (T - window) // hop + 1. The adjoint is :func:`overlap_add`.
    """
    T = x.shape[-1]
    if T < window:
        raise ShapeMismatch(f"frame: signal length {T} shorter than window {window}")
    nframes = (T - window) // hop + 1
    view = np.lib.stride_tricks.sliding_window_view(x.data, window, axis=-1)[..., ::hop, :]
    view = view[..., :nframes, :]
    out = np.ascontiguousarray(np.moveaxis(view, -2, 0))

    def bw(g):
        full = _overlap_add(np.moveaxis(g, 0, -2), hop)
        pad = T - full.shape[-1]
        if pad:
            full = np.concatenate([full, np.zeros(full.shape[:-1] + (pad,), full.dtype)], axis=-1)
        return (full,)

    return _result(out, (x,), bw)


def _overlap_add(frames, hop):
    # frames: [..., F, window] -> [..., (F-1)*hop + window]
    nframes, window = frames.shape[-2], frames.shape[-1]
    length = (nframes - 1) * hop + window
    out = np.zeros(frames.shape[:-2] + (length,), frames.dtype)
    if window % hop == 0:
        r = window // hop
        parts = frames.reshape(frames.shape[:-1] + (r, hop))
        for j in range(r):
            seg = parts[..., j, :].reshape(frames.shape[:-2] + (nframes * hop,))
            out[..., j * hop: j * hop + nframes * hop] += seg
    else:
        for f in range(nframes):
            out[..., f * hop: f * hop + window] += frames[..., f, :]
    return out


def overlap_add(frames, hop):
    """Sum frames [F x window] (or [F x C x window]) at ``hop`` spacing; adjoint of :func:`frame`."""
    window = frames.shape[-1]
    out = _overlap_add(np.moveaxis(frames.data, 0, -2), hop)

    def bw(g):
        view = np.lib.stride_tricks.sliding_window_view(g, window, axis=-1)[..., ::hop, :]
        return (np.ascontiguousarray(np.moveaxis(view, -2, 0)),)

    return _result(out, (frames,), bw)


def _pad_hw(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Dense 2-D cross-correlation. x [N x C x H x W], weight [O x C x k x k]."""
    n, c, hgt, wid = x.shape
    o, ci, k, k2 = weight.shape
    if ci != c or k != k2:
        raise ShapeMismatch(f"conv2d: input {x.shape} vs weight {weight.shape}")
    xp = _pad_hw(x.data, padding)
    ho = (hgt + 2 * padding - k) // stride + 1
    wo = (wid + 2 * padding - k) // stride + 1
    if k == 1 and padding == 0:
        xs = xp[:, :, ::stride, ::stride]
        cols = np.ascontiguousarray(xs.transpose(0, 2, 3, 1)).reshape(-1, c)
    else:
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
        win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(-1, c * k * k)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        dw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, k, k)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            dx = dxp[:, :, padding:padding + hgt, padding:padding + wid] if padding else dxp
        if bias is None:
            return dx, dw
        return dx, dw, g2.sum(axis=0)

    return _result(out, inputs, bw)


def depthwise_conv2d(x, weight, stride=1, padding=0):
    """Per-channel 2-D cross-correlation. x [N x C x H x W], weight [C x 1 x k x k]."""
    n, c, hgt, wid = x.shape
    if weight.shape[0] != c or weight.shape[1] != 1:
        raise ShapeMismatch(f"depthwise_conv2d: input {x.shape} vs weight {weight.shape}")
    k = weight.shape[2]
    xp = _pad_hw(x.data, padding)
    ho = (hgt + 2 * padding - k) // stride + 1
    wo = (wid + 2 * padding - k) // stride + 1
    wk = weight.data[:, 0]
    out = np.zeros((n, c, ho, wo), x.dtype)

    def tap(i, j):
        return (slice(None), slice(None),
                slice(i, i + stride * (ho - 1) + 1, stride), slice(j, j + stride * (wo - 1) + 1, stride))

    for i in range(k):
        for j in range(k):
            out += wk[:, i, j][None, :, None, None] * xp[tap(i, j)]

    def bw(g):
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(weight.data)
        for i in range(k):
            for j in range(k):
                sl = tap(i, j)
                dxp[sl] += wk[:, i, j][None, :, None, None] * g
                dw[:, 0, i, j] = np.einsum("nchw,nchw->c", g, xp[sl])
        dx = dxp[:, :, padding:padding + hgt, padding:padding + wid] if padding else dxp
        return dx, dw

    return _result(out, (x, weight), bw)


def add_bias(x, bias):
    """Add ``bias`` [C] along the last axis of x [..., C]."""
    if bias.shape != (x.shape[-1],):
        raise ShapeMismatch(f"add_bias: {x.shape} vs bias {bias.shape}")
    out = x.data + bias.data
    lead = tuple(range(x.ndim - 1))
    return _result(out, (x, bias), lambda g: (g, g.sum(axis=lead)))


def channel_affine(x, scale, shift):
    """Per-channel scale and shift of x [N x C x ...] (frozen-statistics batch norm)."""
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeMismatch(f"channel_affine: {x.shape} vs scale {scale.shape}")
    bshape = (1, c) + (1,) * (x.ndim - 2)
    s = scale.data.reshape(bshape)
    out = x.data * s + shift.data.reshape(bshape)
    axes = (0,) + tuple(range(2, x.ndim))

    def bw(g):
        return g * s, (g * x.data).sum(axis=axes), g.sum(axis=axes)

    return _result(out, (x, scale, shift), bw)


# -- gradient verification --------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    checked: int
    tol: float
    eps: float
    entries: list = field(default_factory=list)  # (param index, flat index, analytic, numeric, rel err)

    def worst(self):
        return max(self.entries, key=lambda e: e[4]) if self.entries else None


def grad_check(f, params, eps=1e-3, tol=1e-3, samples=100, seed=0, per_param=0):
    """Compare tape gradients of scalar ``f()`` with central finite differences.

    A random subset of ``samples`` scalar parameters (all of them if there are
    fewer) is checked; ``per_param`` additionally guarantees that many samples
    from every parameter tensor. Relative error uses the denominator
    ``max(|analytic|, |numeric|, 1e-8)``. ``eps`` is one step size or a
    sequence with one step per parameter tensor.
    """
    params = list(params)
    steps = list(eps) if np.ndim(eps) else [eps] * len(params)
    if len(steps) != len(params) or min(steps, default=1) <= 0:
        raise ValueError("eps must be positive, one value or one per parameter")
    first = f()
    if f().data.tobytes() != first.data.tobytes():
        raise NonDeterministicFunction("two forward passes at identical inputs differ")

    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    if loss.size != 1:
        raise NotScalarLoss(f"function must return a scalar, got {loss.shape}")
    if tape.nodes:
        backward(loss, tape)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    chosen = set()
    if total <= samples:
        chosen = {(pi, j) for pi, s in enumerate(sizes) for j in range(s)}
    else:
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        for flat in rng.choice(total, size=samples, replace=False):
            pi = int(np.searchsorted(offsets, flat, side="right") - 1)
            chosen.add((pi, int(flat - offsets[pi])))
    if per_param:
        for pi, s in enumerate(sizes):
            have = sum(1 for c in chosen if c[0] == pi)
            if have < min(per_param, s):
                pool = [j for j in range(s) if (pi, j) not in chosen]
                extra = rng.choice(pool, size=min(per_param, s) - have, replace=False)
                chosen.update((pi, int(j)) for j in extra)

    entries = []
    for pi, j in sorted(chosen):
        flat = params[pi].data.reshape(-1)
        orig = flat[j].copy()
        h = steps[pi]
        flat[j] = orig + h
        up = float(f().data.astype(np.float64).sum())
        flat[j] = orig - h
        down = float(f().data.astype(np.float64).sum())
        flat[j] = orig
        numeric = (up - down) / (2 * h)
        a = float(analytic[pi].reshape(-1)[j])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        entries.append((pi, j, a, numeric, rel))
    max_rel = max((e[4] for e in entries), default=0.0)
    return GradCheckReport(max_rel, max_rel <= tol, len(entries), tol, eps, entries)
