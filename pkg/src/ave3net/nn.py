"""Layers shared by the audio and video paths."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import InputTooShort, NotDivisible, ShapeMismatch
from .tensor import Tensor

LN_EPS = 1e-5
PRELU_INIT = 0.25


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class Module:
    """Container whose parameters are discovered in attribute-assignment order.

    Attributes that are trainable tensors become parameters; attributes that are
    modules (or lists of modules) are recursed into with dotted names. Plain
    numpy arrays are buffers: saved with the weights, never trained or counted.
    """

    def _walk(self, prefix):
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Module):
                yield from value._walk(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item._walk(f"{name}.{i}.")
            else:
                yield self, key, name, value

    def named_parameters(self, prefix=""):
        for _, _, name, value in self._walk(prefix):
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value

    def named_buffers(self, prefix=""):
        """(name, owner, attribute) for every numpy-array attribute."""
        for owner, key, name, value in self._walk(prefix):
            if isinstance(value, np.ndarray):
                yield name, owner, key

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def param_count(self):
        return sum(p.size for p in self.parameters())

    def astype(self, dtype):
        """Cast every parameter in place (e.g. to float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for _, owner, key in self.named_buffers():
            setattr(owner, key, getattr(owner, key).astype(dtype))
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def param_count(obj):
    """Exact number of trainable scalars in a layer, composite, tensor, or list of them."""
    if isinstance(obj, Module):
        return obj.param_count()
    if isinstance(obj, Tensor):
        return obj.size if obj.requires_grad else 0
    if isinstance(obj, (list, tuple)):
        return sum(param_count(o) for o in obj)
    return 0


class FullyConnected(Module):
    def __init__(self, n_in, n_out, rng, dtype=np.float32, bias=True):
        self.weight = _uniform(rng, (n_out, n_in), n_in, dtype)
        self.bias = _uniform(rng, (n_out,), n_in, dtype) if bias else None

    @property
    def n_in(self):
        return self.weight.shape[1]

    @property
    def n_out(self):
        return self.weight.shape[0]

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim, dtype=np.float32, eps=LN_EPS):
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.gamma = Tensor(np.ones(dim, dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype), requires_grad=True)
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class PReLU(Module):
    """PReLU with one slope shared by all channels."""

    def __init__(self, dtype=np.float32, init=PRELU_INIT):
        self.alpha = Tensor(np.array([init], dtype), requires_grad=True)

    def __call__(self, x):
        return T.prelu(x, self.alpha)


class ProjectionBlock(Module):
    """Fully connected layer, shared-slope PReLU, then layer normalization."""

    def __init__(self, n_in, n_out, rng, dtype=np.float32):
        self.fc = FullyConnected(n_in, n_out, rng, dtype)
        self.act = PReLU(dtype)
        self.norm = LayerNorm(n_out, dtype)

    def __call__(self, x):
        return self.norm(self.act(self.fc(x)))


class Conv1d(Module):
    """Strided valid cross-correlation; weight [out_ch x in_ch x kernel]."""

    def __init__(self, in_ch, out_ch, kernel, stride, rng, dtype=np.float32):
        self.weight = _uniform(rng, (out_ch, in_ch, kernel), in_ch * kernel, dtype)
        self.bias = _uniform(rng, (out_ch,), in_ch * kernel, dtype)
        self.kernel = kernel
        self.stride = stride

    def frames(self, x):
        """Signal [in_ch x T] (or [T] when in_ch == 1) -> frames [F x in_ch*kernel]."""
        if x.shape[-1] < self.kernel:
            raise InputTooShort(f"need at least {self.kernel} samples, got {x.shape[-1]}")
        fr = T.frame(x, self.kernel, self.stride)
        return fr.reshape(fr.shape[0], -1)

    def forward_frames(self, frames):
        """Frames [F x in_ch*kernel] -> features [F x out_ch] (time-major)."""
        w = self.weight.reshape(self.weight.shape[0], -1)
        return T.linear(frames, w, self.bias)

    def __call__(self, x):
        """x [in_ch x T] -> [out_ch x F]."""
        if x.ndim == 1:
            x = x.reshape(1, -1)
        if x.shape[0] != self.weight.shape[1]:
            raise ShapeMismatch(f"expected {self.weight.shape[1]} input channels, got {x.shape[0]}")
        return self.forward_frames(self.frames(x)).T


class ConvTranspose1d(Module):
    """Transposed convolution (overlap-add synthesis); weight [in_ch x out_ch x kernel]."""

    def __init__(self, in_ch, out_ch, kernel, stride, rng, dtype=np.float32):
        self.weight = _uniform(rng, (in_ch, out_ch, kernel), out_ch * kernel, dtype)
        self.bias = _uniform(rng, (out_ch,), out_ch * kernel, dtype)
        self.kernel = kernel
        self.stride = stride

    def synth_frames(self, x):
        """Time-major features [F x in_ch] -> per-frame contributions [F x out_ch x kernel]."""
        in_ch, out_ch, k = self.weight.shape
        w = self.weight.reshape(in_ch, out_ch * k)
        return (x @ w).reshape(x.shape[0], out_ch, k)

    def __call__(self, x):
        """x [in_ch x F] -> [out_ch x ((F-1)*stride + kernel)]."""
        if x.ndim != 2 or x.shape[0] != self.weight.shape[0] or x.shape[1] < 1:
            raise ShapeMismatch(f"expected [{self.weight.shape[0]} x F], got {x.shape}")
        y = T.overlap_add(self.synth_frames(x.T), self.stride)
        return T.add_bias(y.T, self.bias).T


class LstmLayer(Module):
    """Unidirectional LSTM, gate rows ordered (input, forget, cell, output)."""

    def __init__(self, n_in, hidden, rng, dtype=np.float32):
        self.w = _uniform(rng, (4 * hidden, n_in), hidden, dtype)
        self.u = _uniform(rng, (4 * hidden, hidden), hidden, dtype)
        self.b = _uniform(rng, (4 * hidden,), hidden, dtype)

    @property
    def hidden(self):
        return self.u.shape[1]

    def zero_state(self):
        d = self.hidden
        return np.zeros(d, self.u.dtype), np.zeros(d, self.u.dtype)

    def __call__(self, x, state=None):
        """Sequence [T x in] -> (outputs [T x d], final (h, c))."""
        h0, c0 = state if state is not None else (None, None)
        return T.lstm_sequence(x, self.w, self.u, self.b, h0, c0)

    def step(self, x, state):
        """One time step: x [in] -> (y [d], (h', c'))."""
        if x.shape != (self.w.shape[1],):
            raise ShapeMismatch(f"lstm input must be ({self.w.shape[1]},), got {x.shape}")
        h, c = state
        if np.shape(h) != (self.hidden,) or np.shape(c) != (self.hidden,):
            raise ShapeMismatch("lstm state dims do not match the hidden size")
        y, new_state = T.lstm_sequence(x.reshape(1, -1), self.w, self.u, self.b, h, c)
        return y.reshape(self.hidden), new_state


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding=0, bias=False, dtype=np.float32):
        fan_in = in_ch * kernel * kernel
        self.weight = _uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in, dtype)
        self.bias = _uniform(rng, (out_ch,), fan_in, dtype) if bias else None
        self.stride = stride
        self.padding = padding

    @property
    def out_channels(self):
        return self.weight.shape[0]

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class DepthwiseConv2d(Module):
    def __init__(self, channels, kernel, rng, stride=1, padding=0, dtype=np.float32):
        self.weight = _uniform(rng, (channels, 1, kernel, kernel), kernel * kernel, dtype)
        self.stride = stride
        self.padding = padding

    def __call__(self, x):
        return T.depthwise_conv2d(x, self.weight, self.stride, self.padding)


class FrozenBatchNorm2d(Module):
    """Batch norm with fixed running statistics and trainable affine terms.

    Statistics never come from the current batch, so a frame's output does not
    depend on other frames.
    """

    def __init__(self, channels, dtype=np.float32, eps=LN_EPS):
        self.gamma = Tensor(np.ones(channels, dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype)
        self.running_var = np.ones(channels, dtype)
        self._eps = eps
        self._calibrating = False

    def __call__(self, x):
        if self._calibrating:
            axes = (0,) + tuple(range(2, x.ndim))
            d = x.data.astype(np.float64)
            self.running_mean = d.mean(axis=axes).astype(self.running_mean.dtype)
            self.running_var = d.var(axis=axes).astype(self.running_var.dtype)
        inv = Tensor((1.0 / np.sqrt(self.running_var + self._eps)).astype(x.dtype))
        scale = self.gamma * inv
        shift = self.beta - scale * Tensor(self.running_mean.astype(x.dtype))
        return T.channel_affine(x, scale, shift)


def channel_shuffle(x, groups):
    """Interleave channel groups: [g*c, ...] -> reshape [g, c] -> transpose -> flatten.

    Accepts [C x H x W] or [N x C x H x W].
    """
    batched = x.ndim == 4
    if not batched:
        x = x.reshape((1,) + x.shape)
    n, ch = x.shape[0], x.shape[1]
    if ch % groups:
        raise NotDivisible(f"{ch} channels not divisible by {groups} groups")
    rest = x.shape[2:]
    y = x.reshape((n, groups, ch // groups) + rest)
    y = y.transpose(0, 2, 1, *range(3, 3 + len(rest)))
    y = y.reshape((n, ch) + rest)
    return y if batched else y.reshape((ch,) + rest)
