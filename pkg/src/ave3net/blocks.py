"""Residual LSTM blocks and the dense-sum bookkeeping shared by both modalities.

A block computes ``f(x)`` and closes with a layer norm over either a plain skip
(``norm(f(x) + x)``) or a dense shortcut (``X <- X + x; norm(f(x) + X)``),
where ``X`` is the running sum of every dense block input seen so far at the
same time step. The sums run across depth, not time: they restart for every
frame, so they carry no state between frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch
from .nn import FullyConnected, LayerNorm, LstmLayer, Module, PReLU
from .tensor import Tensor

SKIP = "skip"
DENSE = "dense"


@dataclass
class DenseSums:
    """Running dense-sum accumulators: ``a`` for the audio stack, ``v`` for video."""

    a: Tensor | None = None
    v: Tensor | None = None

    def accumulate(self, which, x):
        current = getattr(self, which)
        if current is not None and current.shape != x.shape:
            raise ShapeMismatch(f"dense sum {which}: {current.shape} vs {x.shape}")
        updated = x if current is None else current + x
        setattr(self, which, updated)
        return updated


def dense_residual(f_out, x_n, sums, mode, which, norm):
    """Close a block: ``norm(f_out + x_n)`` (skip) or ``norm(f_out + X)`` after ``X += x_n`` (dense)."""
    if f_out.shape != x_n.shape:
        raise ShapeMismatch(f"residual: block output {f_out.shape} vs input {x_n.shape}")
    if mode == SKIP:
        return norm(f_out + x_n)
    if mode != DENSE:
        raise ValueError(f"unknown connection mode {mode!r}")
    return norm(f_out + sums.accumulate(which, x_n))


class LstmBlock(Module):
    """FC (d -> fc_hidden) -> PReLU -> FC (fc_hidden -> d) -> LSTM(d), closed by a skip or dense residual."""

    def __init__(self, dim, fc_hidden, rng, mode=DENSE, dtype=np.float32):
        self.fc1 = FullyConnected(dim, fc_hidden, rng, dtype)
        self.act = PReLU(dtype)
        self.fc2 = FullyConnected(fc_hidden, dim, rng, dtype)
        self.lstm = LstmLayer(dim, dim, rng, dtype)
        self.norm = LayerNorm(dim, dtype)
        self.mode = mode

    def zero_state(self):
        return self.lstm.zero_state()

    def transform(self, x, state=None):
        """The block body f(x) without the residual; returns (f(x), lstm state)."""
        return self.lstm(self.fc2(self.act(self.fc1(x))), state)

    def __call__(self, x, sums, state=None, which="a"):
        f_out, new_state = self.transform(x, state)
        return dense_residual(f_out, x, sums, self.mode, which, self.norm), new_state
