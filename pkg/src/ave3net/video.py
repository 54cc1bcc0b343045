"""Mouth-ROI video path: ShuffleNetV2-style trunk, projection, video LSTM blocks,
and zero-order-hold alignment to the audio frame rate."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import DENSE, SKIP, DenseSums, LstmBlock
from .errors import BadFrameShape, ShapeMismatch
from .nn import (Conv2d, DepthwiseConv2d, FrozenBatchNorm2d, Module,
                 ProjectionBlock, channel_shuffle)
from .tensor import Tensor

ROI_SIZE = 50


@dataclass(frozen=True)
class RoiFrame:
    """One grayscale mouth crop, pixels [1 x size x size] in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim == 2:
            px = px[None]
        if px.ndim != 3 or px.shape[0] != 1 or px.shape[1] != px.shape[2]:
            raise BadFrameShape(f"ROI frame must be 1 x S x S, got {px.shape}")
        object.__setattr__(self, "pixels", np.clip(px, 0.0, 1.0))

    @classmethod
    def blank(cls, size=ROI_SIZE):
        return cls(np.zeros((1, size, size), np.float32))

    @property
    def is_blank(self):
        return not np.any(self.pixels)

    @property
    def size(self):
        return self.pixels.shape[-1]


def stack_frames(frames, size=ROI_SIZE):
    """List of RoiFrame (or an array [V x 1 x S x S]) -> float32 array [V x 1 x S x S]."""
    if isinstance(frames, np.ndarray):
        arr = frames.astype(np.float32, copy=False)
        if arr.ndim == 3:
            arr = arr[:, None]
    else:
        frames = list(frames)
        if not frames:
            return np.zeros((0, 1, size, size), np.float32)
        arr = np.stack([f.pixels if isinstance(f, RoiFrame) else RoiFrame(f).pixels for f in frames])
    if arr.ndim != 4 or arr.shape[1:] != (1, size, size):
        raise BadFrameShape(f"expected frames of shape 1 x {size} x {size}, got {arr.shape[1:]}")
    return arr


class ShuffleUnit(Module):
    """ShuffleNetV2 unit: channel split (stride 1) or dual branch (stride 2), concat, shuffle."""

    def __init__(self, in_ch, out_ch, stride, rng, dtype=np.float32):
        if out_ch % 2:
            raise ValueError("ShuffleNetV2 units need an even channel count")
        if stride == 1 and in_ch != out_ch:
            raise ValueError("stride-1 units keep the channel count")
        branch = out_ch // 2
        self.stride = stride
        if stride == 2:
            self.b1_dw = DepthwiseConv2d(in_ch, 3, rng, stride=2, padding=1, dtype=dtype)
            self.b1_bn1 = FrozenBatchNorm2d(in_ch, dtype)
            self.b1_pw = Conv2d(in_ch, branch, 1, rng, dtype=dtype)
            self.b1_bn2 = FrozenBatchNorm2d(branch, dtype)
        b2_in = in_ch if stride == 2 else branch
        self.b2_pw1 = Conv2d(b2_in, branch, 1, rng, dtype=dtype)
        self.b2_bn1 = FrozenBatchNorm2d(branch, dtype)
        self.b2_dw = DepthwiseConv2d(branch, 3, rng, stride=stride, padding=1, dtype=dtype)
        self.b2_bn2 = FrozenBatchNorm2d(branch, dtype)
        self.b2_pw2 = Conv2d(branch, branch, 1, rng, dtype=dtype)
        self.b2_bn3 = FrozenBatchNorm2d(branch, dtype)
        self.out_ch = out_ch

    def _branch2(self, x):
        y = T.relu(self.b2_bn1(self.b2_pw1(x)))
        y = self.b2_bn2(self.b2_dw(y))
        return T.relu(self.b2_bn3(self.b2_pw2(y)))

    def __call__(self, x):
        if self.stride == 1:
            half = x.shape[1] // 2
            left, right = x[:, :half], x[:, half:]
            out = T.concat([left, self._branch2(right)], axis=1)
        else:
            left = T.relu(self.b1_bn2(self.b1_pw(self.b1_bn1(self.b1_dw(x)))))
            out = T.concat([left, self._branch2(x)], axis=1)
        return channel_shuffle(out, 2)


class VideoTrunk(Module):
    """Grayscale ROI [N x 1 x S x S] -> per-frame feature [N x out_features].

    Stem 3x3/2 conv, three stages of ShuffleNetV2 units (first unit of each
    stage has stride 2), a 1x1 conv to ``out_features`` and global average
    pooling. No max-pool after the stem, so a 50x50 crop ends at 4x4.
    """

    def __init__(self, rng, channels=(24, 48, 96, 192), units=(4, 8, 4), out_features=1024,
                 in_channels=1, dtype=np.float32):
        if len(channels) != len(units) + 1:
            raise ValueError("channels must list the stem width plus one width per stage")
        self.stem = Conv2d(in_channels, channels[0], 3, rng, stride=2, padding=1, dtype=dtype)
        self.stem_bn = FrozenBatchNorm2d(channels[0], dtype)
        self.units = []
        in_ch = channels[0]
        for width, count in zip(channels[1:], units):
            for i in range(count):
                unit = ShuffleUnit(in_ch, width, 2 if i == 0 else 1, rng, dtype)
                assert unit.out_ch == width
                self.units.append(unit)
                in_ch = width
        assert in_ch == channels[-1]
        self.last = Conv2d(in_ch, out_features, 1, rng, dtype=dtype)
        self.last_bn = FrozenBatchNorm2d(out_features, dtype)
        self.out_features = out_features

    def __call__(self, x):
        y = T.relu(self.stem_bn(self.stem(x)))
        for unit in self.units:
            y = unit(y)
        y = T.relu(self.last_bn(self.last(y)))
        return T.mean(y, axis=(2, 3))

    def calibrate(self, pixels):
        """Set every frozen batch-norm's statistics from one pass over ``pixels``.

        Layers are calibrated in order, so each sees inputs already normalized
        upstream. Afterwards the statistics stay fixed.
        """
        bns = [m for m in _modules(self) if isinstance(m, FrozenBatchNorm2d)]
        for bn in bns:
            bn._calibrating = True
        try:
            with T.no_grad():
                self(pixels if isinstance(pixels, Tensor) else Tensor(pixels, dtype=self.stem.weight.dtype))
        finally:
            for bn in bns:
                bn._calibrating = False


def _modules(root):
    yield root
    for key, value in vars(root).items():
        items = value if isinstance(value, (list, tuple)) else [value]
        for item in items:
            if isinstance(item, Module):
                yield from _modules(item)


def calibration_frames(seed, count=8, size=ROI_SIZE):
    """Deterministic batch of uniform random frames for batch-norm calibration."""
    rng = np.random.default_rng([seed, 2])
    return rng.random((count, 1, size, size)).astype(np.float32)



class VideoPath(Module):
    """Trunk -> projection to the model width -> optional video LSTM blocks (dense sum V)."""

    def __init__(self, rng, hidden=512, fc_hidden=1024, lstm_blocks=0, dense=True,
                 channels=(24, 48, 96, 192), units=(4, 8, 4), features=1024,
                 roi_size=ROI_SIZE, dtype=np.float32):
        self.trunk = VideoTrunk(rng, channels, units, features, dtype=dtype)
        self.projection = ProjectionBlock(features, hidden, rng, dtype)
        mode = DENSE if dense else SKIP
        self.blocks = [LstmBlock(hidden, fc_hidden, rng, mode, dtype) for _ in range(lstm_blocks)]
        self.roi_size = roi_size
        self.hidden = hidden

    def encode_frames(self, pixels, prof=None):
        """Pixel array or Tensor [V x 1 x S x S] -> projected features [V x hidden]."""
        x = pixels if isinstance(pixels, Tensor) else Tensor(pixels, dtype=self.projection.fc.weight.dtype)
        if x.ndim != 4 or x.shape[1:] != (1, self.roi_size, self.roi_size):
            raise BadFrameShape(f"expected [V x 1 x {self.roi_size} x {self.roi_size}], got {x.shape}")
        return self.projection(self.trunk(x))

    def encode_frame(self, frame):
        """One RoiFrame -> feature [hidden]."""
        px = frame.pixels if isinstance(frame, RoiFrame) else np.asarray(frame)
        if px.shape != (1, self.roi_size, self.roi_size):
            raise BadFrameShape(f"ROI frame must be 1 x {self.roi_size} x {self.roi_size}, got {px.shape}")
        return self.encode_frames(px[None]).reshape(self.hidden)

    def blank_feature(self):
        return self.encode_frames(np.zeros((1, 1, self.roi_size, self.roi_size)))

    def zero_states(self):
        return [b.zero_state() for b in self.blocks]

    def block_step(self, n, v, sums, state=None):
        """Run video LSTM block ``n`` on [F x hidden] features, updating dense sum V."""
        return self.blocks[n](v, sums, state, which="v")

    def lstm_forward(self, f, states=None, sums=None):
        """Run all video LSTM blocks over [F x hidden]; returns (features, states)."""
        if f.shape[-1] != self.hidden:
            raise ShapeMismatch(f"video features must have width {self.hidden}")
        sums = DenseSums() if sums is None else sums
        states = states if states is not None else [None] * len(self.blocks)
        new_states = []
        for n in range(len(self.blocks)):
            f, st = self.block_step(n, f, sums, states[n])
            new_states.append(st)
        return f, new_states


def frame_timestamps(count, sample_rate=16000, fps=25):
    """Sample index at which each of ``count`` video frames starts."""
    return [(k * sample_rate) // fps for k in range(count)]


def replicate_indices(video_times, audio_times):
    """For each audio time, index of the latest video frame at or before it (-1 if none)."""
    vt = np.asarray(video_times, dtype=np.int64)
    if vt.size > 1 and np.any(np.diff(vt) < 0):
        raise ValueError("video timestamps must be non-decreasing")
    return np.searchsorted(vt, np.asarray(audio_times, dtype=np.int64), side="right") - 1


def upsample_replicate(video_feats, video_times, audio_times, blank_feat):
    """Sample-and-hold video features onto audio frames.

    ``video_feats`` [V x d], ``blank_feat`` [1 x d] (used before the first video
    frame). Returns [len(audio_times) x d].
    """
    idx = replicate_indices(video_times, audio_times) + 1
    if not isinstance(video_feats, Tensor):
        video_feats = Tensor(np.asarray(video_feats))
    if not isinstance(blank_feat, Tensor):
        blank_feat = Tensor(np.asarray(blank_feat))
    blank_feat = blank_feat.reshape(1, -1)
    if video_feats.shape[0] == 0:
        table = blank_feat
    else:
        table = T.concat([blank_feat, video_feats], axis=0)
    return table[idx]
