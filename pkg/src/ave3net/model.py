"""The AV-E3Net enhancement model and its configuration space."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .blocks import DENSE, SKIP, DenseSums, LstmBlock, dense_residual
from .errors import InputTooShort, InvalidConfig, ShapeMismatch
from .nn import (Conv1d, ConvTranspose1d, FullyConnected, LayerNorm, Module,
                 ProjectionBlock)
from .tensor import Tensor
from .video import VideoPath, calibration_frames, frame_timestamps, stack_frames, upsample_replicate

FUSION_MODES = ("none", "single_concat", "multistage_concat", "multistage_gs")


@dataclass(frozen=True)
class ModelConfig:
    audio_features: int = 2048
    hidden: int = 512
    fc_hidden: int = 1024
    audio_lstm_blocks: int = 4
    video_lstm_blocks: int = 4
    dense: bool = True
    fusion: str = "multistage_gs"
    window: int = 320
    hop: int = 160
    video_features: int = 1024
    trunk_channels: tuple = (24, 48, 96, 192)
    trunk_units: tuple = (4, 8, 4)
    roi_size: int = 50
    sample_rate: int = 16000
    fps: int = 25

    def __post_init__(self):
        object.__setattr__(self, "trunk_channels", tuple(self.trunk_channels))
        object.__setattr__(self, "trunk_units", tuple(self.trunk_units))

    @property
    def multistage(self):
        return self.fusion.startswith("multistage")

    @property
    def uses_video(self):
        return self.fusion != "none"

    def validate(self):
        if self.fusion not in FUSION_MODES:
            raise InvalidConfig(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.multistage and self.video_lstm_blocks != self.audio_lstm_blocks:
            raise InvalidConfig("multistage fusion pairs every audio LSTM block with a video LSTM block; "
                                f"got {self.audio_lstm_blocks} audio vs {self.video_lstm_blocks} video")
        if self.fusion == "none" and self.video_lstm_blocks:
            raise InvalidConfig("an audio-only model cannot have video LSTM blocks")
        for name in ("audio_features", "hidden", "fc_hidden", "window", "hop", "video_features",
                     "roi_size", "sample_rate", "fps"):
            if getattr(self, name) <= 0:
                raise InvalidConfig(f"{name} must be positive")
        if self.audio_lstm_blocks < 0 or self.video_lstm_blocks < 0:
            raise InvalidConfig("block counts must be non-negative")
        if self.hop > self.window:
            raise InvalidConfig("hop must not exceed the window")
        if self.sample_rate % self.hop:
            raise InvalidConfig("hop must divide the sample rate")
        if len(self.trunk_channels) != len(self.trunk_units) + 1:
            raise InvalidConfig("trunk_channels needs the stem width plus one width per stage")
        return self

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["trunk_channels"] = list(self.trunk_channels)
        d["trunk_units"] = list(self.trunk_units)
        return d


PRESETS = {
    "ao-e3net": ModelConfig(fusion="none", dense=False, video_lstm_blocks=0),
    "naive-av": ModelConfig(fusion="single_concat", dense=False, video_lstm_blocks=0),
    "naive-av-1v": ModelConfig(fusion="single_concat", dense=False, video_lstm_blocks=1),
    "naive-av-4v": ModelConfig(fusion="single_concat", dense=False, video_lstm_blocks=4),
    "av-dense": ModelConfig(fusion="single_concat", dense=True, video_lstm_blocks=0),
    "av-dense-1v": ModelConfig(fusion="single_concat", dense=True, video_lstm_blocks=1),
    "av-dense-4v": ModelConfig(fusion="single_concat", dense=True, video_lstm_blocks=4),
    "av-ms-concat": ModelConfig(fusion="multistage_concat", dense=True, video_lstm_blocks=4),
    "av-gs": ModelConfig(fusion="multistage_gs", dense=True, video_lstm_blocks=4),
}


def preset(name):
    try:
        return PRESETS[name]
    except KeyError:
        raise InvalidConfig(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def toy_config(cfg, blocks=2):
    """Shrink a configuration to gradient-check scale, keeping its topology."""
    video = 0
    if cfg.uses_video:
        video = blocks if cfg.multistage else min(cfg.video_lstm_blocks, blocks)
    return dataclasses.replace(
        cfg, audio_features=16, hidden=8, fc_hidden=16, audio_lstm_blocks=blocks,
        video_lstm_blocks=video, video_features=16, trunk_channels=(4, 8, 8, 16),
        trunk_units=(1, 1, 1))


class ConcatFusionBlock(Module):
    """concat(audio, video) -> projection -> skip/dense residual anchored on the audio input."""

    def __init__(self, hidden, rng, mode=DENSE, dtype=np.float32):
        self.proj = ProjectionBlock(2 * hidden, hidden, rng, dtype)
        self.norm = LayerNorm(hidden, dtype)
        self.mode = mode

    def __call__(self, fa, fv, sums):
        if fa.shape != fv.shape:
            raise ShapeMismatch(f"fusion inputs differ: {fa.shape} vs {fv.shape}")
        f_out = self.proj(T.concat([fa, fv], axis=-1))
        return dense_residual(f_out, fa, sums, self.mode, "a", self.norm)


class GsFusionBlock(Module):
    """Gating-and-summation fusion.

    gate = sigmoid(g(relu(h([fa; fv])))), gated = gate * fa, then the dense sum
    absorbs fa and the output is norm(proj(gated) + X_a).
    """

    def __init__(self, hidden, rng, mode=DENSE, dtype=np.float32):
        self.h = FullyConnected(2 * hidden, hidden, rng, dtype)
        self.g = FullyConnected(hidden, hidden, rng, dtype)
        self.proj = ProjectionBlock(hidden, hidden, rng, dtype)
        self.norm = LayerNorm(hidden, dtype)
        self.mode = mode

    def gate(self, fa, fv):
        if fa.shape != fv.shape:
            raise ShapeMismatch(f"fusion inputs differ: {fa.shape} vs {fv.shape}")
        return T.sigmoid(self.g(T.relu(self.h(T.concat([fa, fv], axis=-1)))))

    def __call__(self, fa, fv, sums):
        gated = self.gate(fa, fv) * fa
        return dense_residual(self.proj(gated), fa, sums, self.mode, "a", self.norm)


@dataclass
class StreamState:
    """Recurrent state carried between frame batches of one stream."""

    audio: list
    video: list

    def copy(self):
        return StreamState([(h.copy(), c.copy()) for h, c in self.audio],
                           [(h.copy(), c.copy()) for h, c in self.video])


@dataclass
class _Timer:
    totals: dict = field(default_factory=dict)

    def add(self, key, seconds):
        self.totals[key] = self.totals.get(key, 0.0) + seconds


class AVE3Net(Module):
    """Audio encoder, masking network with optional audio-visual fusion, audio decoder.

    Parameter order (and therefore checkpoint order) follows the signal path:
    encoder, encoder norm, projection, fusion blocks, audio LSTM blocks, mask,
    decoder, then the video path.
    """

    def __init__(self, cfg, seed=0, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        mode = DENSE if cfg.dense else SKIP
        A, H = cfg.audio_features, cfg.hidden
        self.encoder = Conv1d(1, A, cfg.window, cfg.hop, rng, dtype)
        self.enc_norm = LayerNorm(A, dtype)
        self.projection = ProjectionBlock(A, H, rng, dtype)
        if cfg.fusion == "single_concat":
            self.fusion = [ConcatFusionBlock(H, rng, mode, dtype)]
        elif cfg.fusion == "multistage_concat":
            self.fusion = [ConcatFusionBlock(H, rng, mode, dtype) for _ in range(cfg.audio_lstm_blocks + 1)]
        elif cfg.fusion == "multistage_gs":
            self.fusion = [GsFusionBlock(H, rng, mode, dtype) for _ in range(cfg.audio_lstm_blocks + 1)]
        else:
            self.fusion = []
        self.audio_blocks = [LstmBlock(H, cfg.fc_hidden, rng, mode, dtype) for _ in range(cfg.audio_lstm_blocks)]
        self.mask = FullyConnected(H, A, rng, dtype)
        self.decoder = ConvTranspose1d(A, 1, cfg.window, cfg.hop, rng, dtype)
        if cfg.uses_video:
            self.video = VideoPath(rng, H, cfg.fc_hidden, cfg.video_lstm_blocks, cfg.dense,
                                   cfg.trunk_channels, cfg.trunk_units, cfg.video_features,
                                   cfg.roi_size, dtype)
            self.video.trunk.calibrate(calibration_frames(seed, size=cfg.roi_size))
        else:
            self.video = None

    @property
    def dtype(self):
        return self.mask.weight.dtype

    def zero_state(self):
        return StreamState([b.zero_state() for b in self.audio_blocks],
                           self.video.zero_states() if self.video is not None else [])

    # -- stages --------------------------------------------------------------

    def encode(self, frames):
        """Audio frames [F x window] -> encoder features [F x audio_features]."""
        return self.encoder.forward_frames(frames)

    def masking_network(self, enc, vfeat=None, state=None, prof=None):
        """Encoder features [F x A] (+ aligned video features [F x H]) -> (mask [F x A], new state)."""
        cfg = self.cfg
        clock = time.perf_counter if prof is not None else None
        if cfg.uses_video and vfeat is None:
            raise InvalidConfig("this configuration needs video features")
        if not cfg.uses_video and vfeat is not None:
            raise InvalidConfig("audio-only configuration does not accept video input")
        state = state if state is not None else self.zero_state()
        t0 = clock() if clock else 0.0
        x = self.projection(self.enc_norm(T.relu(enc)))
        sums = DenseSums()
        audio_states, video_states = [], []

        def timed(key, fn, *args):
            if clock is None:
                return fn(*args)
            s = clock()
            out = fn(*args)
            prof.add(key, clock() - s)
            return out

        if cfg.fusion == "none":
            for n, block in enumerate(self.audio_blocks):
                x, st = block(x, sums, state.audio[n])
                audio_states.append(st)
        elif cfg.fusion == "single_concat":
            v, video_states = timed("video_lstm", self.video.lstm_forward, vfeat, state.video)
            x = timed("fusion", self.fusion[0], x, v, sums)
            for n, block in enumerate(self.audio_blocks):
                x, st = block(x, sums, state.audio[n])
                audio_states.append(st)
        else:
            v = vfeat
            vsums = DenseSums()
            for n, block in enumerate(self.audio_blocks):
                x = timed("fusion", self.fusion[n], x, v, sums)
                x, st = block(x, sums, state.audio[n])
                audio_states.append(st)
                v, vst = timed("video_lstm", self.video.block_step, n, v, vsums, state.video[n])
                video_states.append(vst)
            x = timed("fusion", self.fusion[-1], x, v, sums)
        mask = T.sigmoid(self.mask(x))
        if clock:
            prof.add("audio_stack", clock() - t0)
        return mask, StreamState(audio_states, video_states)

    def decode_frames(self, masked):
        """Masked features [F x A] -> per-frame waveform contributions [F x window] (no bias)."""
        return self.decoder.synth_frames(masked).reshape(masked.shape[0], self.cfg.window)

    def video_features(self, rois, n_frames, first_frame=0):
        """Encode ROI frames (25 fps from t=0) and hold them onto audio frames.

        Returns [n_frames x hidden] for audio frames ``first_frame ...``.
        """
        cfg = self.cfg
        pixels = stack_frames(rois, cfg.roi_size) if rois is not None else stack_frames([], cfg.roi_size)
        feats = self.video.encode_frames(pixels) if len(pixels) else Tensor(np.zeros((0, cfg.hidden), self.dtype))
        vtimes = frame_timestamps(len(pixels), cfg.sample_rate, cfg.fps)
        atimes = [(first_frame + f) * cfg.hop for f in range(n_frames)]
        return upsample_replicate(feats, vtimes, atimes, self.video.blank_feature())

    # -- whole utterance -------------------------------------------------------

    def forward_utterance(self, audio, roi=None, force_mask=None):
        """Enhance a whole signal in one pass.

        ``audio`` [T] (array or Tensor, T >= window); ``roi`` is a list of
        RoiFrame / array [V x 1 x S x S] at 25 fps starting at t=0. Output has
        (F-1)*hop + window samples for F = (T - window)//hop + 1 frames.
        ``force_mask`` (a float) replaces the predicted mask, for wiring tests.
        """
        cfg = self.cfg
        x = audio if isinstance(audio, Tensor) else Tensor(np.asarray(audio, dtype=self.dtype))
        if x.ndim != 1:
            raise ShapeMismatch(f"audio must be 1-D, got {x.shape}")
        if x.shape[0] < cfg.window:
            raise InputTooShort(f"need at least {cfg.window} samples, got {x.shape[0]}")
        has_roi = roi is not None and len(roi) > 0
        if has_roi and not cfg.uses_video:
            raise InvalidConfig("ROI frames supplied to an audio-only configuration")
        enc = self.encode(T.frame(x, cfg.window, cfg.hop))
        vfeat = self.video_features(roi, enc.shape[0]) if cfg.uses_video else None
        mask, _ = self.masking_network(enc, vfeat)
        if force_mask is not None:
            mask = Tensor(np.full(mask.shape, force_mask, self.dtype))
        out = T.overlap_add(self.decode_frames(mask * enc), cfg.hop)
        return out + self.decoder.bias


def build_model(cfg, seed=0, dtype=np.float32):
    return AVE3Net(cfg, seed, dtype)


def init_decoder_pseudo_inverse(model):
    """Set the decoder so that decode(encode(x)) reproduces x (unit mask).

    Each frame is recovered with the pseudo-inverse of the encoder filters and
    scaled by hop/window so that the overlap-add of interior samples is exact.
    """
    w = model.encoder.weight.data.reshape(model.cfg.audio_features, -1).astype(np.float64)
    pinv = np.linalg.pinv(w)  # [window x A]
    scale = model.cfg.hop / model.cfg.window
    dec = (pinv.T * scale).reshape(model.decoder.weight.shape)
    # the encoder bias leaks through the inverse as a hop-periodic offset; cancel its mean
    hop, win = model.cfg.hop, model.cfg.window
    leak = pinv @ model.encoder.bias.data.astype(np.float64) * scale
    periodic = sum(leak[j * hop:(j + 1) * hop] for j in range(win // hop)) if win % hop == 0 else leak
    leak = float(np.mean(periodic))
    model.decoder.weight.data = dec.astype(model.dtype)
    model.decoder.bias.data = np.array([-leak], model.dtype)
    return model


def param_report(cfg, seed=0):
    """Per-submodule parameter counts plus the total, as a list of (name, count) rows."""
    model = AVE3Net(cfg, seed)
    rows = [("encoder", model.encoder.param_count()),
            ("encoder_norm", model.enc_norm.param_count()),
            ("projection", model.projection.param_count())]
    for i, block in enumerate(model.fusion):
        rows.append((f"fusion.{i}", block.param_count()))
    for i, block in enumerate(model.audio_blocks):
        rows.append((f"audio_blocks.{i}", block.param_count()))
    rows.append(("mask", model.mask.param_count()))
    rows.append(("decoder", model.decoder.param_count()))
    if model.video is not None:
        rows.append(("video.trunk", model.video.trunk.param_count()))
        rows.append(("video.projection", model.video.projection.param_count()))
        for i, block in enumerate(model.video.blocks):
            rows.append((f"video.blocks.{i}", block.param_count()))
    total = sum(c for _, c in rows)
    assert total == model.param_count()
    return rows, total
