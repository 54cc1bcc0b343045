"""Causal frame-by-frame execution of an :class:`AVE3Net` model.

A :class:`Session` buffers audio into 20 ms windows at a 10 ms hop, runs every
complete frame through the model while carrying LSTM state, and overlap-adds
the decoder output. A sample is released only once every frame that touches it
has been decoded, so the algorithmic latency is exactly one window.
"""

from __future__ import annotations

import time

import numpy as np

from . import tensor as T
from .errors import AlreadyFinished, InvalidConfig, SessionPoisoned, TimestampRegression
from .tensor import Tensor
from .video import RoiFrame, frame_timestamps, replicate_indices, stack_frames


class Framer:
    """Accumulates samples and emits complete analysis windows."""

    def __init__(self, window=320, hop=160):
        if hop <= 0 or window < hop:
            raise ValueError("need 0 < hop <= window")
        self.window = window
        self.hop = hop
        self.pending = np.zeros(0, np.float32)
        self.emitted = 0

    def push(self, samples):
        """Append samples; return the newly complete frames as [n x window]."""
        buf = np.concatenate([self.pending, np.asarray(samples, np.float32).reshape(-1)])
        if len(buf) < self.window:
            self.pending = buf
            return np.zeros((0, self.window), np.float32)
        n = (len(buf) - self.window) // self.hop + 1
        view = np.lib.stride_tricks.sliding_window_view(buf, self.window)[::self.hop][:n]
        frames = np.array(view)
        self.pending = buf[n * self.hop:]
        self.emitted += n
        return frames

    def reset(self):
        self.pending = np.zeros(0, np.float32)
        self.emitted = 0


def padded_length(n, window=320, hop=160):
    """Length after zero-padding ``n`` samples up to a whole number of frames."""
    if n == 0:
        return 0
    if n <= window:
        return window
    return window + -(-(n - window) // hop) * hop


class Session:
    """Streaming enhancement state for one audio(+video) stream.

    ``push`` accepts audio chunks of any length plus ROI frames as
    ``(timestamp_in_samples, RoiFrame)`` pairs with non-decreasing timestamps.
    Each ROI applies from its timestamp onward (zero-order hold); audio frames
    before the first ROI use the blank-frame feature.
    """

    def __init__(self, model, profile=None):
        self.model = model
        self.cfg = model.cfg
        self.profile = profile
        self.reset()

    def reset(self):
        cfg = self.cfg
        self.framer = Framer(cfg.window, cfg.hop)
        self.state = self.model.zero_state()
        self.tail = np.zeros(cfg.window - cfg.hop, self.model.dtype)
        self.frames_done = 0
        self.samples_in = 0
        self.samples_out = 0
        self.finished = False
        self._poison = None
        self._last_ts = None
        if self.cfg.uses_video:
            self._held_times = [-1]
            self._held_feats = [self.model.video.blank_feature().data[0]]
        self._bias = self.model.decoder.bias.data.reshape(())

    def _check_usable(self):
        if self._poison is not None:
            raise SessionPoisoned(self._poison)
        if self.finished:
            raise AlreadyFinished("session already flushed; call reset() to reuse it")

    def _add_rois(self, rois):
        rois = list(rois)
        if not rois:
            return
        if not self.cfg.uses_video:
            raise InvalidConfig("ROI frames supplied to an audio-only configuration")
        times = []
        for ts, _ in rois:
            ts = int(ts)
            if self._last_ts is not None and ts < self._last_ts:
                raise TimestampRegression(f"ROI timestamp {ts} after {self._last_ts}")
            self._last_ts = ts
            times.append(ts)
        pixels = stack_frames([f if isinstance(f, RoiFrame) else RoiFrame(f) for _, f in rois],
                              self.cfg.roi_size)
        start = time.perf_counter()
        feats = self.model.video.encode_frames(pixels).data
        if self.profile is not None:
            self.profile.add("video_trunk", time.perf_counter() - start)
        self._held_times.extend(times)
        self._held_feats.extend(feats)

    def _video_rows(self, first, n):
        atimes = [(first + i) * self.cfg.hop for i in range(n)]
        idx = replicate_indices(self._held_times, atimes)
        rows = np.stack([self._held_feats[i] for i in idx])
        keep = int(idx[-1])
        self._held_times = self._held_times[keep:]
        self._held_feats = self._held_feats[keep:]
        return Tensor(rows)

    def _process(self, frames):
        n = frames.shape[0]
        model = self.model
        enc = model.encode(Tensor(frames.astype(model.dtype, copy=False)))
        vfeat = self._video_rows(self.frames_done, n) if self.cfg.uses_video else None
        mask, state = model.masking_network(enc, vfeat, self.state, prof=self.profile)
        contrib = model.decode_frames(mask * enc).data
        hop, win = self.cfg.hop, self.cfg.window
        buf = T._overlap_add(contrib, hop)
        buf[:win - hop] += self.tail
        out = buf[:n * hop] + self._bias
        if not (np.all(np.isfinite(out)) and np.all(np.isfinite(buf))):
            self._poison = f"non-finite activation in frames {self.frames_done}..{self.frames_done + n - 1}"
            raise SessionPoisoned(self._poison)
        self.state = state
        self.tail = buf[n * hop:].copy()
        self.frames_done += n
        self.samples_out += len(out)
        return out

    def push(self, chunk, rois=()):
        """Feed audio (and ROI frames); return every output sample now fully determined."""
        self._check_usable()
        chunk = np.asarray(chunk, np.float32).reshape(-1)
        self._add_rois(rois)
        self.samples_in += len(chunk)
        frames = self.framer.push(chunk)
        if len(frames) == 0:
            return np.zeros(0, self.model.dtype)
        return self._process(frames)

    def flush(self):
        """Zero-pad the final frame, emit the overlap-add tail, and finish the session."""
        self._check_usable()
        pad = padded_length(self.samples_in, self.cfg.window, self.cfg.hop) - self.samples_in
        self.finished = True
        if self.samples_in == 0:
            return np.zeros(0, self.model.dtype)
        frames = self.framer.push(np.zeros(pad, np.float32))
        head = self._process(frames) if len(frames) else np.zeros(0, self.model.dtype)
        tail = self.tail + self._bias
        self.samples_out += len(tail)
        self.tail = np.zeros_like(self.tail)
        return np.concatenate([head, tail])


def roi_schedule(rois, sample_rate=16000, fps=25):
    """Pair ROI frames at ``fps`` from t=0 with their timestamps in samples."""
    frames = list(rois) if rois is not None else []
    return list(zip(frame_timestamps(len(frames), sample_rate, fps), frames))


def enhance_offline(model, audio, roi=None):
    """Whole-signal enhancement; pads like a flushed session and trims to the input length."""
    audio = np.asarray(audio, np.float32).reshape(-1)
    n = len(audio)
    if n == 0:
        return np.zeros(0, np.float32)
    total = padded_length(n, model.cfg.window, model.cfg.hop)
    padded = np.concatenate([audio, np.zeros(total - n, np.float32)])
    if roi is not None and isinstance(roi, np.ndarray) and roi.ndim == 4:
        roi = [RoiFrame(r) for r in roi]
    out = model.forward_utterance(padded, roi if roi else None).data
    return out[:n]


def enhance_streaming(model, audio, roi=None, chunk_sizes=None, chunk=160, profile=None):
    """Drive a :class:`Session` over ``audio`` in chunks and return the trimmed output.

    ROI frames are delivered with the first chunk whose end passes their
    timestamp. ``chunk_sizes`` (an iterable of lengths) overrides ``chunk``.
    """
    audio = np.asarray(audio, np.float32).reshape(-1)
    session = Session(model, profile=profile)
    schedule = roi_schedule(roi, model.cfg.sample_rate, model.cfg.fps) if roi is not None else []
    if roi is not None and isinstance(roi, np.ndarray) and roi.ndim == 4:
        schedule = roi_schedule([RoiFrame(r) for r in roi], model.cfg.sample_rate, model.cfg.fps)
    sizes = iter(chunk_sizes) if chunk_sizes is not None else None
    pieces, pos, k = [], 0, 0
    while pos < len(audio):
        size = next(sizes) if sizes is not None else chunk
        size = max(1, min(int(size), len(audio) - pos))
        end = pos + size
        due = []
        while k < len(schedule) and schedule[k][0] < end:
            due.append(schedule[k])
            k += 1
        pieces.append(session.push(audio[pos:end], due))
        pos = end
    if k < len(schedule):
        session.push(np.zeros(0, np.float32), schedule[k:])
    pieces.append(session.flush())
    return np.concatenate(pieces)[:len(audio)]


def causality_probe(model, base_input, perturb_at, roi=None, delta=0.5):
    """Return the first output index that changes when input sample ``perturb_at`` is nudged.

    Returns ``None`` when no output sample changes.
    """
    base = np.asarray(base_input, np.float32).reshape(-1)
    if not 0 <= perturb_at < len(base):
        raise IndexError("perturb_at outside the input")
    moved = base.copy()
    moved[perturb_at] += delta
    a = enhance_offline(model, base, roi)
    b = enhance_offline(model, moved, roi)
    diff = np.nonzero(a != b)[0]
    return int(diff[0]) if len(diff) else None


def video_causality_probe(model, audio, roi, frame_index):
    """First output index that changes when ROI frame ``frame_index`` is altered (or None)."""
    frames = [r if isinstance(r, RoiFrame) else RoiFrame(r) for r in roi]
    altered = list(frames)
    px = frames[frame_index].pixels
    altered[frame_index] = RoiFrame(1.0 - px)
    a = enhance_offline(model, audio, frames)
    b = enhance_offline(model, audio, altered)
    diff = np.nonzero(a != b)[0]
    return int(diff[0]) if len(diff) else None
