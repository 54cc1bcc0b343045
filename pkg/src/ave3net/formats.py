"""File formats: WAV audio, ROI frame streams, weight checkpoints, JSON run configs.

All binary layouts are little-endian.

Weight file::

    b"AVE3" | version u32 | entry count u32 | entries...
    entry: name length u16 | name utf-8 | rank u8 | dims u32 * rank | f32 data (row-major)

LSTM tensors (``*.lstm.w``, ``*.lstm.u``, ``*.lstm.b``) stack their gate rows
in the order input, forget, cell, output.

ROI file::

    b"ROI0" | fps u16 | frame count u32 | width u16 | height u16 | frames...
    frame: blank flag u8 | width*height u8 pixels (value / 255 in [0, 1])

A set blank flag requires every pixel byte of that frame to be zero.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (BadMagic, CorruptHeader, DataError, InvalidConfig, ShapeMismatch,
                     UnexpectedEof, UnknownTensor, UnsupportedFormat, UnsupportedSampleRate)
from .model import ModelConfig, preset, toy_config
from .video import RoiFrame

WEIGHT_MAGIC = b"AVE3"
WEIGHT_VERSION = 1
ROI_MAGIC = b"ROI"
ROI_VERSION = 0
SAMPLE_RATE = 16000

_PCM = 1
_FLOAT = 3
_EXTENSIBLE = 0xFFFE


# -- WAV --------------------------------------------------------------------------


def wav_read(path, expected_rate=SAMPLE_RATE):
    """Read a mono PCM16 or IEEE-float32 WAV; returns (float32 samples, sample rate).

    Pass ``expected_rate=None`` to accept any sample rate.
    """
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise CorruptHeader(f"{path}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(raw):
        cid, size = raw[pos:pos + 4], struct.unpack_from("<I", raw, pos + 4)[0]
        body = raw[pos + 8:pos + 8 + size]
        if len(body) < size and cid != b"data":
            raise CorruptHeader(f"{path}: truncated {cid!r} chunk")
        if cid == b"fmt ":
            if size < 16:
                raise CorruptHeader(f"{path}: fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body)
            tag = fmt[0]
            if tag == _EXTENSIBLE:
                if size < 40:
                    raise CorruptHeader(f"{path}: extensible fmt chunk too short")
                tag = struct.unpack_from("<H", body, 24)[0]
            fmt = (tag,) + fmt[1:]
        elif cid == b"data":
            if len(body) < size:
                raise CorruptHeader(f"{path}: data chunk truncated")
            data = body
            break
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise CorruptHeader(f"{path}: missing fmt or data chunk")
    tag, channels, rate, _, align, bits = fmt
    if channels != 1:
        raise UnsupportedFormat(f"{path}: {channels} channels; only mono is supported")
    if (tag, bits) == (_PCM, 16):
        samples = np.frombuffer(data[:len(data) - len(data) % 2], dtype="<i2").astype(np.float32) / 32768.0
    elif (tag, bits) == (_FLOAT, 32):
        samples = np.frombuffer(data[:len(data) - len(data) % 4], dtype="<f4").astype(np.float32)
    else:
        raise UnsupportedFormat(f"{path}: format tag {tag} with {bits} bits is not supported")
    if expected_rate is not None and rate != expected_rate:
        raise UnsupportedSampleRate(f"{path}: {rate} Hz, expected {expected_rate} Hz (no resampling)")
    return samples, rate


def wav_write(path, samples, rate=SAMPLE_RATE, encoding="float32"):
    """Write mono audio as IEEE float32 (lossless) or PCM16."""
    x = np.asarray(samples, np.float32).reshape(-1)
    if encoding == "float32":
        tag, bits, payload = _FLOAT, 32, x.astype("<f4").tobytes()
    elif encoding == "pcm16":
        q = np.clip(np.round(x.astype(np.float64) * 32768.0), -32768, 32767).astype("<i2")
        tag, bits, payload = _PCM, 16, q.tobytes()
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    align = bits // 8
    header = b"RIFF" + struct.pack("<I", 4 + 24 + 8 + len(payload)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, tag, 1, rate, rate * align, align, bits)
    header += b"data" + struct.pack("<I", len(payload))
    Path(path).write_bytes(header + payload)


# -- ROI streams ----------------------------------------------------------------------


def roi_write(path, frames, fps=25):
    frames = list(frames)
    size = frames[0].size if frames else 50
    out = bytearray(ROI_MAGIC + str(ROI_VERSION).encode())
    out += struct.pack("<HIHH", fps, len(frames), size, size)
    for f in frames:
        q = np.round(np.clip(f.pixels[0], 0, 1) * 255).astype(np.uint8)
        blank = not q.any()
        out += bytes([1 if blank else 0]) + q.tobytes()
    Path(path).write_bytes(bytes(out))


def roi_read(path):
    """Returns (frames, fps); pixels are dequantized as byte / 255."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:3] != ROI_MAGIC or not chr(raw[3]).isdigit():
        raise BadMagic(f"{path}: not an ROI stream")
    if int(chr(raw[3])) > ROI_VERSION:
        raise UnsupportedFormat(f"{path}: ROI version {chr(raw[3])} is newer than supported")
    if len(raw) < 14:
        raise UnexpectedEof(f"{path}: truncated header")
    fps, count, width, height = struct.unpack_from("<HIHH", raw, 4)
    if width != height:
        raise UnsupportedFormat(f"{path}: non-square ROI {width}x{height}")
    per = 1 + width * height
    if len(raw) < 14 + count * per:
        raise UnexpectedEof(f"{path}: {count} frames declared, file truncated")
    frames = []
    for k in range(count):
        off = 14 + k * per
        flag = raw[off]
        px = np.frombuffer(raw, np.uint8, width * height, off + 1)
        if flag and px.any():
            raise CorruptHeader(f"{path}: frame {k} flagged blank but has non-zero pixels")
        frames.append(RoiFrame((px.astype(np.float32) / 255.0).reshape(1, height, width)))
    return frames, fps


# -- weights --------------------------------------------------------------------------


def _checkpoint_tensors(model):
    """(name, array) for every parameter, then every buffer (batch-norm statistics)."""
    items = [(name, p.data) for name, p in model.named_parameters()]
    items += [(name, getattr(owner, key)) for name, owner, key in model.named_buffers()]
    return items


def weights_save(model, path):
    out = bytearray(WEIGHT_MAGIC)
    named = _checkpoint_tensors(model)
    out += struct.pack("<II", WEIGHT_VERSION, len(named))
    for name, arr in named:
        enc = name.encode("utf-8")
        out += struct.pack("<H", len(enc)) + enc + struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.astype("<f4").tobytes()
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(bytes(out))
    os.replace(tmp, path)


def _read_weight_entries(path):
    raw = Path(path).read_bytes()
    if raw[:4] != WEIGHT_MAGIC:
        raise BadMagic(f"{path}: not a weight file")

    def take(fmt, off):
        n = struct.calcsize(fmt)
        if off + n > len(raw):
            raise UnexpectedEof(f"{path}: truncated at byte {off}")
        return struct.unpack_from(fmt, raw, off), off + n

    (version, count), off = take("<II", 4)
    if version > WEIGHT_VERSION:
        raise UnsupportedFormat(f"{path}: weight format version {version} is newer than supported")
    entries = {}
    for _ in range(count):
        (nlen,), off = take("<H", off)
        if off + nlen > len(raw):
            raise UnexpectedEof(f"{path}: truncated tensor name")
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,), off = take("<B", off)
        dims, off = take(f"<{rank}I", off)
        n = int(np.prod(dims)) if rank else 1
        if off + 4 * n > len(raw):
            raise UnexpectedEof(f"{path}: tensor {name} truncated")
        if name in entries:
            raise CorruptHeader(f"{path}: duplicate tensor {name}")
        entries[name] = np.frombuffer(raw, "<f4", n, off).reshape(dims)
        off += 4 * n
    return entries


def weights_load(model, path):
    """Load a checkpoint into ``model``; validates everything before assigning anything."""
    entries = _read_weight_entries(path)
    named = _checkpoint_tensors(model)
    for name, arr in named:
        if name not in entries:
            raise ShapeMismatch(f"{path}: tensor {name} {arr.shape} missing from checkpoint", name)
        if entries[name].shape != arr.shape:
            raise ShapeMismatch(f"{path}: tensor {name} has shape {entries[name].shape}, "
                                f"model expects {arr.shape}", name)
    extra = set(entries) - {n for n, _ in named}
    if extra:
        raise UnknownTensor(f"{path}: unexpected tensors {sorted(extra)[:5]}")
    for name, p in model.named_parameters():
        p.data = entries[name].astype(p.dtype)
    for name, owner, key in model.named_buffers():
        setattr(owner, key, entries[name].astype(getattr(owner, key).dtype))
    return model


# -- run configuration ------------------------------------------------------------------


@dataclass
class SimulateConfig:
    """Corpus generation parameters. SNR/SIR ranges have no defaults on purpose."""

    snr_db: list
    num_scenes: int = 10
    scenario: str = "TS2"
    sir_db: list | None = None
    target_only_fraction: float = 0.2
    duration_s: float = 1.0
    room_dims: list = field(default_factory=lambda: [[3.0, 7.0], [3.0, 6.0], [2.5, 3.5]])
    absorption: list = field(default_factory=lambda: [0.2, 0.6])
    max_order: int = 4
    roi_mode: str = "envelope_driven"
    detection_rate: float = 1.0
    sources_dir: str | None = None

    def validate(self):
        if self.scenario not in ("TS1", "TS2"):
            raise InvalidConfig("scenario must be TS1 or TS2")
        if self.scenario == "TS1" and not self.sir_db:
            raise InvalidConfig("TS1 corpora need an sir_db range")
        if len(self.snr_db) != 2 or self.snr_db[0] > self.snr_db[1]:
            raise InvalidConfig("snr_db must be [low, high]")
        if self.num_scenes < 0 or self.duration_s <= 0:
            raise InvalidConfig("num_scenes >= 0 and duration_s > 0 required")
        if not 0 <= self.target_only_fraction <= 1:
            raise InvalidConfig("target_only_fraction must be in [0, 1]")
        return self


@dataclass
class TrainConfig:
    steps: int = 200
    lr: float = 1e-3
    warmup_fraction: float = 0.1
    weight_decay: float = 0.01
    betas: list = field(default_factory=lambda: [0.9, 0.999])
    eps: float = 1e-8
    decoder_init: str = "pinv"


@dataclass
class RunConfig:
    model: ModelConfig
    preset: str | None = None
    seed: int = 0
    toy: bool = False
    simulate: SimulateConfig | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: dict = field(default_factory=dict)

    def build_config(self):
        """The model configuration to build: ``model``, shrunk to toy scale when ``toy`` is set."""
        return toy_config(self.model) if self.toy else self.model

    def to_dict(self):
        d = {"seed": self.seed, "toy": self.toy, "paths": dict(self.paths),
             "train": dataclasses.asdict(self.train)}
        model = self.model.to_dict()
        if self.preset:
            base = preset(self.preset).to_dict()
            model = {k: v for k, v in model.items() if base.get(k) != v}
            model["preset"] = self.preset
        d["model"] = model
        if self.simulate is not None:
            d["simulate"] = dataclasses.asdict(self.simulate)
        return d


_RUN_KEYS = {"model", "seed", "toy", "simulate", "train", "paths"}
_PATH_KEYS = {"weights", "corpus", "input", "roi", "output", "reference", "checkpoint"}


def _strict(cls, data, where):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise InvalidConfig(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise InvalidConfig(f"{where}: {exc}") from None


def parse_run_config(data, env=None):
    """Build a :class:`RunConfig` from a dict, rejecting unknown keys at every level.

    The ``AVE3_SEED`` environment variable overrides ``seed``.
    """
    if not isinstance(data, dict):
        raise InvalidConfig("run config must be a JSON object")
    unknown = set(data) - _RUN_KEYS
    if unknown:
        raise InvalidConfig(f"unknown keys in run config: {sorted(unknown)}")
    model_data = dict(data.get("model", {"preset": "av-gs"}))
    name = model_data.pop("preset", None)
    base = preset(name).to_dict() if name else {}
    base.update(model_data)
    cfg = _strict(ModelConfig, base, "model").validate()
    paths = dict(data.get("paths", {}))
    bad = set(paths) - _PATH_KEYS
    if bad:
        raise InvalidConfig(f"unknown keys in paths: {sorted(bad)}")
    sim = data.get("simulate")
    env = os.environ if env is None else env
    seed = int(env["AVE3_SEED"]) if env.get("AVE3_SEED") else int(data.get("seed", 0))
    return RunConfig(
        model=cfg, preset=name, seed=seed, toy=bool(data.get("toy", False)),
        simulate=_strict(SimulateConfig, sim, "simulate").validate() if sim is not None else None,
        train=_strict(TrainConfig, data.get("train", {}), "train"), paths=paths)


def load_run_config(path, env=None):
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    return parse_run_config(data, env)


def save_run_config(cfg, path):
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
