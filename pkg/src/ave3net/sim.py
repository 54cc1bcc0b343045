"""Desk-scale scene simulation: image-method room impulse responses, TS1/TS2
mixtures, synthetic speech-like sources, and synthetic mouth-ROI streams."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from .errors import PositionOutOfRoom, SilentSource
from .video import ROI_SIZE, RoiFrame

SPEED_OF_SOUND = 340.0
SAMPLE_RATE = 16000
WALLS = ("x0", "x1", "y0", "y1", "z0", "z1")


@dataclass(frozen=True)
class RoomSpec:
    """Shoebox room. ``absorption`` is one energy absorption coefficient or six (x0, x1, y0, y1, z0, z1)."""

    dims: tuple = (5.0, 4.0, 3.0)
    absorption: object = 0.3
    max_order: int = 3
    c: float = SPEED_OF_SOUND
    fs: int = SAMPLE_RATE

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) <= 0:
            raise ValueError("room dimensions must be three positive lengths")
        a = np.broadcast_to(np.asarray(self.absorption, dtype=float), (6,))
        if np.any(a <= 0) or np.any(a > 1):
            raise ValueError("absorption coefficients must lie in (0, 1]")
        if not 0 <= self.max_order <= 10:
            raise ValueError("max_order must be between 0 and 10")

    @property
    def reflection(self):
        """Pressure reflection coefficient per wall, sqrt(1 - absorption)."""
        a = np.broadcast_to(np.asarray(self.absorption, dtype=float), (6,))
        return np.sqrt(1.0 - a)

    def contains(self, pos):
        p = np.asarray(pos, dtype=float)
        return bool(np.all(p > 0) and np.all(p < np.asarray(self.dims)))


def _check_inside(room, *positions):
    for pos in positions:
        if not room.contains(pos):
            raise PositionOutOfRoom(f"position {tuple(pos)} is not strictly inside room {room.dims}")


def image_sources(room, src, mic):
    """Enumerate image sources up to ``room.max_order`` reflections.

    Returns (positions [N x 3], reflection gain [N], order [N], distance [N]).
    """
    _check_inside(room, src, mic)
    L = np.asarray(room.dims, dtype=float)
    s = np.asarray(src, dtype=float)
    beta = room.reflection
    K = room.max_order
    pos, gain, order = [], [], []
    rng_n = range(-K, K + 1)
    for n in itertools.product(rng_n, rng_n, rng_n):
        for u in itertools.product((0, 1), repeat=3):
            hits = []  # reflections on each of the six walls
            for axis in range(3):
                hits += [abs(n[axis] - u[axis]), abs(n[axis])]
            k = sum(hits)
            if k > K:
                continue
            p = [(1 - 2 * u[a]) * s[a] + 2 * n[a] * L[a] for a in range(3)]
            pos.append(p)
            gain.append(float(np.prod(beta ** np.asarray(hits))))
            order.append(k)
    pos = np.asarray(pos)
    dist = np.linalg.norm(pos - np.asarray(mic, dtype=float), axis=1)
    return pos, np.asarray(gain), np.asarray(order), dist


def image_method_rir(room, src, mic):
    """Room impulse response from ``src`` to ``mic`` by the image method.

    Each image contributes gain / (4*pi*distance) at delay distance / c * fs,
    split between the two neighbouring samples by linear interpolation.
    """
    _, gain, _, dist = image_sources(room, src, mic)
    amp = gain / (4 * np.pi * dist)
    delay = dist / room.c * room.fs
    length = int(math.ceil(delay.max())) + 2
    h = np.zeros(length)
    base = np.floor(delay).astype(int)
    frac = delay - base
    np.add.at(h, base, amp * (1 - frac))
    np.add.at(h, base + 1, amp * frac)
    return h


def direct_delay(room, src, mic):
    return float(np.linalg.norm(np.asarray(src, float) - np.asarray(mic, float)) / room.c * room.fs)


# -- synthetic sources ------------------------------------------------------------


def synth_speech(duration, seed, fs=SAMPLE_RATE, f0=None):
    """Speech-like stand-in: a harmonic complex with a wandering pitch and syllable-rate bursts."""
    rng = np.random.default_rng(seed)
    n = int(round(duration * fs))
    t = np.arange(n) / fs
    f0 = rng.uniform(100, 220) if f0 is None else f0
    wander = 1 + 0.08 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * t + rng.uniform(0, 2 * np.pi))
    phase = 2 * np.pi * np.cumsum(f0 * wander) / fs
    sig = np.zeros(n)
    for k in range(1, 16):
        if k * f0 * 1.1 > fs / 2:
            break
        sig += rng.uniform(0.3, 1.0) / k * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
    rate = rng.uniform(3.0, 5.0)
    env = np.clip(np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)), 0, None) ** 1.5
    sig *= env
    peak = np.max(np.abs(sig))
    return (0.3 * sig / peak if peak > 0 else sig).astype(np.float32)


def synth_noise(duration, seed, fs=SAMPLE_RATE, color="pink"):
    """Stationary noise; ``color`` is "white" or "pink" (1/f power)."""
    rng = np.random.default_rng(seed)
    n = int(round(duration * fs))
    white = rng.standard_normal(n)
    if color == "white":
        sig = white
    else:
        spec = np.fft.rfft(white)
        f = np.arange(len(spec))
        f[0] = 1
        sig = np.fft.irfft(spec / np.sqrt(f), n=n)
    sig = sig / (np.std(sig) + 1e-12) * 0.1
    return sig.astype(np.float32)


# -- scene mixing -------------------------------------------------------------------


@dataclass
class SceneSpec:
    """One simulated mixture. Sources are arrays (or WAV paths resolved by the caller)."""

    scenario: str
    target: np.ndarray
    noise: np.ndarray
    snr_db: float
    interferer: np.ndarray | None = None
    sir_db: float | None = None
    seed: int = 0
    room: RoomSpec = field(default_factory=RoomSpec)
    mic_pos: tuple | None = None
    target_pos: tuple | None = None
    interferer_pos: tuple | None = None
    noise_pos: tuple | None = None

    def __post_init__(self):
        if self.scenario not in ("TS1", "TS2"):
            raise ValueError("scenario must be TS1 or TS2")
        if self.scenario == "TS2" and self.interferer is not None:
            raise ValueError("TS2 scenes have no interfering speaker")
        if self.scenario == "TS1" and (self.interferer is None or self.sir_db is None):
            raise ValueError("TS1 scenes need an interferer and sir_db")
        levels = [self.snr_db] + ([self.sir_db] if self.scenario == "TS1" else [])
        if any(np.isnan(v) or v == -np.inf for v in levels):
            raise ValueError("levels must be finite (snr may be +inf for a noiseless mix)")


@dataclass
class SceneMix:
    mixture: np.ndarray
    target: np.ndarray  # reverberant target, the training/metric reference
    interferer: np.ndarray | None
    noise: np.ndarray
    metadata: dict


def _power(x):
    return float(np.mean(np.asarray(x, np.float64) ** 2))


def _random_position(rng, room, margin=0.5):
    L = np.asarray(room.dims)
    m = np.minimum(margin, L / 4)
    return tuple(float(v) for v in rng.uniform(m, L - m))


def _fit(x, n):
    x = np.asarray(x, np.float64).reshape(-1)
    return np.resize(x, n) if len(x) else np.zeros(n)


def mix_scene(spec):
    """Convolve each source with its RIR and mix at the requested SNR/SIR.

    SNR and SIR are power ratios of the reverberant target to the reverberant
    noise / interferer over the mixture length. Positions not given are drawn
    independently (no closer-target constraint) from ``spec.seed``.
    """
    rng = np.random.default_rng(spec.seed)
    room = spec.room
    n = len(spec.target)
    mic = spec.mic_pos or _random_position(rng, room)
    tpos = spec.target_pos or _random_position(rng, room)
    ipos = spec.interferer_pos or _random_position(rng, room)
    npos = spec.noise_pos or _random_position(rng, room)

    def reverberate(sig, pos):
        h = image_method_rir(room, pos, mic)
        return fftconvolve(_fit(sig, n), h)[:n]

    target = reverberate(spec.target, tpos)
    p_t = _power(target)
    if p_t == 0:
        raise SilentSource("target is silent")
    mixture = target.copy()
    interferer = None
    if spec.scenario == "TS1":
        interferer = reverberate(spec.interferer, ipos)
        p_i = _power(interferer)
        if p_i == 0:
            raise SilentSource("interferer is silent")
        interferer *= math.sqrt(p_t / p_i / 10 ** (spec.sir_db / 10))
        mixture += interferer
    if np.isinf(spec.snr_db):
        noise = np.zeros(n)
    else:
        noise = reverberate(spec.noise, npos)
        p_n = _power(noise)
        if p_n == 0:
            raise SilentSource("noise is silent")
        noise *= math.sqrt(p_t / p_n / 10 ** (spec.snr_db / 10))
        mixture += noise
    meta = {"scenario": spec.scenario, "seed": spec.seed, "snr_db": spec.snr_db,
            "sir_db": spec.sir_db if spec.scenario == "TS1" else None,
            "mic": list(mic), "target_pos": list(tpos), "room": list(room.dims),
            "interferer_pos": list(ipos) if spec.scenario == "TS1" else None,
            "noise_pos": list(npos)}
    f32 = np.float32
    return SceneMix(mixture.astype(f32), target.astype(f32),
                    None if interferer is None else interferer.astype(f32), noise.astype(f32), meta)


# -- synthetic ROI streams ------------------------------------------------------------

MIN_APERTURE = 1.5
MAX_APERTURE = 18.0
APERTURE_GAIN = 120.0  # pixels of opening per unit RMS
MOUTH_HALF_WIDTH = 16.0
SKIN, MOUTH = 0.55, 0.05


@dataclass(frozen=True)
class SynthRoiSpec:
    mode: str = "envelope_driven"  # envelope_driven | blank | noise
    fps: int = 25
    detection_rate: float = 1.0
    seed: int = 0
    size: int = ROI_SIZE
    fs: int = SAMPLE_RATE

    def __post_init__(self):
        if self.mode not in ("envelope_driven", "blank", "noise"):
            raise ValueError(f"unknown ROI mode {self.mode!r}")
        if not 0 <= self.detection_rate <= 1:
            raise ValueError("detection_rate must be in [0, 1]")


def _mouth(size, aperture):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2
    inside = ((xx - c) / MOUTH_HALF_WIDTH) ** 2 + ((yy - c) / aperture) ** 2 <= 1.0
    img = np.full((size, size), SKIN)
    img[inside] = MOUTH
    return img[None].astype(np.float32)


def synth_roi(spec, target):
    """Frames at ``spec.fps`` covering ``target``; one frame per whole video period."""
    period = spec.fs // spec.fps
    target = np.asarray(target, np.float64).reshape(-1)
    count = len(target) // period
    if count < 1:
        raise ValueError("target shorter than one video frame period")
    rng = np.random.default_rng(spec.seed)
    frames = []
    for k in range(count):
        if spec.mode == "blank":
            px = np.zeros((1, spec.size, spec.size), np.float32)
        elif spec.mode == "noise":
            px = rng.random((1, spec.size, spec.size)).astype(np.float32)
        else:
            seg = target[k * period:(k + 1) * period]
            rms = math.sqrt(float(np.mean(seg ** 2)))
            px = _mouth(spec.size, min(MAX_APERTURE, MIN_APERTURE + APERTURE_GAIN * rms))
        frames.append(RoiFrame(px))
    if spec.detection_rate < 1:
        # per one-second block, blank a fixed count of randomly chosen frames
        drop_rng = np.random.default_rng([spec.seed, 1])
        for start in range(0, count, spec.fps):
            block = min(spec.fps, count - start)
            n_blank = int(math.floor(block * (1 - spec.detection_rate) + 1e-9))
            for j in drop_rng.permutation(block)[:n_blank]:
                frames[start + j] = RoiFrame.blank(spec.size)
    return frames
