"""Spectral helpers, the power-law compressed phase-aware loss, and SDR.

STFT convention: periodic Hann analysis window of ``win`` samples, zero-padded
to ``fft_size``, unnormalized forward DFT (``numpy.fft.rfft``), so a frame's
energy satisfies sum|X|^2 = fft_size * sum(w*x)^2 (Parseval). ``istft`` uses
weighted overlap-add with the same window and divides by the summed squared
window, which inverts ``stft`` wherever that sum is non-zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import InputTooShort, LengthMismatch, ZeroReference
from .tensor import Tensor

SDR_CAP_DB = 100.0
MAG_EPS = 1e-8


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = 512
    win: int = 320
    hop: int = 160

    def __post_init__(self):
        if self.fft_size < self.win:
            raise ValueError("fft_size must be at least the window length")

    @property
    def bins(self):
        return self.fft_size // 2 + 1


@dataclass(frozen=True)
class PlcpaConfig:
    p: float = 0.3
    alpha: float = 0.5
    stft: StftConfig = StftConfig()

    def __post_init__(self):
        if not 0 < self.p <= 1:
            raise ValueError("compression exponent must be in (0, 1]")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must be in [0, 1]")


def hann(n):
    return (0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)).astype(np.float64)


def stft(x, cfg=StftConfig()):
    """Complex spectrogram [bins x frames] of a 1-D signal."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if len(x) < cfg.win:
        raise InputTooShort(f"need at least {cfg.win} samples, got {len(x)}")
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.win)[::cfg.hop]
    return np.fft.rfft(frames * hann(cfg.win), n=cfg.fft_size, axis=-1).T


def istft(spec, length=None, cfg=StftConfig()):
    """Weighted overlap-add inverse of :func:`stft`."""
    frames = np.fft.irfft(np.asarray(spec).T, n=cfg.fft_size, axis=-1)[:, :cfg.win]
    w = hann(cfg.win)
    n = (len(frames) - 1) * cfg.hop + cfg.win
    out = np.zeros(n)
    norm = np.zeros(n)
    for i, fr in enumerate(frames):
        out[i * cfg.hop:i * cfg.hop + cfg.win] += fr * w
        norm[i * cfg.hop:i * cfg.hop + cfg.win] += w * w
    nz = norm > 1e-10
    out[nz] /= norm[nz]
    return out if length is None else out[:length]


_dft_cache = {}


def _dft_mats(cfg, dtype):
    key = (cfg, np.dtype(dtype).str)
    if key not in _dft_cache:
        n = np.arange(cfg.win)
        k = np.arange(cfg.bins)
        ang = 2 * np.pi * np.outer(k, n) / cfg.fft_size
        w = hann(cfg.win)
        _dft_cache[key] = (Tensor((np.cos(ang) * w).astype(dtype)),
                           Tensor((-np.sin(ang) * w).astype(dtype)))
    return _dft_cache[key]


def spectrum(x, cfg=StftConfig()):
    """Differentiable STFT of a Tensor signal: returns (real, imag), each [frames x bins]."""
    cos_m, sin_m = _dft_mats(cfg, x.dtype)
    frames = T.frame(x, cfg.win, cfg.hop)
    return T.linear(frames, cos_m), T.linear(frames, sin_m)


def _compressed(x, cfg):
    re, im = spectrum(x, cfg.stft)
    power = re * re + im * im
    mag = T.sqrt(power + MAG_EPS)
    mag_p = T.power(mag, cfg.p)
    scale = T.power(mag, cfg.p - 1.0)
    return mag_p, re * scale, im * scale


def plcpa_loss(est, ref, cfg=PlcpaConfig()):
    """alpha * mean|C(ref) - C(est)|^2 + (1 - alpha) * mean(|ref|^p - |est|^p)^2.

    C(s) = |s|^p * exp(j*angle(s)) per time-frequency bin. Inputs are Tensors
    or arrays of equal length; the result is a scalar Tensor.
    """
    est = est if isinstance(est, Tensor) else Tensor(np.asarray(est))
    ref = ref if isinstance(ref, Tensor) else Tensor(np.asarray(ref, dtype=est.dtype))
    if est.shape != ref.shape:
        raise LengthMismatch(f"estimate {est.shape} vs reference {ref.shape}")
    if est.shape[-1] < cfg.stft.win:
        raise InputTooShort(f"need at least {cfg.stft.win} samples")
    m_est, re_est, im_est = _compressed(est, cfg)
    m_ref, re_ref, im_ref = _compressed(ref, cfg)
    d_re = re_ref - re_est
    d_im = im_ref - im_est
    d_mag = m_ref - m_est
    complex_term = T.mean(d_re * d_re + d_im * d_im)
    mag_term = T.mean(d_mag * d_mag)
    return complex_term * cfg.alpha + mag_term * (1.0 - cfg.alpha)


def sdr(est, ref):
    """Plain signal-to-distortion ratio in dB, capped at 100 dB."""
    est = np.asarray(est, dtype=np.float64).reshape(-1)
    ref = np.asarray(ref, dtype=np.float64).reshape(-1)
    if est.shape != ref.shape:
        raise LengthMismatch(f"estimate has {len(est)} samples, reference {len(ref)}")
    signal = float(np.dot(ref, ref))
    if signal == 0.0:
        raise ZeroReference("reference signal is all zeros")
    resid = ref - est
    noise = float(np.dot(resid, resid))
    if noise < 1e-12 * signal:
        return SDR_CAP_DB
    return min(SDR_CAP_DB, 10.0 * np.log10(signal / noise))
