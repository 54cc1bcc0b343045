"""Toy-scale training (AdamW with linear warm-up) and the model gradient check."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import NonFiniteLoss
from .losses import PlcpaConfig, plcpa_loss, sdr
from .model import build_model, init_decoder_pseudo_inverse, toy_config
from .streaming import padded_length
from .tensor import Tape, Tensor, grad_check


class AdamW:
    """Adam with decoupled weight decay applied to every parameter."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]
        self.v = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = np.zeros_like(m) if p.grad is None else p.grad.astype(np.float64)
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.wd * p.data
            p.data = (p.data - lr * update).astype(p.data.dtype)


def warmup_lr(step, steps, peak, fraction=0.1):
    """Linear ramp to ``peak`` over the first ``fraction`` of steps, then constant."""
    warm = max(1, int(round(fraction * steps)))
    return peak * min(1.0, (step + 1) / warm)


def train_model_config(cfg):
    """Topology of ``cfg`` at a width that trains in minutes on one CPU core."""
    return dataclasses.replace(toy_config(cfg, blocks=2), audio_features=512, hidden=128,
                               fc_hidden=256, video_features=32)


@dataclass
class ToyTrainReport:
    steps: int
    seed: int
    losses: list = field(default_factory=list)
    sdr_input: float = 0.0
    sdr_initial: float = 0.0
    sdr_final: float = 0.0

    @property
    def loss_ratio(self):
        return self.losses[-1] / self.losses[0] if self.losses and self.losses[0] else float("nan")

    @property
    def sdr_gain(self):
        return self.sdr_final - self.sdr_input

    def to_dict(self):
        return {"steps": self.steps, "seed": self.seed, "losses": self.losses,
                "initial_loss": self.losses[0] if self.losses else None,
                "final_loss": self.losses[-1] if self.losses else None,
                "loss_ratio": self.loss_ratio, "sdr_input": self.sdr_input,
                "sdr_initial": self.sdr_initial, "sdr_final": self.sdr_final,
                "sdr_gain": self.sdr_gain}


def _pad(x, cfg):
    x = np.asarray(x, np.float32).reshape(-1)
    total = padded_length(len(x), cfg.window, cfg.hop)
    return np.concatenate([x, np.zeros(total - len(x), np.float32)])


def train_toy(model, mixture, reference, roi=None, steps=200, lr=1e-3, seed=0,
              warmup_fraction=0.1, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01,
              loss_cfg=PlcpaConfig(), log=None):
    """Fit ``model`` to one (mixture, reference) pair; the loss is logged at every step.

    ``losses[k]`` is the loss before update k, and one extra entry after the
    final update, so ``losses[0]`` / ``losses[-1]`` are the initial / final loss.
    """
    cfg = model.cfg
    n = len(mixture)
    mix = _pad(mixture, cfg)
    ref = Tensor(_pad(reference, cfg).astype(model.dtype))
    roi = roi if (roi and cfg.uses_video) else None
    params = model.parameters()
    opt = AdamW(params, lr, betas, eps, weight_decay)
    report = ToyTrainReport(steps=steps, seed=seed)
    report.sdr_input = sdr(mixture, reference)

    def evaluate():
        with T.no_grad():
            return model.forward_utterance(mix, roi).data[:n]

    report.sdr_initial = sdr(evaluate(), reference)
    for step in range(steps + 1):
        model.zero_grad()
        with Tape() as tape:
            est = model.forward_utterance(mix, roi)
            loss = plcpa_loss(est, ref, loss_cfg)
        value = loss.item()
        if not np.isfinite(value):
            bad = [name for name, p in model.named_parameters() if not np.all(np.isfinite(p.data))]
            raise NonFiniteLoss(f"loss became {value} at step {step}; "
                                f"non-finite parameters: {bad[:5] or 'none'}")
        report.losses.append(value)
        if log is not None:
            log(step, value)
        if step == steps:
            break
        T.backward(loss, tape)
        opt.step(warmup_lr(step, steps, lr, warmup_fraction))
    report.sdr_final = sdr(evaluate(), reference)
    return report


def build_train_model(cfg, seed=0, decoder_init="pinv"):
    model = build_model(train_model_config(cfg), seed)
    if decoder_init == "pinv":
        init_decoder_pseudo_inverse(model)
    return model


# -- gradient check ------------------------------------------------------------------


@dataclass
class GradCheckSummary:
    max_rel_err: float
    passed: bool
    checked: int
    tol: float
    per_group: dict
    worst: tuple | None


GROUPS = ("encoder", "projection", "fusion", "audio_blocks", "mask", "decoder", "video")


def _group(name):
    head = name.split(".")[0]
    return {"enc_norm": "encoder"}.get(head, head)


KINKED = ("encoder.", "video.trunk.")


def model_grad_check(cfg, seed=0, tol=1e-3, eps=3e-5, kink_eps=1e-6, samples=300, per_param=2,
                     duration_samples=1600):
    """Finite-difference check of the PLCPA loss through a toy-scaled model in float64.

    Samples are stratified: every parameter tensor gets ``per_param`` entries
    on top of ``samples`` uniformly drawn ones. Tensors feeding ReLUs directly
    (audio encoder, video trunk) use the smaller ``kink_eps`` so the step does
    not cross a kink; everything downstream of them is smooth.
    """
    model = build_model(toy_config(cfg), seed, dtype=np.float64)
    rng = np.random.default_rng([seed, 7])
    mix = rng.standard_normal(duration_samples) * 0.3
    ref = Tensor(rng.standard_normal(duration_samples) * 0.3)
    roi = None
    if cfg.uses_video:
        count = duration_samples // (cfg.sample_rate // cfg.fps) + 1
        roi = list(rng.random((count, 1, cfg.roi_size, cfg.roi_size)))

    def f():
        return plcpa_loss(model.forward_utterance(mix, roi)[:duration_samples], ref)

    names = [n for n, _ in model.named_parameters()]
    steps = [kink_eps if n.startswith(KINKED) else eps for n in names]
    rep = grad_check(f, model.parameters(), eps=steps, tol=tol, samples=samples, seed=seed,
                     per_param=per_param)
    per_group = {}
    for pi, j, a, num, rel in rep.entries:
        g = _group(names[pi])
        n_, worst = per_group.get(g, (0, 0.0))
        per_group[g] = (n_ + 1, max(worst, rel))
    worst = None
    if rep.entries:
        pi, j, a, num, rel = max(rep.entries, key=lambda e: e[4])
        worst = (names[pi], j, a, num, rel)
    return GradCheckSummary(rep.max_rel_err, rep.passed, rep.checked, tol, per_group, worst)

