import numpy as np
import pytest

from ave3net import tensor as T
from ave3net.errors import NonFiniteLoss
from ave3net.model import build_model, preset, toy_config
from ave3net.tensor import Tape, Tensor
from ave3net.train import AdamW, model_grad_check, train_toy, warmup_lr


def test_adamw_first_step():
    p = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    p.grad = np.array([0.3, -4.0, 0.0])
    AdamW([p], lr=0.1, weight_decay=0.01).step()
    # bias-corrected first step moves by lr * g/|g| (0 for a zero gradient) plus decoupled decay
    want = np.array([1.0, -2.0, 0.5]) - 0.1 * (np.array([1.0, -1.0, 0.0]) + 0.01 * np.array([1.0, -2.0, 0.5]))
    np.testing.assert_allclose(p.data, want, atol=1e-6)


def test_adamw_minimizes_quadratic():
    target = np.array([3.0, -1.0])
    p = Tensor(np.zeros(2), requires_grad=True)
    opt = AdamW([p], lr=0.05, weight_decay=0.0)
    for _ in range(500):
        p.grad = None
        with Tape() as tape:
            d = p - Tensor(target)
            loss = T.tsum(d * d)
        T.backward(loss, tape)
        opt.step()
    np.testing.assert_allclose(p.data, target, atol=1e-2)


def test_warmup_schedule():
    lrs = [warmup_lr(s, 200, 1e-3) for s in range(200)]
    assert lrs[0] == pytest.approx(1e-3 / 20)
    assert lrs[19] == pytest.approx(1e-3)
    assert all(a <= b for a, b in zip(lrs[:20], lrs[1:21]))
    assert all(v == pytest.approx(1e-3) for v in lrs[19:])
    assert warmup_lr(0, 3, 1.0) == 1.0


def test_non_finite_loss_aborts():
    model = build_model(toy_config(preset("ao-e3net")))
    mix = np.zeros(1600, np.float32)
    mix[100] = np.nan
    with pytest.raises(NonFiniteLoss):
        train_toy(model, mix, np.ones(1600, np.float32), steps=2)


def test_short_training_reduces_loss():
    model = build_model(toy_config(preset("ao-e3net")), seed=1)
    r = np.random.default_rng(0)
    ref = (r.standard_normal(1600) * 0.1).astype(np.float32)
    mix = ref + (r.standard_normal(1600) * 0.1).astype(np.float32)
    rep = train_toy(model, mix, ref, steps=30, lr=1e-2)
    assert len(rep.losses) == 31 and rep.losses[-1] < rep.losses[0]


def test_grad_check_covers_every_group():
    s = model_grad_check(toy_config(preset("av-gs")), seed=1, samples=60)
    assert s.passed, s.worst
    assert set(s.per_group) >= {"encoder", "projection", "fusion", "audio_blocks", "mask", "decoder", "video"}
