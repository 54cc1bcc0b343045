import numpy as np
import pytest

from ave3net import tensor as T
from ave3net.blocks import DenseSums
from ave3net.errors import BadFrameShape, ShapeMismatch
from ave3net.nn import param_count
from ave3net.tensor import Tensor
from ave3net.video import (RoiFrame, VideoPath, VideoTrunk, frame_timestamps, replicate_indices,
                           upsample_replicate)

TOY = dict(channels=(4, 8, 8, 16), units=(1, 1, 1), features=16)


@pytest.fixture(scope="module")
def full_path():
    return VideoPath(np.random.default_rng(0))


def test_encode_frame_shape(full_path, rng):
    frame = RoiFrame(rng.random((50, 50)))
    out = full_path.encode_frame(frame)
    assert out.shape == (512,)
    assert np.all(np.isfinite(out.data))
    np.testing.assert_array_equal(full_path.encode_frame(frame).data, out.data)


def test_blank_frames_identical(full_path):
    a = full_path.encode_frame(RoiFrame.blank()).data
    b = full_path.encode_frame(RoiFrame.blank()).data
    assert np.array_equal(a, b)
    np.testing.assert_array_equal(full_path.blank_feature().data[0], a)


def test_roi_frame_rules():
    f = RoiFrame(np.full((50, 50), 2.0))
    assert f.pixels.max() == 1.0 and not f.is_blank
    assert RoiFrame.blank().is_blank
    with pytest.raises(BadFrameShape):
        RoiFrame(np.zeros((3, 50, 50)))
    with pytest.raises(BadFrameShape):
        VideoPath(np.random.default_rng(0), hidden=8, fc_hidden=16, **TOY).encode_frame(np.zeros((1, 40, 40)))


def test_trunk_param_count():
    trunk = VideoTrunk(np.random.default_rng(0))
    # canonical 0.5x plan, no classifier head
    assert param_count(trunk) == 341_360
    assert 0.3e6 < param_count(trunk) < 0.5e6


def test_trunk_channel_plan_checked():
    with pytest.raises(ValueError):
        VideoTrunk(np.random.default_rng(0), channels=(24, 48, 96), units=(4, 8, 4))


def test_zero_blocks_passthrough(rng):
    vp = VideoPath(rng, hidden=8, fc_hidden=16, lstm_blocks=0, **TOY)
    f = Tensor(rng.standard_normal((5, 8)).astype(np.float32))
    out, states = vp.lstm_forward(f)
    assert out is f and states == []
    with pytest.raises(ShapeMismatch):
        vp.lstm_forward(Tensor(np.zeros((5, 7), np.float32)))


def test_dense_zero_weights_is_layernorm(rng):
    vp = VideoPath(rng, hidden=8, fc_hidden=16, lstm_blocks=3, dense=True, **TOY).astype(np.float64)
    for block in vp.blocks:
        for name, p in block.named_parameters():
            if not name.startswith("norm."):
                p.data[:] = 0
    x = rng.standard_normal((4, 8))
    sums = DenseSums()
    y0, _ = vp.block_step(0, Tensor(x), sums)
    np.testing.assert_allclose(y0.data, vp.blocks[0].norm(Tensor(x)).data, atol=1e-12)
    y1, _ = vp.block_step(1, y0, sums)
    np.testing.assert_allclose(y1.data, vp.blocks[1].norm(Tensor(x + y0.data)).data, atol=1e-12)


def _ln(x, gamma, beta, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


@pytest.mark.parametrize("seed", range(10))
def test_dense_incremental_equals_explicit_sum(seed):
    r = np.random.default_rng(seed)
    vp = VideoPath(r, hidden=8, fc_hidden=16, lstm_blocks=4, dense=True, **TOY).astype(np.float64)
    for block in vp.blocks:
        block.norm.gamma.data = r.uniform(0.5, 1.5, 8)
        block.norm.beta.data = r.standard_normal(8) * 0.1
    x = r.standard_normal((6, 8))
    got, _ = vp.lstm_forward(Tensor(x))
    # explicit form: y_n = LN(f_n(x_n) + sum_{k<=n} x_k), every x_k kept in a list
    inputs, cur = [], x
    for block in vp.blocks:
        inputs.append(cur)
        f_out, _ = block.transform(Tensor(cur))
        cur = _ln(f_out.data + np.sum(inputs, axis=0), block.norm.gamma.data, block.norm.beta.data)
    assert np.max(np.abs(got.data - cur)) <= 1e-6


def test_upsample_examples():
    feats = np.arange(3 * 2, dtype=np.float64).reshape(3, 2)
    vt = frame_timestamps(3)
    at = [f * 160 for f in range(12)]
    out = upsample_replicate(feats, vt, at, np.full((1, 2), -1.0)).data
    assert out.shape == (12, 2)
    for k in range(3):
        assert np.all(out[4 * k:4 * k + 4] == feats[k])
    one = upsample_replicate(feats[:1], [0], at[:8], np.zeros((1, 2))).data
    assert np.all(one == feats[0])


def test_three_second_alignment():
    vt = frame_timestamps(75)
    at = [f * 160 for f in range(300)]
    idx = replicate_indices(vt, at)
    assert len(idx) == 300
    assert np.array_equal(np.bincount(idx), np.full(75, 4))


def test_upsample_before_first_frame_and_empty():
    blank = np.full((1, 2), 7.0)
    out = upsample_replicate(np.ones((1, 2)), [320], [0, 160, 320, 480], blank).data
    assert out[:2].tolist() == [[7.0, 7.0]] * 2 and out[2:].tolist() == [[1.0, 1.0]] * 2
    empty = upsample_replicate(np.zeros((0, 2)), [], [0, 160, 320], blank).data
    assert empty.shape == (3, 2) and np.all(empty == 7.0)


def test_replicate_rejects_decreasing_times():
    with pytest.raises(ValueError):
        replicate_indices([0, 640, 320], [0])


def test_upsample_counts_match_audio(rng):
    for v in range(0, 6):
        for n in range(0, 30, 7):
            out = upsample_replicate(np.ones((v, 3)), frame_timestamps(v), [f * 160 for f in range(n)],
                                     np.zeros((1, 3)))
            assert out.shape == (n, 3)


def test_trunk_output_scale_after_calibration():
    from ave3net.model import build_model, preset
    model = build_model(preset("av-gs"), seed=0)
    px = np.random.default_rng(5).random((4, 1, 50, 50)).astype(np.float32)
    with T.no_grad():
        out = model.video.trunk(Tensor(px)).data
    assert out.shape == (4, 1024)
    assert 0.05 < float(np.mean(np.abs(out))) < 5.0
