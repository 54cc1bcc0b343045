import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ave3net import tensor as T
from ave3net.errors import EmptyTape, NonDeterministicFunction, NotScalarLoss, ShapeMismatch
from ave3net.tensor import Tape, Tensor, grad_check, inject_fault

from conftest import weighted_sum


def triple_loop_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


def test_matmul_hand_example():
    out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert out.data.tolist() == [[11.0]]


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 1000))
def test_matmul_matches_triple_loop(m, k, n, seed):
    r = np.random.default_rng(seed)
    a, b = r.standard_normal((m, k)), r.standard_normal((k, n))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, triple_loop_matmul(a, b),
                               rtol=1e-12, atol=1e-12)


def test_matmul_shape_errors():
    with pytest.raises(ShapeMismatch):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeMismatch):
        T.matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 1))))


def test_prelu_example():
    assert T.prelu(Tensor([-4.0, 4.0]), 0.25).data.tolist() == [-1.0, 4.0]


def test_elementwise_no_broadcast():
    with pytest.raises(ShapeMismatch):
        Tensor(np.ones(3)) + Tensor(np.ones(4))
    # scalars are allowed
    assert (Tensor(np.ones(3)) * 2.0).data.tolist() == [2.0, 2.0, 2.0]


def test_backward_accumulates_and_clears():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        loss = T.tsum(x * x)
    T.backward(loss, tape)
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])
    assert len(tape) == 0
    with pytest.raises(EmptyTape):
        T.backward(loss, tape)
    with Tape() as tape:
        loss = T.tsum(x * x)
    T.backward(loss, tape)
    np.testing.assert_allclose(x.grad, [4.0, 8.0, 12.0])


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = x * x
    with pytest.raises(NotScalarLoss):
        T.backward(y, tape)


def test_no_recording_without_tape():
    x = Tensor([1.0], requires_grad=True)
    y = T.sigmoid(x)
    assert T.active_tape() is None
    with Tape() as tape:
        with T.no_grad():
            T.sigmoid(x)
    assert len(tape) == 0
    assert y.data.shape == (1,)


def test_sigmoid_stable_at_extremes():
    s = T.sigmoid(Tensor(np.array([-1000.0, 0.0, 1000.0]))).data
    assert np.all(np.isfinite(s))
    assert s.tolist() == [0.0, 0.5, 1.0]


def _check(fn, tensors, eps=1e-4, tol=1e-4):
    rep = grad_check(lambda: weighted_sum(fn()), tensors, eps=eps, tol=tol, samples=60)
    assert rep.passed, rep.worst()


def _arr(r, *shape):
    return Tensor(r.standard_normal(shape), requires_grad=True)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_elementwise_gradients(seed):
    r = np.random.default_rng(seed)
    a, b = _arr(r, 3, 4), _arr(r, 3, 4)
    # keep relu/prelu inputs away from the kink
    a.data[np.abs(a.data) < 0.05] = 0.5
    alpha = Tensor([0.25], requires_grad=True)
    _check(lambda: a * b + a - b, [a, b])
    _check(lambda: T.relu(a), [a])
    _check(lambda: T.prelu(a, alpha), [a, alpha])
    _check(lambda: T.sigmoid(a), [a])
    _check(lambda: T.tanh(a), [a])
    pos = Tensor(np.abs(r.standard_normal((5,))) + 0.5, requires_grad=True)
    _check(lambda: T.sqrt(pos), [pos])
    _check(lambda: T.power(pos, 0.3), [pos])


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5), st.integers(0, 10_000))
def test_linear_and_norm_gradients(n, d_in, d_out, seed):
    r = np.random.default_rng(seed)
    x, w, b = _arr(r, n, d_in), _arr(r, d_out, d_in), _arr(r, d_out)
    _check(lambda: T.linear(x, w, b), [x, w, b])
    _check(lambda: T.matmul(x, w.T), [x, w])
    g, beta = _arr(r, d_in), _arr(r, d_in)
    # with two features the normalized output is +-1 whatever x is, so dx is pure eps noise
    if d_in > 2:
        _check(lambda: T.layer_norm(x, g, beta), [x, g, beta])


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000))
def test_shape_op_gradients(seed):
    r = np.random.default_rng(seed)
    x, y = _arr(r, 2, 3, 4), _arr(r, 2, 2, 4)
    _check(lambda: T.concat([x, y], axis=1), [x, y])
    _check(lambda: x[:, 1:], [x])
    _check(lambda: T.mean(x, axis=(1, 2)), [x])
    _check(lambda: T.transpose(x, (2, 0, 1)), [x])
    _check(lambda: x.reshape(4, 6), [x])


@settings(max_examples=10, deadline=None)
@given(st.integers(2, 5), st.integers(0, 10_000))
def test_lstm_gradients(steps, seed):
    r = np.random.default_rng(seed)
    d, n_in = 3, 2
    x, w, u, b = _arr(r, steps, n_in), _arr(r, 4 * d, n_in), _arr(r, 4 * d, d), _arr(r, 4 * d)
    h0, c0 = r.standard_normal(d), r.standard_normal(d)
    _check(lambda: T.lstm_sequence(x, w, u, b, h0, c0)[0], [x, w, u, b])


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 3), st.sampled_from([(4, 2), (5, 2), (6, 3), (3, 3)]), st.integers(0, 10_000))
def test_frame_and_overlap_add_gradients(extra, wh, seed):
    window, hop = wh
    r = np.random.default_rng(seed)
    x = _arr(r, window + extra * hop + 1)
    _check(lambda: T.frame(x, window, hop), [x])
    fr = _arr(r, extra + 1, window)
    _check(lambda: T.overlap_add(fr, hop), [fr])


@settings(max_examples=8, deadline=None)
@given(st.sampled_from([(1, 0), (2, 1), (1, 1), (2, 0)]), st.integers(0, 10_000))
def test_conv_gradients(sp, seed):
    stride, pad = sp
    r = np.random.default_rng(seed)
    x, w, b = _arr(r, 2, 3, 6, 5), _arr(r, 4, 3, 3, 3), _arr(r, 4)
    _check(lambda: T.conv2d(x, w, b, stride, pad), [x, w, b])
    dw = _arr(r, 3, 1, 3, 3)
    _check(lambda: T.depthwise_conv2d(x, dw, stride, pad), [x, dw])
    s, t = _arr(r, 3), _arr(r, 3)
    _check(lambda: T.channel_affine(x, s, t), [x, s, t])


def naive_conv2d(x, w, stride, pad):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[b, oc, i, j] = np.sum(patch * w[oc])
    return out


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1)])
def test_conv2d_matches_naive_convolution(rng, stride, pad, k):
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, k, k))
    got = T.conv2d(Tensor(x), Tensor(w), stride=stride, padding=pad).data
    np.testing.assert_allclose(got, naive_conv2d(x, w, stride, pad), atol=1e-12)


def test_depthwise_matches_per_channel_naive(rng):
    x = rng.standard_normal((1, 3, 7, 7))
    w = rng.standard_normal((3, 1, 3, 3))
    got = T.depthwise_conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
    for c in range(3):
        want = naive_conv2d(x[:, c:c + 1], w[c:c + 1], 2, 1)
        np.testing.assert_allclose(got[:, c:c + 1], want, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 6), st.sampled_from([(4, 2), (6, 2), (5, 3), (8, 8)]), st.integers(0, 10_000))
def test_frame_overlap_add_adjoint(extra, wh, seed):
    window, hop = wh
    r = np.random.default_rng(seed)
    n_frames = extra + 1
    x = r.standard_normal((n_frames - 1) * hop + window)
    y = r.standard_normal((n_frames, window))
    lhs = np.sum(T.frame(Tensor(x), window, hop).data * y)
    rhs = np.sum(x * T.overlap_add(Tensor(y), hop).data)
    assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))


def lstm_cell_reference(x, w, u, b, h, c):
    """Straight transcription of the LSTM cell equations, gate order i, f, g, o."""
    d = len(h)
    sig = lambda z: 1 / (1 + np.exp(-z))
    outs = []
    for xt in x:
        z = w @ xt + u @ h + b
        i, f, g, o = sig(z[:d]), sig(z[d:2 * d]), np.tanh(z[2 * d:3 * d]), sig(z[3 * d:])
        c = f * c + i * g
        h = o * np.tanh(c)
        outs.append(h)
    return np.array(outs), h, c


def test_lstm_matches_cell_transcription(rng):
    d, n_in, steps = 4, 3, 6
    x = rng.standard_normal((steps, n_in))
    w, u, b = rng.standard_normal((4 * d, n_in)), rng.standard_normal((4 * d, d)), rng.standard_normal(4 * d)
    h0, c0 = rng.standard_normal(d), rng.standard_normal(d)
    H, (h, c) = T.lstm_sequence(Tensor(x), Tensor(w), Tensor(u), Tensor(b), h0, c0)
    want, wh, wc = lstm_cell_reference(x, w, u, b, h0, c0)
    np.testing.assert_allclose(H.data, want, atol=1e-12)
    np.testing.assert_allclose(h, wh, atol=1e-12)
    np.testing.assert_allclose(c, wc, atol=1e-12)


def test_grad_check_tiny_sigmoid_passes(rng):
    W = Tensor(rng.standard_normal((3, 4)) * 1e-3, requires_grad=True)
    x = Tensor(rng.standard_normal((4, 1)))
    rep = grad_check(lambda: T.tsum(T.sigmoid(T.matmul(W, x))), [W], eps=1e-3, tol=1e-3)
    assert rep.passed
    assert rep.checked == 12


def test_grad_check_detects_wrong_sigmoid_derivative(rng):
    W = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    x = Tensor(rng.standard_normal((4, 1)))
    with inject_fault("sigmoid"):
        rep = grad_check(lambda: T.tsum(T.sigmoid(T.matmul(W, x))), [W])
    assert not rep.passed


def test_grad_check_rejects_nondeterministic_function(rng):
    W = Tensor(rng.standard_normal(3), requires_grad=True)
    noise = np.random.default_rng(0)
    with pytest.raises(NonDeterministicFunction):
        grad_check(lambda: T.tsum(W * Tensor(noise.standard_normal(3))), [W])


def test_grad_check_is_deterministic(rng):
    W = Tensor(rng.standard_normal((5, 5)), requires_grad=True)
    f = lambda: T.tsum(T.tanh(T.matmul(W, W)))
    a = grad_check(f, [W], samples=10, seed=3)
    b = grad_check(f, [W], samples=10, seed=3)
    assert a.max_rel_err == b.max_rel_err
    assert [e[:2] for e in a.entries] == [e[:2] for e in b.entries]
