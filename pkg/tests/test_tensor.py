import numpy as np
import pytest

from tnet import tensor as T
from tnet.optim import Adam
from tnet.oracles import naive_conv2d, windowed_max
from tnet.tensor import ShapeError, Tensor


def test_conv2d_sum_of_ones():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)), padding=0)
    assert out.shape == (1, 1, 1, 1)
    assert out.data[0, 0, 0, 0] == 9.0


def test_conv2d_identity_kernel(rng):
    x = rng.standard_normal((2, 1, 5, 7)).astype(np.float32)
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1), np.float32)), Tensor(np.zeros(1, np.float32)))
    np.testing.assert_array_equal(out.data, x)


def test_conv2d_matches_naive_oracle(rng):
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    for pad in (0, 1):
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), padding=pad)
        assert out.shape == (2, 4, 8 + 2 * pad - 2, 8 + 2 * pad - 2)
        np.testing.assert_allclose(out.data, naive_conv2d(x, w, b, pad), atol=1e-6, rtol=0)


@pytest.mark.parametrize("shape", [(1, 1, 4, 4), (2, 4, 16, 16), (1, 2, 5, 9)])
def test_conv2d_oracle_float32(rng, shape):
    x = rng.standard_normal(shape).astype(np.float32)
    w = (rng.standard_normal((3, shape[1], 3, 3)) * 0.3).astype(np.float32)
    out = T.conv2d(Tensor(x), Tensor(w), padding=1)
    np.testing.assert_allclose(out.data, naive_conv2d(x, w, None, 1), atol=1e-5)


def test_conv2d_rejects_channel_mismatch():
    with pytest.raises(ShapeError, match="C=3"):
        T.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 2, 3, 3))), padding=1)


def test_maxpool_basic_and_tie_rule():
    out = T.maxpool2(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])))
    assert out.data.tolist() == [[[[4.0]]]]

    x = Tensor(np.full((1, 1, 2, 2), 3.0), requires_grad=True)
    y = T.maxpool2(x)
    assert y.data.item() == 3.0
    T.tsum(y).backward()
    assert x.grad.tolist() == [[[[1.0, 0.0], [0.0, 0.0]]]]


def test_maxpool_matches_window_scan(rng):
    x = rng.standard_normal((1, 1, 6, 6))
    np.testing.assert_array_equal(T.maxpool2(Tensor(x)).data, windowed_max(x))


def test_maxpool_rejects_odd():
    with pytest.raises(ShapeError):
        T.maxpool2(Tensor(np.zeros((1, 1, 3, 4))))


def test_upsample():
    assert T.upsample2_nearest(Tensor(np.array([[[[5.0]]]]))).data.tolist() == [[[[5.0, 5.0], [5.0, 5.0]]]]


def test_upsample_then_lattice_sample_is_identity(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    np.testing.assert_array_equal(T.upsample2_nearest(Tensor(x)).data[:, :, ::2, ::2], x)


def test_upsample_gradient_is_four():
    x = Tensor(np.zeros((1, 2, 3, 3)), requires_grad=True)
    T.tsum(T.upsample2_nearest(x)).backward()
    np.testing.assert_array_equal(x.grad, np.full((1, 2, 3, 3), 4.0))


def test_sigmoid_values():
    s = T.sigmoid(Tensor(np.array([0.0, -1000.0, 1000.0, -50.0])))
    assert s.data[0] == 0.5
    assert np.all(np.isfinite(s.data))
    assert s.data[1] == 0.0 or s.data[1] < 1e-300
    assert 0 < s.data[3] < 1e-20


def test_sigmoid_derivative_at_zero():
    x = Tensor(np.array([0.0]), requires_grad=True)
    T.tsum(T.sigmoid(x)).backward()
    h = 1e-6
    fd = (1 / (1 + np.exp(-h)) - 1 / (1 + np.exp(h))) / (2 * h)
    assert x.grad[0] == pytest.approx(0.25, abs=1e-12)
    assert abs(x.grad[0] - fd) < 1e-6


def test_relu():
    x = Tensor(np.array([-1.0, 2.0, 0.0, 0.5]), requires_grad=True)
    y = T.relu(x)
    assert y.data.tolist() == [0.0, 2.0, 0.0, 0.5]
    T.tsum(y).backward()
    assert x.grad.tolist() == [0.0, 1.0, 0.0, 1.0]


def test_concat_shapes_and_empty_identity(rng):
    a = Tensor(rng.standard_normal((1, 2, 4, 4)))
    b = Tensor(rng.standard_normal((1, 3, 4, 4)))
    assert T.concat_channels(a, b).shape == (1, 5, 4, 4)
    empty = Tensor(np.zeros((1, 0, 4, 4)))
    np.testing.assert_array_equal(T.concat_channels(a, empty).data, a.data)
    with pytest.raises(ShapeError):
        T.concat_channels(a, Tensor(np.zeros((1, 1, 4, 5))))


def test_backward_examples():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    T.tsum(x).backward()
    assert x.grad.tolist() == [1.0, 1.0, 1.0]

    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    T.tsum(x * x).backward()
    assert x.grad.tolist() == [2.0, 4.0]


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_grads_accumulate_until_zeroed():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    T.tsum(x * x).backward()
    T.tsum(x * x).backward()
    assert x.grad.tolist() == [4.0, 8.0]
    x.zero_grad()
    assert x.grad.tolist() == [0.0, 0.0]


def test_grad_present_iff_requires_grad():
    a = Tensor(np.ones((2, 2)))
    b = Tensor(np.ones((2, 2)), requires_grad=True)
    c = a * b
    assert a.grad is None
    assert b.grad.shape == (2, 2)
    assert c.requires_grad and c.grad.shape == (2, 2)


def test_backward_visits_in_reverse_record_order(monkeypatch):
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = x * 3.0
    z = T.sigmoid(y) + y
    loss = T.tsum(z)
    visited = []
    for t in (y, z, loss):
        fn = t._backward

        def wrapped(g, fn=fn, t=t):
            visited.append(t._seq)
            return fn(g)

        t._backward = wrapped
    loss.backward()
    assert visited == sorted(visited, reverse=True)


def test_float32_stays_float32(rng):
    x = Tensor(rng.standard_normal((1, 2, 4, 4)).astype(np.float32))
    w = Tensor(rng.standard_normal((3, 2, 3, 3)).astype(np.float32), requires_grad=True)
    y = T.sigmoid(T.conv2d(x, w, padding=1))
    loss = 1.0 - T.mean(y * 2.0)
    assert loss.dtype == np.float32
    loss.backward()
    assert w.grad.dtype == np.float32


def test_finite_on_bounded_inputs(rng):
    x = Tensor(rng.uniform(-1e3, 1e3, (2, 3, 8, 8)), requires_grad=True)
    w = Tensor(rng.uniform(-1, 1, (2, 3, 3, 3)), requires_grad=True)
    y = T.sigmoid(T.conv2d(T.relu(x), w, padding=1))
    p = T.softmax(T.reshape(T.conv2d(x, w, padding=1), (2, -1)))
    T.tsum(T.upsample2_nearest(T.maxpool2(y))) .backward()
    T.tsum(p * p).backward()
    for arr in (y.data, p.data, x.grad, w.grad):
        assert np.all(np.isfinite(arr))


def test_replay_determinism(rng):
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)

    def run():
        wt = Tensor(w.copy(), requires_grad=True)
        y = T.tsum(T.sigmoid(T.conv2d(Tensor(x), wt, padding=1)))
        y.backward()
        return y.data.tobytes(), wt.grad.tobytes()

    assert run() == run()


def test_adam_first_step_matches_formula():
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([1.0])
    opt = Adam([p], lr=1e-3, betas=(0.9, 0.999), eps=1e-8)
    opt.step()
    m_hat = (0.1 * 1.0) / (1 - 0.9)
    v_hat = (0.001 * 1.0) / (1 - 0.999)
    expected = 1.0 - 1e-3 * m_hat / (np.sqrt(v_hat) + 1e-8)
    assert p.data[0] == pytest.approx(expected, abs=1e-15)
    assert p.data[0] == pytest.approx(0.999, abs=1e-9)
    assert opt.step_count == 1


def test_adam_zero_gradient_leaves_params(rng):
    p = Tensor(rng.standard_normal(5), requires_grad=True)
    before = p.data.copy()
    opt = Adam([p])
    for _ in range(5):
        opt.zero_grad()
        opt.step()
    np.testing.assert_array_equal(p.data, before)


def test_adam_missing_grad_rejected():
    p = Tensor(np.ones(2), requires_grad=True)
    opt = Adam([p])
    p.grad = None
    p.requires_grad = False
    with pytest.raises(ValueError):
        opt.step()


def test_adam_trajectories_bit_identical():
    def run():
        r = np.random.default_rng(5)
        w = Tensor(r.standard_normal((3, 2, 3, 3)).astype(np.float32), requires_grad=True)
        x = Tensor(r.standard_normal((2, 2, 6, 6)).astype(np.float32))
        opt = Adam([w])
        for _ in range(4):
            opt.zero_grad()
            T.mean(T.sigmoid(T.conv2d(x, w, padding=1))).backward()
            opt.step()
        return w.data.tobytes()

    assert run() == run()
