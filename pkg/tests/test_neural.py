import numpy as np
import pytest

from lapfusion.neural import CheckpointError, Mlp, PositionalEncoding, encode, gradient_check


def test_encoding_zero_and_dim():
    e = encode(np.zeros((1, 3)), 10)
    assert e.shape == (1, 63) == (1, PositionalEncoding(10).dim(3))
    assert not e[0, :3].any()
    sc = e[0, 3:].reshape(3, 10, 2)
    assert not sc[..., 0].any()
    np.testing.assert_array_equal(sc[..., 1], 1.0)
    assert PositionalEncoding(4, include_input=False).dim(3) == 24


def test_encoding_period_two():
    a, b = encode(np.array([[1.0]]), 10), encode(np.array([[-1.0]]), 10)
    assert a[0, 0] != b[0, 0]
    np.testing.assert_allclose(a[0, 1:], b[0, 1:], atol=1e-12)


def test_encoding_rejects_non_finite():
    with pytest.raises(ValueError):
        encode(np.array([[np.nan, 0, 0]]))


def test_forward_trivial_nets():
    net = Mlp([4, 5, 3])
    for p in net.params():
        p[...] = 0
    assert not net(np.ones((2, 4))).any()
    lin = Mlp([3, 3])
    lin.weights[0][...] = np.eye(3)
    x = np.random.default_rng(0).standard_normal((5, 3))
    np.testing.assert_array_equal(lin(x), x)
    with pytest.raises(ValueError):
        net(np.ones((2, 5)))


def test_forward_matches_reimplementation():
    rng = np.random.default_rng(1)
    net = Mlp([6, 9, 2], rng)
    x = rng.standard_normal((7, 6))
    W0, b0, W1, b1 = net.params()
    ref = np.array([[sum(max(0.0, sum(xi[a] * W0[a, h] for a in range(6)) + b0[h]) * W1[h, o] for h in range(9))
                     + b1[o] for o in range(2)] for xi in x])
    np.testing.assert_allclose(net(x), ref, atol=1e-12)


def test_backward_linear_least_squares():
    rng = np.random.default_rng(2)
    net = Mlp([4, 2], rng)
    x, t = rng.standard_normal((10, 4)), rng.standard_normal((10, 2))
    y, cache = net.forward(x)
    gW, gb = net.backward(cache, 2 * (y - t))
    np.testing.assert_allclose(gW, 2 * x.T @ (x @ net.weights[0] + net.biases[0] - t), atol=1e-12)
    np.testing.assert_allclose(gb, 2 * (y - t).sum(0), atol=1e-12)


def test_dead_relu_has_zero_gradient():
    net = Mlp([2, 3, 1], np.random.default_rng(0))
    net.biases[0][1] = -1e3
    _, cache = net.forward(np.ones((4, 2)))
    g = net.backward(cache, np.ones((4, 1)))
    assert not g[0][:, 1].any() and g[1][1] == 0 and g[2][1, 0] == 0


@pytest.mark.parametrize("widths", [[5, 7, 3], [63 + 9, 16, 16, 16, 3], [10, 12, 12, 12, 12, 2]])
def test_gradient_check_small(widths):
    net = Mlp(widths, np.random.default_rng(len(widths)))
    assert gradient_check(net, probes=100, seed=1) < 1e-4


def test_adam_first_step_closed_form():
    net = Mlp([3, 2], np.random.default_rng(0))
    before = [p.copy() for p in net.params()]
    g = [np.random.default_rng(1).standard_normal(p.shape) for p in before]
    net.adam_step(g, lr=1e-3)
    assert net.step_count == 1
    for p0, p, gi in zip(before, net.params(), g):
        np.testing.assert_allclose(p, p0 - 1e-3 * gi / (np.abs(gi) + 1e-8), rtol=1e-12, atol=1e-15)


def test_adam_zero_gradient():
    net = Mlp([3, 2], np.random.default_rng(0))
    net.adam_step([np.ones_like(p) for p in net.params()])
    m1 = [m.copy() for m in net.m]
    before = [p.copy() for p in net.params()]
    net.adam_step([np.zeros_like(p) for p in net.params()])
    for a, b in zip(net.m, m1):
        np.testing.assert_allclose(a, 0.9 * b)
    net2 = Mlp([3, 2], np.random.default_rng(0))
    p0 = [p.copy() for p in net2.params()]
    net2.adam_step([np.zeros_like(p) for p in net2.params()])
    for a, b in zip(net2.params(), p0):
        np.testing.assert_array_equal(a, b)
    assert before  # the first net moved on its nonzero step only


def test_adam_shape_mismatch():
    net = Mlp([3, 2])
    with pytest.raises(ValueError):
        net.adam_step([np.zeros(3)])


def test_adam_quadratic_bowl():
    # a bias-only "network": minimize |w|^2 through the optimizer state
    net = Mlp([1, 8])
    net.weights[0][...] = 0
    net.biases[0][...] = np.random.default_rng(3).uniform(0.1, 0.3, 8)
    w0 = np.linalg.norm(net.biases[0])
    norms = []
    for _ in range(500):
        w = net.biases[0]
        net.adam_step([np.zeros_like(net.weights[0]), 2 * w], lr=1e-3)
        norms.append(np.linalg.norm(net.biases[0]))
    norms = np.array(norms)
    above = norms > 0.1 * w0
    # strictly decreasing while far from the minimum, and below 10% at the end
    assert np.all(np.diff(norms[above]) < 0)
    assert norms[-1] < 0.1 * w0


def test_checkpoint_roundtrip():
    rng = np.random.default_rng(0)
    net = Mlp([5, 6, 2], rng)
    net.adam_step([rng.standard_normal(p.shape) for p in net.params()])
    back = Mlp.from_bytes(net.to_bytes())
    assert back.widths == net.widths and back.step_count == 1
    for a, b in zip(back.params() + back.m + back.v, net.params() + net.m + net.v):
        np.testing.assert_array_equal(a, b)
    lean = Mlp.from_bytes(net.to_bytes(include_optimizer=False))
    assert lean.step_count == 0
    data = net.to_bytes()
    with pytest.raises(CheckpointError):
        Mlp.from_bytes(b"XXXXXXXX" + data[8:])
    with pytest.raises(CheckpointError):
        Mlp.from_bytes(data[:-8])
    with pytest.raises(CheckpointError):
        Mlp.from_bytes(data + b"\x00")


def test_copy_is_independent():
    net = Mlp([2, 3, 1])
    c = net.copy()
    c.weights[0][0, 0] += 1
    assert net.weights[0][0, 0] != c.weights[0][0, 0]


def test_training_bit_reproducible():
    def run():
        rng = np.random.default_rng(7)
        net = Mlp([4, 8, 2], rng)
        x, t = rng.standard_normal((32, 4)), rng.standard_normal((32, 2))
        for _ in range(20):
            y, cache = net.forward(x)
            net.adam_step(net.backward(cache, 2 * (y - t) / len(x)))
        return net.to_bytes()

    assert run() == run()
