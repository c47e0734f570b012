import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from livemap.neural import DenseNet, OptimizerState, dump_params, grad_check, parse_params, step


def nudged_batch(net, rng, n=6):
    """Random batch whose pre-activations stay clear of the rectifier kink."""
    x = rng.normal(size=(n, net.sizes[0]))
    for _ in range(50):
        _, cache = net.forward(x, keep=True)
        zs = cache[1::2]
        if min(np.abs(z).min() for z in zs) > 1e-3:
            break
        x = x + rng.normal(scale=1e-2, size=x.shape)
    return x, rng.normal(size=n), rng.integers(net.sizes[-1], size=n), rng.uniform(0.2, 1.0, n)


def test_zero_net_outputs_zero():
    net = DenseNet([3, 4, 2], params=[(np.zeros((3, 4)), np.zeros(4)), (np.zeros((4, 2)), np.zeros(2))])
    assert np.array_equal(net.forward(np.ones(3)), np.zeros(2))


def test_leaky_hand_trace():
    net = DenseNet([1, 1, 1], alpha=0.01, params=[(np.ones((1, 1)), np.zeros(1)), (np.ones((1, 1)), np.zeros(1))])
    assert net.forward(np.array([-2.0]))[0] == pytest.approx(-0.02)


def test_identity_linear_layer():
    net = DenseNet([3, 3], params=[(np.eye(3), np.zeros(3))])
    x = np.array([1.0, -2.0, 3.5])
    assert np.array_equal(net.forward(x), x)


def test_forward_rejects_wrong_width():
    with pytest.raises(ValueError):
        DenseNet([3, 2], rng=0).forward(np.ones(4))


def test_backward_zero_at_target():
    net = DenseNet([2, 4, 3], rng=0)
    x = np.array([[0.3, -0.2]])
    q = net.forward(x)[0]
    grads, td = net.backward(x, [q[1]], [1], [1.0])
    assert td[0] == 0.0
    assert all(np.all(g == 0) for pair in grads for g in pair)


def test_backward_linear_scalar():
    net = DenseNet([1, 1], params=[(np.array([[1.5]]), np.zeros(1))])
    grads, td = net.backward(np.array([[2.0]]), [1.0], [0], [1.0])
    assert grads[0][0][0, 0] == pytest.approx(2 * (3.0 - 1.0) * 2.0)
    assert td[0] == pytest.approx(-2.0)


def test_backward_linear_in_weights():
    rng = np.random.default_rng(0)
    net = DenseNet([4, 8, 3], rng=1)
    x, t, a, w = nudged_batch(net, rng)
    g1, _ = net.backward(x, t, a, w)
    g2, _ = net.backward(x, t, a, 2 * w)
    for p1, p2 in zip(g1, g2):
        for u, v in zip(p1, p2):
            assert np.allclose(v, 2 * u)


def test_backward_touches_only_selected_action():
    net = DenseNet([3, 3], params=[(np.eye(3), np.zeros(3))])
    grads, _ = net.backward(np.ones((1, 3)), [0.0], [2], [1.0])
    gW = grads[0][0]
    assert np.all(gW[:, :2] == 0) and np.any(gW[:, 2] != 0)


@pytest.mark.parametrize("seed", range(5))
def test_grad_check_random_net(seed):
    rng = np.random.default_rng(seed)
    net = DenseNet([4, 8, 8, 3], rng=seed)
    assert grad_check(net, nudged_batch(net, rng)) < 1e-5


def test_grad_check_zero_loss():
    net = DenseNet([2, 3, 2], rng=0)
    x = np.array([[0.5, -0.5]])
    q = net.forward(x)[0]
    grads, _ = net.backward(x, [q[0]], [0], [1.0])
    assert all(np.all(g == 0) for pair in grads for g in pair)
    assert grad_check(net, (x, [q[0]], [0], [1.0])) < 1e-5


def test_grad_check_catches_corruption():
    rng = np.random.default_rng(3)
    net = DenseNet([4, 8, 8, 3], rng=3)
    batch = nudged_batch(net, rng)
    clean = net.backward

    def corrupted(*args):
        grads, td = clean(*args)
        grads[0][0][0, 0] += 0.5 + abs(grads[0][0][0, 0])
        return grads, td

    net.backward = corrupted
    assert grad_check(net, batch) > 1e-2


@settings(max_examples=30, deadline=None)
@given(c=st.floats(0.01, 100.0), seed=st.integers(0, 1000))
def test_positive_homogeneity(c, seed):
    net = DenseNet([3, 5, 5, 2], rng=seed)
    for W, b in net.params:
        b[...] = 0.0
    x = np.random.default_rng(seed).normal(size=3)
    _, c1 = net.forward(x, keep=True)
    _, c2 = net.forward(c * x, keep=True)
    for z1, z2 in zip(c1[1::2], c2[1::2]):
        assert np.allclose(z2, c * z1, rtol=1e-9, atol=1e-12)


def test_step_zero_gradient_is_noop():
    net = DenseNet([2, 3, 1], rng=0)
    before = [p.copy() for pair in net.params for p in pair]
    zero = [(np.zeros_like(W), np.zeros_like(b)) for W, b in net.params]
    step(net, zero, OptimizerState.for_net(net))
    assert all(np.array_equal(a, p) for a, p in zip(before, [p for pair in net.params for p in pair]))


def test_step_descends_scalar():
    net = DenseNet([1, 1], params=[(np.array([[1.0]]), np.zeros(1))])
    step(net, [(np.array([[0.3]]), np.zeros(1))], OptimizerState.for_net(net))
    assert net.params[0][0][0, 0] < 1.0


def test_step_deterministic():
    def run():
        net = DenseNet([3, 4, 2], rng=7)
        opt = OptimizerState.for_net(net)
        rng = np.random.default_rng(0)
        for _ in range(3):
            g, _ = net.backward(rng.normal(size=(4, 3)), rng.normal(size=4), rng.integers(2, size=4), np.ones(4))
            step(net, g, opt)
        return dump_params(net)
    assert run() == run()


def test_training_decreases_loss():
    rng = np.random.default_rng(0)
    net = DenseNet([3, 16, 1], rng=0)
    opt = OptimizerState.for_net(net)
    x = rng.normal(size=(64, 3))
    y = x @ np.array([0.5, -1.0, 2.0]) + 0.3
    a, w = np.zeros(64, dtype=int), np.ones(64)
    losses = []
    for _ in range(100):
        losses.append(net.loss(x, y, a, w))
        g, _ = net.backward(x, y, a, w)
        step(net, g, opt)
    assert losses[-1] < losses[0]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_checkpoint_round_trip(tmp_path):
    net = DenseNet([5, 7, 3], alpha=0.02, rng=4)
    path = tmp_path / "net.bin"
    net.save(path)
    back = DenseNet.load(path)
    assert back.sizes == net.sizes and back.alpha == net.alpha
    assert dump_params(back) == dump_params(net)
    blob = path.read_bytes()
    assert blob[:8] == b"LMQNET01"
    with pytest.raises(ValueError):
        parse_params(b"XXXXXXXX" + blob[8:])
