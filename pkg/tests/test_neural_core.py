import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import max_rel_error, numeric_grad, preactivation_margin
from quant_rl.errors import NumericError, ShapeError
from quant_rl.neural_core import (
    Adam,
    GradientSet,
    Mlp,
    adam_step,
    backward,
    forward,
    init_mlp,
    input_gradient,
    load_mlp,
    save_mlp,
    soft_update,
)


def _linear(n_in, n_out, w=None):
    w = np.zeros((n_in, n_out)) if w is None else np.asarray(w, dtype=float)
    return Mlp([n_in, n_out], [w], [np.zeros(n_out)], [])


def test_null_network():
    net = Mlp([3, 4, 2], [np.zeros((3, 4)), np.zeros((4, 2))], [np.zeros(4), np.zeros(2)], ["relu"])
    assert np.array_equal(forward(net, [1.0, -2.0, 3.0]), np.zeros(2))


def test_identity_network():
    net = _linear(3, 3, np.eye(3))
    x = np.array([0.5, -1.0, 2.0])
    assert np.array_equal(forward(net, x), x)


def test_softmax_head_normalized(rng):
    net = init_mlp([4, 8, 5], rng, output_activation="softmax")
    out = forward(net, rng.normal(size=(20, 4)) * 50)
    assert np.allclose(out.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_forward_shape_error(rng):
    net = init_mlp([4, 3], rng)
    with pytest.raises(ShapeError):
        forward(net, np.ones(5))


def test_forward_is_pure(rng):
    net = init_mlp([4, 16, 16, 2], rng, output_activation="tanh")
    x = rng.normal(size=(7, 4))
    assert np.array_equal(forward(net, x), forward(net, x))


def test_zero_upstream(rng):
    net = init_mlp([3, 5, 2], rng)
    g = backward(net, rng.normal(size=3), np.zeros(2))
    assert all(np.all(a == 0) for a in g.arrays())


def test_linear_weight_gradient_is_input():
    net = _linear(3, 1, [[1.0], [2.0], [3.0]])
    x = np.array([0.3, -0.7, 1.1])
    g = backward(net, x, [1.0])
    assert np.array_equal(g.weights[0][:, 0], x)
    assert g.biases[0].tolist() == [1.0]


def test_upstream_shape_error(rng):
    net = init_mlp([3, 2], rng)
    with pytest.raises(ShapeError):
        backward(net, np.ones(3), np.ones(3))


ARCHS = [
    ([4, 6, 6, 2], "relu", "identity"),
    ([4, 6, 6, 2], "tanh", "tanh"),
    ([3, 5, 4], "relu", "softmax"),
    ([5, 8, 1], "tanh", "identity"),
    ([6, 7, 7, 3], "relu", "tanh"),
]


@pytest.mark.parametrize("sizes,act,out", ARCHS)
def test_gradient_check(sizes, act, out):
    rng = np.random.default_rng(sum(sizes))
    done = 0
    while done < 20:
        net = init_mlp(sizes, rng, activation=act, output_activation=out)
        for b in net.biases:
            b[...] = rng.normal(scale=0.1, size=b.shape)
        x = rng.normal(size=(3, sizes[0]))
        if act == "relu" and preactivation_margin(net, x) < 1e-3:
            continue
        up = rng.normal(size=(3, sizes[-1]))
        analytic = backward(net, x, up).arrays()
        numeric = numeric_grad(lambda: float((forward(net, x) * up).sum()), net.parameters())
        assert max_rel_error(analytic, numeric) <= 1e-4
        dx = input_gradient(net, x, up)
        ndx = numeric_grad(lambda: float((forward(net, x) * up).sum()), [x])[0]
        assert max_rel_error([dx], [ndx]) <= 1e-4
        done += 1


def test_adam_zero_gradient(rng):
    net = init_mlp([3, 4, 2], rng)
    before = [p.copy() for p in net.parameters()]
    adam_step(net, GradientSet.zeros_like(net), lr=0.1)
    assert all(np.array_equal(a, b) for a, b in zip(before, net.parameters()))


@settings(max_examples=50, deadline=None)
@given(st.floats(-1e3, 1e3).filter(lambda g: abs(g) > 1e-3), st.floats(1e-5, 1e-1))
def test_adam_first_step_is_signed_lr(g, lr):
    p = [np.array([0.7])]
    Adam(lr=lr).step(p, [np.array([g])])
    # first bias-corrected step is lr * g / (|g| + eps)
    assert p[0][0] == pytest.approx(0.7 - lr * np.sign(g), rel=0, abs=lr * 1e-4)


def test_adam_non_finite_gradient(rng):
    net = init_mlp([2, 2], rng)
    g = GradientSet.zeros_like(net)
    g.weights[0][0, 0] = np.nan
    with pytest.raises(NumericError):
        adam_step(net, g)


def test_adam_determinism():
    def run():
        rng = np.random.default_rng(3)
        net = init_mlp([3, 8, 1], rng)
        opt = Adam(lr=1e-2)
        x = rng.normal(size=(16, 3))
        y = x.sum(axis=1, keepdims=True)
        for _ in range(20):
            err = forward(net, x) - y
            adam_step(net, backward(net, x, 2 * err / len(x)), opt)
        return net.parameters()

    assert all(np.array_equal(a, b) for a, b in zip(run(), run()))


def test_adam_fits_linear_target():
    rng = np.random.default_rng(0)
    net = init_mlp([2, 16, 1], rng)
    opt = Adam(lr=1e-2)
    x = rng.normal(size=(64, 2))
    y = (x @ [1.5, -0.5])[:, None]
    for _ in range(500):
        err = forward(net, x) - y
        adam_step(net, backward(net, x, 2 * err / len(x)), opt)
    assert float(np.mean((forward(net, x) - y) ** 2)) < 1e-2


def test_soft_update_examples(rng):
    online = init_mlp([2, 3, 1], rng)
    target = init_mlp([2, 3, 1], rng)
    frozen = [p.copy() for p in target.parameters()]
    soft_update(target, online, 0.0)
    assert all(np.array_equal(a, b) for a, b in zip(frozen, target.parameters()))
    soft_update(target, online, 1.0)
    assert all(np.array_equal(a, b) for a, b in zip(online.parameters(), target.parameters()))
    a = _linear(1, 1, [[0.0]])
    b = _linear(1, 1, [[2.0]])
    soft_update(a, b, 0.5)
    assert a.weights[0][0, 0] == 1.0


def test_soft_update_shape_error(rng):
    with pytest.raises(ShapeError):
        soft_update(init_mlp([2, 3, 1], rng), init_mlp([2, 4, 1], rng), 0.5)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 1.0), st.integers(0, 1000))
def test_soft_update_contracts(tau, seed):
    rng = np.random.default_rng(seed)
    online = init_mlp([3, 4, 2], rng)
    target = init_mlp([3, 4, 2], rng)

    def dist():
        return np.sqrt(sum(float(((a - b) ** 2).sum()) for a, b in zip(target.parameters(), online.parameters())))

    prev = dist()
    for _ in range(5):
        soft_update(target, online, tau)
        d = dist()
        assert d <= prev
        prev = d


def test_save_load_bit_exact(tmp_path, rng):
    net = init_mlp([5, 32, 32, 3], rng, activation="tanh", output_activation="softmax")
    save_mlp(net, tmp_path / "net.json")
    loaded = load_mlp(tmp_path / "net.json")
    x = rng.normal(size=(10, 5))
    assert np.array_equal(forward(net, x), forward(loaded, x))
    assert loaded.layer_sizes == net.layer_sizes and loaded.activations == net.activations


def test_init_is_seeded():
    a = init_mlp([4, 8, 2], np.random.default_rng(9))
    b = init_mlp([4, 8, 2], np.random.default_rng(9))
    assert all(np.array_equal(x, y) for x, y in zip(a.parameters(), b.parameters()))
