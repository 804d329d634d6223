import numpy as np
import pytest

from cfbeam.neural import layers as L
from cfbeam.neural import optim
from cfbeam.neural import tensor as T

from oracles import fd_check


def projection(rng, shape):
    return rng.standard_normal(shape)


# ----------------------------------------------------------------- forward
def test_identity_dense_returns_input():
    layer = L.Dense(5, 5, init="identity")
    x = np.random.default_rng(0).standard_normal((3, 5))
    np.testing.assert_array_equal(layer(x).data, x)


def test_dropout_zero_train_matches_eval():
    # batch norm uses batch statistics in train mode, so the comparison is made without it
    spec = L.conv_stack((1, 2, 4), (3,), (6,), dropout=0.0, batchnorm=False)
    net = L.build(spec, np.random.default_rng(1))
    x = np.random.default_rng(2).standard_normal((8, 1, 2, 4))
    out, tape = L.forward(net, x, "train", np.random.default_rng(3))
    np.testing.assert_array_equal(out.data, L.forward(net, x, "eval").data)
    assert len(tape.nodes) > 0


def test_forward_is_deterministic():
    spec = L.conv_stack((2, 3, 4), (4, 4), (8, 5), dropout=0.2)
    outs = []
    for _ in range(2):
        net = L.build(spec, np.random.default_rng(7))
        x = np.random.default_rng(8).standard_normal((6, 2, 3, 4))
        outs.append(L.forward(net, x, "train", np.random.default_rng(9))[0].data)
    assert outs[0].tobytes() == outs[1].tobytes()


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        L.Dense(3, 2)(np.zeros((1, 4)))
    with pytest.raises(ValueError):
        L.ModelSpec((4,), (L.LayerSpec("dense", 3, 2),)).shapes()
    with pytest.raises(ValueError):
        L.forward(L.Sequential([]), np.zeros(1), "predict")


def test_non_finite_trips_error():
    x = T.parameter([1.0, 0.0])
    with np.errstate(all="ignore"):
        with pytest.raises(FloatingPointError):
            T.log(x - 1.0)
        with pytest.raises(FloatingPointError):
            T.div(x, T.Tensor([0.0, 0.0]))


# ---------------------------------------------------------------- backward
def test_sum_of_squares_gradient_is_exact():
    p = T.parameter(np.array([[1.5, -2.0], [0.25, 3.0]]))
    with T.Tape() as tape:
        loss = (p * p).sum()
    np.testing.assert_array_equal(tape.gradient(loss, p), 2 * p.data)


def test_constant_loss_has_zero_gradient():
    p = T.parameter(np.ones(3))
    with T.Tape() as tape:
        loss = T.Tensor(4.0) + p.sum() * 0.0
    np.testing.assert_array_equal(tape.gradient(loss, p), 0.0)
    with T.Tape() as tape:
        loss = T.Tensor(np.array(2.0))
    np.testing.assert_array_equal(tape.gradient(loss, {"p": p})["p"], 0.0)


def test_shared_node_visited_once():
    p = T.parameter(np.array([2.0]))
    with T.Tape() as tape:
        q = p * p
        loss = (q + q + q).sum()
    np.testing.assert_allclose(tape.gradient(loss, p), [12.0])


def test_dense_gradients():
    rng = np.random.default_rng(10)
    layer = L.Dense(4, 3, rng)
    x = T.parameter(rng.standard_normal((5, 4)))
    r = projection(rng, (5, 3))
    params = dict(layer.named_params(), x=x)
    assert fd_check(lambda: (layer(x) * r).sum(), params) < 1e-4


def test_conv_gradients():
    rng = np.random.default_rng(11)
    layer = L.Conv2d(2, 3, 3, rng)
    layer.params["bias"].data = rng.standard_normal(3)
    x = T.parameter(rng.standard_normal((2, 2, 3, 4)))
    r = projection(rng, (2, 3, 3, 4))
    assert fd_check(lambda: (layer(x) * r).sum(), dict(layer.named_params(), x=x)) < 1e-4


@pytest.mark.parametrize("ndim", [2, 4])
def test_batchnorm_gradients(ndim):
    rng = np.random.default_rng(12)
    bn = L.BatchNorm(3)
    bn.params["gamma"].data = rng.uniform(0.5, 1.5, 3)
    shape = (6, 3) if ndim == 2 else (4, 3, 2, 2)
    x = T.parameter(rng.standard_normal(shape))
    r = projection(rng, shape)
    assert fd_check(lambda: (bn(x, train=True) * r).sum(), dict(bn.named_params(), x=x)) < 1e-4


def test_leaky_relu_softmax_dropout_gradients():
    rng = np.random.default_rng(13)
    # keep away from the kink at zero
    v = rng.uniform(0.1, 2.0, (4, 5)) * rng.choice([-1, 1], (4, 5))
    x = T.parameter(v)
    r = projection(rng, (4, 5))
    assert fd_check(lambda: (T.leaky_relu(x, 0.01) * r).sum(), {"x": x}) < 1e-4
    assert fd_check(lambda: (T.softmax(x) * r).sum(), {"x": x}) < 1e-4
    assert fd_check(lambda: (T.dropout(x, 0.3, np.random.default_rng(0)) * r).sum(), {"x": x}) < 1e-4


def test_small_model_gradients():
    rng = np.random.default_rng(14)
    spec = L.conv_stack((1, 2, 3), (2,), (4,), dropout=0.0)
    net = L.build(spec, rng)
    x = rng.standard_normal((5, 1, 2, 3))
    r = projection(rng, (5, 4))
    params = net.named_params()
    assert fd_check(lambda: (net(x, train=True) * r).sum(), params) < 1e-4


def test_elementwise_and_reduction_gradients():
    rng = np.random.default_rng(15)
    a = T.parameter(rng.uniform(0.5, 2.0, (3, 4)))
    b = T.parameter(rng.uniform(0.5, 2.0, (4, 2)))
    c = T.parameter(rng.uniform(0.5, 2.0, (1, 4)))

    def f():
        z = T.sqrt(a * c + 1.0) / (a + 2.0) - T.exp(-a) + T.log(a) ** 2
        z = T.concat([z, z[:1] * 3.0], axis=0)
        y = T.matmul(z, b).transpose(1, 0).reshape(-1)
        return T.take(y, np.array([0, 3, 3, 5]), 0).sum() + T.stack([y, y], 1).mean() + z.sum(axis=1).mean()

    assert fd_check(f, {"a": a, "b": b, "c": c}) < 1e-4


# ---------------------------------------------------------------- softmax
def test_softmax_examples():
    np.testing.assert_allclose(T.softmax(np.zeros(5)).data, 0.2)
    p = T.softmax(np.array([50.0, 0.0, 0.0])).data
    assert abs(p[0] - 1) < 1e-20
    assert np.all(p[1:] < 1e-20)
    rng = np.random.default_rng(16)
    z = rng.standard_normal((10, 7)) * 5
    s = T.softmax(z).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(T.softmax(z + 123.4).data, s, atol=1e-12)


def test_leaky_relu_examples():
    x = np.array([0.0, 2.0, -1.0])
    np.testing.assert_allclose(T.leaky_relu(x, 0.01).data, [0.0, 2.0, -0.01])
    p = T.parameter([-0.7])
    with T.Tape() as tape:
        y = T.leaky_relu(p, 0.2).sum()
    fd = (T.leaky_relu(np.array([-0.7 + 1e-5]), 0.2).data - T.leaky_relu(np.array([-0.7 - 1e-5]), 0.2).data) / 2e-5
    np.testing.assert_allclose(tape.gradient(y, p), fd, rtol=1e-9)
    np.testing.assert_allclose(fd, 0.2, rtol=1e-9)


# ------------------------------------------------------------------- Adam
def test_adam_zero_gradient_no_decay_is_noop():
    p = T.parameter(np.array([1.0, -2.0]))
    st = optim.adam_step({"p": p}, {"p": np.zeros(2)}, 1e-2)
    optim.adam_step({"p": p}, {"p": np.zeros(2)}, 1e-2, state=st)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_quadratic_bowl_converges_monotonically():
    target = np.array([3.0, -1.0, 0.5])
    p = T.parameter(np.zeros(3))
    opt = optim.Adam({"p": p}, lr=0.01)
    dist = []
    for _ in range(500):
        with T.Tape() as tape:
            d = p - target
            loss = (d * d).sum()
        opt.step(tape.gradient(loss, {"p": p}))
        dist.append(np.linalg.norm(p.data - target))
    d = np.array(dist[10:])
    assert np.all(np.diff(d) <= 0)
    assert d[-1] < 0.1 * dist[0]


def test_adam_decay_only_shrinks_norm():
    p = T.parameter(np.array([1.0, -2.0, 0.5]))
    st = None
    norms = [np.linalg.norm(p.data)]
    for _ in range(3):
        st = optim.adam_step({"p": p}, {}, 1e-2, weight_decay=0.1, state=st)
        norms.append(np.linalg.norm(p.data))
    assert np.all(np.diff(norms) < 0)


# ------------------------------------------------------ layer properties
def test_batchnorm_eval_is_affine():
    rng = np.random.default_rng(17)
    bn = L.BatchNorm(4)
    for _ in range(5):
        bn(rng.standard_normal((20, 4)) * 3 + 1, train=True)
    a, b = rng.standard_normal((2, 4)), rng.standard_normal((2, 4))
    f = lambda x: bn(x).data
    np.testing.assert_allclose(f(0.3 * a + 0.7 * b), 0.3 * f(a) + 0.7 * f(b), atol=1e-12)
    np.testing.assert_array_equal(f(a), f(a))


def test_batchnorm_single_row_uses_running_statistics():
    bn = L.BatchNorm(3)
    bn.buffers["running_mean"] = np.array([1.0, 0.0, -1.0])
    bn.buffers["running_var"] = np.array([4.0, 1.0, 0.25])
    x = np.array([[3.0, 2.0, 0.5]])
    np.testing.assert_allclose(bn(x, train=True).data, bn(x).data)
    np.testing.assert_array_equal(bn.buffers["running_mean"], [1.0, 0.0, -1.0])


def test_dropout_expectation_matches_eval():
    x = np.linspace(-1, 2, 6)
    rng = np.random.default_rng(18)
    draws = np.stack([T.dropout(x, 0.3, rng).data for _ in range(10_000)])
    se = draws.std(axis=0) / np.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - x) <= 3 * se + 1e-15)
    assert np.all((draws == 0) | np.isclose(draws, x / 0.7))
    with pytest.raises(ValueError):
        L.Dropout(0.2)(x, train=True)
    with pytest.raises(ValueError):
        L.Dropout(1.0)


def test_model_spec_round_trip_and_shapes():
    spec = L.conv_stack((2, 4, 16), (32, 32), (1024,), dropout=0.1)
    assert spec.output_shape == (1024,)
    assert L.ModelSpec.from_dict(spec.to_dict()) == spec
