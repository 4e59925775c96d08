import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from fql import numkit as nk
from gradcheck import max_rel_error, numeric_grad


def reference_forward(x, weights, biases, act, out_act):
    """Plain numpy forward pass used as an independent oracle."""
    acts = {"relu": lambda v: np.maximum(v, 0), "tanh": np.tanh, "identity": lambda v: v}
    h = x
    for i, (w, b) in enumerate(zip(weights, biases)):
        h = h @ w
        if b is not None:
            h = h + b
        h = acts[act](h) if i < len(weights) - 1 else acts[out_act](h)
    return h


def make_net(use_bias=True, act="relu", out_act="identity", seed=0, dims=(3, (5, 4), 2)):
    spec = nk.MlpSpec(dims[0], tuple(dims[1]), dims[2], use_bias=use_bias, activation=act, output_activation=out_act)
    return nk.Mlp(spec, np.random.default_rng(seed))


def test_zero_weight_network_outputs_zero():
    net = make_net()
    for p in net.params:
        p.data[...] = 0.0
    out = net(np.random.default_rng(1).normal(size=(7, 3)))
    assert np.all(out.data == 0.0)


def test_bias_free_relu_zero_input_propagates_exactly():
    net = make_net(use_bias=False, dims=(6, (512, 512), 4))
    out = net(np.zeros((3, 6)))
    assert np.array_equal(out.data, np.zeros((3, 4)))


@pytest.mark.parametrize("use_bias", [True, False])
@pytest.mark.parametrize("act,out_act", [("relu", "identity"), ("tanh", "tanh"), ("relu", "tanh")])
def test_forward_matches_reference(use_bias, act, out_act):
    net = make_net(use_bias, act, out_act, seed=3)
    x = np.random.default_rng(4).normal(size=(9, 3))
    expected = reference_forward(x, [w.data for w in net.weights], [None if b is None else b.data for b in net.biases], act, out_act)
    np.testing.assert_allclose(net(x).data, expected, rtol=0, atol=1e-12)


def test_forward_rejects_wrong_width():
    with pytest.raises(ValueError):
        make_net()(np.zeros((2, 4)))


def test_forward_single_vector_input():
    net = make_net(seed=5)
    x = np.array([0.1, -0.2, 0.3])
    np.testing.assert_allclose(net(x).data, net(x[None]).data[0], atol=1e-15)


def test_linear_loss_grad_equals_input():
    x = np.array([1.5, -2.0, 0.25])
    w = nk.Tensor(np.array([0.3, 0.1, -0.7]), requires_grad=True)
    (g,) = nk.grad((w * x).sum(), [w])
    np.testing.assert_array_equal(g, x)


def test_constant_loss_gives_zero_grads():
    net = make_net()
    loss = net(np.ones((2, 3))).sum() * 0.0 + 3.0
    for g in nk.grad(loss, net.params):
        assert np.all(g == 0.0)


def test_grad_of_detached_loss_raises():
    with pytest.raises(RuntimeError):
        nk.grad(nk.Tensor(2.0), [])


@pytest.mark.parametrize("use_bias", [True, False])
@pytest.mark.parametrize("act,out_act", [("relu", "identity"), ("tanh", "tanh")])
def test_network_grad_matches_finite_differences(use_bias, act, out_act):
    net = make_net(use_bias, act, out_act, seed=11)
    x = np.random.default_rng(12).normal(size=(6, 3))
    target = np.random.default_rng(13).normal(size=(6, 2))

    def loss_value():
        with nk.no_grad():
            return float(((net(x) - target) ** 2).mean().data)

    analytic = nk.grad(((net(x) - target) ** 2).mean(), net.params)
    numeric = numeric_grad(loss_value, [p.data for p in net.params])
    assert max_rel_error(analytic, numeric) < 1e-4


def test_elementwise_ops_gradients():
    rng = np.random.default_rng(0)
    a = nk.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    b = nk.Tensor(rng.uniform(0.5, 2.0, size=(1, 3)), requires_grad=True)

    def build():
        c = nk.concat([nk.exp(a * 0.3) / b, nk.softplus(a - b), nk.log(b + 1.0) * a], axis=1)
        return (nk.tanh(c[:, 1:7]) ** 2).sum() + nk.gaussian_kl(a, a[:, ::-1] * 0.1).mean()

    analytic = nk.grad(build(), [a, b])
    numeric = numeric_grad(lambda: float(build().data), [a.data, b.data])
    assert max_rel_error(analytic, numeric) < 1e-4


def test_adam_zero_grad_leaves_params():
    p = nk.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = nk.Adam([p], learning_rate=0.1)
    opt.step([np.zeros(2)])
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert opt.step_count == 1


@pytest.mark.parametrize("g", [1e-3, 0.5, 250.0, -7.0])
def test_adam_first_step_matches_scalar_reference(g):
    lr, b1, b2, eps = 3e-4, 0.9, 0.999, 1e-8
    m = (1 - b1) * g
    v = (1 - b2) * g * g
    expected = 1.0 - lr * (m / (1 - b1)) / (math.sqrt(v / (1 - b2)) + eps)
    p = nk.Tensor(np.array([1.0]), requires_grad=True)
    nk.Adam([p], learning_rate=lr).step([np.array([g])])
    assert p.data[0] == pytest.approx(expected, rel=0, abs=1e-15)
    assert abs(1.0 - p.data[0]) == pytest.approx(lr, rel=1e-4)


def _adam_run(seed):
    rng = np.random.default_rng(seed)
    net = nk.Mlp(nk.MlpSpec(3, (8, 8), 1), rng)
    opt = nk.Adam(net.params, learning_rate=1e-2)
    for _ in range(100):
        x = rng.normal(size=(16, 3))
        opt.minimize(((net(x) - x[:, :1]) ** 2).mean())
    return [p.data.copy() for p in net.params]


def test_adam_runs_are_bitwise_deterministic():
    for a, b in zip(_adam_run(7), _adam_run(7)):
        assert np.array_equal(a, b)


@pytest.mark.parametrize(
    "tau,expected",
    [(1.0, 1.0), (0.0, 0.0), (0.005, 0.005)],
)
def test_polyak_update(tau, expected):
    target = nk.Tensor(np.zeros(3))
    main = nk.Tensor(np.ones(3))
    nk.polyak_update([target], [main], tau)
    np.testing.assert_allclose(target.data, expected, rtol=0, atol=1e-15)


@pytest.mark.parametrize("tau", [-0.1, 1.5])
def test_polyak_rejects_out_of_range(tau):
    with pytest.raises(ValueError):
        nk.polyak_update([nk.Tensor(np.zeros(1))], [nk.Tensor(np.ones(1))], tau)


def test_gaussian_kl_closed_forms():
    assert nk.gaussian_kl(np.zeros(3), np.zeros(3)).item() == 0.0
    assert nk.gaussian_kl(np.array([1.0]), np.array([0.0])).item() == pytest.approx(0.5, abs=1e-15)


def test_gaussian_kl_sigma_two_matches_quadrature():
    sigma = 2.0

    def integrand(x):
        logq = -0.5 * (x / sigma) ** 2 - math.log(sigma) - 0.5 * math.log(2 * math.pi)
        logp = -0.5 * x * x - 0.5 * math.log(2 * math.pi)
        return math.exp(logq) * (logq - logp)

    oracle, _ = integrate.quad(integrand, -60, 60, limit=200)
    assert oracle == pytest.approx(0.806853, abs=1e-6)
    kl = nk.gaussian_kl(np.array([0.0]), np.array([math.log(sigma**2)])).item()
    assert kl == pytest.approx(oracle, abs=1e-10)


def test_gaussian_kl_rejects_nonfinite():
    with pytest.raises(nk.NonFiniteError):
        nk.gaussian_kl(np.array([np.nan]), np.array([0.0]))


@settings(max_examples=200, deadline=None)
@given(
    st.floats(-20, 20, allow_nan=False),
    st.floats(-20, 20, allow_nan=False),
)
def test_gaussian_kl_nonnegative(mu, lv):
    kl = nk.gaussian_kl(np.array([mu]), np.array([lv])).item()
    assert kl >= 0.0
    if mu == 0.0 and lv == 0.0:
        assert kl == 0.0


@pytest.mark.filterwarnings("ignore:invalid value encountered:RuntimeWarning")
def test_nonfinite_forward_raises():
    net = make_net()
    net.weights[0].data[0, 0] = np.inf
    with pytest.raises(nk.NonFiniteError):
        net(np.ones((1, 3)))


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=5), "scalar": np.array(2.5)}
    path = tmp_path / "ck.bin"
    nk.save_checkpoint(path, arrays)
    loaded = nk.load_checkpoint(path)
    assert list(loaded) == list(arrays)
    for k in arrays:
        assert np.array_equal(loaded[k], arrays[k])


def test_checkpoint_manifest_offsets(tmp_path):
    import json
    import struct

    path = tmp_path / "ck.bin"
    nk.save_checkpoint(path, {"x": np.ones((2, 2)), "y": np.zeros(3)})
    raw = path.read_bytes()
    (n,) = struct.unpack("<Q", raw[8:16])
    manifest = json.loads(raw[16 : 16 + n])
    assert [e["offset"] for e in manifest["arrays"]] == [0, 32]
    assert [e["shape"] for e in manifest["arrays"]] == [[2, 2], [3]]
    assert len(raw) == 16 + n + 7 * 8


def test_predict_matches_graph_forward():
    rng = np.random.default_rng(5)
    net = nk.Mlp(nk.MlpSpec(4, (16, 16), 3, output_activation="tanh"), rng)
    x = rng.normal(size=(20, 4))
    np.testing.assert_array_equal(net.predict(x), net(x).data)
    np.testing.assert_array_equal(net.predict(x[0]), net(x[0]).data)
    np.testing.assert_allclose(net.predict(x, np.float32), net(x).data, atol=1e-5)


def test_adam_views_track_parameters():
    rng = np.random.default_rng(6)
    net = nk.Mlp(nk.MlpSpec(3, (4,), 2), rng)
    opt = nk.Adam(net.params, learning_rate=0.1)
    before = [p.data.copy() for p in net.params]
    opt.step([np.ones_like(p.data) for p in net.params])
    for p, b in zip(net.params, before):
        np.testing.assert_allclose(p.data, b - 0.1, rtol=0, atol=1e-7)
    for p in net.params:
        p.data[...] = 0.0
    assert not opt._flat.any()
    with pytest.raises(ValueError):
        nk.Adam(net.params + net.params[:1])
