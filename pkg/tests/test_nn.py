import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from graphflow import autodiff as ad
from graphflow.autodiff import ShapeError
from graphflow.nn import MLP, AdamState, adam_step, load_params, mlp_forward, one_hot_concat, save_params

from conftest import fd_grad, rel_err


def test_zero_network_outputs_zero():
    net = MLP([3, 5, 2])
    params = {k: np.zeros_like(v) for k, v in net.init(np.random.default_rng(0)).items()}
    assert np.array_equal(net(params, np.array([1.0, -2.0, 3.0])).data, np.zeros(2))


def test_identity_layer():
    net = MLP([4, 4])
    params = {"mlp.W0": np.eye(4), "mlp.b0": np.zeros(4)}
    x = np.array([0.5, -1.0, 2.0, 3.0])
    assert np.array_equal(net(params, x).data, x)


def test_input_gradient_matches_fd(rng):
    net = MLP([2, 16, 1])
    params = net.init(rng)
    x = rng.normal(size=2)
    (g,) = ad.grad(lambda v: ad.vsum(net(params, v)), x)
    num = fd_grad(lambda v: float(net(params, v).data.sum()), x)
    assert rel_err(g, num) < 1e-5


def test_parameter_gradients_match_fd(rng):
    net = MLP([3, 6, 6, 2])
    params = net.init(rng)
    x = rng.normal(size=(4, 3))
    bound = ad.bind(params)
    root = ad.vsum(ad.sigmoid(net(bound, x)))
    grads = ad.backward(root, list(bound.values()))
    for k, leaf in bound.items():
        def f(v, k=k):
            p = dict(params)
            p[k] = v
            return float(ad.sigmoid(net(p, x)).data.sum())

        assert rel_err(grads[leaf.id], fd_grad(f, params[k])) < 1e-5, k


def test_width_mismatch_is_shape_error():
    net = MLP([3, 2])
    with pytest.raises(ShapeError):
        net(net.init(np.random.default_rng(0)), np.ones(4))


@given(st.lists(st.integers(1, 9), min_size=2, max_size=5))
def test_param_count(sizes):
    net = MLP(sizes)
    params = net.init(np.random.default_rng(0))
    assert net.n_params() == sum(v.size for v in params.values())
    assert net.n_params() == sum(i * o + o for i, o in zip(sizes[:-1], sizes[1:]))


def test_init_bounds():
    net = MLP([16, 8])
    params = net.init(np.random.default_rng(0))
    assert np.abs(params["mlp.W0"]).max() <= 0.25


def test_leading_axes_are_batched(rng):
    net = MLP([3, 4, 2])
    params = net.init(rng)
    X = rng.normal(size=(2, 5, 3))
    out = net(params, X).data
    assert out.shape == (2, 5, 2)
    assert np.allclose(out[1, 3], net(params, X[1, 3]).data)


def test_forward_is_pure(rng):
    net = MLP([4, 3])
    params = net.init(rng)
    x = one_hot_concat(np.array([0.3, 0.0]), 2)
    assert np.array_equal(mlp_forward(net, params, x).data, mlp_forward(net, params, x.copy()).data)


# -- one-hot --------------------------------------------------------------------


def test_one_hot_examples():
    assert one_hot_concat(np.zeros(3), 2).tolist() == [0, 0, 0, 0, 1, 0]
    assert one_hot_concat(np.array([1.5, -0.5]), 1).tolist() == [1.5, -0.5, 1, 0]
    v = one_hot_concat(np.zeros(4), 4)
    assert v[-1] == 1 and v[4:7].sum() == 0


@pytest.mark.parametrize("i", [0, 4])
def test_one_hot_out_of_range(i):
    with pytest.raises(ValueError):
        one_hot_concat(np.zeros(3), i)


# -- adam -------------------------------------------------------------------------


def test_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    state = AdamState()
    adam_step(p, {"w": np.zeros(2)}, state)
    assert np.array_equal(p["w"], [1.0, -2.0]) and state.t == 1


def test_first_step_moves_by_lr():
    p = {"w": np.array([0.0, 0.0, 0.0])}
    g = np.array([3.0, -0.01, 100.0])
    adam_step(p, {"w": g}, AdamState(lr=1e-3))
    assert np.allclose(p["w"], -1e-3 * np.sign(g), rtol=1e-4)


def test_constant_gradient_is_monotone():
    p = {"w": np.array([0.5, 0.5])}
    g = np.array([1.0, -2.0])
    state = AdamState(lr=1e-2)
    path = [p["w"].copy()]
    for _ in range(100):
        adam_step(p, {"w": g}, state)
        path.append(p["w"].copy())
    steps = np.diff(np.array(path), axis=0)
    assert np.all(steps[:, 0] < 0) and np.all(steps[:, 1] > 0)


def test_decoupled_weight_decay():
    p = {"w": np.array([2.0])}
    adam_step(p, {"w": np.zeros(1)}, AdamState(lr=0.1, weight_decay=0.5))
    assert p["w"][0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_gradient_shape_checked():
    with pytest.raises(ShapeError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState())


@given(arrays(np.float64, 6, elements=st.floats(-5, 5)), arrays(np.float64, 6, elements=st.floats(-5, 5)),
       st.permutations(list(range(6))))
def test_adam_is_elementwise(p0, g, perm):
    perm = np.array(perm)
    a = {"w": p0.copy()}
    b = {"w": p0[perm].copy()}
    sa, sb = AdamState(weight_decay=0.1), AdamState(weight_decay=0.1)
    for _ in range(3):
        adam_step(a, {"w": g}, sa)
        adam_step(b, {"w": g[perm]}, sb)
    assert np.array_equal(a["w"][perm], b["w"])


# -- serialization ------------------------------------------------------------------


def test_params_round_trip(tmp_path, rng):
    net = MLP([3, 4, 1], name="f")
    params = net.init(rng)
    save_params(tmp_path / "p.bin", params, {"sizes": net.sizes, "activation": "elu", "seed": 7})
    back, meta = load_params(tmp_path / "p.bin")
    assert meta == {"sizes": [3, 4, 1], "activation": "elu", "seed": 7}
    assert back.keys() == params.keys()
    for k in params:
        assert np.array_equal(back[k], params[k])


def test_load_rejects_foreign_file(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"not a container")
    with pytest.raises(ValueError):
        load_params(tmp_path / "x.bin")
