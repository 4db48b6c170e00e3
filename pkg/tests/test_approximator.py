import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hgac.approximator import (
    Adam,
    MlpSpec,
    OptimizerState,
    ParamStore,
    adam_step,
    glorot,
    init_mlp,
    log_softmax,
    mlp_backward,
    mlp_forward,
    polyak_update,
    softmax,
)
from hgac.errors import ConfigError, NumericError

import oracles


def _net(rng, widths, hidden="relu"):
    spec = MlpSpec(widths, hidden=hidden)
    params = ParamStore()
    init_mlp(spec, params, "net", rng)
    return spec, params


def test_zero_net_outputs_zero(rng):
    spec, params = _net(rng, (3, 8, 2))
    for n in params.names():
        params[n][...] = 0.0
    y, _ = mlp_forward(spec, params, "net", rng.normal(size=(5, 3)))
    assert np.all(y == 0.0)


def test_identity_layer(rng):
    spec, params = _net(rng, (4, 4))
    params["net.W0"][...] = np.eye(4)
    x = rng.normal(size=(6, 4))
    y, _ = mlp_forward(spec, params, "net", x)
    assert np.array_equal(y, x)


def test_forward_matches_reference(rng):
    spec, params = _net(rng, (3, 7, 5, 2))
    for n in params.names():
        params[n][...] += rng.normal(0, 0.2, params[n].shape)
    x = rng.normal(size=(4, 3))
    y, _ = mlp_forward(spec, params, "net", x)
    ref = oracles.mlp(x, [params[f"net.W{k}"] for k in range(3)], [params[f"net.b{k}"] for k in range(3)])
    np.testing.assert_allclose(y, ref, rtol=1e-13)


def test_width_mismatch(rng):
    spec, params = _net(rng, (3, 2))
    with pytest.raises(ConfigError):
        mlp_forward(spec, params, "net", np.ones((2, 4)))


def test_spec_validation():
    with pytest.raises(ConfigError):
        MlpSpec((3,))
    with pytest.raises(ConfigError):
        MlpSpec((3, 0, 1))
    with pytest.raises(ConfigError):
        MlpSpec((3, 1), hidden="swish")


@pytest.mark.parametrize("hidden", ["relu", "tanh"])
def test_gradients_finite_differences(rng, hidden):
    spec, params = _net(rng, (3, 6, 2), hidden=hidden)
    for n in params.names():
        params[n][...] += rng.normal(0, 0.3, params[n].shape)
    x = rng.normal(size=(5, 3))

    def loss():
        return float((mlp_forward(spec, params, "net", x, record=False)[0] ** 2).sum())

    y, rec = mlp_forward(spec, params, "net", x)
    params.zero_grad()
    gx = mlp_backward(spec, params, "net", rec, 2 * y)
    step = 1e-5
    for name in params.names() + ["x"]:
        arr = x if name == "x" else params[name]
        g = gx if name == "x" else params.grad(name)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + step
            lp = loss()
            arr[idx] = old - step
            lm = loss()
            arr[idx] = old
            fd = (lp - lm) / (2 * step)
            assert abs(fd - g[idx]) <= 1e-4 * max(abs(fd), abs(g[idx]), 1e-6), (name, idx)


def test_glorot_bounds(rng):
    W = glorot(rng, 30, 10)
    assert W.shape == (30, 10)
    assert np.abs(W).max() <= np.sqrt(6 / 40)


def test_softmax_stable():
    z = np.array([[1000.0, 1000.0, -1000.0]])
    np.testing.assert_allclose(softmax(z), [[0.5, 0.5, 0.0]])
    assert np.all(np.isfinite(log_softmax(z)[:, :2]))


def _single(value, grad=None):
    p = ParamStore()
    p.add("x", value)
    if grad is not None:
        p.accumulate("x", grad)
    return p


def test_adam_zero_gradient_keeps_params():
    p = _single([1.0, -2.0])
    opt = Adam(p)
    for _ in range(5):
        opt.step()
    assert p["x"].tolist() == [1.0, -2.0]


def test_adam_moves_against_gradient():
    p = _single([0.0, 0.0])
    opt = Adam(p, lr=0.01)
    for _ in range(50):
        p.accumulate("x", np.array([3.0, -0.5]))
        opt.step()
    assert p["x"][0] < 0 < p["x"][1]


def test_adam_one_step_from_known_moments():
    p = _single([0.5], grad=[0.2])
    st_ = OptimizerState(lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8, step=3)
    st_.m["x"] = np.array([0.05])
    st_.v["x"] = np.array([0.004])
    adam_step(p, st_)
    # hand evaluation
    m = 0.9 * 0.05 + 0.1 * 0.2
    v = 0.999 * 0.004 + 0.001 * 0.04
    mh = m / (1 - 0.9**4)
    vh = v / (1 - 0.999**4)
    expected = 0.5 - 0.1 * mh / (np.sqrt(vh) + 1e-8)
    assert abs(p["x"][0] - expected) <= 1e-12
    assert p.grad("x")[0] == 0.0


def test_adam_non_finite_gradient_names_parameter():
    p = _single([0.0], grad=[np.inf])
    with pytest.raises(NumericError, match="'x'"):
        Adam(p).step()


def test_adam_grad_clip_scales():
    p = _single([0.0, 0.0], grad=[30.0, 40.0])
    opt = Adam(p, lr=1.0, max_grad_norm=5.0)
    opt.step()
    # after one bias-corrected step each coordinate moves by ~lr regardless of scale
    np.testing.assert_allclose(p["x"], [-1.0, -1.0], rtol=1e-6)


def test_polyak_cases():
    t, o = _single([0.0]), _single([1.0])
    polyak_update(t, o, 0.005)
    assert t["x"][0] == 0.005
    polyak_update(t, o, 0.0)
    assert t["x"][0] == 0.005
    o["x"][0] = 0.123456789
    polyak_update(t, o, 1.0)
    assert t["x"][0] == o["x"][0]


def test_polyak_layout_mismatch():
    t = _single([0.0])
    o = ParamStore()
    o.add("y", [1.0])
    with pytest.raises(ConfigError):
        polyak_update(t, o, 0.5)


def test_duplicate_names_rejected():
    p = _single([1.0])
    with pytest.raises(ConfigError):
        p.add("x", [2.0])


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(1, 4)), min_size=1, max_size=5), st.integers(0, 2**32 - 1))
def test_checkpoint_roundtrip_bit_exact(shapes, seed):
    r = np.random.default_rng(seed)
    p = ParamStore()
    for k, (ndim, size) in enumerate(shapes):
        p.add(f"layer{k}.W", r.normal(size=(size,) * ndim) * 10.0 ** r.integers(-300, 300))
    q = ParamStore.from_bytes(p.to_bytes())
    assert q.names() == p.names()
    for n in p.names():
        assert q[n].shape == p[n].shape
        assert q[n].tobytes() == p[n].tobytes()


def test_save_load_with_manifest(tmp_path, rng):
    _, params = _net(rng, (3, 4, 2))
    manifest = params.save(tmp_path / "ck.bin")
    assert manifest["bytes"] == (tmp_path / "ck.bin").stat().st_size
    back = ParamStore.load(tmp_path / "ck.bin")
    assert back.to_bytes() == params.to_bytes()
    blob = bytearray((tmp_path / "ck.bin").read_bytes())
    blob[-1] ^= 1
    (tmp_path / "ck.bin").write_bytes(bytes(blob))
    with pytest.raises(ConfigError):
        ParamStore.load(tmp_path / "ck.bin")


def test_merged_and_split(rng):
    _, a = _net(rng, (2, 2))
    _, b = _net(rng, (3, 1))
    m = ParamStore.merged({"a": a, "b": b})
    assert m.names() == ["a/net.W0", "a/net.b0", "b/net.W0", "b/net.b0"]
    assert m.split("b").to_bytes() == b.to_bytes()
