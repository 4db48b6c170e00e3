import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hgac.approximator import ParamStore, init_mlp
from hgac.errors import ConfigError, NumericError
from hgac.hypergraph import (
    attention_incidence,
    attention_incidence_backward,
    compute_degrees,
    conv_backward,
    conv_forward,
    generator_spec,
    hyperedge_weights,
    hypergraph_convolve,
    mlp_incidence,
    propagation,
    propagation_backward,
    static_incidence,
)

import oracles


def test_degrees_small_cases():
    dv, de = compute_degrees(np.ones((2, 1)), np.array([1.0]))
    assert dv.tolist() == [1.0, 1.0] and de.tolist() == [2.0]
    dv, de = compute_degrees(np.eye(3), np.full(3, 2.0))
    assert dv.tolist() == [2.0, 2.0, 2.0] and de.tolist() == [1.0, 1.0, 1.0]


def test_degrees_match_double_loop(rng):
    for _ in range(20):
        H = rng.uniform(size=(4, 3))
        w = rng.uniform(0.1, 3.0, size=3)
        dv, de = compute_degrees(H, w)
        dv_o, de_o = oracles.degrees_loop(H, w)
        np.testing.assert_allclose(dv, dv_o, rtol=0, atol=1e-12)
        np.testing.assert_allclose(de, de_o, rtol=0, atol=1e-12)


def test_degrees_shape_mismatch():
    with pytest.raises(ConfigError):
        compute_degrees(np.ones((3, 2)), np.ones(3))


def test_weights_positive():
    w = hyperedge_weights(np.array([-30.0, 0.0, 4.0]))
    assert np.all(w > 0) and w[1] == 1.0


def test_identity_hypergraph_returns_input(backend, rng):
    for n in range(1, 7):
        X = rng.normal(size=(n, 5))
        out = hypergraph_convolve(X, np.eye(n), np.ones(n), np.eye(5))
        assert np.array_equal(out, X)


def test_single_vertex(backend, rng):
    X = rng.normal(size=(1, 3))
    P = rng.normal(size=(3, 2))
    out = hypergraph_convolve(X, np.ones((1, 1)), np.ones(1), P)
    np.testing.assert_allclose(out, X @ P, rtol=1e-14)


def test_conv_matches_matrix_chain(backend, rng):
    X = rng.normal(size=(4, 3))
    H = rng.uniform(size=(4, 3))
    w = rng.uniform(0.2, 2.0, size=3)
    P = rng.normal(size=(3, 2))
    out = hypergraph_convolve(X, H, w, P)
    ref = oracles.conv_chain(X, H, w, P)
    assert np.max(np.abs(out - ref)) / np.max(np.abs(ref)) <= 1e-10


def test_conv_batched_matches_loop(backend, rng):
    X = rng.normal(size=(5, 4, 3))
    H = rng.uniform(size=(5, 4, 6))
    w = rng.uniform(0.2, 2.0, size=6)
    P = rng.normal(size=(3, 2))
    out = hypergraph_convolve(X, H, w, P, act="relu")
    for b in range(5):
        ref = np.maximum(oracles.conv_chain(X[b], H[b], w, P), 0.0)
        np.testing.assert_allclose(out[b], ref, rtol=1e-11, atol=1e-13)


def test_non_finite_input_names_index():
    X = np.zeros((3, 2))
    X[1, 0] = np.nan
    with pytest.raises(NumericError, match=r"X at index \(1, 0\)"):
        hypergraph_convolve(X, np.eye(3), np.ones(3), np.eye(2))


def test_zero_degree_is_clamped(backend):
    # an isolated vertex and an empty hyperedge: output stays finite
    H = np.array([[1.0, 0.0], [0.0, 0.0]])
    out = hypergraph_convolve(np.ones((2, 2)), H, np.ones(2), np.eye(2))
    assert np.all(np.isfinite(out))
    assert out[1].tolist() == [0.0, 0.0]


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10**6))
def test_permutation_equivariance(n, m, seed):
    r = np.random.default_rng(seed)
    X = r.normal(size=(n, 3))
    H = r.uniform(size=(n, m))
    w = r.uniform(0.2, 2.0, size=m)
    P = r.normal(size=(3, 2))
    perm = r.permutation(n)
    out = hypergraph_convolve(X, H, w, P, act="relu")
    out_p = hypergraph_convolve(X[perm], H[perm], w, P, act="relu")
    np.testing.assert_allclose(out_p, out[perm], rtol=0, atol=1e-9)


def _fd_check(f, x, g, step=1e-5, tol=1e-4):
    flat = x.reshape(-1)
    for idx in range(flat.size):
        old = flat[idx]
        flat[idx] = old + step
        lp = f()
        flat[idx] = old - step
        lm = f()
        flat[idx] = old
        fd = (lp - lm) / (2 * step)
        an = g.reshape(-1)[idx]
        assert abs(fd - an) <= tol * max(abs(fd), abs(an), 1e-6), (idx, fd, an)


def test_conv_gradients_all_inputs(backend, rng):
    X = rng.normal(size=(2, 4, 3))
    H = rng.uniform(0.05, 1.0, size=(2, 4, 3))
    w = rng.uniform(0.3, 2.0, size=3)
    P = rng.normal(size=(3, 2))

    def loss():
        return float((hypergraph_convolve(X, H, w, P, act="tanh") ** 2).sum())

    out, rec = conv_forward(X, H, w, P, act="tanh")
    gX, gG, gP = conv_backward(rec, 2 * out)
    gH, gw = propagation_backward(H, w, rec.dv, rec.de, gG)
    for arr, g in ((X, gX), (P, gP), (H, gH), (w, gw)):
        _fd_check(loss, arr, g)


def test_mlp_incidence_zero_final_layer_is_uniform(rng):
    params = ParamStore()
    init_mlp(generator_spec(6, 5), params, "gen", rng)
    params["gen.W1"][...] = 0.0
    H = mlp_incidence(rng.normal(size=(4, 6)), params, "gen", 5)
    assert np.all(H == 0.2)


def test_mlp_incidence_rows(rng):
    params = ParamStore()
    init_mlp(generator_spec(6, 3), params, "gen", rng)
    for name in params.names():
        params[name][...] += rng.normal(0, 1.0, params[name].shape)
    x = rng.normal(size=(5, 6))
    x[3] = x[1]
    H = mlp_incidence(x, params, "gen", 3)
    assert np.array_equal(H[1], H[3])
    np.testing.assert_allclose(H.sum(axis=1), 1.0, atol=1e-12)
    logits = oracles.mlp(x, [params["gen.W0"], params["gen.W1"]], [params["gen.b0"], params["gen.b1"]])
    np.testing.assert_allclose(H, oracles.softmax_lse(logits), rtol=0, atol=1e-9)


def test_mlp_incidence_needs_an_edge():
    with pytest.raises(ConfigError):
        generator_spec(4, 0)


def test_attention_identical_features():
    x = np.tile(np.arange(3.0), (4, 1))
    r = np.random.default_rng(0)
    H = attention_incidence(x, r.normal(size=(2, 3)), r.normal(size=(2, 3)))
    off = ~np.eye(4, dtype=bool)
    np.testing.assert_allclose(H[off], 0.25, rtol=1e-14)
    assert np.all(np.diag(H) == 1.0)


def test_attention_single_agent():
    H = attention_incidence(np.ones((1, 3)), np.ones((2, 3)), np.ones((2, 3)))
    assert H.tolist() == [[1.0]]


def test_attention_matches_score_oracle(rng):
    for _ in range(10):
        x = rng.normal(size=(4, 5))
        Wq, Wk = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
        np.testing.assert_allclose(attention_incidence(x, Wq, Wk), oracles.attention_scores(x, Wq, Wk),
                                   rtol=0, atol=1e-9)


def test_attention_gradients(rng):
    x = rng.normal(size=(2, 4, 3))
    Wq, Wk = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    C = rng.normal(size=(4, 4))

    def loss():
        return float((attention_incidence(x, Wq, Wk) * C).sum())

    _, rec = attention_incidence(x, Wq, Wk, record=True)
    gx, gWq, gWk = attention_incidence_backward(rec, Wq, Wk, np.broadcast_to(C, (2, 4, 4)))
    for arr, g in ((x, gx), (Wq, gWq), (Wk, gWk)):
        _fd_check(loss, arr, g)


def test_attention_shape_check():
    with pytest.raises(ConfigError):
        attention_incidence(np.ones((3, 4)), np.ones((2, 4)), np.ones((2, 5)))


def test_static_incidence_ctc_groups():
    H = static_incidence([range(6), [6, 7], range(8)], 8)
    expected = np.zeros((8, 3))
    expected[:6, 0] = 1
    expected[6:, 1] = 1
    expected[:, 2] = 1
    assert np.array_equal(H, expected)


def test_static_incidence_small():
    assert static_incidence([[0]], 1).tolist() == [[1.0]]
    assert static_incidence([[0, 1], [1, 2]], 3).tolist() == [[1, 0], [1, 1], [0, 1]]


def test_static_incidence_errors():
    with pytest.raises(ConfigError):
        static_incidence([[0], []], 2)
    with pytest.raises(ConfigError):
        static_incidence([[0, 3]], 3)


def test_propagation_per_sample_weights(backend, rng):
    H = rng.uniform(size=(3, 4, 2))
    w = rng.uniform(0.5, 2.0, size=(3, 2))
    G, _, _ = propagation(H, w)
    X = np.eye(4)
    for b in range(3):
        np.testing.assert_allclose(G[b], oracles.conv_chain(X, H[b], w[b], X), rtol=1e-12)
