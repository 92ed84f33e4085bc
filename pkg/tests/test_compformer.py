import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ttcomp.compformer import (
    CheckpointError,
    CompFormer,
    StateError,
    compensate,
    key_features,
    load_params,
    save_params,
    softmax,
    softmax_backward,
)


def rel_err(a, b):
    return np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12)


def instance(rng, B=2, L=3, C=4, R=2):
    q = rng.normal(size=(B, L, C, 2))
    k = rng.normal(size=(B, L, R * C, 2))
    return q, k


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 9)), elements=st.floats(-500, 500)))
def test_softmax_rows_stochastic(s):
    w = softmax(s)
    assert np.all(w >= 0)
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)


def test_softmax_in_place_and_extreme():
    s = np.array([[1000.0, 1000.0, -1000.0]])
    w = softmax(s, out=s)
    assert w is s
    np.testing.assert_allclose(w, [[0.5, 0.5, 0.0]])


def test_softmax_backward_matches_fd(rng):
    s = rng.normal(size=(3, 5))
    g = rng.normal(size=(3, 5))
    analytic = softmax_backward(softmax(s.copy()), g)
    fd = np.zeros_like(s)
    h = 1e-6
    for i in np.ndindex(s.shape):
        sp, sm = s.copy(), s.copy()
        sp[i] += h
        sm[i] -= h
        fd[i] = ((softmax(sp) - softmax(sm)) * g).sum() / (2 * h)
    assert rel_err(fd, analytic) < 1e-7


def test_forward_shapes_and_attention_rows(rng):
    m = CompFormer(d_model=8, n_heads=2, seed=1)
    q, k = instance(rng, B=2, L=3, C=4, R=2)
    out = m.forward(q, k)
    assert out.data.shape == (2, 3, 4, 2)
    assert out.attention.shape == (2, 3, 4, 8)
    np.testing.assert_allclose(out.attention.sum(axis=-1), 1.0, atol=1e-6)


def test_unbatched_matches_batched(rng):
    m = CompFormer(d_model=8, n_heads=2, seed=1)
    q, k = instance(rng)
    both = m.forward(q, k).data
    np.testing.assert_allclose(m.forward(q[1], k[1]).data, both[1], atol=1e-12)


def test_key_permutation_invariance(rng):
    m = CompFormer(d_model=8, n_heads=4, depth=2, seed=2)
    q, k = instance(rng, B=1, L=4, C=3, R=3)
    perm = rng.permutation(k.shape[2])
    a = m.forward(q, k)
    b = m.forward(q, k[:, :, perm])
    np.testing.assert_allclose(b.data, a.data, atol=1e-9)
    np.testing.assert_allclose(b.attention, a.attention[..., perm], atol=1e-9)


def test_query_permutation_equivariance(rng):
    m = CompFormer(d_model=8, n_heads=2, seed=3)
    q, k = instance(rng, B=1, L=2, C=5, R=2)
    perm = rng.permutation(5)
    np.testing.assert_allclose(m.forward(q[:, :, perm], k).data, m.forward(q, k).data[:, :, perm], atol=1e-9)


def test_steps_are_independent(rng):
    m = CompFormer(d_model=8, n_heads=2, seed=3)
    q, k = instance(rng, B=1, L=3, C=2, R=2)
    base = m.forward(q, k).data
    k2 = k.copy()
    k2[:, 2] += 5.0
    changed = m.forward(q, k2).data
    np.testing.assert_array_equal(changed[:, :2], base[:, :2])
    assert not np.allclose(changed[:, 2], base[:, 2])


def test_uniform_attention_averages_values():
    d = 2
    eye = np.eye(d)
    params = {"layer0.W_in": eye, "layer0.W_q": np.zeros((d, d)), "layer0.W_k": eye, "layer0.W_v": eye, "layer0.W_out": eye}
    m = CompFormer(d_model=d, n_heads=1, params=params)
    k = np.random.default_rng(0).normal(size=(3, 6, 2))
    q = np.zeros((3, 2, 2))
    out = m.forward(q, k).data
    np.testing.assert_allclose(out, np.broadcast_to(k.mean(axis=1, keepdims=True), out.shape), atol=1e-12)


@pytest.mark.parametrize("depth", [1, 2])
def test_parameter_gradients(rng, depth):
    m = CompFormer(d_model=8, n_heads=2, depth=depth, seed=5)
    q, k = instance(rng, B=2, L=2, C=3, R=2)
    w = rng.normal(size=(2, 2, 3, 2))

    def loss():
        return float((m.forward(q, k).data * w).sum())

    loss()
    grads, dq, dk = m.backward(w)
    h = 1e-6
    for name, p in m.params.items():
        fd = np.zeros_like(p)
        for i in np.ndindex(p.shape):
            o = p[i]
            p[i] = o + h
            a = loss()
            p[i] = o - h
            b = loss()
            p[i] = o
            fd[i] = (a - b) / (2 * h)
        assert rel_err(fd, grads[name]) < 1e-6, name
    for x, analytic in ((q, dq), (k, dk)):
        fd = np.zeros_like(x)
        for i in np.ndindex(x.shape):
            o = x[i]
            x[i] = o + h
            a = loss()
            x[i] = o - h
            b = loss()
            x[i] = o
            fd[i] = (a - b) / (2 * h)
        assert rel_err(fd, analytic) < 1e-6


def test_backward_before_forward():
    with pytest.raises(StateError):
        CompFormer().backward(np.zeros((1, 1, 1, 2)))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_scores_reported(rng):
    m = CompFormer(d_model=4, n_heads=1)
    q, k = instance(rng, B=1, L=2, C=2, R=1)
    q[0, 1, 0, 0] = np.inf
    with pytest.raises(FloatingPointError, match="layer 0"):
        m.forward(q, k)


def test_float32_close_to_float64(rng):
    a = CompFormer(d_model=16, n_heads=4, seed=7)
    b = CompFormer(d_model=16, n_heads=4, params=a.params, dtype=np.float32)
    q, k = instance(rng, B=3, L=4, C=5, R=3)
    out = b.forward(q, k)
    assert out.data.dtype == np.float32
    np.testing.assert_allclose(out.data, a.forward(q, k).data, atol=1e-4)
    grads, _, _ = b.backward(np.ones_like(out.data))
    assert all(g.dtype == np.float64 for g in grads.values())


def test_constructor_validation():
    with pytest.raises(ValueError):
        CompFormer(d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        CompFormer(depth=0)
    with pytest.raises(ValueError):
        CompFormer(d_model=4, n_heads=1, params={"layer0.W_in": np.zeros((2, 4)), "layer0.W_q": np.zeros((4, 3)), "layer0.W_k": np.zeros((4, 4)), "layer0.W_v": np.zeros((4, 4)), "layer0.W_out": np.zeros((4, 2))})


def test_embed_helpers():
    m = CompFormer(d_model=4, n_heads=2)
    sample = np.arange(6, dtype=float).reshape(2, 3, 1)
    feats = key_features(sample, [0.1, 0.2])
    assert feats.shape == (2, 3, 2)
    np.testing.assert_array_equal(feats[1, :, 1], 0.2)
    np.testing.assert_allclose(m.embed_keys(sample, [0.1, 0.2]), feats @ m.params["layer0.W_in"])
    with pytest.raises(ValueError):
        m.embed(np.zeros((2, 3, 3)))
    # a single key (R*C == 1) is not mistaken for the trailing channel axis
    assert key_features(np.ones((4, 2, 1)), np.zeros((4, 2))).shape == (4, 2, 1, 2)
    assert key_features(np.ones((4, 2, 1, 1)), np.zeros((4, 2))).shape == (4, 2, 1, 2)


def test_compensate_modes():
    a = np.ones((2, 3, 2))
    b = np.full((2, 3, 2), 2.0)
    assert compensate(a, b, "concat").shape == (2, 3, 4)
    np.testing.assert_array_equal(compensate(a, b, "add"), 3.0)
    with pytest.raises(ValueError):
        compensate(a, b, "mul")
    with pytest.raises(ValueError):
        compensate(a, b[:1])


def test_checkpoint_round_trip(tmp_path, rng):
    params = {"a.w": rng.normal(size=(3, 4)), "b": rng.normal(size=5), "c": np.float64(1.5) * np.ones((2, 1, 2))}
    save_params(tmp_path / "m.cpfm", params, {"k": [1, 2]})
    back, meta = load_params(tmp_path / "m.cpfm")
    assert meta == {"k": [1, 2]}
    for k, v in params.items():
        assert back[k].dtype == np.float64
        np.testing.assert_array_equal(back[k], v.astype(np.float32).astype(np.float64))
    # a second round trip is exact
    save_params(tmp_path / "m2.cpfm", back, meta)
    again, _ = load_params(tmp_path / "m2.cpfm")
    for k in back:
        np.testing.assert_array_equal(again[k], back[k])


@pytest.mark.parametrize("mutate", ["magic", "version", "truncate", "trailing", "badjson"])
def test_checkpoint_corruption(tmp_path, mutate):
    path = tmp_path / "m.cpfm"
    save_params(path, {"w": np.ones((4, 4))}, {"x": 1})
    buf = bytearray(path.read_bytes())
    if mutate == "magic":
        buf[:4] = b"NOPE"
    elif mutate == "version":
        buf[4] = 7
    elif mutate == "truncate":
        buf = buf[:-10]
    elif mutate == "trailing":
        buf += b"\x01\x02"
    else:
        buf[10] = ord("}")
    path.write_bytes(bytes(buf))
    with pytest.raises(CheckpointError):
        load_params(path)
