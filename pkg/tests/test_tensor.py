import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from truckcast import tensor as T

import oracles


def check(fn, *arrays, tol=1e-6, seed_shape=None):
    """Backprop through ``sum(fn(*leaves) * r)`` against central differences."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    r = np.random.default_rng(99).normal(size=fn(*[T.Tensor(a) for a in arrays]).shape)
    leaves = [T.leaf(a) for a in arrays]
    out = fn(*leaves)
    T.backprop(out, r)
    numeric = oracles.numgrad(lambda *xs: float((fn(*[T.Tensor(x) for x in xs]).value * r).sum()), arrays)
    for lf, num in zip(leaves, numeric):
        got = lf.grad if lf.grad is not None else np.zeros_like(num)
        assert np.allclose(got, num, rtol=tol, atol=tol), np.abs(got - num).max()


rng = np.random.default_rng(0)
A = rng.normal(size=(3, 4))
B = rng.normal(size=(3, 4))
W = rng.normal(size=(4, 5))


@pytest.mark.parametrize("name,fn,args", [
    ("add", lambda a, b: T.add(a, b), (A, B)),
    ("add_broadcast", lambda a, b: T.add(a, b), (A, B[0])),
    ("mul", lambda a, b: T.mul(a, b), (A, B)),
    ("sub", lambda a, b: a - b, (A, B)),
    ("scale", lambda a: T.scale(a, -2.5), (A,)),
    ("sigmoid", T.sigmoid, (A,)),
    ("tanh", T.tanh, (A,)),
    ("relu", T.relu, (A + 0.05,)),
    ("exp", T.exp, (A,)),
    ("log", T.log, (np.abs(A) + 0.5,)),
    ("matmul", T.matmul, (A, W)),
    ("batched_matmul", T.matmul, (rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 2)))),
    ("linear", T.linear, (A, W, rng.normal(size=5))),
    ("reshape", lambda a: T.reshape(a, (4, 3)), (A,)),
    ("transpose", lambda a: T.transpose(a, (1, 0)), (A,)),
    ("concat", lambda a, b: T.concat([a, b], axis=0), (A, B)),
    ("stack", lambda a, b: T.stack([a, b], axis=1), (A, B)),
    ("getitem", lambda a: a[1:, ::2], (A,)),
    ("fancy_getitem", lambda a: a[np.array([0, 0, 2]), np.array([1, 1, 3])], (A,)),
    ("sum", lambda a: T.tensor_sum(a, axis=1), (A,)),
    ("mean", lambda a: T.mean(a, axis=0, keepdims=True), (A,)),
    ("softmax", T.softmax, (A,)),
    ("layer_norm", T.layer_norm, (A, rng.normal(size=4), rng.normal(size=4))),
    ("conv", lambda x, w: T.causal_conv1d(x, w, 2), (rng.normal(size=(2, 7, 3)), rng.normal(size=(3, 3, 2)))),
    ("embedding", lambda t: T.embedding(t, np.array([[0, 2, 2], [1, 0, 2]])), (rng.normal(size=(3, 4)),)),
    ("attention", lambda q, k, v: T.attention(q, k, v)[0],
     (rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 5, 4)), rng.normal(size=(2, 5, 4)))),
    ("masked_attention", lambda q, k, v: T.attention(q, k, v, mask=np.tril(np.ones((3, 3), bool)))[0],
     (rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), rng.normal(size=(3, 4)))),
    ("lstm", lambda x, w: T.lstm(x, w), (rng.normal(size=(2, 4, 8)), rng.normal(size=(2, 8)) * 0.5)),
    ("lstm_reverse", lambda x, w: T.lstm(x, w, reverse=True), (rng.normal(size=(2, 4, 8)), rng.normal(size=(2, 8)) * 0.5)),
])
def test_primitive_gradients(name, fn, args):
    check(fn, *args)


def test_shared_node_gradients_accumulate():
    check(lambda a: T.mul(T.add(a, a), a), A)


def test_lstm_matches_plain_loop():
    xp = rng.normal(size=(3, 5, 12))
    wh = rng.normal(size=(3, 12))
    for rev in (False, True):
        assert np.allclose(T.lstm(T.Tensor(xp), T.Tensor(wh), rev).value, oracles.lstm_loop(xp, wh, rev), atol=1e-12)


def test_conv_is_causal():
    x = rng.normal(size=(1, 8, 2))
    w = T.Tensor(rng.normal(size=(2, 2, 3)))
    y0 = T.causal_conv1d(T.Tensor(x), w, 2).value
    x2 = x.copy()
    x2[0, 5:] += 10
    y1 = T.causal_conv1d(T.Tensor(x2), w, 2).value
    assert np.allclose(y0[0, :5], y1[0, :5]) and not np.allclose(y0[0, 5:], y1[0, 5:])


def test_masked_attention_ignores_hidden_keys():
    q, k, v = (rng.normal(size=(3, 4)) for _ in range(3))
    mask = np.eye(3, dtype=bool)
    out, w = T.attention(T.Tensor(q), T.Tensor(k), T.Tensor(v), mask)
    assert np.allclose(w.value, np.eye(3)) and np.allclose(out.value, v)


def test_finite_diff_check_flags_wrong_gradient():
    good = T.finite_diff_check(lambda p: T.tensor_sum(T.tanh(p["a"])), {"a": A})
    assert good < 1e-6
    bogus = lambda a: T._node(a.value * 2, (a,), lambda g: (g * 3,), "bogus")
    bad = T.finite_diff_check(lambda p: T.tensor_sum(bogus(p["a"])), {"a": A})
    assert bad > 0.1


def test_nonscalar_backprop_needs_seed():
    with pytest.raises(ValueError):
        T.backprop(T.tanh(T.leaf(A)))


def test_leaf_rejects_nonfinite():
    with pytest.raises(T.NonFiniteError):
        T.leaf(np.array([1.0, np.nan]))


# -- Adam --------------------------------------------------------------------

def test_adam_first_step_moves_by_lr():
    p = {"w": np.array([1.0, -2.0, 0.0])}
    g = {"w": np.array([0.3, -5.0, 0.0])}
    out, st_ = T.adam_step(p, g, T.AdamState(lr=0.01))
    assert np.allclose(out["w"], [0.99, -1.99, 0.0], atol=1e-7) and st_.step == 1


def test_adam_matches_hand_recursion():
    rs = np.random.default_rng(1)
    w = rs.normal(size=4)
    p, state = {"w": w.copy()}, T.AdamState(lr=0.05)
    m = v = np.zeros(4)
    for t in range(1, 6):
        g = rs.normal(size=4)
        p, state = T.adam_step(p, {"w": g}, state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert np.allclose(p["w"], w, atol=1e-12)


def test_adam_minimises_quadratic():
    p, state = {"w": np.array([3.0, -4.0])}, T.AdamState(lr=0.1)
    for _ in range(500):
        p, state = T.adam_step(p, {"w": 2 * p["w"]}, state)
    assert np.abs(p["w"]).max() < 1e-2


def test_adam_rejects_nonfinite_gradient():
    with pytest.raises(T.NonFiniteError):
        T.adam_step({"w": np.zeros(2)}, {"w": np.array([np.inf, 0])}, T.AdamState())


# -- checkpoints -------------------------------------------------------------

@settings(max_examples=20)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(1, 4)), min_size=1, max_size=5), st.integers(0, 2**31))
def test_checkpoint_round_trip_bit_exact(shapes, seed):
    import tempfile, pathlib
    rs = np.random.default_rng(seed)
    params = {f"p{i}": rs.normal(size=s) for i, s in enumerate(shapes)}
    with tempfile.TemporaryDirectory() as d:
        T.save_checkpoint(pathlib.Path(d) / "m", params, seed=7, step=3)
        back, manifest = T.load_checkpoint(pathlib.Path(d) / "m")
    assert manifest["seed"] == 7 and manifest["step"] == 3
    assert set(back) == set(params)
    for k in params:
        assert back[k].tobytes() == params[k].tobytes()
