import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from explainrec.diffcore import (
    CHECKPOINT_MAGIC,
    NonFiniteGradient,
    ParamStore,
    ShapeError,
    Tape,
    TapeError,
    adam_step,
    finite_difference_check,
    load_checkpoint,
    log_sigmoid,
    masked_softmax,
    save_checkpoint,
    sigmoid,
    split_probes,
)

finite = st.floats(min_value=-30, max_value=30, allow_nan=False)


# -- forward --------------------------------------------------------------


def test_sigmoid_zero():
    t = Tape()
    assert float(t.sigmoid(t.constant(0.0)).value) == 0.5


def test_softmax_equal_logits():
    t = Tape()
    out = t.masked_softmax(t.constant([[2.0, 2.0, 2.0]]), np.ones((1, 3), bool))
    np.testing.assert_allclose(out.value, [[1 / 3] * 3], rtol=0, atol=1e-15)


def test_mul_by_ones_is_identity():
    t = Tape()
    x = np.array([0.3, -1.2, 4.0])
    assert np.array_equal(t.mul(t.constant(x), t.constant(np.ones(3))).value, x)


def test_fully_masked_row_is_zero():
    out = masked_softmax(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[True, False], [False, False]]))
    assert np.array_equal(out, [[1.0, 0.0], [0.0, 0.0]])


@given(arrays(np.float64, (3, 6), elements=finite), arrays(bool, (3, 6)))
def test_softmax_simplex(x, mask):
    mask[:, 0] = True
    p = masked_softmax(x, mask)
    assert np.all(p[mask] > 0) and np.all(p[~mask] == 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


@given(st.floats(min_value=-700, max_value=700, allow_nan=False))
def test_log_sigmoid_stable(x):
    ref = -math.log1p(math.exp(-x)) if x >= 0 else x - math.log1p(math.exp(x))
    assert float(log_sigmoid(x)) == pytest.approx(ref, rel=1e-12, abs=1e-300)
    assert 0 <= float(sigmoid(x)) <= 1


def test_shape_error_names_the_op():
    t = Tape()
    a = t.constant(np.zeros((2, 3)))
    b = t.constant(np.zeros((4, 5)))
    with pytest.raises(ShapeError, match="matmul"):
        t.matmul(a, b)


# -- backward -------------------------------------------------------------


def test_sigmoid_derivative_at_zero():
    t = Tape()
    x = t.input(np.array([0.0]), "x")
    g = t.backward(t.sum(t.sigmoid(x)))
    assert g["input:x"][0] == 0.25


def test_linear_gradient_is_coefficient():
    a = np.array([1.5, -2.0, 0.25])
    t = Tape()
    x = t.input(np.array([0.1, 0.2, 0.3]), "x")
    g = t.backward(t.sum(t.mul(t.constant(a), x)))
    assert np.array_equal(g["input:x"], a)


def test_unflagged_input_gets_no_gradient():
    t = Tape()
    x = t.input(np.ones(2), "x", differentiable=False)
    y = t.input(np.ones(2), "y")
    g = t.backward(t.sum(t.mul(x, y)))
    assert "input:x" not in g and "input:y" in g


def test_fan_out_accumulates():
    t = Tape()
    x = t.input(np.array([3.0]), "x")
    g = t.backward(t.sum(t.add(t.mul(x, x), x)))  # d(x^2 + x) = 2x + 1
    assert g["input:x"][0] == 7.0


def test_backward_on_foreign_node():
    other = Tape()
    node = other.sum(other.input(np.ones(2), "x"))
    with pytest.raises(TapeError):
        Tape().backward(node)


def test_tape_is_single_use():
    t = Tape()
    loss = t.sum(t.input(np.ones(2), "x"))
    t.backward(loss)
    with pytest.raises(TapeError):
        t.backward(loss)


def _three_layer(seed):
    rng = np.random.default_rng(seed)
    store = ParamStore(seed)
    for k, (a, b) in enumerate([(5, 7), (7, 6), (6, 1)]):
        store.init_uniform(f"w{k}", (a, b), rng, dim=1)
        store.add(f"b{k}", rng.normal(size=b))
    x = rng.normal(size=(4, 5))

    def build(t):
        h = t.input(x, "x")
        for k in range(3):
            h = t.add_bias(t.matmul(h, t.param(store, f"w{k}")), t.param(store, f"b{k}"))
            if k < 2:
                h = t.sigmoid(h) if k == 0 else t.relu(h)
        return t.mean(t.log_sigmoid(t.flatten(h)))

    arrs = {**{n: store[n] for n in store.names()}, "input:x": x}
    return build, arrs


@pytest.mark.parametrize("seed", range(5))
def test_three_layer_net_matches_finite_differences(seed):
    build, arrs = _three_layer(seed)
    probes = split_probes(arrs, 60, np.random.default_rng(seed))
    assert finite_difference_check(build, arrs, probes) < 1e-4


def test_finite_difference_on_linear_function():
    x = np.array([1.0, 2.0, 3.0])
    a = np.array([0.5, -1.0, 2.0])
    build = lambda t: t.sum(t.mul(t.constant(a), t.input(x, "x")))
    assert finite_difference_check(build, {"input:x": x}, [("input:x", k) for k in range(3)]) < 1e-9


def test_finite_difference_large_step_is_worse():
    x = np.array([0.7])
    build = lambda t: t.sum(t.sigmoid(t.input(x, "x")))
    small = finite_difference_check(build, {"input:x": x}, [("input:x", 0)], step=1e-5)
    big = finite_difference_check(build, {"input:x": x}, [("input:x", 0)], step=1.0)
    assert big > 1e-3 > small


def test_concat_and_gather_gradients():
    rng = np.random.default_rng(0)
    store = ParamStore()
    store.add("emb", rng.normal(size=(5, 3)))
    y = rng.normal(size=(4, 2))

    def build(t):
        rows = t.gather(t.param(store, "emb"), [0, 3, 3, 1])
        z = t.concat(rows, t.input(y, "y"))
        return t.sum(t.scale(t.mul(z, z), 0.5))

    arrs = {"emb": store["emb"], "input:y": y}
    probes = [("emb", k) for k in range(15)] + [("input:y", k) for k in range(8)]
    assert finite_difference_check(build, arrs, probes) < 1e-7


# -- Adam -----------------------------------------------------------------


def _store(value):
    s = ParamStore(0)
    s.add("p", np.array(value, dtype=float))
    return s


def test_adam_zero_gradient():
    s = _store([1.0, -2.0])
    s.m["p"][:] = 0.5
    s.v["p"][:] = 0.25
    adam_step(s, {"p": np.zeros(2)})
    assert np.array_equal(s.m["p"], [0.45, 0.45])
    assert np.array_equal(s.v["p"], [0.25 * 0.999] * 2)


def test_adam_zero_gradient_fresh_state_keeps_params():
    s = _store([1.0, -2.0])
    adam_step(s, {"p": np.zeros(2)})
    assert np.array_equal(s["p"], [1.0, -2.0])


def test_adam_first_step():
    s = _store([0.0])
    adam_step(s, {"p": np.array([1.0])}, lr=0.001)
    # m̂ = 1, v̂ = 1 → step = lr / (1 + eps)
    assert -s["p"][0] == pytest.approx(0.001 / (1 + 1e-8), rel=1e-12)


def test_adam_constant_gradient_step_tends_to_lr():
    s = _store([0.0])
    prev = 0.0
    for _ in range(1000):
        adam_step(s, {"p": np.array([3.7])}, lr=0.01)
        step, prev = prev - s["p"][0], s["p"][0]
    assert step == pytest.approx(0.01, rel=1e-6)


def test_adam_lr_zero_bit_identical():
    s = _store(np.random.default_rng(1).normal(size=4))
    before = s["p"].copy()
    for _ in range(5):
        adam_step(s, {"p": np.ones(4)}, lr=0.0)
    assert s["p"].tobytes() == before.tobytes()


def test_adam_rejects_non_finite():
    s = _store([0.0])
    with pytest.raises(NonFiniteGradient):
        adam_step(s, {"p": np.array([np.nan])})
    assert s.t == 0


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step(_store([0.0, 1.0]), {"p": np.zeros(3)})


# -- checkpoint -------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    s = ParamStore(seed=4)
    s.init_uniform("a", (3, 4), rng)
    s.init_zeros("b", (4,))
    s.t = 17
    digest = save_checkpoint(tmp_path / "c.bin", s, {"kind": "x"})
    blob = (tmp_path / "c.bin").read_bytes()
    assert blob.startswith(CHECKPOINT_MAGIC)
    loaded, header = load_checkpoint(tmp_path / "c.bin")
    assert loaded.digest() == s.digest()
    assert header["seed"] == 4 and header["meta"] == {"kind": "x"} and loaded.t == 17
    assert save_checkpoint(tmp_path / "d.bin", loaded, {"kind": "x"}) == digest


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x").write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x")


def test_init_bounds():
    s = ParamStore()
    s.init_uniform("w", (200, 16), np.random.default_rng(0))
    assert np.abs(s["w"]).max() <= 0.5 / 4
