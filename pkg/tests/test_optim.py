import numpy as np
import pytest

from face4d.optim import AdamState, adam_step


def test_zero_gradient_keeps_values_and_decays_moments():
    x = {"a": np.array([1.0, -2.0])}
    state = AdamState({"a": np.array([0.5, 0.5])}, {"a": np.array([0.2, 0.2])}, 3)
    _, st = adam_step(x, {"a": np.zeros(2)}, state, lr=0.1)
    new, _ = adam_step(x, {"a": np.zeros(2)}, AdamState(), lr=0.1)
    assert np.array_equal(new["a"], x["a"])
    assert np.allclose(st.m["a"], 0.9 * 0.5)
    assert np.allclose(st.v["a"], 0.999 * 0.2)
    assert st.step == 4


def test_first_step_is_signed_lr(rng):
    g = rng.normal(size=20)
    x = {"p": rng.normal(size=20)}
    new, _ = adam_step(x, {"p": g}, AdamState(), lr=0.01)
    assert np.abs((new["p"] - x["p"]) + 0.01 * np.sign(g)).max() <= 1e-6


def _scalar_adam(x, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t in range(1, steps + 1):
        g = 2.0 * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return x


def test_quadratic_bowl():
    x = {"x": np.array([1.0, 1.0, 1.0])}
    state = AdamState()
    for _ in range(200):
        x, state = adam_step(x, {"x": 2.0 * x["x"]}, state, lr=0.01)
    assert np.all(np.abs(x["x"]) < 0.1)
    assert x["x"][0] == pytest.approx(_scalar_adam(1.0, 0.01, 200), abs=1e-12)


def test_inputs_untouched_and_other_blocks_pass_through():
    x = {"a": np.ones(3), "b": np.zeros(2)}
    before = {k: v.copy() for k, v in x.items()}
    state = AdamState()
    new, st = adam_step(x, {"a": np.ones(3)}, state, lr=0.1)
    assert all(np.array_equal(x[k], before[k]) for k in x)
    assert new["b"] is x["b"]
    assert state.step == 0 and not state.m


def test_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        adam_step({"a": np.ones(3)}, {"a": np.ones(2)}, AdamState(), lr=0.1)
