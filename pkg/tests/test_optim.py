import numpy as np
import pytest

from inpforge.errors import StepRejected
from inpforge.optim import OptimizerState, stable_adamw_step
from inpforge.tensor import Tensor


def _param(value):
    return Tensor(np.asarray(value, dtype=np.float64), requires_grad=True, dtype=np.float64)


def test_zero_gradient_no_decay_leaves_params():
    p = _param([[1.0, -2.0], [3.0, 0.5]])
    before = p.data.copy()
    state = OptimizerState(lr=0.1, weight_decay=0.0)
    for _ in range(3):
        stable_adamw_step({"w": p}, {"w": np.zeros_like(before)}, state)
    assert np.array_equal(p.data, before)
    assert state.t == 3


def test_first_step_by_hand():
    p = _param([1.0])
    state = OptimizerState(lr=0.1, weight_decay=0.0)
    eff = stable_adamw_step({"w": p}, {"w": np.array([2.0])}, state)
    # m_hat = 2, v_hat = 4, u = 2 / (2 + 1e-8); RMS(u) < 1 so no clipping
    u = 2.0 / (2.0 + 1e-8)
    assert eff["w"] == 0.1
    assert p.data[0] == pytest.approx(1.0 - 0.1 * u, abs=1e-15)
    assert p.data[0] == pytest.approx(0.9, abs=1e-8)
    np.testing.assert_allclose(state.m["w"], [0.2])
    np.testing.assert_allclose(state.v["w"], [0.004])


def test_clip_divides_lr_by_rms():
    # Preloaded first moment and huge uniform gradients give u = 5 everywhere.
    g = 1000.0
    state = OptimizerState(lr=0.01, weight_decay=0.0)
    target_m_hat = 5.0 * (g + state.eps)
    state.m["w"] = np.full(6, (target_m_hat * 0.1 - 0.1 * g) / 0.9)
    state.v["w"] = np.zeros(6)
    p = _param(np.zeros(6))
    eff = stable_adamw_step({"w": p}, {"w": np.full(6, g)}, state)
    assert eff["w"] == pytest.approx(0.01 / 5, rel=1e-12)
    np.testing.assert_allclose(p.data, -0.01 / 5 * 5.0, rtol=1e-12)


def test_clip_is_per_tensor():
    state = OptimizerState(lr=0.01, weight_decay=0.0)
    state.m["a"] = np.full(3, 40.0)
    state.v["a"] = np.zeros(3)
    a, b = _param(np.zeros(3)), _param(np.zeros(3))
    eff = stable_adamw_step({"a": a, "b": b}, {"a": np.ones(3), "b": np.ones(3)}, state)
    assert eff["a"] < 0.01
    assert eff["b"] == 0.01


def test_decoupled_weight_decay():
    theta = np.array([2.0, -1.0, 0.25])
    p = _param(theta)
    state = OptimizerState(lr=0.05, weight_decay=0.1)
    for _ in range(4):
        prev = p.data.copy()
        stable_adamw_step({"w": p}, {"w": np.zeros(3)}, state)
        np.testing.assert_array_equal(p.data, prev - 0.05 * 0.1 * prev)


def test_missing_gradient_counts_as_zero():
    p = _param([1.0])
    stable_adamw_step({"w": p}, {}, OptimizerState(lr=0.1, weight_decay=0.0))
    assert p.data[0] == 1.0


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_non_finite_gradient_rejected_without_changes(bad):
    a, b = _param([1.0, 2.0]), _param([3.0])
    state = OptimizerState()
    with pytest.raises(StepRejected) as info:
        stable_adamw_step({"a": a, "b": b}, {"a": np.array([0.1, 0.2]), "b": np.array([bad])}, state)
    assert info.value.names == ["b"]
    assert "b" in str(info.value)
    assert state.t == 0 and not state.m
    assert a.data.tolist() == [1.0, 2.0]


def test_moments_match_shapes_and_v_nonnegative(rng):
    p = _param(rng.standard_normal((3, 4)))
    state = OptimizerState()
    for _ in range(5):
        stable_adamw_step({"w": p}, {"w": rng.standard_normal((3, 4))}, state)
    assert state.m["w"].shape == state.v["w"].shape == (3, 4)
    assert (state.v["w"] >= 0).all()
