import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from icodoa.checks import loss_sum_grad, small_model_gradcheck
from icodoa.model import ModelConfig, init_params
from icodoa.training import (
    AdamState,
    Curriculum,
    NonFiniteGradient,
    adam_step,
    backward,
    directional_check,
    finite_difference_grad,
    gradcheck_params,
    loss_mse,
    relative_error,
)


def test_loss_examples():
    u = torch.nn.functional.normalize(torch.randn(6, 3, dtype=torch.float64), dim=1)
    assert float(loss_mse(u, u)) == 0.0
    assert float(loss_mse(torch.zeros(1, 3, dtype=torch.float64), u[:1])) == pytest.approx(1 / 3)
    T = 6
    est = u.clone()
    est[2, 0] += 0.3
    assert float(loss_mse(est, u)) == pytest.approx(0.09 / (3 * T))
    with pytest.raises(ValueError):
        loss_mse(u, u[:3])


def test_backward_sum_is_ones():
    params = init_params(ModelConfig(r=1, channels=2), dtype=torch.float64)
    grads = loss_sum_grad(params)
    assert all(torch.equal(g, torch.ones_like(g)) for g in grads.values())


def test_backward_unused_parameter_is_zero():
    a = torch.ones(3, requires_grad=True)
    b = torch.ones(2, requires_grad=True)
    g = backward((a * 2).sum(), {"a": a, "b": b})
    assert torch.equal(g["a"], torch.full((3,), 2.0)) and torch.equal(g["b"], torch.zeros(2))
    with pytest.raises(ValueError):
        backward(a * 2, {"a": a})


def test_small_model_gradients_match_finite_differences():
    errs = small_model_gradcheck()
    assert len(errs) == len(ModelConfig(r=1, channels=2).param_shapes())
    assert max(errs.values()) < 1e-4


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=2, max_size=6))
def test_finite_difference_on_polynomial(vals):
    x = torch.tensor(vals, dtype=torch.float64)
    fd = finite_difference_grad(lambda: (x**3).sum() + x.prod(), x)
    leaf = x.clone().requires_grad_(True)
    (g,) = torch.autograd.grad((leaf**3).sum() + leaf.prod(), leaf)
    # central differences are exact up to h^2 f'''/6 = 1e-10 for a cubic
    assert torch.allclose(fd, g, rtol=1e-7, atol=1e-9)


def test_gradcheck_params_subsample_and_directional():
    w = {"w": torch.randn(50, dtype=torch.float64)}
    fn = lambda p: (p["w"].sin() * p["w"]).sum()
    assert max(gradcheck_params(fn, w, max_entries=10).values()) < 1e-6
    assert directional_check(fn, w) < 1e-6


def test_relative_error_floor():
    assert relative_error(torch.tensor([1.0]), torch.tensor([1.0])) == 0.0
    assert relative_error(torch.tensor([1.1]), torch.tensor([1.0])) == pytest.approx(0.1 / 1.1, rel=1e-6)


def test_adam_zero_gradient():
    p = {"w": torch.randn(4)}
    st_ = AdamState(lr=0.1)
    out = adam_step(p, {"w": torch.zeros(4)}, st_)
    assert torch.equal(out["w"], p["w"])
    assert st_.step == 1


def test_adam_first_step():
    p = {"w": torch.zeros(4, dtype=torch.float64)}
    g = torch.tensor([0.5, -2.0, 1e-3, -7.0], dtype=torch.float64)
    st_ = AdamState(lr=0.01)
    out = adam_step(p, {"w": g}, st_)
    # m_hat = g, v_hat = g^2 -> step lr * g / (|g| + eps)
    assert torch.allclose(out["w"], -0.01 * g / (g.abs() + st_.eps), atol=0, rtol=1e-12)
    assert torch.allclose(out["w"], -0.01 * g.sign(), rtol=1e-4)


def test_adam_constant_gradient_fixed_point():
    p = {"w": torch.zeros(3, dtype=torch.float64)}
    g = {"w": torch.tensor([3.0, -0.2, 1.0], dtype=torch.float64)}
    st_ = AdamState(lr=1e-3)
    prev = p
    for _ in range(500):
        cur = adam_step(prev, g, st_)
        step = cur["w"] - prev["w"]
        prev = cur
    assert torch.allclose(step, -1e-3 * g["w"].sign(), rtol=1e-6)


def test_adam_matches_reference_formula():
    rng = np.random.default_rng(0)
    w = rng.standard_normal(5)
    m = v = np.zeros(5)
    st_ = AdamState(lr=0.05)
    p = {"w": torch.from_numpy(w.copy())}
    for t in range(1, 8):
        g = rng.standard_normal(5)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.05 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        p = adam_step(p, {"w": torch.from_numpy(g)}, st_)
    assert np.allclose(p["w"].numpy(), w, rtol=1e-12)


def test_adam_state_roundtrip():
    st_ = AdamState(lr=0.01)
    p = {"a": torch.randn(3), "b": torch.randn(2, 2)}
    p = adam_step(p, {k: torch.randn_like(v) for k, v in p.items()}, st_)
    st2 = AdamState.restore(st_.hyper(), st_.tensors())
    g = {k: torch.randn_like(v) for k, v in p.items()}
    a = adam_step(p, g, st_)
    b = adam_step(p, g, st2)
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert st2.step == 2


def test_adam_rejects_non_finite():
    with pytest.raises(NonFiniteGradient):
        adam_step({"w": torch.zeros(2)}, {"w": torch.tensor([1.0, float("nan")])}, AdamState())
    with pytest.raises(ValueError):
        adam_step({"w": torch.zeros(2)}, {"w": torch.zeros(3)}, AdamState())


def test_curriculum():
    c = Curriculum()
    rng = np.random.default_rng(0)
    assert [c.phase(e) for e in (1, 25, 26, 50)] == ["fixed", "fixed", "random", "random"]
    assert c.snr(10, rng) == 30.0
    draws = [c.snr(30, rng) for _ in range(2000)]
    assert 5 <= min(draws) and max(draws) <= 30
    assert np.mean(draws) == pytest.approx(17.5, abs=0.5)
    with pytest.raises(ValueError):
        c.phase(0)
    with pytest.raises(ValueError):
        c.phase(51)
