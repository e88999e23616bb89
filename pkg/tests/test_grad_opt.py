import numpy as np
import pytest

from polyfusion.factorizations import CmfParams
from polyfusion.fusion import FusionConfig, FusionLayer, Variant, forward, init_layer
from polyfusion.grad_opt import (
    adam_init,
    adam_step,
    backward,
    finite_diff_gradient,
    frobenius_penalty,
    penalty_gradient,
)
from polyfusion.verify import gradcheck_trial, random_config

import oracles


def test_dense_bias_and_linear_gradients(rng):
    layer = init_layer(FusionConfig("Dense", 3, 4, 2), rng, std=1.0)
    za, zd, u = rng.standard_normal(4), rng.standard_normal(2), rng.standard_normal(3)
    g = backward(layer, za, zd, u)
    np.testing.assert_array_equal(g.params["b"], u)
    np.testing.assert_allclose(g.params["W_a"], np.outer(u, za), rtol=1e-15)
    assert g.z_a.shape == (4,) and g.z_d.shape == (2,)


@pytest.mark.parametrize("variant", list(Variant))
def test_backward_matches_finite_differences(variant):
    for seed in range(10):
        rng = np.random.default_rng(seed)
        layer = init_layer(random_config(variant, rng, max_dim=4, max_rank=3), rng, std=1.0)
        errors = gradcheck_trial(layer, rng, h=1e-5)
        assert max(errors.values()) <= 1e-6, errors


def test_concat_input_gradients_are_slices(rng):
    layer = FusionLayer(FusionConfig("Concat", 5, 2, 3))
    u = rng.standard_normal(5)
    g = backward(layer, np.zeros(2), np.zeros(3), u)
    assert g.params == {}
    np.testing.assert_array_equal(g.z_a, u[:2])
    np.testing.assert_array_equal(g.z_d, u[2:])


def test_backward_rejects_bad_upstream(rng):
    layer = init_layer(FusionConfig("PF-CP", 3, 2, 2, rank=2), rng)
    with pytest.raises(ValueError):
        backward(layer, np.zeros(2), np.zeros(2), np.zeros(4))


def test_tied_gradients_are_summed(rng):
    sr = init_layer(FusionConfig("PF-CMF-SR", 4, 3, 5, rank=3), rng, std=1.0)
    p = sr.params
    untied = FusionLayer(FusionConfig("PF-CMF", 4, 3, 5, rank=3),
                         CmfParams(p.b, p.U, p.V_a, p.V_d, p.V_a.copy(), p.V_d.copy()))
    za, zd, u = rng.standard_normal((3, 3)), rng.standard_normal((3, 5)), rng.standard_normal((3, 4))
    g_sr = backward(sr, za, zd, u).params
    g_un = backward(untied, za, zd, u).params
    assert set(g_sr) == {"b", "U", "V_a", "V_d"}
    np.testing.assert_allclose(g_sr["V_a"], g_un["V_a"] + g_un["B2"], rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(g_sr["V_d"], g_un["V_d"] + g_un["B3"], rtol=1e-12, atol=1e-12)
    for name in ("b", "U"):
        np.testing.assert_allclose(g_sr[name], g_un[name], rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("variant", list(Variant))
def test_upstream_adjoint_symmetry(variant, rng):
    # <u, f> is linear in u, so a unit-step central difference in u recovers f exactly
    layer = init_layer(random_config(variant, rng), rng, std=1.0)
    za, zd = rng.standard_normal(layer.config.a), rng.standard_normal(layer.config.d)
    y = forward(layer, za, zd)
    u = rng.standard_normal(y.shape)
    grad_u = finite_diff_gradient(lambda v: float(v @ y), u, 1.0)
    np.testing.assert_allclose(grad_u, y, rtol=1e-12, atol=1e-12 * np.abs(y).max())
    # and the parameter gradients scale linearly with u
    g1 = backward(layer, za, zd, u)
    g2 = backward(layer, za, zd, 2.0 * u)
    for name, arr in g1.params.items():
        np.testing.assert_allclose(g2.params[name], 2.0 * arr, rtol=1e-12, atol=1e-15)


def test_finite_diff_examples(rng):
    assert finite_diff_gradient(lambda x: float(x[0] ** 2), [3.0], 1e-5)[0] == pytest.approx(6.0, abs=1e-8)
    assert not finite_diff_gradient(lambda x: 4.2, rng.standard_normal(5), 1e-5).any()
    P = rng.standard_normal((3, 2))
    g = finite_diff_gradient(lambda x: frobenius_penalty({"P": x}), P, 1e-5)
    np.testing.assert_allclose(g, 2 * P, rtol=1e-6)


def test_finite_diff_errors():
    with pytest.raises(ValueError):
        finite_diff_gradient(lambda x: 0.0, [1.0], 0.0)
    with pytest.raises(FloatingPointError):
        finite_diff_gradient(lambda x: float("nan"), [1.0], 1e-5)


def test_penalty_examples(rng):
    assert frobenius_penalty(init_layer(FusionConfig("PF-CP", 3, 2, 2, rank=2), rng, std=0.0)) == 0
    assert frobenius_penalty({"W": np.array([[3.0, 4.0]])}) == 25
    sr = init_layer(FusionConfig("PF-CMF-SR", 4, 3, 5, rank=2), rng, std=1.0)
    p = sr.params
    copied = CmfParams(p.b, p.U, p.V_a, p.V_d, p.V_a.copy(), p.V_d.copy())
    unique = sum(np.sum(a**2) for a in (p.b, p.U, p.V_a, p.V_d))
    assert frobenius_penalty(sr) == pytest.approx(unique, rel=1e-15)
    expected_copied = unique + np.sum(p.V_a**2) + np.sum(p.V_d**2)
    assert frobenius_penalty(copied.arrays()) == pytest.approx(expected_copied, rel=1e-15)
    grads = penalty_gradient(sr)
    np.testing.assert_array_equal(grads["V_a"], 2 * p.V_a)


def test_adam_first_step_is_sign(rng):
    g = rng.standard_normal(6) * 10.0 ** rng.integers(-3, 3, size=6)
    p = rng.standard_normal(6)
    state = adam_init({"p": p}, lr=0.01, eps=0.0)
    new, state = adam_step(state, {"p": p}, {"p": g})
    np.testing.assert_allclose(new["p"] - p, -0.01 * np.sign(g), rtol=1e-12)
    assert state.t == 1


def test_adam_scale_equivariant_direction(rng):
    g = rng.standard_normal(5)
    p = {"p": np.zeros(5)}
    a, _ = adam_step(adam_init(p, lr=0.1), p, {"p": g})
    b, _ = adam_step(adam_init(p, lr=0.1), p, {"p": 37.0 * g})
    np.testing.assert_array_equal(np.sign(a["p"]), np.sign(b["p"]))


def test_adam_zero_gradient_keeps_params(rng):
    p = {"x": rng.standard_normal((2, 3))}
    state = adam_init(p, lr=0.1)
    cur = p
    for _ in range(5):
        cur, state = adam_step(state, cur, {"x": np.zeros((2, 3))})
    np.testing.assert_array_equal(cur["x"], p["x"])


def test_adam_scalar_trajectory_bitwise():
    ref = oracles.adam_scalar(1.0, [1.0, 1.0, 1.0], 0.1, 0.9, 0.999, 1e-8)
    params = {"p": np.array(1.0)}
    state = adam_init(params, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
    got = []
    for _ in range(3):
        params, state = adam_step(state, params, {"p": np.array(1.0)})
        got.append(float(params["p"]))
    assert got == ref


def test_adam_rejects_mismatch():
    state = adam_init({"p": np.zeros(2)})
    with pytest.raises(ValueError):
        adam_step(state, {"p": np.zeros(2)}, {"p": np.zeros(3)})
    with pytest.raises(ValueError):
        adam_step(state, {"p": np.zeros(2)}, {"q": np.zeros(2)})
