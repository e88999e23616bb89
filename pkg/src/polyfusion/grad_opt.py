"""Reverse-mode gradients of the fusion layers, a finite-difference oracle,
the squared-Frobenius regularizer and Adam.

``backward`` differentiates the scalar ``<upstream, forward(z_a, z_d)>``
summed over the batch. Tied arrays (the shared row spaces of PF-CMF-SR)
have a single gradient slot that collects every term they appear in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .factorizations import pad_one
from .fusion import FusionLayer, Variant, _inputs, _out

__all__ = [
    "ParamGradients",
    "AdamState",
    "backward",
    "finite_diff_gradient",
    "frobenius_penalty",
    "penalty_gradient",
    "adam_init",
    "adam_step",
]


@dataclass
class ParamGradients:
    """Gradients keyed like ``layer.arrays()``, plus the two input gradients."""

    params: dict[str, np.ndarray]
    z_a: np.ndarray
    z_d: np.ndarray


def _dense_grads(p, Za, Zd, Gy):
    grads = {
        "b": Gy.sum(axis=0),
        "W_a": Gy.T @ Za,
        "W_d": Gy.T @ Zd,
        "W_ad": np.einsum("bp,bi,bj->pij", Gy, Za, Zd, optimize=True),
    }
    dZa = Gy @ p.W_a + np.einsum("pij,bp,bj->bi", p.W_ad, Gy, Zd, optimize=True)
    dZd = Gy @ p.W_d + np.einsum("pij,bp,bi->bj", p.W_ad, Gy, Za, optimize=True)
    return grads, dZa, dZd


def _cp_grads(f, Za, Zd, Gy):
    Pa, Pd = pad_one(Za), pad_one(Zd)
    P = Pa @ f.A2
    Q = Pd @ f.A3
    H = Gy @ f.A1
    dP = H * Q
    dQ = H * P
    grads = {"A1": Gy.T @ (P * Q), "A2": Pa.T @ dP, "A3": Pd.T @ dQ}
    return grads, (dP @ f.A2.T)[:, :-1], (dQ @ f.A3.T)[:, :-1]


def _tucker_grads(f, Za, Zd, Gy):
    Pa, Pd = pad_one(Za), pad_one(Zd)
    P = Pa @ f.U2
    Q = Pd @ f.U3
    T = np.einsum("pqr,bq,br->bp", f.G, P, Q, optimize=True)
    dT = Gy @ f.U1
    dP = np.einsum("pqr,bp,br->bq", f.G, dT, Q, optimize=True)
    dQ = np.einsum("pqr,bp,bq->br", f.G, dT, P, optimize=True)
    grads = {
        "G": np.einsum("bp,bq,br->pqr", dT, P, Q, optimize=True),
        "U1": Gy.T @ T,
        "U2": Pa.T @ dP,
        "U3": Pd.T @ dQ,
    }
    return grads, (dP @ f.U2.T)[:, :-1], (dQ @ f.U3.T)[:, :-1]


def _cmf_grads(p, Za, Zd, Gy):
    Qa = Za @ p.B2
    Qd = Zd @ p.B3
    S = Za @ p.V_a + Zd @ p.V_d + Qa * Qd
    H = Gy @ p.U
    Ha = H * Qd
    Hd = H * Qa
    grads = {"b": Gy.sum(axis=0), "U": Gy.T @ S, "V_a": Za.T @ H, "V_d": Zd.T @ H}
    dB2 = Za.T @ Ha
    dB3 = Zd.T @ Hd
    if p.shared_rows:
        grads["V_a"] = grads["V_a"] + dB2
        grads["V_d"] = grads["V_d"] + dB3
    else:
        grads["B2"] = dB2
        grads["B3"] = dB3
    dZa = H @ p.V_a.T + Ha @ p.B2.T
    dZd = H @ p.V_d.T + Hd @ p.B3.T
    return grads, dZa, dZd


def backward(layer: FusionLayer, z_a, z_d, upstream) -> ParamGradients:
    """Exact gradients of ``sum_b <upstream_b, forward(z_a_b, z_d_b)>``.

    Input gradients keep the shape of the inputs; parameter gradients are
    summed over the batch.
    """
    cfg = layer.config
    Za, Zd, single = _inputs(z_a, z_d, cfg.a, cfg.d)
    Gy = np.asarray(upstream, dtype=np.float64)
    if Gy.ndim == 1:
        Gy = Gy[None, :]
    if Gy.shape != (Za.shape[0], cfg.m):
        raise ValueError(f"upstream must have shape {(Za.shape[0], cfg.m)}, got {np.shape(upstream)}")

    v = layer.variant
    if v is Variant.CONCAT:
        grads, dZa, dZd = {}, Gy[:, : cfg.a].copy(), Gy[:, cfg.a :].copy()
    elif v is Variant.DENSE:
        grads, dZa, dZd = _dense_grads(layer.params, Za, Zd, Gy)
    elif v is Variant.CP:
        grads, dZa, dZd = _cp_grads(layer.params, Za, Zd, Gy)
    elif v is Variant.TUCKER:
        grads, dZa, dZd = _tucker_grads(layer.params, Za, Zd, Gy)
    else:
        grads, dZa, dZd = _cmf_grads(layer.params, Za, Zd, Gy)
    return ParamGradients(grads, _out(dZa, single), _out(dZd, single))


def finite_diff_gradient(f: Callable[[np.ndarray], float], params, h: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(p + h e_i) - f(p - h e_i)) / 2h`` per coordinate."""
    if not h > 0:
        raise ValueError(f"step must be positive, got {h}")
    p = np.array(params, dtype=np.float64)
    grad = np.empty_like(p)
    flat = p.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(p))
        flat[i] = orig - h
        fm = float(f(p))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def frobenius_penalty(layer_or_arrays) -> float:
    """Sum of squared Frobenius norms over the stored (untied) parameter arrays."""
    arrays = layer_or_arrays.arrays() if isinstance(layer_or_arrays, FusionLayer) else layer_or_arrays
    if not isinstance(arrays, Mapping):
        arrays = {"x": np.asarray(arrays, dtype=np.float64)}
    return float(sum(np.sum(np.square(a)) for a in arrays.values()))


def penalty_gradient(layer: FusionLayer) -> dict[str, np.ndarray]:
    return {name: 2.0 * a for name, a in layer.arrays().items()}


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_init(params: Mapping[str, np.ndarray], lr: float = 1e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    zeros = {k: np.zeros_like(np.asarray(p, dtype=np.float64)) for k, p in params.items()}
    return AdamState(lr, beta1, beta2, eps, 0, zeros, {k: z.copy() for k, z in zeros.items()})


def adam_step(state: AdamState, params: Mapping[str, np.ndarray],
              grads: Mapping[str, np.ndarray]) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new params and a new state."""
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ValueError("params, grads and optimizer state must share the same keys")
    t = state.t + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        if g.shape != np.shape(p) or state.m[k].shape != g.shape:
            raise ValueError(f"shape mismatch for {k}: param {np.shape(p)}, grad {g.shape}")
        m = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[k] + (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        new_params[k] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[k] = m
        new_v[k] = v
    return new_params, AdamState(state.lr, state.beta1, state.beta2, state.eps, t, new_m, new_v)
