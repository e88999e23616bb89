"""Randomized equivalence and gradient checks used by the CLI and the tests.

Every trial draws from its own RNG stream spawned from the master seed, so
results do not depend on whether trials run in parallel.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .fusion import (
    FACTORIZED,
    FusionConfig,
    FusionLayer,
    Variant,
    forward,
    forward_joint_dense,
    init_layer,
    joint_tensor,
)
from .grad_opt import backward, finite_diff_gradient

__all__ = [
    "DEFAULT_MAX_ENTRIES",
    "MemoryCapExceeded",
    "random_config",
    "relative_error",
    "gradient_errors",
    "equivalence_trial",
    "gradcheck_trial",
    "run_trials",
    "check_dense_cap",
]

DEFAULT_MAX_ENTRIES = 2**26


class MemoryCapExceeded(ValueError):
    pass


def check_dense_cap(config: FusionConfig, max_entries: int = DEFAULT_MAX_ENTRIES) -> None:
    entries = config.m * (config.a + 1) * (config.d + 1)
    if entries > max_entries:
        raise MemoryCapExceeded(
            f"dense joint tensor would hold {entries:,} entries "
            f"(m={config.m}, a={config.a}, d={config.d}); cap is {max_entries:,}"
        )


def random_config(variant: Variant, rng: np.random.Generator, max_dim: int = 8, max_rank: int = 4,
                  n: int = 0) -> FusionConfig:
    """Config with dims uniform in ``1..max_dim`` and ranks in ``1..max_rank``."""
    variant = Variant(variant)
    a, d = (int(x) for x in rng.integers(1, max_dim + 1, size=2))
    m = a + d if variant is Variant.CONCAT else int(rng.integers(1, max_dim + 1))
    rank = None
    if variant is Variant.TUCKER:
        rank = tuple(int(x) for x in rng.integers(1, max_rank + 1, size=3))
    elif variant in (Variant.CP, Variant.CMF, Variant.CMF_SR):
        rank = int(rng.integers(1, max_rank + 1))
    return FusionConfig(variant, m, a, d, n, rank)


def relative_error(got, want) -> float:
    """``max|got - want| / max|want|`` (absolute error when ``want`` is all zero)."""
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    scale = float(np.max(np.abs(want))) if want.size else 0.0
    diff = float(np.max(np.abs(got - want))) if want.size else 0.0
    return diff / scale if scale > 0 else diff


def gradient_errors(analytic, numeric) -> float:
    """Worst elementwise relative error between two gradient arrays.

    Each coordinate is compared as ``|g - f| / max(|g|, |f|, s)`` with the
    floor ``s`` set to 1e-3 of the array's largest magnitude; coordinates
    near zero are thus judged against the array's own scale rather than
    against roundoff in the difference quotient.
    """
    g = np.asarray(analytic, dtype=np.float64)
    f = np.asarray(numeric, dtype=np.float64)
    if g.size == 0:
        return 0.0
    scale = max(float(np.max(np.abs(g))), float(np.max(np.abs(f))))
    if scale == 0.0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(g), np.abs(f)), 1e-3 * scale)
    return float(np.max(np.abs(g - f) / denom))


def equivalence_trial(layer: FusionLayer, rng: np.random.Generator, batch: int = 1) -> float:
    """Relative error of the layer's forward against the dense joint-tensor evaluation."""
    cfg = layer.config
    za = rng.standard_normal((batch, cfg.a))
    zd = rng.standard_normal((batch, cfg.d))
    return relative_error(forward(layer, za, zd), forward_joint_dense(joint_tensor(layer), za, zd))


def gradcheck_trial(layer: FusionLayer, rng: np.random.Generator, h: float = 1e-5,
                    batch: int = 2) -> dict[str, float]:
    """Per-array worst gradient error of ``backward`` against central differences.

    The scalar under test is ``<u, forward(z_a, z_d)>`` for random ``u``.
    Keys are parameter names plus ``"z_a"`` and ``"z_d"``.
    """
    cfg = layer.config
    za = rng.standard_normal((batch, cfg.a))
    zd = rng.standard_normal((batch, cfg.d))
    u = rng.standard_normal((batch, cfg.output_dim))
    grads = backward(layer, za, zd, u)
    arrays = layer.arrays()
    errors = {}
    for name, arr in arrays.items():
        def f(x, name=name):
            return float(np.sum(u * forward(layer.with_arrays({**arrays, name: x}), za, zd)))

        errors[name] = gradient_errors(grads.params[name], finite_diff_gradient(f, arr, h))
    errors["z_a"] = gradient_errors(grads.z_a, finite_diff_gradient(lambda x: float(np.sum(u * forward(layer, x, zd))), za, h))
    errors["z_d"] = gradient_errors(grads.z_d, finite_diff_gradient(lambda x: float(np.sum(u * forward(layer, za, x))), zd, h))
    return errors


@dataclass
class TrialSummary:
    variant: str
    trials: int
    worst: float = 0.0
    per_array: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"variant": self.variant, "trials": self.trials, "max_rel_err": self.worst,
                **({"per_array": self.per_array} if self.per_array else {})}


def run_trials(kind: str, variant: Variant, trials: int, seed: int, config: Optional[FusionConfig] = None,
               h: float = 1e-5, parallel: int = 1, param_std: float = 1.0) -> TrialSummary:
    """Run ``trials`` equivalence (``kind="equiv"``) or gradient (``kind="grad"``) checks.

    With ``config`` given every trial uses its dims; otherwise dims are
    drawn per trial by :func:`random_config`.
    """
    variant = Variant(variant)
    if kind not in ("equiv", "grad"):
        raise ValueError(f"unknown check kind {kind!r}")
    streams = np.random.SeedSequence([seed, list(Variant).index(variant)]).spawn(trials)

    def one(ss):
        rng = np.random.default_rng(ss)
        cfg = config if config is not None else random_config(
            variant, rng, max_dim=8 if kind == "equiv" else 5, max_rank=4 if kind == "equiv" else 3)
        layer = init_layer(cfg, rng, std=param_std)
        if kind == "equiv":
            return {"forward": equivalence_trial(layer, rng)}
        return gradcheck_trial(layer, rng, h)

    if parallel > 1:
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(one, streams))
    else:
        results = [one(ss) for ss in streams]

    summary = TrialSummary(variant.value, trials)
    for res in results:
        for name, err in res.items():
            summary.per_array[name] = max(summary.per_array.get(name, 0.0), err)
    summary.worst = max(summary.per_array.values(), default=0.0)
    if kind == "equiv":
        summary.per_array = {}
    return summary
