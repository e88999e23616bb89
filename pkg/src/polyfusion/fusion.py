"""Polynomial fusion of an audio and an identity embedding.

The joint representation is the second-order polynomial

    z~ = b + W_a z_a + W_d z_d + W_ad x_2 z_a x_3 z_d

or, equivalently, ``W x_2 [z_a, 1] x_3 [z_d, 1]`` for the joint tensor ``W``.
Factorized variants evaluate it without materializing any ``m x a x d``
array: inputs are projected onto the rank space first, then mapped back
through the ``m``-sided factor.

All forwards accept a single pair of vectors or a batch (rows are samples).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Any, Mapping, Optional, Union

import numpy as np

from . import factorizations as fz
from .factorizations import CmfParams, CpFactors, DenseParams, TuckerFactors, pad_one
from .tensor_core import DenseTensor, TensorLike, mode_n_vec_product

__all__ = [
    "Variant",
    "FusionConfig",
    "FusionLayer",
    "REFERENCE_DIMS",
    "reference_configs",
    "param_shapes",
    "param_count",
    "init_layer",
    "forward",
    "forward_dense",
    "forward_joint_dense",
    "forward_cp",
    "cp_contract",
    "tucker_contract",
    "forward_tucker",
    "forward_cmf",
    "forward_concat_baseline",
    "concat_noise",
    "joint_tensor",
    "save_layer",
    "load_layer",
]


class Variant(str, Enum):
    DENSE = "Dense"
    CP = "PF-CP"
    TUCKER = "PF-Tucker"
    CMF = "PF-CMF"
    CMF_SR = "PF-CMF-SR"
    CONCAT = "Concat"

    def __str__(self) -> str:
        return self.value


FACTORIZED = (Variant.CP, Variant.TUCKER, Variant.CMF, Variant.CMF_SR)
_RANKED = {Variant.CP, Variant.CMF, Variant.CMF_SR}

Rank = Union[int, tuple[int, int, int], None]


@dataclass(frozen=True)
class FusionConfig:
    variant: Variant
    m: int
    a: int
    d: int
    n: int = 0
    rank: Rank = None

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        for name in ("m", "a", "d", "n"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise ValueError(f"{name} must be an integer, got {value!r}")
            object.__setattr__(self, name, int(value))
        if min(self.m, self.a, self.d) < 1:
            raise ValueError(f"m, a, d must be positive, got ({self.m}, {self.a}, {self.d})")
        if self.n < 0:
            raise ValueError(f"noise dim must be non-negative, got {self.n}")
        v = self.variant
        if v is Variant.CONCAT and self.m != self.a + self.d:
            raise ValueError(f"Concat output has length a + d = {self.a + self.d}, got m = {self.m}")
        if v in _RANKED:
            k = self.rank
            if isinstance(k, bool) or not isinstance(k, (int, np.integer)) or k < 0:
                raise ValueError(f"{v} needs a non-negative integer rank, got {k!r}")
            object.__setattr__(self, "rank", int(k))
        elif v is Variant.TUCKER:
            ks = self.rank
            if not isinstance(ks, (tuple, list)) or len(ks) != 3 or any(int(k) < 1 for k in ks):
                raise ValueError(f"PF-Tucker needs three positive ranks, got {ks!r}")
            object.__setattr__(self, "rank", tuple(int(k) for k in ks))
        elif self.rank is not None:
            raise ValueError(f"{v} takes no rank")

    @property
    def c(self) -> int:
        """Length of the generator input after the noise is appended."""
        return self.output_dim + self.n

    @property
    def output_dim(self) -> int:
        return self.m

    @classmethod
    def from_dict(cls, obj: Mapping[str, Any]) -> "FusionConfig":
        if not isinstance(obj, Mapping):
            raise ValueError("config must be a JSON object")
        unknown = set(obj) - {"variant", "m", "a", "d", "n", "rank", "ranks"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "rank" in obj and "ranks" in obj:
            raise ValueError("give either rank or ranks, not both")
        try:
            variant = Variant(obj["variant"])
            a, d = obj["a"], obj["d"]
        except KeyError as exc:
            raise ValueError(f"config is missing {exc.args[0]!r}") from None
        m = obj.get("m")
        if m is None:
            if variant is not Variant.CONCAT:
                raise ValueError("config is missing 'm'")
            m = a + d
        rank = obj.get("ranks", obj.get("rank"))
        if isinstance(rank, list):
            rank = tuple(rank)
        return cls(variant, m, a, d, obj.get("n", 0), rank)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"variant": self.variant.value, "m": self.m, "a": self.a, "d": self.d, "n": self.n}
        if self.variant is Variant.TUCKER:
            out["ranks"] = list(self.rank)
        elif self.rank is not None:
            out["rank"] = self.rank
        return out

    def replace(self, **changes) -> "FusionConfig":
        fields = dict(variant=self.variant, m=self.m, a=self.a, d=self.d, n=self.n, rank=self.rank)
        fields.update(changes)
        return FusionConfig(**fields)


# Training setup of the talking-face experiments.
REFERENCE_DIMS = {"a": 256, "d": 128, "n": 10, "m": 384}
REFERENCE_RANK = 128
REFERENCE_TUCKER_RANKS = (192, 128, 64)


def reference_configs() -> list[FusionConfig]:
    a, d, n, m = REFERENCE_DIMS["a"], REFERENCE_DIMS["d"], REFERENCE_DIMS["n"], REFERENCE_DIMS["m"]
    return [
        FusionConfig(Variant.DENSE, m, a, d, n),
        FusionConfig(Variant.CP, m, a, d, n, REFERENCE_RANK),
        FusionConfig(Variant.TUCKER, m, a, d, n, REFERENCE_TUCKER_RANKS),
        FusionConfig(Variant.CMF, m, a, d, n, REFERENCE_RANK),
        FusionConfig(Variant.CMF_SR, m, a, d, n, REFERENCE_RANK),
        FusionConfig(Variant.CONCAT, a + d, a, d, n),
    ]


def param_shapes(config: FusionConfig) -> dict[str, tuple[int, ...]]:
    """Shapes of the stored parameter arrays; tied arrays appear once."""
    m, a, d, k = config.m, config.a, config.d, config.rank
    v = config.variant
    if v is Variant.DENSE:
        return {"b": (m,), "W_a": (m, a), "W_d": (m, d), "W_ad": (m, a, d)}
    if v is Variant.CP:
        return {"A1": (m, k), "A2": (a + 1, k), "A3": (d + 1, k)}
    if v is Variant.TUCKER:
        k1, k2, k3 = k
        return {"G": (k1, k2, k3), "U1": (m, k1), "U2": (a + 1, k2), "U3": (d + 1, k3)}
    if v in (Variant.CMF, Variant.CMF_SR):
        shapes = {"b": (m,), "U": (m, k), "V_a": (a, k), "V_d": (d, k)}
        if v is Variant.CMF:
            shapes.update(B2=(a, k), B3=(d, k))
        return shapes
    return {}


def param_count(config: FusionConfig) -> int:
    """Number of trainable scalars, tied parameters counted once."""
    m, a, d, k = config.m, config.a, config.d, config.rank
    v = config.variant
    if v is Variant.DENSE:
        return m + m * a + m * d + m * a * d
    if v is Variant.CP:
        return k * (m + a + 1 + d + 1)
    if v is Variant.TUCKER:
        k1, k2, k3 = k
        return k1 * k2 * k3 + m * k1 + (a + 1) * k2 + (d + 1) * k3
    if v is Variant.CMF:
        return m + k * (m + 2 * a + 2 * d)
    if v is Variant.CMF_SR:
        return m + k * (m + a + d)
    return 0


_BUNDLES = {
    Variant.DENSE: DenseParams,
    Variant.CP: CpFactors,
    Variant.TUCKER: TuckerFactors,
    Variant.CMF: CmfParams,
    Variant.CMF_SR: CmfParams,
}

Params = Union[DenseParams, CpFactors, TuckerFactors, CmfParams, None]


def _bundle_from_arrays(variant: Variant, arrays: Mapping[str, np.ndarray]) -> Params:
    if variant is Variant.CONCAT:
        return None
    if variant is Variant.CMF_SR:
        return CmfParams.from_arrays(arrays, shared_rows=True)
    return _BUNDLES[variant].from_arrays(arrays)


@dataclass(frozen=True, eq=False)
class FusionLayer:
    """A fusion config together with its parameter bundle."""

    config: FusionConfig
    params: Params = None

    def __post_init__(self):
        v = self.config.variant
        if v is Variant.CONCAT:
            if self.params is not None:
                raise ValueError("the Concat baseline has no parameters")
            return
        expected = _BUNDLES[v]
        if not isinstance(self.params, expected):
            raise TypeError(f"{v} expects {expected.__name__}, got {type(self.params).__name__}")
        if isinstance(self.params, CmfParams) and self.params.shared_rows != (v is Variant.CMF_SR):
            raise ValueError(f"{v} requires shared_rows={v is Variant.CMF_SR}")
        got = {name: arr.shape for name, arr in self.arrays().items()}
        want = param_shapes(self.config)
        if got != want:
            raise ValueError(f"parameter shapes {got} do not match config {want}")

    @property
    def variant(self) -> Variant:
        return self.config.variant

    def arrays(self) -> dict[str, np.ndarray]:
        return {} if self.params is None else self.params.arrays()

    def with_arrays(self, arrays: Mapping[str, np.ndarray]) -> "FusionLayer":
        return FusionLayer(self.config, _bundle_from_arrays(self.config.variant, arrays))

    def __call__(self, z_a, z_d) -> np.ndarray:
        return forward(self, z_a, z_d)


def init_layer(config: FusionConfig, rng: np.random.Generator, std: float = 0.02) -> FusionLayer:
    """Layer with every parameter drawn i.i.d. from ``N(0, std^2)``."""
    arrays = {name: std * rng.standard_normal(shape) for name, shape in param_shapes(config).items()}
    return FusionLayer(config, _bundle_from_arrays(config.variant, arrays))


# --- forwards ----------------------------------------------------------------


def _batch(z, dim: int, name: str) -> tuple[np.ndarray, bool]:
    arr = np.asarray(z.array if isinstance(z, DenseTensor) else z, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ValueError(f"{name} must have length {dim}, got shape {np.shape(z)}")
    return arr, single


def _inputs(z_a, z_d, a: int, d: int) -> tuple[np.ndarray, np.ndarray, bool]:
    Za, single_a = _batch(z_a, a, "z_a")
    Zd, single_d = _batch(z_d, d, "z_d")
    if Za.shape[0] != Zd.shape[0]:
        raise ValueError(f"batch sizes differ: {Za.shape[0]} vs {Zd.shape[0]}")
    return Za, Zd, single_a and single_d


def _out(Y: np.ndarray, single: bool) -> np.ndarray:
    return Y[0] if single else Y


def forward_dense(p: DenseParams, z_a, z_d) -> np.ndarray:
    m, a, d = p.dims
    Za, Zd, single = _inputs(z_a, z_d, a, d)
    Y = p.b + Za @ p.W_a.T + Zd @ p.W_d.T + np.einsum("pij,bi,bj->bp", p.W_ad, Za, Zd, optimize=True)
    return _out(Y, single)


def forward_joint_dense(W: TensorLike, z_a, z_d) -> np.ndarray:
    """Reference evaluation ``W x_2 [z_a, 1] x_3 [z_d, 1]`` through mode products."""
    W = W if isinstance(W, DenseTensor) else DenseTensor(W)
    if W.order != 3:
        raise ValueError(f"joint tensor must have order 3, got {W.order}")
    _, a1, d1 = W.shape
    Za, Zd, single = _inputs(z_a, z_d, a1 - 1, d1 - 1)
    rows = []
    for za, zd in zip(pad_one(Za), pad_one(Zd)):
        # contract mode 3 first so mode 2 keeps its index
        rows.append(mode_n_vec_product(mode_n_vec_product(W, 3, zd), 2, za).array)
    Y = np.array(rows).reshape(Za.shape[0], W.shape[0])
    return _out(Y, single)


def cp_contract(f: CpFactors, x2: np.ndarray, x3: np.ndarray) -> np.ndarray:
    """``W x_2 x2 x_3 x3`` for a CP tensor and batches of mode-2/3 vectors."""
    return ((x2 @ f.A2) * (x3 @ f.A3)) @ f.A1.T


def tucker_contract(f: TuckerFactors, x2: np.ndarray, x3: np.ndarray) -> np.ndarray:
    """``W x_2 x2 x_3 x3`` for a Tucker tensor and batches of mode-2/3 vectors."""
    P = x2 @ f.U2
    Q = x3 @ f.U3
    # core contracted over mode 3 as one matmul; the temporary is k1 x k2 x batch
    T = np.einsum("pqb,bq->bp", np.tensordot(f.G, Q, axes=([2], [1])), P)
    return T @ f.U1.T


def forward_cp(f: CpFactors, z_a, z_d) -> np.ndarray:
    _, a1, d1 = f.shape
    Za, Zd, single = _inputs(z_a, z_d, a1 - 1, d1 - 1)
    return _out(cp_contract(f, pad_one(Za), pad_one(Zd)), single)


def forward_tucker(f: TuckerFactors, z_a, z_d) -> np.ndarray:
    _, a1, d1 = f.shape
    Za, Zd, single = _inputs(z_a, z_d, a1 - 1, d1 - 1)
    return _out(tucker_contract(f, pad_one(Za), pad_one(Zd)), single)


def forward_cmf(p: CmfParams, z_a, z_d) -> np.ndarray:
    _, a, d = p.dims
    Za, Zd, single = _inputs(z_a, z_d, a, d)
    S = Za @ p.V_a + Zd @ p.V_d + (Za @ p.B2) * (Zd @ p.B3)
    return _out(p.b + S @ p.U.T, single)


def forward_concat_baseline(z_a, z_d) -> np.ndarray:
    Za = np.asarray(z_a, dtype=np.float64)
    Zd = np.asarray(z_d, dtype=np.float64)
    if Za.ndim != Zd.ndim or Za.shape[:-1] != Zd.shape[:-1]:
        raise ValueError(f"cannot concatenate shapes {Za.shape} and {Zd.shape}")
    return np.concatenate([Za, Zd], axis=-1)


def concat_noise(z_tilde, z_n) -> np.ndarray:
    """Generator input ``[z~, z_n]`` of length ``m + n``."""
    return forward_concat_baseline(z_tilde, z_n)


def forward(layer: FusionLayer, z_a, z_d) -> np.ndarray:
    v = layer.variant
    if v is Variant.CONCAT:
        cfg = layer.config
        Za, Zd, single = _inputs(z_a, z_d, cfg.a, cfg.d)
        return _out(forward_concat_baseline(Za, Zd), single)
    if v is Variant.DENSE:
        return forward_dense(layer.params, z_a, z_d)
    if v is Variant.CP:
        return forward_cp(layer.params, z_a, z_d)
    if v is Variant.TUCKER:
        return forward_tucker(layer.params, z_a, z_d)
    return forward_cmf(layer.params, z_a, z_d)


def joint_tensor(layer: FusionLayer) -> DenseTensor:
    """Materialize the ``m x (a+1) x (d+1)`` joint tensor of a layer (oracle use)."""
    v, p = layer.variant, layer.params
    if v is Variant.DENSE:
        return fz.assemble_joint(p.b, p.W_a, p.W_d, p.W_ad)
    if v is Variant.CP:
        return fz.cp_reconstruct(p)
    if v is Variant.TUCKER:
        return fz.tucker_reconstruct(p)
    if v in (Variant.CMF, Variant.CMF_SR):
        return fz.cmf_assemble_dense(p)
    raise ValueError("the Concat baseline has no joint tensor")


def save_layer(layer: FusionLayer, path) -> None:
    fz.save_arrays(path, layer.arrays(), kind="fusion_layer", config=layer.config.to_dict())


def load_layer(path) -> FusionLayer:
    arrays, meta = fz.load_arrays(path)
    if meta.get("kind") != "fusion_layer":
        raise ValueError(f"{path} does not hold a fusion layer")
    config = FusionConfig.from_dict(meta["config"])
    return FusionLayer(config, _bundle_from_arrays(config.variant, arrays))


def load_config(path) -> Union[FusionConfig, list[FusionConfig]]:
    """Read one config object or a list of them from a JSON file."""
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    if isinstance(obj, list):
        return [FusionConfig.from_dict(o) for o in obj]
    return FusionConfig.from_dict(obj)
