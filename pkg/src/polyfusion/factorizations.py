"""Factorized parameterizations of the joint fusion tensor.

Three families share one joint tensor ``W`` of shape ``m x (a+1) x (d+1)``:

* CP: ``W_(1) = A1 (A3 kr A2)^T`` with rank ``k``.
* Tucker: ``W = G x_1 U1 x_2 U2 x_3 U3`` with multilinear rank ``(k1, k2, k3)``.
* Coupled matrix-tensor (CMF): first-order maps ``U Va^T`` and ``U Vd^T`` share
  their column space ``U`` with the CP factorization of the bilinear block,
  optionally also sharing the row spaces (``B2 is Va``, ``B3 is Vd``).

The dense reconstructions here are test oracles; the fusion forwards never
build ``W``. Bundles expose their unique stored arrays through ``arrays()``
and rebuild from a name-to-array mapping with ``from_arrays()``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .tensor_core import DenseTensor, TensorLike, fold, khatri_rao, mode_n_matrix_product

__all__ = [
    "CpFactors",
    "TuckerFactors",
    "CmfParams",
    "DenseParams",
    "cp_reconstruct",
    "tucker_reconstruct",
    "cmf_assemble_dense",
    "assemble_joint",
    "pad_one",
    "to_blob",
    "from_blob",
    "save_arrays",
    "load_arrays",
]


def _matrix(x, name: str) -> np.ndarray:
    arr = np.array(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def _vector(x, name: str) -> np.ndarray:
    arr = np.array(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be a vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


@dataclass(frozen=True, eq=False)
class CpFactors:
    """Factor matrices ``A1 (m x k)``, ``A2 ((a+1) x k)``, ``A3 ((d+1) x k)``."""

    A1: np.ndarray
    A2: np.ndarray
    A3: np.ndarray

    def __post_init__(self):
        for name in ("A1", "A2", "A3"):
            object.__setattr__(self, name, _matrix(getattr(self, name), name))
        ks = {self.A1.shape[1], self.A2.shape[1], self.A3.shape[1]}
        if len(ks) != 1:
            raise ValueError(f"CP factors disagree on rank: {sorted(ks)}")

    @property
    def rank(self) -> int:
        return self.A1.shape[1]

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.A1.shape[0], self.A2.shape[0], self.A3.shape[0])

    def arrays(self) -> dict[str, np.ndarray]:
        return {"A1": self.A1, "A2": self.A2, "A3": self.A3}

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "CpFactors":
        return cls(arrays["A1"], arrays["A2"], arrays["A3"])


@dataclass(frozen=True, eq=False)
class TuckerFactors:
    """Core ``G (k1 x k2 x k3)`` with factors ``U1 (m x k1)``, ``U2 ((a+1) x k2)``, ``U3 ((d+1) x k3)``."""

    G: np.ndarray
    U1: np.ndarray
    U2: np.ndarray
    U3: np.ndarray

    def __post_init__(self):
        core = np.array(self.G.array if isinstance(self.G, DenseTensor) else self.G, dtype=np.float64)
        if core.ndim != 3 or not np.all(np.isfinite(core)):
            raise ValueError(f"Tucker core must be a finite order-3 array, got shape {core.shape}")
        object.__setattr__(self, "G", core)
        for name in ("U1", "U2", "U3"):
            object.__setattr__(self, name, _matrix(getattr(self, name), name))
        cols = (self.U1.shape[1], self.U2.shape[1], self.U3.shape[1])
        if cols != core.shape:
            raise ValueError(f"factor column counts {cols} do not match core shape {core.shape}")

    @property
    def ranks(self) -> tuple[int, int, int]:
        return self.G.shape

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.U1.shape[0], self.U2.shape[0], self.U3.shape[0])

    def arrays(self) -> dict[str, np.ndarray]:
        return {"G": self.G, "U1": self.U1, "U2": self.U2, "U3": self.U3}

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "TuckerFactors":
        return cls(arrays["G"], arrays["U1"], arrays["U2"], arrays["U3"])


@dataclass(frozen=True, eq=False)
class CmfParams:
    """Coupled matrix-tensor parameters.

    ``U`` is the shared column space and doubles as the mode-1 CP factor of
    the bilinear block. With ``shared_rows`` the mode-2/3 factors ``B2``/``B3``
    are the very same arrays as ``V_a``/``V_d``; pass them as ``None``.
    """

    b: np.ndarray
    U: np.ndarray
    V_a: np.ndarray
    V_d: np.ndarray
    B2: Optional[np.ndarray] = None
    B3: Optional[np.ndarray] = None
    shared_rows: bool = False

    def __post_init__(self):
        if self.shared_rows:
            if self.B2 is not None and self.B2 is not self.V_a:
                raise ValueError("shared_rows ties B2 to V_a; do not pass a separate B2")
            if self.B3 is not None and self.B3 is not self.V_d:
                raise ValueError("shared_rows ties B3 to V_d; do not pass a separate B3")
        object.__setattr__(self, "b", _vector(self.b, "b"))
        for name in ("U", "V_a", "V_d"):
            object.__setattr__(self, name, _matrix(getattr(self, name), name))
        if self.shared_rows:
            object.__setattr__(self, "B2", self.V_a)
            object.__setattr__(self, "B3", self.V_d)
        else:
            if self.B2 is None or self.B3 is None:
                raise ValueError("B2 and B3 are required unless shared_rows is set")
            object.__setattr__(self, "B2", _matrix(self.B2, "B2"))
            object.__setattr__(self, "B3", _matrix(self.B3, "B3"))
        k = self.U.shape[1]
        for name in ("V_a", "V_d", "B2", "B3"):
            if getattr(self, name).shape[1] != k:
                raise ValueError(f"{name} has {getattr(self, name).shape[1]} columns, expected {k}")
        if self.b.shape[0] != self.U.shape[0]:
            raise ValueError(f"bias length {self.b.shape[0]} does not match U rows {self.U.shape[0]}")
        if self.B2.shape[0] != self.V_a.shape[0] or self.B3.shape[0] != self.V_d.shape[0]:
            raise ValueError("B2/B3 row counts must match V_a/V_d")

    @property
    def rank(self) -> int:
        return self.U.shape[1]

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.U.shape[0], self.V_a.shape[0], self.V_d.shape[0])

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"b": self.b, "U": self.U, "V_a": self.V_a, "V_d": self.V_d}
        if not self.shared_rows:
            out["B2"] = self.B2
            out["B3"] = self.B3
        return out

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], shared_rows: bool = False) -> "CmfParams":
        if shared_rows:
            return cls(arrays["b"], arrays["U"], arrays["V_a"], arrays["V_d"], shared_rows=True)
        return cls(arrays["b"], arrays["U"], arrays["V_a"], arrays["V_d"], arrays["B2"], arrays["B3"])


@dataclass(frozen=True, eq=False)
class DenseParams:
    """Unfactorized second-order polynomial: bias, two linear maps, bilinear tensor."""

    b: np.ndarray
    W_a: np.ndarray
    W_d: np.ndarray
    W_ad: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "b", _vector(self.b, "b"))
        object.__setattr__(self, "W_a", _matrix(self.W_a, "W_a"))
        object.__setattr__(self, "W_d", _matrix(self.W_d, "W_d"))
        W_ad = np.array(self.W_ad.array if isinstance(self.W_ad, DenseTensor) else self.W_ad, dtype=np.float64)
        if not np.all(np.isfinite(W_ad)):
            raise ValueError("W_ad has non-finite entries")
        object.__setattr__(self, "W_ad", W_ad)
        m, a, d = self.dims
        if self.W_a.shape != (m, a) or self.W_d.shape != (m, d) or W_ad.shape != (m, a, d):
            raise ValueError(
                f"inconsistent dense shapes: b {self.b.shape}, W_a {self.W_a.shape}, "
                f"W_d {self.W_d.shape}, W_ad {W_ad.shape}"
            )

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.b.shape[0], self.W_a.shape[1], self.W_d.shape[1])

    def arrays(self) -> dict[str, np.ndarray]:
        return {"b": self.b, "W_a": self.W_a, "W_d": self.W_d, "W_ad": self.W_ad}

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "DenseParams":
        return cls(arrays["b"], arrays["W_a"], arrays["W_d"], arrays["W_ad"])


def cp_reconstruct(f: CpFactors) -> DenseTensor:
    """Dense ``m x (a+1) x (d+1)`` tensor from its CP factors via the mode-1 unfolding."""
    W1 = f.A1 @ khatri_rao(f.A3, f.A2).array.T
    return fold(W1, 1, f.shape)


def tucker_reconstruct(f: TuckerFactors) -> DenseTensor:
    W = DenseTensor(f.G)
    for n, U in enumerate((f.U1, f.U2, f.U3), start=1):
        W = mode_n_matrix_product(W, n, U)
    return W


def assemble_joint(b: TensorLike, W_a: TensorLike, W_d: TensorLike, W_ad: TensorLike) -> DenseTensor:
    """Collect all polynomial terms into one ``m x (a+1) x (d+1)`` tensor.

    The bias sits at the last index of modes 2 and 3; the linear maps fill
    the last slice of the opposite mode.
    """
    W_ad = np.asarray(W_ad, dtype=np.float64)
    m, a, d = W_ad.shape
    W = np.zeros((m, a + 1, d + 1), order="F")
    W[:, a, d] = np.asarray(b, dtype=np.float64)
    W[:, :a, d] = np.asarray(W_a, dtype=np.float64)
    W[:, a, :d] = np.asarray(W_d, dtype=np.float64)
    W[:, :a, :d] = W_ad
    return DenseTensor(W)


def cmf_assemble_dense(p: CmfParams, dims: Optional[tuple[int, int, int]] = None) -> DenseTensor:
    """Joint tensor equivalent to the coupled factorization (test oracle only)."""
    if dims is not None and tuple(dims) != p.dims:
        raise ValueError(f"parameters have dims {p.dims}, requested {tuple(dims)}")
    m, a, d = p.dims
    W_ad = fold(p.U @ khatri_rao(p.B3, p.B2).array.T, 1, (m, a, d))
    return assemble_joint(p.b, p.U @ p.V_a.T, p.U @ p.V_d.T, W_ad)


def pad_one(x: TensorLike) -> np.ndarray:
    """Append a constant 1 along the last axis: ``[x, 1]``."""
    arr = np.asarray(x.array if isinstance(x, DenseTensor) else x, dtype=np.float64)
    ones = np.ones(arr.shape[:-1] + (1,))
    return np.concatenate([arr, ones], axis=-1)


# --- blob + manifest serialization -------------------------------------------

BLOB_DTYPE = "<f8"


def to_blob(arrays: Mapping[str, np.ndarray], **meta) -> tuple[bytes, dict]:
    """Pack arrays into one little-endian float64 blob plus a JSON-able manifest.

    Each array is written row-major (C order); the manifest lists name, shape
    and element offset in insertion order. Extra keyword arguments are stored
    under ``meta``.
    """
    fields = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        fields.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(np.ascontiguousarray(arr).astype(BLOB_DTYPE, copy=False).tobytes(order="C"))
        offset += arr.size
    manifest = {"dtype": BLOB_DTYPE, "layout": "row-major", "count": offset, "fields": fields, "meta": meta}
    return b"".join(chunks), manifest


def from_blob(blob: bytes, manifest: Mapping) -> dict[str, np.ndarray]:
    if manifest.get("dtype", BLOB_DTYPE) != BLOB_DTYPE or manifest.get("layout", "row-major") != "row-major":
        raise ValueError("unsupported blob dtype or layout")
    flat = np.frombuffer(blob, dtype=BLOB_DTYPE)
    if flat.size != manifest["count"]:
        raise ValueError(f"blob holds {flat.size} values, manifest declares {manifest['count']}")
    out = {}
    for entry in manifest["fields"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        out[entry["name"]] = flat[start : start + size].astype(np.float64).reshape(shape)
    return out


def save_arrays(path, arrays: Mapping[str, np.ndarray], **meta) -> None:
    """Write ``<path>.bin`` and ``<path>.json``."""
    blob, manifest = to_blob(arrays, **meta)
    with open(f"{path}.bin", "wb") as fh:
        fh.write(blob)
    with open(f"{path}.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(f"{path}.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    with open(f"{path}.bin", "rb") as fh:
        blob = fh.read()
    return from_blob(blob, manifest), manifest.get("meta", {})
