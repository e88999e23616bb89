"""Dense tensors and the multilinear primitives used by the fusion layers.

Storage is first-index-fastest (Fortran order), so ``unfold`` follows the
Kolda & Bader matricization convention: element ``(i1, ..., iN)`` of an
order-N tensor lands in row ``i_n`` and column ``sum_{k != n} i_k * J_k``
with ``J_k = prod_{m < k, m != n} I_m`` (0-based here).

Mode indices in the public functions are 1-based, to match the usual
``X x_2 v`` notation. Every function returns a freshly allocated tensor.
"""

from __future__ import annotations

from typing import Iterable, Sequence, Union

import numpy as np

__all__ = [
    "DenseTensor",
    "TensorLike",
    "from_flat",
    "unfold",
    "fold",
    "mode_n_vec_product",
    "mode_n_matrix_product",
    "outer_product",
    "kronecker",
    "khatri_rao",
    "frobenius_norm",
]


class DenseTensor:
    """Immutable order-N array of float64 values stored first-index-fastest.

    Order-1 and order-2 tensors double as the library's vectors and
    matrices. ``array`` exposes a read-only numpy view with the logical
    shape; ``flat`` gives the storage order.
    """

    __slots__ = ("_array",)

    def __init__(self, array: TensorLike) -> None:
        if isinstance(array, DenseTensor):
            array = array._array
        arr = np.array(array, dtype=np.float64, order="F", copy=True)
        if arr.ndim < 1:
            raise ValueError("a tensor needs at least one mode")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor entries must be finite")
        arr.flags.writeable = False
        self._array = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self._array.shape

    @property
    def order(self) -> int:
        return self._array.ndim

    @property
    def size(self) -> int:
        return self._array.size

    @property
    def array(self) -> np.ndarray:
        return self._array

    @property
    def flat(self) -> np.ndarray:
        """Entries in storage order (first index fastest)."""
        return self._array.ravel(order="F")

    def numpy(self) -> np.ndarray:
        """Writable copy of the entries with the logical shape."""
        return np.array(self._array, order="F")

    def __getitem__(self, key):
        return self._array[key]

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self._array
        return self._array.astype(dtype)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DenseTensor):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self._array, other._array))

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        return f"DenseTensor(shape={self.shape})"


TensorLike = Union[DenseTensor, np.ndarray, Sequence]


def _arr(x: TensorLike) -> np.ndarray:
    if isinstance(x, DenseTensor):
        return x.array
    return np.asarray(x, dtype=np.float64)


def _check_shape(shape: Iterable[int]) -> tuple[int, ...]:
    dims = tuple(int(i) for i in shape)
    if len(dims) < 1:
        raise ValueError("shape needs at least one dimension")
    if any(i < 1 for i in dims):
        raise ValueError(f"all dimensions must be positive, got {dims}")
    return dims


def _check_mode(n: int, order: int) -> int:
    if not 1 <= n <= order:
        raise ValueError(f"mode {n} out of range for an order-{order} tensor")
    return n - 1


def from_flat(shape: Sequence[int], data: Sequence[float] | np.ndarray) -> DenseTensor:
    """Build a tensor from entries listed first-index-fastest.

    >>> from_flat((2, 2), [1, 3, 2, 4]).array.tolist()
    [[1.0, 2.0], [3.0, 4.0]]
    """
    dims = _check_shape(shape)
    flat = np.asarray(data, dtype=np.float64).ravel()
    if flat.size != int(np.prod(dims, dtype=np.int64)):
        raise ValueError(f"{flat.size} entries do not fill shape {dims}")
    return DenseTensor(flat.reshape(dims, order="F"))


def unfold(X: TensorLike, n: int) -> DenseTensor:
    """Mode-n matricization, ``I_n x prod_{k != n} I_k``."""
    arr = _arr(X)
    k = _check_mode(n, arr.ndim)
    rows = arr.shape[k]
    return DenseTensor(np.moveaxis(arr, k, 0).reshape(rows, -1, order="F"))


def fold(M: TensorLike, n: int, shape: Sequence[int]) -> DenseTensor:
    """Inverse of :func:`unfold` for the given target shape."""
    mat = _arr(M)
    dims = _check_shape(shape)
    k = _check_mode(n, len(dims))
    rest = [d for i, d in enumerate(dims) if i != k]
    expected = (dims[k], int(np.prod(rest, dtype=np.int64)))
    if mat.ndim != 2 or mat.shape != expected:
        raise ValueError(f"matrix of shape {mat.shape} cannot fold to {dims} at mode {n}")
    moved = mat.reshape([dims[k]] + rest, order="F")
    return DenseTensor(np.moveaxis(moved, 0, k))


def mode_n_vec_product(X: TensorLike, n: int, v: TensorLike) -> DenseTensor:
    """Contract mode n of ``X`` with ``v``; the result has one mode fewer.

    An order-1 input yields a length-1 vector rather than a bare scalar.
    """
    arr = _arr(X)
    k = _check_mode(n, arr.ndim)
    vec = _arr(v)
    if vec.ndim != 1 or vec.shape[0] != arr.shape[k]:
        raise ValueError(f"vector of shape {vec.shape} does not match mode {n} of size {arr.shape[k]}")
    out = np.tensordot(arr, vec, axes=([k], [0]))
    if out.ndim == 0:
        out = out.reshape(1)
    return DenseTensor(out)


def mode_n_matrix_product(X: TensorLike, n: int, U: TensorLike) -> DenseTensor:
    """``X x_n U`` computed through the unfolding: ``Y_(n) = U X_(n)``."""
    arr = _arr(X)
    k = _check_mode(n, arr.ndim)
    mat = _arr(U)
    if mat.ndim != 2 or mat.shape[1] != arr.shape[k]:
        raise ValueError(f"matrix of shape {mat.shape} does not match mode {n} of size {arr.shape[k]}")
    shape = list(arr.shape)
    shape[k] = mat.shape[0]
    return fold(mat @ unfold(arr, n).array, n, shape)


def outer_product(vs: Sequence[TensorLike]) -> DenseTensor:
    """Rank-1 tensor ``v1 o v2 o ... o vN``."""
    if len(vs) == 0:
        raise ValueError("outer product of an empty list")
    vecs = [_arr(v) for v in vs]
    for v in vecs:
        if v.ndim != 1:
            raise ValueError("outer product takes vectors")
    out = vecs[0]
    for v in vecs[1:]:
        out = np.multiply.outer(out, v)
    return DenseTensor(out)


def kronecker(A: TensorLike, B: TensorLike) -> DenseTensor:
    a, b = _arr(A), _arr(B)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("kronecker product takes matrices")
    return DenseTensor(np.kron(a, b))


def khatri_rao(A: TensorLike, B: TensorLike) -> DenseTensor:
    """Columnwise Kronecker product; column k is ``A[:, k] (x) B[:, k]``."""
    a, b = _arr(A), _arr(B)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("Khatri-Rao product takes matrices")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"column counts differ: {a.shape[1]} vs {b.shape[1]}")
    return DenseTensor(np.einsum("ik,jk->ijk", a, b).reshape(a.shape[0] * b.shape[0], a.shape[1]))


def frobenius_norm(X: TensorLike) -> float:
    arr = _arr(X)
    return float(np.sqrt(np.sum(arr * arr)))
