import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polyfusion.tensor_core import (
    DenseTensor,
    fold,
    from_flat,
    frobenius_norm,
    khatri_rao,
    kronecker,
    mode_n_vec_product,
    outer_product,
    unfold,
)

import oracles

# Frontal slices [[1,2],[3,4]] and [[5,6],[7,8]]; the running example for unfold.
X_SLICES = from_flat((2, 2, 2), [1, 3, 2, 4, 5, 7, 6, 8])


def test_from_flat_matrix_layout():
    assert from_flat((2, 2), [1, 3, 2, 4]).array.tolist() == [[1, 2], [3, 4]]
    assert from_flat((2,), [5, 6]).array.tolist() == [5, 6]


def test_from_flat_order3_follows_offset_formula():
    data = list(range(1, 9))
    X = from_flat((2, 2, 2), data)
    expected = oracles.tensor_from_flat((2, 2, 2), data)
    for idx, value in expected.items():
        assert X[idx] == value
    assert X[:, :, 0].tolist() == [[1, 3], [2, 4]]
    assert X[:, :, 1].tolist() == [[5, 7], [6, 8]]
    assert X.flat.tolist() == data


def test_slices_example():
    assert X_SLICES[:, :, 0].tolist() == [[1, 2], [3, 4]]
    assert X_SLICES[:, :, 1].tolist() == [[5, 6], [7, 8]]


def test_from_flat_errors():
    with pytest.raises(ValueError):
        from_flat((2, 2), [1, 2, 3])
    with pytest.raises(ValueError):
        from_flat((2,), [1, np.nan])
    with pytest.raises(ValueError):
        from_flat((0, 2), [])


def test_tensor_is_immutable_copy():
    src = np.ones((2, 2))
    X = DenseTensor(src)
    src[0, 0] = 5
    assert X[0, 0] == 1
    with pytest.raises(ValueError):
        X.array[0, 0] = 3


@pytest.mark.parametrize(
    "n, expected",
    [(1, [[1, 2, 5, 6], [3, 4, 7, 8]]), (2, [[1, 3, 5, 7], [2, 4, 6, 8]]), (3, [[1, 3, 2, 4], [5, 7, 6, 8]])],
)
def test_unfold_examples(n, expected):
    as_dict = {idx: X_SLICES[idx] for idx in np.ndindex(2, 2, 2)}
    assert oracles.unfold_loops(as_dict, (2, 2, 2), n - 1) == expected
    assert unfold(X_SLICES, n).array.tolist() == expected


def test_unfold_matrix_mode1_is_identity():
    M = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(unfold(M, 1).array, M)


def test_unfold_mode_out_of_range():
    with pytest.raises(ValueError):
        unfold(X_SLICES, 0)
    with pytest.raises(ValueError):
        unfold(X_SLICES, 4)


def test_fold_examples():
    assert fold(unfold(X_SLICES, 2), 2, X_SLICES.shape) == X_SLICES
    assert fold([[1, 2, 5, 6], [3, 4, 7, 8]], 1, (2, 2, 2)) == X_SLICES
    row = fold([[1.0, 2.0, 3.0]], 1, (1, 3))
    assert row.array.tolist() == [[1, 2, 3]]
    with pytest.raises(ValueError):
        fold(np.ones((2, 3)), 1, (2, 2, 2))


def test_unfold_random_against_loops(rng):
    shape = (3, 2, 4, 2)
    data = rng.standard_normal(int(np.prod(shape)))
    X = from_flat(shape, data)
    as_dict = oracles.tensor_from_flat(shape, data)
    for n in range(1, 5):
        assert unfold(X, n).array.tolist() == oracles.unfold_loops(as_dict, shape, n - 1)


shapes = st.lists(st.integers(1, 4), min_size=1, max_size=4)


@settings(max_examples=60, deadline=None)
@given(shapes, st.integers(0, 2**32 - 1))
def test_fold_unfold_roundtrip_bitwise(shape, seed):
    X = DenseTensor(np.random.default_rng(seed).standard_normal(shape))
    for n in range(1, len(shape) + 1):
        Y = fold(unfold(X, n), n, shape)
        assert Y.array.tobytes() == X.array.tobytes()


def test_mode_product_examples():
    A = [[1, 2], [3, 4]]
    assert mode_n_vec_product(A, 1, [1, 1]).array.tolist() == [4, 6]
    assert mode_n_vec_product(A, 2, [1, 0]).array.tolist() == [1, 3]
    col = mode_n_vec_product(mode_n_vec_product(X_SLICES, 3, [1, 0]), 2, [1, 0])
    as_dict = {idx: X_SLICES[idx] for idx in np.ndindex(2, 2, 2)}
    brute = oracles.mode_product_loops(oracles.mode_product_loops(as_dict, (2, 2, 2), 2, [1, 0]), (2, 2), 1, [1, 0])
    assert col.array.tolist() == [brute[(0,)], brute[(1,)]] == [1, 3]


def test_mode_product_on_vector_returns_length_one():
    out = mode_n_vec_product([1.0, 2.0], 1, [3.0, 4.0])
    assert out.shape == (1,) and out[0] == 11


def test_mode_product_errors():
    with pytest.raises(ValueError):
        mode_n_vec_product(X_SLICES, 2, [1, 2, 3])
    with pytest.raises(ValueError):
        mode_n_vec_product(X_SLICES, 4, [1, 2])


def test_mode_product_random_against_loops(rng):
    shape = (3, 4, 2)
    data = rng.standard_normal(24)
    X = from_flat(shape, data)
    v = rng.standard_normal(4)
    brute = oracles.mode_product_loops(oracles.tensor_from_flat(shape, data), shape, 1, v)
    got = mode_n_vec_product(X, 2, v)
    for idx, value in brute.items():
        assert got[idx] == pytest.approx(value, rel=1e-12)


def test_mode_product_linear_in_vector(rng):
    X = DenseTensor(rng.standard_normal((3, 4, 5)))
    u, v = rng.standard_normal(4), rng.standard_normal(4)
    alpha, beta = 1.7, -0.3
    lhs = mode_n_vec_product(X, 2, alpha * u + beta * v).array
    rhs = alpha * mode_n_vec_product(X, 2, u).array + beta * mode_n_vec_product(X, 2, v).array
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12 * np.abs(rhs).max())


def test_mode_products_match_unfolding(rng):
    X = DenseTensor(rng.standard_normal((3, 4, 5)))
    u, v = rng.standard_normal(4), rng.standard_normal(5)
    direct = mode_n_vec_product(mode_n_vec_product(X, 3, v), 2, u).array
    via_unfold = unfold(X, 1).array @ kronecker(v[:, None], u[:, None]).array[:, 0]
    np.testing.assert_allclose(direct, via_unfold, rtol=1e-12)


def test_outer_product_examples():
    assert outer_product([[1, 2], [3, 4]]).array.tolist() == [[3, 4], [6, 8]]
    one = outer_product([[1], [1], [1]])
    assert one.shape == (1, 1, 1) and one[0, 0, 0] == 1
    X = outer_product([[1, 2], [3, 4], [5, 6]])
    assert X[0, 0, 0] == 15 and X[1, 1, 1] == 48
    with pytest.raises(ValueError):
        outer_product([])


def test_outer_product_unfolds_to_khatri_rao(rng):
    vs = [rng.standard_normal(n) for n in (3, 4, 2)]
    lhs = unfold(outer_product(vs), 1).array
    kr = khatri_rao(vs[2][:, None], vs[1][:, None]).array
    np.testing.assert_allclose(lhs, vs[0][:, None] @ kr.T, rtol=1e-12)


def test_kronecker_examples():
    assert np.array_equal(kronecker(np.eye(2), np.eye(2)).array, np.eye(4))
    assert kronecker([[1], [2]], [[3], [4]]).array.ravel().tolist() == [3, 4, 6, 8]
    B = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(kronecker([[2.5]], B).array, 2.5 * B)


def test_khatri_rao_examples():
    assert khatri_rao([[1], [2]], [[3], [4]]).array.ravel().tolist() == [3, 4, 6, 8]
    K = khatri_rao(np.eye(2), np.eye(2)).array
    assert K.tolist() == [[1, 0], [0, 0], [0, 0], [0, 1]]
    with pytest.raises(ValueError):
        khatri_rao(np.ones((2, 2)), np.ones((2, 3)))


def test_khatri_rao_single_column_is_kronecker(rng):
    a, b = rng.standard_normal((3, 1)), rng.standard_normal((4, 1))
    assert np.array_equal(khatri_rao(a, b).array, kronecker(a, b).array)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3))
def test_product_shapes(I, J, KA, KB, K):
    A, B = np.ones((I, KA)), np.ones((J, KB))
    assert kronecker(A, B).shape == (I * J, KA * KB)
    assert khatri_rao(np.ones((I, K)), np.ones((J, K))).shape == (I * J, K)


def test_frobenius_norm():
    assert frobenius_norm(np.zeros((3, 2))) == 0
    assert frobenius_norm([[3, 4]]) == 5


def test_frobenius_norm_brute_force_and_unfold_invariance(rng):
    X = rng.standard_normal((2, 3, 4))
    brute = sum(x * x for x in X.ravel().tolist())
    assert frobenius_norm(X) ** 2 == pytest.approx(brute, rel=1e-12)
    for n in (1, 2, 3):
        assert frobenius_norm(unfold(X, n)) ** 2 == pytest.approx(brute, rel=1e-12)
