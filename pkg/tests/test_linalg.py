import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from ddp_irl.linalg import (SingularMatrixError, commutation_matrix, contract, cross_mat,
                            dvec, kron, quat_mul, quat_to_rot, solve_regularized, undvec,
                            unvec, vec)

dims = st.integers(1, 4)
finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


@given(st.data())
def test_vec_of_product_identity(data):
    n, m, k, q = (data.draw(dims) for _ in range(4))
    A = data.draw(arrays(float, (n, m), elements=finite))
    X = data.draw(arrays(float, (m, k), elements=finite))
    B = data.draw(arrays(float, (k, q), elements=finite))
    assert np.allclose(vec(A @ X @ B), kron(B.T, A) @ vec(X), atol=1e-8)


@given(st.data())
def test_commutation_matrix_transposes(data):
    n, m = data.draw(dims), data.draw(dims)
    A = data.draw(arrays(float, (n, m), elements=finite))
    C = commutation_matrix(n, m)
    assert np.array_equal(C @ vec(A), vec(A.T))
    assert np.array_equal(C.T @ C, np.eye(n * m))


@given(st.data())
def test_unvec_and_undvec_invert(data):
    n, m, p = data.draw(dims), data.draw(dims), data.draw(dims)
    A = data.draw(arrays(float, (n, m), elements=finite))
    assert np.array_equal(unvec(vec(A), n, m), A)
    S = data.draw(arrays(float, (p, n, m), elements=finite))
    D = dvec(S)
    assert D.shape == (n * m, p)
    assert np.array_equal(D[:, 0], vec(S[0]))
    assert np.array_equal(undvec(D, n, m), S)


def test_contract_weights_slices():
    T = np.arange(12.0).reshape(3, 2, 2)
    assert np.array_equal(contract([1, 0, 0], T), T[0])
    assert np.array_equal(contract([1, 2, 3], T), T[0] + 2 * T[1] + 3 * T[2])
    with pytest.raises(ValueError):
        contract([1, 2], T)


def test_solve_regularized_paths():
    H = np.array([[4.0, 1.0], [1.0, 3.0]])
    b = np.array([1.0, 2.0])
    assert np.allclose(H @ solve_regularized(H, b), b)
    K = np.array([[0.0, 1.0], [1.0, 0.0]])            # indefinite goes through LU
    assert np.allclose(K @ solve_regularized(K, b), b)
    assert np.allclose((H + 2 * np.eye(2)) @ solve_regularized(H, b, 2.0), b)
    with pytest.raises(SingularMatrixError) as e:
        solve_regularized(np.ones((2, 2)), b)
    assert e.value.min_pivot >= 0
    with pytest.raises(ValueError):
        solve_regularized(H, b, -1.0)


@given(arrays(float, 4, elements=st.floats(-1, 1)).filter(lambda q: np.linalg.norm(q) > 0.1))
@settings(max_examples=50)
def test_quaternion_rotation_is_orthonormal_and_multiplicative(q):
    R = quat_to_rot(q)
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.isclose(np.linalg.det(R), 1.0)
    qn = q / np.linalg.norm(q)
    assert np.allclose(quat_to_rot(quat_mul(qn, qn)), R @ R, atol=1e-12)


def test_cross_matrix():
    a, b = np.array([1.0, 2.0, 3.0]), np.array([-1.0, 0.5, 2.0])
    assert np.allclose(cross_mat(a) @ b, np.cross(a, b))
