"""Small dense linear-algebra helpers used by the DDP recursions.

Storage convention: every matrix is an ordinary row-major (C order) numpy
array.  ``vec`` always stacks *columns*, independent of storage, so the usual
identity ``vec(A X B) = kron(B.T, A) @ vec(X)`` holds.

A third-order tensor ``T`` has shape ``(d1, d2, d3)`` and its i-th slice is
``T[i]``, a ``d2 x d3`` matrix.  ``contract(v, T)`` is the weighted slice sum
``sum_i v[i] * T[i]``.
"""

import jax
import jax.numpy as jnp
import numpy as np
import scipy.linalg as sla


class SingularMatrixError(np.linalg.LinAlgError):
    """Raised when a (regularized) matrix cannot be inverted reliably."""

    def __init__(self, message, min_pivot=float("nan")):
        super().__init__(message)
        self.min_pivot = min_pivot


def vec(m):
    """Column-stacking vectorization."""
    m = np.asarray(m, dtype=float)
    if m.ndim == 1:
        return m.copy()
    return m.reshape(-1, order="F")


def unvec(v, rows, cols):
    """Inverse of ``vec`` for a ``rows x cols`` matrix."""
    return np.asarray(v, dtype=float).reshape((rows, cols), order="F")


def kron(a, b):
    return np.kron(np.atleast_2d(a), np.atleast_2d(b))


def commutation_matrix(n, m):
    """The nm x nm permutation C with ``C @ vec(A) = vec(A.T)`` for n x m A."""
    if n < 1 or m < 1:
        raise ValueError("commutation_matrix needs n, m >= 1")
    # vec(A)[i + j*n] = A[i, j] and vec(A.T)[j + i*m] = A[i, j]
    i, j = np.meshgrid(np.arange(n), np.arange(m), indexing="ij")
    c = np.zeros((n * m, n * m))
    c[(j + i * m).ravel(), (i + j * n).ravel()] = 1.0
    return c


def contract(v, t):
    """Weighted sum of tensor slices, ``sum_i v[i] * t[i]``."""
    v = np.asarray(v, dtype=float)
    t = np.asarray(t, dtype=float)
    if t.ndim != 3 or v.shape != (t.shape[0],):
        raise ValueError(
            f"contract: vector of shape {v.shape} does not match tensor {t.shape}")
    return np.tensordot(v, t, axes=(0, 0))


def dvec(stack):
    """Turn a stack of tangents ``(p, r, c)`` into the ``(r*c, p)`` matrix whose
    j-th column is ``vec(stack[j])``."""
    stack = np.asarray(stack, dtype=float)
    p = stack.shape[0]
    if stack.ndim == 2:
        return stack.T.copy()
    return stack.transpose(0, 2, 1).reshape(p, -1).T


def undvec(d, rows, cols):
    """Inverse of ``dvec``: ``(rows*cols, p)`` -> ``(p, rows, cols)``."""
    p = d.shape[1]
    return d.T.reshape(p, cols, rows).transpose(0, 2, 1)


def _is_symmetric(h):
    return h.shape[0] == h.shape[1] and np.allclose(h, h.T, rtol=1e-12, atol=1e-14)


def solve_regularized(h, rhs, rho=0.0):
    """Solve ``(h + rho I) X = rhs``.

    Symmetric positive definite systems go through Cholesky and everything
    else (indefinite or unsymmetric, e.g. saddle-point KKT blocks) through LU.  A
    ``SingularMatrixError`` carrying the smallest pivot magnitude is raised when
    the matrix is singular to working precision.
    """
    h = np.atleast_2d(np.asarray(h, dtype=float))
    rhs = np.asarray(rhs, dtype=float)
    if rho < 0:
        raise ValueError("rho must be non-negative")
    n = h.shape[0]
    if h.shape != (n, n):
        raise ValueError(f"solve_regularized: matrix must be square, got {h.shape}")
    a = h + rho * np.eye(n)
    if _is_symmetric(h):
        try:
            c = sla.cho_factor(a, check_finite=True)
            return sla.cho_solve(c, rhs)
        except np.linalg.LinAlgError:
            pass
    lu, piv = sla.lu_factor(a, check_finite=True)
    pivots = np.abs(np.diag(lu))
    scale = max(np.abs(a).max(), 1e-300)
    if pivots.min() <= n * np.finfo(float).eps * scale:
        raise SingularMatrixError(
            f"matrix singular after regularization (smallest pivot {pivots.min():.3e})",
            float(pivots.min()))
    return sla.lu_solve((lu, piv), rhs)


def cholesky_or_none(a):
    """Cholesky factor of a symmetric matrix, or None if not positive definite."""
    try:
        return sla.cho_factor(a, check_finite=False)
    except np.linalg.LinAlgError:
        return None


# --------------------------------------------------------------------------
# quaternions, scalar-first [w, x, y, z].  These accept numpy arrays or jax
# tracers so that benchmark dynamics can be differentiated through them.

def _xp(*arrays):
    for a in arrays:
        if isinstance(a, jax.Array):
            return jnp
    return np


def _arr(xp, a):
    return a if xp is jnp else np.asarray(a, dtype=float)


def quat_mul(q1, q2):
    """Hamilton product q1 (x) q2."""
    xp = _xp(q1, q2)
    q1, q2 = _arr(xp, q1), _arr(xp, q2)
    w1, x1, y1, z1 = q1[0], q1[1], q1[2], q1[3]
    w2, x2, y2, z2 = q2[0], q2[1], q2[2], q2[3]
    return xp.stack([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def quat_to_rot(q):
    """Rotation matrix of a quaternion (normalized first)."""
    xp = _xp(q)
    q = _arr(xp, q)
    q = q / xp.sqrt(q @ q)
    w, x, y, z = q[0], q[1], q[2], q[3]
    return xp.stack([
        xp.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)]),
        xp.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)]),
        xp.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)]),
    ])


def cross_mat(v):
    """Skew-symmetric matrix with ``cross_mat(v) @ w == cross(v, w)``."""
    xp = _xp(v)
    v = _arr(xp, v)
    a, b, c = v[0], v[1], v[2]
    zero = xp.zeros_like(a)
    return xp.stack([
        xp.stack([zero, -c, b]),
        xp.stack([c, zero, -a]),
        xp.stack([-b, a, zero]),
    ])
