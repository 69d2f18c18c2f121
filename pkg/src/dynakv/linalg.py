"""Small dense linear algebra: LU inversion and a cyclic Jacobi eigensolver.

Everything here targets matrices of dimension <= a few hundred, where the
O(d^3) cost per call is negligible and robustness beats cleverness.
"""

from __future__ import annotations

import numpy as np

from dynakv.errors import DimensionError, InvertibilityError, NumericError

COND_LIMIT = 1e8


def lu_factor(a):
    """LU factorization with partial pivoting.

    Returns (lu, piv) where lu packs L (unit diagonal, below) and U (on and
    above), and piv[k] is the row swapped into position k at step k.
    Raises InvertibilityError on an exactly-zero pivot column.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"square matrix required, got shape {a.shape}")
    d = a.shape[0]
    lu = a.copy()
    piv = np.arange(d)
    for k in range(d):
        p = k + int(np.argmax(np.abs(lu[k:, k])))
        if lu[p, k] == 0.0:
            raise InvertibilityError("singular matrix: zero pivot column", cond_estimate=np.inf)
        if p != k:
            lu[[k, p]] = lu[[p, k]]
            piv[k] = p
        lu[k + 1:, k] /= lu[k, k]
        lu[k + 1:, k + 1:] -= np.outer(lu[k + 1:, k], lu[k, k + 1:])
    return lu, piv


def lu_solve(lu, piv, b):
    """Solve A x = b columns-wise from a packed factorization."""
    d = lu.shape[0]
    x = np.array(b, dtype=np.float64, copy=True)
    if x.ndim == 1:
        x = x[:, None]
    for k in range(d):
        p = piv[k]
        if p != k:
            x[[k, p]] = x[[p, k]]
    for k in range(d):  # forward: L y = Pb
        x[k + 1:] -= np.outer(lu[k + 1:, k], x[k])
    for k in range(d - 1, -1, -1):  # backward: U x = y
        x[k] /= lu[k, k]
        x[:k] -= np.outer(lu[:k, k], x[k])
    return x


def invert(a, cond_limit=COND_LIMIT):
    """Invert a square matrix via LU with partial pivoting.

    Returns (inverse, cond_estimate) where the estimate is the 1-norm
    condition number ||A||_1 * ||A^-1||_1 computed from the explicit inverse
    (cheap at this scale). Raises InvertibilityError when the matrix is
    singular or the estimate reaches cond_limit.
    """
    a = np.asarray(a, dtype=np.float64)
    lu, piv = lu_factor(a)
    inv = lu_solve(lu, piv, np.eye(a.shape[0]))
    if not np.isfinite(inv).all():
        raise InvertibilityError("inverse overflowed: matrix numerically singular",
                                 cond_estimate=np.inf)
    cond = float(np.abs(a).sum(axis=0).max() * np.abs(inv).sum(axis=0).max())
    if cond >= cond_limit:
        raise InvertibilityError(
            f"ill-conditioned matrix: 1-norm condition estimate {cond:.3e} >= {cond_limit:.1e}",
            cond_estimate=cond)
    return inv, cond


def jacobi_eigh(a, tol=1e-12, max_sweeps=100):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps until the off-diagonal Frobenius norm falls below tol times the
    matrix Frobenius norm. Returns (eigenvalues, eigenvectors) unsorted, with
    eigenvectors[:, j] matching eigenvalues[j].
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"square matrix required, got shape {a.shape}")
    if np.abs(a - a.T).max(initial=0.0) > 1e-8 * max(1.0, np.abs(a).max(initial=0.0)):
        raise DimensionError("jacobi_eigh requires a symmetric matrix")
    d = a.shape[0]
    m = (a + a.T) * 0.5
    vecs = np.eye(d)
    if d == 1:
        return m.diagonal().copy(), vecs
    norm = np.linalg.norm(m)
    if norm == 0.0:
        return np.zeros(d), vecs
    strict_lower = np.tril_indices(d, k=-1)
    for _ in range(max_sweeps):
        # measure the off-diagonal norm directly: the ||M||^2 - ||diag||^2
        # shortcut cancels catastrophically once off/norm nears sqrt(eps)
        off = np.sqrt(2.0) * np.linalg.norm(m[strict_lower])
        if off <= tol * norm:
            return m.diagonal().copy(), vecs
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = m[p, q]
                if apq == 0.0:
                    continue
                # classic two-sided Givens rotation annihilating m[p, q]
                theta = (m[q, q] - m[p, p]) / (2.0 * apq)
                if theta == 0.0:
                    t = 1.0
                elif abs(theta) > 1e150:  # tan formula would overflow; use its limit
                    t = 0.5 / theta
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot_p = c * m[:, p] - s * m[:, q]
                rot_q = s * m[:, p] + c * m[:, q]
                m[:, p], m[:, q] = rot_p, rot_q
                rot_p = c * m[p, :] - s * m[q, :]
                rot_q = s * m[p, :] + c * m[q, :]
                m[p, :], m[q, :] = rot_p, rot_q
                m[p, q] = m[q, p] = 0.0
                rot_p = c * vecs[:, p] - s * vecs[:, q]
                rot_q = s * vecs[:, p] + c * vecs[:, q]
                vecs[:, p], vecs[:, q] = rot_p, rot_q
    raise NumericError(f"jacobi_eigh did not converge in {max_sweeps} sweeps")
