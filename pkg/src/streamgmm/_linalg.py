"""Small dense linear algebra helpers.

Inversion of estimated variance matrices goes through Cholesky solves
rather than explicit inverses; singular normal equations get one ridge
retry before failing.
"""

import numpy as np
import scipy.linalg as sla

from .errors import SingularSystem


def sym(M):
    return 0.5 * (M + M.T)


def chol_factor(M):
    """Lower Cholesky factor of a symmetric PD matrix."""
    return sla.cho_factor(sym(np.asarray(M, dtype=float)), lower=True)


def chol_solve(factor, B):
    return sla.cho_solve(factor, np.asarray(B, dtype=float))


def solve_spd_ridge(A, b, rel=1e-10):
    """Solve A x = b for symmetric A, retrying once with a small ridge.

    The ridge is rel * (1 + trace(A)/p) * I, so degenerate early batches
    do not abort a stream.
    """
    A = sym(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float)
    try:
        x = np.linalg.solve(A, b)
        if np.all(np.isfinite(x)):
            return x
    except np.linalg.LinAlgError:
        pass
    p = A.shape[0]
    ridge = rel * (1.0 + np.trace(A) / p)
    try:
        x = np.linalg.solve(A + ridge * np.eye(p), b)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem("normal equations singular after ridge retry") from exc
    if not np.all(np.isfinite(x)):
        raise SingularSystem("normal equations produced non-finite solution")
    return x


def quad_form_solve(M_factor, v):
    """v' M^{-1} v through a Cholesky solve."""
    return float(np.asarray(v) @ chol_solve(M_factor, v))
