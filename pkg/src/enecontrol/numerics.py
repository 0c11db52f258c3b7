"""Dense linear-algebra and finite-difference substrate shared by all modules.

Conventions used throughout the library: vectors are 1-D float64 arrays,
matrices are 2-D float64 arrays, and every entry is finite.  All numerical
tolerances live here as named constants so tests and documentation reference
a single source.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
import scipy.linalg

from .errors import NonFinite, NotSymmetric, SingularMatrix

# Relative residual guaranteed by solve_symmetric_indefinite on conditioned inputs.
RTOL_SOLVE = 1e-10
# Pivot magnitude floor, relative to the infinity norm of the factored matrix.
PIVOT_FLOOR = 1e-12
# Absolute symmetry tolerance for is_positive_definite.
SYM_TOL = 1e-9
# Smallest Cholesky pivot accepted as positive definite.
CHOL_PIVOT_FLOOR = 1e-10
# Central-difference step for first derivatives.
FD_STEP = 1e-5
# Outer central-difference step for second-derivative contractions; larger
# than FD_STEP because the inner Jacobian may itself be a finite difference.
FD_HESS_STEP = 1e-4


def require_finite(arr: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFinite(f"{what} contains non-finite entries")
    return arr


def _pivot_magnitudes(d: np.ndarray) -> list[float]:
    """Magnitudes of the 1x1 / 2x2 pivot blocks of an LDL^T block-diagonal factor."""
    n = d.shape[0]
    mags: list[float] = []
    i = 0
    while i < n:
        if i + 1 < n and (d[i, i + 1] != 0.0 or d[i + 1, i] != 0.0):
            block = d[i : i + 2, i : i + 2]
            mags.append(float(np.min(np.abs(np.linalg.eigvalsh(0.5 * (block + block.T))))))
            i += 2
        else:
            mags.append(abs(float(d[i, i])))
            i += 1
    return mags


def solve_symmetric_indefinite(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve a @ x = b for symmetric (possibly indefinite) a.

    Uses an LDL^T factorization with Bunch-Kaufman pivoting (LAPACK sytrf via
    scipy).  Raises SingularMatrix when any pivot magnitude falls below
    PIVOT_FLOOR * ||a||_inf, which signals a singular control/multiplier
    KKT block upstream.
    """
    a = np.asarray(a, dtype=float)
    b_arr = np.asarray(b, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    require_finite(a, "matrix")
    require_finite(b_arr, "right-hand side")
    b_was_vector = b_arr.ndim == 1
    rhs = b_arr[:, None] if b_was_vector else b_arr
    if rhs.shape[0] != a.shape[0]:
        raise ValueError(f"incompatible shapes {a.shape} and {b_arr.shape}")
    n = a.shape[0]
    if n == 0:
        return b_arr.copy()

    lu, d, perm = scipy.linalg.ldl(a, lower=True)
    floor = PIVOT_FLOOR * float(np.linalg.norm(a, np.inf))
    for mag in _pivot_magnitudes(d):
        if mag < floor or mag == 0.0:
            raise SingularMatrix(f"pivot magnitude {mag:.3e} below floor {floor:.3e}")

    lp = lu[perm]
    y = scipy.linalg.solve_triangular(lp, rhs[perm], lower=True, unit_diagonal=True)
    z = _block_diag_solve(d, y)
    q = scipy.linalg.solve_triangular(lp.T, z, lower=False, unit_diagonal=True)
    x = np.empty_like(q)
    x[perm] = q
    require_finite(x, "solution")
    return x[:, 0] if b_was_vector else x


def _block_diag_solve(d: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    n = d.shape[0]
    out = np.empty_like(rhs)
    i = 0
    while i < n:
        if i + 1 < n and (d[i, i + 1] != 0.0 or d[i + 1, i] != 0.0):
            out[i : i + 2] = np.linalg.solve(d[i : i + 2, i : i + 2], rhs[i : i + 2])
            i += 2
        else:
            out[i] = rhs[i] / d[i, i]
            i += 1
    return out


def fd_jacobian(func: Callable[[np.ndarray], np.ndarray], at: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central-difference Jacobian of a vector map at a point.

    Entry (i, j) is (f_i(x + step e_j) - f_i(x - step e_j)) / (2 step).
    """
    if step <= 0.0:
        raise ValueError("step must be positive")
    at = np.asarray(at, dtype=float)
    cols = []
    for j in range(at.size):
        dz = np.zeros_like(at)
        dz[j] = step
        fp = np.asarray(func(at + dz), dtype=float)
        fm = np.asarray(func(at - dz), dtype=float)
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise NonFinite("function evaluation returned a non-finite value")
        cols.append((fp - fm) / (2.0 * step))
    return np.column_stack(cols) if cols else np.zeros((np.asarray(func(at)).size, 0))


def is_positive_definite(a: np.ndarray) -> bool:
    """True iff the symmetric matrix a has all Cholesky pivots above the floor.

    Raises NotSymmetric when ||a - a^T||_max exceeds SYM_TOL.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    require_finite(a, "matrix")
    if a.size and float(np.max(np.abs(a - a.T))) > SYM_TOL:
        raise NotSymmetric("matrix is not symmetric within tolerance")
    try:
        chol = np.linalg.cholesky(0.5 * (a + a.T))
    except np.linalg.LinAlgError:
        return False
    return bool(np.min(np.diag(chol)) > CHOL_PIVOT_FLOOR)
