"""Dense linear-algebra kernel used by every other module.

Matrices are plain 2-D float64 numpy arrays in row-major (C) order. All
operations are pure functions: inputs are never mutated and outputs are
freshly allocated, so values can be shared freely across threads. Heavy
lifting (products, Cholesky, symmetric eigendecomposition) is delegated to
numpy/scipy LAPACK bindings; this module pins the contracts on top of them.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import lapack

from .errors import EigenDecompositionError, FactorizationError, NonFiniteError, ShapeError

__all__ = [
    "as_matrix",
    "gemm",
    "frob_inner",
    "frob_norm",
    "spd_solve",
    "spd_inverse",
    "sym_eig",
    "numerical_rank",
]

DEFAULT_RANK_TOL = 1e-7


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Validate and convert ``x`` to a 2-D float64 C-order array.

    Raises ShapeError for anything that is not a non-empty 2-D array and
    NonFiniteError if any entry is NaN/Inf.
    """
    a = np.asarray(x, dtype=np.float64, order="C")
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got ndim={a.ndim}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeError(f"{name} must have at least one row and column, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return a


def _finite_output(x: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{op} produced non-finite entries")
    return x


def gemm(a, b, transpose_a: bool = False, transpose_b: bool = False) -> np.ndarray:
    """General matrix product with optional transposition of either operand."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    op_a = a.T if transpose_a else a
    op_b = b.T if transpose_b else b
    if op_a.shape[1] != op_b.shape[0]:
        raise ShapeError(
            f"inner dimensions do not agree: effective shapes {op_a.shape} x {op_b.shape}"
        )
    return _finite_output(op_a @ op_b, "gemm")


def frob_inner(a, b) -> float:
    """Frobenius inner product: the sum of entrywise products."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch for inner product: {a.shape} vs {b.shape}")
    return float(np.dot(a.ravel(), b.ravel()))


def frob_norm(a) -> float:
    """Frobenius norm, sqrt of the self inner product."""
    a = as_matrix(a, "a")
    return float(np.linalg.norm(a))


def _symmetrize(p: np.ndarray) -> np.ndarray:
    return 0.5 * (p + p.T)


def spd_solve(p, rhs, damping: float = 0.0) -> np.ndarray:
    """Solve (p + damping*I) x = rhs with p symmetric positive definite.

    The coefficient is symmetrized as (p + p^T)/2 before factorization, so
    callers may pass Gram matrices carrying rounding asymmetry. The solve goes
    through a Cholesky factorization; no explicit inverse is formed.
    """
    p = as_matrix(p, "p")
    rhs = as_matrix(rhs, "rhs")
    if p.shape[0] != p.shape[1]:
        raise ShapeError(f"p must be square, got shape {p.shape}")
    if p.shape[0] != rhs.shape[0]:
        raise ShapeError(f"rhs rows {rhs.shape[0]} do not match p dimension {p.shape[0]}")
    if damping < 0.0:
        raise ValueError(f"damping must be >= 0, got {damping}")

    coeff = _symmetrize(p)
    if damping > 0.0:
        coeff = coeff + damping * np.eye(p.shape[0])

    c, info = lapack.dpotrf(coeff, lower=1)
    if info != 0:
        raise FactorizationError(
            f"Cholesky factorization failed at leading minor {info} "
            f"(matrix of dimension {p.shape[0]}, damping {damping})",
            leading_minor=int(info),
        )
    x, info = lapack.dpotrs(c, rhs, lower=1)
    if info != 0:  # pragma: no cover - dpotrs only fails on bad arguments
        raise FactorizationError(f"triangular solve failed with info={info}")
    return _finite_output(np.ascontiguousarray(x), "spd_solve")


def spd_inverse(p, damping: float = 0.0) -> np.ndarray:
    """Explicit (p + damping*I)^-1, i.e. the SPD solve against the identity.

    Only for the few places that consume the inverse as a matrix in its own
    right; prefer spd_solve everywhere else.
    """
    p = as_matrix(p, "p")
    return spd_solve(p, np.eye(p.shape[0]), damping)


def sym_eig(p) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix.

    Returns (eigenvalues ascending, eigenvectors as columns) such that
    p = V diag(w) V^T with V orthogonal.
    """
    p = as_matrix(p, "p")
    if p.shape[0] != p.shape[1]:
        raise ShapeError(f"p must be square, got shape {p.shape}")
    sym = _symmetrize(p)
    try:
        w, v = np.linalg.eigh(sym)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - eigh failure is pathological
        off = float(np.linalg.norm(sym - np.diag(np.diag(sym))))
        raise EigenDecompositionError(
            f"symmetric eigendecomposition did not converge (off-diagonal norm {off:.3e})"
        ) from exc
    return w, np.ascontiguousarray(v)


def numerical_rank(m, rel_tol: float = DEFAULT_RANK_TOL) -> int:
    """Number of singular values above ``rel_tol`` times the largest one.

    Singular values are recovered as square roots of the eigenvalues of the
    smaller of the two Gram matrices, which is cheap at the sizes this
    package works with. The zero matrix has rank 0.
    """
    m = as_matrix(m, "m")
    if not 0.0 < rel_tol < 1.0:
        raise ValueError(f"rel_tol must be in (0, 1), got {rel_tol}")
    if m.shape[0] >= m.shape[1]:
        gram = m.T @ m
    else:
        gram = m @ m.T
    eigvals, _ = sym_eig(gram)
    sigmas = np.sqrt(np.clip(eigvals, 0.0, None))
    top = float(sigmas[-1])
    if top == 0.0:
        return 0
    return int(np.count_nonzero(sigmas > rel_tol * top))
