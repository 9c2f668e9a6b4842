"""Solver for P X + X Q = C with symmetric PSD coefficients.

Both coefficients in every call this package makes are Gram matrices, so a
spectral route suffices: eigendecompose P = U L U^T and Q = V M V^T, divide
the rotated right-hand side entrywise by the eigenvalue-pair sums, and rotate
back. No Schur decomposition is needed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, SpectrumError
from .linalg import as_matrix, frob_norm, sym_eig

__all__ = ["SylvesterProblem", "solve_sylvester"]

SYMMETRY_RTOL = 1e-10
DENOMINATOR_FLOOR_REL = 1e-12


@dataclass
class SylvesterProblem:
    """Coefficients p, q (square symmetric PSD) and right-hand side c, all r x r."""

    p: np.ndarray
    q: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        self.p = as_matrix(self.p, "p")
        self.q = as_matrix(self.q, "q")
        self.c = as_matrix(self.c, "c")
        for name, mat in (("p", self.p), ("q", self.q)):
            if mat.shape[0] != mat.shape[1]:
                raise ShapeError(f"{name} must be square, got shape {mat.shape}")
            asym = frob_norm(mat - mat.T)
            if asym > SYMMETRY_RTOL * max(1.0, frob_norm(mat)):
                raise ShapeError(f"{name} is not symmetric within tolerance (deviation {asym:.3e})")
        if not (self.p.shape == self.q.shape == self.c.shape):
            raise ShapeError(
                f"p, q, c must share one dimension, got {self.p.shape}, "
                f"{self.q.shape}, {self.c.shape}"
            )


def solve_sylvester(prob: SylvesterProblem, damping: float = 0.0) -> np.ndarray:
    """Solve (p + damping*I) X + X q = c via the spectral route.

    Errors with the offending eigenvalue pair if some lambda_i + mu_j falls at
    or below the relative floor, i.e. the coefficient spectra (nearly) cancel
    and the equation has no stable unique solution. Callers decide how to
    recover; this solver never regularizes silently beyond ``damping``.
    """
    if damping < 0.0:
        raise ValueError(f"damping must be >= 0, got {damping}")
    p = prob.p if damping == 0.0 else prob.p + damping * np.eye(prob.p.shape[0])
    lam, u = sym_eig(p)
    mu, v = sym_eig(prob.q)

    pair_sums = lam[:, None] + mu[None, :]
    floor = DENOMINATOR_FLOOR_REL * (frob_norm(p) + frob_norm(prob.q))
    bad = pair_sums <= floor
    if np.any(bad):
        i, j = map(int, np.argwhere(bad)[0])
        raise SpectrumError(
            f"eigenvalue pair sum {pair_sums[i, j]:.3e} at or below floor {floor:.3e} "
            f"(lambda={lam[i]:.3e}, mu={mu[j]:.3e}); coefficients share eigenvalues up to sign",
            pair=(float(lam[i]), float(mu[j])),
        )

    rotated = u.T @ prob.c @ v
    return np.ascontiguousarray(u @ (rotated / pair_sums) @ v.T)
