"""Sparse Cholesky (LDL') factorization of symmetric positive-definite matrices.

Backed by SuperLU in symmetric mode with a minimum-degree ordering on
A + A' and no pivoting, which yields P A P' = L D L' with unit lower L.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.linalg import spsolve_triangular

ORDERING = "MMD_AT_PLUS_A"


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    pass


class SparseCholesky:
    """Factorization of an SPD matrix with log-determinant, solves and sampling."""

    def __init__(self, Q):
        Q = sp.csc_matrix(Q)
        if Q.shape[0] != Q.shape[1]:
            raise ValueError("matrix must be square")
        self.n = Q.shape[0]
        if self.n == 0:
            self._lu = None
            self.d = np.zeros(0)
            return
        try:
            lu = spla.splu(
                Q,
                permc_spec=ORDERING,
                diag_pivot_thresh=0.0,
                options={"SymmetricMode": True},
            )
        except RuntimeError as exc:  # exactly singular
            raise NotPositiveDefiniteError(str(exc)) from exc
        d = lu.U.diagonal()
        if not np.array_equal(lu.perm_r, lu.perm_c) or not np.all(d > 0) or not np.all(np.isfinite(d)):
            raise NotPositiveDefiniteError("matrix is not numerically positive definite")
        self._lu = lu
        self.d = d
        self._U = None

    @property
    def nnz(self) -> int:
        return 0 if self._lu is None else self._lu.L.nnz

    def logdet(self) -> float:
        return float(np.sum(np.log(self.d)))

    def solve(self, b):
        if self.n == 0:
            return np.zeros_like(np.asarray(b, dtype=float))
        b = np.asarray(b, dtype=float)
        return self._lu.solve(b)

    def sample(self, z):
        """Map standard normals ``z`` (n or n x k) to draws from N(0, Q^-1).

        With P Q P' = L D L' and U = D L', x = P' U^-1 D^1/2 z, one
        backward substitution.
        """
        if self.n == 0:
            return np.zeros_like(np.asarray(z, dtype=float))
        z = np.asarray(z, dtype=float)
        if self._U is None:
            self._U = self._lu.U.tocsr()
        sd = np.sqrt(self.d)
        w = sd[:, None] * z if z.ndim == 2 else sd * z
        xs = spsolve_triangular(self._U, w, lower=False, overwrite_b=True)
        return xs[self._lu.perm_c]

    def inv_quadratic_diag(self, B, tile: int = 256) -> np.ndarray:
        """diag(B Q^-1 B') for a sparse (k x n) B, in column tiles."""
        B = sp.csr_matrix(B)
        out = np.empty(B.shape[0])
        for start in range(0, B.shape[0], tile):
            blk = B[start : start + tile]
            rhs = blk.T.toarray()
            sol = self.solve(rhs)
            out[start : start + tile] = np.einsum("ij,ij->j", rhs, sol)
        return out


def cholesky(Q) -> SparseCholesky:
    return SparseCholesky(Q)
