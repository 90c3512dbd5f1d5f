"""Finite-element GMRF representation of Matern fields (nu = 1, alpha = 2, d = 2).

The precision of the mesh-node weights is

    Q = tau^2 (kappa^4 C + 2 kappa^2 G + G C^-1 G)

with C the lumped (diagonal) mass matrix and G the stiffness matrix of
piecewise-linear basis functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .mesh import TriMesh

NU = 1.0
ALPHA = 2
DIM = 2


@dataclass(frozen=True)
class MaternParams:
    """Matern parameters in the practical-range parametrization.

    ``rho`` is the distance where the correlation drops to about 0.14,
    ``sigma`` the marginal standard deviation.
    """

    rho: float
    sigma: float

    def __post_init__(self):
        for name in ("rho", "sigma"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and > 0, got {v!r}")

    @property
    def nu(self) -> float:
        return NU

    @property
    def kappa(self) -> float:
        return math.sqrt(8.0 * NU) / self.rho

    @property
    def tau(self) -> float:
        # sigma^2 = Gamma(nu) / (Gamma(alpha) (4 pi)^(d/2) kappa^(2 nu) tau^2)
        return 1.0 / (2.0 * math.sqrt(math.pi) * self.kappa * self.sigma)

    @classmethod
    def from_kappa_tau(cls, kappa: float, tau: float) -> MaternParams:
        rho = math.sqrt(8.0 * NU) / kappa
        sigma = 1.0 / (2.0 * math.sqrt(math.pi) * kappa * tau)
        return cls(rho, sigma)


# --------------------------------------------------------------------------
# Bessel K1 and the Matern covariance
# --------------------------------------------------------------------------

_SERIES_MAX = 2.0
_ASYMPTOTIC_MIN = 30.0
_N_SERIES = 30
_N_ASYMPTOTIC = 12
# trapezoid nodes for K1(x) = int_0^inf exp(-x cosh t) cosh t dt
_TRAP_STEP = 0.05
_TRAP_T = np.arange(0.0, 4.5, _TRAP_STEP)
_CHUNK = 16384
_TINY = 1e-6


def _k1_series(x: np.ndarray) -> np.ndarray:
    # K1 = 1/x + ln(x/2) I1 - x/4 sum_k (psi(k+1) + psi(k+2)) q^k / (k! (k+1)!)
    q = 0.25 * x * x
    k = np.arange(_N_SERIES)
    harm = np.concatenate([[0.0], np.cumsum(1.0 / np.arange(1, _N_SERIES + 1))])
    psi_sum = -2.0 * np.euler_gamma + harm[k] + harm[k + 1]
    log_fact = np.array([math.lgamma(j + 1) + math.lgamma(j + 2) for j in k])
    terms = q[:, None] ** k[None, :] * np.exp(-log_fact)[None, :]
    i1 = 0.5 * x * terms.sum(axis=1)
    return 1.0 / x + np.log(0.5 * x) * i1 - 0.25 * x * (terms * psi_sum).sum(axis=1)


def _k1_trapezoid(x: np.ndarray) -> np.ndarray:
    # doubly-exponential decay makes the trapezoid rule spectrally accurate;
    # scaled by exp(x) to avoid underflow
    ch = np.cosh(_TRAP_T)
    f = np.exp(-x[:, None] * (ch[None, :] - 1.0)) * ch[None, :]
    return _TRAP_STEP * (f.sum(axis=1) - 0.5 * f[:, 0]) * np.exp(-x)


def _k1_asymptotic(x: np.ndarray) -> np.ndarray:
    mu = 4.0
    term = np.ones_like(x)
    total = np.ones_like(x)
    for k in range(1, _N_ASYMPTOTIC + 1):
        term = term * (mu - (2 * k - 1) ** 2) / (k * 8.0 * x)
        total = total + term
    return np.sqrt(np.pi / (2.0 * x)) * np.exp(-x) * total


def bessel_k1(x) -> np.ndarray:
    """Modified Bessel function of the second kind, order 1, for x > 0.

    Ascending series below 2, trapezoid quadrature of the integral
    representation on [2, 30), Hankel asymptotic expansion beyond.
    Relative error below 1e-12 throughout.
    """
    x = np.asarray(x, dtype=float)
    flat = x.ravel()
    if np.any(flat <= 0):
        raise ValueError("bessel_k1 requires x > 0")
    out = np.empty_like(flat)
    # chunked to bound the (chunk x terms) temporaries
    for s in range(0, flat.size, _CHUNK):
        xs = flat[s : s + _CHUNK]
        o = out[s : s + _CHUNK]
        lo = xs < _SERIES_MAX
        hi = xs >= _ASYMPTOTIC_MIN
        mid = ~(lo | hi)
        if lo.any():
            o[lo] = _k1_series(xs[lo])
        if mid.any():
            o[mid] = _k1_trapezoid(xs[mid])
        if hi.any():
            o[hi] = _k1_asymptotic(xs[hi])
    return out.reshape(x.shape)


def matern_correlation(dist, rho: float) -> np.ndarray:
    """Matern correlation for nu = 1: (kappa h) K1(kappa h), equal to 1 at h = 0."""
    d = np.asarray(dist, dtype=float)
    if np.any(d < 0):
        raise ValueError("distances must be >= 0")
    x = (math.sqrt(8.0 * NU) / rho) * d
    out = np.ones_like(x)
    pos = x >= _TINY
    out[pos] = x[pos] * bessel_k1(x[pos])
    tiny = (x > 0) & ~pos
    # x K1(x) = 1 + x^2/2 (ln(x/2) + gamma - 1/2) + O(x^4 ln x)
    xt = x[tiny]
    out[tiny] = 1.0 + 0.5 * xt**2 * (np.log(0.5 * xt) + np.euler_gamma - 0.5)
    return out


def matern_cov(dist, params: MaternParams) -> np.ndarray:
    """sigma^2 2^(1-nu)/Gamma(nu) (kappa h)^nu K_nu(kappa h) with nu = 1."""
    return params.sigma**2 * matern_correlation(dist, params.rho)


# --------------------------------------------------------------------------
# finite elements
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FemMatrices:
    """Lumped mass ``C`` (diagonal, m^2), stiffness ``G`` and ``G2 = G C^-1 G``."""

    C: sp.dia_matrix
    G: sp.csc_matrix
    G2: sp.csc_matrix

    @property
    def c_diag(self) -> np.ndarray:
        return self.C.diagonal()

    @property
    def n(self) -> int:
        return self.G.shape[0]


def assemble_fem(mesh: TriMesh) -> FemMatrices:
    """Assemble lumped mass and stiffness matrices for linear elements."""
    t = mesh.triangles
    p = mesh.nodes[t]
    # edge vectors opposite each vertex
    e = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
    area = 0.5 * (e[:, 2, 0] * (-e[:, 1, 1]) - e[:, 2, 1] * (-e[:, 1, 0]))
    if np.any(area <= 0) or not np.all(np.isfinite(area)):
        bad = np.nonzero(~(area > 0))[0]
        raise ValueError(f"degenerate or inverted triangles: {bad[:10].tolist()}")
    # grad(lambda_i) = rot90(e_i) / (2 area), so grad_i . grad_j = e_i . e_j / (4 area^2)
    Gloc = np.einsum("kid,kjd->kij", e, e) / (4.0 * area)[:, None, None]
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    n = mesh.n_nodes
    G = sp.coo_matrix((Gloc.ravel(), (rows, cols)), shape=(n, n)).tocsc()
    G = 0.5 * (G + G.T)
    G.sum_duplicates()
    G.sort_indices()
    c = np.bincount(t.ravel(), weights=np.repeat(area / 3.0, 3), minlength=n)
    if np.any(c <= 0):
        raise ValueError("mesh has nodes not attached to any triangle")
    C = sp.diags(c, format="dia")
    G2 = (G @ sp.diags(1.0 / c) @ G).tocsc()
    G2 = 0.5 * (G2 + G2.T)
    G2.sort_indices()
    return FemMatrices(C, G.tocsc(), G2.tocsc())


def precision_structure(fem: FemMatrices, kappa: float):
    """Unscaled precision K(kappa) = kappa^4 C + 2 kappa^2 G + G2 (Q = tau^2 K)."""
    K = (kappa**4) * fem.C + (2.0 * kappa**2) * fem.G + fem.G2
    return sp.csc_matrix(K)


def build_precision(fem: FemMatrices, params: MaternParams) -> sp.csc_matrix:
    """Sparse SPD precision of the mesh-node weights for a Matern field."""
    kappa, tau = params.kappa, params.tau
    if not (np.isfinite(kappa) and np.isfinite(tau)):
        raise ValueError("non-finite kappa/tau")
    Q = (tau**2) * precision_structure(fem, kappa)
    Q.sort_indices()
    return Q


def write_matrix_market(Q, path) -> None:
    """Coordinate-format MatrixMarket export (general real) for debugging."""
    Q = sp.coo_matrix(Q)
    lines = [
        "%%MatrixMarket matrix coordinate real general",
        f"{Q.shape[0]} {Q.shape[1]} {Q.nnz}",
    ]
    lines += [f"{i + 1} {j + 1} {v!r}" for i, j, v in zip(Q.row.tolist(), Q.col.tolist(), Q.data.tolist())]
    Path(path).write_text("\n".join(lines) + "\n")
