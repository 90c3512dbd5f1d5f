"""Exact Gaussian inference for log-linear models with 0, 1 or 2 Matern fields.

Given hyperparameters, the latent vector x = (u_1[, u_2], beta) is jointly
Gaussian with prior precision blockdiag(Q_1[, Q_2], beta_precision * I) and
the observations are y = B x + eps with B = [A_1 [A_2] X].  Everything at
fixed hyperparameters is therefore closed form; the hyperparameters
(log noise precision, and log range / log sd per field) are integrated
numerically on a grid centred at the posterior mode.
"""

from __future__ import annotations

import io
import json
import logging
import math
import warnings
import zipfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import cached_property
from itertools import product

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize

from . import __version__
from .grid import GridSpec
from .mesh import MeshQuality, TriMesh, project_points, require_inside
from .priors import NoisePrior, PCPrior
from .sparse import NotPositiveDefiniteError, SparseCholesky
from .spde import FemMatrices, MaternParams, assemble_fem, precision_structure

log = logging.getLogger(__name__)

FIT_FORMAT = "geodose-fit"
FIT_FORMAT_VERSION = 1
VARIANTS = ("linear", "spatial", "mixed", "extended")
EIGEN_LIMIT = 2500


class DesignError(ValueError):
    pass


class FitError(RuntimeError):
    """Optimizer failure; ``best`` holds the best hyperparameter vector found."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class FactorizationError(np.linalg.LinAlgError):
    def __init__(self, message, theta):
        super().__init__(message)
        self.theta = theta


class FitFormatError(ValueError):
    pass


# --------------------------------------------------------------------------
# model definition
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FieldSpec:
    """One Matern random field: its mesh and PC prior."""

    mesh: TriMesh
    prior: PCPrior
    name: str = "u"

    @cached_property
    def fem(self) -> FemMatrices:
        return assemble_fem(self.mesh)

    @cached_property
    def _spectrum(self) -> np.ndarray | None:
        # eigenvalues of C^-1/2 G C^-1/2; cheap log-determinants on small meshes
        if self.mesh.n_nodes > EIGEN_LIMIT:
            return None
        c = 1.0 / np.sqrt(self.fem.c_diag)
        S = (c[:, None] * self.fem.G.toarray()) * c[None, :]
        return np.clip(np.linalg.eigvalsh(0.5 * (S + S.T)), 0.0, None)

    def logdet_structure(self, kappa: float) -> float:
        """log det(kappa^4 C + 2 kappa^2 G + G C^-1 G).

        The operator factors as (kappa^2 C + G) C^-1 (kappa^2 C + G), so only
        the much sparser middle factor needs a decomposition.
        """
        logc = float(np.sum(np.log(self.fem.c_diag)))
        lam = self._spectrum
        if lam is not None:
            return logc + 2.0 * float(np.sum(np.log(kappa**2 + lam)))
        M = (kappa**2) * self.fem.C + self.fem.G
        return 2.0 * SparseCholesky(M).logdet() - logc


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Design matrix, random fields and priors of one model variant."""

    X: np.ndarray
    fields: tuple[FieldSpec, ...] = ()
    noise: NoisePrior = field(default_factory=NoisePrior)
    beta_precision: float = 0.001
    covariate_names: tuple[str, ...] = ()
    variant: str | None = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "fields", tuple(self.fields))
        if len(self.fields) > 2:
            raise DesignError("at most two random fields are supported")
        names = tuple(self.covariate_names) or tuple(f"x{j}" for j in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise DesignError("covariate_names does not match the design width")
        object.__setattr__(self, "covariate_names", names)
        if self.variant is None:
            object.__setattr__(self, "variant", infer_variant(len(self.fields), X.shape[1]))
        check_design(X)

    @property
    def n_obs(self) -> int:
        return self.X.shape[0]

    @property
    def n_beta(self) -> int:
        return self.X.shape[1]

    @property
    def n_hyper(self) -> int:
        return 1 + 2 * len(self.fields)

    @property
    def param_names(self) -> list[str]:
        names = ["log_precision"]
        for j, f in enumerate(self.fields, start=1):
            names += [f"log_range_{j}", f"log_sigma_{j}"]
        return names

    def with_rows(self, rows) -> ModelSpec:
        """Same model restricted to a subset of observations."""
        return ModelSpec(
            self.X[rows], self.fields, self.noise, self.beta_precision, self.covariate_names, self.variant
        )


def infer_variant(n_fields: int, p: int) -> str:
    if n_fields == 0:
        return "linear"
    if n_fields == 2:
        return "extended"
    return "spatial" if p <= 1 else "mixed"


def check_design(X: np.ndarray) -> None:
    n, p = X.shape
    if not np.all(np.isfinite(X)):
        raise DesignError("design matrix contains non-finite values")
    if p == 0:
        return
    if n <= p:
        raise DesignError(f"need more observations than coefficients (n={n}, p={p})")
    zero = np.nonzero(~np.any(X != 0, axis=0))[0]
    if zero.size:
        raise DesignError(f"all-zero design columns: {zero.tolist()}")
    rank = np.linalg.matrix_rank(X)
    if rank < p:
        raise DesignError(f"design matrix is rank deficient (rank {rank} < {p} columns)")


@dataclass(frozen=True)
class HyperPoint:
    """Hyperparameters on the log scale: noise precision, then (range, sd) per field."""

    theta: tuple[float, ...]
    log_ml: float = float("nan")
    log_prior: float = float("nan")
    weight: float = float("nan")

    @property
    def precision(self) -> float:
        return math.exp(self.theta[0])

    def field_params(self) -> list[MaternParams]:
        return [
            MaternParams(math.exp(self.theta[1 + 2 * j]), math.exp(self.theta[2 + 2 * j]))
            for j in range((len(self.theta) - 1) // 2)
        ]

    @classmethod
    def from_natural(cls, precision: float, fields=()) -> HyperPoint:
        th = [math.log(precision)]
        for f in fields:
            rho, sigma = (f.rho, f.sigma) if isinstance(f, MaternParams) else f
            th += [math.log(rho), math.log(sigma)]
        return cls(tuple(th))


def design_rows(spec: ModelSpec, points, X_new, clamp: bool = False):
    """Rows of [A_1(points) [A_2(points)] X_new] and the in-hull mask."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    X_new = np.asarray(X_new, dtype=float).reshape(len(pts), spec.n_beta)
    inside = np.ones(len(pts), dtype=bool)
    blocks = []
    for f in spec.fields:
        proj = project_points(f.mesh, pts, clamp=clamp)
        inside &= proj.inside
        blocks.append(proj.matrix)
    return LatentModel.design_matrix(blocks, X_new).tocsr(), inside


# --------------------------------------------------------------------------
# the latent Gaussian model at fixed hyperparameters
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Conditional:
    """Gaussian conditional of the latent vector at one hyperparameter point."""

    theta: np.ndarray
    mean: np.ndarray
    chol: SparseCholesky
    log_ml: float


class LatentModel:
    """Observations tied to a ModelSpec; precomputes B'B and B'y."""

    def __init__(self, spec: ModelSpec, coords, y):
        self.spec = spec
        self.coords = np.asarray(coords, dtype=float).reshape(-1, 2)
        self.y = np.asarray(y, dtype=float).ravel()
        n = spec.n_obs
        if len(self.y) != n or len(self.coords) != n:
            raise DesignError(f"expected {n} observations/coordinates, got {len(self.y)}/{len(self.coords)}")
        if not np.all(np.isfinite(self.y)):
            raise DesignError("observations must be finite")
        blocks = [require_inside(project_points(f.mesh, self.coords), "observations") for f in spec.fields]
        self.B = self.design_matrix(blocks, spec.X)
        # accumulate in a canonical row order so results do not depend on input order
        keys = np.column_stack([self.coords, self.y[:, None], spec.X]).T[::-1]
        order = np.lexsort(keys)
        Bs = sp.csr_matrix(self.B)[order]
        Bs.sum_duplicates()
        Bs.sort_indices()
        ys = self.y[order]
        self.BtB = (Bs.T @ Bs).tocsc()
        self.BtB.sort_indices()
        self.Bty = Bs.T @ ys
        self.yty = float(ys @ ys)
        sizes = [f.mesh.n_nodes for f in spec.fields] + [spec.n_beta]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.n_latent = int(self.offsets[-1])

    @staticmethod
    def design_matrix(field_blocks, X) -> sp.csc_matrix:
        X = np.asarray(X, dtype=float)
        parts = [sp.csc_matrix(b) for b in field_blocks]
        if X.shape[1]:
            parts.append(sp.csc_matrix(X))
        if not parts:
            return sp.csc_matrix((X.shape[0], 0))
        return sp.hstack(parts, format="csc")

    def target_matrix(self, points, X_new, clamp: bool = False):
        """Rows of [A_1(points) [A_2(points)] X_new] and the in-hull mask."""
        return design_rows(self.spec, points, X_new, clamp)

    # -- priors -----------------------------------------------------------

    def field_block(self, j: int, params: MaternParams) -> sp.csc_matrix:
        f = self.spec.fields[j]
        return (params.tau**2) * precision_structure(f.fem, params.kappa)

    def prior_precision(self, theta) -> sp.csc_matrix:
        hp = HyperPoint(tuple(theta))
        blocks = [self.field_block(j, p) for j, p in enumerate(hp.field_params())]
        if self.spec.n_beta:
            blocks.append(sp.identity(self.spec.n_beta, format="csc") * self.spec.beta_precision)
        if not blocks:
            return sp.csc_matrix((0, 0))
        return sp.block_diag(blocks, format="csc")

    def log_prior(self, theta) -> float:
        """Log hyperprior density of the log-scale parameters (Jacobians included)."""
        theta = np.asarray(theta, dtype=float)
        prec = math.exp(theta[0])
        lp = float(self.spec.noise.log_density(prec)) + theta[0]
        for j, f in enumerate(self.spec.fields):
            lr, ls = theta[1 + 2 * j], theta[2 + 2 * j]
            lp += float(f.prior.log_density_range(math.exp(lr))) + lr
            lp += float(f.prior.log_density_sigma(math.exp(ls))) + ls
        return lp

    # -- conditional -------------------------------------------------------

    def _prior_logdet(self, theta) -> float:
        hp = HyperPoint(tuple(theta))
        total = self.spec.n_beta * math.log(self.spec.beta_precision)
        for j, params in enumerate(hp.field_params()):
            f = self.spec.fields[j]
            try:
                total += f.logdet_structure(params.kappa) + f.mesh.n_nodes * math.log(params.tau**2)
            except NotPositiveDefiniteError as exc:
                raise FactorizationError(f"prior precision of field {j + 1} not SPD at theta={list(theta)}", theta) from exc
        return total

    def posterior_precision(self, theta) -> sp.csc_matrix:
        return (self.prior_precision(theta) + math.exp(theta[0]) * self.BtB).tocsc()

    def condition(self, theta) -> Conditional:
        theta = np.asarray(theta, dtype=float)
        if not np.all(np.isfinite(theta)):
            raise FactorizationError(f"non-finite hyperparameters {theta.tolist()}", theta)
        prec = math.exp(theta[0])
        n = self.spec.n_obs
        Qp = self.posterior_precision(theta)
        try:
            chol = SparseCholesky(Qp)
        except NotPositiveDefiniteError as exc:
            raise FactorizationError(f"posterior precision not SPD at theta={theta.tolist()}", theta) from exc
        b = prec * self.Bty
        mu = chol.solve(b) if self.n_latent else np.zeros(0)
        log_ml = (
            -0.5 * n * math.log(2.0 * math.pi)
            + 0.5 * n * theta[0]
            + 0.5 * self._prior_logdet(theta)
            - 0.5 * chol.logdet()
            - 0.5 * (prec * self.yty - float(mu @ b))
        )
        return Conditional(theta, mu, chol, float(log_ml))

    def log_posterior(self, theta) -> float:
        return self.condition(theta).log_ml + self.log_prior(theta)


def log_marginal_likelihood(spec: ModelSpec, theta, y, coords) -> float:
    """log p(y | theta) with the latent field and coefficients integrated out.

    ``theta`` is a HyperPoint or a log-scale parameter vector.
    """
    th = theta.theta if isinstance(theta, HyperPoint) else theta
    return LatentModel(spec, coords, y).condition(th).log_ml


# --------------------------------------------------------------------------
# hyperparameter integration
# --------------------------------------------------------------------------


@dataclass
class FitSettings:
    """Controls for mode finding and the integration grid.

    ``strategy="grid"`` explores +-``grid_steps`` steps of ``step_scale``
    posterior-sd estimates per dimension around the mode; ``"mode"`` keeps
    only the modal configuration and skips the Hessian.  ``initial`` is a
    dict of natural-scale starting values (precision, range_j, sigma_j) or a
    full log-parameter vector, e.g. a previous fit's mode.  ``prune`` (log-density units) skips grid
    points whose quadratic-approximation drop exceeds it; None keeps all.
    """

    strategy: str = "grid"
    grid_steps: int = 2
    step_scale: float = 0.75
    prune: float | None = None
    hessian_step: float = 0.05
    fallback_step: float = 0.5
    max_iter: int = 3000
    xatol: float = 5e-3
    fatol: float = 5e-4
    initial_step: float = 0.5
    initial: dict | list | None = None
    n_threads: int = 1

    def __post_init__(self):
        if self.strategy not in ("grid", "mode"):
            raise ValueError("strategy must be 'grid' or 'mode'")
        if self.grid_steps < 0 or self.step_scale <= 0:
            raise ValueError("invalid grid settings")


@dataclass(eq=False)
class ModelFit:
    """Posterior over hyperparameters (grid + weights) and latent conditionals."""

    model: LatentModel
    thetas: np.ndarray
    log_ml: np.ndarray
    log_prior: np.ndarray
    weights: np.ndarray
    means: np.ndarray
    beta_var: np.ndarray
    mode: np.ndarray
    hessian: np.ndarray | None
    step_sd: np.ndarray
    hessian_fallback: bool = False
    settings: FitSettings = field(default_factory=FitSettings)
    optimizer: dict = field(default_factory=dict)
    target_moments: tuple | None = None

    @property
    def spec(self) -> ModelSpec:
        return self.model.spec

    @property
    def n_configs(self) -> int:
        return len(self.weights)

    @property
    def mode_index(self) -> int:
        return int(np.argmax(self.log_ml + self.log_prior))

    def hyper_points(self) -> list[HyperPoint]:
        return [
            HyperPoint(tuple(t), float(m), float(p), float(w))
            for t, m, p, w in zip(self.thetas, self.log_ml, self.log_prior, self.weights)
        ]

    def modal_params(self) -> tuple[float, list[MaternParams]]:
        hp = HyperPoint(tuple(self.mode))
        return hp.precision, hp.field_params()

    def hyper_summary(self) -> list[dict]:
        """Posterior mean and sd of precision, ranges (km) and field sds."""
        w = self.weights
        rows = []

        def add(label, values):
            m = float(w @ values)
            s = float(np.sqrt(max(w @ (values - m) ** 2, 0.0)))
            rows.append({"parameter": label, "mean": m, "sd": s})

        add("precision", np.exp(self.thetas[:, 0]))
        for j in range(len(self.spec.fields)):
            suffix = "" if len(self.spec.fields) == 1 else f"_{j + 1}"
            add(f"range{suffix}_km", np.exp(self.thetas[:, 1 + 2 * j]) / 1000.0)
            add(f"sigma{suffix}", np.exp(self.thetas[:, 2 + 2 * j]))
        return rows

    def coefficient_summary(self) -> list[dict]:
        """Mixture mean and sd of every fixed effect."""
        p = self.spec.n_beta
        if p == 0:
            return []
        off = self.model.offsets[-2]
        mb = self.means[:, off:]
        mean = self.weights @ mb
        var = self.weights @ (self.beta_var + mb**2) - mean**2
        return [
            {"coefficient": name, "mean": float(m), "sd": float(np.sqrt(max(v, 0.0)))}
            for name, m, v in zip(self.spec.covariate_names, mean, var)
        ]

    def beta_mean(self) -> np.ndarray:
        off = self.model.offsets[-2]
        return self.weights @ self.means[:, off:]


def _initial_theta(model: LatentModel, initial: dict | None) -> np.ndarray:
    spec = model.spec
    if initial is not None and not isinstance(initial, dict):
        th = np.asarray(initial, dtype=float)
        if th.shape != (spec.n_hyper,):
            raise ValueError(f"initial log-parameters must have length {spec.n_hyper}")
        return th
    y = model.y
    if spec.n_beta:
        coef, *_ = np.linalg.lstsq(spec.X, y, rcond=None)
        resid = y - spec.X @ coef
    else:
        resid = y
    v = max(float(np.var(resid)), 1e-8)
    nf = len(spec.fields)
    init = dict(initial or {})
    prec = init.get("precision", 1.0 / (0.5 * v) if nf else 1.0 / v)
    th = [math.log(prec)]
    for j, f in enumerate(spec.fields, start=1):
        rho = init.get(f"range_{j}", f.prior.range0)
        sigma = init.get(f"sigma_{j}", math.sqrt(0.5 * v / nf))
        th += [math.log(rho), math.log(sigma)]
    return np.array(th)


def _fd_hessian(f, x0, step):
    d = len(x0)
    f0 = f(x0)
    H = np.empty((d, d))
    E = np.eye(d) * step
    fp = [f(x0 + E[i]) for i in range(d)]
    fm = [f(x0 - E[i]) for i in range(d)]
    for i in range(d):
        H[i, i] = (fp[i] - 2 * f0 + fm[i]) / step**2
        for j in range(i + 1, d):
            fpp = f(x0 + E[i] + E[j])
            fpm = f(x0 + E[i] - E[j])
            fmp = f(x0 - E[i] + E[j])
            fmm = f(x0 - E[i] - E[j])
            H[i, j] = H[j, i] = (fpp - fpm - fmp + fmm) / (4 * step**2)
    return H


def _grid_offsets(d, steps):
    return np.array(list(product(range(-steps, steps + 1), repeat=d)), dtype=float).reshape(-1, d)


def find_mode(model: LatentModel, settings: FitSettings):
    """Nelder-Mead ascent of log p(y|theta) + log p(theta) on log parameters."""
    best = {"x": None, "f": np.inf}

    def objective(th):
        try:
            val = -model.log_posterior(th)
        except FactorizationError:
            return 1e300
        if not np.isfinite(val):
            return 1e300
        if val < best["f"]:
            best["x"], best["f"] = np.array(th), val
        return val

    x0 = _initial_theta(model, settings.initial)
    d = len(x0)
    simplex = np.vstack([x0] + [x0 + settings.initial_step * e for e in np.eye(d)])
    res = minimize(
        objective,
        x0,
        method="Nelder-Mead",
        options={
            "initial_simplex": simplex,
            "maxiter": settings.max_iter,
            "maxfev": 2 * settings.max_iter,
            "xatol": settings.xatol,
            "fatol": settings.fatol,
            "adaptive": d > 2,
        },
    )
    if not res.success:
        raise FitError(f"mode search did not converge: {res.message}", best=best["x"])
    info = {"nit": int(res.nit), "nfev": int(res.nfev), "fun": float(res.fun)}
    return np.asarray(res.x, dtype=float), info, objective


def fit(spec: ModelSpec, y, coords, settings: FitSettings | None = None, targets=None) -> ModelFit:
    """Posterior of a model variant given log-scale observations.

    Parameters
    ----------
    spec : ModelSpec
    y : (n,) log dose rates
    coords : (n, 2) observation coordinates in meters
    settings : FitSettings
    targets : optional (B_target,) sparse matrix; per-configuration means and
        latent variances at these rows are cached in ``target_moments`` so
        cross-validation avoids a second factorization pass.
    """
    settings = settings or FitSettings()
    model = LatentModel(spec, coords, y)
    mode, info, objective = find_mode(model, settings)
    d = len(mode)

    hessian = None
    fallback = False
    if settings.strategy == "mode":
        step = np.full(d, np.nan)
    else:
        try:
            H = _fd_hessian(objective, mode, settings.hessian_step)
            evals = np.linalg.eigvalsh(H)
            if not np.all(np.isfinite(H)) or evals.min() <= 1e-8 * max(evals.max(), 1e-300):
                raise np.linalg.LinAlgError("Hessian not positive definite")
            sd = np.sqrt(np.diag(np.linalg.inv(H)))
            step = settings.step_scale * sd
            hessian = H
        except np.linalg.LinAlgError:
            fallback = True
            step = np.full(d, settings.fallback_step)
            warnings.warn("near-singular Hessian at the mode; using fixed grid steps", RuntimeWarning)

    if settings.strategy == "mode" or settings.grid_steps == 0:
        offsets = np.zeros((1, d))
    else:
        offsets = _grid_offsets(d, settings.grid_steps)
        if settings.prune is not None and hessian is not None:
            z = offsets * step
            drop = 0.5 * np.einsum("ki,ij,kj->k", z, hessian, z)
            offsets = offsets[drop <= settings.prune]
    thetas = mode[None, :] + offsets * np.nan_to_num(step)[None, :]

    beta_idx = np.arange(model.offsets[-2], model.n_latent)
    sel = sp.csr_matrix(
        (np.ones(len(beta_idx)), (np.arange(len(beta_idx)), beta_idx)), shape=(len(beta_idx), model.n_latent)
    )

    def evaluate(th):
        try:
            cond = model.condition(th)
        except FactorizationError:
            return None
        lp = model.log_prior(th)
        bvar = cond.chol.inv_quadratic_diag(sel) if len(beta_idx) else np.zeros(0)
        tm = None
        if targets is not None:
            tm = (targets @ cond.mean, cond.chol.inv_quadratic_diag(targets))
        return cond.log_ml, lp, cond.mean, bvar, tm

    if settings.n_threads > 1 and len(thetas) > 1:
        with ThreadPoolExecutor(settings.n_threads) as pool:
            results = list(pool.map(evaluate, thetas))
    else:
        results = [evaluate(th) for th in thetas]
    keep = [i for i, r in enumerate(results) if r is not None]
    if not keep:
        raise FitError("no grid configuration could be factorized", best=mode)
    thetas = thetas[keep]
    results = [results[i] for i in keep]
    log_ml = np.array([r[0] for r in results])
    log_prior = np.array([r[1] for r in results])
    lp = log_ml + log_prior
    w = np.exp(lp - lp.max())
    w /= w.sum()
    means = np.vstack([r[2] for r in results])
    beta_var = np.vstack([r[3] for r in results])
    tmom = None
    if targets is not None:
        tmom = (np.vstack([r[4][0] for r in results]), np.vstack([r[4][1] for r in results]))
    info["n_configs"] = len(thetas)
    log.info("fit %s: %d configurations, mode %s", spec.variant, len(thetas), np.round(mode, 4).tolist())
    return ModelFit(
        model=model,
        thetas=thetas,
        log_ml=log_ml,
        log_prior=log_prior,
        weights=w,
        means=means,
        beta_var=beta_var,
        mode=mode,
        hessian=hessian,
        step_sd=step,
        hessian_fallback=fallback,
        settings=settings,
        optimizer=info,
        target_moments=tmom,
    )


# --------------------------------------------------------------------------
# prediction
# --------------------------------------------------------------------------


@dataclass(eq=False)
class PredictionSurface:
    """Per-cell posterior mean/sd of the latent log surface (noise excluded).

    Arrays are flat over ``grid`` cells (row-major from the bottom row);
    masked cells hold NaN.
    """

    grid: GridSpec | None
    points: np.ndarray
    mean: np.ndarray
    sd: np.ndarray
    mask: np.ndarray
    dose: np.ndarray | None = None
    meta: dict = field(default_factory=dict)


def mixture_moments(weights, means, variances):
    """Mean and variance of a Gaussian mixture, per column."""
    w = np.asarray(weights)[:, None]
    m = (w * means).sum(axis=0)
    v = (w * (variances + means**2)).sum(axis=0) - m**2
    return m, np.maximum(v, 0.0)


def predict_points(
    fit: ModelFit,
    points,
    X_new,
    variance: str = "exact",
    n_variance_samples: int = 250,
    seed: int = 0,
    clamp: bool = False,
    include_noise: bool = False,
):
    """Mixture posterior mean and sd of x' beta + u(s) at arbitrary points.

    ``variance="exact"`` computes b' Q^-1 b by tiled sparse solves;
    ``"sample"`` uses ``n_variance_samples`` draws per configuration and
    ``"none"`` skips variances (sd is NaN), which is all a mean comparison needs.
    With ``include_noise`` the per-configuration noise variance is added,
    giving the predictive distribution of a new observation.
    Returns (mean, sd, inside, info).
    """
    model = fit.model
    Bt, inside = model.target_matrix(points, X_new, clamp=clamp)
    k_all = len(fit.weights)
    means = np.empty((k_all, Bt.shape[0]))
    variances = np.empty_like(means)
    mc_err = []
    rng = np.random.default_rng(seed)
    if variance not in ("exact", "sample", "none"):
        raise ValueError("variance must be 'exact', 'sample' or 'none'")
    for k, th in enumerate(fit.thetas):
        means[k] = Bt @ fit.means[k]
        if variance == "none":
            variances[k] = np.nan
            continue
        chol = SparseCholesky(model.posterior_precision(th))
        if variance == "exact":
            variances[k] = chol.inv_quadratic_diag(Bt)
        elif variance == "sample":
            z = rng.standard_normal((model.n_latent, n_variance_samples))
            draws = Bt @ chol.sample(z)
            sq = draws**2
            variances[k] = sq.mean(axis=1)
            mc_err.append(sq.std(axis=1) / math.sqrt(n_variance_samples))
        if include_noise:
            variances[k] += math.exp(-th[0])
    m, v = mixture_moments(fit.weights, means, variances)
    info = {"variance": variance, "n_configs": k_all, "include_noise": include_noise}
    if mc_err:
        e = np.asarray(mc_err)
        info["n_variance_samples"] = n_variance_samples
        info["max_mc_variance_error"] = float((fit.weights[:, None] * e).sum(axis=0).max())
    m = np.where(inside, m, np.nan)
    sd = np.where(inside, np.sqrt(v), np.nan)
    return m, sd, inside, info


def predict_cached(fit: ModelFit, include_noise: bool = False):
    """Mixture moments at the rows passed as ``targets`` to :func:`fit`."""
    if fit.target_moments is None:
        raise ValueError("fit carries no cached target moments")
    means, variances = fit.target_moments
    if include_noise:
        variances = variances + np.exp(-fit.thetas[:, 0])[:, None]
    m, v = mixture_moments(fit.weights, means, variances)
    return m, np.sqrt(v)


def predict(
    fit: ModelFit,
    grid: GridSpec,
    covariates,
    cell_mask=None,
    variance: str = "exact",
    n_variance_samples: int = 250,
    seed: int = 0,
) -> PredictionSurface:
    """Posterior surface over grid cells.

    ``covariates`` is an (n_cells, p) design array; rows with NaN mark missing
    covariates.  Cells outside the mesh hull, outside ``cell_mask`` or with
    missing covariates are masked rather than imputed.
    """
    pts = grid.centers()
    X = np.asarray(covariates, dtype=float).reshape(len(pts), fit.spec.n_beta)
    ok = np.all(np.isfinite(X), axis=1)
    if cell_mask is not None:
        ok &= np.asarray(cell_mask, dtype=bool)
    mean = np.full(len(pts), np.nan)
    sd = np.full(len(pts), np.nan)
    info = {}
    if ok.any():
        m, s, inside, info = predict_points(
            fit, pts[ok], X[ok], variance=variance, n_variance_samples=n_variance_samples, seed=seed
        )
        idx = np.nonzero(ok)[0]
        ok[idx[~inside]] = False
        mean[idx] = m
        sd[idx] = s
    meta = {"scale": "log", "variant": fit.spec.variant, **info}
    return PredictionSurface(grid, pts, mean, sd, ok, None, meta)


def backtransform(surface: PredictionSurface, mode: str = "median") -> PredictionSurface:
    """Dose-rate surface: exp(mean) (median) or exp(mean + sd^2/2) (mean)."""
    if mode == "median":
        dose = np.exp(surface.mean)
    elif mode == "mean":
        dose = np.exp(surface.mean + 0.5 * surface.sd**2)
    else:
        raise ValueError("mode must be 'median' or 'mean'")
    meta = dict(surface.meta, backtransform=mode, dose_unit="nSv/h")
    return PredictionSurface(surface.grid, surface.points, surface.mean, surface.sd, surface.mask, dose, meta)


# --------------------------------------------------------------------------
# posterior sampling
# --------------------------------------------------------------------------


def sample_posterior(fit: ModelFit, n_samples: int, seed: int = 0) -> np.ndarray:
    """Joint posterior draws of the latent vector, (n_samples, n_latent).

    Each draw picks a configuration by weight, then x ~ N(mu_k, Q_k^-1).
    """
    rng = np.random.default_rng(seed)
    ks = rng.choice(len(fit.weights), size=n_samples, p=fit.weights)
    out = np.empty((n_samples, fit.model.n_latent))
    for k in np.unique(ks):
        rows = np.nonzero(ks == k)[0]
        chol = SparseCholesky(fit.model.posterior_precision(fit.thetas[k]))
        z = rng.standard_normal((fit.model.n_latent, len(rows)))
        out[rows] = (fit.means[k][:, None] + chol.sample(z)).T
    return out


def sample_conditional(model: LatentModel, theta, n_samples: int, seed: int = 0) -> np.ndarray:
    """Draws of the latent vector at fixed hyperparameters."""
    cond = model.condition(theta)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((model.n_latent, n_samples))
    return (cond.mean[:, None] + cond.chol.sample(z)).T


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------


def _prior_dict(p: PCPrior) -> dict:
    return asdict(p)


def save_fit(fit: ModelFit, path) -> None:
    """Write a fit to a versioned .npz container (factorizations omitted)."""
    spec = fit.spec
    header = {
        "format": FIT_FORMAT,
        "version": FIT_FORMAT_VERSION,
        "package_version": __version__,
        "variant": spec.variant,
        "covariate_names": list(spec.covariate_names),
        "param_names": spec.param_names,
        "noise_prior": asdict(spec.noise),
        "beta_precision": spec.beta_precision,
        "fields": [
            {"name": f.name, "prior": _prior_dict(f.prior), "quality": asdict(f.mesh.quality), "extension": f.mesh.extension}
            for f in spec.fields
        ],
        "settings": asdict(fit.settings),
        "hessian_fallback": fit.hessian_fallback,
        "optimizer": fit.optimizer,
    }
    arrays = {
        "header": np.array(json.dumps(header, sort_keys=True)),
        "coords": fit.model.coords,
        "y": fit.model.y,
        "X": spec.X,
        "thetas": fit.thetas,
        "log_ml": fit.log_ml,
        "log_prior": fit.log_prior,
        "weights": fit.weights,
        "means": fit.means,
        "beta_var": fit.beta_var,
        "mode": fit.mode,
        "step_sd": fit.step_sd,
    }
    if fit.hessian is not None:
        arrays["hessian"] = fit.hessian
    for j, f in enumerate(spec.fields):
        arrays[f"mesh{j}_nodes"] = f.mesh.nodes
        arrays[f"mesh{j}_triangles"] = f.mesh.triangles
        arrays[f"mesh{j}_boundary"] = f.mesh.boundary
        if f.mesh.domain is not None:
            arrays[f"mesh{j}_domain"] = f.mesh.domain
    _write_npz(path, arrays)


def _write_npz(path, arrays: dict) -> None:
    # np.savez stamps members with the wall clock; a fixed date keeps reruns byte-identical
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asanyarray(arr), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, buf.getvalue())


def load_fit(path) -> ModelFit:
    with np.load(path, allow_pickle=False) as z:
        data = {k: z[k] for k in z.files}
    try:
        header = json.loads(str(data["header"]))
    except (KeyError, ValueError) as exc:
        raise FitFormatError(f"{path}: not a {FIT_FORMAT} file") from exc
    if header.get("format") != FIT_FORMAT:
        raise FitFormatError(f"{path}: not a {FIT_FORMAT} file")
    if header.get("version") != FIT_FORMAT_VERSION:
        raise FitFormatError(
            f"{path}: fit format version {header.get('version')} unsupported (expected {FIT_FORMAT_VERSION})"
        )
    fields = []
    for j, fh in enumerate(header["fields"]):
        mesh = TriMesh(
            data[f"mesh{j}_nodes"],
            data[f"mesh{j}_triangles"],
            data[f"mesh{j}_boundary"],
            MeshQuality(**fh["quality"]),
            data.get(f"mesh{j}_domain"),
            fh["extension"],
        )
        fields.append(FieldSpec(mesh, PCPrior(**fh["prior"]), fh["name"]))
    spec = ModelSpec(
        data["X"],
        tuple(fields),
        NoisePrior(**header["noise_prior"]),
        header["beta_precision"],
        tuple(header["covariate_names"]),
        header["variant"],
    )
    model = LatentModel(spec, data["coords"], data["y"])
    return ModelFit(
        model=model,
        thetas=data["thetas"],
        log_ml=data["log_ml"],
        log_prior=data["log_prior"],
        weights=data["weights"],
        means=data["means"],
        beta_var=data["beta_var"],
        mode=data["mode"],
        hessian=data.get("hessian"),
        step_sd=data["step_sd"],
        hessian_fallback=header["hessian_fallback"],
        settings=FitSettings(**header["settings"]),
        optimizer=header["optimizer"],
    )
