"""Variograms, cross-validation folds and predictive scores."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree
from scipy.special import erf

SQRT_PI = math.sqrt(math.pi)


class FoldError(ValueError):
    pass


# --------------------------------------------------------------------------
# variograms
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class VariogramEstimate:
    """Binned semivariances; empty bins are omitted."""

    lag: np.ndarray
    gamma: np.ndarray
    count: np.ndarray
    sector: np.ndarray | None = None

    def to_frame(self) -> pd.DataFrame:
        d = {"lag": self.lag, "semivariance": self.gamma, "pairs": self.count}
        if self.sector is not None:
            d["sector"] = self.sector
        return pd.DataFrame(d)


def empirical_variogram(
    points,
    values,
    bin_width: float = 1000.0,
    max_lag: float = 60_000.0,
    subsample: int | None = None,
    seed=0,
    sectors: int = 1,
) -> VariogramEstimate:
    """Classical binned semivariogram, pairs found with a k-d tree up to ``max_lag``.

    ``sectors=4`` splits pairs by direction into four 45-degree-wide classes
    (0, 45, 90, 135 degrees, modulo 180).
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    v = np.asarray(values, dtype=float).ravel()
    if len(pts) < 2 or len(v) != len(pts):
        raise ValueError("need at least 2 points with matching values")
    if bin_width <= 0 or max_lag <= 0:
        raise ValueError("bin_width and max_lag must be > 0")
    if sectors not in (1, 4):
        raise ValueError("sectors must be 1 or 4")
    if subsample is not None and subsample < len(pts):
        idx = np.sort(np.random.default_rng(seed).choice(len(pts), subsample, replace=False))
        pts, v = pts[idx], v[idx]
    nb = int(math.ceil(max_lag / bin_width))
    ssum = np.zeros((sectors, nb))
    cnt = np.zeros((sectors, nb), dtype=np.int64)
    tree = cKDTree(pts)
    chunk = 2048
    for s in range(0, len(pts), chunk):
        sub = np.arange(s, min(s + chunk, len(pts)))
        nbrs = tree.query_ball_point(pts[sub], max_lag)
        i = np.repeat(sub, [len(n) for n in nbrs])
        j = np.concatenate([np.asarray(n, dtype=np.int64) for n in nbrs]) if len(i) else np.zeros(0, np.int64)
        keep = j > i
        i, j = i[keep], j[keep]
        d = pts[j] - pts[i]
        h = np.hypot(d[:, 0], d[:, 1])
        b = np.minimum((h / bin_width).astype(np.int64), nb - 1)
        inr = h <= max_lag
        if sectors == 4:
            ang = np.degrees(np.arctan2(d[:, 1], d[:, 0])) % 180.0
            sec = (((ang + 22.5) // 45.0) % 4).astype(np.int64)
        else:
            sec = np.zeros(len(h), dtype=np.int64)
        sq = (v[i] - v[j]) ** 2
        np.add.at(ssum, (sec[inr], b[inr]), sq[inr])
        np.add.at(cnt, (sec[inr], b[inr]), 1)
    centers = (np.arange(nb) + 0.5) * bin_width
    lag, gam, n, sct = [], [], [], []
    for k in range(sectors):
        ok = cnt[k] > 0
        lag.append(centers[ok])
        gam.append(ssum[k, ok] / (2.0 * cnt[k, ok]))
        n.append(cnt[k, ok])
        sct.append(np.full(ok.sum(), k * 45))
    return VariogramEstimate(
        np.concatenate(lag), np.concatenate(gam), np.concatenate(n), np.concatenate(sct) if sectors == 4 else None
    )


def residual_variogram(points, values, X, **kwargs) -> VariogramEstimate:
    """Variogram of least-squares residuals of values on X."""
    X = np.asarray(X, dtype=float)
    coef, *_ = np.linalg.lstsq(X, values, rcond=None)
    return empirical_variogram(points, np.asarray(values) - X @ coef, **kwargs)


def track_variogram(records: pd.DataFrame, max_lag: int, value: str = "log_dose") -> VariogramEstimate:
    """Semivariance versus sequence lag, pooled over flights.

    Each flight is ordered by seq and its measurements enumerated 0, 1, 2, ...;
    lag k pairs measurements k positions apart.
    """
    if max_lag < 1:
        raise ValueError("max_lag must be >= 1")
    ssum = np.zeros(max_lag + 1)
    cnt = np.zeros(max_lag + 1, dtype=np.int64)
    ordered = records.sort_values(["flight_id", "seq"], kind="mergesort")
    for _, g in ordered.groupby("flight_id", sort=True):
        v = g[value].to_numpy(dtype=float)
        if len(v) < 2:
            continue
        for k in range(1, min(max_lag, len(v) - 1) + 1):
            dv = v[k:] - v[:-k]
            ssum[k] += dv @ dv
            cnt[k] += len(dv)
    ok = cnt > 0
    lags = np.arange(max_lag + 1)[ok]
    return VariogramEstimate(lags.astype(float), ssum[ok] / (2.0 * cnt[ok]), cnt[ok])


def sill_lag(est: VariogramEstimate, fraction: float = 0.9, sill=None) -> float:
    """First lag where the semivariance reaches ``fraction`` of the sill.

    The sill defaults to the mean semivariance over the last third of lags.
    """
    g = est.gamma
    if sill is None:
        sill = float(np.mean(g[-max(1, len(g) // 3) :]))
    hit = np.nonzero(g >= fraction * sill)[0]
    return float(est.lag[hit[0]]) if hit.size else float("inf")


# --------------------------------------------------------------------------
# folds
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RandomScheme:
    train_fraction: float = 0.7
    seed: int = 0


@dataclass(frozen=True)
class BlockScheme:
    block_side: float = 15_000.0
    n_folds: int = 4
    seed: int = 0
    origin: tuple | None = None


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    """Per-record fold id; for the random scheme fold 0 is training, 1 validation."""

    scheme: object
    fold: np.ndarray
    block: np.ndarray | None = None

    @property
    def n_folds(self) -> int:
        return self.scheme.n_folds if isinstance(self.scheme, BlockScheme) else 1

    def splits(self):
        """(train index, validation index) pairs."""
        if isinstance(self.scheme, RandomScheme):
            yield np.nonzero(self.fold == 0)[0], np.nonzero(self.fold == 1)[0]
            return
        for f in range(self.scheme.n_folds):
            yield np.nonzero(self.fold != f)[0], np.nonzero(self.fold == f)[0]


def assign_folds(points, scheme) -> FoldAssignment:
    """Random train/validation split or spatial-block k-fold assignment.

    Blocks are cells of a square lattice anchored at ``origin`` (default: the
    lower-left corner of the points' bounding box).  Occupied blocks are
    shuffled under the seed and dealt to folds in turn, so fold block counts
    differ by at most one.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(pts)
    if isinstance(scheme, RandomScheme):
        if not 0 < scheme.train_fraction < 1:
            raise FoldError("train_fraction must lie in (0, 1)")
        n_train = int(round(scheme.train_fraction * n))
        perm = np.random.default_rng(scheme.seed).permutation(n)
        fold = np.ones(n, dtype=np.int64)
        fold[perm[:n_train]] = 0
        if n_train == 0 or n_train == n:
            raise FoldError("random split leaves an empty set")
        return FoldAssignment(scheme, fold)
    if not isinstance(scheme, BlockScheme):
        raise TypeError("scheme must be RandomScheme or BlockScheme")
    if scheme.block_side <= 0:
        raise FoldError("block side must be > 0")
    if scheme.n_folds < 2:
        raise FoldError("need at least 2 folds")
    origin = np.asarray(scheme.origin if scheme.origin is not None else pts.min(axis=0), dtype=float)
    cell = np.floor((pts - origin) / scheme.block_side).astype(np.int64)
    blocks, block_id = np.unique(cell, axis=0, return_inverse=True)
    block_id = block_id.ravel()
    order = np.random.default_rng(scheme.seed).permutation(len(blocks))
    block_fold = np.empty(len(blocks), dtype=np.int64)
    block_fold[order] = np.arange(len(blocks)) % scheme.n_folds
    fold = block_fold[block_id]
    sizes = np.bincount(fold, minlength=scheme.n_folds)
    if np.any(sizes == 0):
        raise FoldError(
            f"fold(s) {np.nonzero(sizes == 0)[0].tolist()} received no records "
            f"({len(blocks)} occupied blocks for {scheme.n_folds} folds); use another seed, fewer folds or smaller blocks"
        )
    return FoldAssignment(scheme, fold, block_id)


def block_size_from_distances(targets, references, exclusion_radius: float = 250.0, quantile: float = 0.9) -> float:
    """Twice the quantile of nearest-reference distances beyond the exclusion radius."""
    t = np.asarray(targets, dtype=float).reshape(-1, 2)
    r = np.asarray(references, dtype=float).reshape(-1, 2)
    if len(t) == 0 or len(r) == 0:
        raise ValueError("targets and references must be nonempty")
    if not 0 < quantile <= 1:
        raise ValueError("quantile must lie in (0, 1]")
    d, _ = cKDTree(r).query(t)
    d = d[d > exclusion_radius]
    if d.size == 0:
        raise ValueError("no targets beyond the exclusion radius")
    return 2.0 * float(np.quantile(d, quantile))


# --------------------------------------------------------------------------
# scores
# --------------------------------------------------------------------------


def _phi(z):
    return np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)


def _Phi(z):
    return 0.5 * (1.0 + erf(z / math.sqrt(2.0)))


def crps_gaussian(mu, sigma, y) -> np.ndarray:
    """CRPS of N(mu, sigma^2) at y; sigma = 0 gives |y - mu|."""
    mu, sigma, y = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (mu, sigma, y)))
    if np.any(sigma < 0):
        raise ValueError("sigma must be >= 0")
    out = np.array(np.abs(y - mu), dtype=float)
    pos = sigma > 0
    s = sigma[pos]
    z = (y[pos] - mu[pos]) / s
    out[pos] = s * (z * (2.0 * _Phi(z) - 1.0) + 2.0 * _phi(z) - 1.0 / SQRT_PI)
    return out


def rmse(pred, obs) -> float:
    d = np.asarray(pred, dtype=float) - np.asarray(obs, dtype=float)
    return float(np.sqrt(np.mean(d * d)))


def r_squared(pred, obs) -> float:
    """Squared Pearson correlation; 1 when predictions equal observations."""
    p = np.asarray(pred, dtype=float)
    o = np.asarray(obs, dtype=float)
    if np.array_equal(p, o):
        return 1.0
    sp_, so = p.std(), o.std()
    if sp_ == 0 or so == 0:
        return float("nan")
    return float(np.corrcoef(p, o)[0, 1] ** 2)


@dataclass(frozen=True)
class Scores:
    rmse: float
    r2: float
    crps: float
    n: int


def score(mean_log, sd_log, y_log) -> Scores:
    """RMSE and R^2 on the dose-rate scale, CRPS on the log scale.

    Dose-rate point predictions are lognormal means exp(mu + s^2/2) compared
    with exp(y).
    """
    mu = np.asarray(mean_log, dtype=float)
    s = np.asarray(sd_log, dtype=float)
    y = np.asarray(y_log, dtype=float)
    if not (mu.shape == s.shape == y.shape):
        raise ValueError("inputs must have equal lengths")
    if np.any(s < 0):
        raise ValueError("sds must be >= 0")
    pred = np.exp(mu + 0.5 * s * s)
    obs = np.exp(y)
    return Scores(rmse(pred, obs), r_squared(pred, obs), float(crps_gaussian(mu, s, y).mean()), len(y))


@dataclass
class CvReport:
    """Per-fold and aggregate scores for one model and validation scheme."""

    model: str
    scheme: str
    folds: list = field(default_factory=list)
    failures: dict = field(default_factory=dict)

    def add(self, fold: int, s: Scores) -> None:
        self.folds.append((fold, s))

    @property
    def partial(self) -> bool:
        return bool(self.failures)

    def aggregate(self) -> Scores:
        if not self.folds:
            return Scores(float("nan"), float("nan"), float("nan"), 0)
        arr = np.array([[s.rmse, s.r2, s.crps] for _, s in self.folds])
        m = arr.mean(axis=0)
        return Scores(float(m[0]), float(m[1]), float(m[2]), int(sum(s.n for _, s in self.folds)))

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {"model": self.model, "scheme": self.scheme, "fold": str(f), "n": s.n, "rmse": s.rmse, "r2": s.r2, "crps": s.crps}
            for f, s in self.folds
        ]
        for f, msg in sorted(self.failures.items()):
            rows.append({"model": self.model, "scheme": self.scheme, "fold": str(f), "n": 0,
                         "rmse": np.nan, "r2": np.nan, "crps": np.nan})
        a = self.aggregate()
        rows.append({"model": self.model, "scheme": self.scheme, "fold": "partial" if self.partial else "mean",
                     "n": a.n, "rmse": a.rmse, "r2": a.r2, "crps": a.crps})
        return pd.DataFrame(rows)
