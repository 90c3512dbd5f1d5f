"""Log prior densities: PC priors for Matern (range, sd), noise precision, fixed effects."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DIM = 2


@dataclass(frozen=True)
class PCPrior:
    """Penalized-complexity prior on (range, sd) of one Matern field.

    Stated the way tail probabilities are usually quoted:
    ``P(rho > range0) = p_range_above`` and ``P(sigma > sigma0) = p_sigma_above``.
    """

    range0: float
    p_range_above: float
    sigma0: float
    p_sigma_above: float

    def __post_init__(self):
        if not (self.range0 > 0 and self.sigma0 > 0):
            raise ValueError("range0 and sigma0 must be > 0")
        for p in (self.p_range_above, self.p_sigma_above):
            if not (0 < p < 1):
                raise ValueError("tail probabilities must lie in (0, 1)")

    @property
    def p_range_below(self) -> float:
        """P(rho < range0), the canonical PC-prior tail."""
        return 1.0 - self.p_range_above

    @property
    def lam_range(self) -> float:
        return -math.log(self.p_range_below) * self.range0 ** (DIM / 2)

    @property
    def lam_sigma(self) -> float:
        return -math.log(self.p_sigma_above) / self.sigma0

    def range_median(self) -> float:
        # P(rho < r) = exp(-lam r^(-d/2))
        return (self.lam_range / math.log(2.0)) ** (2.0 / DIM)

    def log_density_range(self, rho) -> np.ndarray:
        rho = _positive(rho, "rho")
        a = DIM / 2.0
        lam = self.lam_range
        return math.log(a * lam) - (a + 1.0) * np.log(rho) - lam * rho ** (-a)

    def log_density_sigma(self, sigma) -> np.ndarray:
        sigma = _positive(sigma, "sigma")
        lam = self.lam_sigma
        return math.log(lam) - lam * sigma

    def range_cdf(self, rho) -> np.ndarray:
        rho = _positive(rho, "rho")
        return np.exp(-self.lam_range * rho ** (-DIM / 2.0))


@dataclass(frozen=True)
class NoisePrior:
    """Gamma prior on the noise precision 1/sigma_eps^2.

    ``parametrization="rate"`` reads ``scale`` as the gamma rate (default
    rate 5e-5); ``"scale"`` reads it as the gamma scale, so rate = 1/scale.
    """

    shape: float = 1.0
    scale: float = 5e-5
    parametrization: str = "rate"

    def __post_init__(self):
        if self.shape <= 0 or self.scale <= 0:
            raise ValueError("shape and scale must be > 0")
        if self.parametrization not in ("rate", "scale"):
            raise ValueError("parametrization must be 'rate' or 'scale'")

    @property
    def rate(self) -> float:
        return self.scale if self.parametrization == "rate" else 1.0 / self.scale

    def log_density(self, precision) -> np.ndarray:
        x = _positive(precision, "precision")
        a, b = self.shape, self.rate
        return a * math.log(b) - math.lgamma(a) + (a - 1.0) * np.log(x) - b * x

    def survival(self, precision) -> float:
        """P(precision > x); closed form for shape 1 only."""
        if self.shape != 1.0:
            from scipy.special import gammaincc

            return float(gammaincc(self.shape, self.rate * precision))
        return math.exp(-self.rate * precision)


@dataclass(frozen=True)
class PriorSpec:
    """All priors of one model: per-field PC priors, noise, fixed effects."""

    fields: tuple[PCPrior, ...] = ()
    noise: NoisePrior = field(default_factory=NoisePrior)
    beta_mean: float = 0.0
    beta_precision: float = 0.001


def _positive(v, name):
    v = np.asarray(v, dtype=float)
    if np.any(~np.isfinite(v)) or np.any(v <= 0):
        raise ValueError(f"{name} must be finite and > 0")
    return v


def log_pc_prior(rho, sigma, prior: PCPrior):
    """Joint PC log density of (rho, sigma), d = 2; factorizes over the two."""
    return prior.log_density_range(rho) + prior.log_density_sigma(sigma)


def log_noise_prior(precision, prior: NoisePrior):
    return prior.log_density(precision)


def log_beta_prior(beta, mean: float = 0.0, precision: float = 0.001) -> float:
    """Independent normal log densities with the given precision (variance 1/precision)."""
    beta = np.asarray(beta, dtype=float)
    if not np.all(np.isfinite(beta)):
        raise ValueError("beta must be finite")
    r = beta - mean
    return float(0.5 * beta.size * math.log(precision / (2.0 * math.pi)) - 0.5 * precision * np.dot(r, r))


def grad_log_beta_prior(beta, mean: float = 0.0, precision: float = 0.001) -> np.ndarray:
    return -precision * (np.asarray(beta, dtype=float) - mean)


# defaults used by the mixed and extended model variants
def default_field_prior() -> PCPrior:
    return PCPrior(range0=15_000.0, p_range_above=0.5, sigma0=10.0, p_sigma_above=0.01)


def extended_field_priors() -> tuple[PCPrior, PCPrior]:
    """Long-range and short-range field priors of the two-field model."""
    return (
        PCPrior(range0=15_000.0, p_range_above=0.6, sigma0=10.0, p_sigma_above=0.01),
        PCPrior(range0=2_000.0, p_range_above=0.02, sigma0=10.0, p_sigma_above=0.01),
    )
