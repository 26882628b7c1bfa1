"""Negative-binomial outcome computations.

Log-pmf, the mean/weight/score matrices used by Fisher scoring, and
numerically stable first and second derivatives of the log-likelihood with
respect to the inverse dispersion.  All functions are elementwise and pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, digamma, polygamma

from .exceptions import DomainError

# exponent clip keeping exp() inside double range
EXP_CLIP = 700.0

# above this inverse dispersion, digamma/trigamma differences switch to
# their asymptotic forms to avoid catastrophic cancellation
LARGE_R = 1e8


def log1p_stable(x):
    """log(1 + x) with full precision near zero (x >= -1)."""
    return np.log1p(x)


def psi_delta(y, r):
    """digamma(y + r) - digamma(r), using log1p(y/r) for r >= 1e8."""
    y = np.asarray(y, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if np.any(r <= 0):
        raise DomainError("r must be positive")
    small = r < LARGE_R
    out = np.empty(np.broadcast(y, r).shape)
    yb, rb = np.broadcast_arrays(y, r)
    out[small] = digamma(yb[small] + rb[small]) - digamma(rb[small])
    big = ~small
    out[big] = np.log1p(yb[big] / rb[big])
    return out if out.ndim else float(out)


def psi_prime_delta(y, r):
    """trigamma(y + r) - trigamma(r), using -(y/r)/(y+r) for r >= 1e8."""
    y = np.asarray(y, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if np.any(r <= 0):
        raise DomainError("r must be positive")
    small = r < LARGE_R
    out = np.empty(np.broadcast(y, r).shape)
    yb, rb = np.broadcast_arrays(y, r)
    out[small] = polygamma(1, yb[small] + rb[small]) - polygamma(1, rb[small])
    big = ~small
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(yb[big] + rb[big] > 0, (yb[big] / rb[big]) / (yb[big] + rb[big]), 0.0)
    out[big] = -ratio
    return out if out.ndim else float(out)


def nb_log_pmf(y, mu, r):
    """Log of the NegBin(mu, r) probability mass at y.

    Mean mu, variance mu + mu^2/r.  Evaluated through log-gamma and log1p,
    never through the gamma function itself.
    """
    y = np.asarray(y, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if np.any(mu <= 0) or np.any(r <= 0):
        raise DomainError("mu and r must be positive")
    log_ratio = np.log1p(mu / r)  # log((mu + r)/r)
    out = (
        gammaln(y + r) - gammaln(y + 1.0) - gammaln(r)
        + y * (np.log(mu) - np.log(r) - log_ratio)
        - r * log_ratio
    )
    return out if out.ndim else float(out)


@dataclass
class NbWorkspace:
    """Per-entry quantities recomputed before every update.

    mu = exp(linpred), r = exp(-s - t - omega), W = r mu / (r + mu) is the
    Fisher weight (the precision of the log-scale residual), and
    E = (Y - mu) W / mu is the score with respect to the linear predictor.
    clamped counts entries whose exponent hit the +-700 clip.
    """

    mu: np.ndarray
    r: np.ndarray
    W: np.ndarray
    E: np.ndarray
    clamped: int = 0


def inverse_dispersions(S, T, omega):
    """r_ij = exp(-(s_i + t_j + omega)); exponents clipped to +-700."""
    expo = -(np.add.outer(S, T) + omega)
    clamped = int(np.count_nonzero(np.abs(expo) > EXP_CLIP))
    return np.exp(np.clip(expo, -EXP_CLIP, EXP_CLIP)), clamped


def nb_workspace(Y, linpred, S, T, omega) -> NbWorkspace:
    """Compute mu, r, W, E from counts and the current parameters."""
    values = Y.values if hasattr(Y, "values") else np.asarray(Y)
    if not np.all(np.isfinite(linpred)):
        raise DomainError("linear predictor contains non-finite entries")
    clamped = int(np.count_nonzero(np.abs(linpred) > EXP_CLIP))
    mu = np.exp(np.clip(linpred, -EXP_CLIP, EXP_CLIP))
    r, rc = inverse_dispersions(S, T, omega)
    W = r * mu / (r + mu)
    E = (values - mu) * (r / (r + mu))
    return NbWorkspace(mu=mu, r=r, W=W, E=E, clamped=clamped + rc)


@dataclass
class DispersionDerivs:
    """Elementwise pieces of the S/T Newton steps.

    delta_ij is the derivative of the per-entry log-likelihood with respect
    to s_i (equivalently t_j); delta_prime_ij is the second derivative.
    """

    delta: np.ndarray
    delta_prime: np.ndarray


def dispersion_derivatives(Y, mu, r) -> DispersionDerivs:
    """First/second log-likelihood derivatives in the log-dispersion offsets.

    Stable for r in [1e-12, 1e12] and counts up to 1e15: ratios that can
    overflow are rewritten through r/(r+mu) and mu/(r+mu).
    """
    y = np.asarray(Y.values if hasattr(Y, "values") else Y, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    with np.errstate(over="ignore"):
        ratio = mu / r
    log_ratio = np.log1p(np.where(np.isfinite(ratio), ratio, 0.0))
    big = ~np.isfinite(ratio)
    if np.any(big):
        log_ratio = np.where(big, np.log(mu) - np.log(r), log_ratio)
    rp = r / (r + mu)     # in (0, 1]
    mp = mu / (r + mu)    # in [0, 1)
    delta = -r * (psi_delta(y, r) - log_ratio - (y - mu) / (r + mu))
    # rewrite (y + mu^2/r)/(1 + mu/r)^2 = y*rp^2 + r*mp^2 to avoid overflow
    delta_prime = -delta + r * r * psi_prime_delta(y, r) + y * rp * rp + r * mp * mp
    return DispersionDerivs(delta=delta, delta_prime=delta_prime)


def nb_sample(mu, r, rng):
    """Draw NegBin(mu, r) via the Gamma-Poisson mixture."""
    lam = rng.gamma(shape=r, scale=mu / r)
    return rng.poisson(lam)
