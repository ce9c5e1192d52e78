"""Diagonal Gaussian, Gaussian-mixture and Bernoulli densities on tensors."""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, DomainError, NumericError

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
SIGMA_FLOOR = 1e-4


def positive(pre):
    """Map unconstrained head outputs to standard deviations."""
    return T.softplus(pre) + SIGMA_FLOOR


def _check_sigma(sigma):
    if np.isnan(sigma.value).any():
        raise NumericError("standard deviation is NaN")
    if not np.all(sigma.value > 0):
        bad = tuple(int(i) for i in np.argwhere(~(sigma.value > 0))[0])
        raise DomainError(f"standard deviation must be positive, got {sigma.value[bad]!r} at {bad}")


def _check_same(a, b, what):
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} differ")


@dataclass
class DiagGaussian:
    mu: T.Tensor
    sigma: T.Tensor

    def __post_init__(self):
        _check_same(self.mu, self.sigma, "DiagGaussian")

    @classmethod
    def standard(cls, batch, k):
        return cls(T.Tensor(np.zeros((batch, k))), T.Tensor(np.ones((batch, k))))


@dataclass
class MixtureDiagGaussian:
    """Mixture of J diagonal Gaussians per batch row.

    ``log_alpha`` is [batch x J] and normalized; ``mu``/``sigma`` are
    [batch x J x k].
    """

    log_alpha: T.Tensor
    mu: T.Tensor
    sigma: T.Tensor

    def __post_init__(self):
        _check_same(self.mu, self.sigma, "MixtureDiagGaussian")
        if self.mu.ndim != 3 or self.log_alpha.shape != self.mu.shape[:2]:
            raise DimensionError(
                f"mixture shapes log_alpha={self.log_alpha.shape} mu={self.mu.shape} are inconsistent"
            )

    @classmethod
    def from_logits(cls, logits, mu, sigma):
        b, j = logits.shape
        lse = T.repeat(T.reshape(T.logsumexp(logits, axis=1), (b, 1)), 1, j)
        return cls(logits - lse, mu, sigma)

    @property
    def n_components(self):
        return self.log_alpha.shape[1]


@dataclass
class BernoulliParam:
    """Bernoulli over {0, 1}, stored as a logit for stable log-densities."""

    logit: T.Tensor

    @classmethod
    def from_prob(cls, p):
        p = p if isinstance(p, T.Tensor) else T.tensor(p)
        if not np.all((p.value > 0) & (p.value < 1)):
            raise DomainError("Bernoulli probability must lie strictly inside (0, 1)")
        return cls(T.log(p) - T.log(1.0 - p))

    @property
    def p(self):
        return T.sigmoid(self.logit)


def gauss_log_density(d, x):
    """Log N(x; mu, diag(sigma^2)), summed over the last axis."""
    _check_same(d.mu, x, "gauss_log_density")
    _check_sigma(d.sigma)
    z = (x - d.mu) / d.sigma
    terms = -HALF_LOG_2PI - T.log(d.sigma) - 0.5 * T.square(z)
    return T.sum(terms, axis=-1)


def gauss_kl_terms(q, p):
    """Per-dimension KL(q || p) for diagonal Gaussians, shape [batch x k]."""
    _check_same(q.mu, p.mu, "gauss_kl")
    _check_sigma(q.sigma)
    _check_sigma(p.sigma)
    var_p = T.square(p.sigma)
    return (
        T.log(p.sigma)
        - T.log(q.sigma)
        + (T.square(q.sigma) + T.square(q.mu - p.mu)) / (2.0 * var_p)
        - 0.5
    )


def gauss_kl(q, p):
    return T.sum(gauss_kl_terms(q, p), axis=-1)


def reparam_sample(d, eps):
    """``mu + sigma * eps``; ``eps`` is treated as a constant."""
    eps = eps if isinstance(eps, T.Tensor) else T.Tensor(eps)
    _check_same(d.mu, eps, "reparam_sample")
    return d.mu + d.sigma * T.Tensor(eps.value)


def gmm_log_density(m, x):
    b, j, k = m.mu.shape
    if x.shape != (b, k):
        raise DimensionError(f"gmm_log_density: expected x of shape {(b, k)}, got {x.shape}")
    xr = T.repeat(T.reshape(x, (b, 1, k)), 1, j)
    comp = gauss_log_density(DiagGaussian(m.mu, m.sigma), xr)
    return T.logsumexp(comp + m.log_alpha, axis=1)


def _pick(m, comp):
    rows = np.arange(m.mu.shape[0])
    return m.mu.value[rows, comp], m.sigma.value[rows, comp]


def gmm_sample(m, u, eps):
    """Draw one point per row from externally supplied uniforms and normals.

    The component is chosen by inverse CDF on the mixture weights using
    ``u`` ([batch]), then ``mu_j + sigma_j * eps``.
    """
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    eps = np.asarray(eps.value if isinstance(eps, T.Tensor) else eps, dtype=np.float64)
    cdf = np.cumsum(np.exp(m.log_alpha.value), axis=1)
    comp = np.minimum((u[:, None] >= cdf).sum(axis=1), m.n_components - 1)
    mu, sigma = _pick(m, comp)
    return T.Tensor(mu + sigma * eps), comp


def gmm_mode_component(m):
    """Noise-free sample: the mean of the heaviest component."""
    comp = np.argmax(m.log_alpha.value, axis=1)
    mu, _ = _pick(m, comp)
    return T.Tensor(mu), comp


def bernoulli_log_density(b, x):
    xv = np.asarray(x.value if isinstance(x, T.Tensor) else x, dtype=np.float64)
    if not np.all((xv == 0) | (xv == 1)):
        raise DomainError("Bernoulli outcomes must be 0 or 1")
    if xv.shape != b.logit.shape:
        raise DimensionError(f"bernoulli_log_density: shapes {b.logit.shape} and {xv.shape} differ")
    log_p = -T.softplus(-b.logit)
    log_q = -T.softplus(b.logit)
    ll = T.Tensor(xv) * log_p + T.Tensor(1.0 - xv) * log_q
    return T.sum(ll, axis=-1)


def bernoulli_prob(b, x):
    """Probability of each binary outcome (elementwise, no reduction)."""
    xv = np.asarray(x, dtype=np.float64)
    if not np.all((xv == 0) | (xv == 1)):
        raise DomainError("Bernoulli outcomes must be 0 or 1")
    p = b.p.value
    return np.where(xv == 1, p, 1.0 - p)
