"""Deterministic mean-field approximations of Gaussian link integrals.

The sigmoid-Gaussian integral E[sigmoid(u / tau)], u ~ N(mu, s^2), is
approximated by folding the variance into the temperature:

    mf_sigmoid(mu, s^2) = sigmoid(mu / sqrt(tau^2 + lambda s^2))

and the softmax integral coordinate-wise the same way.  lambda = pi/8
matches the probit slope at the origin; lambda = 3/pi^2 matches the
logistic variance.  The Gauss-Hermite routine is the quadrature oracle
the approximations are verified against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import expit, softmax

from .covariance import logit_variances
from .sampling import LINKS, SIGMOID, SOFTMAX, Head, PredictiveBatch, mean_logits

LAMBDA_PROBIT = math.pi / 8.0
LAMBDA_LOGISTIC_VARIANCE = 3.0 / math.pi**2
DEFAULT_LAMBDA = LAMBDA_PROBIT


@dataclass(frozen=True)
class MeanFieldConfig:
    """Mean-field slope constant and quadrature resolution."""

    lam: float = DEFAULT_LAMBDA
    quad_nodes: int = 200

    def __post_init__(self):
        if not self.lam > 0.0:
            raise ValueError(f"lambda must be positive, got {self.lam}")
        if self.quad_nodes < 20:
            raise ValueError(f"need at least 20 quadrature nodes, got {self.quad_nodes}")


def _validate(mu, s2, tau, lam):
    mu = np.asarray(mu, dtype=np.float64)
    s2 = np.asarray(s2, dtype=np.float64)
    if np.any(s2 < 0.0):
        raise ValueError("variances must be non-negative")
    if not tau > 0.0:
        raise ValueError(f"tau must be positive, got {tau}")
    if not lam > 0.0:
        raise ValueError(f"lambda must be positive, got {lam}")
    return mu, s2


def mf_sigmoid(mu, s2, tau: float = 1.0, lam: float = DEFAULT_LAMBDA):
    """Mean-field estimate of E[sigmoid(u / tau)], u ~ N(mu, s2).

    Broadcasts over array-valued mu / s2.
    """
    mu, s2 = _validate(mu, s2, tau, lam)
    return expit(mu / np.sqrt(tau * tau + lam * s2))


def mf_softmax(mu, s2, tau: float = 1.0, lam: float = DEFAULT_LAMBDA):
    """Mean-field softmax: coordinate-wise variance-folded temperatures.

    mu and s2 are (K,) or (N, K); the softmax is taken over the last axis
    of the scaled logits mu_j / sqrt(tau^2 + lambda s2_j).
    """
    mu, s2 = _validate(mu, s2, tau, lam)
    if mu.shape != s2.shape:
        raise ValueError(f"mu and s2 must have equal shapes, got {mu.shape} vs {s2.shape}")
    if mu.ndim not in (1, 2):
        raise ValueError(f"mu must be (K,) or (N, K), got shape {mu.shape}")
    return softmax(mu / np.sqrt(tau * tau + lam * s2), axis=-1)


def mf_predict(
    head: Head,
    phi_batch: np.ndarray,
    link: str,
    lam: float = DEFAULT_LAMBDA,
) -> PredictiveBatch:
    """Mean-field predictive probabilities for a batch.

    Composes the mean logits and per-class logit variances of the head's
    noise model; a deterministic head (spec None) has zero variances.
    """
    if link not in LINKS:
        raise ValueError(f"link must be one of {LINKS}, got {link!r}")
    X = np.asarray(phi_batch, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    mu = mean_logits(head, X)
    if head.spec is None:
        s2 = np.zeros_like(mu)
    else:
        s2 = logit_variances(head.spec, X, head.W)
    tau = head.temperature.value()
    fn = mf_softmax if link == SOFTMAX else mf_sigmoid
    probs = fn(mu, s2, tau=tau, lam=lam)
    return PredictiveBatch(probs=probs, link=link, estimator=f"mean_field:{lam:.6g}")


@lru_cache(maxsize=8)
def _hermgauss_probabilist(nodes: int) -> tuple[np.ndarray, np.ndarray]:
    # Physicists' rule from numpy, rescaled so that sum w f(x) integrates
    # f against the standard normal density.
    x, w = np.polynomial.hermite.hermgauss(nodes)
    return x * math.sqrt(2.0), w / math.sqrt(math.pi)


def gauss_hermite_sigmoid(mu, s2, tau: float = 1.0, nodes: int = 200):
    """Gauss-Hermite quadrature of E[sigmoid(u / tau)], u ~ N(mu, s2).

    Exact for s2 = 0; 100 and 200 nodes agree below 1e-10 for s2/tau^2 up
    to about 4.  Wider noise converges more slowly (the sigmoid's complex
    poles approach the sampling line; roughly 2e-9 at s2/tau^2 = 9), but
    the 200-node value itself stays within ~4e-13 of an independent
    equispaced-trapezoid evaluation over mu in [-6, 6], s2 in [0, 9].
    Broadcasts over arrays.
    """
    mu, s2 = _validate(mu, s2, tau, 1.0)
    if nodes < 20:
        raise ValueError(f"need at least 20 nodes, got {nodes}")
    x, w = _hermgauss_probabilist(nodes)
    mu_b = mu[..., None]
    sd_b = np.sqrt(s2)[..., None]
    vals = expit((mu_b + sd_b * x) / tau)
    out = vals @ w
    return out if out.ndim else float(out)
