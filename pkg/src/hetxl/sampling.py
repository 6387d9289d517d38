"""Reparametrized noise sampling and Monte-Carlo predictive estimates.

Noise is generated from standard normal draws that are independent of the
covariance parameters:

    eps = Z V(x) + tail,   Z ~ N(0, I_{S x R})

with tail = z d(x)^T for the rank-one completion (z ~ N(0, I_S)) or
per-coordinate draws scaled by sqrt(d(x)) for the diagonal one.  Keeping
the draws separate from the transformation gives common random numbers
for gradient work and makes every result a deterministic function of
(seed, stream path, draw order).
"""

from __future__ import annotations

import concurrent.futures
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, softmax

from .covariance import (
    DIAGONAL,
    HASHED_SPACE,
    LOGIT_SPACE,
    PRE_LOGIT_SPACE,
    RANK_ONE,
    CovarianceSpec,
    factor_matrix,
)
from .errors import NumericError
from .temperature import Temperature

SOFTMAX = "softmax"
SIGMOID = "sigmoid"
LINKS = (SOFTMAX, SIGMOID)


@dataclass(frozen=True)
class RngStream:
    """Splittable deterministic random stream.

    A stream is identified by (seed, path); children extend the path.
    The same (seed, path) always yields the same generator and distinct
    paths give statistically independent streams, so per-example children
    make results independent of batching and worker layout.
    """

    seed: int
    path: tuple[int, ...] = ()

    def child(self, index: int) -> "RngStream":
        return RngStream(self.seed, self.path + (int(index),))

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(self.seed, spawn_key=self.path)
        return np.random.default_rng(seq)


def _generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"rng must be an RngStream or numpy Generator, got {type(rng)!r}")


@dataclass
class Head:
    """Linear classifier head with an optional heteroscedastic noise model.

    spec = None is the deterministic baseline: plain logits W^T phi + b
    with no noise.  Otherwise the spec's noise space must be consistent
    with (D, K): Q = K for the logit variant, Q = D for the pre-logit
    variant, and bucket_map must cover all K classes for the hashed one.
    """

    W: np.ndarray
    b: np.ndarray
    spec: CovarianceSpec | None
    temperature: Temperature

    def __post_init__(self):
        self.W = np.ascontiguousarray(np.asarray(self.W, dtype=np.float64))
        self.b = np.ascontiguousarray(np.asarray(self.b, dtype=np.float64))
        if self.W.ndim != 2:
            raise ValueError(f"W must be (D, K), got shape {self.W.shape}")
        D, K = self.W.shape
        if self.b.shape != (K,):
            raise ValueError(f"b must have shape ({K},), got {self.b.shape}")
        spec = self.spec
        if spec is None:
            return
        if spec.D != D:
            raise ValueError(f"spec expects D={spec.D} features, head has D={D}")
        if spec.variant == LOGIT_SPACE and spec.Q != K:
            raise ValueError(f"logit-space spec has Q={spec.Q}, head has K={K}")
        if spec.variant == PRE_LOGIT_SPACE and spec.Q != D:
            raise ValueError(f"pre-logit spec has Q={spec.Q}, head has D={D}")
        if spec.variant == HASHED_SPACE and spec.bucket_map.size != K:
            raise ValueError(
                f"bucket_map covers {spec.bucket_map.size} classes, head has K={K}"
            )

    @property
    def D(self) -> int:
        return self.W.shape[0]

    @property
    def K(self) -> int:
        return self.W.shape[1]


@dataclass
class PredictiveBatch:
    """Predicted probabilities plus how they were estimated.

    estimator is a tag like "mc:1000", "mean_field:0.392699" or
    "deterministic".  Softmax rows lie on the simplex; sigmoid entries are
    independent per-class probabilities.
    """

    probs: np.ndarray
    link: str
    estimator: str

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2:
            raise ValueError(f"probs must be (N, K), got shape {self.probs.shape}")
        if self.link not in LINKS:
            raise ValueError(f"link must be one of {LINKS}, got {self.link!r}")
        if not np.all(np.isfinite(self.probs)):
            raise NumericError("predictive probabilities contain non-finite values")
        if np.any(self.probs < 0.0) or np.any(self.probs > 1.0):
            raise ValueError("probabilities must lie in [0, 1]")
        if self.link == SOFTMAX:
            sums = self.probs.sum(axis=1)
            if not np.allclose(sums, 1.0, atol=1e-9):
                raise ValueError("softmax probabilities must sum to one per row")


def standard_normal_draws(spec: CovarianceSpec, S: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """The (Z, z) draws feeding the noise transformation, in fixed order.

    Z is (S, R); z is (S,) for the rank-one tail or (S, Q) for the
    diagonal one.
    """
    if S < 0:
        raise ValueError(f"S must be non-negative, got {S}")
    g = _generator(rng)
    Z = g.standard_normal((S, spec.R))
    if spec.tail == RANK_ONE:
        z = g.standard_normal(S)
    else:
        z = g.standard_normal((S, spec.Q))
    return Z, z


def noise_from_draws(
    spec: CovarianceSpec, phi: np.ndarray, Z: np.ndarray, z: np.ndarray
) -> np.ndarray:
    """Map standard draws through the covariance factor at phi.

    Rows are i.i.d. N(0, Sigma(phi)) when (Z, z) are standard normal.
    """
    f = factor_matrix(spec, phi)
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[1] != spec.R:
        raise ValueError(f"Z must be (S, {spec.R}), got shape {Z.shape}")
    z = np.asarray(z, dtype=np.float64)
    if spec.tail == RANK_ONE:
        if z.shape != (Z.shape[0],):
            raise ValueError(f"z must be ({Z.shape[0]},), got shape {z.shape}")
        # One (S, R+1) @ (R+1, Q) product instead of Z @ V plus a rank-one
        # update; the fused form avoids a second (S, Q) temporary, which
        # dominates the cost when Q is the class count.
        return np.hstack([Z, z[:, None]]) @ f.stacked()
    eps = Z @ f.V
    if z.shape != eps.shape:
        raise ValueError(f"z must be {eps.shape}, got shape {z.shape}")
    eps += z * np.sqrt(f.d)[None, :]
    return eps


def draw_noise(spec: CovarianceSpec, phi: np.ndarray, S: int, rng) -> np.ndarray:
    """S noise rows at phi, each distributed N(0, Sigma(phi))."""
    Z, z = standard_normal_draws(spec, S, rng)
    return noise_from_draws(spec, phi, Z, z)


def mean_logits(head: Head, phi: np.ndarray) -> np.ndarray:
    """Noise-free logits W^T phi + b for a single input or a batch."""
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape[-1] != head.D:
        raise ValueError(f"phi must have {head.D} features, got shape {phi.shape}")
    return phi @ head.W + head.b


def mc_logits(
    head: Head,
    phi: np.ndarray,
    noise: np.ndarray,
    hashed_projection: np.ndarray | None = None,
) -> np.ndarray:
    """Per-sample noisy logits for a single input.

    noise is (S, Q) in the head's noise space.  For the hashed variant the
    default projection is the 0/1 bucket map; passing hashed_projection
    replaces it with an arbitrary dense (H, K) matrix (setting it to W on
    an H = D spec reproduces the pre-logit variant).
    """
    if head.spec is None:
        raise ValueError("deterministic head has no noise space")
    spec = head.spec
    noise = np.asarray(noise, dtype=np.float64)
    if noise.ndim != 2 or noise.shape[1] != spec.Q:
        raise ValueError(f"noise must be (S, {spec.Q}), got shape {noise.shape}")
    m = mean_logits(head, phi)
    if spec.variant == LOGIT_SPACE:
        return m[None, :] + noise
    if spec.variant == PRE_LOGIT_SPACE:
        return m[None, :] + noise @ head.W
    if hashed_projection is not None:
        proj = np.asarray(hashed_projection, dtype=np.float64)
        if proj.shape != (spec.Q, head.K):
            raise ValueError(
                f"hashed_projection must be ({spec.Q}, {head.K}), got {proj.shape}"
            )
        return m[None, :] + noise @ proj
    return m[None, :] + noise[:, spec.bucket_map]


def _sampled_logits(
    head: Head, phi: np.ndarray, S: int, rng, wb: np.ndarray | None = None
) -> np.ndarray:
    """Mean-plus-noise logits (S, K) for one input, materialized exactly once.

    Prediction cost at large S is dominated by traffic over the (S, K)
    buffer, so the mean is folded into the sampling GEMM instead of being
    broadcast-added in a second pass.  Values may differ from mean_logits +
    noise in the last float64 bit (different summation order inside the
    product).

    wb is the per-head constant vstack([W, b]) for the pre-logit variant;
    callers looping over examples pass it in so the (D+1, K) copy happens
    once per batch, not once per example.
    """
    spec = head.spec
    Z, z = standard_normal_draws(spec, S, rng)
    if spec.variant == LOGIT_SPACE:
        f = factor_matrix(spec, phi)
        m = mean_logits(head, phi)
        ones = np.ones((S, 1))
        if spec.tail == RANK_ONE:
            return np.hstack([Z, z[:, None], ones]) @ np.vstack(
                [f.V, f.d[None, :], m[None, :]]
            )
        U = np.hstack([Z, ones]) @ np.vstack([f.V, m[None, :]])
        np.multiply(z, np.sqrt(f.d)[None, :], out=z)
        U += z
        return U
    eps = noise_from_draws(spec, phi, Z, z)
    if spec.variant == PRE_LOGIT_SPACE:
        # Noise is additive in feature space: (phi + eps) W + b is the
        # sampled logit, so perturbing phi lets one GEMM cover both terms.
        if wb is None:
            wb = np.vstack([head.W, head.b[None, :]])
        eps += phi
        return np.hstack([eps, np.ones((S, 1))]) @ wb
    U = eps[:, spec.bucket_map]
    U += mean_logits(head, phi)
    return U


def _link_probs(U: np.ndarray, link: str) -> np.ndarray:
    if link == SOFTMAX:
        return softmax(U, axis=-1)
    if link == SIGMOID:
        return expit(U)
    raise ValueError(f"link must be one of {LINKS}, got {link!r}")


def _link_probs_inplace(U: np.ndarray, link: str) -> np.ndarray:
    """Overwrite U with link probabilities; U must be a private buffer.

    Same operation order as _link_probs, so the values are bit-identical;
    only the (S, K) temporaries are avoided.
    """
    if link == SOFTMAX:
        U -= U.max(axis=-1, keepdims=True)
        np.exp(U, out=U)
        U /= U.sum(axis=-1, keepdims=True)
        return U
    return expit(U, out=U)


def mc_predict(
    head: Head,
    phi_batch: np.ndarray,
    S: int,
    link: str,
    rng: RngStream,
    threads: int = 1,
) -> PredictiveBatch:
    """Monte-Carlo predictive probabilities, averaged in probability space.

    Example n draws its noise from rng.child(n), so results are bit-wise
    independent of how examples are partitioned across threads.
    """
    if S < 1:
        raise ValueError(f"S must be >= 1, got {S}")
    if link not in LINKS:
        raise ValueError(f"link must be one of {LINKS}, got {link!r}")
    if threads < 1:
        raise ValueError(f"threads must be >= 1, got {threads}")
    X = np.asarray(phi_batch, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    N = X.shape[0]
    tau = head.temperature.value()
    probs = np.empty((N, head.K), dtype=np.float64)

    if head.spec is None:
        probs[:] = _link_probs(mean_logits(head, X) / tau, link)
        return PredictiveBatch(probs=probs, link=link, estimator=f"mc:{S}")

    wb = None
    if head.spec.variant == PRE_LOGIT_SPACE:
        wb = np.vstack([head.W, head.b[None, :]])

    def one(n: int) -> None:
        L = _sampled_logits(head, X[n], S, rng.child(n), wb)
        if not np.all(np.isfinite(L)):
            raise NumericError(f"non-finite logits for example {n}")
        L /= tau
        probs[n] = _link_probs_inplace(L, link).mean(axis=0)

    if threads == 1 or N == 1:
        for n in range(N):
            one(n)
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(one, range(N)))
    return PredictiveBatch(probs=probs, link=link, estimator=f"mc:{S}")


def deterministic_predict(head: Head, phi_batch: np.ndarray, link: str) -> PredictiveBatch:
    """Plain link probabilities of the mean logits (no noise)."""
    X = np.asarray(phi_batch, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    tau = head.temperature.value()
    probs = _link_probs(mean_logits(head, X) / tau, link)
    return PredictiveBatch(probs=probs, link=link, estimator="deterministic")


def logit_moments(head: Head, phi: np.ndarray, S: int, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """Empirical mean and covariance of the noisy logits at one input.

    The population values are (W^T phi + b, image of Sigma(phi) in logit
    space); the empirical covariance uses the S-1 normalization.
    """
    if S < 2:
        raise ValueError(f"need S >= 2 samples for a covariance, got {S}")
    if head.spec is None:
        m = mean_logits(head, phi)
        return m, np.zeros((head.K, head.K), dtype=np.float64)
    noise = draw_noise(head.spec, np.asarray(phi, dtype=np.float64), S, rng)
    L = mc_logits(head, phi, noise)
    mean = L.mean(axis=0)
    cov = np.atleast_2d(np.cov(L, rowvar=False, ddof=1))
    return mean, cov
