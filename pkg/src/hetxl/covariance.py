"""Input-dependent low-rank covariance factors for heteroscedastic heads.

The per-input noise covariance is never materialized during training or
prediction; it is represented by factor matrices with

    Sigma(x) = V(x)^T V(x) + tail(x)

where the R factor rows are V(x) = J * (1_R v(x)^T) for a shared matrix J
and an input-dependent scale vector v(x) = K_het^T phi + b_het, and the
tail completes the covariance either as a rank-one term d(x) d(x)^T or as
a diagonal diag(d(x)) with d(x) = softplus(K_diag^T phi + b_diag).

The noise space depends on the variant: the K logits directly ("logit",
Q = K), the D pre-logit features ("pre_logit", Q = D), or H hash buckets
shared by classes ("hashed", Q = H <= K, with a total bucket map from
classes to buckets).  All homogeneous bias terms of the noise are zero so
the noise has mean zero and the mean logits stay W^T phi + b.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LOGIT_SPACE = "logit"
PRE_LOGIT_SPACE = "pre_logit"
HASHED_SPACE = "hashed"
VARIANTS = (LOGIT_SPACE, PRE_LOGIT_SPACE, HASHED_SPACE)

RANK_ONE = "rank_one"
DIAGONAL = "diag"
TAILS = (RANK_ONE, DIAGONAL)


def softplus(x):
    """log(1 + exp(x)), stable for large |x|."""
    return np.logaddexp(0.0, x)


@dataclass(frozen=True)
class Dims:
    """Problem dimensions shared across modules.

    D: pre-logit width, K: number of classes, R: covariance factor rows,
    H: hash buckets (hashed variant only), S: Monte-Carlo samples.
    """

    D: int
    K: int
    R: int
    H: int | None = None
    S: int = 1

    def __post_init__(self):
        for name in ("D", "K", "R", "S"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.H is not None:
            if not isinstance(self.H, (int, np.integer)) or self.H < 1:
                raise ValueError(f"H must be a positive integer, got {self.H!r}")
            if self.H > self.K:
                raise ValueError(f"H={self.H} must not exceed K={self.K}")

    def q(self, variant: str) -> int:
        """Noise-space dimension Q of the given variant."""
        if variant == LOGIT_SPACE:
            return self.K
        if variant == PRE_LOGIT_SPACE:
            return self.D
        if variant == HASHED_SPACE:
            if self.H is None:
                raise ValueError("hashed variant requires H")
            return self.H
        raise ValueError(f"unknown variant {variant!r}")


def _as_float_matrix(name: str, x, ndim: int) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    return np.ascontiguousarray(arr)


@dataclass
class CovarianceSpec:
    """Parameters of the input-dependent noise covariance Sigma(x).

    Shapes: J is (R, Q), K_het and K_diag are (D, Q), b_het and b_diag are
    (Q,).  For the hashed variant Q = H and bucket_map holds, per class,
    the bucket index in [0, H); other variants must leave it None.
    """

    variant: str
    tail: str
    J: np.ndarray
    K_het: np.ndarray
    b_het: np.ndarray
    K_diag: np.ndarray
    b_diag: np.ndarray
    bucket_map: np.ndarray | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.tail not in TAILS:
            raise ValueError(f"tail must be one of {TAILS}, got {self.tail!r}")
        self.J = _as_float_matrix("J", self.J, 2)
        self.K_het = _as_float_matrix("K_het", self.K_het, 2)
        self.b_het = _as_float_matrix("b_het", self.b_het, 1)
        self.K_diag = _as_float_matrix("K_diag", self.K_diag, 2)
        self.b_diag = _as_float_matrix("b_diag", self.b_diag, 1)
        r, q = self.J.shape
        if r < 1:
            raise ValueError("at least one factor row is required (R >= 1)")
        d = self.K_het.shape[0]
        for name, arr, shape in (
            ("K_het", self.K_het, (d, q)),
            ("b_het", self.b_het, (q,)),
            ("K_diag", self.K_diag, (d, q)),
            ("b_diag", self.b_diag, (q,)),
        ):
            if arr.shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
        if self.variant == HASHED_SPACE:
            if self.bucket_map is None:
                raise ValueError("hashed variant requires a bucket_map")
            bm = np.asarray(self.bucket_map, dtype=np.int64)
            if bm.ndim != 1:
                raise ValueError("bucket_map must be one-dimensional")
            if bm.size < q:
                raise ValueError(
                    f"bucket_map maps {bm.size} classes onto {q} buckets; H must not exceed K"
                )
            if bm.min() < 0 or bm.max() >= q:
                raise ValueError(f"bucket indices must lie in [0, {q})")
            self.bucket_map = bm
        elif self.bucket_map is not None:
            raise ValueError(f"bucket_map is only meaningful for the hashed variant")

    @property
    def R(self) -> int:
        return self.J.shape[0]

    @property
    def Q(self) -> int:
        return self.J.shape[1]

    @property
    def D(self) -> int:
        return self.K_het.shape[0]


@dataclass
class FactorMatrix:
    """Per-input covariance factor: Sigma = V^T V + tail.

    V is (R, Q); d is (Q,), the rank-one tail vector or the diagonal tail
    (strictly positive in the diagonal case, softplus output).
    """

    V: np.ndarray
    d: np.ndarray
    tail: str

    def stacked(self) -> np.ndarray:
        """The (R+1, Q) matrix [V; d^T]; only defined for the rank-one tail."""
        if self.tail != RANK_ONE:
            raise ValueError("stacked factor only exists for the rank-one tail")
        return np.vstack([self.V, self.d[None, :]])


def affine_transform(kernel: np.ndarray, bias: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """kernel^T phi + bias.

    phi may be a single (D,) vector or a batch (N, D); the result is (Q,)
    or (N, Q) accordingly.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    if kernel.ndim != 2:
        raise ValueError(f"kernel must be 2-dimensional, got shape {kernel.shape}")
    d, q = kernel.shape
    if bias.shape != (q,):
        raise ValueError(f"bias must have shape ({q},), got {bias.shape}")
    if phi.ndim not in (1, 2) or phi.shape[-1] != d:
        raise ValueError(
            f"phi must have shape ({d},) or (N, {d}), got {phi.shape}"
        )
    return phi @ kernel + bias


def factor_matrix(spec: CovarianceSpec, phi: np.ndarray) -> FactorMatrix:
    """Evaluate the covariance factor at a single input."""
    phi = np.asarray(phi, dtype=np.float64)
    if phi.ndim != 1:
        raise ValueError(f"phi must be a single (D,) vector, got shape {phi.shape}")
    v = affine_transform(spec.K_het, spec.b_het, phi)
    raw = affine_transform(spec.K_diag, spec.b_diag, phi)
    d = softplus(raw) if spec.tail == DIAGONAL else raw
    return FactorMatrix(V=spec.J * v[None, :], d=d, tail=spec.tail)


def covariance_dense(spec: CovarianceSpec, phi: np.ndarray) -> np.ndarray:
    """Materialize Sigma(x) as a dense (Q, Q) matrix.

    Intended for desk-scale verification only; everything else works with
    the factors.
    """
    f = factor_matrix(spec, phi)
    if spec.tail == RANK_ONE:
        c = f.stacked()
        return c.T @ c
    return f.V.T @ f.V + np.diag(f.d)


def logit_variances(spec: CovarianceSpec, phi: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Per-class variances of the noisy logits, without forming Sigma.

    For the pre-logit variant this is s_j^2 = ||C(x) W_j||^2, the diagonal
    of W^T Sigma(x) W; for the logit variant it is the diagonal of
    Sigma(x) itself; for the hashed variant it is the variance of the
    bucket each class maps to.  phi may be (D,) or (N, D); the result is
    (K,) or (N, K).
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise ValueError(f"W must be 2-dimensional, got shape {W.shape}")
    phi = np.asarray(phi, dtype=np.float64)
    single = phi.ndim == 1
    X = phi[None, :] if single else phi

    v = affine_transform(spec.K_het, spec.b_het, X)
    raw = affine_transform(spec.K_diag, spec.b_diag, X)
    d = softplus(raw) if spec.tail == DIAGONAL else raw

    if spec.variant == PRE_LOGIT_SPACE:
        if W.shape[0] != spec.Q:
            raise ValueError(
                f"W has {W.shape[0]} rows but the pre-logit noise space has Q={spec.Q}"
            )
        T = v[:, None, :] * spec.J[None, :, :]          # (N, R, Q)
        G = T @ W                                       # (N, R, K)
        s2 = np.einsum("nrk,nrk->nk", G, G)
        if spec.tail == RANK_ONE:
            e = d @ W
            s2 = s2 + e * e
        else:
            s2 = s2 + d @ (W * W)
    else:
        col_j2 = np.einsum("rq,rq->q", spec.J, spec.J)
        per_coord = v * v * col_j2[None, :]
        per_coord = per_coord + (d * d if spec.tail == RANK_ONE else d)
        if spec.variant == LOGIT_SPACE:
            if W.shape[1] != spec.Q:
                raise ValueError(
                    f"W has {W.shape[1]} columns but the logit noise space has Q={spec.Q}"
                )
            s2 = per_coord
        else:
            if W.shape[1] != spec.bucket_map.size:
                raise ValueError(
                    f"W has {W.shape[1]} columns but bucket_map covers "
                    f"{spec.bucket_map.size} classes"
                )
            s2 = per_coord[:, spec.bucket_map]

    return s2[0] if single else s2


# splitmix64 multiplication/xor-shift constants.
_MIX_A = np.uint64(0xBF58476D1CE4E5B9)
_MIX_B = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def hash_bucket_map(K: int, H: int, seed: int = 0) -> np.ndarray:
    """Deterministic near-uniform map from K class indices to H buckets.

    Each class index is mixed with the seed through a 64-bit
    multiply-xor-shift finalizer and reduced mod H.
    """
    if not 1 <= H <= K:
        raise ValueError(f"need 1 <= H <= K, got H={H}, K={K}")
    seed64 = np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF)
    with np.errstate(over="ignore"):
        x = seed64 * _MIX_A + (np.arange(K, dtype=np.uint64) + np.uint64(1)) * _GOLDEN
        x ^= x >> np.uint64(30)
        x *= _MIX_A
        x ^= x >> np.uint64(27)
        x *= _MIX_B
        x ^= x >> np.uint64(31)
        buckets = x % np.uint64(H)
    return buckets.astype(np.int64)


def identity_bucket_map(K: int) -> np.ndarray:
    """Bucket map with H = K and class j in bucket j."""
    return np.arange(K, dtype=np.int64)


def bucket_matrix(bucket_map: np.ndarray, H: int) -> np.ndarray:
    """Dense (H, K) 0/1 matrix with entry (h(k), k) = 1."""
    bucket_map = np.asarray(bucket_map, dtype=np.int64)
    P = np.zeros((H, bucket_map.size), dtype=np.float64)
    P[bucket_map, np.arange(bucket_map.size)] = 1.0
    return P


def extra_param_count(variant: str, dims: Dims, include_bias: bool = False) -> int:
    """Number of parameters the noise model adds on top of (W, b).

    The two kernels contribute D*Q each and the shared factor matrix R*Q,
    with Q the variant's noise-space dimension; the bias flag adds the two
    Q-vectors.  Counts are exact integers.
    """
    q = dims.q(variant)
    count = 2 * dims.D * q + dims.R * q
    if include_bias:
        count += 2 * q
    return int(count)
