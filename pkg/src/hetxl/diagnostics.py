"""Subspace alignment, analytic cost model and latency benchmarks."""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .covariance import (
    HASHED_SPACE,
    LOGIT_SPACE,
    PRE_LOGIT_SPACE,
    RANK_ONE,
    CovarianceSpec,
    Dims,
    factor_matrix,
    hash_bucket_map,
)
from .sampling import SOFTMAX, Head, RngStream, mc_predict
from .temperature import Temperature

_RANK_RTOL = 1e-10


def _row_space_basis(A: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the row space, rows of the result.

    Singular values below 1e-10 times the largest are treated as zero.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {A.shape}")
    if not np.any(A):
        raise ValueError("cannot orthonormalize an all-zero matrix")
    _, s, Vt = np.linalg.svd(A, full_matrices=False)
    rank = int((s > _RANK_RTOL * s[0]).sum())
    return Vt[:rank]


def spa_cosine(A: np.ndarray, B: np.ndarray) -> float:
    """Cosine of the smallest principal angle between two row spaces.

    Equals the largest singular value of B_A B_B^T for orthonormal
    row-space bases; invariant to row scaling and basis choice, 1 when
    the spaces intersect and 0 when they are orthogonal.
    """
    Ba = _row_space_basis(A)
    Bb = _row_space_basis(B)
    if Ba.shape[1] != Bb.shape[1]:
        raise ValueError(
            f"row spaces live in different ambient dimensions: "
            f"{Ba.shape[1]} vs {Bb.shape[1]}"
        )
    s = np.linalg.svd(Ba @ Bb.T, compute_uv=False)
    return float(s[0])


def spa_profile(head: Head, inputs: np.ndarray) -> tuple[float, float]:
    """Mean and std of the W-vs-factor-rows alignment over inputs.

    Defined for the logit-space variant, where the factor rows V(x) span
    an R-dimensional subspace of logit space directly comparable with the
    row space of W.  The std is the population standard deviation.
    """
    if head.spec is None or head.spec.variant != LOGIT_SPACE:
        raise ValueError("the alignment profile requires a logit-space noise model")
    X = np.asarray(inputs, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[0] == 0:
        raise ValueError("need at least one input")
    values = np.empty(X.shape[0])
    for i in range(X.shape[0]):
        V = factor_matrix(head.spec, X[i]).V
        values[i] = spa_cosine(head.W, V)
    return float(values.mean()), float(values.std())


@dataclass(frozen=True)
class CostTerms:
    """Analytic per-example cost of S-sample MC prediction.

    dominant keeps only the dominating terms; full sums the whole
    per-operation breakdown (scale vector, factor noise, tail noise,
    logits).  Both are exact integer term evaluations, monotone in every
    dimension.
    """

    variant: str
    dominant: int
    full: int
    breakdown: dict[str, int]


def complexity_terms(variant: str, dims: Dims) -> CostTerms:
    D, K, R, S = dims.D, dims.K, dims.R, dims.S
    if variant == LOGIT_SPACE:
        breakdown = {
            "scale_vector": D * K,
            "factor_noise": K * S + K * R * S,
            "tail_noise": D * K + K * S,
            "logits": D * K + K * S,
        }
        dominant = D * K + K * R * S
    elif variant == PRE_LOGIT_SPACE:
        breakdown = {
            "scale_vector": D * D,
            "factor_noise": D * S + D * R * S,
            "tail_noise": D * D + D * S,
            "logits": D * S + D * K * S,
        }
        dominant = D * R * S + D * D + D * K * S
    elif variant == HASHED_SPACE:
        H = dims.q(HASHED_SPACE)
        breakdown = {
            "scale_vector": D * H,
            "factor_noise": H * S + H * R * S,
            "tail_noise": D * H + H * S,
            "logits": D * K + K * S,
        }
        dominant = D * K + H * R * S + K * S
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return CostTerms(
        variant=variant,
        dominant=int(dominant),
        full=int(sum(breakdown.values())),
        breakdown=breakdown,
    )


def crossover_samples(dims: Dims, lo: float = 1.0, hi: float = 1e9) -> float:
    """S where the full logit-space and pre-logit cost curves intersect.

    Both curves are affine in S; returns the exact intersection, raising
    if it falls outside [lo, hi] or the curves are parallel.
    """
    def totals(S1: int, S2: int, variant: str):
        a = complexity_terms(variant, replace(dims, S=S1)).full
        b = complexity_terms(variant, replace(dims, S=S2)).full
        slope = (b - a) / (S2 - S1)
        intercept = a - slope * S1
        return slope, intercept

    s_het, i_het = totals(1, 1001, LOGIT_SPACE)
    s_xl, i_xl = totals(1, 1001, PRE_LOGIT_SPACE)
    if s_het == s_xl:
        raise ValueError("cost curves are parallel; no crossover")
    s_star = (i_xl - i_het) / (s_het - s_xl)
    if not lo <= s_star <= hi:
        raise ValueError(f"crossover S={s_star} outside [{lo}, {hi}]")
    return float(s_star)


@dataclass(frozen=True)
class BenchRow:
    variant: str
    S: int
    batch: int
    ms_per_example: float
    analytic_terms: int


@dataclass
class BenchReport:
    """Measured prediction latencies with the analytic cost alongside."""

    dims: Dims
    reps: int
    rows: list[BenchRow]

    CSV_HEADER = "variant,S,batch,ms_per_example,analytic_terms"

    def to_csv(self) -> str:
        lines = [self.CSV_HEADER]
        for r in self.rows:
            lines.append(
                f"{r.variant},{r.S},{r.batch},{r.ms_per_example!r},{r.analytic_terms}"
            )
        return "\n".join(lines) + "\n"

    def to_json_dict(self) -> dict:
        return {
            "dims": {
                "D": self.dims.D, "K": self.dims.K, "R": self.dims.R,
                "H": self.dims.H, "S": self.dims.S,
            },
            "reps": self.reps,
            "rows": [
                {
                    "variant": r.variant,
                    "S": r.S,
                    "batch": r.batch,
                    "ms_per_example": r.ms_per_example,
                    "analytic_terms": r.analytic_terms,
                }
                for r in self.rows
            ],
        }


def _bench_head(variant: str, dims: Dims, g: np.random.Generator) -> Head:
    D, K, R = dims.D, dims.K, dims.R
    if variant == LOGIT_SPACE:
        Q = K
        bucket_map = None
    elif variant == PRE_LOGIT_SPACE:
        Q = D
        bucket_map = None
    else:
        Q = dims.q(HASHED_SPACE)
        bucket_map = hash_bucket_map(K, Q, 0)
    spec = CovarianceSpec(
        variant=variant,
        tail=RANK_ONE,
        J=g.standard_normal((R, Q)) / math.sqrt(R),
        K_het=g.standard_normal((D, Q)) / math.sqrt(D),
        b_het=np.zeros(Q),
        K_diag=np.zeros((D, Q)),
        b_diag=np.full(Q, 0.1),
        bucket_map=bucket_map,
    )
    W = g.standard_normal((D, K)) / math.sqrt(D)
    return Head(W=W, b=np.zeros(K), spec=spec, temperature=Temperature.from_tau(1.0))


def bench_predict(
    dims: Dims,
    S_list,
    batch: int = 8,
    reps: int = 5,
    variants=(LOGIT_SPACE, PRE_LOGIT_SPACE),
    link: str = SOFTMAX,
    seed: int = 0,
) -> BenchReport:
    """Median wall time of mc_predict per (variant, S), in ms per example.

    Two warmup calls precede reps >= 5 timed repetitions; the timing loop
    itself runs in a single worker so measurements do not contend.
    """
    if reps < 5:
        raise ValueError(f"need at least 5 repetitions for a stable median, got {reps}")
    if batch < 1:
        raise ValueError("batch must be positive")
    S_list = [int(S) for S in S_list]
    if any(S < 1 for S in S_list):
        raise ValueError("sample counts must be >= 1")
    g = RngStream(seed, (0,)).generator()
    X = g.standard_normal((batch, dims.D))
    rows = []
    for variant in variants:
        head = _bench_head(variant, dims, g)
        for S in S_list:
            def run():
                return mc_predict(head, X, S, link, RngStream(seed, (1,)))

            run(), run()  # warmup
            samples = []
            for _ in range(reps):
                t0 = time.perf_counter()
                run()
                samples.append(time.perf_counter() - t0)
            med = float(np.median(samples))
            if med < 10e-6:
                warnings.warn(
                    f"median {med * 1e6:.2f}us for {variant}, S={S} is near timer "
                    "resolution; increase batch or dims",
                    stacklevel=2,
                )
            rows.append(
                BenchRow(
                    variant=variant,
                    S=S,
                    batch=batch,
                    ms_per_example=med * 1000.0 / batch,
                    analytic_terms=complexity_terms(variant, replace(dims, S=S)).dominant,
                )
            )
    return BenchReport(dims=dims, reps=reps, rows=rows)
