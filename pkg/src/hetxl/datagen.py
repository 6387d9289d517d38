"""Synthetic classification data from a known noisy-utility process.

Features are i.i.d. standard normal.  Labels come from the generative
reading of the model: per example, noisy utilities

    u~(x) = W*^T x + b* + image of eps(x),   eps(x) ~ N(0, Sigma*(x))

are formed (the image maps pre-logit or hashed noise into logit space
exactly as prediction does), and the label is the argmax (softmax link,
one-hot, lowest index on ties) or the per-class sign (sigmoid link,
multi-hot).  Adding label_temperature * Gumbel noise before the argmax
draws the label from softmax(u~ / label_temperature) instead, which is
how "data generated at temperature tau*" is produced; i.i.d. Gumbel noise
alone yields labels distributed exactly softmax(u(x)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .covariance import CovarianceSpec, PRE_LOGIT_SPACE, RANK_ONE
from .sampling import (
    SIGMOID,
    SOFTMAX,
    LINKS,
    Head,
    RngStream,
    draw_noise,
    mc_logits,
    mean_logits,
)
from .temperature import Temperature

GAUSSIAN = "gaussian"
GUMBEL = "gumbel"
NONE = "none"
NOISE_KINDS = (GAUSSIAN, GUMBEL, NONE)

# Distinct stream paths for the truth head and the example draws.  Training
# derives its init from child(0) of the same integer seed, so without these
# tags a same-seed run would initialize at a scaled copy of the true weights.
_TRUTH_STREAM = 11
_EXAMPLE_ROOT = 12


@dataclass
class SyntheticSpec:
    """Ground truth and sampling plan for a synthetic dataset."""

    head: Head
    n_examples: int
    noise: str = GAUSSIAN
    seed: int = 0
    label_temperature: float = 0.0
    link: str = SOFTMAX

    def __post_init__(self):
        if self.n_examples < 1:
            raise ValueError("n_examples must be positive")
        if self.noise not in NOISE_KINDS:
            raise ValueError(f"noise must be one of {NOISE_KINDS}, got {self.noise!r}")
        if self.noise == GAUSSIAN and self.head.spec is None:
            raise ValueError("gaussian label noise requires a covariance spec")
        if self.label_temperature < 0.0:
            raise ValueError("label_temperature must be non-negative")
        if self.link not in LINKS:
            raise ValueError(f"link must be one of {LINKS}")


@dataclass
class SyntheticDataset:
    """Feature matrix, 0/1 label matrix and how they were produced."""

    X: np.ndarray
    y: np.ndarray
    provenance: object = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.X.ndim != 2 or self.y.ndim != 2:
            raise ValueError("X and y must be 2-dimensional")
        if self.X.shape[0] != self.y.shape[0]:
            raise ValueError(
                f"X has {self.X.shape[0]} rows but y has {self.y.shape[0]}"
            )

    def __len__(self) -> int:
        return self.X.shape[0]


def _noisy_utilities(
    head: Head, x: np.ndarray, n: int, noise: str, g: np.random.Generator,
    label_temperature: float,
) -> np.ndarray:
    """n rows of noisy utilities at one input, (n, K)."""
    if noise == GAUSSIAN:
        eps = draw_noise(head.spec, x, n, g)
        u = mc_logits(head, x, eps)
    elif noise == GUMBEL:
        u = mean_logits(head, x)[None, :] + g.gumbel(size=(n, head.K))
    else:
        u = np.broadcast_to(mean_logits(head, x), (n, head.K)).copy()
    if label_temperature > 0.0:
        u = u + label_temperature * g.gumbel(size=(n, head.K))
    return u


def sample_label_frequencies(
    head: Head,
    x: np.ndarray,
    n: int,
    noise: str,
    rng: RngStream,
    label_temperature: float = 0.0,
) -> np.ndarray:
    """Empirical class frequencies of n label draws at a fixed input."""
    u = _noisy_utilities(head, x, n, noise, rng.generator(), label_temperature)
    counts = np.bincount(u.argmax(axis=1), minlength=head.K)
    return counts / n


def make_synthetic(spec: SyntheticSpec, rng: RngStream | None = None) -> SyntheticDataset:
    """Draw the dataset; example n uses stream rng.child(n).

    Per-example streams make generation independent of any batching or
    parallel layout and allow extending a dataset without disturbing
    earlier rows.
    """
    rng = rng if rng is not None else RngStream(spec.seed, (_EXAMPLE_ROOT,))
    head = spec.head
    D, K = head.D, head.K
    X = np.empty((spec.n_examples, D), dtype=np.float64)
    Y = np.zeros((spec.n_examples, K), dtype=np.float64)
    for n in range(spec.n_examples):
        stream = rng.child(n)
        g = stream.generator()
        x = g.standard_normal(D)
        X[n] = x
        # Reuse the same generator sequentially for the label draw so one
        # stream fully determines the example.
        u = _noisy_utilities(head, x, 1, spec.noise, g, spec.label_temperature)[0]
        if spec.link == SOFTMAX:
            Y[n, int(u.argmax())] = 1.0
        else:
            Y[n] = (u > 0.0).astype(np.float64)
    return SyntheticDataset(X=X, y=Y, provenance=provenance_dict(spec))


def provenance_dict(spec: SyntheticSpec) -> dict:
    """JSON-plain description of how a dataset was generated."""
    head = spec.head
    out = {
        "kind": "synthetic",
        "n_examples": int(spec.n_examples),
        "noise": spec.noise,
        "seed": int(spec.seed),
        "label_temperature": float(spec.label_temperature),
        "link": spec.link,
        "D": int(head.D),
        "K": int(head.K),
    }
    if head.spec is not None:
        out["variant"] = head.spec.variant
        out["tail"] = head.spec.tail
        out["R"] = int(head.spec.R)
        out["Q"] = int(head.spec.Q)
    if spec.link == SIGMOID:
        # Not part of the multi-class generative story; flag the extension.
        out["label_rule"] = "per-class sign of noisy utility (multi-label extension)"
    return out


def split(dataset, fractions, seed: int = 0):
    """Disjoint random splits covering the dataset, sized by fractions.

    Fractions must be positive and sum to one (tolerance 1e-9).  Sizes are
    the rounded cumulative boundaries, so (0.8, 0.1, 0.1) on 1000 rows
    gives exactly 800/100/100.  A fraction that rounds to an empty split
    is an error.
    """
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.ndim != 1 or fr.size == 0:
        raise ValueError("fractions must be a non-empty sequence")
    if np.any(fr <= 0.0):
        raise ValueError("fractions must be positive")
    if abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fr.sum()}")
    X = dataset.X
    y = dataset.y
    N = X.shape[0]
    perm = np.random.default_rng(np.random.SeedSequence(seed)).permutation(N)
    edges = np.round(np.cumsum(fr) * N).astype(int)
    edges[-1] = N
    parts = np.split(perm, edges[:-1])
    if any(p.size == 0 for p in parts):
        raise ValueError("a fraction rounds to an empty split")
    prov = getattr(dataset, "provenance", None)
    return tuple(
        SyntheticDataset(X=X[p], y=y[p], provenance=prov) for p in parts
    )


def default_truth_head(
    D: int = 16,
    K: int = 40,
    R: int = 4,
    seed: int = 0,
    variant: str = PRE_LOGIT_SPACE,
    tail: str = RANK_ONE,
    utility_scale: float = 3.0,
    noise_scale: float = 1.5,
) -> Head:
    """Ground-truth head with strongly input-dependent noise.

    Utilities have per-class scale utility_scale; the covariance scale
    vector v(x) is zero-mean with standard deviation noise_scale per
    coordinate, so the noise magnitude swings widely across inputs (some
    regions nearly deterministic, others label-noise dominated).
    """
    from .covariance import DIAGONAL, HASHED_SPACE, LOGIT_SPACE, hash_bucket_map

    g = RngStream(seed, (_TRUTH_STREAM,)).generator()
    W = g.standard_normal((D, K)) * (utility_scale / math.sqrt(D))
    b = np.zeros(K)
    if variant == LOGIT_SPACE:
        Q = K
        bucket_map = None
    elif variant == PRE_LOGIT_SPACE:
        Q = D
        bucket_map = None
    elif variant == HASHED_SPACE:
        Q = max(2, K // 4)
        bucket_map = hash_bucket_map(K, Q, seed)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    spec = CovarianceSpec(
        variant=variant,
        tail=tail,
        J=g.standard_normal((R, Q)) / math.sqrt(R),
        K_het=g.standard_normal((D, Q)) * (noise_scale / math.sqrt(D)),
        b_het=np.zeros(Q),
        K_diag=np.zeros((D, Q)),
        b_diag=np.full(Q, 0.1),
        bucket_map=bucket_map,
    )
    return Head(W=W, b=b, spec=spec, temperature=Temperature.from_tau(1.0))


def default_synthetic_spec(
    D: int = 16,
    K: int = 40,
    R: int = 4,
    n_examples: int = 20000,
    seed: int = 0,
    noise: str = GAUSSIAN,
    variant: str = PRE_LOGIT_SPACE,
    tail: str = RANK_ONE,
    label_temperature: float = 0.0,
    link: str = SOFTMAX,
    utility_scale: float = 3.0,
    noise_scale: float = 1.5,
) -> SyntheticSpec:
    """Desk-scale default benchmark: D=16, K=40, R=4, N=20000."""
    head = default_truth_head(
        D=D,
        K=K,
        R=R,
        seed=seed,
        variant=variant,
        tail=tail,
        utility_scale=utility_scale,
        noise_scale=noise_scale,
    )
    return SyntheticSpec(
        head=head,
        n_examples=n_examples,
        noise=noise,
        seed=seed,
        label_temperature=label_temperature,
        link=link,
    )
