"""Loss, analytic gradients, SGD training and temperature tuning.

Gradients are derived by hand (pathwise through the noise
reparametrization, so the standard normal draws act as common random
numbers); the contract is agreement with central finite differences,
which the test suite enforces for every trainable tensor across all
variant / tail / link / estimator combinations.  All arithmetic is
float64 and single-threaded with numpy's fixed reduction order, so runs
are bit-reproducible for a given seed.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .covariance import (
    DIAGONAL,
    HASHED_SPACE,
    LOGIT_SPACE,
    PRE_LOGIT_SPACE,
    RANK_ONE,
    TAILS,
    CovarianceSpec,
    bucket_matrix,
    hash_bucket_map,
    softplus,
)
from .errors import NumericError, TrainingDiverged
from .meanfield import DEFAULT_LAMBDA, mf_predict
from .sampling import (
    LINKS,
    SIGMOID,
    SOFTMAX,
    Head,
    PredictiveBatch,
    RngStream,
    _generator,
    _link_probs,
    deterministic_predict,
    mc_predict,
)
from .temperature import Temperature, temperature_value

DETERMINISTIC = "det"
MC = "mc"
MEAN_FIELD = "mean_field"
ESTIMATORS = (MC, MEAN_FIELD)

# Grid used for fixed-temperature search.
DEFAULT_TAU_GRID = (0.05, 0.1, 0.2, 0.4, 0.8, 1.5, 3.0, 5.0)

_CLAMP = 1e-12

# Stream indices carved out of the run stream.
_STREAM_INIT = 0
_STREAM_BATCH = 1
_STREAM_NOISE = 2
_STREAM_EVAL = 9


@dataclass
class TrainConfig:
    """Configuration of a single training run."""

    steps: int = 1000
    batch_size: int = 128
    learning_rate: float = 0.1
    momentum: float = 0.9
    lr_schedule: str = "constant"  # "constant" | "cosine"
    estimator: str = MEAN_FIELD
    s_train: int = 1000
    s_eval: int = 1000
    link: str = SOFTMAX
    seed: int = 0
    variant: str = PRE_LOGIT_SPACE  # a covariance variant or "det"
    tail: str = RANK_ONE
    rank: int = 4
    buckets: int | None = None
    tau_mode: str = "learned"  # "learned" | "fixed"
    tau: float = 1.0
    tau_min: float = 0.05
    tau_max: float = 5.0
    tau_grid: tuple[float, ...] = DEFAULT_TAU_GRID
    val_fraction: float = 0.2
    lam_mf: float = DEFAULT_LAMBDA
    init_noise_scale: float = 0.1

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}")
        if self.s_train < 1 or self.s_eval < 1:
            raise ValueError("sample counts must be positive")
        if self.link not in LINKS:
            raise ValueError(f"link must be one of {LINKS}")
        if self.variant not in (DETERMINISTIC, LOGIT_SPACE, PRE_LOGIT_SPACE, HASHED_SPACE):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.tail not in TAILS:
            raise ValueError(f"tail must be one of {TAILS}")
        if self.rank < 1:
            raise ValueError("rank must be >= 1; a noise-free head is variant 'det'")
        if self.variant == HASHED_SPACE and (self.buckets is None or self.buckets < 1):
            raise ValueError("hashed variant requires a positive bucket count")
        if self.tau_mode not in ("learned", "fixed", "grid"):
            raise ValueError(f"unknown tau_mode {self.tau_mode!r}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if len(self.tau_grid) == 0:
            raise ValueError("tau_grid must be non-empty")


@dataclass
class MetricsTrace:
    """Per-step training metrics; all arrays share the step count."""

    step: np.ndarray
    nll: np.ndarray
    prec_at_1: np.ndarray
    tau: np.ndarray
    ms: np.ndarray

    CSV_HEADER = "step,nll,prec_at_1,tau,ms"

    def __len__(self) -> int:
        return len(self.step)

    def to_csv(self) -> str:
        lines = [self.CSV_HEADER]
        for i in range(len(self)):
            lines.append(
                f"{int(self.step[i])},{float(self.nll[i])!r},"
                f"{float(self.prec_at_1[i])!r},{float(self.tau[i])!r},"
                f"{float(self.ms[i])!r}"
            )
        return "\n".join(lines) + "\n"


@dataclass
class NoiseDraws:
    """Standard normal draws for a batch: Z is (N, S, R), z matches the tail."""

    Z: np.ndarray
    z: np.ndarray


def make_draws(spec: CovarianceSpec, n_examples: int, S: int, rng) -> NoiseDraws:
    g = _generator(rng)
    Z = g.standard_normal((n_examples, S, spec.R))
    if spec.tail == RANK_ONE:
        z = g.standard_normal((n_examples, S))
    else:
        z = g.standard_normal((n_examples, S, spec.Q))
    return NoiseDraws(Z=Z, z=z)


@dataclass
class _LossContext:
    variant: str | None
    tail: str | None
    link: str
    estimator: str
    lam: float
    bucket_map: np.ndarray | None = None
    bucket_mat: np.ndarray | None = None


def _context_for(head: Head, config: TrainConfig) -> _LossContext:
    spec = head.spec
    if spec is None:
        return _LossContext(None, None, config.link, config.estimator, config.lam_mf)
    bucket_map = bucket_mat = None
    if spec.variant == HASHED_SPACE:
        bucket_map = spec.bucket_map
        bucket_mat = bucket_matrix(bucket_map, spec.Q)
    return _LossContext(
        spec.variant, spec.tail, config.link, config.estimator, config.lam_mf,
        bucket_map, bucket_mat,
    )


def _params_from_head(head: Head) -> dict[str, np.ndarray]:
    params = {"W": head.W, "b": head.b}
    if head.spec is not None:
        s = head.spec
        params.update(
            J=s.J, K_het=s.K_het, b_het=s.b_het, K_diag=s.K_diag, b_diag=s.b_diag
        )
    return params


def _head_from_params(
    params: dict[str, np.ndarray],
    ctx: _LossContext,
    temp: Temperature,
) -> Head:
    spec = None
    if ctx.variant is not None:
        spec = CovarianceSpec(
            variant=ctx.variant,
            tail=ctx.tail,
            J=params["J"],
            K_het=params["K_het"],
            b_het=params["b_het"],
            K_diag=params["K_diag"],
            b_diag=params["b_diag"],
            bucket_map=ctx.bucket_map,
        )
    return Head(W=params["W"], b=params["b"], spec=spec, temperature=temp)


def _link_loss(P: np.ndarray, Y: np.ndarray, link: str) -> tuple[float, np.ndarray]:
    """Mean NLL of probabilities P against 0/1 labels, plus dloss/dP.

    Probabilities are clamped at 1e-12 (both sides for the sigmoid link)
    before the log; the gradient is zero where the clamp is active.
    """
    n = P.shape[0]
    if link == SOFTMAX:
        pc = np.maximum(P, _CLAMP)
        loss = -float((Y * np.log(pc)).sum()) / n
        dP = -(Y / pc) * (P > _CLAMP) / n
    else:
        pc = np.clip(P, _CLAMP, 1.0 - _CLAMP)
        loss = -float((Y * np.log(pc) + (1.0 - Y) * np.log1p(-pc)).sum()) / n
        inside = (P > _CLAMP) & (P < 1.0 - _CLAMP)
        dP = (-(Y / pc) + (1.0 - Y) / (1.0 - pc)) * inside / n
    return loss, dP


def _link_backward(P: np.ndarray, dP: np.ndarray, link: str) -> np.ndarray:
    """Backprop dloss/dP through the link to the scaled logits."""
    if link == SOFTMAX:
        inner = (dP * P).sum(axis=-1, keepdims=True)
        return P * (dP - inner)
    return dP * P * (1.0 - P)


def _evaluate(
    params: dict[str, np.ndarray],
    ctx: _LossContext,
    X: np.ndarray,
    Y: np.ndarray,
    tau: float,
    draws: NoiseDraws | None = None,
    want_grad: bool = True,
):
    """Batch loss, probabilities, parameter gradients and dloss/dtau.

    The temperature enters only through logits / tau, so its partial is
    available for any mode; parameter gradients are skipped when
    want_grad is False.
    """
    N = X.shape[0]
    W, b = params["W"], params["b"]

    if ctx.variant is None:
        m = X @ W + b
        U = m / tau
        P = _link_probs(U, ctx.link)
        loss, dP = _link_loss(P, Y, ctx.link)
        dU = _link_backward(P, dP, ctx.link)
        tau_partial = -float((dU * U).sum()) / tau
        if not want_grad:
            return loss, P, None, tau_partial
        dm = dU / tau
        return loss, P, {"W": X.T @ dm, "b": dm.sum(axis=0)}, tau_partial

    J, K_het, b_het = params["J"], params["K_het"], params["b_het"]
    K_diag, b_diag = params["K_diag"], params["b_diag"]
    diag_tail = ctx.tail == DIAGONAL

    v = X @ K_het + b_het
    araw = X @ K_diag + b_diag
    d = softplus(araw) if diag_tail else araw
    m = X @ W + b

    if ctx.estimator == MC:
        if draws is None:
            raise ValueError("the MC estimator requires noise draws")
        Z, zd = draws.Z, draws.z
        if Z.shape[0] != N:
            raise ValueError(f"draws cover {Z.shape[0]} examples, batch has {N}")
        S = Z.shape[1]
        Vn = v[:, None, :] * J[None, :, :]                      # (N, R, Q)
        F = np.einsum("nsr,nrq->nsq", Z, Vn, optimize=True)
        if diag_tail:
            sd = np.sqrt(d)
            eps = F + zd * sd[:, None, :]
        else:
            eps = F + zd[:, :, None] * d[:, None, :]
        if ctx.variant == LOGIT_SPACE:
            L = m[:, None, :] + eps
        elif ctx.variant == PRE_LOGIT_SPACE:
            L = m[:, None, :] + np.einsum("nsq,qk->nsk", eps, W, optimize=True)
        else:
            L = m[:, None, :] + eps[:, :, ctx.bucket_map]
        U = L / tau
        P = _link_probs(U, ctx.link)
        Pbar = P.mean(axis=1)
        loss, dPbar = _link_loss(Pbar, Y, ctx.link)
        dU = _link_backward(P, dPbar[:, None, :] / S, ctx.link)
        tau_partial = -float((dU * U).sum()) / tau
        if not want_grad:
            return loss, Pbar, None, tau_partial
        dL = dU / tau
        dm = dL.sum(axis=1)
        gW = X.T @ dm
        gb = dm.sum(axis=0)
        if ctx.variant == LOGIT_SPACE:
            deps = dL
        elif ctx.variant == PRE_LOGIT_SPACE:
            deps = np.einsum("nsk,qk->nsq", dL, W, optimize=True)
            gW += np.einsum("nsq,nsk->qk", eps, dL, optimize=True)
        else:
            deps = dL @ ctx.bucket_mat.T
        dVn = np.einsum("nsr,nsq->nrq", Z, deps, optimize=True)
        dv = np.einsum("nrq,rq->nq", dVn, J)
        gJ = np.einsum("nrq,nq->rq", dVn, v)
        if diag_tail:
            dsd = (deps * zd).sum(axis=1)
            dd = dsd * 0.5 / sd
        else:
            dd = (deps * zd[:, :, None]).sum(axis=1)
        probs_out = Pbar
    else:
        if ctx.variant == PRE_LOGIT_SPACE:
            T = v[:, None, :] * J[None, :, :]                   # (N, R, Q)
            G = T @ W                                           # (N, R, K)
            s2 = np.einsum("nrk,nrk->nk", G, G)
            if diag_tail:
                W2 = W * W
                s2 = s2 + d @ W2
            else:
                e = d @ W
                s2 = s2 + e * e
        else:
            colJ2 = np.einsum("rq,rq->q", J, J)
            bv = v * v * colJ2[None, :] + (d if diag_tail else d * d)
            s2 = bv if ctx.variant == LOGIT_SPACE else bv[:, ctx.bucket_map]
        den = np.sqrt(tau * tau + ctx.lam * s2)
        eta = m / den
        P = _link_probs(eta, ctx.link)
        loss, dP = _link_loss(P, Y, ctx.link)
        deta = _link_backward(P, dP, ctx.link)
        den3 = den * den * den
        tau_partial = -tau * float((deta * m / den3).sum())
        if not want_grad:
            return loss, P, None, tau_partial
        dm = deta / den
        ds2 = -0.5 * ctx.lam * deta * m / den3
        gW = X.T @ dm
        gb = dm.sum(axis=0)
        if ctx.variant == PRE_LOGIT_SPACE:
            dG = 2.0 * G * ds2[:, None, :]
            gW += np.einsum("nrq,nrk->qk", T, dG, optimize=True)
            dT = np.einsum("nrk,qk->nrq", dG, W, optimize=True)
            dv = np.einsum("nrq,rq->nq", dT, J)
            gJ = np.einsum("nrq,nq->rq", dT, v)
            if diag_tail:
                dd = ds2 @ W2.T
                gW += 2.0 * W * np.einsum("nq,nk->qk", d, ds2, optimize=True)
            else:
                de = 2.0 * e * ds2
                dd = de @ W.T
                gW += np.einsum("nq,nk->qk", d, de, optimize=True)
        else:
            dbv = ds2 if ctx.variant == LOGIT_SPACE else ds2 @ ctx.bucket_mat.T
            dv = 2.0 * v * colJ2[None, :] * dbv
            gJ = 2.0 * J * np.einsum("nq,nq->q", v * v, dbv)[None, :]
            dd = 2.0 * d * dbv if not diag_tail else dbv
        probs_out = P

    daraw = dd * expit(araw) if diag_tail else dd
    grads = {
        "W": gW,
        "b": gb,
        "J": gJ,
        "K_het": X.T @ dv,
        "b_het": dv.sum(axis=0),
        "K_diag": X.T @ daraw,
        "b_diag": daraw.sum(axis=0),
    }
    return loss, probs_out, grads, tau_partial


def _prepare(head: Head, batch, config: TrainConfig, rng: RngStream):
    X, Y = batch
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    ctx = _context_for(head, config)
    draws = None
    if ctx.variant is not None and config.estimator == MC:
        draws = make_draws(head.spec, X.shape[0], config.s_train, rng)
    return ctx, X, Y, draws


def batch_loss(head: Head, batch, config: TrainConfig, rng: RngStream) -> float:
    """Loss of a batch under the config's estimator.

    The noise draws are a deterministic function of rng, so evaluating
    two perturbed heads with the same rng uses common random numbers;
    this is the loss the finite-difference oracle probes.
    """
    ctx, X, Y, draws = _prepare(head, batch, config, rng)
    tau = head.temperature.value()
    loss, _, _, _ = _evaluate(
        _params_from_head(head), ctx, X, Y, tau, draws, want_grad=False
    )
    return loss


def loss_and_grad(head: Head, batch, config: TrainConfig, rng: RngStream):
    """Batch loss and analytic gradients for every trainable tensor.

    The returned dict covers W, b, the covariance tensors when present,
    and the scalar "t" (temperature parameter, chained through
    dtau/dt).
    """
    ctx, X, Y, draws = _prepare(head, batch, config, rng)
    tau = head.temperature.value()
    loss, _, grads, tau_partial = _evaluate(
        _params_from_head(head), ctx, X, Y, tau, draws, want_grad=True
    )
    grads["t"] = tau_partial * head.temperature.grad_t()
    return loss, grads


def simple_tau_grad(head: Head, batch, config: TrainConfig, rng: RngStream) -> float:
    """dloss/dtau of the batch at the head's parameters.

    This is the bilevel gradient with the solution-map sensitivity set to
    zero: the exact partial derivative of the loss in tau with the model
    parameters held fixed.
    """
    ctx, X, Y, draws = _prepare(head, batch, config, rng)
    tau = head.temperature.value()
    _, _, _, tau_partial = _evaluate(
        _params_from_head(head), ctx, X, Y, tau, draws, want_grad=False
    )
    return tau_partial


def solution_map_tau_sensitivity(theta_grad, tau: float, s_t: float, h: float | None = None):
    """One-gradient-step model of d theta*/d tau.

    theta_grad(tau) must return the parameter gradient of the training
    loss at fixed theta, either as an array or as a dict of arrays.  The
    solution map after a single SGD step is theta - s_t * theta_grad(tau),
    so its tau-derivative is -s_t * d/dtau theta_grad, taken here by a
    central difference with step h (default 1e-4 * tau).  The callable is
    evaluated exactly twice; it must use common random numbers.
    """
    if h is None:
        h = 1e-4 * tau
    gp = theta_grad(tau + h)
    gm = theta_grad(tau - h)
    if isinstance(gp, dict):
        return {k: -s_t * (gp[k] - gm[k]) / (2.0 * h) for k in gp}
    return -s_t * (np.asarray(gp, dtype=np.float64) - np.asarray(gm, dtype=np.float64)) / (2.0 * h)


def luketina_tau_grad(
    head: Head,
    batch_train,
    batch_val,
    s_t: float,
    config: TrainConfig,
    rng: RngStream,
) -> float:
    """Bilevel temperature gradient with a one-step solution-map model.

    Combines the direct validation partial with the inner product of the
    validation parameter gradients and solution_map_tau_sensitivity of
    the training loss:

        d/dtau F_val = dF_val/dtau + <dF_val/dtheta, d theta*/d tau>.

    Validation draws come from rng.child(0) and training draws from
    rng.child(1); s_t = 0 therefore reduces to simple_tau_grad on the
    validation batch with rng.child(0).
    """
    tau = head.temperature.value()
    params = _params_from_head(head)
    ctx_v, Xv, Yv, draws_v = _prepare(head, batch_val, config, rng.child(0))
    _, _, gval, direct = _evaluate(params, ctx_v, Xv, Yv, tau, draws_v, want_grad=True)
    if s_t == 0.0:
        return direct

    ctx_t, Xt, Yt, draws_t = _prepare(head, batch_train, config, rng.child(1))

    def theta_grad(t: float):
        _, _, g, _ = _evaluate(params, ctx_t, Xt, Yt, t, draws_t, want_grad=True)
        return g

    dtheta = solution_map_tau_sensitivity(theta_grad, tau, s_t)
    total = direct
    for k, gv in gval.items():
        total += float((gv * dtheta[k]).sum())
    return total


def nll(probs, labels, link: str | None = None) -> float:
    """Mean negative log likelihood of 0/1 labels under the probabilities.

    probs may be a PredictiveBatch (its link is used) or a raw array with
    an explicit link.  Softmax labels must be one-hot rows; sigmoid labels
    are arbitrary multi-hot rows summed per class.
    """
    if isinstance(probs, PredictiveBatch):
        link = probs.link
        P = probs.probs
    else:
        if link is None:
            raise ValueError("raw probability arrays need an explicit link")
        P = np.asarray(probs, dtype=np.float64)
    if link not in LINKS:
        raise ValueError(f"link must be one of {LINKS}, got {link!r}")
    Y = np.asarray(labels, dtype=np.float64)
    if Y.shape != P.shape:
        raise ValueError(f"labels shape {Y.shape} does not match probs {P.shape}")
    if not np.all((Y == 0.0) | (Y == 1.0)):
        raise ValueError("labels must be 0/1")
    if not np.all(np.isfinite(P)):
        raise NumericError("probabilities contain non-finite values")
    if link == SOFTMAX:
        rows = Y.sum(axis=1)
        if not np.all(rows == 1.0):
            raise ValueError("softmax labels must be one-hot")
        picked = np.maximum((Y * P).sum(axis=1), _CLAMP)
        return -float(np.log(picked).mean())
    pc = np.clip(P, _CLAMP, 1.0 - _CLAMP)
    per_row = -(Y * np.log(pc) + (1.0 - Y) * np.log1p(-pc)).sum(axis=1)
    return float(per_row.mean())


def precision_at_1(probs, labels) -> float:
    """Fraction of rows whose highest-probability class is a true label.

    Ties resolve to the lowest class index.
    """
    P = probs.probs if isinstance(probs, PredictiveBatch) else np.asarray(probs)
    Y = np.asarray(labels)
    if Y.shape != P.shape:
        raise ValueError(f"labels shape {Y.shape} does not match probs {P.shape}")
    top = P.argmax(axis=1)
    return float((Y[np.arange(P.shape[0]), top] > 0).mean())


def predict(
    head: Head,
    phi_batch,
    config: TrainConfig,
    rng: RngStream | None = None,
    threads: int = 1,
) -> PredictiveBatch:
    """Predictive probabilities under the config's estimator."""
    if head.spec is None:
        return deterministic_predict(head, phi_batch, config.link)
    if config.estimator == MC:
        rng = rng if rng is not None else RngStream(config.seed, (_STREAM_EVAL,))
        return mc_predict(head, phi_batch, config.s_eval, config.link, rng, threads)
    return mf_predict(head, phi_batch, config.link, lam=config.lam_mf)


def _softplus_inv(y: float) -> float:
    return float(np.log(np.expm1(y)))


def init_head(config: TrainConfig, D: int, K: int, rng: RngStream) -> Head:
    """Fresh head with small noise parameters and mid-bounds temperature."""
    g = rng.generator()
    W = g.standard_normal((D, K)) / math.sqrt(D)
    b = np.zeros(K)
    if config.tau_mode == "fixed":
        temp = Temperature.from_tau(config.tau, config.tau_min, config.tau_max)
    else:
        temp = Temperature(0.0, config.tau_min, config.tau_max)
    if config.variant == DETERMINISTIC:
        return Head(W=W, b=b, spec=None, temperature=temp)
    if config.variant == LOGIT_SPACE:
        Q = K
    elif config.variant == PRE_LOGIT_SPACE:
        Q = D
    else:
        Q = int(config.buckets)
    scale = config.init_noise_scale
    bucket_map = None
    if config.variant == HASHED_SPACE:
        bucket_map = hash_bucket_map(K, Q, config.seed)
    spec = CovarianceSpec(
        variant=config.variant,
        tail=config.tail,
        J=scale * g.standard_normal((config.rank, Q)) / math.sqrt(config.rank),
        K_het=np.zeros((D, Q)),
        b_het=np.ones(Q),
        K_diag=np.zeros((D, Q)),
        b_diag=np.full(Q, _softplus_inv(scale * 0.1) if config.tail == DIAGONAL else scale * 0.1),
        bucket_map=bucket_map,
    )
    return Head(W=W, b=b, spec=spec, temperature=temp)


def _lr_at(config: TrainConfig, step: int) -> float:
    if config.lr_schedule == "cosine":
        frac = step / max(1, config.steps)
        return config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * frac))
    return config.learning_rate


def _dataset_arrays(dataset):
    if isinstance(dataset, tuple):
        X, Y = dataset
    else:
        X, Y = dataset.X, dataset.y
    return np.asarray(X, dtype=np.float64), np.asarray(Y, dtype=np.float64)


def train(dataset, config: TrainConfig, rng: RngStream | None = None):
    """SGD-with-momentum training; returns (head, per-step MetricsTrace).

    Deterministic given (dataset, config, rng): batches, init and noise
    all come from fixed substreams of rng (default RngStream(config.seed)).
    Non-finite losses raise TrainingDiverged with the step index;
    non-finite gradients raise NumericError naming the tensor.
    """
    if config.tau_mode == "grid":
        raise ValueError("tau_mode 'grid' is handled by grid_search_tau, not train")
    rng = rng if rng is not None else RngStream(config.seed)
    X, Y = _dataset_arrays(dataset)
    N, D = X.shape
    K = Y.shape[1]
    head = init_head(config, D, K, rng.child(_STREAM_INIT))
    ctx = _context_for(head, config)
    params = _params_from_head(head)
    temp = head.temperature
    learn_tau = config.tau_mode == "learned"

    velocity = {k: np.zeros_like(p) for k, p in params.items()}
    vel_t = 0.0
    batch_gen = rng.child(_STREAM_BATCH).generator()
    noise_stream = rng.child(_STREAM_NOISE)

    steps, losses, precs, taus, times = [], [], [], [], []
    for step in range(config.steps):
        t0 = time.perf_counter()
        idx = batch_gen.integers(0, N, size=config.batch_size)
        Xb, Yb = X[idx], Y[idx]
        draws = None
        if ctx.variant is not None and config.estimator == MC:
            draws = make_draws(head.spec, config.batch_size, config.s_train, noise_stream.child(step))
        tau = temperature_value(temp)
        loss, probs, grads, tau_partial = _evaluate(params, ctx, Xb, Yb, tau, draws)
        if not math.isfinite(loss):
            raise TrainingDiverged(step)
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for tensor {name} at step {step}")
        lr = _lr_at(config, step)
        for name in params:
            velocity[name] = config.momentum * velocity[name] + grads[name]
            params[name] = params[name] - lr * velocity[name]
        if learn_tau:
            g_t = tau_partial * temp.grad_t()
            vel_t = config.momentum * vel_t + g_t
            temp = Temperature(temp.t - lr * vel_t, temp.tau_min, temp.tau_max)
        steps.append(step)
        losses.append(loss)
        precs.append(precision_at_1(probs, Yb))
        taus.append(tau)
        times.append((time.perf_counter() - t0) * 1000.0)

    trace = MetricsTrace(
        step=np.asarray(steps, dtype=np.int64),
        nll=np.asarray(losses, dtype=np.float64),
        prec_at_1=np.asarray(precs, dtype=np.float64),
        tau=np.asarray(taus, dtype=np.float64),
        ms=np.asarray(times, dtype=np.float64),
    )
    return _head_from_params(params, ctx, temp), trace


@dataclass(frozen=True)
class GridPoint:
    """Validation metrics of one fixed-temperature training run."""

    tau: float
    val_nll: float
    val_prec_at_1: float


def grid_search_tau(dataset, config: TrainConfig, grid=None):
    """Full training per grid temperature; returns (best tau, grid points).

    The dataset is split train/val by config.val_fraction and config.seed;
    every grid point shares the same split, init stream and batch order,
    so runs differ only through tau.  The best tau minimizes validation
    NLL, ties resolving to the smaller value.
    """
    from .datagen import split

    grid = tuple(config.tau_grid) if grid is None else tuple(grid)
    if len(grid) == 0:
        raise ValueError("tau grid must be non-empty")
    train_ds, val_ds = split(
        dataset, (1.0 - config.val_fraction, config.val_fraction), seed=config.seed
    )
    points = []
    for tau_v in grid:
        cfg = replace(config, tau_mode="fixed", tau=float(tau_v))
        head, _ = train(train_ds, cfg)
        pred = predict(head, val_ds.X, cfg)
        points.append(
            GridPoint(
                tau=float(tau_v),
                val_nll=nll(pred.probs, val_ds.y, cfg.link),
                val_prec_at_1=precision_at_1(pred.probs, val_ds.y),
            )
        )
    best = min(points, key=lambda p: (p.val_nll, p.tau))
    return best, points
