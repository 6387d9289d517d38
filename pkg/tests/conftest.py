"""Shared builders for the test suite.

Everything here is deterministic given the generator passed in; tests own
their seeds so failures reproduce from the pytest line alone.
"""

import numpy as np

import hetxl as hx


def make_spec(g, variant, tail, D, K, R, H=None, scale=0.5, hash_seed=0):
    """Random CovarianceSpec with entries ~ scale * N(0,1)."""
    if variant == hx.LOGIT_SPACE:
        Q, bucket = K, None
    elif variant == hx.PRE_LOGIT_SPACE:
        Q, bucket = D, None
    elif variant == hx.HASHED_SPACE:
        if H is None:
            raise ValueError("hashed spec needs H")
        Q, bucket = H, hx.hash_bucket_map(K, H, seed=hash_seed)
    else:
        raise ValueError(variant)
    return hx.CovarianceSpec(
        variant=variant,
        tail=tail,
        J=scale * g.standard_normal((R, Q)),
        K_het=scale * g.standard_normal((D, Q)),
        b_het=scale * g.standard_normal(Q),
        K_diag=scale * g.standard_normal((D, Q)),
        b_diag=scale * g.standard_normal(Q),
        bucket_map=bucket,
    )


def make_head(g, variant=hx.PRE_LOGIT_SPACE, tail=hx.RANK_ONE, D=4, K=6, R=2,
              H=None, tau=1.0, scale=0.5, w_scale=1.0):
    spec = make_spec(g, variant, tail, D, K, R, H=H, scale=scale)
    return hx.Head(
        W=w_scale * g.standard_normal((D, K)),
        b=w_scale * g.standard_normal(K),
        spec=spec,
        temperature=hx.Temperature.from_tau(tau),
    )


def zero_spec(variant, tail, D, K, R, H=None, bucket_map=None):
    """All-zero matrices; callers overwrite the pieces they care about."""
    if variant == hx.LOGIT_SPACE:
        Q = K
    elif variant == hx.PRE_LOGIT_SPACE:
        Q = D
    else:
        Q = H
        if bucket_map is None:
            bucket_map = hx.hash_bucket_map(K, H, seed=0)
    return hx.CovarianceSpec(
        variant=variant,
        tail=tail,
        J=np.zeros((R, Q)),
        K_het=np.zeros((D, Q)),
        b_het=np.zeros(Q),
        K_diag=np.zeros((D, Q)),
        b_diag=np.zeros(Q),
        bucket_map=bucket_map,
    )


def one_hot(indices, K):
    return np.eye(K)[np.asarray(indices, dtype=np.int64)]
