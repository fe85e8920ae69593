"""Max-shifted log-sum-exp helpers.

The shift is taken over the support of the weights only, so entries with zero
weight never influence the result and a one-hot weight returns the selected
entry exactly.
"""

import numpy as np


def weighted_logsumexp(x, weights, axis=-1):
    """``log sum_i w_i exp(x_i)`` along ``axis``; weights broadcast against ``x``."""
    x = np.asarray(x, dtype=float)
    w = np.broadcast_to(np.asarray(weights, dtype=float), x.shape)
    support = w > 0
    if not np.all(np.any(support, axis=axis)):
        raise ValueError("weights have empty support along the reduction axis")
    shift = np.max(np.where(support, x, -np.inf), axis=axis, keepdims=True)
    with np.errstate(under="ignore"):
        terms = np.where(support, w * np.exp(np.where(support, x - shift, 0.0)), 0.0)
    return np.squeeze(shift, axis=axis) + np.log(np.sum(terms, axis=axis))


def soft_max(q, ref, tau):
    """``tau * log sum_a ref(a) exp(q(a) / tau)`` row-wise for ``(S, A)`` inputs."""
    return tau * weighted_logsumexp(np.asarray(q, dtype=float) / tau, ref, axis=-1)


def softmax_weights(q, ref, tau):
    """Rows proportional to ``ref * exp(q / tau)``, shifted by the max over ref's support."""
    q = np.asarray(q, dtype=float)
    ref = np.asarray(ref, dtype=float)
    support = ref > 0
    if not np.all(np.any(support, axis=-1)):
        rows = np.flatnonzero(~np.any(support, axis=-1))
        raise ValueError(f"reference policy has empty support at states {rows[:5].tolist()}")
    shift = np.max(np.where(support, q, -np.inf), axis=-1, keepdims=True)
    with np.errstate(under="ignore"):
        un = np.where(support, ref * np.exp(np.where(support, (q - shift) / tau, 0.0)), 0.0)
    return un / un.sum(axis=-1, keepdims=True)
