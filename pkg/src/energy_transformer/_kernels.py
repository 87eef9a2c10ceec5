"""Shared numpy kernels.

Both the analytic inference path (`core`) and the recorded training path
(`autodiff` primitives) call these functions, so the two routes perform
bit-identical floating-point arithmetic.
"""

from __future__ import annotations

import numpy as np

Array = np.ndarray


def mean_subtract(x: Array) -> Array:
    """Subtract the mean of the last axis from each row."""
    return x - x.mean(axis=-1, keepdims=True)


def rsqrt_normalize(u: Array, epsilon: float) -> Array:
    """Divide each row by sqrt(mean of squares + epsilon).

    Composed after `mean_subtract` this is the unscaled layer norm.
    """
    s = np.sqrt((u * u).mean(axis=-1, keepdims=True) + epsilon)
    return u / s


def masked_logsumexp(scores: Array, mask: Array | None) -> Array:
    """Stable log-sum-exp over the last axis, restricted to `mask`.

    `mask` is a boolean array broadcastable to `scores`; None means all
    entries participate.  Rows whose mask is empty must be rejected by the
    caller: they would produce log(0).
    """
    if mask is not None:
        z = np.where(mask, scores, -np.inf)
    else:
        z = scores
    m = z.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True)))[..., 0]


def masked_softmax(scores: Array, mask: Array | None) -> Array:
    """Softmax over the last axis restricted to `mask` (None = dense)."""
    if mask is not None:
        z = np.where(mask, scores, -np.inf)
    else:
        z = scores
    w = np.exp(z - z.max(axis=-1, keepdims=True))
    return w / w.sum(axis=-1, keepdims=True)


def stable_sigmoid(x: Array) -> Array:
    """Logistic function computed without overflow in either tail."""
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax_backward(grad: Array, weights: Array) -> Array:
    """Vector-Jacobian product of a (masked) softmax over the last axis."""
    inner = (grad * weights).sum(axis=-1, keepdims=True)
    return weights * (grad - inner)


def rsqrt_normalize_backward(grad: Array, u: Array, epsilon: float) -> Array:
    """Vector-Jacobian product of `rsqrt_normalize` over the last axis."""
    d = u.shape[-1]
    s = np.sqrt((u * u).mean(axis=-1, keepdims=True) + epsilon)
    inner = (grad * u).sum(axis=-1, keepdims=True)
    return grad / s - u * (inner / (d * s**3))
