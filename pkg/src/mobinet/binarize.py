"""Binarization math: sign, optimal per-filter scales, straight-through
gradients, and the full latent-weight gradient rule.

Conventions fixed here and relied on everywhere else:

  * sign(0) = +1 (the >= 0 branch maps to +1);
  * the straight-through estimator is the clipped identity: derivative 1
    on |x| <= STE_THRESHOLD, 0 outside (boundary inclusive);
  * the optimal scale for a filter w of p elements is mean(|w|), which
    minimizes ||w - alpha * sign(w)||^2 over all (+-1 pattern, alpha > 0).
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateFilterError, DimensionError, InvariantError

# Clipped-identity STE window; a config constant, not a law of nature.
STE_THRESHOLD = 1.0


def sign_binarize(a):
    """Map reals to +-1: +1 where a >= 0, -1 otherwise.

    Works elementwise on arrays; returns float64 +-1. NaNs are rejected
    (they have no meaningful sign under the >= 0 rule).
    """
    arr = np.asarray(a, dtype=np.float64)
    if np.any(np.isnan(arr)):
        raise InvariantError("sign_binarize: NaN input")
    out = np.where(arr >= 0.0, 1.0, -1.0)
    return out if arr.ndim else float(out)


def ste_grad(x, threshold: float = STE_THRESHOLD):
    """Straight-through derivative of sign: 1 if |x| <= threshold else 0."""
    if threshold <= 0:
        raise InvariantError("STE threshold must be positive")
    arr = np.asarray(x, dtype=np.float64)
    out = (np.abs(arr) <= threshold).astype(np.float64)
    return out if arr.ndim else float(out)


def optimal_scale(w) -> float:
    """Optimal scale alpha = mean(|w|) for a single filter.

    Raises DegenerateFilterError for the all-zero filter, whose optimum
    alpha = 0 violates the alpha > 0 constraint.
    """
    arr = np.asarray(w, dtype=np.float64).ravel()
    if arr.size < 1:
        raise DimensionError("filter must have at least one element")
    alpha = float(np.mean(np.abs(arr)))
    if alpha == 0.0:
        raise DegenerateFilterError("all-zero filter: optimal scale would be 0")
    return alpha


def optimal_scales(w: np.ndarray) -> np.ndarray:
    """Per-filter scales for a (filters, p) matrix; rejects any zero row."""
    mat = np.asarray(w, dtype=np.float64).reshape(w.shape[0], -1)
    alphas = np.mean(np.abs(mat), axis=1)
    if np.any(alphas == 0.0):
        raise DegenerateFilterError("all-zero filter: optimal scale would be 0")
    return alphas


def binarize_filter(w):
    """Return (sign(w), mean|w|), the minimizer of ||w - alpha*w_b||^2."""
    arr = np.asarray(w, dtype=np.float64)
    alpha = optimal_scale(arr)
    return sign_binarize(arr), alpha


def weight_gradient(w, grad_approx, ste_threshold: float = STE_THRESHOLD, alpha=None):
    """Gradient of the loss w.r.t. latent filter weights.

    Given a filter w (p elements) and the upstream gradient dL/d(w_hat)
    where w_hat = alpha * sign(w):

        dL/dw_j = (1/p) * sign(w_j) * sum_k dL/dw_hat_k * sign(w_k)
                  + dL/dw_hat_j * alpha * ste(w_j)

    Accepts a single filter (p,) or a batch (filters, p); grad_approx must
    match. alpha defaults to mean(|w|) per filter; layers pass their cached
    (f32-quantized) scales so forward and backward see the same alpha.
    Vectorized over filters; linear in grad_approx.
    """
    w = np.asarray(w)
    if w.dtype not in (np.float32, np.float64):
        w = w.astype(np.float64)
    g = np.asarray(grad_approx, dtype=w.dtype)
    if w.shape != g.shape:
        raise DimensionError(f"filter/grad shape mismatch: {w.shape} vs {g.shape}")
    single = w.ndim == 1
    if single:
        w, g = w[None, :], g[None, :]
    p = w.shape[1]
    one = w.dtype.type(1.0)
    w_b = np.where(w >= 0.0, one, -one)
    if alpha is None:
        alpha = np.mean(np.abs(w), axis=1, keepdims=True)
    else:
        alpha = np.asarray(alpha, dtype=w.dtype).reshape(w.shape[0], 1)
    scale_term = np.sum(g * w_b, axis=1, keepdims=True) / p * w_b
    ste_term = g * alpha * (np.abs(w) <= ste_threshold)
    out = scale_term + ste_term
    return out[0] if single else out
