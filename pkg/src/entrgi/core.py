"""Softmax, entropy and Jacobian primitives plus a central-difference oracle.

All routines work in float64. Functions that take a probability or logit
vector also accept a 2-D array and then operate row-wise, which is how the
sampler and the guidance loop call them (one row per masked position).

Logarithms are natural. The entropy weight ``H(q) / ln K`` is invariant to
the choice of base, so only consistency matters.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import InvalidInputError, InvalidParameterError, OracleFailureError

__all__ = [
    "softmax_temp",
    "entropy",
    "normalized_entropy",
    "softmax_jacobian",
    "jacobian_vector_product",
    "inverse_cdf_sample",
    "finite_diff_grad",
    "relative_error",
]


def _check_tau(tau):
    if not (np.isfinite(tau) and tau > 0):
        raise InvalidParameterError(f"temperature must be positive and finite, got {tau!r}")


def softmax_temp(logits, tau: float = 1.0) -> np.ndarray:
    """Temperature softmax ``softmax(logits / tau)`` along the last axis."""
    _check_tau(tau)
    x = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("logits contain NaN or Inf")
    z = x / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def entropy(q) -> np.ndarray | float:
    """Shannon entropy in nats along the last axis, with ``0 ln 0 = 0``."""
    q = np.asarray(q, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(q > 0, q * np.log(np.where(q > 0, q, 1.0)), 0.0)
    h = -terms.sum(axis=-1)
    # rounding can push a point mass to -0.0 or a hair below zero
    h = np.maximum(h, 0.0)
    return float(h) if h.ndim == 0 else h


def normalized_entropy(q) -> np.ndarray | float:
    """``H(q) / ln K``, clipped to ``[0, 1]``."""
    q = np.asarray(q, dtype=np.float64)
    k = q.shape[-1]
    if k < 2:
        raise InvalidInputError("normalized entropy needs at least two categories")
    w = np.clip(np.asarray(entropy(q)) / np.log(k), 0.0, 1.0)
    return float(w) if w.ndim == 0 else w


def softmax_jacobian(q, tau: float = 1.0) -> np.ndarray:
    """Jacobian of ``softmax(psi / tau)`` w.r.t. ``psi``: ``(diag(q) - q q^T) / tau``.

    A 2-D ``q`` of shape ``(m, K)`` yields a stack of shape ``(m, K, K)``.
    """
    _check_tau(tau)
    q = np.asarray(q, dtype=np.float64)
    outer = q[..., :, None] * q[..., None, :]
    jac = -outer
    idx = np.arange(q.shape[-1])
    jac[..., idx, idx] += q
    return jac / tau


def jacobian_vector_product(q, v, tau: float = 1.0) -> np.ndarray:
    """Row-vector times softmax Jacobian, ``v @ J_sm(q, tau)``, without forming ``J``.

    Uses ``J`` symmetric: ``v J = (q * v - q (q . v)) / tau``. Row-wise for 2-D input.
    """
    _check_tau(tau)
    q = np.asarray(q, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    qv = np.sum(q * v, axis=-1, keepdims=True)
    return q * (v - qv) / tau


def inverse_cdf_sample(q_rows, u) -> np.ndarray:
    """Categorical draw per row of ``q_rows`` from uniforms ``u`` in ``[0, 1)``.

    Returns the first index whose cumulative mass exceeds ``u * total``, so
    zero-mass categories are never returned.
    """
    q_rows = np.asarray(q_rows, dtype=np.float64)
    cdf = np.cumsum(q_rows, axis=-1)
    target = np.asarray(u, dtype=np.float64) * cdf[..., -1]
    idx = np.sum(cdf <= target[..., None], axis=-1)
    return np.minimum(idx, q_rows.shape[-1] - 1).astype(np.int64)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function.

    ``x`` may have any shape; the result has the same shape. Raises
    :class:`OracleFailureError` carrying the flat coordinate index when ``f``
    returns a non-finite value.
    """
    if not h > 0:
        raise InvalidParameterError(f"step h must be positive, got {h!r}")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleFailureError(f"objective is non-finite at coordinate {i}", index=i)
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def relative_error(actual, expected, floor: float = 1e-12) -> float:
    """Norm-wise relative error ``||a - b|| / max(||b||, floor)``."""
    a = np.asarray(actual, dtype=np.float64)
    b = np.asarray(expected, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), floor))
