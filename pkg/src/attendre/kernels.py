"""Dense numeric kernels: similarity, masked softmax, top-k and weighted sums.

Everything here is a pure function over float64 numpy arrays.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, EmptyInput


def _as_matrix(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-d, got shape {arr.shape}")
    return arr


def dot_similarity(queries, keys, scale: bool = False) -> np.ndarray:
    """Pairwise dot products, ``out[i, j] = queries[i] . keys[j]``.

    With ``scale=True`` the result is divided by ``sqrt(d)``.
    """
    q = _as_matrix(queries, "queries")
    k = _as_matrix(keys, "keys")
    if q.shape[1] != k.shape[1] or q.shape[1] < 1:
        raise DimensionError(
            f"inner dimensions differ: queries {q.shape} vs keys {k.shape}"
        )
    out = q @ k.T
    if scale:
        out = out / np.sqrt(q.shape[1])
    return out


def masked_softmax(scores, mask) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise softmax restricted to ``mask``.

    Works on arrays of any rank; normalization is over the last axis.
    Returns ``(weights, all_masked)`` where ``all_masked`` flags rows with no
    allowed entry. Such rows come back as all zeros instead of NaN.
    """
    s = np.asarray(scores, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if s.shape != m.shape:
        raise DimensionError(f"scores {s.shape} and mask {m.shape} differ")
    all_masked = ~m.any(axis=-1)
    if s.size == 0:
        return np.zeros_like(s), all_masked
    shifted = np.where(m, s, -np.inf)
    row_max = shifted.max(axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.where(m, np.exp(np.where(m, s, 0.0) - row_max), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    denom = np.where(denom > 0, denom, 1.0)
    return e / denom, all_masked


def top_k(row, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices and values of the ``min(k, len(row))`` largest entries.

    Sorted descending; ties go to the smaller index.
    """
    x = np.asarray(row, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError(f"top_k expects a 1-d row, got shape {x.shape}")
    if x.size == 0:
        raise EmptyInput("top_k of an empty row")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    order = np.argsort(-x, kind="stable")[: min(k, x.size)]
    return order, x[order]


def top_k_rows(scores, k: int) -> np.ndarray:
    """Row-wise :func:`top_k` indices for a 2-d score matrix."""
    s = _as_matrix(scores, "scores")
    if s.shape[1] == 0:
        raise EmptyInput("top_k over zero columns")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    return np.argsort(-s, axis=1, kind="stable")[:, : min(k, s.shape[1])]


def weighted_value_sum(weights, values) -> np.ndarray:
    """``out[s] = sum_r weights[s, r] * values[s, r]``.

    ``weights`` is ``(Q, R)`` and ``values`` is ``(Q, R, d)``: every query has
    its own list of retrieved values.
    """
    w = _as_matrix(weights, "weights")
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 3 or v.shape[:2] != w.shape:
        raise DimensionError(f"weights {w.shape} incompatible with values {v.shape}")
    return np.einsum("qr,qrd->qd", w, v)
