"""Exact nearest-neighbour search by blocked brute force."""
from __future__ import annotations

import numpy as np

DEFAULT_BLOCK = 2048


def nearest_neighbors(queries: np.ndarray, bank: np.ndarray, block: int = DEFAULT_BLOCK):
    """Return ``(distances, ids)`` of each query row's nearest bank row.

    Candidates are ranked with the expanded form ``|q|^2 + |b|^2 - 2 q.b``
    one block of queries at a time; the winning distance is then recomputed
    from the explicit difference so identical vectors score exactly 0.
    Ties go to the lowest bank index.
    """
    q = np.asarray(queries, dtype=np.float64)
    b = np.asarray(bank, dtype=np.float64)
    if q.ndim != 2 or b.ndim != 2:
        raise ValueError("queries and bank must be 2-D")
    if q.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: queries have {q.shape[1]} columns, bank has {b.shape[1]}")
    if len(b) == 0:
        raise ValueError("empty bank")

    ids = np.empty(len(q), dtype=np.int64)
    b_sq = np.einsum("ij,ij->i", b, b)
    for start in range(0, len(q), block):
        qb = q[start:start + block]
        d2 = b_sq[None, :] - 2.0 * (qb @ b.T)
        ids[start:start + block] = np.argmin(d2, axis=1)
    diff = q - b[ids]
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    return dist, ids
