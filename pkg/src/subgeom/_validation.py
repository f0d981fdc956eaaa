"""Input validation helpers."""

from __future__ import annotations

import numpy as np

from .errors import DomainError


def check_rate_matrix(Q, atol=1e-12):
    Q = np.array(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1] or Q.shape[0] == 0:
        raise ValueError(f"rate matrix must be square and non-empty, got shape {Q.shape}")
    if not np.all(np.isfinite(Q)):
        raise ValueError("rate matrix has non-finite entries")
    off = Q - np.diag(np.diag(Q))
    if np.any(off < 0):
        i, j = np.argwhere(off < 0)[0]
        raise ValueError(f"negative off-diagonal rate q({i},{j}) = {Q[i, j]}")
    rows = np.abs(Q.sum(axis=1))
    scale = np.maximum(1.0, np.abs(np.diag(Q)))
    if np.any(rows > atol * scale):
        i = int(np.argmax(rows / scale))
        raise ValueError(f"row {i} of the rate matrix sums to {Q[i].sum()!r}, not 0")
    return Q


def check_vector(f, n, name="f"):
    f = np.asarray(f, dtype=float)
    if f.shape != (n,):
        raise ValueError(f"{name} must have shape ({n},), got {f.shape}")
    if not np.all(np.isfinite(f)):
        raise ValueError(f"{name} has non-finite entries")
    return f


def check_probability_vector(p, n=None, atol=1e-10, name="distribution"):
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or (n is not None and p.shape[0] != n):
        raise ValueError(f"{name} must be a vector of length {n}")
    if np.any(p < -atol) or abs(p.sum() - 1.0) > atol:
        raise ValueError(f"{name} is not a probability vector (sum={p.sum()!r})")
    return p


def check_state(x, n):
    if isinstance(x, (bool, np.bool_)) or int(x) != x or not 0 <= int(x) < n:
        raise DomainError(f"state {x!r} is not in 0..{n - 1}")
    return int(x)


def check_positive(value, name):
    value = float(value)
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value}")
    return value
