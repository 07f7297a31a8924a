"""Dense float64 matrix helpers, seeded random streams and nonlinearities.

Every stochastic routine in the package takes an explicit :class:`RngStream`;
nothing touches numpy's global generator.
"""
from __future__ import annotations

import hashlib
from typing import Sequence

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    """Operands have non-conforming shapes."""


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Return ``x`` as a finite 2-D float64 array (1-D input becomes one row)."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains NaN or Inf")
    return a


def as_vector(x, name: str = "vector") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 1:
        raise ShapeError(f"{name} must be 1-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains NaN or Inf")
    return a


def matmul(a, b) -> np.ndarray:
    a, b = as_matrix(a, "left operand"), as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def add(a, b) -> np.ndarray:
    """Elementwise sum; shapes must match exactly (no broadcasting)."""
    a, b = as_matrix(a, "left operand"), as_matrix(b, "right operand")
    if a.shape != b.shape:
        raise ShapeError(f"cannot add {a.shape} and {b.shape}")
    return a + b


def add_row(a, row) -> np.ndarray:
    """Add a bias vector to every row of ``a``."""
    a, row = as_matrix(a), as_vector(row, "row")
    if a.shape[1] != row.shape[0]:
        raise ShapeError(f"row of length {row.shape[0]} does not fit {a.shape}")
    return a + row


def transpose(a) -> np.ndarray:
    return np.ascontiguousarray(as_matrix(a).T)


def row_sum(a) -> np.ndarray:
    return as_matrix(a).sum(axis=1)


def row_mean(a) -> np.ndarray:
    return as_matrix(a).mean(axis=1)


_TINY = np.finfo(np.float64).tiny
_ONE_MINUS = np.nextafter(1.0, 0.0)


def sigmoid(x):
    """Logistic function, overflow-free for any finite input."""
    # clipped so log(g) and log(1 - g) stay finite downstream
    out = np.clip(expit(np.asarray(x, dtype=np.float64)), _TINY, _ONE_MINUS)
    if out.ndim == 0:
        return float(out)
    return out


def softplus(x):
    """log(1 + e^x) computed without overflow."""
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


class RngStream:
    """Seeded PCG64 stream with deterministic, keyed sub-streams.

    ``RngStream(7).child("rbm", 2)`` always yields the same sequence, independent
    of how much the parent stream has been consumed.
    """

    def __init__(self, seed: int, key: Sequence[int] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.key = tuple(int(k) for k in key)
        self._ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self.generator = np.random.Generator(np.random.PCG64(self._ss))

    def child(self, *names) -> "RngStream":
        key = list(self.key)
        for n in names:
            if isinstance(n, str):
                # stable across processes, unlike hash()
                digest = hashlib.blake2b(n.encode("utf-8"), digest_size=8).digest()
                key.append(int.from_bytes(digest, "little"))
            else:
                key.append(int(n))
        return RngStream(self.seed, key)

    def uniform(self, size=None) -> np.ndarray:
        return self.generator.random(size)

    def normal(self, size=None, scale: float = 1.0) -> np.ndarray:
        return self.generator.normal(0.0, scale, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, key={self.key})"


def bernoulli_sample(p, rng: RngStream) -> np.ndarray:
    """Draw 0/1 entries with per-entry success probability ``p``."""
    p = np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(p)) or np.any(p < 0.0) or np.any(p > 1.0):
        raise ValueError("probabilities must lie in [0, 1]")
    return (rng.uniform(p.shape) < p).astype(np.float64)
