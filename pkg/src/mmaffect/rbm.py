"""Bernoulli-Bernoulli restricted Boltzmann machine.

Energy is ``E(v, h) = -v W h - b.v - a.h`` with ``p(v, h) ∝ exp(-E)``. ``W`` is
stored visible-by-hidden, ``b`` are the visible biases and ``a`` the hidden
biases. Training uses CD-k or persistent CD; tiny instances can be scored
exactly by enumerating every joint state.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import logsumexp

from .numeric import RngStream, ShapeError, as_matrix, bernoulli_sample, sigmoid, softplus

MAX_ENUMERATION_UNITS = 20


@dataclass
class RbmParams:
    W: np.ndarray
    b: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        self.W = np.array(self.W, dtype=np.float64, ndmin=2)
        self.b = np.array(self.b, dtype=np.float64).reshape(-1)
        self.a = np.array(self.a, dtype=np.float64).reshape(-1)
        if self.W.shape != (self.b.size, self.a.size):
            raise ShapeError(
                f"W is {self.W.shape} but biases imply {(self.b.size, self.a.size)}"
            )
        for name in ("W", "b", "a"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"RBM parameter {name} is not finite")

    @property
    def n_visible(self) -> int:
        return self.W.shape[0]

    @property
    def n_hidden(self) -> int:
        return self.W.shape[1]

    def copy(self) -> "RbmParams":
        return RbmParams(self.W.copy(), self.b.copy(), self.a.copy())

    @classmethod
    def zeros(cls, n_visible: int, n_hidden: int) -> "RbmParams":
        return cls(np.zeros((n_visible, n_hidden)), np.zeros(n_visible), np.zeros(n_hidden))

    @classmethod
    def init(cls, n_visible: int, n_hidden: int, rng: RngStream, scale: float = 0.01) -> "RbmParams":
        """Weights from N(0, scale^2), zero biases."""
        return cls(rng.normal((n_visible, n_hidden), scale), np.zeros(n_visible), np.zeros(n_hidden))


@dataclass
class CdConfig:
    k: int = 1
    learning_rate: float = 0.05
    epochs: int = 50
    minibatch_size: int = 32
    momentum: float = 0.5
    weight_decay: float = 1e-4
    persistent: bool = False
    n_persistent_chains: int | None = None  # None -> minibatch_size

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.minibatch_size < 1:
            raise ValueError("minibatch_size must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


class RbmGradient(NamedTuple):
    """Log-likelihood ascent direction; ``chains`` is the final negative-phase state."""

    dW: np.ndarray
    da: np.ndarray
    db: np.ndarray
    chains: np.ndarray | None = None


@dataclass
class TrainResult:
    params: RbmParams
    reconstruction_error: list[float] = field(default_factory=list)


def _check_vector(x, n: int, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size != n:
        raise ShapeError(f"{name} has length {x.size}, expected {n}")
    return x


def energy(v, h, params: RbmParams) -> float:
    v = _check_vector(v, params.n_visible, "v")
    h = _check_vector(h, params.n_hidden, "h")
    return float(-(v @ params.W @ h) - params.b @ v - params.a @ h)


def hidden_given_visible(v, params: RbmParams) -> np.ndarray:
    v = as_matrix(v, "visible batch")
    if v.shape[1] != params.n_visible:
        raise ShapeError(f"visible batch has {v.shape[1]} columns, RBM has {params.n_visible}")
    return sigmoid(v @ params.W + params.a)


def visible_given_hidden(h, params: RbmParams) -> np.ndarray:
    h = as_matrix(h, "hidden batch")
    if h.shape[1] != params.n_hidden:
        raise ShapeError(f"hidden batch has {h.shape[1]} columns, RBM has {params.n_hidden}")
    return sigmoid(h @ params.W.T + params.b)


def free_energy(v, params: RbmParams) -> np.ndarray:
    v = as_matrix(v)
    return -(v @ params.b) - softplus(v @ params.W + params.a).sum(axis=1)


def reconstruction_error(data, params: RbmParams) -> float:
    """Mean squared error of the deterministic up-down pass."""
    data = as_matrix(data)
    recon = visible_given_hidden(hidden_given_visible(data, params), params)
    return float(np.mean((data - recon) ** 2))


def cd_gradient(batch, params: RbmParams, cfg: CdConfig, rng: RngStream,
                chains: np.ndarray | None = None) -> RbmGradient:
    """Estimate ``E_data[v h] - E_model[v h]`` (and the bias analogues).

    The data term uses ``p(h|v)`` on the batch rows. The negative chain starts
    from the batch (CD-k) or from ``chains`` when ``cfg.persistent`` is set,
    samples hidden states along the way and scores the final visible sample
    with hidden probabilities.
    """
    batch = as_matrix(batch, "batch")
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    if batch.shape[1] != params.n_visible:
        raise ShapeError(f"batch has {batch.shape[1]} columns, RBM has {params.n_visible}")
    if np.any(batch < 0) or np.any(batch > 1):
        raise ValueError("batch entries must lie in [0, 1]")

    ph_data = hidden_given_visible(batch, params)

    if cfg.persistent:
        v = bernoulli_sample(batch, rng) if chains is None else as_matrix(chains, "chains")
        if v.shape[1] != params.n_visible:
            raise ShapeError("persistent chains do not match the RBM")
        h = bernoulli_sample(hidden_given_visible(v, params), rng)
    else:
        h = bernoulli_sample(ph_data, rng)
    for _ in range(cfg.k):
        v = bernoulli_sample(visible_given_hidden(h, params), rng)
        ph_model = hidden_given_visible(v, params)
        h = bernoulli_sample(ph_model, rng)

    n_data, n_model = batch.shape[0], v.shape[0]
    dW = batch.T @ ph_data / n_data - v.T @ ph_model / n_model
    da = ph_data.mean(axis=0) - ph_model.mean(axis=0)
    db = batch.mean(axis=0) - v.mean(axis=0)
    return RbmGradient(dW, da, db, v if cfg.persistent else None)


def train(data, params: RbmParams, cfg: CdConfig, rng: RngStream) -> TrainResult:
    """Minibatch CD/PCD with momentum and L2 weight decay on ``W``.

    Returns new parameters (the input is not modified) and the reconstruction
    error measured on ``data`` after each epoch.
    """
    data = as_matrix(data, "data")
    if data.shape[1] != params.n_visible:
        raise ShapeError(f"data has {data.shape[1]} columns, RBM has {params.n_visible}")
    p = params.copy()
    vel_W = np.zeros_like(p.W)
    vel_a = np.zeros_like(p.a)
    vel_b = np.zeros_like(p.b)
    n = data.shape[0]
    bs = min(cfg.minibatch_size, n)
    chains = None
    trace: list[float] = []

    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            batch = data[order[start:start + bs]]
            if cfg.persistent and chains is None:
                n_chains = cfg.n_persistent_chains or cfg.minibatch_size
                seed_rows = np.resize(np.arange(batch.shape[0]), n_chains)
                chains = bernoulli_sample(batch[seed_rows], rng)
            g = cd_gradient(batch, p, cfg, rng, chains)
            if cfg.persistent:
                chains = g.chains
            vel_W = cfg.momentum * vel_W + cfg.learning_rate * (g.dW - cfg.weight_decay * p.W)
            vel_a = cfg.momentum * vel_a + cfg.learning_rate * g.da
            vel_b = cfg.momentum * vel_b + cfg.learning_rate * g.db
            p.W += vel_W
            p.a += vel_a
            p.b += vel_b
        trace.append(reconstruction_error(data, p))
    return TrainResult(RbmParams(p.W, p.b, p.a), trace)


def _binary_states(n: int) -> np.ndarray:
    return np.array(list(itertools.product((0.0, 1.0), repeat=n))).reshape(-1, n)


def _check_enumerable(params: RbmParams) -> None:
    if params.n_visible + params.n_hidden > MAX_ENUMERATION_UNITS:
        raise ValueError(
            f"M + N = {params.n_visible + params.n_hidden} exceeds the enumeration "
            f"limit of {MAX_ENUMERATION_UNITS}"
        )


def joint_log_probabilities(params: RbmParams):
    """Enumerate every (v, h) state; returns ``(V, H, log p)`` with log p of shape (2^M, 2^N)."""
    _check_enumerable(params)
    V = _binary_states(params.n_visible)
    H = _binary_states(params.n_hidden)
    neg_energy = V @ params.W @ H.T + (V @ params.b)[:, None] + (H @ params.a)[None, :]
    log_z = logsumexp(neg_energy)
    return V, H, neg_energy - log_z


def log_partition(params: RbmParams) -> float:
    _check_enumerable(params)
    V = _binary_states(params.n_visible)
    H = _binary_states(params.n_hidden)
    neg_energy = V @ params.W @ H.T + (V @ params.b)[:, None] + (H @ params.a)[None, :]
    return float(logsumexp(neg_energy))


def visible_log_probabilities(params: RbmParams):
    """Marginal ``log p(v)`` for every visible state, by full joint enumeration."""
    V, _, logp = joint_log_probabilities(params)
    return V, logsumexp(logp, axis=1)


def _require_binary(data) -> np.ndarray:
    data = as_matrix(data, "data")
    if not np.all((data == 0) | (data == 1)):
        raise ValueError("exact likelihood needs binary visible rows")
    return data


def exact_log_likelihood(data, params: RbmParams) -> float:
    """Mean ``log p(v)`` over binary rows, with Z from exhaustive enumeration."""
    data = _require_binary(data)
    if data.shape[1] != params.n_visible:
        raise ShapeError(f"data has {data.shape[1]} columns, RBM has {params.n_visible}")
    log_z = log_partition(params)
    return float(np.mean(-free_energy(data, params)) - log_z)


def exact_gradient(data, params: RbmParams) -> RbmGradient:
    """Exact mean log-likelihood gradient; the model term is summed over all joint states."""
    data = as_matrix(data, "data")
    if data.shape[1] != params.n_visible:
        raise ShapeError(f"data has {data.shape[1]} columns, RBM has {params.n_visible}")
    V, H, logp = joint_log_probabilities(params)
    P = np.exp(logp)
    model_vh = V.T @ P @ H
    model_v = P.sum(axis=1) @ V
    model_h = P.sum(axis=0) @ H
    ph = hidden_given_visible(data, params)
    dW = data.T @ ph / data.shape[0] - model_vh
    da = ph.mean(axis=0) - model_h
    db = data.mean(axis=0) - model_v
    return RbmGradient(dW, da, db)


def sample_exact(params: RbmParams, n: int, rng: RngStream) -> np.ndarray:
    """Draw ``n`` independent visible vectors from the exact marginal."""
    V, logpv = visible_log_probabilities(params)
    p = np.exp(logpv - logsumexp(logpv))
    idx = rng.generator.choice(V.shape[0], size=n, p=p)
    return V[idx].copy()
