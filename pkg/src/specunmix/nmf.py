"""Multiplicative-update NMF, the comparison baseline for blind extraction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fitting import ResidualMatrix
from .spectra import SpectraError

EPS = 1e-12


@dataclass(frozen=True)
class NmfConfig:
    n: int
    max_iter: int = 500
    seed: int = 0
    tol: float = 1e-9

    def __post_init__(self):
        if self.n < 1:
            raise SpectraError("rank n must be >= 1")
        if self.max_iter < 1:
            raise SpectraError("max_iter must be >= 1")
        if self.tol < 0:
            raise SpectraError("tol must be >= 0")


def nmf_factorize(R: ResidualMatrix | np.ndarray, cfg: NmfConfig):
    """Factor a nonnegative matrix as W @ M with rank cfg.n.

    Standard multiplicative updates for the Frobenius objective; the
    objective history is non-increasing and the factorization is
    reproducible for a given seed.

    Returns (W, M, objective_history).
    """
    values = R.values if isinstance(R, ResidualMatrix) else np.asarray(R, dtype=float)
    if values.ndim != 2:
        raise SpectraError("NMF input must be a matrix")
    if values.min(initial=0.0) < 0:
        raise SpectraError("NMF input must be nonnegative (clamp the residual first)")
    p, m = values.shape
    n = cfg.n
    if not values.any():
        return np.zeros((p, n)), np.zeros((n, m)), [0.0]

    rng = np.random.default_rng(cfg.seed)
    W = 1.0 - rng.random((p, n))  # uniform (0, 1]
    M = 1.0 - rng.random((n, m))
    history = [float(np.linalg.norm(values - W @ M) ** 2)]
    for _ in range(cfg.max_iter):
        W *= (values @ M.T) / (W @ (M @ M.T) + EPS)
        M *= (W.T @ values) / ((W.T @ W) @ M + EPS)
        obj = float(np.linalg.norm(values - W @ M) ** 2)
        history.append(obj)
        prev = history[-2]
        if prev - obj <= cfg.tol * max(prev, EPS):
            break
    return W, M, history
