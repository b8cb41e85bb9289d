"""Row-wise nonnegative sparse recovery of the hidden source spectra.

Given the residual and an estimated mixing matrix, each residual row is
explained as a sparse nonnegative combination of the mixing rows by
solving

    minimize  mu * ||u||_1 + 0.5 * ||f - B u||_2^2   over u >= 0

with the linearized Bregman iteration

    v <- v - B'(B u - f)
    u <- delta * shrink_plus(v, mu)

started from u = v = 0.  The one-sided shrinkage keeps every iterate
nonnegative.  A pseudo-inverse baseline is provided for comparison; it is
fast but reintroduces negative artifacts.

Rows are decoupled, so all rows of a matrix are iterated as one batch with
per-row stopping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cone import MixingEstimate
from .fitting import ResidualMatrix
from .spectra import SpectraError, SpectralGrid

DEFAULT_MU = 0.09
DEFAULT_MAX_ITER = 20_000
DEFAULT_FIT_TOL = 1e-4
DIVERGENCE_FACTOR = 10.0


class DivergenceError(RuntimeError):
    """Iteration fit grew far past its minimum; the step size is too large."""


@dataclass(frozen=True)
class BregmanConfig:
    """Iteration parameters.

    ``delta=None`` selects the safe default 1/||B||_2^2, estimated by power
    iteration on the actual system matrix.  Inconsistent systems (noisy
    rows) never reach ``fit_tol``; they are stopped once the best fit has
    not improved by ``plateau_rtol`` within ``plateau_window`` iterations
    (0 disables the plateau stop).
    """

    mu: float = DEFAULT_MU
    delta: float | None = None
    max_iter: int = DEFAULT_MAX_ITER
    fit_tol: float = DEFAULT_FIT_TOL
    plateau_window: int = 250
    plateau_rtol: float = 1e-3
    check_every: int = 1  # convergence-test stride; >1 trades exact stop points for speed

    def __post_init__(self):
        if self.mu <= 0:
            raise SpectraError("mu must be > 0")
        if self.delta is not None and self.delta <= 0:
            raise SpectraError("delta must be > 0")
        if self.max_iter < 1:
            raise SpectraError("max_iter must be >= 1")
        if self.fit_tol < 0:
            raise SpectraError("fit_tol must be >= 0")
        if self.plateau_window < 0 or self.plateau_rtol < 0:
            raise SpectraError("plateau parameters must be >= 0")
        if self.check_every < 1:
            raise SpectraError("check_every must be >= 1")


@dataclass(frozen=True)
class SourceMatrix:
    """Recovered source spectra as columns; tagged with the producing method."""

    grid: SpectralGrid
    values: np.ndarray
    method_tag: str
    negative_count: int = 0

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 2:
            raise SpectraError("source matrix must be two-dimensional")
        if self.method_tag not in ("bregman", "pinv", "nnls", "truth"):
            raise SpectraError(f"unknown method tag {self.method_tag!r}")
        if self.method_tag != "pinv" and vals.size and vals.min() < 0:
            raise SpectraError(f"{self.method_tag} sources must be nonnegative")
        object.__setattr__(self, "values", vals)

    @property
    def n_sources(self) -> int:
        return self.values.shape[1]

    def column(self, j: int) -> np.ndarray:
        return self.values[:, j]


def shrink_plus(v, mu: float):
    """One-sided soft threshold: v - mu where v > mu, else 0."""
    if mu <= 0:
        raise SpectraError("mu must be > 0")
    return np.maximum(np.asarray(v, dtype=float) - mu, 0.0)


def spectral_norm_squared(B: np.ndarray, n_steps: int = 20) -> float:
    """||B||_2^2 by power iteration on B'B (deterministic start)."""
    B = np.asarray(B, dtype=float)
    n = B.shape[1]
    x = np.full(n, 1.0 / np.sqrt(n))
    est = 0.0
    for _ in range(n_steps):
        y = B.T @ (B @ x)
        norm = np.linalg.norm(y)
        if norm == 0.0:
            return 0.0
        est = float(x @ y)
        x = y / norm
    return max(est, float(x @ (B.T @ (B @ x))))


def _resolve_delta(B: np.ndarray, cfg: BregmanConfig) -> float:
    if cfg.delta is not None:
        return cfg.delta
    nsq = spectral_norm_squared(B)
    if nsq == 0.0:
        return 1.0
    return 1.0 / nsq


def _bregman_batch(B: np.ndarray, F: np.ndarray, cfg: BregmanConfig):
    """Run the iteration on every row of F at once with per-row stopping.

    Returns (U, iterations, fits): one solution row, iteration count, and
    final relative fit per row of F.
    """
    B = np.asarray(B, dtype=float)
    F = np.asarray(F, dtype=float)
    if B.ndim != 2 or F.ndim != 2 or F.shape[1] != B.shape[0]:
        raise SpectraError(
            f"dimension mismatch: B is {B.shape}, F rows must have length {B.shape[0]}"
        )
    delta = _resolve_delta(B, cfg)
    rows, n = F.shape[0], B.shape[1]
    U = np.zeros((rows, n))
    V = np.zeros((rows, n))
    f_norms = np.linalg.norm(F, axis=1)
    fits = np.where(f_norms > 0, 1.0, 0.0)
    iterations = np.ones(rows, dtype=int)
    best_fit = fits.copy()
    stalled_for = np.zeros(rows, dtype=int)

    active = f_norms > 0  # zero rows are solved by u = 0 immediately
    it = 0
    Bt = B.T
    while it < cfg.max_iter and active.any():
        steps = min(cfg.check_every, cfg.max_iter - it)
        idx = np.flatnonzero(active)
        Ua = U[idx]
        Va = V[idx]
        Fa = F[idx]
        for _ in range(steps):
            Va -= (Ua @ Bt - Fa) @ B
            Ua = delta * np.maximum(Va - cfg.mu, 0.0)
        it += steps
        U[idx] = Ua
        V[idx] = Va
        rel = np.linalg.norm(Ua @ Bt - Fa, axis=1) / f_norms[idx]
        fits[idx] = rel
        iterations[idx] = it
        grew = rel > DIVERGENCE_FACTOR * np.maximum(best_fit[idx], 1e-300)
        if np.any(grew):
            bad = int(idx[np.argmax(grew)])
            raise DivergenceError(
                f"fit for row {bad} grew more than {DIVERGENCE_FACTOR:g}x past its minimum "
                f"(delta={delta:g} too large; reduce the step size)"
            )
        improved = rel < best_fit[idx] * (1.0 - cfg.plateau_rtol)
        stalled_for[idx] = np.where(improved, 0, stalled_for[idx] + steps)
        best_fit[idx] = np.minimum(best_fit[idx], rel)
        done = rel <= cfg.fit_tol
        if cfg.plateau_window > 0:
            done |= stalled_for[idx] >= cfg.plateau_window
        if done.any():
            active[idx[done]] = False
    return U, iterations, fits


def linearized_bregman(B: np.ndarray, f: np.ndarray, cfg: BregmanConfig | None = None):
    """Solve one system; returns (u, iterations, final_fit)."""
    cfg = cfg or BregmanConfig()
    f = np.asarray(f, dtype=float)
    if f.ndim != 1:
        raise SpectraError("f must be a vector")
    U, iters, fits = _bregman_batch(B, f[None, :], cfg)
    return U[0], int(iters[0]), float(fits[0])


def recover_sources(
    R: ResidualMatrix, M: MixingEstimate, cfg: BregmanConfig | None = None
) -> SourceMatrix:
    """Recover all hidden source spectra from the residual via Bregman iteration.

    Mixing rows are scaled to unit maximum before the solve to condition
    the iteration; the inverse scale is folded back into the sources (the
    factorization only determines rows of M up to positive scale anyway).
    """
    cfg = cfg or BregmanConfig()
    values = np.asarray(R.values, dtype=float)
    mix = np.asarray(M.rows, dtype=float)
    if mix.ndim != 2 or mix.shape[1] != values.shape[1]:
        raise SpectraError("mixing rows must match the residual column count")
    row_max = mix.max(axis=1)
    if np.any(row_max <= 0):
        raise SpectraError("mixing rows must have positive maxima")
    scaled = mix / row_max[:, None]
    try:
        U, _, _ = _bregman_batch(scaled.T, values, cfg)
    except DivergenceError as exc:
        raise DivergenceError(f"source recovery failed: {exc}") from exc
    W = U / row_max[None, :]
    return SourceMatrix(R.grid, W, "bregman")


def pinv_recover(R: ResidualMatrix, M: MixingEstimate) -> SourceMatrix:
    """Baseline W = R M^+; preserves (and counts) negative artifacts."""
    mix = np.asarray(M.rows, dtype=float)
    if np.linalg.matrix_rank(mix) < mix.shape[0]:
        raise SpectraError("mixing matrix is rank-deficient; pseudo-inverse unusable")
    W = R.values @ np.linalg.pinv(mix)
    return SourceMatrix(R.grid, W, "pinv", negative_count=int(np.count_nonzero(W < 0)))
