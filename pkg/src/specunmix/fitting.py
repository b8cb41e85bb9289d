"""Bounded least-squares fitting of known references and residual computation.

Fits the measured mixtures as a nonnegative, upper-bounded linear
combination of known reference spectra,

    minimize ||X - A S||^2   subject to   0 <= S <= c,

optionally with a cap on each column sum of S.  The leftover X - A S is
the residual handed to the blind extraction stage.

Each mixture column is an independent convex quadratic program, solved by
projected gradient with a backtracking line search.  The box-plus-halfspace
feasible set is projected onto with Dykstra alternating projections.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .spectra import ConcentrationBounds, MixtureMatrix, SpectralGrid, SpectraError

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 10_000


class FitDimensionError(SpectraError):
    """Shapes of data, references, and bounds disagree."""


@dataclass(frozen=True)
class ConcentrationMatrix:
    """Fitted concentrations, one row per known substance, one column per mixture."""

    values: np.ndarray
    substance_names: tuple[str, ...]
    bounds: ConcentrationBounds
    converged: bool = True

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 2 or vals.shape[0] != len(self.substance_names):
            raise FitDimensionError("values must be n_known x m with one row per substance")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "substance_names", tuple(self.substance_names))

    def row(self, name: str) -> np.ndarray:
        return self.values[self.substance_names.index(name)]


@dataclass(frozen=True)
class ResidualMatrix:
    """X - A S with negativity statistics recorded before any clamping."""

    grid: SpectralGrid
    values: np.ndarray
    negative_fraction: float
    negative_min: float

    def clamped(self) -> "ResidualMatrix":
        """Copy with negative entries set to zero (statistics kept)."""
        return ResidualMatrix(
            self.grid,
            np.maximum(self.values, 0.0),
            self.negative_fraction,
            self.negative_min,
        )

    @property
    def frobenius_norm(self) -> float:
        return float(np.linalg.norm(self.values))


def _projector(lower, upper, total_bound, mask=None):
    """Projection onto {lower <= s <= upper}, optionally intersected with
    {sum(s[mask]) <= total}."""
    if total_bound is None:
        return lambda s: np.clip(s, lower, upper)
    if mask is None:
        mask = np.ones(lower.size, dtype=bool)
    n_members = int(mask.sum())
    if n_members == 0:
        return lambda s: np.clip(s, lower, upper)

    def project(s, max_cycles=500, tol=1e-14):
        # Dykstra alternating projections onto box and halfspace.
        x = s.copy()
        p = np.zeros_like(s)
        q = np.zeros_like(s)
        for _ in range(max_cycles):
            y = np.clip(x + p, lower, upper)
            p = x + p - y
            z = y + q
            over = (np.sum(z[mask]) - total_bound) / n_members
            x_new = z.copy()
            if over > 0.0:
                x_new[mask] -= over
            q = z - x_new
            if np.max(np.abs(x_new - x)) <= tol:
                x = x_new
                break
            x = x_new
        return np.clip(x, lower, upper)

    return project


def _box_projected_gradient(s, g, lower, upper):
    """Projected gradient on the box; zero components cannot move downhill."""
    pg = g.copy()
    at_hi = s >= upper
    at_lo = s <= lower
    pg[at_hi] = np.maximum(pg[at_hi], 0.0)
    pg[at_lo] = np.minimum(pg[at_lo], 0.0)
    return pg


def _projected_gradient_column(G, b, upper, total_bound, tol, max_iter, mask=None):
    """Minimize 0.5 s'Gs - b's over the box (and optional sum cap).

    Returns (s, converged).  Stationarity is measured by the projected
    gradient on the box in max-norm; with an active sum cap the unit-step
    projection residual ||P(s - g) - s||_inf is used instead.
    """
    n = b.size
    lower = np.zeros(n)
    project = _projector(lower, upper, total_bound, mask)
    s = np.zeros(n)  # feasible for any bounds, deterministic
    g = G @ s - b
    f = 0.5 * float(s @ (G @ s)) - float(b @ s)
    step = 1.0
    for _ in range(max_iter):
        if total_bound is None:
            if np.max(np.abs(_box_projected_gradient(s, g, lower, upper))) <= tol:
                return s, True
        else:
            if np.max(np.abs(project(s - g) - s)) <= tol:
                return s, True
        # Backtracking line search on the projection arc (Armijo on the
        # quadratic model; f is exactly quadratic so this always terminates).
        accepted = False
        for _ in range(60):
            cand = project(s - step * g)
            d = cand - s
            dd = float(d @ d)
            if dd == 0.0:
                accepted = True
                break
            Gd = G @ d
            f_cand = f + float(g @ d) + 0.5 * float(d @ Gd)
            if f_cand <= f + float(g @ d) + 0.5 / step * dd + 1e-18:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        if dd == 0.0:
            # Stationary point of the projection map.
            return s, True
        s = cand
        g = g + Gd
        f = f_cand
        # Barzilai-Borwein style step growth for the next trial.
        curv = float(d @ Gd)
        step = dd / curv if curv > 0 else step * 2.0
        step = min(max(step, 1e-12), 1e12)
    if total_bound is None:
        done = np.max(np.abs(_box_projected_gradient(s, g, lower, upper))) <= tol
    else:
        done = np.max(np.abs(project(s - g) - s)) <= tol
    return s, bool(done)


def box_constrained_ls(
    X: MixtureMatrix,
    A: np.ndarray,
    names,
    bounds: ConcentrationBounds,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> ConcentrationMatrix:
    """Fit reference columns A to every mixture column under the bounds.

    Parameters
    ----------
    X : MixtureMatrix
        Measured data, p x m.
    A : ndarray
        Reference spectra as columns, p x n_known, already on X's grid.
    names : sequence of str
        Substance name per column of A; bounds must cover each.
    bounds : ConcentrationBounds
    tol : float
        Max-norm threshold on the projected gradient.
    max_iter : int
        Per-column iteration cap; non-convergence returns the best iterate
        and flags the result.
    """
    A = np.asarray(A, dtype=float)
    names = list(names)
    if A.ndim != 2 or A.shape[1] != len(names):
        raise FitDimensionError("A must have one column per substance name")
    if A.shape[0] != X.n_samples:
        raise FitDimensionError(
            f"A has {A.shape[0]} rows but the data grid has {X.n_samples}"
        )
    if A.shape[1] < 1:
        raise FitDimensionError("need at least one known reference")
    upper = bounds.vector(names)

    G = A.T @ A
    data = X.values
    mask = bounds.member_mask(names)
    S = np.zeros((A.shape[1], X.n_mixtures))
    all_converged = True
    for j in range(X.n_mixtures):
        b = A.T @ data[:, j]
        s, ok = _projected_gradient_column(G, b, upper, bounds.total_bound, tol, max_iter, mask)
        S[:, j] = s
        all_converged = all_converged and ok
    if not all_converged:
        warnings.warn(
            "bounded least squares did not reach the requested tolerance; "
            "returning best iterate",
            RuntimeWarning,
        )
    return ConcentrationMatrix(S, tuple(names), bounds, converged=all_converged)


def compute_residual(
    X: MixtureMatrix, A: np.ndarray, S: ConcentrationMatrix, clamp: bool = False
) -> ResidualMatrix:
    """X - A S with negativity statistics; optionally clamp negatives to zero."""
    A = np.asarray(A, dtype=float)
    if A.shape[0] != X.n_samples or A.shape[1] != S.values.shape[0]:
        raise FitDimensionError("A shape does not match data and concentrations")
    if S.values.shape[1] != X.n_mixtures:
        raise FitDimensionError("S has a different number of mixtures than X")
    values = X.values - A @ S.values
    negatives = values < 0
    negative_fraction = float(np.count_nonzero(negatives)) / values.size
    negative_min = float(values.min(initial=0.0, where=negatives)) if negatives.any() else 0.0
    if clamp:
        values = np.maximum(values, 0.0)
    return ResidualMatrix(X.grid, values, negative_fraction, negative_min)
