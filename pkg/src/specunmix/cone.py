"""Mixing-row identification via minimal-enclosing-cone scoring.

Under the stand-alone-peak condition, the concentration rows of the hidden
components appear verbatim (up to positive scale) as rows of the residual
matrix: every residual row is a nonnegative combination of those extreme
rows.  Each row is scored by how badly the best nonnegative combination of
all *other* rows approximates it; rows interior to the cone score near
zero, extreme rows score high, and the top scorers are taken as the mixing
matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fitting import ResidualMatrix
from .spectra import SpectraError

NNLS_TOL = 1e-10
# Rows this far below the largest row norm cannot be cone vertices; they are
# skipped and excluded from every fitting basis.
NORM_PREFILTER = 1e-3


@dataclass(frozen=True)
class RowScore:
    row_index: int
    score: float


@dataclass(frozen=True)
class MixingEstimate:
    """Selected residual rows: candidate mixing matrix with provenance."""

    rows: np.ndarray
    source_indices: tuple[int, ...]
    scores: tuple[float, ...]

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=float)
        idx = tuple(int(i) for i in self.source_indices)
        scores = tuple(float(s) for s in self.scores)
        if rows.ndim != 2 or rows.shape[0] != len(idx) or len(scores) != len(idx):
            raise SpectraError("rows, source_indices, and scores must agree in length")
        if len(set(idx)) != len(idx):
            raise SpectraError("source_indices must be distinct")
        if any(scores[i] < scores[i + 1] - 1e-15 for i in range(len(scores) - 1)):
            raise SpectraError("scores must be sorted non-increasing")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "source_indices", idx)
        object.__setattr__(self, "scores", scores)

    @property
    def n_sources(self) -> int:
        return self.rows.shape[0]


def nnls(B: np.ndarray, y: np.ndarray, tol: float = NNLS_TOL, max_iter: int | None = None):
    """Nonnegative least squares: minimize ||lam' B - y||_2 over lam >= 0.

    B holds the basis as rows (k x m); y is an m-vector.  Lawson-Hanson
    active-set iteration; the returned lam satisfies the KKT conditions of
    the problem to ``tol``.

    Returns
    -------
    lam : ndarray, shape (k,)
    residual_norm : float
    """
    B = np.asarray(B, dtype=float)
    y = np.asarray(y, dtype=float)
    if B.ndim != 2 or y.ndim != 1 or B.shape[1] != y.size:
        raise SpectraError("nnls: B must be k x m and y length m")
    E = B.T  # design matrix, m x k
    k = E.shape[1]
    if max_iter is None:
        max_iter = 3 * k + 30

    lam = np.zeros(k)
    passive = np.zeros(k, dtype=bool)
    resid = y.copy()
    w = E.T @ resid
    scale = max(1.0, float(np.max(np.abs(w), initial=0.0)))
    thresh = tol * scale

    it = 0
    while it < max_iter:
        it += 1
        w_masked = np.where(passive, -np.inf, w)
        j = int(np.argmax(w_masked))
        if w_masked[j] <= thresh:
            break
        passive[j] = True
        while True:
            idx = np.flatnonzero(passive)
            z_sub, *_ = np.linalg.lstsq(E[:, idx], y, rcond=None)
            if np.all(z_sub > 0):
                lam = np.zeros(k)
                lam[idx] = z_sub
                break
            # Step back along lam -> z until a passive coefficient hits zero.
            z = np.zeros(k)
            z[idx] = z_sub
            neg = idx[z_sub <= 0]
            alpha = np.min(lam[neg] / (lam[neg] - z[neg]))
            lam = lam + alpha * (z - lam)
            passive[np.abs(lam) < 1e-14] = False
            passive &= lam > 0  # drop coefficients driven to zero
            lam[~passive] = 0.0
        resid = y - E @ lam
        w = E.T @ resid
    return lam, float(np.linalg.norm(resid))


def score_rows(R: ResidualMatrix | np.ndarray) -> list[RowScore]:
    """Score every residual row by its distance to the cone of the others.

    Rows must be nonnegative (clamp the residual first).  A low score means
    the row is roughly a nonnegative combination of other rows; a high
    score marks a cone vertex.  Rows below the norm prefilter score zero
    and never enter a fitting basis.
    """
    values = R.values if isinstance(R, ResidualMatrix) else np.asarray(R, dtype=float)
    if values.ndim != 2 or values.shape[0] < 2:
        raise SpectraError("scoring needs a residual with at least two rows")
    if values.min(initial=0.0) < 0:
        raise SpectraError("scoring expects a clamped (nonnegative) residual")
    p = values.shape[0]
    norms = np.linalg.norm(values, axis=1)
    max_norm = float(norms.max(initial=0.0))
    kept = np.flatnonzero(norms >= NORM_PREFILTER * max_norm) if max_norm > 0 else np.array([], int)

    scores = np.zeros(p)
    kept_rows = values[kept]
    for pos, l in enumerate(kept):
        basis = np.delete(kept_rows, pos, axis=0)
        if basis.shape[0] == 0:
            scores[l] = norms[l]
            continue
        _, resid_norm = nnls(basis, values[l])
        scores[l] = resid_norm
    return [RowScore(int(i), float(scores[i])) for i in range(p)]


def select_vertices(scores: list[RowScore], R: ResidualMatrix | np.ndarray, n: int) -> MixingEstimate:
    """Take the n highest-scoring rows as the mixing matrix (ties: lower index)."""
    values = R.values if isinstance(R, ResidualMatrix) else np.asarray(R, dtype=float)
    p = values.shape[0]
    if not 1 <= n <= p:
        raise SpectraError(f"n={n} out of range 1..{p}")
    if len(scores) != p:
        raise SpectraError("one score per residual row required")
    order = sorted(scores, key=lambda rs: (-rs.score, rs.row_index))
    chosen = order[:n]
    return MixingEstimate(
        rows=values[[rs.row_index for rs in chosen]].copy(),
        source_indices=tuple(rs.row_index for rs in chosen),
        scores=tuple(rs.score for rs in chosen),
    )


def estimate_source_count(scores: list[RowScore], max_n: int) -> int:
    """Heuristic source count: position of the largest ratio gap in sorted scores.

    A user-supplied count always overrides this estimate.
    """
    if max_n < 1:
        raise SpectraError("max_n must be >= 1")
    if not scores:
        raise SpectraError("scores must be nonempty")
    vals = sorted((rs.score for rs in scores), reverse=True)
    if len(vals) == 1:
        return 1
    limit = min(max_n, len(vals) - 1)
    best_n, best_ratio = 1, -np.inf
    for kpos in range(1, limit + 1):
        hi, lo = vals[kpos - 1], vals[kpos]
        if hi <= 0:
            ratio = 1.0
        elif lo <= 0:
            ratio = np.inf
        else:
            ratio = hi / lo
        if ratio > best_ratio:
            best_ratio = ratio
            best_n = kpos
    return best_n
