"""Iterative semi-blind identification loop.

Each iteration fits the current known set to the data under its bounds,
clamps the residual, extracts candidate hidden components from the
residual cone, matches them against the reference library, and applies
analyst decisions.  Confirmed candidates join the known set (their
recovered spectrum becomes a reference, with a slack bound), so the next
fit removes them and weaker components surface.  The loop stops when the
residual energy is negligible, nothing identifiable remains, or the
analyst rejects everything.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import cone
from .fitting import ResidualMatrix, box_constrained_ls, compute_residual
from .recovery import BregmanConfig, recover_sources
from .spectra import (
    ConcentrationBounds,
    MixtureMatrix,
    ReferenceLibrary,
    SpectraError,
    Spectrum,
)


class SessionStateError(RuntimeError):
    """Operation not valid in the session's current state."""


class DecisionError(ValueError):
    """Decision refers to a missing candidate or an already-known name."""


@dataclass(frozen=True)
class MatchResult:
    """Ranked library similarities for one extracted candidate."""

    candidate_index: int
    ranked: tuple[tuple[str, float], ...]

    @property
    def best(self) -> tuple[str, float] | None:
        return self.ranked[0] if self.ranked else None


def match_library(candidate: Spectrum, library: ReferenceLibrary, top_k: int = 3,
                  candidate_index: int = 0) -> MatchResult:
    """Cosine similarity of a candidate spectrum against every library entry."""
    v = candidate.intensities
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise SpectraError("cannot match a zero-norm candidate")
    scored = []
    for name, entry in library.entries.items():
        if entry.grid != candidate.grid:
            raise SpectraError(f"library entry {name!r} is not on the candidate grid")
        e_norm = float(np.linalg.norm(entry.intensities))
        sim = 0.0 if e_norm == 0.0 else float(v @ entry.intensities) / (norm * e_norm)
        scored.append((name, sim))
    scored.sort(key=lambda t: (-t[1], t[0]))
    return MatchResult(candidate_index, tuple(scored[:top_k]))


@dataclass(frozen=True)
class PipelineConfig:
    """Knobs of the iterative loop; defaults match the module contracts."""

    bregman: BregmanConfig = field(default_factory=BregmanConfig)
    fit_tol: float = 1e-8
    fit_max_iter: int = 10_000
    n_sources: int | None = None  # fixed source count; None = estimate per iteration
    max_candidates: int = 4
    # The gap estimate only suggests n > 1 when the best score-ratio gap is
    # decisive; noisy ties otherwise produce arbitrary counts.
    gap_ratio_min: float = 10.0
    # Rows below these floors are zeroed before cone extraction: relative
    # floor against the strongest row, noise floor against the estimated
    # per-entry sigma.
    rel_row_floor: float = 0.3
    noise_kappa: float = 4.0
    match_top_k: int = 3
    match_threshold: float = 0.9
    convergence_threshold: float = 0.02
    max_iterations: int = 10
    clamp_residual: bool = True


@dataclass
class Decision:
    candidate_index: int
    action: str  # "confirm" | "reject"
    name: str | None = None

    def __post_init__(self):
        if self.action not in ("confirm", "reject"):
            raise DecisionError(f"unknown action {self.action!r}")
        if self.action == "confirm" and not self.name:
            raise DecisionError("confirm decisions need a substance name")


@dataclass
class Candidate:
    index: int
    spectrum: np.ndarray
    concentrations: np.ndarray
    source_row: int
    score: float


@dataclass
class KnownComponent:
    name: str
    bound: float
    origin: str  # "initial" | "confirmed"
    spectrum: np.ndarray
    confirmed_iteration: int | None = None
    match_score: float | None = None


@dataclass
class IterationRecord:
    index: int
    substance_names: tuple[str, ...]
    concentrations: np.ndarray
    residual_norm: float
    residual_rel: float
    negative_fraction: float
    negative_min: float
    noise_floor: float
    rows_kept: int
    scores: np.ndarray
    candidates: list[Candidate]
    matches: list[MatchResult]
    decisions_applied: list[Decision]
    status_after: str
    elapsed_s: float


@dataclass
class Session:
    id: str
    data: MixtureMatrix
    library: ReferenceLibrary
    known: list[KnownComponent]
    total_bound: float | None
    total_members: tuple[str, ...]
    config: PipelineConfig
    iteration_log: list[IterationRecord] = field(default_factory=list)
    status: str = "new"

    @property
    def known_names(self) -> list[str]:
        return [k.name for k in self.known]

    @property
    def pending_candidates(self) -> list[Candidate]:
        """Candidates of the latest iteration; decisions on them are applied
        (and recorded) by the next iteration."""
        if not self.iteration_log or self.status != "awaiting_confirmation":
            return []
        return list(self.iteration_log[-1].candidates)

    def fingerprint(self) -> str:
        """Canonical digest of the deterministic session state (no timings)."""
        return hashlib.sha256(
            json.dumps(session_state_dict(self), sort_keys=True).encode()
        ).hexdigest()


def new_session(
    data: MixtureMatrix,
    library: ReferenceLibrary,
    knowns: list[tuple[str, float]],
    total_bound: float | None = None,
    config: PipelineConfig | None = None,
    session_id: str | None = None,
) -> Session:
    """Build a session; knowns are (library name, concentration bound) pairs."""
    config = config or PipelineConfig()
    lib = library.resampled(data.grid)
    components = []
    for name, bound in knowns:
        if name not in lib:
            raise SpectraError(f"known substance {name!r} is not in the library")
        if bound < 0:
            raise SpectraError(f"bound for {name!r} must be >= 0")
        components.append(
            KnownComponent(name, float(bound), "initial", lib.entries[name].intensities)
        )
    names = [c.name for c in components]
    if len(set(names)) != len(names):
        raise SpectraError("duplicate known substance")
    if session_id is None:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(data.values).tobytes())
        h.update(json.dumps([(n, b) for n, b in knowns]).encode())
        h.update(str(total_bound).encode())
        session_id = h.hexdigest()[:12]
    return Session(
        id=session_id,
        data=data,
        library=lib,
        known=components,
        total_bound=float(total_bound) if total_bound is not None else None,
        total_members=tuple(names),
        config=config,
    )


def estimate_noise_floor(residual_values: np.ndarray) -> float:
    """Per-entry noise sigma from first differences along the wavenumber axis.

    Smooth spectral structure mostly cancels in the differences, so the
    median absolute difference tracks the noise even when the residual has
    no negative entries to learn from.
    """
    if residual_values.shape[0] < 2:
        return 0.0
    d = np.diff(residual_values, axis=0)
    return float(1.4826 * np.median(np.abs(d)) / np.sqrt(2.0))


def _filter_rows(clamped: np.ndarray, sigma: float, cfg: PipelineConfig):
    """Zero rows too weak to be trustworthy cone vertices."""
    norms = np.linalg.norm(clamped, axis=1)
    floor = max(
        cfg.rel_row_floor * float(norms.max(initial=0.0)),
        cfg.noise_kappa * sigma * np.sqrt(clamped.shape[1]),
    )
    keep = norms >= floor
    if floor == 0.0:
        keep = norms > 0.0
    return np.where(keep[:, None], clamped, 0.0), int(keep.sum())


def _pick_source_count(scores: list[cone.RowScore], cfg: PipelineConfig) -> int:
    if cfg.n_sources is not None:
        return cfg.n_sources
    vals = sorted((rs.score for rs in scores), reverse=True)
    limit = min(cfg.max_candidates, len(vals) - 1)
    best_ratio = 0.0
    for k in range(1, limit + 1):
        hi, lo = vals[k - 1], vals[k]
        if hi <= 0:
            continue
        ratio = np.inf if lo <= 0 else hi / lo
        best_ratio = max(best_ratio, ratio)
    if best_ratio < cfg.gap_ratio_min:
        return 1
    return cone.estimate_source_count(scores, cfg.max_candidates)


def _fit_bounds(session: Session) -> ConcentrationBounds:
    per = {c.name: c.bound for c in session.known}
    return ConcentrationBounds(
        per, total_bound=session.total_bound, total_members=session.total_members
    )


def _apply_decisions(session: Session, decisions: list[Decision]) -> list[Decision]:
    pending = {c.index: c for c in session.pending_candidates}
    if decisions and not pending:
        raise DecisionError("no candidates awaiting a decision")
    seen = set()
    applied = []
    last = session.iteration_log[-1] if session.iteration_log else None
    for d in decisions:
        if d.candidate_index not in pending:
            raise DecisionError(f"no undecided candidate with index {d.candidate_index}")
        if d.candidate_index in seen:
            raise DecisionError(f"duplicate decision for candidate {d.candidate_index}")
        seen.add(d.candidate_index)
        if d.action == "confirm":
            if d.name in session.known_names:
                raise DecisionError(f"{d.name!r} is already a known component")
            cand = pending[d.candidate_index]
            peak = float(cand.concentrations.max(initial=0.0))
            ref = cand.spectrum / cand.spectrum.max()
            match = next(
                (m for m in last.matches if m.candidate_index == d.candidate_index), None
            )
            score = None
            if match is not None:
                for name, sim in match.ranked:
                    if name == d.name:
                        score = sim
                        break
                if score is None and match.best is not None:
                    score = match.best[1]
            session.known.append(
                KnownComponent(
                    d.name,
                    1.1 * peak,
                    "confirmed",
                    ref,
                    confirmed_iteration=last.index,
                    match_score=score,
                )
            )
        applied.append(d)
    return applied


def run_iteration(session: Session, decisions: list[Decision] | None = None) -> Session:
    """One loop turn: apply decisions, refit, re-extract, rematch."""
    if session.status in ("converged", "exhausted"):
        raise SessionStateError(f"session is {session.status}")
    cfg = session.config
    t0 = time.perf_counter()
    decisions = list(decisions or [])
    had_pending = bool(session.pending_candidates)
    applied = _apply_decisions(session, decisions)
    confirmed_any = any(d.action == "confirm" for d in applied)
    # Candidates existed and nothing was confirmed: feeding nothing back
    # would just re-extract the same residual, so the loop is exhausted
    # (the record below still carries the refit statistics).
    rejected_out = had_pending and not confirmed_any

    X = session.data
    names = session.known_names
    if names:
        A = np.column_stack([c.spectrum for c in session.known])
        bounds = _fit_bounds(session)
        S = box_constrained_ls(X, A, names, bounds, tol=cfg.fit_tol, max_iter=cfg.fit_max_iter)
        residual = compute_residual(X, A, S, clamp=False)
        conc = S.values
    else:
        residual = ResidualMatrix(X.grid, X.values.copy(), 0.0, 0.0)
        conc = np.zeros((0, X.n_mixtures))

    data_norm = float(np.linalg.norm(X.values))
    res_rel = residual.frobenius_norm / data_norm if data_norm > 0 else 0.0
    sigma = estimate_noise_floor(residual.values)
    clamped = np.maximum(residual.values, 0.0) if cfg.clamp_residual else residual.values

    record = IterationRecord(
        index=len(session.iteration_log),
        substance_names=tuple(names),
        concentrations=conc,
        residual_norm=residual.frobenius_norm,
        residual_rel=res_rel,
        negative_fraction=residual.negative_fraction,
        negative_min=residual.negative_min,
        noise_floor=sigma,
        rows_kept=0,
        scores=np.zeros(X.n_samples),
        candidates=[],
        matches=[],
        decisions_applied=applied,
        status_after="",
        elapsed_s=0.0,
    )

    if rejected_out:
        session.status = "exhausted"
        record.status_after = session.status
        record.elapsed_s = time.perf_counter() - t0
        session.iteration_log.append(record)
        return session

    if res_rel <= cfg.convergence_threshold:
        session.status = "converged"
        record.status_after = session.status
        record.elapsed_s = time.perf_counter() - t0
        session.iteration_log.append(record)
        return session

    filtered, kept = _filter_rows(clamped, sigma, cfg)
    record.rows_kept = kept
    if kept == 0:
        session.status = "converged"  # nothing left above the noise floor
        record.status_after = session.status
        record.elapsed_s = time.perf_counter() - t0
        session.iteration_log.append(record)
        return session

    scores = cone.score_rows(filtered)
    record.scores = np.array([rs.score for rs in scores])
    n = max(1, min(_pick_source_count(scores, cfg), kept))
    selection = cone.select_vertices(scores, filtered, n)
    clamped_res = ResidualMatrix(X.grid, clamped, residual.negative_fraction, residual.negative_min)
    sources = recover_sources(clamped_res, selection, cfg.bregman)

    candidates = []
    matches = []
    for k in range(sources.n_sources):
        spec_vals = sources.column(k)
        peak = float(spec_vals.max(initial=0.0))
        if peak <= 0.0:
            continue
        idx = len(candidates)
        # R ~ sum_k spectrum_k (x) mixing_row_k; with the reference scaled to
        # unit max its concentration row is the mixing row times the peak.
        cand = Candidate(
            index=idx,
            spectrum=spec_vals,
            concentrations=np.asarray(selection.rows[k], dtype=float) * peak,
            source_row=selection.source_indices[k],
            score=selection.scores[k],
        )
        candidates.append(cand)
        matches.append(
            match_library(
                Spectrum(X.grid, spec_vals, label=f"candidate-{idx}"),
                session.library,
                top_k=cfg.match_top_k,
                candidate_index=idx,
            )
        )
    record.candidates = candidates
    record.matches = matches

    identifiable = [
        m for m in matches
        if m.best is not None
        and m.best[1] >= cfg.match_threshold
        and m.best[0] not in session.known_names
    ]
    if not identifiable:
        session.status = "converged"
    elif len(session.iteration_log) + 1 >= cfg.max_iterations:
        session.status = "exhausted"
    else:
        session.status = "awaiting_confirmation"
    record.status_after = session.status
    record.elapsed_s = time.perf_counter() - t0
    session.iteration_log.append(record)
    return session


# -- confirmers ---------------------------------------------------------------

def auto_confirmer(threshold: float = 0.9):
    """Confirm the single best new-name candidate at or above the threshold."""

    def decide(session: Session) -> list[Decision]:
        pending = session.pending_candidates
        if not pending or not session.iteration_log:
            return []
        matches = {m.candidate_index: m for m in session.iteration_log[-1].matches}
        ranked = []
        for cand in pending:
            m = matches.get(cand.index)
            if m is None or m.best is None:
                continue
            name, sim = m.best
            if sim >= threshold and name not in session.known_names:
                ranked.append((sim, cand.index, name))
        ranked.sort(reverse=True)
        decisions = []
        if ranked:
            _, best_idx, best_name = ranked[0]
            decisions.append(Decision(best_idx, "confirm", best_name))
            for cand in pending:
                if cand.index != best_idx:
                    decisions.append(Decision(cand.index, "reject"))
        return decisions

    return decide


def scripted_confirmer(script: list[list[Decision]]):
    """Replay a fixed list of per-iteration decision batches."""
    batches = [list(b) for b in script]

    def decide(session: Session) -> list[Decision]:
        if not batches:
            return []
        return batches.pop(0)

    return decide


def run_pipeline(
    data: MixtureMatrix,
    library: ReferenceLibrary,
    knowns: list[tuple[str, float]],
    total_bound: float | None = None,
    config: PipelineConfig | None = None,
    confirmer=None,
    session: Session | None = None,
) -> Session:
    """Run the loop to a terminal state with the given confirmation strategy.

    Passing an existing fresh session makes partial progress observable to
    the caller if an iteration raises.
    """
    config = config or PipelineConfig()
    confirmer = confirmer or auto_confirmer(config.match_threshold)
    if session is None:
        session = new_session(data, library, knowns, total_bound, config)
    config = session.config
    decisions: list[Decision] = []
    for _ in range(config.max_iterations):
        run_iteration(session, decisions)
        if session.status in ("converged", "exhausted"):
            break
        decisions = confirmer(session)
        if not decisions:
            session.status = "exhausted"
            session.iteration_log[-1].status_after = session.status
            break
    else:
        if session.status not in ("converged", "exhausted"):
            session.status = "exhausted"
            session.iteration_log[-1].status_after = session.status
    return session


# -- serialization ------------------------------------------------------------

def config_to_dict(config: PipelineConfig) -> dict:
    d = asdict(config)
    return d


def config_from_dict(d: dict) -> PipelineConfig:
    d = dict(d)
    breg = d.pop("bregman", {})
    return PipelineConfig(bregman=BregmanConfig(**breg), **d)


def session_to_payload(session: Session) -> dict:
    """Full persistable session payload (library is stored separately)."""
    from .spectra import format_spectra_csv

    return {
        "state": session_state_dict(session),
        "config": config_to_dict(session.config),
        "data_csv": format_spectra_csv(session.data),
    }


def session_from_payload(payload: dict, library: ReferenceLibrary) -> Session:
    from .spectra import parse_spectra_csv

    data = parse_spectra_csv(payload["data_csv"])
    state = payload["state"]
    config = config_from_dict(payload["config"])
    known = [
        KnownComponent(
            name=k["name"],
            bound=k["bound"],
            origin=k["origin"],
            spectrum=np.asarray(k["spectrum"], dtype=float),
            confirmed_iteration=k["confirmed_iteration"],
            match_score=k["match_score"],
        )
        for k in state["known"]
    ]
    log = []
    for r in state["iterations"]:
        log.append(
            IterationRecord(
                index=r["index"],
                substance_names=tuple(r["substances"]),
                concentrations=np.asarray(r["concentrations"], dtype=float).reshape(
                    len(r["substances"]), -1
                ) if r["substances"] else np.zeros((0, data.n_mixtures)),
                residual_norm=r["residual_norm"],
                residual_rel=r["residual_rel"],
                negative_fraction=r["negative_fraction"],
                negative_min=r["negative_min"],
                noise_floor=r["noise_floor"],
                rows_kept=r["rows_kept"],
                scores=np.asarray(r["scores"], dtype=float),
                candidates=[
                    Candidate(
                        index=c["index"],
                        spectrum=np.asarray(c["spectrum"], dtype=float),
                        concentrations=np.asarray(c["concentrations"], dtype=float),
                        source_row=c["source_row"],
                        score=c["score"],
                    )
                    for c in r["candidates"]
                ],
                matches=[
                    MatchResult(m["candidate_index"],
                                tuple((n, s) for n, s in m["ranked"]))
                    for m in r["matches"]
                ],
                decisions_applied=[Decision(**d) for d in r["decisions"]],
                status_after=r["status_after"],
                elapsed_s=0.0,
            )
        )
    return Session(
        id=state["id"],
        data=data,
        library=library.resampled(data.grid),
        known=known,
        total_bound=state["total_bound"],
        total_members=tuple(state["total_members"]),
        config=config,
        iteration_log=log,
        status=state["status"],
    )


def session_state_dict(session: Session) -> dict:
    """Deterministic session state (timings excluded) for storage and replay."""
    return {
        "id": session.id,
        "status": session.status,
        "total_bound": session.total_bound,
        "total_members": list(session.total_members),
        "known": [
            {
                "name": c.name,
                "bound": c.bound,
                "origin": c.origin,
                "spectrum": c.spectrum.tolist(),
                "confirmed_iteration": c.confirmed_iteration,
                "match_score": c.match_score,
            }
            for c in session.known
        ],
        "iterations": [
            {
                "index": r.index,
                "substances": list(r.substance_names),
                "concentrations": r.concentrations.tolist(),
                "residual_norm": r.residual_norm,
                "residual_rel": r.residual_rel,
                "negative_fraction": r.negative_fraction,
                "negative_min": r.negative_min,
                "noise_floor": r.noise_floor,
                "rows_kept": r.rows_kept,
                "scores": r.scores.tolist(),
                "candidates": [
                    {
                        "index": c.index,
                        "spectrum": c.spectrum.tolist(),
                        "concentrations": c.concentrations.tolist(),
                        "source_row": c.source_row,
                        "score": c.score,
                    }
                    for c in r.candidates
                ],
                "matches": [
                    {"candidate_index": m.candidate_index,
                     "ranked": [[n, s] for n, s in m.ranked]}
                    for m in r.matches
                ],
                "decisions": [asdict(d) for d in r.decisions_applied],
                "status_after": r.status_after,
            }
            for r in session.iteration_log
        ],
    }
