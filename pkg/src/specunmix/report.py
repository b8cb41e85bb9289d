"""Report rendering: JSON, text summary, delimited tables, and figures.

The JSON report is the machine artifact and is byte-identical across
reruns of the same seeded inputs; wall-clock timings therefore live in
the text summary only.
"""

from __future__ import annotations

import io
import json
import os

import numpy as np

from .pipeline import Session
from .spectra import _format_float


def build_report(session: Session) -> dict:
    """Deterministic pipeline report: substances, concentrations, diagnostics."""
    final = session.iteration_log[-1] if session.iteration_log else None
    substances = []
    for comp in session.known:
        conc = None
        if final is not None and comp.name in final.substance_names:
            conc = final.concentrations[final.substance_names.index(comp.name)].tolist()
        substances.append(
            {
                "name": comp.name,
                "origin": comp.origin,
                "bound": comp.bound,
                "confirmed_iteration": comp.confirmed_iteration,
                "match_score": comp.match_score,
                "concentrations": conc,
            }
        )
    iterations = []
    for rec in session.iteration_log:
        iterations.append(
            {
                "index": rec.index,
                "substances": list(rec.substance_names),
                "residual_norm": rec.residual_norm,
                "residual_rel": rec.residual_rel,
                "negative_fraction": rec.negative_fraction,
                "negative_min": rec.negative_min,
                "noise_floor": rec.noise_floor,
                "rows_kept": rec.rows_kept,
                "candidate_count": len(rec.candidates),
                "matches": [
                    {"candidate": m.candidate_index,
                     "ranked": [[name, sim] for name, sim in m.ranked]}
                    for m in rec.matches
                ],
                "decisions": [
                    {"candidate": d.candidate_index, "action": d.action, "name": d.name}
                    for d in rec.decisions_applied
                ],
                "status_after": rec.status_after,
            }
        )
    return {
        "session_id": session.id,
        "status": session.status,
        "laser_wavelengths_nm": list(session.data.laser_wavelengths),
        "substances": substances,
        "iterations": iterations,
    }


def report_json_text(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=1) + "\n"


def report_text_summary(session: Session) -> str:
    """Human summary including per-iteration wall times."""
    out = io.StringIO()
    out.write(f"session {session.id}: status={session.status}\n")
    out.write(f"mixtures: m={session.data.n_mixtures}, grid points: p={session.data.n_samples}\n")
    out.write("components:\n")
    for comp in session.known:
        tag = comp.origin
        if comp.confirmed_iteration is not None:
            tag += f" (iteration {comp.confirmed_iteration}"
            if comp.match_score is not None:
                tag += f", match {comp.match_score:.3f}"
            tag += ")"
        out.write(f"  {comp.name}: bound {comp.bound:.4g}, {tag}\n")
    out.write("iterations:\n")
    total = 0.0
    for rec in session.iteration_log:
        total += rec.elapsed_s
        out.write(
            f"  [{rec.index}] residual {rec.residual_rel:.4%} of data norm, "
            f"negatives {rec.negative_fraction:.2%}, rows kept {rec.rows_kept}, "
            f"candidates {len(rec.candidates)}, {rec.elapsed_s:.2f}s -> {rec.status_after}\n"
        )
        for m in rec.matches:
            ranked = ", ".join(f"{n}={s:.3f}" for n, s in m.ranked)
            out.write(f"      candidate {m.candidate_index}: {ranked}\n")
        for d in rec.decisions_applied:
            what = f"confirm as {d.name}" if d.action == "confirm" else "reject"
            out.write(f"      decision: candidate {d.candidate_index} -> {what}\n")
    out.write(f"total time: {total:.2f}s\n")
    return out.getvalue()


def _write_csv(path: str, header: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_format_float(v) if isinstance(v, float) else str(v) for v in row) + "\n")


def write_tables(session: Session, outdir: str) -> list[str]:
    """Delimited outputs: final concentrations, iteration diagnostics, candidates."""
    paths = []
    final = session.iteration_log[-1] if session.iteration_log else None
    conc_path = os.path.join(outdir, "concentrations.csv")
    header = ["substance"] + [f"laser_{w:g}nm" for w in session.data.laser_wavelengths]
    rows = []
    if final is not None:
        for i, name in enumerate(final.substance_names):
            rows.append([name] + [float(v) for v in final.concentrations[i]])
    _write_csv(conc_path, header, rows)
    paths.append(conc_path)

    iter_path = os.path.join(outdir, "iterations.csv")
    _write_csv(
        iter_path,
        ["iteration", "residual_norm", "residual_rel", "negative_fraction",
         "rows_kept", "candidates", "status_after"],
        [
            [rec.index, float(rec.residual_norm), float(rec.residual_rel),
             float(rec.negative_fraction), rec.rows_kept, len(rec.candidates),
             rec.status_after]
            for rec in session.iteration_log
        ],
    )
    paths.append(iter_path)

    wn = session.data.grid.wavenumbers
    for rec in session.iteration_log:
        if not rec.candidates:
            continue
        cand_path = os.path.join(outdir, f"candidates_iter{rec.index}.csv")
        header = ["wavenumber_cm1"] + [f"candidate_{c.index}" for c in rec.candidates]
        cols = np.column_stack([c.spectrum for c in rec.candidates])
        _write_csv(
            cand_path,
            header,
            ([float(wn[i])] + [float(v) for v in cols[i]] for i in range(len(wn))),
        )
        paths.append(cand_path)
    return paths


def write_figures(session: Session, outdir: str) -> list[str]:
    """Render overview figures next to the delimited output."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    wn = session.data.grid.wavenumbers

    fig, ax = plt.subplots(figsize=(8, 4.5))
    for spec, laser in zip(session.data.columns, session.data.laser_wavelengths):
        ax.plot(wn, spec.intensities, lw=0.8, label=f"{laser:g} nm")
    ax.set_xlabel("wavenumber (cm$^{-1}$)")
    ax.set_ylabel("intensity (a.u.)")
    ax.set_title("mixture spectra")
    ax.legend(fontsize=8)
    path = os.path.join(outdir, "mixtures.png")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    paths.append(path)

    if session.iteration_log:
        fig, ax = plt.subplots(figsize=(6, 4))
        rels = [rec.residual_rel for rec in session.iteration_log]
        ax.plot(range(len(rels)), rels, marker="o")
        ax.axhline(session.config.convergence_threshold, color="gray", ls="--", lw=0.8)
        ax.set_xlabel("iteration")
        ax.set_ylabel("residual / data norm")
        ax.set_yscale("log")
        ax.set_title("residual decay")
        path = os.path.join(outdir, "residual_decay.png")
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)

    for rec in session.iteration_log:
        if not rec.candidates:
            continue
        k = len(rec.candidates)
        fig, axes = plt.subplots(k, 1, figsize=(8, 3 * k), squeeze=False)
        for c, m in zip(rec.candidates, rec.matches):
            ax = axes[c.index][0]
            scale = c.spectrum.max()
            ax.plot(wn, c.spectrum / (scale if scale > 0 else 1.0), lw=0.9,
                    label=f"candidate {c.index}")
            if m.ranked:
                name, sim = m.ranked[0]
                ref = session.library.entries[name].intensities
                ref_scale = ref.max()
                ax.plot(wn, ref / (ref_scale if ref_scale > 0 else 1.0), lw=0.9,
                        ls="--", label=f"{name} (cos {sim:.3f})")
            ax.set_xlabel("wavenumber (cm$^{-1}$)")
            ax.set_ylabel("normalized intensity")
            ax.legend(fontsize=8)
        fig.suptitle(f"iteration {rec.index} candidates")
        path = os.path.join(outdir, f"candidates_iter{rec.index}.png")
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths


def write_report(session: Session, outdir: str, figures: bool = True) -> dict[str, object]:
    """Write report.json, report.txt, tables, and optionally figures."""
    os.makedirs(outdir, exist_ok=True)
    report = build_report(session)
    json_path = os.path.join(outdir, "report.json")
    with open(json_path, "w", encoding="utf-8") as fh:
        fh.write(report_json_text(report))
    txt_path = os.path.join(outdir, "report.txt")
    with open(txt_path, "w", encoding="utf-8") as fh:
        fh.write(report_text_summary(session))
    written = {"report_json": json_path, "report_txt": txt_path}
    written["tables"] = write_tables(session, outdir)
    if figures:
        written["figures"] = write_figures(session, outdir)
    return written
