"""Command-line entry points.

Exit codes are stable for scripting: 0 success, 1 runtime failure,
2 usage error.  Reports are written as JSON plus delimited tables, with
figures rendered alongside unless suppressed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import cone, nmf, pipeline, recovery, report, synth
from .fitting import ResidualMatrix, box_constrained_ls, compute_residual
from .recovery import BregmanConfig
from .spectra import (
    ConcentrationBounds,
    SpectraError,
    Spectrum,
    load_library,
    load_spectra_csv,
    save_spectra_csv,
    MixtureMatrix,
    _format_float,
)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class UsageError(ValueError):
    pass


def _parse_knowns(items):
    knowns = []
    for item in items or []:
        name, sep, bound = item.rpartition(":")
        if not sep or not name:
            raise UsageError(f"--known expects name:bound, got {item!r}")
        try:
            knowns.append((name, float(bound)))
        except ValueError:
            raise UsageError(f"invalid bound in {item!r}") from None
    return knowns


def _load_inputs(args):
    data = load_spectra_csv(args.data)
    library = load_library(args.lib, target=data.grid)
    return data, library


def _pipeline_config(args) -> pipeline.PipelineConfig:
    if args.n is not None and args.n < 1:
        raise UsageError("--n must be >= 1")
    if args.mu <= 0:
        raise UsageError("--mu must be > 0")
    return pipeline.PipelineConfig(
        bregman=BregmanConfig(mu=args.mu),
        n_sources=args.n,
        match_threshold=args.auto,
        max_iterations=args.max_iterations,
    )


def cmd_gen(args) -> int:
    try:
        cfg = synth.BenchmarkConfig(
            benchmark=args.benchmark,
            p=args.points,
            noise_sigma=args.noise,
            seed=args.seed,
        )
    except SpectraError as exc:
        raise UsageError(str(exc)) from None
    bench = synth.gen_benchmark(cfg)
    paths = synth.save_benchmark(bench, args.out)
    for key, path in paths.items():
        print(f"{key}: {path}")
    return EXIT_OK


def cmd_fit(args) -> int:
    data, library = _load_inputs(args)
    knowns = _parse_knowns(args.known)
    if not knowns:
        raise UsageError("fit needs at least one --known name:bound")
    names = [n for n, _ in knowns]
    bounds = ConcentrationBounds(dict(knowns), total_bound=args.total_bound)
    A = library.matrix(names)
    S = box_constrained_ls(data, A, names, bounds)
    residual = compute_residual(data, A, S, clamp=args.clamp)
    os.makedirs(args.out, exist_ok=True)
    conc_path = os.path.join(args.out, "concentrations.csv")
    with open(conc_path, "w", encoding="utf-8") as fh:
        fh.write("substance," + ",".join(f"laser_{w:g}nm" for w in data.laser_wavelengths) + "\n")
        for i, name in enumerate(names):
            fh.write(name + "," + ",".join(_format_float(float(v)) for v in S.values[i]) + "\n")
    res_path = os.path.join(args.out, "residual.csv")
    save_spectra_csv(
        MixtureMatrix.from_values(data.grid, residual.values, data.laser_wavelengths),
        res_path,
    )
    stats = {
        "converged": S.converged,
        "negative_fraction": residual.negative_fraction,
        "negative_min": residual.negative_min,
        "residual_norm": residual.frobenius_norm,
    }
    with open(os.path.join(args.out, "fit_stats.json"), "w", encoding="utf-8") as fh:
        json.dump(stats, fh, sort_keys=True, indent=1)
        fh.write("\n")
    print(f"concentrations: {conc_path}")
    print(f"residual: {res_path}")
    return EXIT_OK


def cmd_score(args) -> int:
    data = load_spectra_csv(args.data)
    values = np.maximum(data.values, 0.0)
    scores = cone.score_rows(values)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "scores.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("row,wavenumber_cm1,score\n")
        for rs in scores:
            fh.write(
                f"{rs.row_index},{_format_float(float(data.grid.wavenumbers[rs.row_index]))},"
                f"{_format_float(rs.score)}\n"
            )
    print(f"scores: {path}")
    return EXIT_OK


def cmd_extract(args) -> int:
    data = load_spectra_csv(args.data)
    if args.n is not None and args.n < 1:
        raise UsageError("--n must be >= 1")
    if args.mu <= 0:
        raise UsageError("--mu must be > 0")
    values = np.maximum(data.values, 0.0)
    scores = cone.score_rows(values)
    n = args.n or cone.estimate_source_count(scores, args.max_n)
    selection = cone.select_vertices(scores, values, n)
    residual = ResidualMatrix(data.grid, values, 0.0, 0.0)
    sources = recovery.recover_sources(residual, selection, BregmanConfig(mu=args.mu))
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "extracted.csv")
    cols = MixtureMatrix.from_values(
        data.grid,
        sources.values,
        list(range(sources.n_sources)),
        labels=[f"component_{k}" for k in range(sources.n_sources)],
    )
    save_spectra_csv(cols, path)
    meta = {
        "n": n,
        "source_rows": list(selection.source_indices),
        "scores": [float(s) for s in selection.scores],
        "mixing": selection.rows.tolist(),
    }
    with open(os.path.join(args.out, "extracted.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)
        fh.write("\n")
    print(f"extracted: {path}")
    return EXIT_OK


def cmd_match(args) -> int:
    data = load_spectra_csv(args.candidate)
    library = load_library(args.lib, target=data.grid)
    for j, column in enumerate(data.columns):
        result = pipeline.match_library(
            Spectrum(data.grid, column.intensities, label=column.label),
            library,
            top_k=args.top_k,
            candidate_index=j,
        )
        ranked = ", ".join(f"{name}={sim:.4f}" for name, sim in result.ranked)
        print(f"candidate {j}: {ranked}")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    data, library = _load_inputs(args)
    knowns = _parse_knowns(args.known)
    config = _pipeline_config(args)
    if args.interactive:
        confirmer = interactive_confirmer()
    else:
        confirmer = pipeline.auto_confirmer(args.auto)
    os.makedirs(args.out, exist_ok=True)
    session = pipeline.new_session(data, library, knowns, args.total_bound, config)
    code = EXIT_OK
    try:
        pipeline.run_pipeline(
            data, library, knowns, total_bound=args.total_bound,
            config=config, confirmer=confirmer, session=session,
        )
    except Exception as exc:  # partial report below is part of the contract
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_RUNTIME
    written = report.write_report(session, args.out, figures=not args.no_figures)
    print(f"report: {written['report_json']}", file=sys.stderr)
    return code


def cmd_compare_nmf(args) -> int:
    data, library = _load_inputs(args)
    knowns = _parse_knowns(args.known)
    names = [n for n, _ in knowns]
    if knowns:
        bounds = ConcentrationBounds(dict(knowns), total_bound=args.total_bound)
        A = library.matrix(names)
        S = box_constrained_ls(data, A, names, bounds)
        residual = compute_residual(data, A, S, clamp=False)
    else:
        residual = ResidualMatrix(data.grid, data.values.copy(), 0.0, 0.0)
    clamped = residual.clamped()

    sigma = pipeline.estimate_noise_floor(residual.values)
    norms = np.linalg.norm(clamped.values, axis=1)
    floor = max(0.3 * norms.max(initial=0.0), 4.0 * sigma * np.sqrt(data.n_mixtures))
    filtered = np.where((norms >= floor)[:, None], clamped.values, 0.0)
    scores = cone.score_rows(filtered)
    n = args.n or cone.estimate_source_count(scores, args.max_n)
    selection = cone.select_vertices(scores, filtered, n)
    cone_sources = recovery.recover_sources(clamped, selection, BregmanConfig(mu=args.mu))

    W, M, history = nmf.nmf_factorize(clamped, nmf.NmfConfig(n=n, seed=args.seed))

    truth_cols = None
    truth_names = None
    if args.truth:
        truth = synth.load_ground_truth(args.truth)
        truth_cols = np.asarray(truth["sources"], dtype=float)
        truth_names = truth.get("unknown_names")

    def cosines(cols: np.ndarray):
        if truth_cols is None:
            return None
        out = []
        for j in range(truth_cols.shape[1]):
            t = truth_cols[:, j]
            t_norm = np.linalg.norm(t)
            best = 0.0
            for k in range(cols.shape[1]):
                c = cols[:, k]
                c_norm = np.linalg.norm(c)
                if c_norm > 0 and t_norm > 0:
                    best = max(best, float(t @ c) / (t_norm * c_norm))
            out.append(best)
        return out

    payload = {
        "n": n,
        "cone_bregman": {
            "source_rows": list(selection.source_indices),
            "cosines_to_truth": cosines(cone_sources.values),
        },
        "nmf": {
            "iterations": len(history) - 1,
            "final_objective": history[-1],
            "cosines_to_truth": cosines(W),
        },
        "truth_names": truth_names,
        "truth_available": truth_cols is not None,
    }
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "compare_nmf.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")

    with open(os.path.join(args.out, "compare_nmf.csv"), "w", encoding="utf-8") as fh:
        fh.write("method,source,cosine_to_truth\n")
        for method, cos in (("cone_bregman", payload["cone_bregman"]["cosines_to_truth"]),
                            ("nmf", payload["nmf"]["cosines_to_truth"])):
            if cos is None:
                fh.write(f"{method},all,unavailable\n")
            else:
                for j, value in enumerate(cos):
                    label = truth_names[j] if truth_names else str(j)
                    fh.write(f"{method},{label},{_format_float(float(value))}\n")

    if not args.no_figures:
        _compare_figure(data, cone_sources.values, W, truth_cols, args.out)
    print(f"comparison: {path}")
    return EXIT_OK


def _compare_figure(data, cone_cols, nmf_cols, truth_cols, outdir):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    wn = data.grid.wavenumbers
    k = max(cone_cols.shape[1], nmf_cols.shape[1])
    fig, axes = plt.subplots(k, 2, figsize=(11, 3 * k), squeeze=False)
    for j in range(k):
        for col, cols, title in ((0, cone_cols, "cone + sparse recovery"), (1, nmf_cols, "NMF")):
            ax = axes[j][col]
            if j < cols.shape[1]:
                v = cols[:, j]
                scale = v.max()
                ax.plot(wn, v / (scale if scale > 0 else 1.0), lw=0.9, label=f"estimate {j}")
            if truth_cols is not None and j < truth_cols.shape[1]:
                t = truth_cols[:, j]
                ax.plot(wn, t / (t.max() if t.max() > 0 else 1.0), lw=0.8, ls="--",
                        label="ground truth")
            ax.set_title(title, fontsize=9)
            ax.legend(fontsize=7)
            ax.set_xlabel("wavenumber (cm$^{-1}$)")
    fig.tight_layout()
    fig.savefig(os.path.join(outdir, "compare_nmf.png"), dpi=120)
    plt.close(fig)


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(data_dir=args.data_dir, library_dir=args.lib, static_dir=args.static)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return EXIT_OK


def interactive_confirmer(input_fn=input, out=sys.stderr):
    """Prompt the analyst per candidate: a substance name confirms, empty rejects."""

    def decide(session: pipeline.Session):
        decisions = []
        record = session.iteration_log[-1]
        for cand in session.pending_candidates:
            match = next((m for m in record.matches if m.candidate_index == cand.index), None)
            ranked = ", ".join(f"{n}={s:.3f}" for n, s in match.ranked) if match else "no matches"
            print(f"candidate {cand.index}: {ranked}", file=out)
            answer = input_fn(f"confirm candidate {cand.index} as (empty=reject): ").strip()
            if answer:
                decisions.append(pipeline.Decision(cand.index, "confirm", answer))
            else:
                decisions.append(pipeline.Decision(cand.index, "reject"))
        return decisions

    return decide


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="specunmix",
        description="Semi-blind spectral unmixing: bounded fitting plus blind residual extraction.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic benchmark")
    p.add_argument("--benchmark", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=None,
                   help="noise sigma relative to peak intensity (default per benchmark)")
    p.add_argument("--points", type=int, default=synth.DEFAULT_GRID_POINTS)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("fit", help="bounded least-squares fit of known references")
    p.add_argument("--data", required=True)
    p.add_argument("--lib", required=True)
    p.add_argument("--known", action="append", metavar="NAME:BOUND")
    p.add_argument("--total-bound", type=float, default=None)
    p.add_argument("--clamp", action="store_true", help="clamp residual negatives to zero")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("score", help="score residual rows by cone extremality")
    p.add_argument("--data", required=True, help="residual CSV (clamped internally)")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("extract", help="blind extraction from a residual CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--max-n", type=int, default=4)
    p.add_argument("--mu", type=float, default=recovery.DEFAULT_MU)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("match", help="match candidate spectra against a library")
    p.add_argument("--candidate", required=True, help="CSV of candidate spectra")
    p.add_argument("--lib", required=True)
    p.add_argument("--top-k", type=int, default=3)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("pipeline", help="full iterative identification loop")
    p.add_argument("--data", required=True)
    p.add_argument("--lib", required=True)
    p.add_argument("--known", action="append", metavar="NAME:BOUND")
    p.add_argument("--total-bound", type=float, default=None)
    p.add_argument("--mu", type=float, default=recovery.DEFAULT_MU)
    p.add_argument("--n", type=int, default=None, help="fixed source count (default: auto)")
    p.add_argument("--auto", type=float, default=0.9,
                   help="auto-confirm threshold (ignored with --interactive)")
    p.add_argument("--interactive", action="store_true")
    p.add_argument("--max-iterations", type=int, default=10)
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("compare-nmf", help="cone+sparse recovery vs NMF on one residual")
    p.add_argument("--data", required=True)
    p.add_argument("--lib", required=True)
    p.add_argument("--known", action="append", metavar="NAME:BOUND")
    p.add_argument("--total-bound", type=float, default=None)
    p.add_argument("--truth", default=None, help="ground-truth sidecar JSON")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--max-n", type=int, default=4)
    p.add_argument("--mu", type=float, default=recovery.DEFAULT_MU)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_compare_nmf)

    p = sub.add_parser("serve", help="run the analyst HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8642)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--lib", default=None, help="library directory served to clients")
    p.add_argument("--static", default=None, help="directory of frontend assets to serve at /")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SpectraError, pipeline.DecisionError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
