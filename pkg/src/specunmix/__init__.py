"""Semi-blind spectral unmixing toolkit.

Bounded least-squares fitting of known reference spectra, convex-cone
identification of hidden mixing rows in the residual, nonnegative sparse
recovery of the hidden source spectra, and an analyst-in-the-loop
iteration that feeds confirmed components back into the fit.
"""

from .spectra import (
    SpectralGrid,
    Spectrum,
    MixtureMatrix,
    ReferenceLibrary,
    ConcentrationBounds,
    SpectraError,
    parse_spectra_csv,
    format_spectra_csv,
    load_spectra_csv,
    save_spectra_csv,
    load_library,
    save_library,
    resample,
    select_columns,
)
from .fitting import (
    ConcentrationMatrix,
    ResidualMatrix,
    box_constrained_ls,
    compute_residual,
)
from .cone import (
    RowScore,
    MixingEstimate,
    nnls,
    score_rows,
    select_vertices,
    estimate_source_count,
)
from .recovery import (
    BregmanConfig,
    SourceMatrix,
    DivergenceError,
    shrink_plus,
    linearized_bregman,
    recover_sources,
    pinv_recover,
)
from .nmf import NmfConfig, nmf_factorize
from .synth import (
    PeakSpec,
    BenchmarkConfig,
    Benchmark,
    GroundTruth,
    gen_source_spectrum,
    verify_standalone_peaks,
    gen_benchmark,
    save_benchmark,
    load_ground_truth,
)
from .pipeline import (
    PipelineConfig,
    Session,
    Decision,
    MatchResult,
    match_library,
    new_session,
    run_iteration,
    run_pipeline,
    auto_confirmer,
    scripted_confirmer,
)

__version__ = "0.1.0"
