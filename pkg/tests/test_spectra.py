import io

import numpy as np
import pytest
from hypothesis import given, strategies as st

from specunmix.spectra import (
    ConcentrationBounds,
    MixtureMatrix,
    ReferenceLibrary,
    SpectraError,
    SpectralGrid,
    Spectrum,
    format_spectra_csv,
    load_library,
    parse_spectra_csv,
    resample,
    save_library,
    select_columns,
)

WELL_FORMED = """# comment line
wavenumber_cm1,248,250
100,1.0,2.0
200,3.0,4.0
300,5.0,6.0
"""


def test_parse_well_formed():
    X = parse_spectra_csv(WELL_FORMED)
    assert X.n_samples == 3
    assert X.n_mixtures == 2
    assert X.laser_wavelengths == (248.0, 250.0)
    assert np.allclose(X.values, [[1, 2], [3, 4], [5, 6]])


def test_parse_accepts_stream():
    X = parse_spectra_csv(io.StringIO(WELL_FORMED))
    assert X.n_samples == 3


def test_parse_non_monotonic_grid():
    bad = "wavenumber,l\n100,1\n50,2\n200,3\n"
    with pytest.raises(SpectraError, match="non-monotonic grid"):
        parse_spectra_csv(bad)


def test_parse_empty_input():
    with pytest.raises(SpectraError, match="empty input"):
        parse_spectra_csv("")
    with pytest.raises(SpectraError, match="empty input"):
        parse_spectra_csv("# only a comment\n")


def test_parse_reports_line_number():
    bad = "wavenumber,l\n100,1\n200,not_a_number\n"
    with pytest.raises(SpectraError, match="line 3"):
        parse_spectra_csv(bad)


def test_parse_inconsistent_columns():
    bad = "wavenumber,l\n100,1\n200,2,3\n"
    with pytest.raises(SpectraError, match="line 3"):
        parse_spectra_csv(bad)


def test_round_trip():
    X = parse_spectra_csv(WELL_FORMED)
    again = parse_spectra_csv(format_spectra_csv(X))
    assert again.grid == X.grid
    assert again.laser_wavelengths == X.laser_wavelengths
    assert np.array_equal(again.values, X.values)


def test_round_trip_is_exact_for_awkward_floats():
    grid = SpectralGrid([100.0, 200.0, 300.5])
    values = np.array([[1 / 3, 1e-17], [2.5e8, np.pi], [-1e-9, 7.125]])
    X = MixtureMatrix.from_values(grid, values, [248.0, 250.0])
    again = parse_spectra_csv(format_spectra_csv(X))
    assert np.array_equal(again.values, X.values)
    assert np.array_equal(again.grid.wavenumbers, X.grid.wavenumbers)


def test_grid_invariants():
    with pytest.raises(SpectraError):
        SpectralGrid([100.0])
    with pytest.raises(SpectraError):
        SpectralGrid([100.0, 100.0])
    with pytest.raises(SpectraError):
        SpectralGrid([100.0, np.inf])


def test_spectrum_length_mismatch():
    grid = SpectralGrid([1.0, 2.0])
    with pytest.raises(SpectraError):
        Spectrum(grid, [1.0, 2.0, 3.0])


def test_resample_identity():
    grid = SpectralGrid([1.0, 2.0, 3.0])
    s = Spectrum(grid, [4.0, 5.0, 6.0])
    out = resample(s, grid)
    assert np.array_equal(out.intensities, s.intensities)


def test_resample_linear_midpoint():
    src = Spectrum(SpectralGrid([0.0, 2.0]), [0.0, 4.0])
    out = resample(src, SpectralGrid([1.0, 2.0]))
    assert out.intensities[0] == pytest.approx(2.0)


def test_resample_outside_is_zero():
    src = Spectrum(SpectralGrid([10.0, 20.0]), [1.0, 1.0])
    out = resample(src, SpectralGrid([0.0, 15.0, 40.0]))
    assert out.intensities[0] == 0.0
    assert out.intensities[2] == 0.0


def test_resample_no_overlap():
    src = Spectrum(SpectralGrid([10.0, 20.0]), [1.0, 1.0])
    with pytest.raises(SpectraError, match="overlap"):
        resample(src, SpectralGrid([30.0, 40.0]))


@given(st.lists(st.floats(0.0, 1e6), min_size=2, max_size=16))
def test_resample_preserves_nonnegativity(values):
    src_grid = SpectralGrid(np.arange(len(values), dtype=float))
    src = Spectrum(src_grid, values)
    target = SpectralGrid(np.linspace(-1.0, len(values), 23))
    out = resample(src, target)
    assert np.all(out.intensities >= 0.0)


@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=12))
def test_resample_idempotent_on_own_grid(values):
    src = Spectrum(SpectralGrid(np.arange(len(values), dtype=float)), values)
    target = SpectralGrid(np.linspace(0.5, len(values) - 1.5, 9))
    once = resample(src, target)
    twice = resample(once, target)
    assert np.array_equal(once.intensities, twice.intensities)


def test_select_columns_paper_shape():
    # 21 lasers, keep the five consecutive ones used in the experiments
    grid = SpectralGrid([100.0, 200.0])
    lasers = [240.0 + 2 * k for k in range(21)]
    values = np.arange(42, dtype=float).reshape(2, 21)
    X = MixtureMatrix.from_values(grid, values, lasers)
    keep = [4, 5, 6, 7, 8]
    sub = select_columns(X, keep)
    assert sub.n_mixtures == 5
    assert sub.laser_wavelengths == (248.0, 250.0, 252.0, 254.0, 256.0)
    assert np.array_equal(sub.values, values[:, keep])


def test_select_columns_identity():
    X = parse_spectra_csv(WELL_FORMED)
    same = select_columns(X, [0, 1])
    assert np.array_equal(same.values, X.values)


def test_select_columns_bounds_and_duplicates():
    X = parse_spectra_csv(WELL_FORMED)
    with pytest.raises(SpectraError):
        select_columns(X, [2])
    with pytest.raises(SpectraError):
        select_columns(X, [0, 0])


def test_library_rejects_negative_entries():
    grid = SpectralGrid([1.0, 2.0])
    with pytest.raises(SpectraError):
        ReferenceLibrary({"bad": Spectrum(grid, [1.0, -0.5])})


def test_library_matrix_and_missing_name():
    grid = SpectralGrid([1.0, 2.0])
    lib = ReferenceLibrary(
        {"a": Spectrum(grid, [1.0, 0.0]), "b": Spectrum(grid, [0.0, 2.0])}
    )
    mat = lib.matrix(["b", "a"])
    assert np.array_equal(mat, [[0.0, 1.0], [2.0, 0.0]])
    with pytest.raises(SpectraError):
        lib.matrix(["c"])


def test_library_directory_round_trip(tmp_path):
    grid = SpectralGrid([100.0, 200.0, 300.0])
    lib = ReferenceLibrary(
        {
            "methanol": Spectrum(grid, [0.1, 1.0, 0.2]),
            "ethanol": Spectrum(grid, [0.5, 0.25, 0.0]),
        }
    )
    save_library(lib, tmp_path / "refs")
    loaded = load_library(tmp_path / "refs")
    assert sorted(loaded.names) == ["ethanol", "methanol"]
    for name in lib.names:
        assert np.array_equal(loaded.entries[name].intensities, lib.entries[name].intensities)


def test_bounds_validation():
    with pytest.raises(SpectraError):
        ConcentrationBounds({"a": -0.1})
    with pytest.raises(SpectraError):
        ConcentrationBounds({"a": 1.0}, total_bound=0.0)
    with pytest.raises(SpectraError):
        ConcentrationBounds({"a": 1.0}, total_members=("b",))
    bounds = ConcentrationBounds({"a": 0.5, "b": 1.0}, total_bound=0.5, total_members=("a",))
    assert np.array_equal(bounds.member_mask(["a", "b"]), [True, False])
    assert np.array_equal(bounds.vector(["b", "a"]), [1.0, 0.5])
