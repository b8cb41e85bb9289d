"""Core spectral data types and file ingestion.

A measurement is a matrix of Raman spectra: rows run over a common
wavenumber grid, columns over mixtures acquired at distinct laser
wavelengths.  Reference libraries hold named pure-substance spectra,
resampled onto the measurement grid before fitting.

All types are immutable after construction and all operations are pure,
so instances can be shared freely across threads.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, field

import numpy as np


class SpectraError(ValueError):
    """Invalid spectral data (bad grid, malformed file, shape mismatch)."""


def _as_float_array(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1:
        raise SpectraError(f"{name} must be one-dimensional")
    if not np.all(np.isfinite(arr)):
        raise SpectraError(f"{name} must be finite")
    return arr


@dataclass(frozen=True)
class SpectralGrid:
    """Strictly increasing wavenumber axis (cm^-1), at least two samples."""

    wavenumbers: np.ndarray

    def __post_init__(self):
        arr = _as_float_array(self.wavenumbers, "wavenumbers")
        if arr.size < 2:
            raise SpectraError("grid needs at least two wavenumbers")
        if np.any(np.diff(arr) <= 0):
            raise SpectraError("non-monotonic grid: wavenumbers must be strictly increasing")
        arr.flags.writeable = False
        object.__setattr__(self, "wavenumbers", arr)

    def __len__(self) -> int:
        return self.wavenumbers.size

    def __eq__(self, other) -> bool:
        return isinstance(other, SpectralGrid) and np.array_equal(
            self.wavenumbers, other.wavenumbers
        )

    @property
    def span(self) -> tuple[float, float]:
        return float(self.wavenumbers[0]), float(self.wavenumbers[-1])


@dataclass(frozen=True)
class Spectrum:
    """One spectrum on a grid, in arbitrary detector units."""

    grid: SpectralGrid
    intensities: np.ndarray
    label: str = ""

    def __post_init__(self):
        arr = _as_float_array(self.intensities, "intensities")
        if arr.size != len(self.grid):
            raise SpectraError(
                f"intensities length {arr.size} does not match grid length {len(self.grid)}"
            )
        arr.flags.writeable = False
        object.__setattr__(self, "intensities", arr)

    @property
    def max_intensity(self) -> float:
        return float(np.max(self.intensities))


@dataclass(frozen=True)
class MixtureMatrix:
    """Measured mixture spectra, one column per laser wavelength."""

    grid: SpectralGrid
    columns: tuple[Spectrum, ...]
    laser_wavelengths: tuple[float, ...]

    def __post_init__(self):
        cols = tuple(self.columns)
        lasers = tuple(float(w) for w in self.laser_wavelengths)
        if len(cols) < 1:
            raise SpectraError("mixture matrix needs at least one column")
        if len(lasers) != len(cols):
            raise SpectraError("laser_wavelengths length must equal column count")
        for col in cols:
            if col.grid != self.grid:
                raise SpectraError("all columns must share the mixture grid")
        object.__setattr__(self, "columns", cols)
        object.__setattr__(self, "laser_wavelengths", lasers)

    @classmethod
    def from_values(cls, grid: SpectralGrid, values, laser_wavelengths,
                    labels=None) -> "MixtureMatrix":
        values = np.asarray(values, dtype=float)
        if values.ndim != 2 or values.shape[0] != len(grid):
            raise SpectraError("values must be a p x m array on the given grid")
        lasers = tuple(float(w) for w in laser_wavelengths)
        if labels is None:
            labels = [f"{w:g}" for w in lasers]
        cols = tuple(
            Spectrum(grid, values[:, j], label=labels[j]) for j in range(values.shape[1])
        )
        return cls(grid, cols, lasers)

    @property
    def values(self) -> np.ndarray:
        """p x m intensity array."""
        return np.column_stack([c.intensities for c in self.columns])

    @property
    def n_mixtures(self) -> int:
        return len(self.columns)

    @property
    def n_samples(self) -> int:
        return len(self.grid)


@dataclass(frozen=True)
class ReferenceLibrary:
    """Named nonnegative pure-substance spectra on one common grid."""

    entries: dict[str, Spectrum] = field(default_factory=dict)

    def __post_init__(self):
        entries = dict(self.entries)
        grids = {id(s.grid): s.grid for s in entries.values()}
        if entries:
            first = next(iter(entries.values())).grid
            for name, spec in entries.items():
                if spec.grid != first:
                    raise SpectraError(f"library entry {name!r} is not on the shared grid")
                if np.any(spec.intensities < 0):
                    raise SpectraError(f"library entry {name!r} has negative intensities")
        object.__setattr__(self, "entries", entries)

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> list[str]:
        return list(self.entries)

    def matrix(self, names=None) -> np.ndarray:
        """Stack the requested entries (default: all) as columns."""
        names = list(self.entries) if names is None else list(names)
        missing = [n for n in names if n not in self.entries]
        if missing:
            raise SpectraError(f"unknown library entries: {missing}")
        return np.column_stack([self.entries[n].intensities for n in names])

    def resampled(self, target: SpectralGrid) -> "ReferenceLibrary":
        return ReferenceLibrary(
            {name: resample(spec, target) for name, spec in self.entries.items()}
        )


@dataclass(frozen=True)
class ConcentrationBounds:
    """Per-substance upper bounds, plus an optional cap on column sums.

    ``total_members`` restricts the sum cap to a subset of substances
    (default: all).  The identification loop uses this so a cap stated for
    the initial knowns does not swallow components confirmed later.
    """

    per_substance: dict[str, float]
    total_bound: float | None = None
    total_members: tuple[str, ...] | None = None

    def __post_init__(self):
        per = {str(k): float(v) for k, v in self.per_substance.items()}
        for name, bound in per.items():
            if bound < 0:
                raise SpectraError(f"bound for {name!r} must be >= 0")
        if self.total_bound is not None:
            total = float(self.total_bound)
            if total <= 0:
                raise SpectraError("total_bound must be > 0 when given")
            object.__setattr__(self, "total_bound", total)
        if self.total_members is not None:
            members = tuple(str(n) for n in self.total_members)
            unknown = [n for n in members if n not in per]
            if unknown:
                raise SpectraError(f"total_members not covered by bounds: {unknown}")
            object.__setattr__(self, "total_members", members)
        object.__setattr__(self, "per_substance", per)

    def vector(self, names) -> np.ndarray:
        missing = [n for n in names if n not in self.per_substance]
        if missing:
            raise SpectraError(f"no bound given for: {missing}")
        return np.array([self.per_substance[n] for n in names], dtype=float)

    def member_mask(self, names) -> np.ndarray:
        """Boolean mask of which of ``names`` the sum cap applies to."""
        if self.total_members is None:
            return np.ones(len(names), dtype=bool)
        members = set(self.total_members)
        return np.array([n in members for n in names], dtype=bool)


def resample(spectrum: Spectrum, target: SpectralGrid) -> Spectrum:
    """Linearly interpolate a spectrum onto ``target``.

    Points outside the source range get intensity zero: references commonly
    cover a narrower window than measurements and the missing tails carry
    no library information.
    """
    src = spectrum.grid.wavenumbers
    lo, hi = target.span
    if src[-1] < lo or src[0] > hi:
        raise SpectraError("no overlap between source grid and target grid")
    out = np.interp(target.wavenumbers, src, spectrum.intensities, left=0.0, right=0.0)
    return Spectrum(target, out, label=spectrum.label)


def select_columns(X: MixtureMatrix, indices) -> MixtureMatrix:
    """Keep the given mixture columns, preserving order."""
    idx = [int(i) for i in indices]
    if len(set(idx)) != len(idx):
        raise SpectraError("duplicate column index")
    for i in idx:
        if i < 0 or i >= X.n_mixtures:
            raise SpectraError(f"column index {i} out of range for m={X.n_mixtures}")
    return MixtureMatrix(
        X.grid,
        tuple(X.columns[i] for i in idx),
        tuple(X.laser_wavelengths[i] for i in idx),
    )


# -- CSV interchange ---------------------------------------------------------
#
# Canonical format: UTF-8, comma-separated, '#' comment lines ignored.
# Column 1 is the wavenumber; the header row carries one laser wavelength
# (nm) or label per data column.

def parse_spectra_csv(text) -> MixtureMatrix:
    """Parse mixture CSV from a string or text stream."""
    if hasattr(text, "read"):
        text = text.read()
    header = None
    rows = []
    for lineno, raw in enumerate(str(text).splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if header is None:
            header = parts
            if len(header) < 2:
                raise SpectraError(f"line {lineno}: header needs a wavenumber column and data columns")
            continue
        if len(parts) != len(header):
            raise SpectraError(
                f"line {lineno}: expected {len(header)} fields, got {len(parts)}"
            )
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise SpectraError(f"line {lineno}: malformed row ({exc})") from None
    if header is None or not rows:
        raise SpectraError("empty input")
    data = np.asarray(rows, dtype=float)
    grid = SpectralGrid(data[:, 0])
    labels = header[1:]
    lasers = []
    for lab in labels:
        try:
            lasers.append(float(lab))
        except ValueError:
            lasers.append(float(len(lasers)))  # label-only header: positional stand-in
    return MixtureMatrix.from_values(grid, data[:, 1:], lasers, labels=labels)


def format_spectra_csv(X: MixtureMatrix) -> str:
    """Serialize to the canonical CSV format (stable float text, round-trips)."""
    buf = io.StringIO()
    header = ["wavenumber_cm1"] + [_format_float(w) for w in X.laser_wavelengths]
    buf.write(",".join(header) + "\n")
    values = X.values
    wn = X.grid.wavenumbers
    for i in range(values.shape[0]):
        fields = [_format_float(wn[i])] + [_format_float(v) for v in values[i]]
        buf.write(",".join(fields) + "\n")
    return buf.getvalue()


def _format_float(x: float) -> str:
    return np.format_float_positional(
        float(x), precision=None, unique=True, trim="0"
    )


def load_spectra_csv(path) -> MixtureMatrix:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_spectra_csv(fh)


def save_spectra_csv(X: MixtureMatrix, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_spectra_csv(X))


def load_library(directory, target: SpectralGrid | None = None) -> ReferenceLibrary:
    """Load a library directory of per-substance CSVs (wavenumber, intensity).

    Filenames (minus extension) are the substance names.  When ``target``
    is given every entry is resampled onto it.
    """
    entries = {}
    names = sorted(os.listdir(directory))
    for fname in names:
        if not fname.lower().endswith(".csv"):
            continue
        name = os.path.splitext(fname)[0]
        with open(os.path.join(directory, fname), "r", encoding="utf-8") as fh:
            parsed = parse_spectra_csv(fh)
        if parsed.n_mixtures != 1:
            raise SpectraError(f"library file {fname!r} must have exactly one intensity column")
        spec = Spectrum(parsed.grid, parsed.columns[0].intensities, label=name)
        if target is not None:
            spec = resample(spec, target)
        entries[name] = spec
    if not entries:
        raise SpectraError(f"no CSV library entries found in {directory!r}")
    return ReferenceLibrary(entries)


def save_library(library: ReferenceLibrary, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    for name, spec in library.entries.items():
        single = MixtureMatrix.from_values(
            spec.grid, spec.intensities[:, None], [0.0], labels=["intensity"]
        )
        save_spectra_csv(single, os.path.join(directory, f"{name}.csv"))
