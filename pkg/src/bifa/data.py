"""Multi-study data container, CSV ingestion and per-study preprocessing."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionError, ParseError, SchemaError


@dataclass(frozen=True)
class MultiStudyDataset:
    """S study matrices (rows = subjects) measured on a common set of P variables.

    ``covariates`` is an optional list of N_s x Q matrices, used only by MOM-SS.
    ``warnings`` collects non-fatal preprocessing notes (e.g. constant columns).
    """

    studies: tuple[np.ndarray, ...]
    variable_names: tuple[str, ...]
    study_names: tuple[str, ...]
    covariates: tuple[np.ndarray, ...] | None = None
    warnings: tuple[str, ...] = field(default=())

    def __post_init__(self):
        studies = tuple(np.array(y, dtype=float) for y in self.studies)
        if len(studies) < 1:
            raise DimensionError("dataset needs at least one study")
        P = studies[0].shape[1] if studies[0].ndim == 2 else -1
        for s, y in enumerate(studies):
            if y.ndim != 2 or y.shape[1] != P:
                raise DimensionError(f"study {s} has shape {y.shape}, expected (N_s, {P})")
            if y.shape[0] < 2:
                raise DimensionError(f"study {s} has {y.shape[0]} rows; need at least 2")
            if not np.all(np.isfinite(y)):
                raise DimensionError(f"study {s} contains non-finite values")
            y.setflags(write=False)
        if P < 1:
            raise DimensionError("dataset needs at least one variable")
        object.__setattr__(self, "studies", studies)

        names = tuple(self.variable_names) if self.variable_names else tuple(f"V{p + 1}" for p in range(P))
        if len(names) != P:
            raise SchemaError(f"{len(names)} variable names for {P} columns")
        object.__setattr__(self, "variable_names", names)
        snames = tuple(self.study_names) if self.study_names else tuple(f"study{s + 1}" for s in range(len(studies)))
        if len(snames) != len(studies):
            raise SchemaError(f"{len(snames)} study names for {len(studies)} studies")
        object.__setattr__(self, "study_names", snames)

        if self.covariates is not None:
            cov = tuple(np.atleast_1d(np.array(x, dtype=float)) for x in self.covariates)
            cov = tuple(x[:, None] if x.ndim == 1 else x for x in cov)
            if len(cov) != len(studies):
                raise DimensionError("one covariate matrix per study is required")
            Q = cov[0].shape[1]
            for s, x in enumerate(cov):
                if x.shape != (studies[s].shape[0], Q):
                    raise DimensionError(f"covariates for study {s} have shape {x.shape}")
                if not np.all(np.isfinite(x)):
                    raise DimensionError(f"covariates for study {s} contain non-finite values")
                x.setflags(write=False)
            object.__setattr__(self, "covariates", cov)

    @property
    def S(self) -> int:
        return len(self.studies)

    @property
    def P(self) -> int:
        return self.studies[0].shape[1]

    @property
    def N(self) -> tuple[int, ...]:
        return tuple(y.shape[0] for y in self.studies)

    @property
    def Q(self) -> int:
        return 0 if self.covariates is None else self.covariates[0].shape[1]

    def pooled(self) -> np.ndarray:
        return np.vstack(self.studies)

    def subset_rows(self, rows: Sequence[np.ndarray]) -> "MultiStudyDataset":
        """Row subset per study (used for train/test splits and CV folds)."""
        studies = tuple(y[idx] for y, idx in zip(self.studies, rows))
        cov = None
        if self.covariates is not None:
            cov = tuple(x[idx] for x, idx in zip(self.covariates, rows))
        return replace(self, studies=studies, covariates=cov)

    def with_studies(self, studies: Sequence[np.ndarray]) -> "MultiStudyDataset":
        return replace(self, studies=tuple(studies))

    def reordered(self, first: str) -> "MultiStudyDataset":
        """Move study ``first`` to the front, keeping the others in order."""
        if first not in self.study_names:
            raise SchemaError(f"unknown study {first!r}; studies are {', '.join(self.study_names)}")
        order = [self.study_names.index(first)] + [s for s, n in enumerate(self.study_names) if n != first]
        cov = None if self.covariates is None else tuple(self.covariates[s] for s in order)
        return replace(self, studies=tuple(self.studies[s] for s in order),
                       study_names=tuple(self.study_names[s] for s in order), covariates=cov)


@dataclass(frozen=True)
class PreprocessSpec:
    center: bool = True
    scale: bool = False
    log_offset: float | None = None

    def __post_init__(self):
        if self.scale and not self.center:
            raise ValueError("scaling requires centering")


def _read_csv(path: Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DimensionError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if r]
    if not body:
        raise DimensionError(f"{path}: no data rows")
    out = np.empty((len(body), len(header)))
    for i, row in enumerate(body):
        if len(row) != len(header):
            raise SchemaError(f"{path}: row {i + 1} has {len(row)} fields, header has {len(header)}")
        for j, cell in enumerate(row):
            try:
                # float() ignores the process locale: '.' is always the decimal separator
                out[i, j] = float(cell)
            except ValueError:
                raise ParseError(f"{path}: non-numeric value {cell!r} at row {i + 1}, column {header[j]!r}") from None
    if not np.all(np.isfinite(out)):
        i, j = np.argwhere(~np.isfinite(out))[0]
        raise ParseError(f"{path}: missing or non-finite value at row {i + 1}, column {header[j]!r}")
    return header, out


def load_dataset(paths, covariate_paths=None, study_names=None) -> MultiStudyDataset:
    """Read one CSV per study (header row of variable names, identical across files)."""
    paths = [Path(p) for p in paths]
    if not paths:
        raise DimensionError("no study files given")
    header0 = None
    studies = []
    for path in paths:
        header, y = _read_csv(path)
        if header0 is None:
            header0 = header
        elif header != header0:
            bad = next((h for h, h0 in zip(header, header0) if h != h0), None)
            if bad is None:
                bad = f"<{len(header)} columns vs {len(header0)}>"
            raise SchemaError(f"{path}: header does not match {paths[0]} (offending column {bad!r})")
        studies.append(y)
    covariates = None
    if covariate_paths:
        if len(covariate_paths) != len(paths):
            raise DimensionError("need one covariate file per study")
        covariates = [_read_csv(Path(p))[1] for p in covariate_paths]
    names = study_names or [p.stem for p in paths]
    return MultiStudyDataset(tuple(studies), tuple(header0), tuple(names), covariates)


def save_dataset(ds: MultiStudyDataset, directory, prefix: str = "study") -> list[Path]:
    """Write each study as ``{prefix}{s}.csv``; values are written with 17 significant digits."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for s, y in enumerate(ds.studies):
        path = directory / f"{prefix}{s + 1}.csv"
        write_matrix_csv(path, y, ds.variable_names)
        written.append(path)
        if ds.covariates is not None:
            cpath = directory / f"{prefix}{s + 1}_covariates.csv"
            write_matrix_csv(cpath, ds.covariates[s], [f"X{q + 1}" for q in range(ds.Q)])
    return written


def write_matrix_csv(path, matrix, header=None):
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    if header is None:
        header = [f"V{j + 1}" for j in range(matrix.shape[1])]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in matrix:
            w.writerow([repr(float(v)) for v in row])


def preprocess(ds: MultiStudyDataset, spec: PreprocessSpec) -> MultiStudyDataset:
    """Optional log(x + c), then per-study column centering and scaling.

    Constant columns under ``scale`` are centered only and reported in ``warnings``.
    """
    notes = list(ds.warnings)
    out = []
    for s, y in enumerate(ds.studies):
        y = np.array(y, dtype=float)
        if spec.log_offset is not None:
            if np.any(y + spec.log_offset <= 0):
                raise ValueError(f"study {s}: log transform needs values > {-spec.log_offset}")
            y = np.log(y + spec.log_offset)
        if spec.center:
            y = y - y.mean(axis=0)
            # a second pass removes the residual rounding left by one subtraction
            y = y - y.mean(axis=0)
        if spec.scale:
            sd = y.std(axis=0, ddof=1)
            const = sd < 1e-12 * max(1.0, float(np.abs(y).max(initial=0.0)))
            if np.any(const):
                cols = [ds.variable_names[j] for j in np.flatnonzero(const)]
                notes.append(f"constant columns left unscaled in {ds.study_names[s]}: {', '.join(cols)}")
            sd = np.where(const, 1.0, sd)
            y = y / sd
            y = np.where(const[None, :], 0.0, y)
        out.append(y)
    return replace(ds, studies=tuple(out), warnings=tuple(notes))
