"""Columnar datasets bound to graph vertices, CSV input/output and design matrices."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from itertools import combinations, combinations_with_replacement
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .graph import Admg

__all__ = [
    "DataError",
    "ColumnKind",
    "Dataset",
    "Diagnostic",
    "DesignSpec",
    "BASES",
    "load_csv",
    "write_csv",
    "validate_query",
    "design_matrix",
    "expand_basis",
    "basis_width",
]

BASES = ("main_terms", "interactions", "polynomial")


class DataError(ValueError):
    """Raised when data cannot be parsed or does not match its declared binding."""


class ColumnKind(str, Enum):
    BINARY = "binary"
    CONTINUOUS = "continuous"


@dataclass(frozen=True)
class Diagnostic:
    """A structured finding about data or a fit. ``code`` is a short stable tag."""

    code: str
    message: str
    subject: str | None = None

    def __str__(self) -> str:
        return f"{self.code}: {self.message}"


@dataclass(frozen=True)
class Dataset:
    """Rows of numeric observations grouped by vertex.

    Parameters
    ----------
    columns : mapping of str to 1-d float arrays
        All data columns by column name.
    binding : mapping of vertex name to tuple of column names
        Columns spanned by each vertex, in order.
    kinds : mapping of column name to :class:`ColumnKind`
        Columns missing from this mapping are continuous.
    """

    columns: Mapping[str, np.ndarray]
    binding: Mapping[str, tuple[str, ...]]
    kinds: Mapping[str, ColumnKind] = field(default_factory=dict)

    def __post_init__(self):
        cols = {}
        lengths = set()
        for name, values in self.columns.items():
            arr = np.array(values, dtype=float, copy=True).reshape(-1)
            arr.setflags(write=False)
            cols[name] = arr
            lengths.add(arr.shape[0])
        if len(lengths) > 1:
            raise DataError(f"columns have different lengths: {sorted(lengths)}")
        binding = {str(v): tuple(c) for v, c in self.binding.items()}
        for v, cs in binding.items():
            if not cs:
                raise DataError(f"vertex {v!r} is bound to no columns")
            for c in cs:
                if c not in cols:
                    raise DataError(f"missing column {c!r} for vertex {v!r}")
        kinds = {c: ColumnKind(k) for c, k in self.kinds.items()}
        for c, arr in cols.items():
            if not np.all(np.isfinite(arr)):
                raise DataError(f"missing or non-finite value in column {c!r}")
            if kinds.get(c) == ColumnKind.BINARY and not np.all((arr == 0) | (arr == 1)):
                raise DataError(f"binary violation in column {c!r}")
        object.__setattr__(self, "columns", cols)
        object.__setattr__(self, "binding", binding)
        object.__setattr__(self, "kinds", kinds)

    @classmethod
    def from_vertices(
        cls,
        data: Mapping[str, np.ndarray],
        binary: Iterable[str] = (),
    ) -> "Dataset":
        """Build from vertex arrays; an ``(n, k)`` array spans columns ``V1..Vk``."""
        columns, binding = {}, {}
        binary = set(binary)
        kinds = {}
        for v, values in data.items():
            arr = np.asarray(values, dtype=float)
            if arr.ndim == 1 or (arr.ndim == 2 and arr.shape[1] == 1):
                names = (v,)
                columns[v] = arr.reshape(-1)
            else:
                names = tuple(f"{v}{j + 1}" for j in range(arr.shape[1]))
                for j, c in enumerate(names):
                    columns[c] = arr[:, j]
            binding[v] = names
            if v in binary:
                kinds.update({c: ColumnKind.BINARY for c in names})
        return cls(columns, binding, kinds)

    @property
    def n(self) -> int:
        if not self.columns:
            return 0
        return next(iter(self.columns.values())).shape[0]

    @property
    def vertices(self) -> tuple[str, ...]:
        return tuple(self.binding)

    def kind(self, column: str) -> ColumnKind:
        return self.kinds.get(column, ColumnKind.CONTINUOUS)

    def is_binary(self, vertex: str) -> bool:
        return all(self.kind(c) == ColumnKind.BINARY for c in self.binding[vertex])

    def arity(self, vertex: str) -> int:
        return len(self.binding[vertex])

    def vertex(self, name: str) -> np.ndarray:
        """Values of ``name`` as an ``(n, arity)`` array."""
        try:
            cols = self.binding[name]
        except KeyError:
            raise DataError(f"vertex {name!r} is not bound in the dataset") from None
        return np.column_stack([self.columns[c] for c in cols])

    def scalar(self, name: str) -> np.ndarray:
        """Values of a single-column vertex as a 1-d array."""
        if self.arity(name) != 1:
            raise DataError(f"vertex {name!r} spans {self.arity(name)} columns")
        return self.columns[self.binding[name][0]]

    def matrix(self, names: Sequence[str], overrides: Mapping[str, float] | None = None) -> np.ndarray:
        """Stack the columns of ``names``; vertices in ``overrides`` are set to a constant."""
        overrides = overrides or {}
        blocks = []
        for v in names:
            if v in overrides:
                blocks.append(np.full((self.n, self.arity(v)), float(overrides[v])))
            else:
                blocks.append(self.vertex(v))
        if not blocks:
            return np.empty((self.n, 0))
        return np.hstack(blocks)

    def column_names(self, names: Sequence[str]) -> list[str]:
        return [c for v in names for c in self.binding[v]]

    def take(self, rows: np.ndarray) -> "Dataset":
        """Subset (or resample) rows by integer index or boolean mask."""
        return Dataset({c: v[rows] for c, v in self.columns.items()}, self.binding, self.kinds)

    def with_vertex(self, name: str, values: np.ndarray) -> "Dataset":
        """Replace the values of an existing vertex."""
        arr = np.asarray(values, dtype=float).reshape(self.n, -1)
        cols = dict(self.columns)
        for j, c in enumerate(self.binding[name]):
            cols[c] = arr[:, j]
        return Dataset(cols, self.binding, self.kinds)

    def rebind(self, binding: Mapping[str, Sequence[str]]) -> "Dataset":
        """Same columns under a different vertex binding (e.g. after merging vertices)."""
        return Dataset(self.columns, {v: tuple(c) for v, c in binding.items()}, self.kinds)


def _parse_cell(text: str, column: str, line: int) -> float:
    s = text.strip()
    if s == "" or s.lower() in {"na", "nan", "null", "none"}:
        raise DataError(f"missing value in column {column!r} on line {line}")
    try:
        value = float(s)
    except ValueError:
        raise DataError(f"non-numeric cell {text!r} in column {column!r} on line {line}") from None
    if not math.isfinite(value):
        raise DataError(f"non-finite cell {text!r} in column {column!r} on line {line}")
    return value


def load_csv(
    path: str | Path,
    binding: Mapping[str, Sequence[str]],
    kinds: Mapping[str, ColumnKind | str] | None = None,
) -> Dataset:
    """Read a comma-separated file with a header row into a :class:`Dataset`.

    Only the columns named in ``binding`` are read. Numbers must use ``.`` as the
    decimal separator; parsing does not depend on the process locale.
    """
    kinds = dict(kinds or {})
    needed = [c for cols in binding.values() for c in cols]
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        index = {}
        for c in needed:
            if c not in header:
                raise DataError(f"missing column {c!r} in {path}")
            index[c] = header.index(c)
        values: dict[str, list[float]] = {c: [] for c in needed}
        for line, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < len(header):
                raise DataError(f"line {line} has {len(row)} fields, expected {len(header)}")
            for c in needed:
                values[c].append(_parse_cell(row[index[c]], c, line))
    return Dataset(values, binding, kinds)


def write_csv(dataset: Dataset, path: str | Path) -> None:
    """Write every bound column, in binding order, with full float precision."""
    cols = [c for cs in dataset.binding.values() for c in cs]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        arrays = [dataset.columns[c] for c in cols]
        for i in range(dataset.n):
            writer.writerow([repr(float(a[i])) for a in arrays])


def validate_query(dataset: Dataset, admg: Admg, treatment: str, outcome: str) -> list[Diagnostic]:
    """Check that ``dataset`` can support estimation of the treatment's effect on the outcome."""
    out = []
    for v in admg.vertices:
        if v.name not in dataset.binding:
            out.append(Diagnostic("missing vertex", f"vertex {v.name!r} has no data columns", v.name))
        elif dataset.arity(v.name) != v.arity:
            out.append(
                Diagnostic(
                    "arity mismatch",
                    f"vertex {v.name!r} has arity {v.arity} but {dataset.arity(v.name)} columns",
                    v.name,
                )
            )
    for role, v in (("treatment", treatment), ("outcome", outcome)):
        if not admg.has_vertex(v):
            out.append(Diagnostic("unknown vertex", f"{role} {v!r} is not in the graph", v))
    if treatment in dataset.binding:
        if dataset.arity(treatment) != 1 or not dataset.is_binary(treatment):
            out.append(Diagnostic("treatment not binary", f"treatment {treatment!r} must be one binary column", treatment))
        else:
            a = dataset.scalar(treatment)
            for level in (0, 1):
                if not np.any(a == level):
                    out.append(
                        Diagnostic("degenerate treatment arm", f"no rows with {treatment}={level}", treatment)
                    )
    if outcome in dataset.binding and dataset.arity(outcome) != 1:
        out.append(Diagnostic("outcome not scalar", f"outcome {outcome!r} must be one column", outcome))
    if dataset.n == 0:
        out.append(Diagnostic("empty dataset", "dataset has no rows"))
    return out


@dataclass(frozen=True)
class DesignSpec:
    """Predictor vertices plus the basis used to expand them.

    ``polynomial`` uses every monomial of total degree ``1..degree``; binary columns
    never appear with an exponent above one. ``interactions`` adds every pairwise
    product of distinct columns to the main terms.
    """

    predictors: tuple[str, ...]
    basis: str = "main_terms"
    degree: int = 2
    intercept: bool = True

    def __post_init__(self):
        object.__setattr__(self, "predictors", tuple(self.predictors))
        if self.basis not in BASES:
            raise DataError(f"unknown basis {self.basis!r}; expected one of {BASES}")
        if int(self.degree) < 1:
            raise DataError("polynomial degree must be at least 1")


def basis_width(k: int, basis: str, degree: int = 2, intercept: bool = True) -> int:
    """Number of design columns for ``k`` continuous scalar predictors."""
    if basis == "main_terms":
        w = k
    elif basis == "interactions":
        w = k + k * (k - 1) // 2
    elif basis == "polynomial":
        w = math.comb(k + degree, degree) - 1
    else:
        raise DataError(f"unknown basis {basis!r}")
    return w + int(intercept)


def expand_basis(
    x: np.ndarray,
    basis: str = "main_terms",
    degree: int = 2,
    intercept: bool = True,
    binary: Sequence[bool] | None = None,
) -> np.ndarray:
    """Expand raw predictor columns ``x`` (n, k) into a design matrix."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, k = x.shape
    binary = list(binary) if binary is not None else [False] * k
    cols = [np.ones(n)] if intercept else []
    if basis == "main_terms":
        cols += [x[:, j] for j in range(k)]
    elif basis == "interactions":
        cols += [x[:, j] for j in range(k)]
        cols += [x[:, i] * x[:, j] for i, j in combinations(range(k), 2)]
    elif basis == "polynomial":
        for d in range(1, degree + 1):
            for idx in combinations_with_replacement(range(k), d):
                if any(binary[j] and idx.count(j) > 1 for j in set(idx)):
                    continue
                col = np.ones(n)
                for j in idx:
                    col = col * x[:, j]
                cols.append(col)
    else:
        raise DataError(f"unknown basis {basis!r}")
    if not cols:
        return np.empty((n, 0))
    return np.column_stack(cols)


def design_matrix(
    dataset: Dataset, spec: DesignSpec, overrides: Mapping[str, float] | None = None
) -> np.ndarray:
    """Design matrix of ``spec`` on ``dataset``; multivariate vertices expand to their columns."""
    for v in spec.predictors:
        if v not in dataset.binding:
            raise DataError(f"predictor {v!r} is not in the dataset")
    raw = dataset.matrix(spec.predictors, overrides)
    binary = [dataset.kind(c) == ColumnKind.BINARY for c in dataset.column_names(spec.predictors)]
    return expand_basis(raw, spec.basis, spec.degree, spec.intercept, binary)
