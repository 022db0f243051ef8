"""Data containers, CSV/label I/O and preprocessing transforms.

Numeric routines elsewhere in the package work on plain ``numpy`` arrays;
:class:`DataMatrix` implements ``__array__`` so it can be passed anywhere an
array is expected.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import special, stats

__all__ = [
    "DataError",
    "ParseError",
    "ShapeError",
    "DataMatrix",
    "Partition",
    "MeanShiftSpec",
    "load_csv",
    "save_csv",
    "load_matrix",
    "load_labels",
    "save_labels",
    "rank_transform_to_normality",
    "center_groups",
    "apply_mean_shift",
    "subsample",
]

_FINITE_CHUNK = 1 << 22


class DataError(ValueError):
    """Base class for invalid input data."""


class ParseError(DataError):
    def __init__(self, message: str, row: int | None = None, col: int | None = None):
        loc = ""
        if row is not None:
            loc = f" (row {row}" + (f", col {col})" if col is not None else ")")
        super().__init__(message + loc)
        self.row = row
        self.col = col


class ShapeError(DataError):
    pass


def _all_finite(values: np.ndarray) -> bool:
    flat = values.reshape(-1)
    for start in range(0, flat.size, _FINITE_CHUNK):
        if not np.isfinite(flat[start:start + _FINITE_CHUNK]).all():
            return False
    return True


@dataclass(frozen=True, eq=False)
class DataMatrix:
    """An ``n x p`` real matrix with optional row and column identifiers.

    ``row_ids``/``col_ids`` of ``None`` mean positional identifiers; they are
    materialised on demand by :meth:`row_names` and :meth:`col_names`, which
    keeps very wide matrices cheap.
    """

    values: np.ndarray
    row_ids: tuple | None = None
    col_ids: tuple | None = None

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise ShapeError(f"expected a 2-D matrix, got ndim={values.ndim}")
        n, p = values.shape
        if n < 1 or p < 1:
            raise ShapeError(f"matrix must be at least 1x1, got {n}x{p}")
        if not np.issubdtype(values.dtype, np.floating):
            values = values.astype(np.float64)
        if not _all_finite(values):
            bad = np.argwhere(~np.isfinite(values))[0]
            raise ParseError("non-finite value", row=int(bad[0]), col=int(bad[1]))
        object.__setattr__(self, "values", values)
        for name, ids, size in (("row_ids", self.row_ids, n), ("col_ids", self.col_ids, p)):
            if ids is None:
                continue
            ids = tuple(ids)
            if len(ids) != size:
                raise ShapeError(f"{name} has length {len(ids)}, expected {size}")
            if len(set(ids)) != size:
                raise DataError(f"{name} are not unique")
            object.__setattr__(self, name, ids)

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.values
        return self.values.astype(dtype)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]

    def row_names(self) -> tuple:
        return self.row_ids if self.row_ids is not None else tuple(str(i + 1) for i in range(self.n))

    def col_names(self) -> tuple:
        return self.col_ids if self.col_ids is not None else tuple(f"V{j + 1}" for j in range(self.p))

    def with_values(self, values: np.ndarray) -> "DataMatrix":
        """Same identifiers, new values of identical shape."""
        return DataMatrix(values, self.row_ids, self.col_ids)


@dataclass(frozen=True, eq=False)
class Partition:
    """Group labels in ``{1..k}`` for ``n`` items."""

    labels: np.ndarray
    k: int = field(default=0)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 1 or labels.size == 0:
            raise ShapeError("labels must be a non-empty 1-D vector")
        if not np.issubdtype(labels.dtype, np.integer):
            if not np.all(np.equal(np.mod(labels, 1), 0)):
                raise DataError("labels must be integers")
            labels = labels.astype(np.int64)
        k = int(self.k) if self.k else int(labels.max())
        if labels.min() < 1 or labels.max() > k:
            raise DataError(f"labels must lie in 1..{k}")
        object.__setattr__(self, "labels", labels.astype(np.int64, copy=False))
        object.__setattr__(self, "k", k)

    def __array__(self, dtype=None, copy=None):
        return self.labels if dtype is None else self.labels.astype(dtype)

    def __len__(self) -> int:
        return self.labels.size

    @classmethod
    def from_zero_based(cls, labels, k: int | None = None) -> "Partition":
        labels = np.asarray(labels, dtype=np.int64) + 1
        return cls(labels, k or int(labels.max()))

    def zero_based(self) -> np.ndarray:
        return self.labels - 1

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels - 1, minlength=self.k)

    def members(self, group: int) -> np.ndarray:
        """Row indices (0-based) of ``group`` (1-based)."""
        return np.flatnonzero(self.labels == group)


@dataclass(frozen=True)
class MeanShiftSpec:
    d: float
    center_group: int = 1
    seed: int | None = 0

    def __post_init__(self):
        if not self.d >= 0:
            raise ValueError(f"mean shift d must be nonnegative, got {self.d}")


# -- I/O ---------------------------------------------------------------------

def load_csv(path: str | Path, has_header: bool = False) -> DataMatrix:
    """Read a comma-separated numeric matrix.

    Missing, non-numeric or non-finite cells raise :class:`ParseError` with
    1-based file coordinates; ragged rows and empty files raise
    :class:`ShapeError`.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = None
        rows: list[list[float]] = []
        width = None
        for lineno, record in enumerate(reader, start=1):
            if not record or (len(record) == 1 and not record[0].strip()):
                continue
            if has_header and header is None:
                header = [c.strip() for c in record]
                width = len(header)
                continue
            if width is None:
                width = len(record)
            elif len(record) != width:
                raise ShapeError(f"row at line {lineno} has {len(record)} fields, expected {width}")
            parsed = []
            for colno, cell in enumerate(record, start=1):
                try:
                    value = float(cell)
                except ValueError:
                    raise ParseError(f"non-numeric cell {cell.strip()!r}", row=lineno, col=colno) from None
                if not math.isfinite(value):
                    raise ParseError(f"non-finite cell {cell.strip()!r}", row=lineno, col=colno)
                parsed.append(value)
            rows.append(parsed)
    if not rows:
        raise ShapeError(f"{path} contains no data rows")
    return DataMatrix(np.array(rows, dtype=np.float64), None, tuple(header) if header else None)


def save_csv(X, path: str | Path, header: bool = True, fmt: str = "%.17g") -> None:
    values = np.asarray(X)
    with Path(path).open("w", newline="") as fh:
        if header:
            names = X.col_names() if isinstance(X, DataMatrix) else [f"V{j + 1}" for j in range(values.shape[1])]
            fh.write(",".join(names) + "\n")
        np.savetxt(fh, values, delimiter=",", fmt=fmt)


def load_matrix(path: str | Path, has_header: bool = True) -> DataMatrix:
    """Load ``.npy`` arrays directly and everything else as CSV."""
    path = Path(path)
    if path.suffix == ".npy":
        return DataMatrix(np.load(path))
    return load_csv(path, has_header=has_header)


def load_labels(path: str | Path, k: int | None = None) -> Partition:
    """Read a label file: one 1-based integer per line."""
    labels = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            labels.append(int(line))
        except ValueError:
            raise ParseError(f"label {line!r} is not an integer", row=lineno) from None
    if not labels:
        raise ShapeError(f"{path} contains no labels")
    return Partition(np.array(labels), k or 0)


def save_labels(labels, path: str | Path) -> None:
    labels = np.asarray(labels, dtype=np.int64)
    Path(path).write_text("".join(f"{v}\n" for v in labels))


# -- transforms --------------------------------------------------------------

def rank_transform_to_normality(X: DataMatrix) -> DataMatrix:
    """Map each column through ``Phi^-1((rank - 0.5) / n)`` using midranks."""
    values = np.asarray(X)
    n = values.shape[0]
    if n < 2:
        raise ShapeError("rank transform needs at least two rows")
    ranks = stats.rankdata(values, method="average", axis=0)
    out = special.ndtri((ranks - 0.5) / n)
    return _wrap_like(X, out)


def _labels_of(truth, n: int) -> np.ndarray:
    labels = np.asarray(truth, dtype=np.int64)
    if labels.shape != (n,):
        raise ShapeError(f"partition has length {labels.size}, data has {n} rows")
    return labels


def center_groups(X: DataMatrix, truth: Partition) -> DataMatrix:
    """Subtract each group's column means from its rows."""
    values = np.array(X, dtype=np.float64, copy=True)
    labels = _labels_of(truth, values.shape[0])
    k = truth.k if isinstance(truth, Partition) else int(labels.max())
    for g in range(1, k + 1):
        rows = labels == g
        if not rows.any():
            raise DataError(f"group {g} has no rows")
        block = values[rows]
        block -= block.mean(axis=0)
        # a second pass removes the O(eps) residual of the first
        block -= block.mean(axis=0)
        values[rows] = block
    return _wrap_like(X, values)


def group_sign_vectors(p: int, groups: Sequence[int], seed) -> dict[int, np.ndarray]:
    """One ``{-1, +1}^p`` vector per group, drawn in the order given."""
    rng = np.random.default_rng(seed)
    return {g: rng.choice(np.array([-1.0, 1.0]), size=p) for g in groups}


def apply_mean_shift(X: DataMatrix, truth: Partition, spec: MeanShiftSpec) -> DataMatrix:
    """Shift every non-centre group by ``d`` times its own random sign vector.

    Sign vectors are drawn for groups in increasing label order, skipping
    ``spec.center_group``, from a generator seeded with ``spec.seed``.
    """
    values = np.array(X, dtype=np.float64, copy=True)
    labels = _labels_of(truth, values.shape[0])
    if spec.d == 0:
        return _wrap_like(X, values)
    k = truth.k if isinstance(truth, Partition) else int(labels.max())
    others = [g for g in range(1, k + 1) if g != spec.center_group]
    signs = group_sign_vectors(values.shape[1], others, spec.seed)
    for g in others:
        values[labels == g] += spec.d * signs[g]
    return _wrap_like(X, values)


def subsample(X: DataMatrix, row_indices: Iterable[int], col_indices: Iterable[int] | None = None) -> DataMatrix:
    """Select rows and columns (0-based, order preserved, no duplicates)."""
    values = np.asarray(X)
    n, p = values.shape
    rows = _check_index(row_indices, n, "row")
    cols = np.arange(p) if col_indices is None else _check_index(col_indices, p, "column")
    out = values[np.ix_(rows, cols)]
    if isinstance(X, DataMatrix):
        row_ids = None if X.row_ids is None else tuple(X.row_ids[i] for i in rows)
        col_ids = None if X.col_ids is None else tuple(X.col_ids[j] for j in cols)
        return DataMatrix(out, row_ids, col_ids)
    return DataMatrix(out)


def _check_index(indices, size: int, what: str) -> np.ndarray:
    idx = np.asarray(list(indices) if not isinstance(indices, np.ndarray) else indices, dtype=np.int64)
    if idx.ndim != 1 or idx.size == 0:
        raise ShapeError(f"empty {what} index set")
    if idx.min() < 0 or idx.max() >= size:
        raise IndexError(f"{what} index out of range 0..{size - 1}")
    if np.unique(idx).size != idx.size:
        raise DataError(f"duplicate {what} indices")
    return idx


def _wrap_like(X, values: np.ndarray) -> DataMatrix:
    if isinstance(X, DataMatrix):
        return X.with_values(values)
    return DataMatrix(values)
