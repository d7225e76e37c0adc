"""Instrument-grouped observations, CSV ingestion and fold assignment.

A :class:`GroupedSample` stores the pooled units as flat arrays sorted by
instrument cell.  Cells are the levels of the discrete instrument; cell
``k`` (1-based) holds ``n_k`` units ``(x, y)`` and a fold label per unit.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class GroupedDataError(ValueError):
    """Base class for data ingestion errors."""


class MissingColumn(GroupedDataError):
    def __init__(self, column):
        super().__init__(f"missing column {column!r}")
        self.column = column


class NonNumericValue(GroupedDataError):
    def __init__(self, row, column=None, value=None):
        super().__init__(f"non-numeric value {value!r} in column {column!r} on row {row}")
        self.row = row
        self.column = column
        self.value = value


class EmptyFile(GroupedDataError):
    pass


class FoldsUnassigned(ValueError):
    pass


SCHEMES = ("two_fold", "leave_one_out")


@dataclass(frozen=True)
class Cell:
    """Read-only view of one instrument cell."""

    k: int
    x: np.ndarray
    y: np.ndarray
    fold: np.ndarray
    N: int

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def weight(self) -> float:
        return self.n / self.N


def _freeze(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class GroupedSample:
    """Pooled units sorted by cell.

    Parameters
    ----------
    x : (N, d) array
        Treatment vectors.
    y : (N,) array
        Outcomes.
    cell : (N,) int array
        0-based cell index of each unit, non-decreasing.
    K : int
        Number of cells.
    fold : (N,) int array, optional
        Fold labels in ``{0, 1}``; all zero when unassigned.
    """

    x: np.ndarray
    y: np.ndarray
    cell: np.ndarray
    K: int
    fold: np.ndarray | None = None
    seed: int | None = None
    scheme: str | None = None
    label_map: dict = field(default_factory=dict)

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        y = np.asarray(self.y, dtype=np.float64).ravel()
        cell = np.asarray(self.cell, dtype=np.intp).ravel()
        if not (len(x) == len(y) == len(cell)):
            raise ValueError("x, y and cell must have the same length")
        if len(y) == 0:
            raise EmptyFile("sample has no units")
        if not np.all(np.isfinite(y)) or not np.all(np.isfinite(x)):
            raise ValueError("x and y must be finite")
        if cell.min() < 0 or cell.max() >= self.K:
            raise ValueError("cell index out of range")
        if np.any(np.diff(cell) < 0):
            order = np.argsort(cell, kind="stable")
            x, y, cell = x[order], y[order], cell[order]
            if self.fold is not None:
                object.__setattr__(self, "fold", np.asarray(self.fold)[order])
        counts = np.bincount(cell, minlength=self.K)
        if np.any(counts == 0):
            raise ValueError("every cell needs at least one unit")
        fold = np.zeros(len(y), dtype=np.int8) if self.fold is None else np.asarray(self.fold, dtype=np.int8)
        if fold.shape != y.shape or np.any((fold != 0) & (fold != 1)):
            raise ValueError("fold labels must be 0/1 with one label per unit")
        object.__setattr__(self, "x", _freeze(x))
        object.__setattr__(self, "y", _freeze(y))
        object.__setattr__(self, "cell", _freeze(cell))
        object.__setattr__(self, "fold", _freeze(fold))
        object.__setattr__(self, "_counts", _freeze(counts))
        object.__setattr__(self, "_offsets", _freeze(np.concatenate([[0], np.cumsum(counts)])))

    @property
    def N(self) -> int:
        return len(self.y)

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def n(self) -> np.ndarray:
        """Cell sizes ``n_k``."""
        return self._counts

    @property
    def weights(self) -> np.ndarray:
        return self._counts / self.N

    @property
    def folds_assigned(self) -> bool:
        return self.scheme is not None

    @property
    def estimable(self) -> np.ndarray:
        """Cells with both folds nonempty (``n_k >= 2`` under either scheme)."""
        if self.scheme == "two_fold":
            ones = np.bincount(self.cell, weights=self.fold, minlength=self.K)
            return (ones > 0) & (ones < self._counts)
        return self._counts >= 2

    @property
    def cells(self) -> list[Cell]:
        off = self._offsets
        return [
            Cell(k + 1, self.x[off[k]:off[k + 1]], self.y[off[k]:off[k + 1]],
                 self.fold[off[k]:off[k + 1]], self.N)
            for k in range(self.K)
        ]

    def cell_slice(self, k: int) -> slice:
        """Row slice of 0-based cell ``k``."""
        return slice(int(self._offsets[k]), int(self._offsets[k + 1]))

    def with_folds(self, fold, seed=None, scheme="two_fold") -> GroupedSample:
        return GroupedSample(self.x, self.y, self.cell, self.K, fold=fold, seed=seed,
                             scheme=scheme, label_map=dict(self.label_map))

    def with_y(self, y) -> GroupedSample:
        return GroupedSample(self.x, y, self.cell, self.K, fold=self.fold, seed=self.seed,
                             scheme=self.scheme, label_map=dict(self.label_map))

    def subset(self, mask) -> GroupedSample:
        """Units selected by ``mask``; cells left empty are dropped and relabeled."""
        mask = np.asarray(mask, dtype=bool)
        cell = self.cell[mask]
        kept = np.unique(cell)
        remap = np.full(self.K, -1, dtype=np.intp)
        remap[kept] = np.arange(len(kept))
        return GroupedSample(self.x[mask], self.y[mask], remap[cell], len(kept),
                             fold=self.fold[mask], seed=self.seed, scheme=self.scheme)

    def original_labels(self) -> np.ndarray:
        """Per-unit instrument labels as they appeared in the input."""
        if not self.label_map:
            return self.cell + 1
        inverse = {v: k for k, v in self.label_map.items()}
        return np.array([inverse[c + 1] for c in self.cell], dtype=object)

    def label_map_json(self) -> str:
        return json.dumps({str(k): v for k, v in self.label_map.items()})

    def to_csv(self, path) -> None:
        cols = ["z"] + [f"x{j + 1}" for j in range(self.d)] + ["y"]
        labels = self.original_labels()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for i in range(self.N):
                w.writerow([labels[i], *(repr(float(v)) for v in self.x[i]), repr(float(self.y[i]))])


def _parse_float(text, row, column):
    try:
        value = float(text)
    except (TypeError, ValueError):
        raise NonNumericValue(row, column, text) from None
    if not math.isfinite(value):
        raise NonNumericValue(row, column, text)
    return value


def load_csv(path, x_columns=None, z_column="z", y_column="y") -> GroupedSample:
    """Read a ``z, x1..xd, y`` CSV into a :class:`GroupedSample`.

    Instrument labels are relabeled ``1..K`` in order of first appearance and
    the mapping is kept in ``label_map``.  Row numbers in errors count data
    rows from 1 (the header is not counted).
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyFile(f"{path} is empty")
        header = [h.strip() for h in header]
        if x_columns is None:
            x_columns = sorted((h for h in header if h.startswith("x") and h[1:].isdigit()),
                               key=lambda h: int(h[1:]))
        for col in [z_column, *x_columns, y_column]:
            if col not in header:
                raise MissingColumn(col)
        if not x_columns:
            raise MissingColumn("x1")
        iz = header.index(z_column)
        ix = [header.index(c) for c in x_columns]
        iy = header.index(y_column)
        label_map: dict = {}
        zs, xs, ys = [], [], []
        for row_no, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            zraw = row[iz].strip()
            try:
                zval = int(zraw)
            except ValueError:
                zf = _parse_float(zraw, row_no, z_column)
                if not zf.is_integer():
                    raise NonNumericValue(row_no, z_column, zraw) from None
                zval = int(zf)
            xs.append([_parse_float(row[i], row_no, c) for i, c in zip(ix, x_columns)])
            ys.append(_parse_float(row[iy], row_no, y_column))
            if zval not in label_map:
                label_map[zval] = len(label_map) + 1
            zs.append(label_map[zval] - 1)
    if not ys:
        raise EmptyFile(f"{path} has no data rows")
    return GroupedSample(np.array(xs), np.array(ys), np.array(zs), len(label_map),
                         label_map=label_map)


def cell_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator keyed by ``(seed, *keys)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) % 2**64, *(int(k) for k in keys)]))


def _two_fold_labels(seed, counts):
    fold = np.empty(int(counts.sum()), dtype=np.int8)
    start = 0
    for k, nk in enumerate(counts):
        perm = cell_rng(seed, 0xF01D, k + 1, nk).permutation(nk)
        labels = np.empty(nk, dtype=np.int8)
        labels[perm] = np.arange(nk) % 2
        fold[start:start + nk] = labels
        start += nk
    return fold


def assign_folds(sample: GroupedSample, seed: int, scheme: str = "two_fold") -> GroupedSample:
    """Return a copy of ``sample`` with within-cell fold labels.

    ``two_fold`` shuffles each cell with a generator keyed by
    ``(seed, k, n_k)`` and alternates labels along the permutation, so fold
    sizes differ by at most one.  ``leave_one_out`` leaves labels at zero;
    consumers exclude each unit individually.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown fold scheme {scheme!r}")
    if scheme == "leave_one_out":
        fold = np.zeros(sample.N, dtype=np.int8)
    else:
        fold = _two_fold_labels(seed, sample.n)
    out = sample.with_folds(fold, seed=seed, scheme=scheme)
    small = [k + 1 for k in range(sample.K) if sample.n[k] < 2]
    if small:
        warnings.warn(f"cells with fewer than 2 units are not estimable: {small[:10]}"
                      + (" ..." if len(small) > 10 else ""), stacklevel=2)
    return out


def vfold_labels(sample: GroupedSample, V: int, seed: int) -> np.ndarray:
    """Unit-level V-fold labels, balanced within each cell."""
    labels = np.empty(sample.N, dtype=np.intp)
    for k in range(sample.K):
        sl = sample.cell_slice(k)
        nk = sl.stop - sl.start
        perm = cell_rng(seed, 0xCF, k + 1, nk, V).permutation(nk)
        lab = np.empty(nk, dtype=np.intp)
        lab[perm] = np.arange(nk) % V
        labels[sl] = lab
    return labels
