"""Subvector index sets and the sample matrices attached to them."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class SubvectorSpec:
    """Named, ordered, 1-based index set into the full D-vector."""

    name: str
    indices: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        if not self.indices:
            raise DataError(f"subvector {self.name!r}: empty index set")
        if len(set(self.indices)) != len(self.indices):
            raise DataError(f"subvector {self.name!r}: repeated indices {self.indices}")
        if min(self.indices) < 1:
            raise DataError(f"subvector {self.name!r}: indices are 1-based")

    @property
    def dim(self) -> int:
        return len(self.indices)

    @property
    def columns(self) -> np.ndarray:
        """0-based column positions."""
        return np.asarray(self.indices, dtype=np.intp) - 1

    def check_within(self, D: int) -> None:
        if max(self.indices) > D:
            raise DataError(f"subvector {self.name!r}: index {max(self.indices)} exceeds D={D}")


def check_cover(specs, D: int) -> None:
    """All indices lie in [1, D] and their union is {1..D}."""
    covered: set[int] = set()
    for s in specs:
        s.check_within(D)
        covered.update(s.indices)
    missing = sorted(set(range(1, D + 1)) - covered)
    if missing:
        raise DataError(f"index sets do not cover coordinates {missing}")


@dataclass
class SampleSet:
    spec: SubvectorSpec
    rows: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim == 1:
            self.rows = self.rows[:, None]
        if self.rows.ndim != 2 or self.rows.shape[1] != self.spec.dim:
            raise DataError(
                f"sample set {self.spec.name!r}: expected {self.spec.dim} columns, got shape {self.rows.shape}"
            )
        if self.rows.shape[0] < 1:
            raise DataError(f"sample set {self.spec.name!r}: no rows")
        if not np.all(np.isfinite(self.rows)):
            raise DataError(f"sample set {self.spec.name!r}: non-finite values")

    @property
    def n(self) -> int:
        return self.rows.shape[0]


def read_csv_matrix(path, expected_cols: int | None = None) -> tuple[list[str], np.ndarray]:
    """Read a header-plus-floats CSV. Ragged or non-numeric rows raise DataError with the line number."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        width = len(header)
        if expected_cols is not None and width != expected_cols:
            raise DataError(f"{path}: line 1: expected {expected_cols} columns, header has {width}")
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise DataError(f"{path}: line {line_no}: expected {width} fields, found {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise DataError(f"{path}: line {line_no}: non-numeric field") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    return header, np.asarray(rows, dtype=np.float64)


def write_csv_matrix(path, header, rows) -> None:
    """Write rows with 17 significant digits so values round-trip exactly."""
    rows = np.asarray(rows)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in np.atleast_1d(r)])


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.17g}"
