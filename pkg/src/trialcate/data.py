"""Tabular data model shared by every pipeline stage.

A :class:`Dataset` is an ordered set of named float64 columns plus a mapping
from *roles* (X1, X2, O, treatment, ...) to column names. Datasets are
immutable: every transformation returns a new object and the column arrays
are flagged read-only.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

ROLES = ("X1", "X2", "O", "treatment", "outcome", "selection", "true_ite", "weight")
MULTI_ROLES = ("X1", "X2", "O")
SINGLE_ROLES = ("treatment", "outcome", "selection", "true_ite", "weight")
BINARY_ROLES = ("treatment", "selection")

# select_columns emits feature blocks in this order
FEATURE_ROLE_ORDER = ("X1", "X2", "O")


class DataError(ValueError):
    """Raised when a table violates the dataset invariants."""


def _freeze(values: np.ndarray) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Dataset:
    """Immutable column table with role annotations.

    ``roles`` maps a role name to a tuple of column names. Single-valued roles
    (treatment, outcome, selection, true_ite, weight) hold at most one name.
    Columns without a role are carried along but never used as features.
    """

    columns: Mapping[str, np.ndarray]
    roles: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        cols = {str(k): _freeze(v) for k, v in self.columns.items()}
        roles = {r: tuple(v) for r, v in self.roles.items() if len(v) > 0}
        object.__setattr__(self, "columns", cols)
        object.__setattr__(self, "roles", roles)
        self._validate()

    def _validate(self) -> None:
        lengths = {name: col.shape for name, col in self.columns.items()}
        for name, shape in lengths.items():
            if len(shape) != 1:
                raise DataError(f"column {name!r} is not one-dimensional")
        if len({s[0] for s in lengths.values()}) > 1:
            raise DataError("columns have different lengths")
        seen: dict[str, str] = {}
        for role, names in self.roles.items():
            if role not in ROLES:
                raise DataError(f"unknown role {role!r}")
            if role in SINGLE_ROLES and len(names) > 1:
                raise DataError(f"role {role!r} maps to more than one column")
            for name in names:
                if name not in self.columns:
                    raise DataError(f"role {role!r} references missing column {name!r}")
                if name in seen:
                    raise DataError(
                        f"column {name!r} assigned to both {seen[name]!r} and {role!r}"
                    )
                seen[name] = role
        for name, col in self.columns.items():
            if not np.all(np.isfinite(col)):
                raise DataError(f"column {name!r} contains missing or non-finite values")
        for role in BINARY_ROLES:
            for name in self.roles.get(role, ()):
                col = self.columns[name]
                if not np.all((col == 0.0) | (col == 1.0)):
                    raise DataError(f"{role} not binary in column {name!r}")
        for name in self.roles.get("weight", ()):
            if not np.all(self.columns[name] > 0.0):
                raise DataError(f"weight column {name!r} must be strictly positive")

    @property
    def n_rows(self) -> int:
        if not self.columns:
            return 0
        return int(next(iter(self.columns.values())).shape[0])

    @property
    def column_names(self) -> list[str]:
        return list(self.columns)

    def has_role(self, role: str) -> bool:
        return len(self.roles.get(role, ())) > 0

    def role_columns(self, role: str) -> tuple[str, ...]:
        return self.roles.get(role, ())

    def column(self, name: str) -> np.ndarray:
        return self.columns[name]

    def role_vector(self, role: str) -> np.ndarray:
        """Return the single column bound to a single-valued role."""
        names = self.roles.get(role, ())
        if not names:
            raise DataError(f"role {role!r} not populated")
        return self.columns[names[0]]

    def subset(self, rows: np.ndarray | Sequence[int]) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset({k: v[rows] for k, v in self.columns.items()}, self.roles)

    def with_column(self, name: str, values: np.ndarray, role: str | None = None) -> "Dataset":
        """Return a copy with ``name`` added (or replaced) and optionally bound to ``role``."""
        cols = dict(self.columns)
        cols[name] = values
        roles = {r: tuple(c for c in v if c != name) for r, v in self.roles.items()}
        if role is not None:
            if role in SINGLE_ROLES:
                roles[role] = (name,)
            else:
                roles[role] = roles.get(role, ()) + (name,)
        return Dataset(cols, roles)

    def with_roles(self, **roles: Iterable[str]) -> "Dataset":
        new = dict(self.roles)
        for role, names in roles.items():
            new[role] = tuple(names)
        return Dataset(self.columns, new)

    def to_matrix(self, names: Sequence[str]) -> np.ndarray:
        if not names:
            return np.empty((self.n_rows, 0))
        return np.column_stack([self.columns[n] for n in names])


@dataclass(frozen=True)
class SchemaConfig:
    """Column roles and CSV dialect used when ingesting a file.

    ``extra`` lists columns to keep without a role. With ``header=False`` the
    columns are addressed positionally as ``c0, c1, ...``.
    """

    X1: tuple[str, ...] = ()
    X2: tuple[str, ...] = ()
    O: tuple[str, ...] = ()
    treatment: str | None = None
    outcome: str | None = None
    selection: str | None = None
    true_ite: str | None = None
    weight: str | None = None
    extra: tuple[str, ...] = ()
    delimiter: str = ","
    header: bool = True

    def __post_init__(self) -> None:
        for name in ("X1", "X2", "O", "extra"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        names = self.all_columns()
        if len(names) != len(set(names)):
            raise DataError("schema assigns a column to more than one role")

    def role_map(self) -> dict[str, tuple[str, ...]]:
        roles: dict[str, tuple[str, ...]] = {r: getattr(self, r) for r in MULTI_ROLES}
        for r in SINGLE_ROLES:
            value = getattr(self, r)
            roles[r] = (value,) if value else ()
        return roles

    def all_columns(self) -> list[str]:
        out: list[str] = []
        for names in self.role_map().values():
            out.extend(names)
        out.extend(self.extra)
        return out


def _parse_column(name: str, raw: Sequence[str], path: Path) -> np.ndarray:
    try:
        values = np.array(raw, dtype=np.float64)
    except ValueError:
        for i, cell in enumerate(raw):
            try:
                float(cell)
            except ValueError:
                raise DataError(
                    f"{path}: non-numeric cell {cell!r} in column {name!r} (data row {i + 1})"
                ) from None
        raise
    if not np.all(np.isfinite(values)):
        raise DataError(f"{path}: column {name!r} contains missing or non-finite values")
    return values


def load_dataset(path: str | os.PathLike, schema: SchemaConfig | None = None) -> Dataset:
    """Read a CSV file into a :class:`Dataset`.

    Without a schema every column is loaded and left unassigned. With one,
    only the schema's columns are loaded (in file order) and bound to roles.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    delimiter = schema.delimiter if schema else ","
    header_expected = schema.header if schema else True
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh, delimiter=delimiter))
    if header_expected:
        if not rows:
            raise DataError(f"{path}: header row missing")
        header, body = rows[0], rows[1:]
    else:
        width = len(rows[0]) if rows else 0
        header, body = [f"c{i}" for i in range(width)], rows
    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicate column names in header")
    for i, row in enumerate(body):
        if len(row) != len(header):
            raise DataError(f"{path}: row {i + 1} has {len(row)} cells, expected {len(header)}")

    wanted = header if schema is None else schema.all_columns()
    missing = [c for c in wanted if c not in header]
    if missing:
        raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
    keep = [c for c in header if c in set(wanted)]
    index = {c: i for i, c in enumerate(header)}
    columns = {
        c: _parse_column(c, [row[index[c]] for row in body], path) for c in keep
    }
    roles = schema.role_map() if schema else {}
    return Dataset(columns, roles)


def write_dataset(dataset: Dataset, path: str | os.PathLike) -> None:
    """Write ``dataset`` as a comma-separated file with a header row.

    Values use the shortest repr that round-trips exactly.
    """
    path = Path(path)
    names = dataset.column_names
    cols = [dataset.columns[n].tolist() for n in names]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(names) + "\n")
        for row in zip(*cols):
            fh.write(",".join(map(repr, row)) + "\n")


def select_columns(dataset: Dataset, roles: Iterable[str]) -> np.ndarray:
    """Feature matrix for the requested roles.

    Blocks are ordered X1, X2, O regardless of the order of ``roles``; within
    a block columns follow the dataset's role order.
    """
    requested = set(roles)
    unknown = requested - set(FEATURE_ROLE_ORDER)
    if unknown:
        raise DataError(f"not a feature role: {', '.join(sorted(unknown))}")
    names: list[str] = []
    for role in FEATURE_ROLE_ORDER:
        if role in requested:
            if not dataset.has_role(role):
                raise DataError(f"role {role!r} not populated")
            names.extend(dataset.role_columns(role))
    return dataset.to_matrix(names)
