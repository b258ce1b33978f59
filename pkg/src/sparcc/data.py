"""Observed and complete records, the dataset container and CSV ingestion.

A :class:`Dataset` stores columns as read-only numpy arrays; the
record-level dataclasses exist for single-subject APIs and for building
small datasets by hand.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from ._io import atomic_open
from .errors import DomainError, EmptyDatasetError, ParseError, SchemaError

DEFAULT_MARGIN = 0.05
REQUIRED_COLUMNS = ("y", "w", "delta", "z")


@dataclass(frozen=True)
class ObservedRecord:
    y: float
    w: float
    delta: int
    z: tuple[float, ...]

    def __post_init__(self):
        if self.delta not in (0, 1):
            raise DomainError(f"delta must be 0 or 1, got {self.delta!r}")
        if not math.isfinite(self.y):
            raise DomainError("y must be finite")
        if not isinstance(self.z, tuple):
            z = (float(self.z),) if np.ndim(self.z) == 0 else tuple(float(v) for v in self.z)
            object.__setattr__(self, "z", z)


@dataclass(frozen=True)
class CompleteRecord(ObservedRecord):
    x: float = math.nan
    c: float = math.nan

    @classmethod
    def from_latent(cls, y: float, x: float, c: float, z) -> "CompleteRecord":
        delta = int(x <= c)
        return cls(y=y, w=min(x, c), delta=delta, z=z, x=x, c=c)


def _readonly(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column store of observed records.

    ``scale_factor`` is the divisor already applied to ``w`` (and ``x`` when
    present); 1 means raw units. ``margin`` records the margin used for that
    scaling, or ``None`` when unscaled.
    """

    y: np.ndarray
    w: np.ndarray
    delta: np.ndarray
    z: np.ndarray
    x: np.ndarray | None = None
    c: np.ndarray | None = None
    scale_factor: float = 1.0
    margin: float | None = None
    _levels: tuple = field(default=(), repr=False)

    def __post_init__(self):
        y = _readonly(self.y)
        n = y.shape[0]
        if n == 0:
            raise EmptyDatasetError("dataset has no records")
        w = _readonly(self.w)
        delta = _readonly(self.delta, dtype=np.int8)
        z = np.array(self.z, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        z.setflags(write=False)
        for name, arr in (("w", w), ("delta", delta), ("z", z)):
            if arr.shape[0] != n:
                raise SchemaError(f"column {name} has {arr.shape[0]} rows, expected {n}")
        if not np.all((delta == 0) | (delta == 1)):
            raise DomainError("delta must be 0 or 1")
        if not np.all(np.isfinite(y)):
            raise DomainError("y must be finite")
        if not np.any(delta == 1):
            raise EmptyDatasetError("dataset needs at least one record with delta = 1")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "z", z)
        for name in ("x", "c"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, _readonly(v))
        levels = tuple(map(tuple, np.unique(z, axis=0)))
        object.__setattr__(self, "_levels", levels)

    # -- construction ---------------------------------------------------
    @classmethod
    def from_records(cls, records: Sequence[ObservedRecord], **kwargs) -> "Dataset":
        if not records:
            raise EmptyDatasetError("dataset has no records")
        cols = {
            "y": [r.y for r in records],
            "w": [r.w for r in records],
            "delta": [r.delta for r in records],
            "z": [r.z for r in records],
        }
        if all(isinstance(r, CompleteRecord) for r in records):
            cols["x"] = [r.x for r in records]
            cols["c"] = [r.c for r in records]
        return cls(**cols, **kwargs)

    # -- views ----------------------------------------------------------
    def __len__(self) -> int:
        return self.y.shape[0]

    @property
    def n(self) -> int:
        return len(self)

    @property
    def records(self) -> list[ObservedRecord]:
        return [
            ObservedRecord(float(self.y[i]), float(self.w[i]), int(self.delta[i]), tuple(self.z[i]))
            for i in range(self.n)
        ]

    @property
    def z_levels(self) -> tuple:
        """Distinct observed z rows, as tuples, in sorted order."""
        return self._levels

    @property
    def zs(self) -> np.ndarray:
        """The scalar z column; raises for vector-valued z."""
        if self.z.shape[1] != 1:
            raise DomainError("estimators support a single scalar z column only")
        return self.z[:, 0]

    @property
    def scalar_levels(self) -> np.ndarray:
        return np.unique(self.zs)

    @property
    def censoring_fraction(self) -> float:
        return float(np.mean(self.delta == 0))

    @property
    def has_x(self) -> bool:
        return self.x is not None and bool(np.all(np.isfinite(self.x)))

    def subset(self, mask) -> "Dataset":
        mask = np.asarray(mask)
        return Dataset(
            y=self.y[mask],
            w=self.w[mask],
            delta=self.delta[mask],
            z=self.z[mask],
            x=None if self.x is None else self.x[mask],
            c=None if self.c is None else self.c[mask],
            scale_factor=self.scale_factor,
            margin=self.margin,
        )

    def permuted(self, order) -> "Dataset":
        return self.subset(np.asarray(order))

    def with_columns(self, **changes) -> "Dataset":
        base = dict(
            y=self.y, w=self.w, delta=self.delta, z=self.z, x=self.x, c=self.c,
            scale_factor=self.scale_factor, margin=self.margin,
        )
        base.update(changes)
        return Dataset(**base)


def _parse_float(text: str, column: str, row: int) -> float:
    try:
        value = float(text)
    except (TypeError, ValueError):
        raise ParseError(f"row {row}: column {column!r} is not numeric: {text!r}", row=row) from None
    return value


def load_csv(path, schema: Mapping[str, str] | None = None) -> Dataset:
    """Read a ``y,w,delta,z[,x]`` CSV into an unscaled :class:`Dataset`.

    ``schema`` maps the canonical names (``y``, ``w``, ``delta``, ``z``,
    ``x``) to the header names actually used in the file. Row numbers in
    errors count data rows from 1.
    """
    path = Path(path)
    names = {k: k for k in (*REQUIRED_COLUMNS, "x")}
    if schema:
        names.update(schema)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        if header is None:
            raise EmptyDatasetError(f"{path}: empty file")
        header = [h.strip() for h in header]
        reader.fieldnames = header
        missing = [names[c] for c in REQUIRED_COLUMNS if names[c] not in header]
        if missing:
            raise SchemaError(f"{path}: missing column(s) {', '.join(missing)}")
        has_x = names["x"] in header
        cols: dict[str, list[float]] = {c: [] for c in (*REQUIRED_COLUMNS, "x")}
        for row, rec in enumerate(reader, start=1):
            for c in REQUIRED_COLUMNS:
                cols[c].append(_parse_float(rec[names[c]], c, row))
            d = cols["delta"][-1]
            if d not in (0.0, 1.0):
                raise ParseError(f"row {row}: delta must be 0 or 1, got {rec[names['delta']]!r}", row=row)
            if has_x:
                cell = (rec[names["x"]] or "").strip()
                cols["x"].append(_parse_float(cell, "x", row) if cell else math.nan)
    if not cols["y"]:
        raise EmptyDatasetError(f"{path}: no data rows")
    return Dataset(
        y=cols["y"],
        w=cols["w"],
        delta=np.array(cols["delta"], dtype=np.int8),
        z=cols["z"],
        x=cols["x"] if has_x else None,
    )


def write_csv(dataset: Dataset, path, include_x: bool | None = None) -> None:
    """Write ``dataset`` in the format :func:`load_csv` reads (round-trip exact)."""
    if dataset.z.shape[1] != 1:
        raise SchemaError("CSV output supports a single z column")
    if include_x is None:
        include_x = dataset.x is not None
    with atomic_open(path) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["y", "w", "delta", "z", "x"] if include_x else ["y", "w", "delta", "z"])
        for i in range(dataset.n):
            row = [repr(float(dataset.y[i])), repr(float(dataset.w[i])), int(dataset.delta[i]),
                   repr(float(dataset.z[i, 0]))]
            if include_x:
                row.append(repr(float(dataset.x[i])))
            writer.writerow(row)


def apply_scaling(dataset: Dataset, margin: float = DEFAULT_MARGIN) -> Dataset:
    """Divide ``w`` (and ``x``) by ``max(raw w) * (1 + margin)``.

    Scaling always starts from raw units, so calling it twice with the same
    margin returns the dataset unchanged.
    """
    if margin < 0:
        raise DomainError("margin must be nonnegative")
    if dataset.margin is not None and dataset.margin == margin:
        return dataset
    raw_w = dataset.w * dataset.scale_factor
    if np.any(raw_w <= 0):
        raise DomainError("all w must be positive before scaling")
    factor = float(np.max(raw_w) * (1.0 + margin))
    raw_x = None if dataset.x is None else dataset.x * dataset.scale_factor
    raw_c = None if dataset.c is None else dataset.c * dataset.scale_factor
    return dataset.with_columns(
        w=raw_w / factor,
        x=None if raw_x is None else raw_x / factor,
        c=None if raw_c is None else raw_c / factor,
        scale_factor=factor,
        margin=margin,
    )


def iter_level_masks(dataset: Dataset, levels: Iterable[float] | None = None):
    """Yield ``(level, boolean mask)`` for each scalar z level."""
    zs = dataset.zs
    for level in dataset.scalar_levels if levels is None else levels:
        yield float(level), zs == level
