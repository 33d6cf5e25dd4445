"""CSV storage for per-run simulation records."""

from __future__ import annotations

import csv
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import ClassVar, Generic, TypeVar


class StorageError(Exception):
    """Raised when a result file cannot be read or written."""


def _format(value: object) -> object:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return value


@dataclass(frozen=True)
class Q10RunRecord:
    method: str
    q10_true: float
    regularization: str
    n: int
    rep: int
    status: str = "ok"
    q10_hat: float | None = None
    theta: float | None = None
    std_error: float | None = None
    ci_lo: float | None = None
    ci_hi: float | None = None
    rb_rmse: float | None = None
    seed: int = 0
    error: str = ""

    COLUMNS: ClassVar[tuple[str, ...]] = (
        "method",
        "q10_true",
        "regularization",
        "n",
        "rep",
        "status",
        "q10_hat",
        "theta",
        "std_error",
        "ci_lo",
        "ci_hi",
        "rb_rmse",
        "seed",
        "error",
    )

    @property
    def cell(self) -> tuple:
        return (self.method, self.q10_true, self.regularization, self.n, self.rep)

    def to_row(self) -> dict:
        """Convert to a dict suitable for csv.DictWriter."""
        return {k: _format(v) for k, v in asdict(self).items()}

    @classmethod
    def from_row(cls, row: dict) -> Q10RunRecord:
        return cls(
            method=row.get("method", ""),
            q10_true=float(row.get("q10_true") or "nan"),
            regularization=row.get("regularization", ""),
            n=int(row.get("n") or 0),
            rep=int(row.get("rep") or 0),
            status=row.get("status", ""),
            q10_hat=_parse_optional_float(row.get("q10_hat", "")),
            theta=_parse_optional_float(row.get("theta", "")),
            std_error=_parse_optional_float(row.get("std_error", "")),
            ci_lo=_parse_optional_float(row.get("ci_lo", "")),
            ci_hi=_parse_optional_float(row.get("ci_hi", "")),
            rb_rmse=_parse_optional_float(row.get("rb_rmse", "")),
            seed=int(row.get("seed") or 0),
            error=row.get("error", ""),
        )


_FLUXES = ("gpp", "reco", "nee", "nee_noisy")
_SCORES = ("r2", "rmse", "bias")


@dataclass(frozen=True)
class LueRunRecord:
    method: str
    sigma: float
    rep: int
    status: str = "ok"
    n_rows: int = 0
    windows_skipped: int = 0
    gpp_r2: float | None = None
    gpp_rmse: float | None = None
    gpp_bias: float | None = None
    reco_r2: float | None = None
    reco_rmse: float | None = None
    reco_bias: float | None = None
    nee_r2: float | None = None
    nee_rmse: float | None = None
    nee_bias: float | None = None
    nee_noisy_r2: float | None = None
    nee_noisy_rmse: float | None = None
    nee_noisy_bias: float | None = None
    seed: int = 0
    error: str = ""

    COLUMNS: ClassVar[tuple[str, ...]] = (
        "method",
        "sigma",
        "rep",
        "status",
        "n_rows",
        "windows_skipped",
        *(f"{flux}_{s}" for flux in _FLUXES for s in _SCORES),
        "seed",
        "error",
    )

    @property
    def cell(self) -> tuple:
        return (self.method, self.sigma, self.rep)

    def to_row(self) -> dict:
        """Convert to a dict suitable for csv.DictWriter."""
        return {k: _format(v) for k, v in asdict(self).items()}

    @classmethod
    def from_row(cls, row: dict) -> LueRunRecord:
        scores = {
            f"{flux}_{s}": _parse_optional_float(row.get(f"{flux}_{s}", ""))
            for flux in _FLUXES
            for s in _SCORES
        }
        return cls(
            method=row.get("method", ""),
            sigma=float(row.get("sigma") or "nan"),
            rep=int(row.get("rep") or 0),
            status=row.get("status", ""),
            n_rows=int(row.get("n_rows") or 0),
            windows_skipped=int(row.get("windows_skipped") or 0),
            seed=int(row.get("seed") or 0),
            error=row.get("error", ""),
            **scores,
        )


R = TypeVar("R", Q10RunRecord, LueRunRecord)


class ResultStorage(Generic[R]):
    """Append-only CSV of run records, rewritten in cell order at the end of a sweep."""

    def __init__(self, csv_path: str | Path, record_type: type[R], fsync: bool = False) -> None:
        self._path = Path(csv_path)
        self._type = record_type
        self._columns = record_type.COLUMNS
        self._fsync = fsync

    @property
    def path(self) -> Path:
        return self._path

    def initialize(self) -> None:
        """Create parent dirs and write the header if the file doesn't exist or is empty.

        Raises StorageError if the file already has content but its header does
        not match the record columns, to prevent silent column misalignment.
        """
        self._path.parent.mkdir(parents=True, exist_ok=True)
        if self._path.exists() and self._path.stat().st_size > 0:
            try:
                with open(self._path, newline="") as f:
                    first_line = f.readline().strip()
            except OSError as e:
                raise StorageError(f"Failed to read CSV header: {e}") from e
            existing_cols = tuple(first_line.split(","))
            if existing_cols != self._columns:
                raise StorageError(
                    f"CSV schema mismatch: expected {self._columns}, found {existing_cols}"
                )
        else:
            self._write([])

    def append(self, record: R) -> None:
        """Append a single record; initializes the file if needed."""
        if not self._path.exists() or self._path.stat().st_size == 0:
            self.initialize()
        try:
            with open(self._path, "a", newline="") as f:
                writer = csv.DictWriter(f, fieldnames=self._columns)
                writer.writerow(record.to_row())
                f.flush()
                if self._fsync:
                    os.fsync(f.fileno())
        except OSError as e:
            raise StorageError(f"Failed to append record: {e}") from e

    def read_all(self) -> list[R]:
        if not self._path.exists() or self._path.stat().st_size == 0:
            return []
        try:
            with open(self._path, newline="") as f:
                return [self._type.from_row(row) for row in csv.DictReader(f)]
        except (OSError, ValueError) as e:
            raise StorageError(f"Failed to read {self._path}: {e}") from e

    def rewrite_sorted(self, order: list[tuple]) -> list[R]:
        """Rewrite the file with one record per cell, in the given cell order.

        Later records for the same cell replace earlier ones; cells not in
        ``order`` are kept after the ordered ones.
        """
        latest: dict[tuple, R] = {}
        for record in self.read_all():
            latest[record.cell] = record
        ordered = [latest.pop(cell) for cell in order if cell in latest]
        ordered.extend(latest.values())
        self._write(ordered)
        return ordered

    def _write(self, records: list[R]) -> None:
        tmp = self._path.with_suffix(self._path.suffix + ".tmp")
        try:
            with open(tmp, "w", newline="") as f:
                writer = csv.DictWriter(f, fieldnames=self._columns)
                writer.writeheader()
                for record in records:
                    writer.writerow(record.to_row())
            os.replace(tmp, self._path)
        except OSError as e:
            raise StorageError(f"Failed to write {self._path}: {e}") from e


def _parse_optional_float(value: str) -> float | None:
    if value == "":
        return None
    return float(value)
