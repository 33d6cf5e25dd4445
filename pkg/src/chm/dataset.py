"""Flux-tower time series: CSV ingestion, validation, filtering and variable roles."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

MISSING_SENTINEL = -9999.0
QC_SUFFIX = "_QC"
TIMESTAMP_COLUMNS = ("TIMESTAMP", "TIMESTAMP_START")
SAMPLES_PER_DAY = 48  # half-hourly


class DatasetError(Exception):
    """Raised when flux data or variable roles are missing, malformed or inconsistent."""


class RoleError(DatasetError):
    """Raised when variable roles overlap or name columns the data does not have."""


# ── Timestamps ────────────────────────────────────────────────────
# Instants are YYYYMMDDHHMM integers (FLUXNET TIMESTAMP_START convention).


def stamps_to_datetime64(stamps: np.ndarray) -> np.ndarray:
    """Convert YYYYMMDDHHMM integers to numpy datetime64[m]."""
    ts = np.asarray(stamps, dtype=np.int64)
    year = ts // 10**8
    month = ts // 10**6 % 100
    day = ts // 10**4 % 100
    hour = ts // 100 % 100
    minute = ts % 100
    if ts.size and (
        np.any((month < 1) | (month > 12))
        or np.any((day < 1) | (day > 31))
        or np.any(hour > 23)
        or np.any(minute > 59)
    ):
        raise DatasetError("Timestamp outside YYYYMMDDHHMM range")
    months = ((year - 1970) * 12 + (month - 1)).astype("datetime64[M]")
    result = (
        months.astype("datetime64[m]")
        + (day - 1).astype("timedelta64[D]")
        + hour.astype("timedelta64[h]")
        + minute.astype("timedelta64[m]")
    )
    # catches day overflow such as Feb 31
    if not np.array_equal(datetime64_to_stamps(result), ts):
        raise DatasetError("Timestamp is not a valid calendar instant")
    return result


def datetime64_to_stamps(instants: np.ndarray) -> np.ndarray:
    """Convert datetime64 values to YYYYMMDDHHMM integers."""
    dt = np.asarray(instants).astype("datetime64[m]")
    year = dt.astype("datetime64[Y]").astype(np.int64) + 1970
    month = dt.astype("datetime64[M]").astype(np.int64) % 12 + 1
    day = (dt.astype("datetime64[D]") - dt.astype("datetime64[M]")).astype(np.int64) + 1
    minute_of_day = (dt - dt.astype("datetime64[D]")).astype(np.int64)
    return (
        year * 10**8
        + month * 10**6
        + day * 10**4
        + (minute_of_day // 60) * 100
        + minute_of_day % 60
    )


def half_hourly_stamps(start: str, n: int) -> np.ndarray:
    """n consecutive half-hourly YYYYMMDDHHMM stamps starting at an ISO instant."""
    first = np.datetime64(start, "m")
    return datetime64_to_stamps(first + np.arange(n) * np.timedelta64(30, "m"))


# ── FluxFrame ─────────────────────────────────────────────────────


@dataclass(frozen=True)
class FluxFrame:
    """Immutable columnar table of half-hourly drivers and fluxes.

    Units: TA in °C, SW_IN/SW_POT in W/m², VPD in hPa, NEE/RECO/GPP in
    µmol CO2 m⁻² s⁻¹. ``quality[col]`` is True where the value was measured;
    columns given without a mask are measured wherever they are finite.
    """

    timestamps: np.ndarray
    columns: Mapping[str, np.ndarray]
    quality: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        ts = np.array(self.timestamps, dtype=np.int64)
        if ts.ndim != 1:
            raise DatasetError("timestamps must be one-dimensional")
        n = ts.shape[0]
        if n > 1 and np.any(np.diff(ts) <= 0):
            bad = int(np.argmax(np.diff(ts) <= 0)) + 1
            raise DatasetError(f"Timestamps are not strictly increasing at row {bad}")
        ts.setflags(write=False)

        columns: dict[str, np.ndarray] = {}
        quality: dict[str, np.ndarray] = {}
        for name, values in self.columns.items():
            arr = np.array(values, dtype=np.float64)
            if arr.shape != (n,):
                raise DatasetError(
                    f"Column '{name}' has length {arr.shape[0] if arr.ndim else 0}, expected {n}"
                )
            finite = np.isfinite(arr)
            given = self.quality.get(name)
            if given is None:
                mask = finite
            else:
                mask = np.array(given, dtype=bool)
                if mask.shape != (n,):
                    raise DatasetError(f"Quality mask for '{name}' has wrong length")
                if np.any(mask & ~finite):
                    row = int(np.argmax(mask & ~finite))
                    raise DatasetError(
                        f"Column '{name}' has a non-finite value in measured row {row}"
                    )
            arr.setflags(write=False)
            mask.setflags(write=False)
            columns[name] = arr
            quality[name] = mask
        unknown = set(self.quality) - set(columns)
        if unknown:
            raise DatasetError(f"Quality mask given for unknown column(s): {sorted(unknown)}")

        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "columns", MappingProxyType(columns))
        object.__setattr__(self, "quality", MappingProxyType(quality))

    def __len__(self) -> int:
        return int(self.timestamps.shape[0])

    @property
    def column_names(self) -> tuple[str, ...]:
        return tuple(self.columns)

    @property
    def years(self) -> np.ndarray:
        return self.timestamps // 10**8

    def has_column(self, name: str) -> bool:
        return name in self.columns

    def column(self, name: str) -> np.ndarray:
        if name not in self.columns:
            raise DatasetError(f"Missing column '{name}'")
        return self.columns[name]

    def matrix(self, names: Sequence[str]) -> np.ndarray:
        """Stack columns into an (n, p) float matrix."""
        if not names:
            return np.empty((len(self), 0))
        return np.column_stack([self.column(name) for name in names])

    def select(self, rows: np.ndarray) -> FluxFrame:
        """Return the frame restricted to a boolean mask or sorted index array."""
        rows = np.asarray(rows)
        return FluxFrame(
            timestamps=self.timestamps[rows],
            columns={k: v[rows] for k, v in self.columns.items()},
            quality={k: v[rows] for k, v in self.quality.items()},
        )

    def with_columns(
        self,
        values: Mapping[str, Iterable[float]],
        quality: Mapping[str, Iterable[bool]] | None = None,
    ) -> FluxFrame:
        """Return a new frame with columns added or replaced."""
        columns = dict(self.columns)
        masks = dict(self.quality)
        for name, series in values.items():
            columns[name] = np.asarray(series, dtype=np.float64)
            masks.pop(name, None)
        for name, mask in (quality or {}).items():
            masks[name] = np.asarray(mask, dtype=bool)
        return FluxFrame(timestamps=self.timestamps, columns=columns, quality=masks)


def day_index(frame: FluxFrame) -> np.ndarray:
    """Whole days elapsed since the first row's calendar day."""
    if len(frame) == 0:
        return np.empty(0, dtype=np.int64)
    days = stamps_to_datetime64(frame.timestamps).astype("datetime64[D]")
    return (days - days[0]).astype(np.int64)


# ── CSV in/out ────────────────────────────────────────────────────


def _parse_cell(cell: str, column: str, row: int) -> float:
    text = cell.strip().replace("−", "-")
    if text == "":
        return np.nan
    try:
        value = float(text)
    except ValueError as e:
        raise DatasetError(
            f"Unparsable numeric value {cell!r} in column '{column}' at row {row}"
        ) from e
    if value == MISSING_SENTINEL:
        return np.nan
    return value


def load_csv(
    path: str | Path,
    schema: Sequence[str],
    qc_max: int = 0,
) -> FluxFrame:
    """Load declared columns of a FLUXNET-style CSV into a FluxFrame.

    Empty cells and -9999 become missing. A companion ``<col>_QC`` column
    marks a row measured when its value is <= ``qc_max`` (0 = measured in
    FLUXNET products); without one, finite values count as measured.

    Raises:
        FileNotFoundError: If the file does not exist.
        DatasetError: On a missing declared column, an unparsable cell
            (row index reported, 0-based over data rows) or non-increasing
            timestamps.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"CSV file not found: {path}")

    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetError(f"CSV file {path} has no header row") from None
        rows = [r for r in reader if any(cell.strip() for cell in r)]

    ts_name = next((c for c in TIMESTAMP_COLUMNS if c in header), None)
    if ts_name is None:
        raise DatasetError(f"Missing timestamp column (one of {TIMESTAMP_COLUMNS})")
    missing = [c for c in schema if c not in header]
    if missing:
        raise DatasetError(f"Missing required column(s) {', '.join(missing)} in {path}")

    position = {name: i for i, name in enumerate(header)}
    n = len(rows)
    stamps = np.empty(n, dtype=np.int64)
    values = {c: np.empty(n) for c in schema}
    qc_values = {c: np.empty(n) for c in schema if c + QC_SUFFIX in position}

    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise DatasetError(f"Row {i} has {len(row)} cells, header has {len(header)}")
        try:
            stamps[i] = int(row[position[ts_name]].strip())
        except ValueError as e:
            raise DatasetError(f"Unparsable timestamp {row[position[ts_name]]!r} at row {i}") from e
        for c in schema:
            values[c][i] = _parse_cell(row[position[c]], c, i)
        for c in qc_values:
            qc_values[c][i] = _parse_cell(row[position[c + QC_SUFFIX]], c + QC_SUFFIX, i)

    if n > 1 and np.any(np.diff(stamps) <= 0):
        bad = int(np.argmax(np.diff(stamps) <= 0)) + 1
        raise DatasetError(f"Timestamps are not strictly increasing at row {bad}")
    stamps_to_datetime64(stamps)

    quality = {}
    for c in schema:
        finite = np.isfinite(values[c])
        if c in qc_values:
            qc = qc_values[c]
            quality[c] = finite & np.isfinite(qc) & (qc <= qc_max)
        else:
            quality[c] = finite
    logger.debug("Loaded %d rows x %d columns from %s", n, len(schema), path)
    return FluxFrame(timestamps=stamps, columns=values, quality=quality)


def write_csv(frame: FluxFrame, path: str | Path, columns: Sequence[str] | None = None) -> None:
    """Write a frame as CSV; missing values become -9999.

    A ``<col>_QC`` companion (0 = measured, 1 = not) is written for columns
    whose mask differs from plain finiteness.
    """
    names = list(columns) if columns is not None else list(frame.column_names)
    qc_names = [
        c for c in names if not np.array_equal(frame.quality[c], np.isfinite(frame.column(c)))
    ]
    header = ["TIMESTAMP"]
    for c in names:
        header.append(c)
        if c in qc_names:
            header.append(c + QC_SUFFIX)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for i in range(len(frame)):
            row: list[object] = [int(frame.timestamps[i])]
            for c in names:
                v = frame.columns[c][i]
                row.append(repr(float(v)) if np.isfinite(v) else int(MISSING_SENTINEL))
                if c in qc_names:
                    row.append(0 if frame.quality[c][i] else 1)
            writer.writerow(row)


# ── Series operations ─────────────────────────────────────────────


def moving_average_smooth(
    series: Sequence[float], window_days: float, step: int = SAMPLES_PER_DAY
) -> np.ndarray:
    """Centered moving mean; the window is truncated where it runs off the series."""
    values = np.asarray(series, dtype=np.float64)
    if values.size == 0:
        raise DatasetError("Cannot smooth an empty series")
    if window_days * step < 1:
        raise DatasetError(f"Window of {window_days} days x {step} samples/day is below one sample")
    if not np.all(np.isfinite(values)):
        raise DatasetError("Cannot smooth a series with missing values")
    width = max(1, int(round(window_days * step)))
    left = width // 2
    right = width - 1 - left
    idx = np.arange(values.size)
    lo = np.maximum(idx - left, 0)
    hi = np.minimum(idx + right + 1, values.size)
    csum = np.concatenate(([0.0], np.cumsum(values)))
    return (csum[hi] - csum[lo]) / (hi - lo)


def central_difference(series: Sequence[float]) -> np.ndarray:
    """Per-sample derivative: central inside, one-sided at both ends."""
    values = np.asarray(series, dtype=np.float64)
    if values.size < 2:
        raise DatasetError("central_difference needs at least 2 samples")
    return np.gradient(values)


def derive_smoothed_radiation(
    frame: FluxFrame,
    source: str = "SW_POT",
    window_days: float = 10.0,
    step: int = SAMPLES_PER_DAY,
) -> FluxFrame:
    """Add ``<source>_sm`` and ``<source>_sm_diff`` columns."""
    smooth = moving_average_smooth(frame.column(source), window_days, step)
    return frame.with_columns(
        {f"{source}_sm": smooth, f"{source}_sm_diff": central_difference(smooth)}
    )


def add_log_column(frame: FluxFrame, column: str, name: str | None = None) -> FluxFrame:
    """Add ``log_<column>``; measured rows must be strictly positive."""
    values = frame.column(column)
    mask = frame.quality[column]
    if np.any(values[mask] <= 0):
        raise DatasetError(f"Column '{column}' has non-positive measured values; cannot take log")
    logged = np.full(len(frame), np.nan)
    logged[mask] = np.log(values[mask])
    return frame.with_columns({name or f"log_{column}": logged})


def filter_measured(frame: FluxFrame, required_columns: Iterable[str]) -> FluxFrame:
    """Keep rows measured in every required column, order preserved."""
    keep = np.ones(len(frame), dtype=bool)
    for name in required_columns:
        frame.column(name)
        keep &= frame.quality[name]
    return frame.select(keep)


def select_nighttime(frame: FluxFrame, sw_pot_column: str = "SW_POT") -> FluxFrame:
    """Rows with zero potential radiation (noise-free night definition)."""
    return frame.select(frame.column(sw_pot_column) <= 0.0)


def split_by_year(
    frame: FluxFrame, train_years: Iterable[int], test_years: Iterable[int]
) -> tuple[FluxFrame, FluxFrame]:
    """Partition rows by calendar year; rows in neither set are dropped."""
    train = {int(y) for y in train_years}
    test = {int(y) for y in test_years}
    overlap = train & test
    if overlap:
        raise DatasetError(f"Train and test years overlap: {sorted(overlap)}")
    years = frame.years
    train_mask = np.isin(years, sorted(train))
    test_mask = np.isin(years, sorted(test))
    return frame.select(train_mask), frame.select(test_mask)


# ── Variable roles ────────────────────────────────────────────────


@dataclass(frozen=True)
class Identity:
    """f(T) = T."""

    def required_columns(self) -> tuple[str, ...]:
        return ()

    def apply(self, frame: FluxFrame, t_column: str) -> np.ndarray:
        return np.array(frame.column(t_column))


@dataclass(frozen=True)
class AffineScale:
    """f(T) = (T - offset) / scale; the Q10 transform with offset T_ref in °C."""

    offset: float = 15.0
    scale: float = 10.0

    def __post_init__(self) -> None:
        if self.scale == 0:
            raise DatasetError("AffineScale scale must be non-zero")

    def required_columns(self) -> tuple[str, ...]:
        return ()

    def apply(self, frame: FluxFrame, t_column: str) -> np.ndarray:
        return (frame.column(t_column) - self.offset) / self.scale


@dataclass(frozen=True)
class Precomputed:
    """f(T) supplied as an existing column (e.g. a fitted light-response curve)."""

    column: str

    def required_columns(self) -> tuple[str, ...]:
        return (self.column,)

    def apply(self, frame: FluxFrame, t_column: str) -> np.ndarray:
        return np.array(frame.column(self.column))


TreatmentTransform = Identity | AffineScale | Precomputed


def parse_transform(text: str) -> TreatmentTransform:
    """Parse ``identity``, ``affine[:offset[:scale]]`` or ``column:<name>``."""
    parts = text.strip().split(":")
    kind = parts[0].lower()
    try:
        if kind == "identity" and len(parts) == 1:
            return Identity()
        if kind == "affine" and len(parts) <= 3:
            offset = float(parts[1]) if len(parts) > 1 else 15.0
            scale = float(parts[2]) if len(parts) > 2 else 10.0
            return AffineScale(offset=offset, scale=scale)
        if kind == "column" and len(parts) == 2 and parts[1]:
            return Precomputed(column=parts[1])
    except ValueError as e:
        raise DatasetError(f"Invalid treatment transform {text!r}") from e
    raise DatasetError(
        f"Invalid treatment transform {text!r}; "
        "expected identity, affine[:offset[:scale]] or column:<name>"
    )


@dataclass(frozen=True)
class RoleSpec:
    """Assignment of columns to causal roles.

    y: outcome; t: treatment; x: effect modifiers (drive θ(X));
    w: additional confounders/mediators; f: treatment transform.
    """

    y: str
    t: str
    x: tuple[str, ...] = ()
    w: tuple[str, ...] = ()
    f: TreatmentTransform = Identity()

    def __post_init__(self) -> None:
        object.__setattr__(self, "x", tuple(self.x))
        object.__setattr__(self, "w", tuple(self.w))
        controls = set(self.x) | set(self.w)
        for role, name in (("y", self.y), ("t", self.t)):
            if name in controls:
                raise RoleError(f"Role {role} column '{name}' also appears in x or w")
        both = set(self.x) & set(self.w)
        if both:
            raise RoleError(f"Columns in both x and w: {sorted(both)}")

    @property
    def controls(self) -> tuple[str, ...]:
        """Columns the first stage conditions on: x then w."""
        return self.x + self.w

    def required_columns(self) -> tuple[str, ...]:
        return (self.y, self.t, *self.controls, *self.f.required_columns())

    def validate_for(self, frame: FluxFrame) -> None:
        missing = [c for c in self.required_columns() if not frame.has_column(c)]
        if missing:
            raise RoleError(f"Role column(s) not in data: {', '.join(missing)}")

    def treatment_values(self, frame: FluxFrame) -> np.ndarray:
        return self.f.apply(frame, self.t)
