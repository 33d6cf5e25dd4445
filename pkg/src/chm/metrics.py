"""Flux and parameter scoring, and grouped summaries of simulation sweeps."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np


class MetricsError(Exception):
    """Raised when scores or summaries are requested for unusable input."""


@dataclass(frozen=True)
class ScoreTriple:
    """R², RMSE and bias (x̄ − ȳ) of x against the reference y.

    ``r2`` is None, with ``r2_error`` set, when the reference has no variance.
    """

    r2: float | None
    rmse: float
    bias: float
    r2_error: str | None = None


def score(x: Sequence[float], y: Sequence[float]) -> ScoreTriple:
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if xa.shape != ya.shape or xa.ndim != 1:
        raise MetricsError(f"Length mismatch: {xa.shape} vs {ya.shape}")
    if xa.size < 2:
        raise MetricsError(f"Need at least 2 values to score, got {xa.size}")
    if not (np.all(np.isfinite(xa)) and np.all(np.isfinite(ya))):
        raise MetricsError("Cannot score non-finite values")
    diff = xa - ya
    rmse = float(np.sqrt(np.mean(diff**2)))
    bias = float(np.mean(xa) - np.mean(ya))
    ref_ss = float(np.sum((ya - ya.mean()) ** 2))
    if ref_ss == 0.0:
        return ScoreTriple(r2=None, rmse=rmse, bias=bias, r2_error="zero reference variance")
    return ScoreTriple(r2=1.0 - float(np.sum(diff**2)) / ref_ss, rmse=rmse, bias=bias)


@dataclass(frozen=True)
class SweepSummary:
    keys: tuple[tuple[str, object], ...]
    metric: str
    count: int
    mean: float
    sd: float | None
    median: float
    q25: float
    q75: float
    ci_lo: float | None
    ci_hi: float | None

    def key(self, name: str) -> object:
        return dict(self.keys)[name]


def _is_number(value: object) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)


def summarize(
    records: Iterable[Mapping[str, object]], keys: Sequence[str], metric: str
) -> list[SweepSummary]:
    """Group records by ``keys`` and summarize ``metric``.

    Groups come out in first-seen order. Records whose metric is missing or
    non-finite are left out. sd uses ddof=1 and CI = mean ± 1.96·sd/√m; both
    are None for a single value. Quantiles interpolate linearly.

    Raises:
        MetricsError: If a group has no usable value.
    """
    groups: dict[tuple, list[float]] = {}
    for record in records:
        group = tuple(record[k] for k in keys)
        values = groups.setdefault(group, [])
        value = record.get(metric)
        if _is_number(value):
            values.append(float(value))

    summaries = []
    for group, values in groups.items():
        if not values:
            raise MetricsError(f"Empty group {dict(zip(keys, group))} for metric '{metric}'")
        arr = np.asarray(values)
        m = arr.size
        mean = float(arr.mean())
        sd = float(arr.std(ddof=1)) if m >= 2 else None
        half = 1.96 * sd / math.sqrt(m) if sd is not None else None
        q25, median, q75 = (float(q) for q in np.quantile(arr, [0.25, 0.5, 0.75]))
        summaries.append(
            SweepSummary(
                keys=tuple(zip(keys, group)),
                metric=metric,
                count=m,
                mean=mean,
                sd=sd,
                median=median,
                q25=q25,
                q75=q75,
                ci_lo=None if half is None else mean - half,
                ci_hi=None if half is None else mean + half,
            )
        )
    return summaries


STAT_COLUMNS = ("metric", "count", "mean", "sd", "median", "q25", "q75", "ci_lo", "ci_hi")


def _cell(value: object) -> object:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return value


def write_summary_csv(
    summaries: Sequence[SweepSummary], path: str | Path, key_names: Sequence[str]
) -> None:
    """Long-format table: key columns, then STAT_COLUMNS."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([*key_names, *STAT_COLUMNS])
        for s in summaries:
            keys = dict(s.keys)
            writer.writerow(
                [_cell(keys[k]) for k in key_names]
                + [
                    s.metric,
                    s.count,
                    _cell(s.mean),
                    _cell(s.sd),
                    _cell(s.median),
                    _cell(s.q25),
                    _cell(s.q75),
                    _cell(s.ci_lo),
                    _cell(s.ci_hi),
                ]
            )
