"""Moving-window rectangular-hyperbola light response, used as the treatment f(SW).

Within a window the daytime NEE is modelled as

    NEE = −α·β·SW / (α·SW + β) + γ

and the fitted saturating term α̂β̂·SW/(α̂·SW + β̂) becomes f(SW).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from src.chm.dataset import FluxFrame, day_index

logger = logging.getLogger(__name__)

MIN_DAYTIME_POINTS = 10
MAX_ITERATIONS = 200
RELATIVE_TOLERANCE = 1e-10
_LOG_BOUND = 50.0
_SSE_FLOOR = 1e-24
# Below this share of the NEE scale the fitted light response counts as flat.
_FLAT_RESPONSE = 1e-6


class LightCurveError(Exception):
    """Raised when the light-response transform cannot be computed."""


class InsufficientDaylightError(LightCurveError):
    """Raised when a window has too few daytime points to fit."""


@dataclass(frozen=True)
class HyperbolaParams:
    alpha: float
    beta: float
    gamma: float
    window: tuple[int, int] = (0, 0)
    converged: bool = False
    sse: float = float("nan")
    iterations: int = 0
    sse_history: tuple[float, ...] = field(default=(), compare=False, repr=False)

    def response(self, sw: np.ndarray) -> np.ndarray:
        """α·β·SW/(α·SW + β), zero for SW <= 0."""
        s = np.maximum(np.asarray(sw, dtype=np.float64), 0.0)
        return self.alpha * self.beta * s / (self.alpha * s + self.beta)

    def nee(self, sw: np.ndarray) -> np.ndarray:
        return -self.response(sw) + self.gamma


def initial_guess(
    sw: np.ndarray, nee: np.ndarray, night_nee: np.ndarray | None = None
) -> HyperbolaParams:
    """α₀ = |cov(nee, sw)|/var(sw) in [1e-4, 1]; β₀ = max(1, range(−nee)); γ₀ = night mean."""
    var = float(np.var(sw))
    slope = abs(float(np.mean((sw - sw.mean()) * (nee - nee.mean())))) / var if var > 0 else 0.0
    alpha = float(np.clip(slope, 1e-4, 1.0))
    beta = max(1.0, float(np.ptp(-nee)))
    if night_nee is not None and night_nee.size:
        gamma = float(np.mean(night_nee))
    else:
        gamma = float(np.mean(nee))
    return HyperbolaParams(alpha=alpha, beta=beta, gamma=gamma)


def _model_and_jacobian(p: np.ndarray, sw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    alpha, beta, gamma = np.exp(p[0]), np.exp(p[1]), p[2]
    denom = alpha * sw + beta
    model = -alpha * beta * sw / denom + gamma
    jac = np.empty((sw.size, 3))
    jac[:, 0] = -alpha * beta**2 * sw / denom**2
    jac[:, 1] = -beta * alpha**2 * sw**2 / denom**2
    jac[:, 2] = 1.0
    return model, jac


def fit_hyperbola(
    sw: np.ndarray,
    nee: np.ndarray,
    init: HyperbolaParams | None = None,
    max_iterations: int = MAX_ITERATIONS,
    tolerance: float = RELATIVE_TOLERANCE,
) -> HyperbolaParams:
    """Levenberg–Marquardt least squares over (log α, log β, γ).

    Stops when an accepted step changes the SSE by less than ``tolerance``
    (relative), when the SSE reaches numerical zero, or after
    ``max_iterations``; the best iterate is returned either way. A fit whose
    light response is flat is reported as not converged.

    Raises:
        InsufficientDaylightError: Fewer than 10 points with SW > 0.
    """
    sw = np.asarray(sw, dtype=np.float64)
    nee = np.asarray(nee, dtype=np.float64)
    ok = np.isfinite(sw) & np.isfinite(nee)
    sw, nee = sw[ok], nee[ok]
    if np.count_nonzero(sw > 0) < MIN_DAYTIME_POINTS:
        raise InsufficientDaylightError(
            f"Only {np.count_nonzero(sw > 0)} daytime points; need {MIN_DAYTIME_POINTS}"
        )
    if init is None:
        init = initial_guess(sw, nee)
    p = np.array([np.log(init.alpha), np.log(init.beta), init.gamma])
    model, jac = _model_and_jacobian(p, sw)
    r = nee - model
    sse = float(np.dot(r, r))
    floor = _SSE_FLOOR * (1.0 + float(np.dot(nee, nee)))
    history = [sse]
    lam = 1e-3
    converged = sse <= floor
    it = 0
    while not converged and it < max_iterations:
        it += 1
        jtj = jac.T @ jac
        g = jac.T @ r
        damping = lam * np.maximum(np.diag(jtj), 1e-12)
        try:
            step = np.linalg.solve(jtj + np.diag(damping), g)
        except np.linalg.LinAlgError:
            lam *= 10.0
            continue
        candidate = p + step
        candidate[:2] = np.clip(candidate[:2], -_LOG_BOUND, _LOG_BOUND)
        new_model, new_jac = _model_and_jacobian(candidate, sw)
        new_r = nee - new_model
        new_sse = float(np.dot(new_r, new_r))
        if np.isfinite(new_sse) and new_sse < sse:
            change = (sse - new_sse) / sse
            p, jac, r, sse = candidate, new_jac, new_r, new_sse
            history.append(sse)
            lam = max(lam / 10.0, 1e-15)
            if change < tolerance or sse <= floor:
                converged = True
        else:
            lam *= 10.0
            if lam > 1e16:
                break

    params = HyperbolaParams(
        alpha=float(np.exp(p[0])), beta=float(np.exp(p[1])), gamma=float(p[2])
    )
    amplitude = float(params.response(np.array([sw.max()]))[0])
    scale = max(1.0, abs(params.gamma), float(np.std(nee)))
    if amplitude <= _FLAT_RESPONSE * scale:
        converged = False
    logger.debug("LM: %d iterations, sse=%.6g, converged=%s", it, sse, converged)
    return HyperbolaParams(
        alpha=params.alpha,
        beta=params.beta,
        gamma=params.gamma,
        converged=converged,
        sse=sse,
        iterations=it,
        sse_history=tuple(history),
    )


WindowStatus = Literal["ok", "skipped", "failed"]


@dataclass(frozen=True)
class WindowFit:
    index: int
    first_day: int
    last_day: int  # exclusive
    start: int  # timestamp of the first row
    end: int  # timestamp of the last row
    status: WindowStatus
    params: HyperbolaParams | None = None
    n_daytime: int = 0
    message: str = ""


def fit_windows(
    frame: FluxFrame,
    sw_column: str = "SW_IN",
    nee_column: str = "NEE",
    window_days: int = 15,
    center_days: int = 5,
) -> list[WindowFit]:
    """Fit one hyperbola per window, stepping by ``center_days``."""
    if center_days < 1 or window_days < center_days:
        raise LightCurveError(
            f"Need 1 <= center_days <= window_days, got {center_days}/{window_days}"
        )
    days = day_index(frame)
    n_days = int(days[-1]) + 1 if days.size else 0
    if n_days < window_days:
        raise LightCurveError(f"Series spans {n_days} days; need at least {window_days}")
    sw = frame.column(sw_column)
    nee = frame.column(nee_column)
    usable = frame.quality[nee_column] & frame.quality[sw_column]

    fits = []
    for index, first in enumerate(range(0, n_days - window_days + 1, center_days)):
        last = first + window_days
        rows = np.flatnonzero((days >= first) & (days < last) & usable)
        start = int(frame.timestamps[rows[0]]) if rows.size else 0
        end = int(frame.timestamps[rows[-1]]) if rows.size else 0
        day_rows = rows[sw[rows] > 0]
        night_rows = rows[sw[rows] <= 0]
        base = dict(
            index=index,
            first_day=first,
            last_day=last,
            start=start,
            end=end,
            n_daytime=int(day_rows.size),
        )
        try:
            init = None
            if day_rows.size:
                init = initial_guess(sw[day_rows], nee[day_rows], nee[night_rows])
            params = fit_hyperbola(sw[day_rows], nee[day_rows], init)
        except InsufficientDaylightError as e:
            logger.warning("Window %d (days %d-%d) skipped: %s", index, first, last - 1, e)
            fits.append(WindowFit(status="skipped", message=str(e), **base))
            continue
        except (np.linalg.LinAlgError, FloatingPointError, ValueError) as e:
            logger.warning("Window %d (days %d-%d) failed: %s", index, first, last - 1, e)
            fits.append(WindowFit(status="failed", message=str(e), **base))
            continue
        params = HyperbolaParams(
            alpha=params.alpha,
            beta=params.beta,
            gamma=params.gamma,
            window=(start, end),
            converged=params.converged,
            sse=params.sse,
            iterations=params.iterations,
            sse_history=params.sse_history,
        )
        fits.append(WindowFit(status="ok", params=params, **base))
    return fits


def _nearest_successful(fits: list[WindowFit]) -> list[HyperbolaParams]:
    ok = [i for i, w in enumerate(fits) if w.status == "ok"]
    if not ok:
        raise LightCurveError("No light-response window could be fitted")
    ok_arr = np.asarray(ok)
    chosen = []
    for i in range(len(fits)):
        j = ok_arr[int(np.argmin(np.abs(ok_arr - i)))]  # ties go to the earlier window
        chosen.append(fits[j].params)
    return chosen


def transform_sw(
    frame: FluxFrame,
    window_days: int = 15,
    center_days: int = 5,
    sw_column: str = "SW_IN",
    nee_column: str = "NEE",
    fits: list[WindowFit] | None = None,
) -> np.ndarray:
    """f(SW) per row from the window whose center block holds the row's day.

    Days before the first or after the last center block use the nearest
    window; skipped windows inherit the nearest successful window; SW <= 0
    gives f = 0.
    """
    if fits is None:
        fits = fit_windows(frame, sw_column, nee_column, window_days, center_days)
    params = _nearest_successful(fits)
    offset = (window_days - center_days) // 2
    days = day_index(frame)
    window_of_day = np.clip((days - offset) // center_days, 0, len(fits) - 1)
    sw = frame.column(sw_column)
    out = np.zeros(len(frame))
    for w in np.unique(window_of_day):
        rows = window_of_day == w
        out[rows] = params[w].response(sw[rows])
    out[~np.isfinite(out)] = 0.0
    return out


WINDOW_COLUMNS = (
    "window",
    "first_day",
    "last_day",
    "start",
    "end",
    "status",
    "n_daytime",
    "alpha",
    "beta",
    "gamma",
    "sse",
    "converged",
    "iterations",
    "message",
)


def write_windows_csv(fits: list[WindowFit], path: str | Path) -> None:
    """Per-window parameter dump; empty cells for skipped or failed windows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=WINDOW_COLUMNS)
        writer.writeheader()
        for w in fits:
            p = w.params
            writer.writerow(
                {
                    "window": w.index,
                    "first_day": w.first_day,
                    "last_day": w.last_day,
                    "start": w.start,
                    "end": w.end,
                    "status": w.status,
                    "n_daytime": w.n_daytime,
                    "alpha": "" if p is None else repr(p.alpha),
                    "beta": "" if p is None else repr(p.beta),
                    "gamma": "" if p is None else repr(p.gamma),
                    "sse": "" if p is None else repr(p.sse),
                    "converged": "" if p is None else p.converged,
                    "iterations": "" if p is None else p.iterations,
                    "message": w.message,
                }
            )
