"""Static SVG charts of sweep summaries (optional ``plot`` extra)."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Sequence

from src.chm.metrics import SweepSummary

logger = logging.getLogger(__name__)


def _pyplot():
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        logger.warning("matplotlib not installed; skipping SVG charts (pip install .[plot])")
        return None
    # fixed ids so repeated runs write identical files
    matplotlib.rcParams["svg.hashsalt"] = "chm"
    return plt


def _save(fig, plt, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    logger.info("Wrote %s", path)
    return path


def plot_q10_sweep(summaries: Sequence[SweepSummary], path: str | Path) -> Path | None:
    """Mean Q̂10 with 95% CI against sample size, one line per method and true Q10."""
    rows = [s for s in summaries if s.metric == "q10_hat"]
    plt = _pyplot()
    if plt is None or not rows:
        return None
    fig, ax = plt.subplots(figsize=(7, 4.5))
    lines: dict[tuple, list[SweepSummary]] = {}
    for s in rows:
        lines.setdefault((s.key("method"), s.key("q10_true")), []).append(s)
    for (method, q10), group in lines.items():
        group = sorted(group, key=lambda s: s.key("n"))
        n = [s.key("n") for s in group]
        mean = [s.mean for s in group]
        lo = [s.ci_lo if s.ci_lo is not None else s.mean for s in group]
        hi = [s.ci_hi if s.ci_hi is not None else s.mean for s in group]
        (line,) = ax.plot(n, mean, marker="o", label=f"{method} (Q10={q10})")
        ax.fill_between(n, lo, hi, color=line.get_color(), alpha=0.2)
    for q10 in sorted({q for _, q in lines}):
        ax.axhline(q10, color="grey", linestyle="--", linewidth=0.8)
    ax.set_xscale("log")
    ax.set_xlabel("sample size")
    ax.set_ylabel("estimated Q10")
    ax.legend(fontsize="small")
    return _save(fig, plt, Path(path))


def plot_lue_sweep(summaries: Sequence[SweepSummary], path: str | Path) -> Path | None:
    """Median R² with interquartile band against noise level, per flux."""
    plt = _pyplot()
    if plt is None:
        return None
    fluxes = [f for f in ("gpp", "reco", "nee") if any(s.metric == f"{f}_r2" for s in summaries)]
    if not fluxes:
        return None
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for flux in fluxes:
        by_method: dict[str, list[SweepSummary]] = {}
        for s in summaries:
            if s.metric == f"{flux}_r2":
                by_method.setdefault(s.key("method"), []).append(s)
        for method, group in by_method.items():
            group = sorted(group, key=lambda s: s.key("sigma"))
            sigma = [s.key("sigma") for s in group]
            (line,) = ax.plot(
                sigma, [s.median for s in group], marker="o", label=f"{flux.upper()} {method}"
            )
            ax.fill_between(
                sigma,
                [s.q25 for s in group],
                [s.q75 for s in group],
                color=line.get_color(),
                alpha=0.2,
            )
    ax.set_xlabel("noise level sigma")
    ax.set_ylabel("R²")
    ax.legend(fontsize="small")
    return _save(fig, plt, Path(path))
