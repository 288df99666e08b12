"""Comparison metrics for MH runs and posterior summaries.

Inefficiency factors (integrated autocorrelation times), acceptance and correction
rates, time per effective sample, histograms and ACF exports.
"""
from __future__ import annotations

import logging
import math
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from data.models.chain_models import ChainTrace, MetricsReport, ParameterPosterior, PosteriorSummary
from data.models.ssm_models import PriorSpec

logger = logging.getLogger(__name__)

MAX_LAG = 1000
MIN_LENGTH = 10


# ---------------------------
# Autocorrelation
# ---------------------------

def autocorrelation(series: np.ndarray, max_lag: Optional[int] = None) -> np.ndarray:
    """Normalized autocorrelation function via FFT; rho[0] = 1."""
    x = np.asarray(series, dtype=float).reshape(-1)
    n = x.size
    x = x - x.mean()
    size = 1 << int(2 * n - 1).bit_length()
    spectrum = np.fft.rfft(x, n=size)
    acov = np.fft.irfft(spectrum * np.conjugate(spectrum), n=size)[:n]
    if acov[0] <= 0.0:
        return np.ones(1)
    rho = acov / acov[0]
    if max_lag is not None:
        rho = rho[:max_lag + 1]
    return rho


def iact(series: np.ndarray, max_lag: int = MAX_LAG, block: int = 1) -> float:
    """
    Inefficiency factor 1 + 2 sum_l rho_l over at most min(n/2, max_lag * block) lags.
    The lags are summed in consecutive blocks of ``block`` and the sum stops before the
    first block with a non-positive total; block = 1 is the first non-positive lag
    rule. Chains whose proposals are anchored M steps back correlate mostly at
    multiples of M and need block = M. A zero-variance series returns math.inf.
    """
    if block < 1:
        raise ValueError(f"block must be positive, got {block}")
    x = np.asarray(series, dtype=float).reshape(-1)
    if x.size < MIN_LENGTH:
        raise ValueError(f"need at least {MIN_LENGTH} values, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise ValueError("series must be finite")
    if np.ptp(x) == 0.0:
        return math.inf
    cap = min(x.size // 2, max_lag * block)
    rho = autocorrelation(x, cap)[1:]
    if rho.size == 0:
        return 1.0
    sums = np.add.reduceat(rho, np.arange(0, rho.size, block))
    non_positive = np.flatnonzero(sums <= 0.0)
    stop = int(non_positive[0]) if non_positive.size else sums.size
    return float(1.0 + 2.0 * np.sum(sums[:stop]))


def effective_sample_size(series: np.ndarray, block: int = 1) -> float:
    factor = iact(series, block=block)
    return 0.0 if math.isinf(factor) else float(np.asarray(series).size / factor)


def acf_frame(trace: ChainTrace, burn_in: Optional[int] = None, max_lag: int = 100) -> pd.DataFrame:
    """ACF per parameter (natural coordinates) with the +-1.96/sqrt(n) white-noise band."""
    burn_in = trace.burn_in if burn_in is None else burn_in
    post = trace.natural[burn_in:]
    n = post.shape[0]
    frame = pd.DataFrame({"lag": np.arange(max_lag + 1)})
    for j, name in enumerate(trace.parameter_names):
        rho = autocorrelation(post[:, j], max_lag)
        frame[name] = np.pad(rho, (0, max_lag + 1 - rho.size), constant_values=np.nan)
    band = 1.96 / math.sqrt(n)
    frame["band_lower"] = -band
    frame["band_upper"] = band
    return frame


# ---------------------------
# Per-trace metrics
# ---------------------------

def trace_metrics(trace: ChainTrace, burn_in: Optional[int] = None) -> Dict[str, object]:
    """Acceptance, correction fraction, IF per parameter and median iteration time for one trace."""
    burn_in = trace.burn_in if burn_in is None else burn_in
    if not 0 <= burn_in < trace.length:
        raise ValueError(f"burn-in {burn_in} must lie in [0, {trace.length})")
    post = trace.natural[burn_in:]
    factors = {name: iact(post[:, j], block=trace.anchor_lag) for j, name in enumerate(trace.parameter_names)}
    proposals = slice(trace.warmup + 1, trace.length)
    n_proposals = max(trace.length - trace.warmup - 1, 0)
    times = trace.time_us[1:]
    return {
        "acceptance_rate": float(np.mean(trace.accepted[proposals])) if n_proposals else 0.0,
        "correction_fraction": float(np.mean(trace.corrected[proposals])) if n_proposals else 0.0,
        "inefficiency_factors": factors,
        "max_if": max(factors.values()),
        "iteration_time_ms": float(np.median(times)) / 1000.0 if times.size else 0.0,
    }


def _iqr(values: np.ndarray) -> float:
    q25, q75 = np.percentile(values, [25, 75])
    return float(q75 - q25)


def summarize(traces: Sequence[ChainTrace], burn_in: Optional[int] = None, backend: str = "") -> MetricsReport:
    """
    Medians across replications. IF is computed per parameter and trace; the max over
    parameters is reduced by median and IQR over traces. Time per effective sample
    is the median iteration time times the median max IF.
    """
    if not traces:
        raise ValueError("summarize needs at least one trace")
    labels = {t.proposal_label for t in traces}
    if len(labels) > 1:
        raise ValueError(f"traces come from different proposals: {sorted(labels)}")
    per_trace = [trace_metrics(t, burn_in) for t in traces]
    max_if = np.array([m["max_if"] for m in per_trace])
    names = traces[0].parameter_names
    factors = {n: float(np.median([m["inefficiency_factors"][n] for m in per_trace])) for n in names}
    iter_ms = float(np.median([m["iteration_time_ms"] for m in per_trace]))
    max_if_median = float(np.median(max_if))
    is_qmh = traces[0].warmup > 0
    length = traces[0].length - (traces[0].burn_in if burn_in is None else burn_in)
    return MetricsReport(
        label=traces[0].proposal_label,
        backend=backend,
        n_replications=len(traces),
        acceptance_rate=float(np.median([m["acceptance_rate"] for m in per_trace])),
        correction_fraction=float(np.median([m["correction_fraction"] for m in per_trace])) if is_qmh else None,
        inefficiency_factors=factors,
        max_if_median=max_if_median,
        max_if_iqr=_iqr(max_if) if np.all(np.isfinite(max_if)) else math.inf,
        iteration_time_ms=iter_ms,
        time_per_effective_sample_ms=iter_ms * max_if_median,
        effective_sample_size=0.0 if math.isinf(max_if_median) else length / max_if_median,
    )


# ---------------------------
# Posterior summaries
# ---------------------------

def posterior_summary(trace: ChainTrace, burn_in: Optional[int] = None, bins: int = 50) -> PosteriorSummary:
    """Posterior means and density-normalized histograms in natural coordinates."""
    burn_in = trace.burn_in if burn_in is None else burn_in
    if not 0 <= burn_in < trace.length:
        raise ValueError(f"burn-in {burn_in} must lie in [0, {trace.length})")
    post = trace.natural[burn_in:]
    parameters = []
    for j, name in enumerate(trace.parameter_names):
        density, edges = np.histogram(post[:, j], bins=bins, density=True)
        parameters.append(ParameterPosterior(
            name=name,
            mean=float(np.mean(post[:, j])),
            sd=float(np.std(post[:, j], ddof=1)) if post.shape[0] > 1 else 0.0,
            bin_edges=edges.tolist(),
            density=density.tolist(),
        ))
    return PosteriorSummary(burn_in=burn_in, parameters=parameters)


def prior_curve_frame(prior: PriorSpec, names: List[str], summary: PosteriorSummary, n_points: int = 200) -> pd.DataFrame:
    """Prior densities on each histogram's range, in long format (parameter, x, density)."""
    rows = []
    for name, component in zip(names, prior.components):
        post = next(p for p in summary.parameters if p.name == name)
        grid = np.linspace(post.bin_edges[0], post.bin_edges[-1], n_points)
        dens = np.exp([component.log_density(float(x)) for x in grid])
        rows.append(pd.DataFrame({"parameter": name, "x": grid, "density": dens}))
    return pd.concat(rows, ignore_index=True)


def metrics_frame(reports: Sequence[MetricsReport]) -> pd.DataFrame:
    return pd.DataFrame([r.to_row() for r in reports])


def metrics_markdown(reports: Sequence[MetricsReport]) -> str:
    """Markdown comparison table: Acc., Cor., max IF (IQR), Iter. and Samp. per (backend, proposal)."""
    lines = [
        "| backend | proposal | Acc. | Cor. | max IF | Iter. (ms) | Samp. (ms) |",
        "|---|---|---|---|---|---|---|",
    ]
    for r in reports:
        cor = "-" if r.correction_fraction is None else f"{r.correction_fraction:.2f}"
        lines.append(
            f"| {r.backend} | {r.label} | {r.acceptance_rate:.2f} | {cor} | "
            f"{r.max_if_median:.0f} ± {r.max_if_iqr:.0f} | {r.iteration_time_ms:.2f} | "
            f"{r.time_per_effective_sample_ms:.1f} |"
        )
    return "\n".join(lines) + "\n"
