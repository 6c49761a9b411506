"""Goodness of fit for thinned Hawkes data: pooled inter-arrival chi-square
between training streams and synthetic streams simulated at a candidate
estimate, plus selection of the best multi-start run.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .generator import GenConfig, seeds_for, simulate_batch
from .model import BackgroundConfig, EventStream, ModelParams, residuals
from .thinning import RegionMap, report


class GofError(ValueError):
    pass


@dataclass
class InterarrivalPool:
    values: np.ndarray
    source: str = "training"
    n_streams: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if np.any(self.values <= 0):
            raise GofError("inter-arrival times must be > 0")

    def __len__(self):
        return len(self.values)


def interarrivals(stream) -> np.ndarray:
    t = stream.t if isinstance(stream, EventStream) else np.asarray(stream, dtype=float)
    return np.diff(t)


def pool(streams: Sequence, source: str = "training") -> InterarrivalPool:
    streams = list(streams)
    gaps = [interarrivals(s) for s in streams]
    vals = np.concatenate(gaps) if gaps else np.empty(0)
    return InterarrivalPool(vals, source, len(streams))


def _as_values(p):
    return p.values if isinstance(p, InterarrivalPool) else np.asarray(p, dtype=float)


def histograms(training, synthetic, n_bins: int = 50, upper_quantile: float = 99.5):
    """Equal-width bins on [0, q] of the union plus one overflow bin.

    Returns (edges, training counts, synthetic counts rescaled to the
    training total). The last edge is +inf.
    """
    tr, sy = _as_values(training), _as_values(synthetic)
    if len(tr) == 0 or len(sy) == 0:
        raise GofError("both pools must be non-empty")
    union = np.concatenate([tr, sy])
    if np.all(union == union[0]):
        raise GofError("degenerate support: all inter-arrival times are equal")
    hi = float(np.percentile(union, upper_quantile))
    if hi <= 0:
        hi = float(union.max())
    edges = np.append(np.linspace(0.0, hi, n_bins + 1), np.inf)
    f_tr = np.histogram(tr, edges)[0].astype(float)
    f_sy = np.histogram(sy, edges)[0] * (len(tr) / len(sy))
    return edges, f_tr, f_sy


def _merge_empty(f_tr, f_sy):
    """Merge zero-count training bins into the next bin to the right (trailing ones leftward)."""
    out_tr, out_sy = [], []
    acc_tr = acc_sy = 0.0
    for a, b in zip(f_tr, f_sy):
        acc_tr += a
        acc_sy += b
        if acc_tr > 0:
            out_tr.append(acc_tr)
            out_sy.append(acc_sy)
            acc_tr = acc_sy = 0.0
    if acc_sy and out_sy:
        out_sy[-1] += acc_sy
    return np.array(out_tr), np.array(out_sy)


def statistic(f_train, f_syn) -> float:
    """sum_i (f_train_i - f_syn_i)^2 / f_train_i on binned counts.

    ``f_syn`` is rescaled to the training total first, so any overall
    multiple of the synthetic counts gives the same value.
    """
    f_tr, f_sy = np.asarray(f_train, dtype=float), np.asarray(f_syn, dtype=float)
    if f_tr.sum() <= 0 or f_sy.sum() <= 0:
        raise GofError("both histograms need positive mass")
    f_sy = f_sy * (f_tr.sum() / f_sy.sum())
    f_tr, f_sy = _merge_empty(f_tr, f_sy)
    return float(np.sum((f_tr - f_sy) ** 2 / f_tr))


def chi_square(training, synthetic, n_bins: int = 50) -> float:
    """Chi-square distance between pooled inter-arrival histograms (merged, rescaled bins)."""
    _, f_tr, f_sy = histograms(training, synthetic, n_bins)
    return statistic(f_tr, f_sy)


def synthetic_streams(theta: ModelParams, bg: BackgroundConfig, region_map: Optional[RegionMap],
                      k_synthetic: int, gen_cfg: GenConfig, seed: int, *, victimization: bool = False,
                      horizon_ratio: float = 1.0, jobs: int = 1) -> list:
    """K streams at ``theta`` passed through the same missingness mechanism as the data."""
    if k_synthetic < 1:
        raise GofError("K_synthetic must be >= 1")
    streams = simulate_batch(theta, bg, seeds_for(seed, k_synthetic), gen_cfg, jobs=jobs)
    if region_map is None:
        return streams
    return [report(s, region_map, victimization=victimization, horizon_ratio=horizon_ratio)
            for s in streams]


def gof_score(theta_hat: ModelParams, data: Sequence[EventStream], region_map: Optional[RegionMap],
              k_synthetic: int = 1000, gen_cfg: Optional[GenConfig] = None, n_bins: int = 50,
              seed: int = 0, bg: Optional[BackgroundConfig] = None, **kw) -> float:
    bg = bg or BackgroundConfig()
    gen_cfg = gen_cfg or GenConfig()
    syn = synthetic_streams(theta_hat, bg, region_map, k_synthetic, gen_cfg, seed, **kw)
    return chi_square(pool(data), pool(syn, "synthetic"), n_bins)


_FAILED = ("diverged", "failed")


def select_best(runs: Sequence, data, region_map, k_synthetic: int = 1000,
                gen_cfg: Optional[GenConfig] = None, n_bins: int = 50, seed: int = 0,
                bg: Optional[BackgroundConfig] = None, **kw):
    """Run with the smallest gof_score (earliest on ties); returns (run, scores).

    Every candidate is scored with the same synthetic seed. Failed runs get
    a score of nan.
    """
    scores = []
    for r in runs:
        if getattr(r, "status", "") in _FAILED:
            scores.append(float("nan"))
            continue
        theta = r.theta_hat if hasattr(r, "theta_hat") else r
        scores.append(gof_score(theta, data, region_map, k_synthetic, gen_cfg, n_bins, seed, bg, **kw))
    ok = [i for i, s in enumerate(scores) if np.isfinite(s)]
    if not ok:
        raise GofError("no successful runs to select from")
    best = min(ok, key=lambda i: (scores[i], i))
    return runs[best], scores


def qq_residuals(streams: Sequence[EventStream], params: ModelParams, bg: BackgroundConfig):
    """Exp(1) QQ data of pooled compensator residuals; meaningful for un-thinned data only.

    Returns (theoretical quantiles, sorted residuals).
    """
    res = np.sort(np.concatenate([residuals(s, params, bg) for s in streams]))
    n = len(res)
    theo = stats.expon.ppf((np.arange(1, n + 1) - 0.5) / n)
    return theo, res
