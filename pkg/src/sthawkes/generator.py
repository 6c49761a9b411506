"""Exact spatiotemporal Hawkes generator g_theta(z).

Streams are built with the branching (cluster) construction from pre-drawn
base noise. Every retained coordinate is an explicit function of the
parameters and the noise:

    t = S_root / (M mu) + D / beta
    x = x_root + sigma_x * Nx,   y = y_root + sigma_y * Ny

where ``S_root`` is the cumulative unit-exponential arrival index of the
event's background ancestor, ``D`` the sum of unit-exponential delays along
its ancestry and ``Nx, Ny`` the summed standard-normal offsets. Offspring
counts, parentage, domain discards and the time ordering are the only
discrete decisions; with those frozen the generator is smooth in theta.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .model import BackgroundConfig, EventStream, ModelError, ModelParams

CHANNELS = {
    "bg_time": "uniform",
    "bg_component": "uniform",
    "bg_location": "normal",
    "offspring_count": "uniform",
    "offspring_delay": "uniform",
    "offspring_offset": "normal",
    "thinning": "uniform",
    "victimization": "uniform",
}
_CHANNEL_IDS = {name: i for i, name in enumerate(CHANNELS)}


class SimulationError(RuntimeError):
    pass


class SupercriticalError(SimulationError):
    """Branching ratio >= 1 in a mode where clusters are not time-limited."""


class NoiseExhaustedError(SimulationError):
    """A channel ran past its capacity; draws are never silently re-made."""


class BaseNoise:
    """Reproducible per-channel U(0,1) / N(0,1) draws for one stream.

    Each channel has its own bit generator spawned from ``seed``, so drawing
    more from one channel never shifts another. Values are generated lazily
    in blocks and cached; ``draw(channel, start, n)`` is index-addressed.
    Uniforms lie in the open interval (0, 1).
    """

    _BLOCK = 256

    def __init__(self, seed: int, capacity: int = 20_000_000):
        self.seed = int(seed)
        self.capacity = int(capacity)
        self._rngs = {}
        self._cache = {}

    def _rng(self, channel):
        if channel not in self._rngs:
            if channel not in CHANNELS:
                raise KeyError(f"unknown noise channel {channel!r}")
            ss = np.random.SeedSequence(self.seed, spawn_key=(_CHANNEL_IDS[channel],))
            self._rngs[channel] = np.random.Generator(np.random.PCG64(ss))
            self._cache[channel] = np.empty(0)
        return self._rngs[channel]

    def _extend(self, channel, upto):
        rng = self._rng(channel)
        have = self._cache[channel]
        if upto <= len(have):
            return
        n = max(upto - len(have), self._BLOCK, len(have))
        if CHANNELS[channel] == "uniform":
            new = (rng.integers(0, 2 ** 53, size=n).astype(float) + 0.5) * 2.0 ** -53
        else:
            new = rng.standard_normal(n)
        self._cache[channel] = np.concatenate([have, new])

    def draw(self, channel: str, start: int, n: int) -> np.ndarray:
        end = start + n
        if end > self.capacity:
            raise NoiseExhaustedError(
                f"channel {channel!r} of seed {self.seed} exhausted ({end} > {self.capacity})")
        self._extend(channel, end)
        return self._cache[channel][start:end]

    def cursor(self) -> "_Cursor":
        return _Cursor(self)


class _Cursor:
    """Sequential reader over a BaseNoise, always starting at index 0."""

    def __init__(self, noise: BaseNoise):
        self.noise = noise
        self.pos = dict.fromkeys(CHANNELS, 0)

    def take(self, channel: str, n: int) -> np.ndarray:
        out = self.noise.draw(channel, self.pos[channel], n)
        self.pos[channel] += n
        return out


@dataclass(frozen=True)
class GenConfig:
    """Generation limits.

    mode: ``"horizon"`` keeps every event in [0, horizon); ``"count"`` keeps
    the first ``max_events`` events; ``"cluster"`` keeps background events
    in [0, horizon) together with their complete, untruncated offspring
    clusters (subcritical parameters only).
    """

    mode: str = "count"
    horizon: Optional[float] = None
    max_events: Optional[int] = 250
    batch_size: int = 256
    max_total: int = 5_000_000

    def __post_init__(self):
        if self.mode not in ("horizon", "count", "cluster"):
            raise ValueError(f"unknown generation mode {self.mode!r}")
        if self.mode == "count":
            if self.max_events is None or self.max_events < 0:
                raise ValueError("count mode needs max_events >= 0")
        elif self.horizon is None or not self.horizon > 0:
            raise ValueError(f"{self.mode} mode needs horizon > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @classmethod
    def horizon_limited(cls, horizon, **kw):
        return cls(mode="horizon", horizon=horizon, max_events=None, **kw)

    @classmethod
    def count_limited(cls, n=250, **kw):
        return cls(mode="count", horizon=None, max_events=n, **kw)


@dataclass
class Trace:
    """Frozen discrete structure plus the per-event noise sums.

    Arrays are aligned with the output stream. ``rate_mult`` is the number of
    background centers M, so that background arrivals are S / (M mu).
    """

    s_root: np.ndarray
    delay_sum: np.ndarray
    x_root: np.ndarray
    y_root: np.ndarray
    nx: np.ndarray
    ny: np.ndarray
    is_background: np.ndarray
    rate_mult: int

    def coordinates(self, params: ModelParams) -> np.ndarray:
        t = self.s_root / (self.rate_mult * params.mu) + self.delay_sum / params.beta
        x = self.x_root + math.sqrt(params.var_x) * self.nx
        y = self.y_root + math.sqrt(params.var_y) * self.ny
        return np.column_stack([t, x, y])

    def select(self, idx) -> "Trace":
        return Trace(*(getattr(self, f)[idx] for f in
                       ("s_root", "delay_sum", "x_root", "y_root", "nx", "ny", "is_background")),
                     rate_mult=self.rate_mult)


def poisson_inverse(u: np.ndarray, mean: float) -> np.ndarray:
    """Inverse-CDF Poisson draws from open-interval uniforms."""
    if mean <= 0:
        return np.zeros(len(u), dtype=np.int64)
    kmax = int(mean + 20 * math.sqrt(mean) + 30)
    cdf = stats.poisson.cdf(np.arange(kmax + 1), mean)
    return np.searchsorted(cdf, u, side="left").astype(np.int64)


def _background(params, bg, cur, t_end):
    rate = bg.n_centers * params.mu
    target = rate * t_end
    chunks, total = [], 0.0
    while True:
        n = max(64, int(1.2 * (target - total) + 5 * math.sqrt(max(target - total, 1.0))))
        s = total + np.cumsum(-np.log(cur.take("bg_time", n)))
        chunks.append(s)
        total = s[-1]
        if total >= target:
            break
    s_all = np.concatenate(chunks)
    k = int(np.searchsorted(s_all, target, side="left"))
    s_root = s_all[:k]
    comp = np.minimum((cur.take("bg_component", k) * bg.n_centers).astype(np.int64),
                      bg.n_centers - 1)
    z = cur.take("bg_location", 2 * k).reshape(k, 2)
    centers = bg.center_array[comp]
    return s_root, centers[:, 0] + bg.sigma0 * z[:, 0], centers[:, 1] + bg.sigma0 * z[:, 1]


def _simulate_raw(params, bg, noise, t_end, prune, max_total):
    cur = noise.cursor()
    rate = bg.n_centers * params.mu
    s_root, xr, yr = _background(params, bg, cur, t_end)
    k = len(s_root)
    gen = dict(root=np.arange(k), d=np.zeros(k), nx=np.zeros(k), ny=np.zeros(k),
               gid=np.arange(k))
    parts = [dict(gen, parent=np.full(k, -1))]
    n_total = k
    m = params.branching_ratio
    while len(gen["gid"]):
        counts = poisson_inverse(cur.take("offspring_count", len(gen["gid"])), m)
        n_new = int(counts.sum())
        if n_new == 0:
            break
        if n_total + n_new > max_total:
            raise SimulationError(
                f"event count exceeded max_total={max_total} "
                f"(branching ratio {m:.4g}); non-termination risk")
        par = np.repeat(np.arange(len(counts)), counts)
        e = -np.log(cur.take("offspring_delay", n_new))
        z = cur.take("offspring_offset", 2 * n_new).reshape(n_new, 2)
        child = dict(root=gen["root"][par], d=gen["d"][par] + e,
                     nx=gen["nx"][par] + z[:, 0], ny=gen["ny"][par] + z[:, 1],
                     gid=n_total + np.arange(n_new), parent=gen["gid"][par])
        n_total += n_new
        if prune:
            t = s_root[child["root"]] / rate + child["d"] / params.beta
            keep = t < t_end
            child = {key: v[keep] for key, v in child.items()}
            # keep global ids contiguous over stored events only
        parts.append(child)
        gen = child
    cat = {key: np.concatenate([p[key] for p in parts]) for key in parts[0]}
    return cat, s_root, xr, yr


def _assemble(params, bg, cat, s_root, xr, yr, t_end, keep_time, n_keep):
    rate_mult = bg.n_centers
    root = cat["root"]
    tr = Trace(s_root=s_root[root], delay_sum=cat["d"], x_root=xr[root], y_root=yr[root],
               nx=cat["nx"], ny=cat["ny"], is_background=cat["parent"] < 0,
               rate_mult=rate_mult)
    coords = tr.coordinates(params)
    inside = bg.contains(coords[:, 1], coords[:, 2])
    if keep_time:
        inside &= coords[:, 0] < t_end
    idx = np.flatnonzero(inside)
    order = idx[np.argsort(coords[idx, 0], kind="stable")]
    if n_keep is not None:
        order = order[:n_keep]
    # parent ids -> positions in the output stream
    gid = cat["gid"]
    pos = np.full(int(gid.max()) + 1 if len(gid) else 1, -2, dtype=np.int64)
    pos[gid[order]] = np.arange(len(order))
    par_gid = cat["parent"][order]
    parent = np.where(par_gid < 0, -1, pos[np.maximum(par_gid, 0)])
    c = coords[order]
    return c, parent, tr.select(order)


def simulate_traced(params: ModelParams, bg: BackgroundConfig, noise: BaseNoise,
                    cfg: GenConfig) -> tuple:
    """Simulate one stream and return ``(EventStream, Trace)``."""
    if cfg.mode == "cluster":
        if not params.subcritical:
            raise SupercriticalError(
                f"branching ratio {params.branching_ratio:.4g} >= 1: untruncated clusters "
                "do not terminate")
        cat, s_root, xr, yr = _simulate_raw(params, bg, noise, cfg.horizon, False, cfg.max_total)
        c, parent, tr = _assemble(params, bg, cat, s_root, xr, yr, cfg.horizon, False, None)
        horizon = cfg.horizon
    elif cfg.mode == "horizon":
        cat, s_root, xr, yr = _simulate_raw(params, bg, noise, cfg.horizon, True, cfg.max_total)
        c, parent, tr = _assemble(params, bg, cat, s_root, xr, yr, cfg.horizon, True, None)
        horizon = cfg.horizon
    else:
        n = cfg.max_events
        frac = max(bg.mass_in_domain() / bg.n_centers, 1e-3)
        t_end = (n + 6 * math.sqrt(n) + 10) / (bg.n_centers * params.mu * frac)
        for _ in range(40):
            cat, s_root, xr, yr = _simulate_raw(params, bg, noise, t_end, True, cfg.max_total)
            c, parent, tr = _assemble(params, bg, cat, s_root, xr, yr, t_end, True, None)
            if len(c) >= n:
                break
            # rare: regenerate over a longer window
            t_end *= 2.0
        c, parent, tr = c[:n], parent[:n], tr.select(slice(0, n))
        parent = np.where(parent >= n, -2, parent)
        horizon = None
    if len(c) > 1 and np.any(np.diff(c[:, 0]) <= 0):
        raise SimulationError("tied event times")  # probability zero
    stream = EventStream(c[:, 0], c[:, 1], c[:, 2], horizon=horizon,
                         truncation=cfg.max_events if cfg.mode == "count" else None,
                         parent=parent)
    stream.meta["seed"] = noise.seed
    return stream, tr


def simulate_stream(params: ModelParams, bg: BackgroundConfig, noise, cfg: GenConfig) -> EventStream:
    """One stream from the Hawkes law at ``params``; ``noise`` is a BaseNoise or a seed."""
    if not isinstance(noise, BaseNoise):
        noise = BaseNoise(noise)
    return simulate_traced(params, bg, noise, cfg)[0]


def _one(args):
    j, params, bg, seed, cfg = args
    try:
        return simulate_stream(params, bg, BaseNoise(seed), cfg)
    except Exception as e:
        raise type(e)(f"stream {j} (seed {seed}): {e}") from e


def simulate_batch(params: ModelParams, bg: BackgroundConfig, seeds: Sequence[int],
                   cfg: GenConfig, jobs: int = 1) -> list:
    """Streams for each seed, in seed order regardless of ``jobs``."""
    tasks = [(j, params, bg, int(s), cfg) for j, s in enumerate(seeds)]
    if jobs > 1 and len(tasks) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(jobs) as ex:
            return list(ex.map(_one, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    return [_one(t) for t in tasks]


def reparam_gradient(params: ModelParams, bg: BackgroundConfig, noise, cfg: GenConfig) -> np.ndarray:
    """Pathwise derivatives of each retained (t, x, y) with frozen structure.

    Returns an (n, 3, 4) array; the last axis is (log mu, log alpha, log beta,
    log sigma^2). alpha only enters through offspring counts, so its column is
    zero.
    """
    if params.anisotropic:
        raise ModelError("pathwise gradients are defined for the isotropic kernel")
    if not isinstance(noise, BaseNoise):
        noise = BaseNoise(noise)
    _, tr = simulate_traced(params, bg, noise, cfg)
    n = len(tr.s_root)
    g = np.zeros((n, 3, 4))
    g[:, 0, 0] = -tr.s_root / (tr.rate_mult * params.mu)
    g[:, 0, 2] = -tr.delay_sum / params.beta
    sigma = math.sqrt(params.sigma_sq)
    g[:, 1, 3] = 0.5 * sigma * tr.nx
    g[:, 2, 3] = 0.5 * sigma * tr.ny
    return g


def seeds_for(base_seed: int, n: int, *key: int) -> list:
    """``n`` independent stream seeds derived from a base seed and an optional key path."""
    ss = np.random.SeedSequence(int(base_seed), spawn_key=tuple(int(k) for k in key))
    return [int(s) for s in ss.generate_state(n, dtype=np.uint64) >> np.uint64(1)]
