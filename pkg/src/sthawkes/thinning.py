"""Missing-at-random thinning driven by a rectangular region map."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .generator import BaseNoise
from .model import EventStream


class RegionMapError(ValueError):
    pass


@dataclass(frozen=True)
class Region:
    """A named union of closed rectangles ``(x0, y0, x1, y1)``.

    ``q`` is the reporting rate. The victimization step uses ``p`` directly
    when given, otherwise ``population * victimization_rate * horizon_ratio``
    divided by the region's event count.
    """

    name: str
    rects: tuple
    q: float = 1.0
    p: Optional[float] = None
    population: Optional[float] = None
    victimization_rate: Optional[float] = None

    def __post_init__(self):
        rects = tuple(tuple(float(v) for v in r) for r in self.rects)
        if not rects:
            raise RegionMapError(f"region {self.name!r} has no rectangles")
        for r in rects:
            if len(r) != 4 or not (r[0] < r[2] and r[1] < r[3]):
                raise RegionMapError(f"region {self.name!r}: bad rectangle {r}")
        object.__setattr__(self, "rects", rects)
        for key in ("q", "p"):
            v = getattr(self, key)
            if v is not None and not 0.0 <= v <= 1.0:
                raise RegionMapError(f"region {self.name!r}: {key}={v} outside [0, 1]")

    def contains(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        hit = np.zeros(np.broadcast(x, y).shape, dtype=bool)
        for x0, y0, x1, y1 in self.rects:
            hit |= (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)
        return hit

    def to_dict(self) -> dict:
        d = dict(name=self.name, rects=[list(r) for r in self.rects], q=self.q)
        for key in ("p", "population", "victimization_rate"):
            if getattr(self, key) is not None:
                d[key] = getattr(self, key)
        return d


def _overlap(a, b) -> bool:
    # open-interior intersection; shared edges are allowed
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


@dataclass(frozen=True)
class RegionMap:
    regions: tuple = ()
    default_rate: float = 1.0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "regions", tuple(self.regions))
        if not 0.0 <= self.default_rate <= 1.0:
            raise RegionMapError(f"default_rate={self.default_rate} outside [0, 1]")
        names = [r.name for r in self.regions]
        if len(set(names)) != len(names):
            raise RegionMapError("duplicate region names")
        for i, ri in enumerate(self.regions):
            for rj in self.regions[i + 1:]:
                for a in ri.rects:
                    for b in rj.rects:
                        if _overlap(a, b):
                            raise RegionMapError(f"regions {ri.name!r} and {rj.name!r} overlap")

    @classmethod
    def uniform(cls, rate: float) -> "RegionMap":
        return cls((), default_rate=rate)

    def region_index(self, x, y) -> np.ndarray:
        """Index of the containing region (first in file order on shared edges), -1 if none."""
        x = np.asarray(x, dtype=float)
        out = np.full(x.shape, -1, dtype=np.int64)
        for k in range(len(self.regions) - 1, -1, -1):
            out[self.regions[k].contains(x, y)] = k
        return out

    def reporting_rates(self, x, y) -> np.ndarray:
        idx = self.region_index(x, y)
        q = np.array([r.q for r in self.regions] + [self.default_rate])
        return q[idx]

    def with_rates(self, q: Sequence[float]) -> "RegionMap":
        if len(q) != len(self.regions):
            raise RegionMapError(f"expected {len(self.regions)} rates, got {len(q)}")
        regs = [Region(r.name, r.rects, float(v), r.p, r.population, r.victimization_rate)
                for r, v in zip(self.regions, q)]
        return RegionMap(regs, self.default_rate)

    def to_dict(self) -> dict:
        return dict(default_rate=self.default_rate,
                    regions=[r.to_dict() for r in self.regions])

    @classmethod
    def from_dict(cls, d: dict) -> "RegionMap":
        unknown = set(d) - {"default_rate", "regions", "version"}
        if unknown:
            raise RegionMapError(f"unknown region-map keys: {sorted(unknown)}")
        regs = []
        for r in d.get("regions", []):
            extra = set(r) - {"name", "rects", "q", "p", "population", "victimization_rate"}
            if extra:
                raise RegionMapError(f"unknown region keys: {sorted(extra)}")
            regs.append(Region(r["name"], r["rects"], r.get("q", 1.0), r.get("p"),
                               r.get("population"), r.get("victimization_rate")))
        return cls(regs, d.get("default_rate", 1.0))


def lookup_rate(p, region_map: RegionMap):
    p = np.asarray(p, dtype=float)
    out = region_map.reporting_rates(p[..., 0], p[..., 1])
    return float(out) if out.ndim == 0 else out


def band_partition(bounds, n_regions: int = 19, rates: Optional[Sequence[float]] = None,
                   default_rate: float = 1.0) -> RegionMap:
    """Synthetic partition of ``bounds`` into horizontal bands of equal height.

    Rates default to 1 (no thinning); experiments pass their own.
    """
    x0, x1, y0, y1 = bounds
    edges = np.linspace(y0, y1, n_regions + 1)
    rates = [1.0] * n_regions if rates is None else list(rates)
    if len(rates) != n_regions:
        raise RegionMapError(f"expected {n_regions} rates, got {len(rates)}")
    regs = [Region(f"d{k + 1:02d}", [(x0, edges[k], x1, edges[k + 1])], float(rates[k]))
            for k in range(n_regions)]
    return RegionMap(regs, default_rate)


def demo_region_map(bounds, seed: int = 0, rate_range=(0.02, 0.15), n_bands: int = 10) -> RegionMap:
    """19-region stand-in for a city map: ``n_bands`` horizontal bands split
    into west/east halves, with the northernmost band left whole.

    Reporting rates are drawn uniformly from ``rate_range`` with a fixed seed,
    so neighbouring regions differ and hotspots are well separated.
    """
    x0, x1, y0, y1 = bounds
    xm = 0.5 * (x0 + x1)
    ey = np.linspace(y0, y1, n_bands + 1)
    rects = []
    for k in range(n_bands - 1):
        rects += [(x0, ey[k], xm, ey[k + 1]), (xm, ey[k], x1, ey[k + 1])]
    rects.append((x0, ey[-2], x1, ey[-1]))
    rates = np.random.default_rng(seed).uniform(*rate_range, size=len(rects))
    regs = [Region(f"d{k + 1:02d}", [r], float(q)) for k, (r, q) in enumerate(zip(rects, rates))]
    return RegionMap(regs, 1.0, dict(kind="demo", seed=seed))


def _as_noise(noise, stream):
    if isinstance(noise, BaseNoise):
        return noise
    if noise is None:
        noise = stream.meta.get("seed")
        if noise is None:
            raise ValueError("stream carries no seed; pass a noise source")
    return BaseNoise(noise)


def _apply(stream: EventStream, keep: np.ndarray, keep_removed: bool) -> EventStream:
    if keep_removed:
        out = stream.select(np.arange(len(stream)))
        prev = stream.retained if stream.retained is not None else np.ones(len(stream), bool)
        out.retained = prev & keep
        return out
    return stream.select(keep)


def thin_stream(stream: EventStream, region_map: RegionMap, noise=None, *,
                keep_removed: bool = False) -> EventStream:
    """Keep event i iff u_i < rate(x_i, y_i), with u_i the i-th ``thinning`` draw.

    Draws are keyed by event index so retention does not depend on theta.
    ``noise`` is a BaseNoise or seed; by default the stream's own seed.
    """
    noise = _as_noise(noise, stream)
    u = noise.draw("thinning", 0, len(stream))
    keep = u < region_map.reporting_rates(stream.x, stream.y)
    return _apply(stream, keep, keep_removed)


def victimization_rates(stream: EventStream, region_map: RegionMap, horizon_ratio: float) -> np.ndarray:
    """Per-region retention min(p_d, 1) for this stream."""
    idx = region_map.region_index(stream.x, stream.y)
    out = np.ones(len(region_map.regions) + 1)
    for k, r in enumerate(region_map.regions):
        if r.p is not None:
            out[k] = r.p
            continue
        if r.population is None or r.victimization_rate is None:
            raise RegionMapError(f"region {r.name!r} has no retention metadata (p or "
                                 "population + victimization_rate)")
        n_d = int(np.sum(idx == k))
        target = r.population * r.victimization_rate * horizon_ratio
        out[k] = 1.0 if n_d == 0 else min(target / n_d, 1.0)
    return np.minimum(out, 1.0)


def victimization_subsample(stream: EventStream, region_map: RegionMap, horizon_ratio: float = 1.0,
                            noise=None, *, keep_removed: bool = False) -> EventStream:
    """Per-region Bernoulli(min(p_d, 1)) retention using the ``victimization`` channel.

    Events outside every region are kept.
    """
    noise = _as_noise(noise, stream)
    if len(stream) == 0:
        return stream.select(np.zeros(0, dtype=np.int64))
    rates = victimization_rates(stream, region_map, horizon_ratio)
    idx = region_map.region_index(stream.x, stream.y)
    u = noise.draw("victimization", 0, len(stream))
    keep = u < rates[idx]
    return _apply(stream, keep, keep_removed)


def report(stream: EventStream, region_map: RegionMap, noise=None, *,
           victimization: bool = False, horizon_ratio: float = 1.0) -> EventStream:
    """Reported events: optional victimization step, then reporting-rate thinning."""
    noise = _as_noise(noise, stream)
    if victimization:
        stream = victimization_subsample(stream, region_map, horizon_ratio, noise)
    return thin_stream(stream, region_map, noise)
