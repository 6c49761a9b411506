"""Spatiotemporal Hawkes model: parameters, background geometry, event streams
and the closed-form intensity / kernel / compensator formulas.

The model is

    lambda(t, x, y | H_t) = mu0(x, y) + sum_{t_i < t} g(t - t_i, x - x_i, y - y_i)

with a Gaussian-mixture background

    mu0(x, y) = mu * sum_c N((x, y); c, sigma0^2 I)

and the exponential / Gaussian triggering kernel

    g(t, x, y) = alpha * exp(-beta t) * exp(-(x^2 + y^2) / (2 sigma^2)).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator, NamedTuple, Optional, Sequence

import numpy as np
from scipy.special import ndtr

TWO_PI = 2.0 * np.pi

DEFAULT_CENTERS = tuple(
    (sx * 6.0, sy * cy)
    for cy in (20.0, 10.0, 30.0, 0.0)
    for sy in ((1.0, -1.0) if cy else (1.0,))
    for sx in (1.0, -1.0)
)
DEFAULT_SIGMA0 = 4.5
# x in [-10.5, 10.5], y in [-36, 36]: 7 x 16 grid gives 3 x 4.5 cells
DEFAULT_BOUNDS = (-10.5, 10.5, -36.0, 36.0)


class ModelError(ValueError):
    """Invalid model configuration or corrupt event data."""


@dataclass(frozen=True)
class ModelParams:
    """Hawkes parameter vector (mu, alpha, beta, sigma^2).

    ``sigma_x_sq`` / ``sigma_y_sq`` switch the spatial kernel to the
    anisotropic form; when only one is given the other falls back to
    ``sigma_sq``. ``alpha = 0`` is allowed and means no triggering; every
    other component must be strictly positive.
    """

    mu: float
    alpha: float
    beta: float
    sigma_sq: float
    sigma_x_sq: Optional[float] = None
    sigma_y_sq: Optional[float] = None

    def __post_init__(self):
        for name in ("mu", "alpha", "beta", "sigma_sq", "sigma_x_sq", "sigma_y_sq"):
            v = getattr(self, name)
            if v is None:
                continue
            if not np.isfinite(v) or v < 0 or (v == 0 and name != "alpha"):
                raise ModelError(f"{name} must be finite and > 0, got {v!r}")

    @classmethod
    def from_branching(cls, mu, theta_br, omega, sigma_sq=None, *,
                       sigma_x=None, sigma_y=None) -> "ModelParams":
        """Build from the (theta, omega) form where alpha = theta*omega, beta = omega."""
        kw = {}
        if sigma_x is not None or sigma_y is not None:
            sx = sigma_x if sigma_x is not None else sigma_y
            sy = sigma_y if sigma_y is not None else sigma_x
            kw = dict(sigma_x_sq=sx ** 2, sigma_y_sq=sy ** 2)
            if sigma_sq is None:
                sigma_sq = sx * sy
        if sigma_sq is None:
            raise ModelError("a spatial variance is required")
        return cls(mu, theta_br * omega, omega, sigma_sq, **kw)

    @property
    def anisotropic(self) -> bool:
        return self.sigma_x_sq is not None or self.sigma_y_sq is not None

    @property
    def var_x(self) -> float:
        return self.sigma_x_sq if self.sigma_x_sq is not None else self.sigma_sq

    @property
    def var_y(self) -> float:
        return self.sigma_y_sq if self.sigma_y_sq is not None else self.sigma_sq

    @property
    def theta_br(self) -> float:
        return self.alpha / self.beta

    @property
    def omega(self) -> float:
        return self.beta

    @property
    def temporal_mass(self) -> float:
        """A = integral of alpha*exp(-beta t) over t > 0."""
        return self.alpha / self.beta

    @property
    def spatial_mass(self) -> float:
        """B = integral of the spatial kernel over the plane (2 pi sigma^2)."""
        return TWO_PI * np.sqrt(self.var_x * self.var_y)

    @property
    def branching_ratio(self) -> float:
        return self.temporal_mass * self.spatial_mass

    @property
    def subcritical(self) -> bool:
        return self.branching_ratio < 1.0

    def as_log_vector(self) -> np.ndarray:
        """(log mu, log alpha, log beta, log sigma^2); isotropic form only."""
        return np.log([self.mu, self.alpha, self.beta, self.sigma_sq])

    @classmethod
    def from_log_vector(cls, v) -> "ModelParams":
        v = np.asarray(v, dtype=float)
        return cls(*(float(e) for e in np.exp(v)))

    def scaled(self, **factors) -> "ModelParams":
        return replace(self, **{k: getattr(self, k) * f for k, f in factors.items()})

    def to_dict(self) -> dict:
        d = dict(mu=self.mu, alpha=self.alpha, beta=self.beta, sigma_sq=self.sigma_sq)
        if self.sigma_x_sq is not None:
            d["sigma_x_sq"] = self.sigma_x_sq
        if self.sigma_y_sq is not None:
            d["sigma_y_sq"] = self.sigma_y_sq
        return d


@dataclass(frozen=True)
class BackgroundConfig:
    centers: tuple = DEFAULT_CENTERS
    sigma0: float = DEFAULT_SIGMA0
    domain_bounds: tuple = DEFAULT_BOUNDS

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=float)
        if c.ndim != 2 or c.shape[1] != 2 or len(c) == 0:
            raise ModelError("centers must be a non-empty list of 2D points")
        if not self.sigma0 > 0:
            raise ModelError("sigma0 must be > 0")
        x0, x1, y0, y1 = self.domain_bounds
        if not (x0 < x1 and y0 < y1):
            raise ModelError(f"degenerate domain bounds {self.domain_bounds}")
        object.__setattr__(self, "centers", tuple(map(tuple, c.tolist())))
        object.__setattr__(self, "domain_bounds", tuple(float(b) for b in self.domain_bounds))

    @property
    def center_array(self) -> np.ndarray:
        return np.asarray(self.centers, dtype=float)

    @property
    def n_centers(self) -> int:
        return len(self.centers)

    def contains(self, x, y) -> np.ndarray:
        x0, x1, y0, y1 = self.domain_bounds
        x = np.asarray(x)
        y = np.asarray(y)
        return (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)

    def mass_in_box(self, box) -> float:
        """Integral of sum_c N(.; c, sigma0^2 I) over an axis-aligned box."""
        x0, x1, y0, y1 = box
        c = self.center_array
        s = self.sigma0
        px = ndtr((x1 - c[:, 0]) / s) - ndtr((x0 - c[:, 0]) / s)
        py = ndtr((y1 - c[:, 1]) / s) - ndtr((y0 - c[:, 1]) / s)
        return float(np.sum(px * py))

    def mass_in_domain(self) -> float:
        return self.mass_in_box(self.domain_bounds)

    def with_bounds(self, bounds) -> "BackgroundConfig":
        return replace(self, domain_bounds=tuple(bounds))


def unbounded_background(extent: float = 1e6) -> BackgroundConfig:
    """Default centers inside a box large enough that nothing is discarded."""
    return BackgroundConfig(domain_bounds=(-extent, extent, -extent, extent))


class Event(NamedTuple):
    t: float
    x: float
    y: float
    parent_index: int = -1


@dataclass
class EventStream:
    """Time-ordered events stored column-wise.

    ``parent`` is -1 for background events, the index of the parent within
    this stream for offspring, and -2 when the parent was not kept (out of
    domain or truncated). ``retained`` is only populated by thinning when
    removed events are kept for diagnostics.
    """

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    horizon: Optional[float] = None
    truncation: Optional[int] = None
    parent: Optional[np.ndarray] = None
    retained: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.ascontiguousarray(self.t, dtype=float)
        self.x = np.ascontiguousarray(self.x, dtype=float)
        self.y = np.ascontiguousarray(self.y, dtype=float)
        if not (self.t.shape == self.x.shape == self.y.shape) or self.t.ndim != 1:
            raise ModelError("t, x, y must be 1-D arrays of equal length")
        if self.parent is not None:
            self.parent = np.asarray(self.parent, dtype=np.int64)
        if self.retained is not None:
            self.retained = np.asarray(self.retained, dtype=bool)

    @classmethod
    def empty(cls, horizon=None) -> "EventStream":
        z = np.empty(0)
        return cls(z, z, z, horizon=horizon, parent=np.empty(0, dtype=np.int64))

    @classmethod
    def from_events(cls, events: Sequence, horizon=None) -> "EventStream":
        ev = [Event(*e) for e in events]
        if not ev:
            return cls.empty(horizon)
        a = np.array([(e.t, e.x, e.y) for e in ev], dtype=float)
        parent = np.array([e.parent_index for e in ev], dtype=np.int64)
        return cls(a[:, 0], a[:, 1], a[:, 2], horizon=horizon, parent=parent)

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[Event]:
        par = self.parent if self.parent is not None else np.full(len(self), -1)
        for i in range(len(self)):
            yield Event(float(self.t[i]), float(self.x[i]), float(self.y[i]), int(par[i]))

    @property
    def events(self) -> list:
        return list(self)

    @property
    def xy(self) -> np.ndarray:
        return np.column_stack([self.x, self.y])

    def validate(self, bg: Optional[BackgroundConfig] = None) -> "EventStream":
        t = self.t
        if np.any(~np.isfinite(t)) or np.any(~np.isfinite(self.x)) or np.any(~np.isfinite(self.y)):
            raise ModelError("non-finite event coordinates")
        if len(t) and t[0] < 0:
            raise ModelError("negative event time")
        bad = np.flatnonzero(np.diff(t) <= 0)
        if len(bad):
            raise ModelError(f"timestamps not strictly increasing at event {bad[0] + 1}")
        if bg is not None and not np.all(bg.contains(self.x, self.y)):
            raise ModelError("event outside domain bounds")
        return self

    def select(self, keep) -> "EventStream":
        """Subsequence by boolean mask or sorted index array."""
        keep = np.asarray(keep)
        idx = np.flatnonzero(keep) if keep.dtype == bool else keep
        parent = None
        if self.parent is not None:
            remap = np.full(len(self) + 1, -2, dtype=np.int64)
            remap[idx] = np.arange(len(idx))
            old = self.parent[idx]
            parent = np.where(old >= 0, remap[np.where(old >= 0, old, len(self))], old)
        return EventStream(self.t[idx], self.x[idx], self.y[idx], horizon=self.horizon,
                           truncation=self.truncation, parent=parent,
                           retained=None if self.retained is None else self.retained[idx],
                           meta=dict(self.meta))

    def restrict(self, t_end: float) -> "EventStream":
        out = self.select(self.t < t_end)
        out.horizon = t_end if self.horizon is None else min(self.horizon, t_end)
        return out

    def reported(self) -> "EventStream":
        """Drop events flagged as removed."""
        if self.retained is None:
            return self
        out = self.select(self.retained)
        out.retained = None
        return out

    def same_events(self, other: "EventStream") -> bool:
        return (len(self) == len(other) and np.array_equal(self.t, other.t)
                and np.array_equal(self.x, other.x) and np.array_equal(self.y, other.y))


def _as_history(history):
    if isinstance(history, EventStream):
        return history.t, history.x, history.y
    h = np.asarray(history, dtype=float).reshape(-1, 3)
    return h[:, 0], h[:, 1], h[:, 2]


def background_intensity(p, mu: float, bg: BackgroundConfig):
    """mu * sum_c N(p; c, sigma0^2 I). Accepts a single point or an (n, 2) array."""
    p = np.asarray(p, dtype=float)
    c = bg.center_array
    s2 = bg.sigma0 ** 2
    d2 = ((p[..., None, :] - c) ** 2).sum(-1)
    out = mu * np.exp(-d2 / (2 * s2)).sum(-1) / (TWO_PI * s2)
    return float(out) if out.ndim == 0 else out


def triggering_kernel(dt, dx, dy, params: ModelParams):
    dt = np.asarray(dt, dtype=float)
    if np.any(dt <= 0):
        raise ModelError("triggering kernel requires dt > 0")
    out = params.alpha * np.exp(-params.beta * dt
                                - np.square(dx) / (2 * params.var_x)
                                - np.square(dy) / (2 * params.var_y))
    return float(out) if np.ndim(out) == 0 else out


def conditional_intensity(t: float, p, history, params: ModelParams, bg: BackgroundConfig) -> float:
    ht, hx, hy = _as_history(history)
    before = ht < t
    lam = background_intensity(p, params.mu, bg)
    if before.any():
        lam += np.sum(triggering_kernel(t - ht[before], p[0] - hx[before], p[1] - hy[before], params))
    return float(lam)


def total_background_rate(params: ModelParams, bg: BackgroundConfig) -> float:
    """mu integrated over the whole plane: each Gaussian contributes mu."""
    return params.mu * bg.n_centers


def temporal_projection_intensity(t: float, history, params: ModelParams, bg: BackgroundConfig) -> float:
    ht = _as_history(history)[0]
    ht = ht[ht < t]
    jump = params.spatial_mass * params.alpha
    return float(total_background_rate(params, bg) + jump * np.exp(-params.beta * (t - ht)).sum())


def temporal_compensator(t, history, params: ModelParams, bg: BackgroundConfig):
    """Lambda(t) of the temporal projection; vectorised over ``t``."""
    ht = _as_history(history)[0]
    t = np.asarray(t, dtype=float)
    lag = t[..., None] - ht
    inc = np.where(lag > 0, -np.expm1(-params.beta * np.maximum(lag, 0.0)), 0.0).sum(-1)
    out = total_background_rate(params, bg) * t + params.branching_ratio * inc
    return float(out) if out.ndim == 0 else out


def compensator_at_events(times, params: ModelParams, bg: BackgroundConfig) -> np.ndarray:
    """Lambda(t_i) at each event time by the O(n) exponential recursion."""
    times = np.asarray(times, dtype=float)
    out = np.empty(len(times))
    m_tot = total_background_rate(params, bg)
    n_br = params.branching_ratio
    beta = params.beta
    excite = 0.0  # sum_j exp(-beta (t - t_j)) over earlier events
    acc = 0.0
    prev = 0.0
    for i, ti in enumerate(times):
        dt = ti - prev
        decay = np.exp(-beta * dt)
        acc += m_tot * dt + n_br * excite * (1.0 - decay)
        excite = excite * decay
        out[i] = acc
        excite += 1.0
        prev = ti
    return out


def residuals(stream: EventStream, params: ModelParams, bg: BackgroundConfig) -> np.ndarray:
    """Transformed inter-arrivals Lambda(t_i) - Lambda(t_{i-1}); Exp(1) under the model."""
    lam = compensator_at_events(stream.t, params, bg)
    return np.diff(lam, prepend=0.0)
