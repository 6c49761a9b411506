"""Persistence: stream CSV + JSON sidecar, region-map JSON, versioned INI
config and run manifests. Formats are described in docs/FORMATS.md.
"""
from __future__ import annotations

import configparser
import csv
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .model import DEFAULT_BOUNDS, DEFAULT_CENTERS, DEFAULT_SIGMA0, BackgroundConfig, EventStream, ModelParams
from .thinning import RegionMap, RegionMapError


class ConfigError(ValueError):
    """Bad or missing configuration/input; the CLI maps it to exit code 2."""


class StreamFormatError(ConfigError):
    pass


# ---------------------------------------------------------------- streams

HEADER = ["stream_id", "t", "x", "y"]


def _fmt(v: float) -> str:
    return "%.17g" % v


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def write_streams(path, streams: Sequence[EventStream], meta: Optional[dict] = None,
                  with_retained: Optional[bool] = None):
    """One row per event, sorted by (stream_id, t). Removed events are written
    only when the streams carry ``retained`` flags."""
    path = Path(path)
    if with_retained is None:
        with_retained = any(s.retained is not None for s in streams)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADER + (["retained"] if with_retained else []))
        for k, s in enumerate(streams):
            ret = s.retained if s.retained is not None else np.ones(len(s), dtype=bool)
            for i in range(len(s)):
                row = [str(k), _fmt(s.t[i]), _fmt(s.x[i]), _fmt(s.y[i])]
                if with_retained:
                    row.append("1" if ret[i] else "0")
                w.writerow(row)
    side = dict(meta or {})
    side.setdefault("K", len(streams))
    side["horizons"] = [s.horizon for s in streams]
    side["truncation"] = [s.truncation for s in streams]
    side["seeds"] = [s.meta.get("seed") for s in streams]
    side["format_version"] = 1
    with open(sidecar_path(path), "w", encoding="utf-8") as fh:
        json.dump(side, fh, indent=1, sort_keys=True)


def read_streams(path) -> tuple:
    """(streams, metadata). Raises StreamFormatError naming the first bad row."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"stream file not found: {path}")
    meta = {}
    if sidecar_path(path).exists():
        with open(sidecar_path(path), encoding="utf-8") as fh:
            meta = json.load(fh)
    rows: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header not in (HEADER, HEADER + ["retained"]):
            raise StreamFormatError(f"{path}: bad header {header}")
        has_ret = len(header) == 5
        prev = (-1, -np.inf)
        for lineno, row in enumerate(r, start=2):
            if len(row) != len(header):
                raise StreamFormatError(f"{path}:{lineno}: expected {len(header)} fields")
            try:
                sid = int(row[0])
                t, x, y = float(row[1]), float(row[2]), float(row[3])
                ret = bool(int(row[4])) if has_ret else True
            except ValueError as e:
                raise StreamFormatError(f"{path}:{lineno}: {e}") from None
            if sid < prev[0] or (sid == prev[0] and t <= prev[1]) or sid < 0:
                raise StreamFormatError(f"{path}:{lineno}: rows not sorted by (stream_id, t)")
            prev = (sid, t)
            rows.setdefault(sid, []).append((t, x, y, ret))
    n = int(meta.get("K", max(rows, default=-1) + 1))
    horizons = meta.get("horizons") or [None] * n
    trunc = meta.get("truncation") or [None] * n
    seeds = meta.get("seeds") or [None] * n
    streams = []
    for k in range(n):
        a = np.array(rows.get(k, []), dtype=float).reshape(-1, 4)
        streams.append(EventStream(a[:, 0], a[:, 1], a[:, 2], horizon=horizons[k], truncation=trunc[k],
                                   retained=a[:, 3].astype(bool) if has_ret else None,
                                   meta={} if seeds[k] is None else dict(seed=seeds[k])))
    return streams, meta


# ------------------------------------------------------------ region maps

def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def region_map_hash(region_map: RegionMap) -> str:
    """sha256 of the canonical JSON form of a region map."""
    blob = json.dumps(region_map.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def write_region_map(path, region_map: RegionMap):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(region_map.to_dict(), fh, indent=1, sort_keys=True)


def read_region_map(path) -> RegionMap:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"region map file not found: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            return RegionMap.from_dict(json.load(fh))
    except (json.JSONDecodeError, RegionMapError, KeyError, TypeError) as e:
        raise ConfigError(f"{path}: invalid region map: {e}") from None


# ----------------------------------------------------------------- config

CONFIG_VERSION = 1

# section -> key -> (type, default); None default means "unset"
SCHEMA = {
    "run": dict(version=(int, CONFIG_VERSION), seed=(int, 0), streams=(int, 100), jobs=(int, 1)),
    "model": dict(mu=(float, 100.0), alpha=(float, 3.0), beta=(float, 0.2), sigma_sq=(float, 0.01),
                  sigma_x_sq=(float, None), sigma_y_sq=(float, None)),
    "background": dict(sigma0=(float, DEFAULT_SIGMA0), centers=(str, None), bounds=(str, None)),
    "generator": dict(mode=(str, "count"), horizon=(float, None), max_events=(int, 250)),
    "thinning": dict(region_map=(str, None), uniform_rate=(float, None), demo_seed=(int, None),
                     victimization=(bool, False), horizon_ratio=(float, 1.0)),
    "em": dict(max_iters=(int, 200), tol=(float, 1e-6)),
    "wgan": dict(lambda_gp=(float, 10.0), n_critic=(int, 5), lr=(float, 1e-4), lr_generator=(float, None),
                 beta1=(float, 0.0), beta2=(float, 0.9), batch_size=(int, 256), max_epochs=(int, 1000),
                 window=(int, 50), tol=(float, 1e-3), patience=(int, 3), hidden=(int, 64),
                 free=(str, "mu,alpha,beta,sigma_sq"), init_factors=(str, "0.5,1,2")),
    "gof": dict(k_synthetic=(int, 1000), n_bins=(int, 50)),
    "hotspots": dict(rows=(int, 7), cols=(int, 16), horizon=(float, 7.0), n_mc=(int, 100), k=(int, 10),
                     floor=(float, 1e-3)),
    "sweep": dict(mus=(str, "95,100,105"), alphas=(str, "2,3,4"), betas=(str, "0.1,0.2,0.3"),
                  sigma_sqs=(str, "0.01"), estimator=(str, "oracle"), n_streams=(int, 20),
                  train_horizon=(float, 7.0)),
}


def _convert(typ, raw: str, where: str):
    try:
        if typ is bool:
            v = raw.strip().lower()
            if v in ("1", "true", "yes", "on"):
                return True
            if v in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return typ(raw.strip())
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {typ.__name__}") from None


@dataclass
class Config:
    values: dict
    source: Optional[str] = None

    def __getitem__(self, section):
        return self.values[section]

    def get(self, section, key):
        return self.values[section][key]

    def set(self, section, key, value):
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key [{section}] {key}")
        self.values[section][key] = value

    def snapshot(self) -> dict:
        return {s: dict(v) for s, v in self.values.items()}

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for s, kv in self.values.items():
            cp[s] = {k: str(v) for k, v in kv.items() if v is not None}
        import io as _io
        buf = _io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    # -- derived objects

    def model_params(self) -> ModelParams:
        m = self.values["model"]
        return ModelParams(m["mu"], m["alpha"], m["beta"], m["sigma_sq"], m["sigma_x_sq"], m["sigma_y_sq"])

    def background(self) -> BackgroundConfig:
        b = self.values["background"]
        centers = DEFAULT_CENTERS if b["centers"] is None else tuple(
            tuple(float(v) for v in c.split(":")) for c in b["centers"].split(";"))
        bounds = DEFAULT_BOUNDS if b["bounds"] is None else tuple(_floats(b["bounds"]))
        if len(bounds) != 4 or any(len(c) != 2 for c in centers):
            raise ConfigError("[background] centers must be 'x:y;x:y...' and bounds 'x0,x1,y0,y1'")
        return BackgroundConfig(centers, b["sigma0"], bounds)

    def gen_config(self):
        from .generator import GenConfig
        g = self.values["generator"]
        try:
            if g["mode"] == "count":
                return GenConfig.count_limited(g["max_events"])
            return GenConfig(mode=g["mode"], horizon=g["horizon"], max_events=None)
        except ValueError as e:
            raise ConfigError(f"[generator] {e}") from None

    def region_map(self, base_dir=None) -> Optional[RegionMap]:
        from .thinning import demo_region_map
        th = self.values["thinning"]
        set_ = [k for k in ("region_map", "uniform_rate", "demo_seed") if th[k] is not None]
        if len(set_) > 1:
            raise ConfigError(f"[thinning] set only one of region_map, uniform_rate, demo_seed (got {set_})")
        if th["region_map"] is not None:
            p = Path(th["region_map"])
            if not p.is_absolute() and base_dir is not None:
                p = Path(base_dir) / p
            return read_region_map(p)
        if th["uniform_rate"] is not None:
            return RegionMap.uniform(th["uniform_rate"])
        if th["demo_seed"] is not None:
            return demo_region_map(self.background().domain_bounds, th["demo_seed"])
        return None

    def train_config(self):
        from .wgan import TrainConfig
        w = dict(self.values["wgan"])
        w["free"] = tuple(v.strip() for v in w["free"].split(",") if v.strip())
        w.pop("init_factors")
        try:
            return TrainConfig(**w)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"[wgan] {e}") from None

    def init_factors(self):
        return tuple(_floats(self.values["wgan"]["init_factors"]))


def _floats(s: str):
    try:
        return [float(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {s!r}") from None


def default_config() -> Config:
    return Config({s: {k: d for k, (_, d) in kv.items()} for s, kv in SCHEMA.items()})


def load_config(path=None) -> Config:
    """Parse an INI file over the defaults; unknown sections/keys are errors."""
    cfg = default_config()
    if path is None:
        return cfg
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser()
    try:
        cp.read(path, encoding="utf-8")
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from None
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"{path}: unknown section [{sec}]")
        for key, raw in cp[sec].items():
            if key not in SCHEMA[sec]:
                raise ConfigError(f"{path}: unknown key [{sec}] {key}")
            cfg.values[sec][key] = _convert(SCHEMA[sec][key][0], raw, f"{path} [{sec}] {key}")
    if cfg.values["run"]["version"] != CONFIG_VERSION:
        raise ConfigError(f"{path}: config version {cfg.values['run']['version']} "
                          f"is not supported (expected {CONFIG_VERSION})")
    cfg.source = str(path)
    return cfg


# --------------------------------------------------------------- manifest

MANIFEST = "manifest.json"


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    inputs: list = field(default_factory=list)
    outputs: list = field(default_factory=list)
    version: str = __version__
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return dict(command=self.command, config=self.config, seed=self.seed, inputs=self.inputs,
                    outputs=sorted(self.outputs), version=self.version, wall_time=self.wall_time)

    def write(self, out_dir):
        with open(Path(out_dir) / MANIFEST, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    @classmethod
    def read(cls, out_dir) -> "RunManifest":
        p = Path(out_dir) / MANIFEST
        if not p.exists():
            raise ConfigError(f"no {MANIFEST} in {out_dir}")
        with open(p, encoding="utf-8") as fh:
            return cls(**json.load(fh))


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)


def write_table(path, header: Sequence[str], rows):
    """Comma-separated table with 17-digit floats."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])


def read_table(path):
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r)
        return header, [row for row in r]


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
