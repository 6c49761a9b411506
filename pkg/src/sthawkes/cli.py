"""Command line entry point: ``sthawkes <subcommand> [--config PATH] [--seed N] [--out DIR] ...``.

Exit codes: 0 success, 2 configuration/usage error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import gof as gofm
from .generator import GenConfig, SimulationError, seeds_for, simulate_batch
from .hotspots import (EvalGrid, SweepConfig, expected_counts, hotspot_accuracy, relative_mae,
                       robustness_sweep, sweep_grid)
from .io import (MANIFEST, ConfigError, RunManifest, ensure_dir, file_hash, load_config, read_streams,
                 region_map_hash, write_json, write_streams, write_table, _floats)
from .model import ModelError, ModelParams, residuals
from .thinning import report

log = logging.getLogger("sthawkes")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_CONFIG)


def _common(p):
    p.add_argument("--config", help="INI configuration file")
    p.add_argument("--seed", type=int, help="base seed (overrides [run] seed)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--streams", type=int, help="number of streams (overrides [run] streams)")
    p.add_argument("--jobs", type=int, help="worker processes (overrides [run] jobs)")
    p.add_argument("--input", help="input stream file (CSV)")


def build_parser():
    ap = _Parser(prog="sthawkes", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    for name, helptext in [("simulate", "simulate un-thinned streams"),
                           ("thin", "apply the reporting mechanism to streams"),
                           ("fit-em", "EM estimate treating the streams as complete"),
                           ("fit-wgan", "multi-start WGAN-GP estimation"),
                           ("gof", "score candidate estimates and select the best"),
                           ("hotspots", "grid expected counts, MAE and top-k accuracy"),
                           ("sweep", "robustness sweep over true parameter values"),
                           ("report", "collate run artifacts")]:
        p = sub.add_parser(name, help=helptext)
        _common(p)
        if name == "gof":
            p.add_argument("--runs", help="runs.json from fit-wgan (default: score the config model)")
        if name == "hotspots":
            p.add_argument("--estimate", help="JSON with an estimate (best.json, em.json or a parameter dict)")
        if name == "report":
            p.add_argument("--runs-dir", required=True, help="directory tree holding run artifacts")
    return ap


# ----------------------------------------------------------------- helpers

class _Run:
    def __init__(self, args, command):
        self.args = args
        self.cfg = load_config(args.config)
        run = self.cfg["run"]
        for key in ("seed", "streams", "jobs"):
            v = getattr(args, key, None)
            if v is not None:
                run[key] = v
        self.seed = int(run["seed"])
        self.out = ensure_dir(args.out)
        self.base_dir = Path(args.config).parent if args.config else Path.cwd()
        self.manifest = RunManifest(command, self.cfg.snapshot(), self.seed)
        self.t0 = time.perf_counter()

    @property
    def jobs(self):
        return int(self.cfg["run"]["jobs"])

    @property
    def n_streams(self):
        return int(self.cfg["run"]["streams"])

    def path(self, name):
        self.manifest.outputs.append(name)
        return self.out / name

    def note_input(self, p):
        self.manifest.inputs.append(dict(path=str(p), sha256=file_hash(p)))

    def finish(self):
        self.manifest.wall_time = time.perf_counter() - self.t0
        self.manifest.write(self.out)

    def region_map(self):
        return self.cfg.region_map(self.base_dir)

    def thin_kw(self):
        th = self.cfg["thinning"]
        return dict(victimization=th["victimization"], horizon_ratio=th["horizon_ratio"])

    def data(self, thinned=True):
        """Streams from --input, or simulated (and thinned) from the config."""
        if self.args.input:
            streams, _ = read_streams(self.args.input)
            self.note_input(self.args.input)
            return streams
        theta = self.cfg.model_params()
        raw = simulate_batch(theta, self.cfg.background(), seeds_for(self.seed, self.n_streams, 0),
                             self.cfg.gen_config(), jobs=self.jobs)
        rm = self.region_map()
        if not thinned or rm is None:
            return raw
        return [report(s, rm, **self.thin_kw()) for s in raw]


def _params_from_json(path) -> ModelParams:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"estimate file not found: {p}")
    d = json.loads(p.read_text())
    for key in ("theta_hat", "params", "best"):
        if isinstance(d, dict) and key in d:
            d = d[key]
            if isinstance(d, dict) and "theta_hat" in d:
                d = d["theta_hat"]
    try:
        return ModelParams(**d)
    except (TypeError, ModelError) as e:
        raise ConfigError(f"{p}: not a parameter set: {e}") from None


def _run_dict(run) -> dict:
    # wall time goes to the manifest only, so artifacts stay byte-identical
    d = run.to_dict()
    d.pop("wall_time")
    return d


# ------------------------------------------------------------- subcommands

def cmd_simulate(r: _Run):
    theta = r.cfg.model_params()
    bg = r.cfg.background()
    streams = simulate_batch(theta, bg, seeds_for(r.seed, r.n_streams, 0), r.cfg.gen_config(), jobs=r.jobs)
    write_streams(r.path("streams.csv"), streams, dict(params=theta.to_dict(), seed=r.seed, thinned=False))
    r.path("streams.csv.json")
    from .plotting import qq_plot
    theo, res = gofm.qq_residuals(streams, theta, bg)
    qq_plot(r.out / "qq", theo, res, "compensator residuals")
    r.path("qq.csv")
    r.path("qq.png")
    print(f"simulated {len(streams)} streams, {sum(map(len, streams))} events")


def cmd_thin(r: _Run):
    if not r.args.input:
        raise ConfigError("thin needs --input")
    rm = r.region_map()
    if rm is None:
        raise ConfigError("thin needs a region map ([thinning] region_map, uniform_rate or demo_seed)")
    streams, meta = read_streams(r.args.input)
    r.note_input(r.args.input)
    from .generator import BaseNoise
    seeds = seeds_for(r.seed, len(streams), 1)
    out = [report(s, rm, BaseNoise(sd), **r.thin_kw()) for s, sd in zip(streams, seeds)]
    meta = dict(meta, thinned=True, thin_seed=r.seed, region_map=rm.to_dict(), region_map_sha256=region_map_hash(rm))
    for k in ("horizons", "truncation", "seeds", "format_version"):
        meta.pop(k, None)
    write_streams(r.path("reported.csv"), out, meta)
    r.path("reported.csv.json")
    n0, n1 = sum(map(len, streams)), sum(map(len, out))
    print(f"kept {n1} of {n0} events ({n1 / max(n0, 1):.3f})")


def cmd_fit_em(r: _Run):
    from .em import fit_em
    data = r.data()
    truth = r.cfg.model_params()
    em = r.cfg["em"]
    res = fit_em(data, truth, r.cfg.background(), max_iters=em["max_iters"], tol=em["tol"])
    est = res.params
    ratios = {k: getattr(truth, k) / getattr(est, k) for k in ("mu", "alpha", "beta", "sigma_sq")}
    ratios["theta_br"] = truth.theta_br / est.theta_br
    write_json(r.path("em.json"), dict(params=est.to_dict(), init=truth.to_dict(), loglik=res.loglik,
                                       converged=res.converged, n_iter=res.n_iter,
                                       underestimation_factor=ratios))
    write_table(r.path("em_trace.csv"), ["iter", "mu", "alpha", "beta", "sigma_sq", "loglik"],
                [[i, float(p["mu"]), float(p["alpha"]), float(p["beta"]), float(p["sigma_sq"]), float(ll)]
                 for i, (p, ll) in enumerate(zip(res.trace, res.loglik))])
    print(f"EM: mu={est.mu:.4g} alpha={est.alpha:.4g} beta={est.beta:.4g} sigma^2={est.sigma_sq:.4g} "
          f"(mu underestimated by x{ratios['mu']:.3g})")


def cmd_fit_wgan(r: _Run):
    from .plotting import loss_curves
    from .wgan import default_init_grid, multi_start
    data = r.data()
    tcfg = r.cfg.train_config()
    grid = default_init_grid(r.cfg.model_params(), r.cfg.init_factors(), tcfg.free)
    runs = multi_start(data, grid, r.cfg.background(), r.region_map(), r.cfg.gen_config(), tcfg, seed=r.seed)
    write_json(r.path("runs.json"), dict(runs=[_run_dict(x) for x in runs]))
    loss_curves(r.out / "loss", [x.loss_history for x in runs])
    r.path("loss.csv")
    r.path("loss.png")
    r.manifest.config["run_wall_times"] = [x.wall_time for x in runs]
    failed = sum(x.status in ("diverged", "failed") for x in runs)
    print(f"{len(runs)} runs, {failed} failed")
    if failed == len(runs):
        raise FloatingPointError("every WGAN run failed")


def cmd_gof(r: _Run):
    from .plotting import gof_histogram
    from .wgan import TrainRun
    data = r.data()
    g = r.cfg["gof"]
    rm, bg, gc = r.region_map(), r.cfg.background(), r.cfg.gen_config()
    if r.args.runs:
        p = Path(r.args.runs)
        if not p.exists():
            raise ConfigError(f"runs file not found: {p}")
        runs = [TrainRun.from_dict(d) for d in json.loads(p.read_text())["runs"]]
        r.note_input(p)
    else:
        runs = [TrainRun(r.cfg.model_params(), r.cfg.model_params(), status="config")]
    best, scores = gofm.select_best(runs, data, rm, g["k_synthetic"], gc, g["n_bins"], r.seed, bg,
                                    jobs=r.jobs, **r.thin_kw())
    idx = runs.index(best)
    write_table(r.path("gof.csv"), ["run", "status", "mu", "alpha", "beta", "sigma_sq", "score"],
                [[k, x.status, float(x.theta_hat.mu), float(x.theta_hat.alpha), float(x.theta_hat.beta),
                  float(x.theta_hat.sigma_sq), float(s)] for k, (x, s) in enumerate(zip(runs, scores))])
    write_json(r.path("best.json"), dict(index=idx, score=scores[idx], theta_hat=best.theta_hat.to_dict()))
    syn = gofm.synthetic_streams(best.theta_hat, bg, rm, g["k_synthetic"], gc, r.seed, jobs=r.jobs, **r.thin_kw())
    edges, f_tr, f_sy = gofm.histograms(gofm.pool(data), gofm.pool(syn), g["n_bins"])
    gof_histogram(r.out / "gof_hist", edges, f_tr, f_sy, "inter-arrival times")
    r.path("gof_hist.csv")
    r.path("gof_hist.png")
    print(f"best run {idx}: score {scores[idx]:.4g}")


def _grid(cfg):
    h = cfg["hotspots"]
    return EvalGrid(h["rows"], h["cols"], h["horizon"], h["n_mc"])


def cmd_hotspots(r: _Run):
    from .plotting import heatmap
    truth_theta = r.cfg.model_params()
    est_theta = _params_from_json(r.args.estimate) if r.args.estimate else truth_theta
    if r.args.estimate:
        r.note_input(r.args.estimate)
    bg, rm, grid = r.cfg.background(), r.region_map(), _grid(r.cfg)
    h = r.cfg["hotspots"]
    s_truth, s_est = seeds_for(r.seed, 2, 2)
    truth = expected_counts(truth_theta, bg, rm, grid, s_truth, h["k"], r.jobs)
    est = expected_counts(est_theta, bg, rm, grid, s_est, h["k"], r.jobs)
    mae, excl = relative_mae(truth, est, h["floor"], return_excluded=True)
    acc = hotspot_accuracy(truth.hotspots, est.hotspots)
    vmax = float(max(truth.mean_counts.max(), est.mean_counts.max()))
    heatmap(r.out / "truth_grid", truth.mean_counts, bg.domain_bounds, "true", truth.hotspots, vmax)
    heatmap(r.out / "estimate_grid", est.mean_counts, bg.domain_bounds, "estimated", est.hotspots, vmax)
    for n in ("truth_grid.csv", "truth_grid.png", "estimate_grid.csv", "estimate_grid.png"):
        r.path(n)
    write_json(r.path("hotspots.json"), dict(
        truth=truth.to_dict(), estimate=est.to_dict(), accuracy=acc, relative_mae=mae, excluded_cells=excl,
        theta_truth=truth_theta.to_dict(), theta_estimate=est_theta.to_dict()))
    print(f"top-{h['k']} accuracy {acc:.2f}, relative MAE {mae:.4f} ({excl} cells excluded)")


def cmd_sweep(r: _Run):
    from .plotting import accuracy_histogram
    sw = r.cfg["sweep"]
    grid = sweep_grid(_floats(sw["mus"]), _floats(sw["alphas"]), _floats(sw["betas"]), _floats(sw["sigma_sqs"]))
    if sw["estimator"] not in ("oracle", "em"):
        raise ConfigError(f"[sweep] estimator must be 'oracle' or 'em', got {sw['estimator']!r}")
    scfg = SweepConfig(sw["estimator"], sw["n_streams"], sw["train_horizon"], _grid(r.cfg), r.cfg["hotspots"]["k"])
    rows = robustness_sweep(grid, scfg, r.cfg.background(), r.region_map(), r.seed, r.jobs)
    names = ("mu", "alpha", "beta", "sigma_sq")
    write_table(r.path("sweep.csv"), [f"{k}0" for k in names] + [f"{k}_hat" for k in names] +
                ["accuracy", "mae", "excluded"],
                [[float(row["theta0"][k]) for k in names] + [float(row["theta_hat"][k]) for k in names] +
                 [float(row["accuracy"]), float(row["mae"]), row["excluded"]] for row in rows])
    accuracy_histogram(r.out / "sweep_accuracy", [row["accuracy"] for row in rows])
    r.path("sweep_accuracy.csv")
    r.path("sweep_accuracy.png")
    acc = np.array([row["accuracy"] for row in rows])
    print(f"{len(rows)} combinations: accuracy min {acc.min():.2f} mean {acc.mean():.3f} max {acc.max():.2f}")


def cmd_report(r: _Run):
    root = Path(r.args.runs_dir)
    if not root.is_dir():
        raise ConfigError(f"run directory not found: {root}")
    found = sorted(p.parent for p in root.rglob(MANIFEST) if p.parent.resolve() != r.out.resolve())
    if not found:
        raise ConfigError(f"no run artifacts (manifest.json) under {root}")
    summary = []
    for d in found:
        m = RunManifest.read(d)
        entry = dict(dir=str(d.relative_to(root)), command=m.command, seed=m.seed, outputs=m.outputs)
        for name, keys in (("em.json", ("params", "underestimation_factor")),
                           ("best.json", ("index", "score", "theta_hat")),
                           ("hotspots.json", ("accuracy", "relative_mae", "excluded_cells"))):
            if (d / name).exists():
                j = json.loads((d / name).read_text())
                entry[name.split(".")[0]] = {k: j[k] for k in keys}
        if (d / "sweep.csv").exists():
            acc = np.loadtxt(d / "sweep.csv", delimiter=",", skiprows=1, ndmin=2)[:, 8]
            entry["sweep"] = dict(n=int(len(acc)), accuracy_mean=float(acc.mean()),
                                  accuracy_min=float(acc.min()), accuracy_max=float(acc.max()))
        summary.append(entry)
    write_json(r.path("report.json"), dict(runs=summary))
    lines = ["# Run report", ""]
    for e in summary:
        lines.append(f"## {e['dir']} ({e['command']}, seed {e['seed']})")
        for k in ("em", "best", "hotspots", "sweep"):
            if k in e:
                lines.append(f"- {k}: {json.dumps(e[k], sort_keys=True)}")
        lines.append(f"- outputs: {', '.join(e['outputs'])}")
        lines.append("")
    (r.path("report.md")).write_text("\n".join(lines), encoding="utf-8")
    print(f"collated {len(summary)} runs")


COMMANDS = {"simulate": cmd_simulate, "thin": cmd_thin, "fit-em": cmd_fit_em, "fit-wgan": cmd_fit_wgan,
            "gof": cmd_gof, "hotspots": cmd_hotspots, "sweep": cmd_sweep, "report": cmd_report}

_NUMERIC = (FloatingPointError, ArithmeticError, SimulationError, np.linalg.LinAlgError, gofm.GofError)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .wgan import TrainingDiverged
    try:
        r = _Run(args, args.command)
        COMMANDS[args.command](r)
        r.finish()
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (*_NUMERIC, TrainingDiverged) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ModelError, ValueError) as e:
        # invalid parameter values coming from the config
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
