import json

import numpy as np
import pytest

from sthawkes import cli
from sthawkes.generator import GenConfig, seeds_for, simulate_batch
from sthawkes.gof import qq_residuals
from sthawkes.io import (ConfigError, RunManifest, StreamFormatError, default_config, load_config, read_region_map,
                         read_streams, write_region_map, write_streams)
from sthawkes.model import EventStream
from sthawkes.plotting import heatmap, read_matrix
from sthawkes.thinning import RegionMap, demo_region_map, thin_stream


def _same(a: EventStream, b: EventStream):
    return (np.array_equal(a.t, b.t) and np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
            and a.horizon == b.horizon and a.truncation == b.truncation)


def test_stream_roundtrip_exact(tmp_path, theta0, bg):
    streams = simulate_batch(theta0, bg, seeds_for(1, 5), GenConfig.count_limited(40))
    thinned = [thin_stream(s, RegionMap.uniform(0.5), keep_removed=True) for s in streams]
    streams.append(EventStream.empty(horizon=1.0))
    for ss in (streams, thinned):
        p = tmp_path / "s.csv"
        write_streams(p, ss, dict(note="x"))
        back, meta = read_streams(p)
        assert meta["K"] == len(ss) and meta["note"] == "x"
        assert all(_same(a, b) for a, b in zip(ss, back))
        if ss is thinned:
            assert all(np.array_equal(a.retained, b.retained) for a, b in zip(ss, back))
        assert [b.meta.get("seed") for b in back] == [a.meta.get("seed") for a in ss]


def test_unsorted_rows_name_line(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("stream_id,t,x,y\n0,1.0,0,0\n0,0.5,0,0\n")
    with pytest.raises(StreamFormatError, match=":3:"):
        read_streams(p)
    p.write_text("stream_id,t,x\n")
    with pytest.raises(StreamFormatError):
        read_streams(p)
    p.write_text("stream_id,t,x,y\n0,1.0,0\n")
    with pytest.raises(StreamFormatError, match=":2:"):
        read_streams(p)


def test_many_streams_roundtrip(tmp_path, rng):
    K = 10_000
    streams = []
    for k in range(K):
        n = int(rng.integers(0, 4))
        streams.append(EventStream(np.sort(rng.random(n)), rng.normal(size=n), rng.normal(size=n), horizon=1.0))
    p = tmp_path / "big.csv"
    write_streams(p, streams)
    back, meta = read_streams(p)
    assert meta["K"] == K and len(back) == K
    assert all(_same(a, b) for a, b in zip(streams, back))


def test_config_unknown_key_and_version(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[model]\nmu = 90\nmuu = 3\n")
    with pytest.raises(ConfigError, match="muu"):
        load_config(p)
    p.write_text("[modle]\nmu = 90\n")
    with pytest.raises(ConfigError, match="modle"):
        load_config(p)
    p.write_text("[run]\nversion = 2\n")
    with pytest.raises(ConfigError, match="version"):
        load_config(p)
    p.write_text("[model]\nmu = 90\n")
    assert load_config(p).model_params().mu == 90.0
    assert default_config().model_params().alpha == 3.0


def test_region_map_io(tmp_path, bg):
    rm = demo_region_map(bg.domain_bounds)
    write_region_map(tmp_path / "rm.json", rm)
    back = read_region_map(tmp_path / "rm.json")
    x, y = np.linspace(-10, 10, 50), np.linspace(-35, 35, 50)
    assert back.to_dict() == rm.to_dict()
    assert np.array_equal(back.reporting_rates(x, y), rm.reporting_rates(x, y))
    with pytest.raises(ConfigError, match="nope.json"):
        read_region_map(tmp_path / "nope.json")


def test_missing_region_map_exits_2(tmp_path, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[run]\nstreams = 2\n[generator]\nmax_events = 5\n[thinning]\nregion_map = missing_map.json\n")
    assert cli.main(["fit-em", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "missing_map.json" in capsys.readouterr().err


def test_bad_flag_and_subcommand_exit_2(tmp_path):
    assert cli.main(["simulate", "--out", str(tmp_path), "--bogus"]) == 2
    assert cli.main(["frobnicate"]) == 2
    assert cli.main([]) == 2


def test_bad_parameter_value_exit_2(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[model]\nbeta = -1\n")
    assert cli.main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_simulate_twice_identical(tmp_path, tiny_config):
    outs = []
    for k in range(2):
        d = tmp_path / f"o{k}"
        assert cli.main(["simulate", "--config", str(tiny_config), "--seed", "7", "--out", str(d)]) == 0
        outs.append(d)
    for name in ("streams.csv", "streams.csv.json", "qq.csv", "qq.png"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    m = RunManifest.read(outs[0])
    assert m.command == "simulate" and m.seed == 7 and "streams.csv" in m.outputs


def test_thin_records_map_hash(tmp_path, tiny_config):
    assert cli.main(["simulate", "--config", str(tiny_config), "--out", str(tmp_path / "s")]) == 0
    assert cli.main(["thin", "--config", str(tiny_config), "--input", str(tmp_path / "s" / "streams.csv"),
                     "--out", str(tmp_path / "t")]) == 0
    back, meta = read_streams(tmp_path / "t" / "reported.csv")
    assert meta["thinned"] and len(meta["region_map_sha256"]) == 64
    raw, _ = read_streams(tmp_path / "s" / "streams.csv")
    assert sum(map(len, back)) < sum(map(len, raw))
    m = RunManifest.read(tmp_path / "t")
    assert m.inputs[0]["sha256"]


def test_empty_run_dir_exits_2(tmp_path):
    (tmp_path / "empty").mkdir()
    assert cli.main(["report", "--runs-dir", str(tmp_path / "empty"), "--out", str(tmp_path / "r")]) == 2
    assert cli.main(["report", "--runs-dir", str(tmp_path / "nothere"), "--out", str(tmp_path / "r")]) == 2


def test_report_collates(tmp_path, tiny_config):
    runs = tmp_path / "runs"
    assert cli.main(["hotspots", "--config", str(tiny_config), "--out", str(runs / "h")]) == 0
    assert cli.main(["report", "--runs-dir", str(runs), "--out", str(tmp_path / "rep")]) == 0
    rep = json.loads((tmp_path / "rep" / "report.json").read_text())
    h = json.loads((runs / "h" / "hotspots.json").read_text())
    assert rep["runs"][0]["command"] == "hotspots" and rep["runs"][0]["hotspots"]["accuracy"] == h["accuracy"]


def test_heatmap_twin_exact(tmp_path, rng):
    m = rng.random((7, 16)) * 3
    heatmap(tmp_path / "h", m, (-10.5, 10.5, -36, 36), hotspots=[(0, 0)])
    assert np.array_equal(read_matrix(tmp_path / "h.csv"), m)
    assert (tmp_path / "h.png").stat().st_size > 0


def test_qq_near_diagonal(tmp_path, theta0, bg_all):
    streams = simulate_batch(theta0, bg_all, seeds_for(3, 100), GenConfig.count_limited(50))
    theo, obs = qq_residuals(streams, theta0, bg_all)
    # KS distance between residuals and Exp(1); bound from the acceptance threshold at p = 0.01
    n = len(obs)
    ecdf = np.arange(1, n + 1) / n
    d = np.max(np.abs(ecdf - (1 - np.exp(-obs))))
    assert d < 1.63 / np.sqrt(n)


@pytest.mark.slow
def test_fit_em_demo_bias(tmp_path):
    from pathlib import Path
    demo = Path(__file__).resolve().parents[1] / "configs" / "demo.ini"
    assert cli.main(["fit-em", "--config", str(demo), "--out", str(tmp_path)]) == 0
    em = json.loads((tmp_path / "em.json").read_text())
    assert em["underestimation_factor"]["mu"] > 5
