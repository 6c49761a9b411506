import math

import numpy as np
import pytest

from sthawkes.generator import BaseNoise, GenConfig, seeds_for, simulate_batch, simulate_stream
from sthawkes.model import EventStream
from sthawkes.thinning import (Region, RegionMap, RegionMapError, band_partition, demo_region_map,
                               lookup_rate, report, thin_stream, victimization_subsample)


def two_regions(qa=0.3, qb=0.7):
    return RegionMap([Region("a", [(0, 0, 1, 1)], qa), Region("b", [(1, 0, 2, 1)], qb)], default_rate=1.0)


def test_lookup_rate():
    m = two_regions()
    assert lookup_rate((0.5, 0.5), m) == 0.3
    assert lookup_rate((5.0, 5.0), m) == 1.0
    # shared edge x = 1 goes to the earlier region
    assert lookup_rate((1.0, 0.5), m) == 0.3
    m2 = RegionMap([Region("b", [(1, 0, 2, 1)], 0.7), Region("a", [(0, 0, 1, 1)], 0.3)])
    assert lookup_rate((1.0, 0.5), m2) == 0.7
    np.testing.assert_array_equal(lookup_rate(np.array([[0.5, 0.5], [1.5, 0.5]]), m), [0.3, 0.7])


def test_region_validation():
    with pytest.raises(RegionMapError):
        Region("a", [(0, 0, 1, 1)], 1.5)
    with pytest.raises(RegionMapError):
        RegionMap([Region("a", [(0, 0, 2, 2)]), Region("b", [(1, 1, 3, 3)])])
    with pytest.raises(RegionMapError):
        RegionMap.from_dict(dict(regions=[], colour="red"))
    m = two_regions()
    assert RegionMap.from_dict(m.to_dict()) == m


def stream(n=2000, seed=0):
    rng = np.random.default_rng(seed)
    return EventStream(np.sort(rng.uniform(0, 10, n)), rng.uniform(0, 2, n), rng.uniform(0, 1, n),
                       meta=dict(seed=seed))


def test_thin_identity_and_empty():
    s = stream()
    assert thin_stream(s, RegionMap.uniform(1.0)).same_events(s)
    assert len(thin_stream(s, RegionMap.uniform(0.0))) == 0


def test_thin_binomial():
    kept = sum(len(thin_stream(stream(1000, k), RegionMap.uniform(0.5))) for k in range(10))
    assert abs(kept - 5000) <= 3 * math.sqrt(10000 * 0.25)


def test_thin_subsequence_and_flags():
    s = stream()
    out = thin_stream(s, two_regions(), keep_removed=True)
    assert len(out) == len(s) and out.retained.any() and not out.retained.all()
    rep = out.reported()
    assert np.all(np.isin(rep.t, s.t)) and np.all(np.diff(rep.t) > 0)
    assert rep.same_events(thin_stream(s, two_regions()))


def test_thin_commutes_with_restriction():
    s = stream()
    m = two_regions()
    a = thin_stream(s, m).restrict(5.0)
    b = thin_stream(s.restrict(5.0), m, noise=BaseNoise(s.meta["seed"]))
    assert a.same_events(b)


def test_thin_independent_of_theta(theta0, bg):
    # same index-keyed draws: the keep mask only depends on locations and the seed
    m = demo_region_map(bg.domain_bounds)
    s1 = simulate_stream(theta0, bg, 4, GenConfig.count_limited(100))
    s2 = simulate_stream(theta0.scaled(mu=1.01), bg, 4, GenConfig.count_limited(100))
    k1 = thin_stream(s1, m, keep_removed=True).retained
    k2 = thin_stream(s2, m, keep_removed=True).retained
    u = BaseNoise(4).draw("thinning", 0, 100)
    np.testing.assert_array_equal(k1, u < m.reporting_rates(s1.x, s1.y))
    np.testing.assert_array_equal(k2, u < m.reporting_rates(s2.x, s2.y))


def test_victimization_identity_when_p_ge_1():
    m = RegionMap([Region("a", [(0, 0, 2, 1)], 0.5, p=1.0)])
    s = stream()
    assert victimization_subsample(s, m).same_events(s)
    big = RegionMap([Region("a", [(0, 0, 2, 1)], 0.5, population=1e9, victimization_rate=1.0)])
    assert victimization_subsample(s, big).same_events(s)


def test_victimization_halves_one_region():
    m = RegionMap([Region("a", [(0, 0, 1, 1)], 1.0, p=0.5), Region("b", [(1, 0, 2, 1)], 1.0, p=1.0)])
    na = nb = ka = kb = 0
    for k in range(10):
        s = stream(1000, k)
        out = victimization_subsample(s, m)
        ina, inb = s.x <= 1, s.x > 1
        na += ina.sum(); nb += inb.sum()
        ka += (out.x <= 1).sum(); kb += (out.x > 1).sum()
    assert kb == nb
    assert abs(ka - na / 2) <= 3 * math.sqrt(na * 0.25)


def test_victimization_missing_metadata():
    with pytest.raises(RegionMapError):
        victimization_subsample(stream(), two_regions())
    empty = EventStream.empty()
    assert len(victimization_subsample(empty, RegionMap([Region("a", [(0, 0, 1, 1)], p=0.5)]), noise=1)) == 0


def test_report_stages_idempotent_at_rate_one():
    s = stream()
    m = RegionMap([Region("a", [(0, 0, 2, 1)], 1.0, p=1.0)])
    assert report(s, m, victimization=True).same_events(s)


def test_band_and_demo_maps(bg):
    b = band_partition(bg.domain_bounds, 19, rates=np.linspace(0.1, 0.9, 19))
    assert len(b.regions) == 19
    d = demo_region_map(bg.domain_bounds)
    assert len(d.regions) == 19
    x = np.random.default_rng(0).uniform(-10.5, 10.5, 5000)
    y = np.random.default_rng(1).uniform(-36, 36, 5000)
    assert np.all(d.region_index(x, y) >= 0)
    q = np.array([r.q for r in d.regions])
    assert q.min() >= 0.02 and q.max() <= 0.15
    with pytest.raises(RegionMapError):
        band_partition(bg.domain_bounds, 19, rates=[0.5])
