import math

import numpy as np
import pytest

from sthawkes.em import e_step, fit_em, m_step, observed_loglik
from sthawkes.generator import GenConfig, seeds_for, simulate_batch, simulate_stream
from sthawkes.model import EventStream, ModelParams, background_intensity, triggering_kernel


def test_single_event_is_background(theta0, bg):
    s = EventStream([0.5], [6.0], [20.0], horizon=1.0)
    r = e_step(s, theta0, bg)
    assert r.background.tolist() == [1.0] and len(r.prob) == 0


def test_two_event_hand_oracle(theta0, bg):
    s = EventStream([0.5, 0.8], [6.0, 6.05], [20.0, 19.97], horizon=1.0)
    r = e_step(s, theta0, bg)
    g = triggering_kernel(0.3, 0.05, -0.03, theta0)
    mu2 = background_intensity([6.05, 19.97], theta0.mu, bg)
    assert r.row(1)[0] == pytest.approx(g / (mu2 + g), rel=1e-13)
    assert r.row(1)[-1] == pytest.approx(mu2 / (mu2 + g), rel=1e-13)
    np.testing.assert_allclose(r.row_sums(), 1.0, atol=1e-12)


def test_zero_alpha_all_background(bg):
    p = ModelParams(100, 0.0, 0.2, 0.01)
    s = simulate_stream(ModelParams(100, 3, 0.2, 0.01), bg, 1, GenConfig.horizon_limited(0.2))
    r = e_step(s, p, bg)
    assert np.all(r.background == 1.0) and np.all(r.prob == 0.0)


def test_rows_sum_to_one(theta0, bg):
    streams = simulate_batch(theta0, bg, seeds_for(3, 3), GenConfig.horizon_limited(0.5))
    r = e_step(streams, theta0, bg)
    np.testing.assert_allclose(r.row_sums(), 1.0, atol=1e-12)
    assert np.all(r.prob >= 0) and np.all(r.background >= 0)


def test_m_step_all_background(theta0, bg):
    s = simulate_stream(theta0, bg, 2, GenConfig.horizon_limited(0.3))
    r = e_step(s, ModelParams(100, 0.0, 0.2, 0.01), bg)
    new = m_step(s, r, theta0, bg)
    assert new.alpha <= 1e-12
    assert new.mu == pytest.approx(len(s) / (0.3 * bg.mass_in_domain()), rel=1e-12)


def test_beta_update_matches_grid_search(theta0, bg):
    # 4 roots with 4 offspring each, built by hand
    rng = np.random.default_rng(17)
    ev = []
    for k in range(4):
        t0, x0, y0 = rng.uniform(0, 5), 6.0 - 4 * k, 10.0 * k
        ev.append((t0, x0, y0))
        for _ in range(4):
            ev.append((t0 + rng.exponential(5.0), x0 + 0.1 * rng.normal(), y0 + 0.1 * rng.normal()))
    ev.sort()
    s = EventStream.from_events(ev, horizon=40.0)
    r = e_step(s, theta0, bg)
    new = m_step(s, r, theta0, bg)
    # brute force: profile alpha out of the expected complete-data log-likelihood
    P = r.prob.sum()
    dt = s.t[r.child] - s.t[r.parent]
    D = float(r.prob @ dt)
    w = s.horizon - s.t
    B = 2 * math.pi * new.sigma_sq

    def q(beta):
        K = np.sum(1 - np.exp(-beta * w)) / beta
        a = P / (B * K)
        return P * math.log(a) - beta * D - a * B * K

    grid = np.exp(np.linspace(math.log(new.beta) - 3, math.log(new.beta) + 3, 60001))
    best = grid[np.argmax([q(b) for b in grid])]
    assert f"{best:.3g}" == f"{new.beta:.3g}"


def test_one_iteration_increases_loglik(theta0, bg):
    streams = simulate_batch(theta0, bg, seeds_for(5, 5), GenConfig.horizon_limited(0.5))
    init = ModelParams(60, 1.0, 0.5, 0.03)
    res = fit_em(streams, init, bg, max_iters=1)
    assert res.loglik[1] > res.loglik[0]
    assert res.loglik[0] == pytest.approx(observed_loglik(streams, init, bg))


def test_truth_is_near_fixed_point(theta0, bg):
    streams = simulate_batch(theta0, bg, seeds_for(7, 100), GenConfig.horizon_limited(2.0))
    res = fit_em(streams, theta0, bg, max_iters=1)
    for k in ("mu", "alpha", "beta", "sigma_sq"):
        assert abs(getattr(res.params, k) / getattr(theta0, k) - 1) < 0.05, k


def test_true_parent_gets_more_mass(theta0, bg):
    s = simulate_stream(theta0, bg, 31, GenConfig.count_limited(1000))
    s.horizon = float(s.t[-1]) + 1e-6
    r = e_step(s, theta0, bg)
    kids = np.flatnonzero(s.parent >= 0)
    true = np.mean([r.row(i).get(int(s.parent[i]), 0.0) for i in kids])
    prev = np.mean([r.row(i).get(i - 1, 0.0) for i in kids if s.parent[i] != i - 1])
    bgp = np.mean([r.row(i)[-1] for i in kids])
    assert true > prev and true > bgp


def test_anisotropic_fit_runs(bg):
    p = ModelParams.from_branching(100, 15, 0.2, sigma_x=0.1, sigma_y=0.2)
    streams = simulate_batch(ModelParams(100, 3, 0.2, 0.01), bg, seeds_for(1, 5), GenConfig.horizon_limited(0.5))
    res = fit_em(streams, p, bg, max_iters=5)
    assert res.params.anisotropic
    assert np.all(np.diff(res.loglik) >= -1e-8 * np.abs(res.loglik[1:]))
