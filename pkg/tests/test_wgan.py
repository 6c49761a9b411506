import numpy as np
import pytest
import torch
from scipy import stats

from sthawkes.critic import PaddedBatch, gradient_penalty
from sthawkes.generator import GenConfig, seeds_for, simulate_batch
from sthawkes.model import ModelParams
from sthawkes.thinning import RegionMap, thin_stream
from sthawkes.wgan import (TrainConfig, TrainRun, WGANTrainer, converged, default_init_grid, generate_fakes,
                           multi_start, train)

GC = GenConfig.count_limited(20)
RM = RegionMap.uniform(0.5)


@pytest.fixture(scope="module")
def data():
    p = ModelParams(100, 3, 0.2, 0.01)
    from sthawkes.model import BackgroundConfig
    return [thin_stream(s, RM) for s in simulate_batch(p, BackgroundConfig(), seeds_for(42, 16), GC)]


def small_cfg(**kw):
    base = dict(batch_size=4, hidden=4, n_critic=2, max_epochs=3, window=2, lr=1e-3, lr_generator=0.01)
    base.update(kw)
    return TrainConfig(**base)


def trainer(data, theta, bg, **kw):
    return WGANTrainer(data, theta, bg, RM, GC, small_cfg(**kw), seed=3)


def test_config_defaults():
    c = TrainConfig()
    assert (c.lambda_gp, c.n_critic, c.lr, c.beta1, c.beta2, c.batch_size) == (10.0, 5, 1e-4, 0.0, 0.9, 256)
    with pytest.raises(ValueError):
        TrainConfig(free=("gamma",))
    with pytest.raises(ValueError):
        TrainConfig(n_critic=0)


def test_penalty_dominates_at_large_lambda(data, theta0, bg):
    tr = trainer(data, theta0, bg, lambda_gp=1e6)
    real = tr.real_batch()
    fb = tr.fakes(0)
    fake = PaddedBatch(fb.values(tr.log_theta).detach(), fb.mask)
    eps = torch.full((len(real),), 0.5, dtype=torch.float64)
    params = list(tr.critic.parameters())

    def grad(loss):
        g = torch.autograd.grad(loss, params, allow_unused=True)
        return torch.cat([(x if x is not None else torch.zeros_like(p)).flatten() for x, p in zip(g, params)])

    full = grad(tr.critic_loss(real, fake, eps)[0])
    pure = grad(gradient_penalty(real, fake, eps, tr.critic.score_features, tr.critic.standardize))
    cos = torch.dot(full, pure) / (full.norm() * pure.norm())
    assert cos.item() > 0.99


def test_identical_batches_zero_wasserstein(data, theta0, bg):
    tr = trainer(data, theta0, bg)
    real = tr.real_batch()
    _, w_term, _ = tr.critic_loss(real, real, torch.ones(len(real), dtype=torch.float64))
    assert w_term.item() == 0.0


def test_critic_step_reproducible_and_phase_separated(data, theta0, bg):
    a, b = trainer(data, theta0, bg), trainer(data, theta0, bg)
    ra, rb = a.epoch_step(), b.epoch_step()
    assert ra == rb
    t = trainer(data, theta0, bg)
    before = t.log_theta.detach().clone()
    fb = t.fakes(0)
    t.critic_step(t.real_batch(), PaddedBatch(fb.values(t.log_theta).detach(), fb.mask))
    assert torch.equal(before, t.log_theta.detach())
    w = [p.detach().clone() for p in t.critic.parameters()]
    t.generator_step()
    assert all(torch.equal(x, y) for x, y in zip(w, t.critic.parameters()))


def test_zero_critic_leaves_theta(data, theta0, bg):
    tr = trainer(data, theta0, bg)
    with torch.no_grad():
        for p in tr.critic.parameters():
            p.zero_()
    before = tr.log_theta.detach().clone()
    tr.generator_step()
    assert torch.equal(before, tr.log_theta.detach())


def test_generator_gradient_finite_differences(data, theta0, bg):
    tr = WGANTrainer(data, theta0, bg, None, GenConfig.count_limited(5), small_cfg(batch_size=1), seed=5)
    fb = tr.fakes(1)
    lt = tr.log_theta.detach().clone().requires_grad_(True)
    loss = -tr.critic(fb.values(lt), fb.mask).mean()
    (g,) = torch.autograd.grad(loss, lt)
    h = 1e-5
    for k in (0, 2, 3):
        e = torch.zeros(4, dtype=torch.float64)
        e[k] = h
        with torch.no_grad():
            fd = ((-tr.critic(fb.values(lt + e), fb.mask).mean()) - (-tr.critic(fb.values(lt - e), fb.mask).mean())) / (2 * h)
        assert g[k].item() == pytest.approx(fd.item(), rel=1e-2, abs=1e-10)
    assert g[1].item() == 0.0


def test_n_critic_steps_per_generator_step(data, theta0, bg, monkeypatch):
    tr = trainer(data, theta0, bg, n_critic=5)
    calls = []
    orig_c, orig_g = tr.critic_step, tr.generator_step
    monkeypatch.setattr(tr, "critic_step", lambda *a: calls.append("c") or orig_c(*a))
    monkeypatch.setattr(tr, "generator_step", lambda: calls.append("g") or orig_g())
    tr.epoch_step()
    assert calls == ["c"] * 5 + ["g"]


def test_max_epochs_zero_returns_init(data, theta0, bg):
    run = train(data, theta0, bg, RM, GC, small_cfg(max_epochs=0))
    assert run.theta_hat == theta0 and run.loss_history == []


def test_train_deterministic(data, theta0, bg):
    a = train(data, theta0.scaled(mu=0.8), bg, RM, GC, small_cfg(free=("mu",)), seed=9)
    b = train(data, theta0.scaled(mu=0.8), bg, RM, GC, small_cfg(free=("mu",)), seed=9)
    assert a.theta_hat == b.theta_hat and a.loss_history == b.loss_history
    assert (a.theta_hat.alpha, a.theta_hat.beta, a.theta_hat.sigma_sq) == (3.0, 0.2, 0.01)  # clamped
    d = a.to_dict()
    assert TrainRun.from_dict(d).theta_hat == a.theta_hat


def test_multi_start(data, theta0, bg):
    cfg = small_cfg(free=("mu",), max_epochs=2)
    one = multi_start(data, [theta0], bg, RM, GC, cfg, seed=2)
    assert one[0].theta_hat == train(data, theta0, bg, RM, GC, cfg, seed=2).theta_hat
    same = multi_start(data, [theta0, theta0], bg, RM, GC, cfg, seed=2)
    assert same[0].theta_hat == same[1].theta_hat
    bad = multi_start(data, [theta0, ModelParams(100, 3, 0.2, 0.01, sigma_x_sq=0.02)], bg, RM, GC, cfg, seed=2)
    assert bad[1].status == "failed" and bad[0].status != "failed"


def test_divergence_detected(data, theta0, bg):
    from sthawkes.wgan import TrainingDiverged
    cfg = small_cfg(free=("mu",), sanity_log_range=1e-9, max_epochs=3)
    with pytest.raises(TrainingDiverged) as e:
        train(data, theta0, bg, RM, GC, cfg)
    assert e.value.run.status == "diverged"


def test_init_grid():
    c = ModelParams(100, 3, 0.2, 0.01)
    g = default_init_grid(c)
    assert len(g) == 81 and c in g
    assert len(default_init_grid(c, free=("mu", "beta"))) == 9


def test_converged_rule():
    flat = [1.0] * 200
    assert converged(flat, 50, 1e-3, 3)
    assert not converged(flat[:150], 50, 1e-3, 3)
    assert not converged(list(np.linspace(1, 2, 200)), 50, 1e-3, 3)


def test_fake_lengths_match_real_at_truth(theta0, bg):
    cfg = GenConfig.horizon_limited(0.05)
    real = simulate_batch(theta0, bg, seeds_for(1, 300), cfg)
    fb = generate_fakes(theta0, bg, None, seeds_for(2, 300), cfg)
    p = stats.ks_2samp([len(s) for s in real], fb.mask.sum(1).numpy()).pvalue
    assert p > 0.01


@pytest.mark.slow
def test_mu_recovery_unthinned(theta0, bg):
    gc = GenConfig.count_limited(100)
    data = simulate_batch(theta0, bg, seeds_for(2024, 500), gc)
    cfg = TrainConfig(batch_size=32, hidden=16, lr=1e-3, lr_generator=0.02, max_epochs=80, window=20, free=("mu",))
    run = train(data, theta0.scaled(mu=0.6), bg, None, gc, cfg, seed=1)
    assert abs(run.theta_hat.mu / theta0.mu - 1) < 0.15
