"""WGAN-GP estimation of Hawkes parameters with an exact generator.

The generator is the branching simulator followed by the known thinning
mechanism; with its discrete structure frozen, the retained coordinates are
smooth in log-theta and gradients flow from the critic score back to theta.
The critic maximises mean f(real) - mean f(fake) under the gradient penalty,
the generator ascends mean f(fake).
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import torch

from .critic import DTYPE, Critic, PaddedBatch, gradient_penalty, pad_streams
from .generator import BaseNoise, GenConfig, seeds_for, simulate_traced
from .model import BackgroundConfig, EventStream, ModelParams
from .thinning import RegionMap

log = logging.getLogger(__name__)

PARAM_NAMES = ("mu", "alpha", "beta", "sigma_sq")


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, run=None):
        super().__init__(msg)
        self.run = run


@dataclass(frozen=True)
class TrainConfig:
    lambda_gp: float = 10.0
    n_critic: int = 5
    lr: float = 1e-4
    lr_generator: Optional[float] = None   # defaults to lr
    beta1: float = 0.0
    beta2: float = 0.9
    batch_size: int = 256
    max_epochs: int = 1000
    window: int = 50
    tol: float = 1e-3
    patience: int = 3
    hidden: int = 64
    free: tuple = PARAM_NAMES
    sanity_log_range: float = 10.0

    def __post_init__(self):
        if self.n_critic < 1 or self.batch_size < 1 or self.window < 1 or self.patience < 1:
            raise ValueError("n_critic, batch_size, window and patience must be >= 1")
        if self.max_epochs < 0 or self.lr <= 0 or self.lambda_gp < 0:
            raise ValueError("invalid training hyperparameters")
        bad = set(self.free) - set(PARAM_NAMES)
        if bad:
            raise ValueError(f"unknown free parameters {sorted(bad)}")
        object.__setattr__(self, "free", tuple(self.free))

    @property
    def generator_lr(self) -> float:
        return self.lr if self.lr_generator is None else self.lr_generator


@dataclass
class TrainRun:
    theta_init: ModelParams
    theta_hat: ModelParams
    loss_history: list = field(default_factory=list)
    wall_time: float = 0.0
    seed: int = 0
    status: str = "max_epochs"
    message: str = ""

    def to_dict(self) -> dict:
        return dict(theta_init=self.theta_init.to_dict(), theta_hat=self.theta_hat.to_dict(),
                    loss_history=self.loss_history, wall_time=self.wall_time, seed=self.seed,
                    status=self.status, message=self.message)

    @classmethod
    def from_dict(cls, d) -> "TrainRun":
        return cls(ModelParams(**d["theta_init"]), ModelParams(**d["theta_hat"]),
                   d.get("loss_history", []), d.get("wall_time", 0.0), d.get("seed", 0),
                   d.get("status", ""), d.get("message", ""))


@dataclass
class FakeBatch:
    """Frozen structure of L generated, thinned streams as padded tensors."""

    s_root: torch.Tensor
    delay_sum: torch.Tensor
    x_root: torch.Tensor
    y_root: torch.Tensor
    nx: torch.Tensor
    ny: torch.Tensor
    mask: torch.Tensor
    rate_mult: int

    def values(self, log_theta: torch.Tensor) -> torch.Tensor:
        """(L, N, 3) coordinates as a differentiable function of log theta."""
        mu = torch.exp(log_theta[0])
        beta = torch.exp(log_theta[2])
        sigma = torch.exp(0.5 * log_theta[3])
        t = self.s_root / (self.rate_mult * mu) + self.delay_sum / beta
        x = self.x_root + sigma * self.nx
        y = self.y_root + sigma * self.ny
        m = self.mask.to(DTYPE)
        return torch.stack([t * m, x * m, y * m], dim=-1)


def generate_fakes(params: ModelParams, bg: BackgroundConfig, region_map: Optional[RegionMap],
                   seeds: Sequence[int], gen_cfg: GenConfig) -> FakeBatch:
    """Simulate and thin one stream per seed, keeping the frozen structure."""
    traces = []
    for s in seeds:
        noise = BaseNoise(s)
        stream, tr = simulate_traced(params, bg, noise, gen_cfg)
        if region_map is not None:
            keep = noise.draw("thinning", 0, len(stream)) < region_map.reporting_rates(stream.x, stream.y)
            tr = tr.select(np.flatnonzero(keep))
        traces.append(tr)
    L = len(traces)
    n_max = max((len(tr.s_root) for tr in traces), default=0)
    cols = {}
    for name in ("s_root", "delay_sum", "x_root", "y_root", "nx", "ny"):
        a = np.zeros((L, n_max))
        for i, tr in enumerate(traces):
            a[i, :len(tr.s_root)] = getattr(tr, name)
        cols[name] = torch.from_numpy(a)
    mask = torch.zeros(L, n_max, dtype=torch.bool)
    for i, tr in enumerate(traces):
        mask[i, :len(tr.s_root)] = True
    return FakeBatch(mask=mask, rate_mult=bg.n_centers, **cols)


def _log_theta(params: ModelParams) -> torch.Tensor:
    return torch.tensor(params.as_log_vector(), dtype=DTYPE)


def _params(log_theta) -> ModelParams:
    return ModelParams.from_log_vector(np.asarray(log_theta.detach(), dtype=float))


class WGANTrainer:
    """State of one adversarial training run: theta (log space), critic weights and both Adam states."""

    def __init__(self, data: Sequence[EventStream], theta_init: ModelParams, bg: BackgroundConfig,
                 region_map: Optional[RegionMap], gen_cfg: GenConfig, cfg: TrainConfig, seed: int,
                 critic: Optional[Critic] = None):
        if not data:
            raise ValueError("training data is empty")
        if theta_init.anisotropic:
            raise ValueError("WGAN estimation uses the isotropic kernel")
        self.data = [s.reported() for s in data]
        self.bg, self.region_map, self.gen_cfg, self.cfg = bg, region_map, gen_cfg, cfg
        self.seed = int(seed)
        self.theta_init = theta_init
        self.torch_gen = torch.Generator().manual_seed(self.seed)
        with torch.random.fork_rng():
            torch.manual_seed(self.seed)
            self.critic = critic if critic is not None else Critic.for_data(self.data, cfg.hidden)
        self.free_idx = torch.tensor([PARAM_NAMES.index(n) for n in cfg.free], dtype=torch.long)
        base = _log_theta(theta_init)
        self.clamped = base.clone()
        self.free = torch.nn.Parameter(base[self.free_idx].clone())
        self.opt_c = torch.optim.Adam(self.critic.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
        self.opt_g = torch.optim.Adam([self.free], lr=cfg.generator_lr, betas=(cfg.beta1, cfg.beta2))
        self.rng = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(7,)))
        self._perm = np.empty(0, dtype=np.int64)
        self._pos = 0
        self.epoch = 0

    @property
    def log_theta(self) -> torch.Tensor:
        full = self.clamped.clone()
        full[self.free_idx] = self.free
        return full

    @property
    def theta(self) -> ModelParams:
        return _params(self.log_theta)

    def real_batch(self) -> PaddedBatch:
        """Next L training streams; without replacement within a pass, reshuffled between passes."""
        L = min(self.cfg.batch_size, len(self.data))
        idx = []
        while len(idx) < L:
            if self._pos >= len(self._perm):
                self._perm = self.rng.permutation(len(self.data))
                self._pos = 0
            take = self._perm[self._pos:self._pos + L - len(idx)]
            self._pos += len(take)
            idx.extend(take.tolist())
        return pad_streams([self.data[i] for i in idx])

    def fakes(self, phase: int) -> FakeBatch:
        L = min(self.cfg.batch_size, len(self.data))
        seeds = seeds_for(self.seed, L, self.epoch, phase)
        return generate_fakes(self.theta, self.bg, self.region_map, seeds, self.gen_cfg)

    def critic_loss(self, real: PaddedBatch, fake: PaddedBatch, eps) -> tuple:
        f_real = self.critic(real)
        f_fake = self.critic(fake)
        w_term = f_fake.mean() - f_real.mean()
        gp = gradient_penalty(real, fake, eps, self.critic.score_features, self.critic.standardize)
        return w_term + self.cfg.lambda_gp * gp, w_term, gp

    def critic_step(self, real: PaddedBatch, fake: PaddedBatch) -> dict:
        """One Adam update of the critic; theta is untouched."""
        eps = torch.rand(len(real), generator=self.torch_gen, dtype=DTYPE)
        self.opt_c.zero_grad()
        loss, w_term, gp = self.critic_loss(real, fake, eps)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"non-finite critic loss at epoch {self.epoch}")
        loss.backward()
        self.opt_c.step()
        return dict(critic_loss=loss.item(), wasserstein=-w_term.item(), gp=gp.item())

    def generator_loss(self, fb: FakeBatch) -> torch.Tensor:
        vals = fb.values(self.log_theta)
        return -self.critic(vals, fb.mask).mean()

    def generator_step(self) -> dict:
        """One Adam update of log theta with the critic frozen."""
        fb = self.fakes(phase=1)
        for p in self.critic.parameters():
            p.requires_grad_(False)
        try:
            self.opt_g.zero_grad()
            loss = self.generator_loss(fb)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite generator loss at epoch {self.epoch}")
            loss.backward()
            self.opt_g.step()
        finally:
            for p in self.critic.parameters():
                p.requires_grad_(True)
        return dict(gen_loss=loss.item())

    def epoch_step(self) -> dict:
        fb = self.fakes(phase=0)
        with torch.no_grad():
            fake = PaddedBatch(fb.values(self.log_theta), fb.mask)
        rec = {}
        for _ in range(self.cfg.n_critic):
            rec = self.critic_step(self.real_batch(), fake)
        rec.update(self.generator_step())
        lt = self.log_theta.detach()
        if torch.any(torch.abs(lt - _log_theta(self.theta_init)) > self.cfg.sanity_log_range):
            raise TrainingDiverged(f"theta left the sanity box at epoch {self.epoch}")
        rec["epoch"] = self.epoch
        rec["theta"] = self.theta.to_dict()
        self.epoch += 1
        return rec


def _window_means(values, w):
    n = len(values) // w
    return [float(np.mean(values[k * w:(k + 1) * w])) for k in range(n)]


def converged(critic_losses, window: int, tol: float, patience: int) -> bool:
    """Relative change of consecutive window means below tol for ``patience`` windows in a row."""
    means = _window_means(critic_losses, window)
    if len(means) < patience + 1:
        return False
    recent = means[-(patience + 1):]
    return all(abs(b - a) <= tol * max(abs(a), 1e-12) for a, b in zip(recent, recent[1:]))


def _final_estimate(history, window) -> Optional[ModelParams]:
    if not history:
        return None
    tail = history[-window:]
    logs = np.array([[math.log(h["theta"][k]) for k in PARAM_NAMES] for h in tail])
    return ModelParams.from_log_vector(logs.mean(0))


def train(data: Sequence[EventStream], theta_init: ModelParams, bg: BackgroundConfig,
          region_map: Optional[RegionMap], gen_cfg: GenConfig, cfg: TrainConfig,
          seed: int = 0, callback=None) -> TrainRun:
    """Alternate ``n_critic`` critic steps with one generator step per epoch
    until the windowed critic loss settles or ``max_epochs`` is reached.

    The estimate is the geometric mean of theta over the final window of
    epochs. Raises TrainingDiverged (with ``.run`` set) on non-finite losses
    or when theta leaves the sanity box.
    """
    start = time.perf_counter()
    trainer = WGANTrainer(data, theta_init, bg, region_map, gen_cfg, cfg, seed)
    history = []
    status = "max_epochs"
    try:
        for _ in range(cfg.max_epochs):
            rec = trainer.epoch_step()
            history.append(rec)
            if callback is not None:
                callback(rec)
            if converged([h["critic_loss"] for h in history], cfg.window, cfg.tol, cfg.patience):
                status = "converged"
                break
    except TrainingDiverged as e:
        run = TrainRun(theta_init, trainer.theta, history, time.perf_counter() - start, seed,
                       "diverged", str(e))
        e.run = run
        raise
    est = _final_estimate(history, cfg.window) or theta_init
    # clamped coordinates come back exactly as given, not via exp(log(.))
    est = replace(est, **{k: getattr(theta_init, k) for k in PARAM_NAMES if k not in cfg.free})
    return TrainRun(theta_init, est, history, time.perf_counter() - start, seed, status)


def default_init_grid(center: ModelParams, factors=(0.5, 1.0, 2.0), free=PARAM_NAMES) -> list:
    """Factorial grid of ``factors`` times ``center`` over the free coordinates."""
    grid = [center]
    for name in free:
        grid = [replace(p, **{name: getattr(p, name) * f}) for p in grid for f in factors]
    return grid


def multi_start(data, init_grid: Sequence[ModelParams], bg, region_map, gen_cfg, cfg: TrainConfig,
                seed: int = 0, shared_seed: bool = True) -> list:
    """Independent ``train`` per initial value; failures are recorded, not raised.

    With ``shared_seed`` every run uses ``seed``; otherwise run k uses a
    seed derived from (seed, k).
    """
    runs = []
    for k, init in enumerate(init_grid):
        s = seed if shared_seed else seeds_for(seed, 1, k)[0]
        try:
            runs.append(train(data, init, bg, region_map, gen_cfg, cfg, s))
        except Exception as e:  # recorded per run
            run = getattr(e, "run", None) or TrainRun(init, init, [], 0.0, s, "failed", str(e))
            run.status = "diverged" if isinstance(e, TrainingDiverged) else "failed"
            run.message = str(e)
            runs.append(run)
    return runs
