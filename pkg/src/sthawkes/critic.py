"""Recurrent critic f_w over padded, masked event batches, and the gradient penalty."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .model import EventStream

DTYPE = torch.float64


@dataclass
class PaddedBatch:
    """``values`` is (L, N_max, 3) with rows (t, x, y); padding is zero and ``mask`` is a prefix mask."""

    values: torch.Tensor
    mask: torch.Tensor

    def __post_init__(self):
        self.values = torch.as_tensor(self.values, dtype=DTYPE)
        self.mask = torch.as_tensor(self.mask, dtype=torch.bool)
        if self.values.ndim != 3 or self.values.shape[-1] != 3:
            raise ValueError(f"values must be (L, N, 3), got {tuple(self.values.shape)}")
        if self.mask.shape != self.values.shape[:2]:
            raise ValueError("mask shape does not match values")

    @property
    def lengths(self) -> torch.Tensor:
        return self.mask.sum(1)

    def __len__(self):
        return self.values.shape[0]

    def check(self):
        lengths = self.lengths
        prefix = torch.arange(self.mask.shape[1])[None, :] < lengths[:, None]
        if not torch.equal(prefix, self.mask):
            raise ValueError("mask is not a prefix mask")
        if torch.any(self.values[~self.mask] != 0):
            raise ValueError("padded positions must be zero")
        return self

    def repad(self, n_max: int) -> "PaddedBatch":
        n_real = int(self.lengths.max()) if len(self) else 0
        if n_max < n_real:
            raise ValueError(f"cannot pad to {n_max} < longest stream {n_real}")
        v = torch.zeros(len(self), n_max, 3, dtype=DTYPE)
        m = torch.zeros(len(self), n_max, dtype=torch.bool)
        k = min(n_max, self.values.shape[1])
        v[:, :k] = self.values[:, :k]
        m[:, :k] = self.mask[:, :k]
        return PaddedBatch(v, m)


def pad_streams(streams: Sequence, n_max: Optional[int] = None) -> PaddedBatch:
    """Pad EventStreams (or (n, 3) arrays) with zeros to a common length."""
    arrs = [np.column_stack([s.t, s.x, s.y]) if isinstance(s, EventStream)
            else np.asarray(s, dtype=float).reshape(-1, 3) for s in streams]
    longest = max((len(a) for a in arrs), default=0)
    n_max = longest if n_max is None else n_max
    if n_max < longest:
        raise ValueError(f"n_max={n_max} shorter than longest stream ({longest})")
    v = np.zeros((len(arrs), n_max, 3))
    m = np.zeros((len(arrs), n_max), dtype=bool)
    for i, a in enumerate(arrs):
        v[i, :len(a)] = a
        m[i, :len(a)] = True
    return PaddedBatch(torch.from_numpy(v), torch.from_numpy(m))


class Critic(nn.Module):
    """LSTM critic with an affine per-step head summed over real events.

    Each step sees standardized features (dt / time_scale, (x - cx) / s,
    (y - cy) / s) where dt is the gap to the previous event. Padded steps
    neither update the hidden state nor contribute to the score, so scores
    do not depend on the padding width.
    """

    def __init__(self, hidden: int = 64, time_scale: float = 1.0, space_scale: float = 1.0,
                 space_center=(0.0, 0.0)):
        super().__init__()
        self.hidden = hidden
        self.cell = nn.LSTMCell(3, hidden)
        self.head = nn.Linear(hidden, 1)
        self.register_buffer("time_scale", torch.tensor(float(time_scale), dtype=DTYPE))
        self.register_buffer("space_scale", torch.tensor(float(space_scale), dtype=DTYPE))
        self.register_buffer("space_center", torch.tensor(space_center, dtype=DTYPE))
        self.to(DTYPE)

    @classmethod
    def for_data(cls, streams: Sequence[EventStream], hidden: int = 64) -> "Critic":
        """Critic whose input standardization is fitted to the training streams."""
        gaps = np.concatenate([np.diff(s.t, prepend=0.0) for s in streams if len(s)])
        xy = np.concatenate([s.xy for s in streams if len(s)])
        return cls(hidden, time_scale=float(np.mean(gaps)) or 1.0,
                   space_scale=float(xy.std()) or 1.0, space_center=tuple(xy.mean(0)))

    def standardize(self, values: torch.Tensor) -> torch.Tensor:
        t = values[..., 0]
        prev = torch.cat([torch.zeros_like(t[:, :1]), t[:, :-1]], dim=1)
        dt = (t - prev) / self.time_scale
        xy = (values[..., 1:] - self.space_center) / self.space_scale
        return torch.cat([dt.unsqueeze(-1), xy], dim=-1)

    def score_features(self, z: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        L, N, _ = z.shape
        h = z.new_zeros(L, self.hidden)
        c = z.new_zeros(L, self.hidden)
        total = z.new_zeros(L)
        m = mask.to(z.dtype)
        for i in range(N):
            if not bool(mask[:, i].any()):
                break  # prefix mask: nothing real beyond this step
            mi = m[:, i:i + 1]
            h_new, c_new = self.cell(z[:, i], (h, c))
            h = mi * h_new + (1 - mi) * h
            c = mi * c_new + (1 - mi) * c
            total = total + mi[:, 0] * self.head(h).squeeze(-1)
        return total

    def forward(self, values, mask=None) -> torch.Tensor:
        if isinstance(values, PaddedBatch):
            values, mask = values.values, values.mask
        if values.ndim != 3 or values.shape[-1] != 3 or mask.shape != values.shape[:2]:
            raise ValueError("critic expects (L, N, 3) values with an (L, N) mask")
        return self.score_features(self.standardize(values), mask)


def critic_forward(batch: PaddedBatch, critic: Critic) -> torch.Tensor:
    return critic(batch)


def interpolate(real: PaddedBatch, fake: PaddedBatch, eps: torch.Tensor) -> PaddedBatch:
    """eps * real + (1 - eps) * fake on positions active in both streams."""
    n = max(real.values.shape[1], fake.values.shape[1])
    real, fake = real.repad(n), fake.repad(n)
    mask = real.mask & fake.mask
    e = torch.as_tensor(eps, dtype=DTYPE).reshape(-1, 1, 1)
    v = (e * real.values + (1 - e) * fake.values) * mask.unsqueeze(-1)
    return PaddedBatch(v, mask)


def gradient_norms(real: PaddedBatch, fake: PaddedBatch, eps, critic: Callable,
                   to_features: Optional[Callable] = None) -> torch.Tensor:
    """Per-stream ||grad_x f(x_hat)||_2 over active coordinates of the interpolates.

    ``critic(features, mask)`` scores a batch. ``to_features`` maps raw
    values to the coordinates in which the norm is measured (identity by
    default; a Critic's ``standardize`` in training). The graph is kept so
    the norms can be differentiated in the critic's weights.
    """
    xh = interpolate(real, fake, eps)
    z = xh.values if to_features is None else to_features(xh.values)
    z = (z * xh.mask.unsqueeze(-1)).detach().requires_grad_(True)
    scores = critic(z, xh.mask)
    (grad,) = torch.autograd.grad(scores.sum(), z, create_graph=True)
    grad = grad * xh.mask.unsqueeze(-1)
    return grad.flatten(1).norm(dim=1)


def gradient_penalty(real: PaddedBatch, fake: PaddedBatch, eps, critic: Callable,
                     to_features: Optional[Callable] = None) -> torch.Tensor:
    """Mean over streams of (||grad_x f(x_hat)||_2 - 1)^2."""
    norms = gradient_norms(real, fake, eps, critic, to_features)
    return ((norms - 1.0) ** 2).mean()


def critic_state(critic: Critic) -> dict:
    """Shape-tagged structured-text form of the critic weights."""
    tensors = {k: dict(shape=list(v.shape), data=v.detach().reshape(-1).tolist())
               for k, v in critic.state_dict().items()}
    return dict(format="sthawkes-critic", version=1, hidden=critic.hidden, tensors=tensors)


def critic_from_state(state: dict) -> Critic:
    if state.get("format") != "sthawkes-critic":
        raise ValueError("not a critic checkpoint")
    c = Critic(int(state["hidden"]))
    sd = {k: torch.tensor(v["data"], dtype=DTYPE).reshape(v["shape"])
          for k, v in state["tensors"].items()}
    c.load_state_dict(sd)
    return c


def save_critic(path, critic: Critic):
    with open(path, "w") as fh:
        json.dump(critic_state(critic), fh)


def load_critic(path) -> Critic:
    with open(path) as fh:
        return critic_from_state(json.load(fh))
