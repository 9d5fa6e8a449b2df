"""Noising, the toy conditional denoiser, deterministic sampling and training."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .core import EmbeddingMatrix, LatentImage, NoiseSchedule, NumericalAbort, as_tensor


@dataclass
class AttentionRecord:
    """Cross-attention weights, shape ``steps x rows x (h*w)``.

    For every step and latent position the weights over conditioning rows sum to 1.
    """

    weights: torch.Tensor
    timesteps: tuple = ()

    @property
    def n_steps(self) -> int:
        return self.weights.shape[0]

    def mean_over_steps(self) -> torch.Tensor:
        return self.weights.mean(0)

    def token_mass(self, step: Optional[int] = None) -> torch.Tensor:
        """Average attention each row receives over latent positions (sums to 1)."""
        w = self.weights.mean(0) if step is None else self.weights[step]
        return w.mean(-1)


# ---------------------------------------------------------------------------
# forward process

def forward_noise(x0, t: int, noise, schedule: NoiseSchedule) -> torch.Tensor:
    """Closed form of ``t`` noising steps: sqrt(abar_t) x0 + sqrt(1 - abar_t) noise."""
    if not 0 <= t <= schedule.T:
        raise ValueError(f"timestep {t} outside [0, {schedule.T}]")
    abar = schedule.alpha_bars[t]
    return math.sqrt(abar) * as_tensor(x0) + math.sqrt(1.0 - abar) * as_tensor(noise)


def renoise(x0, schedule: NoiseSchedule, seed: int) -> LatentImage:
    """Push a clean latent back to step T with seeded standard-normal noise."""
    x0 = as_tensor(x0)
    gen = torch.Generator().manual_seed(int(seed))
    noise = torch.randn(x0.shape, generator=gen, dtype=torch.float64).to(x0.dtype)
    return LatentImage(forward_noise(x0, schedule.T, noise, schedule), t=schedule.T)


def initial_noise(shape: Sequence[int], seed: int, dtype=torch.float32) -> LatentImage:
    gen = torch.Generator().manual_seed(int(seed))
    x = torch.randn(tuple(shape), generator=gen, dtype=torch.float64).to(dtype)
    return LatentImage(x, t=None)


# ---------------------------------------------------------------------------
# toy denoiser

def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ToyDenoiser(nn.Module):
    """Noise predictor eps(x_t, t, cond) with one cross-attention layer over cond rows."""

    def __init__(self, latent_shape: Sequence[int], cond_dim: int = 32, hidden: int = 32,
                 timestep_dim: int = 32, attn_dim: int = 32, seed: int = 0):
        super().__init__()
        self.latent_shape = tuple(int(v) for v in latent_shape)
        c = self.latent_shape[0]
        self.cond_dim, self.timestep_dim, self.attn_dim = cond_dim, timestep_dim, attn_dim
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.time_mlp = nn.Sequential(nn.Linear(timestep_dim, hidden), nn.SiLU(), nn.Linear(hidden, hidden))
            self.conv_in = nn.Conv2d(c, hidden, 3, padding=1)
            self.mix1 = nn.Conv2d(hidden, hidden, 3, padding=1)
            self.to_q = nn.Linear(hidden, attn_dim, bias=False)
            self.to_k = nn.Linear(cond_dim, attn_dim, bias=False)
            self.to_v = nn.Linear(cond_dim, hidden, bias=False)
            self.attn_out = nn.Linear(hidden, hidden)
            self.mix2 = nn.Conv2d(hidden, hidden, 3, padding=1)
            self.conv_out = nn.Conv2d(hidden, c, 3, padding=1)

    @property
    def dtype(self):
        return self.conv_in.weight.dtype

    def forward(self, x: torch.Tensor, t: torch.Tensor, cond: torch.Tensor, return_attention: bool = False):
        b, _, h, w = x.shape
        if cond.dim() == 2:
            cond = cond.expand(b, *cond.shape)
        temb = self.time_mlp(timestep_embedding(t, self.timestep_dim).to(x.dtype))
        hid = nn.functional.silu(self.conv_in(x) + temb[:, :, None, None])
        hid = hid + nn.functional.silu(self.mix1(hid))

        seq = hid.flatten(2).transpose(1, 2)                     # b, hw, hidden
        q, k, v = self.to_q(seq), self.to_k(cond), self.to_v(cond)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(self.attn_dim), dim=-1)  # b, hw, rows
        seq = seq + self.attn_out(attn @ v)
        hid = seq.transpose(1, 2).reshape(b, -1, h, w)

        hid = hid + nn.functional.silu(self.mix2(hid))
        out = self.conv_out(hid)
        if return_attention:
            return out, attn.transpose(1, 2)                      # b, rows, hw
        return out


# ---------------------------------------------------------------------------
# sampling

def sub_schedule(steps: int, T: int) -> list:
    """Evenly spaced timesteps ``floor(j*T/steps)`` for j = 1..steps, ascending."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must lie in [1, {T}], got {steps}")
    return [(j * T) // steps for j in range(1, steps + 1)]


def sample(denoiser: ToyDenoiser, x_T, cond, steps: int, schedule: NoiseSchedule,
           capture: bool = False, clip_denoised: bool = True):
    """Deterministic (variance-free) reverse process over an even sub-schedule.

    Returns ``(LatentImage, AttentionRecord or None)``. Gradients never flow
    through the sampler; the conditioning tensor is read, never modified.
    """
    ts = sub_schedule(steps, schedule.T)[::-1]
    cond_t = as_tensor(cond).detach()
    x = as_tensor(x_T).detach().to(denoiser.dtype)
    cond_t = cond_t.to(denoiser.dtype)
    maps = []
    with torch.no_grad():
        for i, t in enumerate(ts):
            t_prev = ts[i + 1] if i + 1 < len(ts) else 0
            abar, abar_prev = schedule.alpha_bars[t], schedule.alpha_bars[t_prev]
            tt = torch.full((1,), t, dtype=torch.long)
            if capture:
                eps, attn = denoiser(x[None], tt, cond_t[None], return_attention=True)
                maps.append(attn[0])
            else:
                eps = denoiser(x[None], tt, cond_t[None])
            eps = eps[0]
            x0 = (x - math.sqrt(1.0 - abar) * eps) / math.sqrt(abar)
            if clip_denoised:
                x0 = x0.clamp(-1.0, 1.0)
            if t_prev == 0:
                x = x0
            else:
                # recompute eps consistent with the clipped x0 estimate
                eps = (x - math.sqrt(abar) * x0) / math.sqrt(1.0 - abar)
                x = math.sqrt(abar_prev) * x0 + math.sqrt(1.0 - abar_prev) * eps
            if not bool(torch.isfinite(x).all()):
                raise NumericalAbort(f"non-finite latent at sampling step {i} (t={t})", step=i)
    record = AttentionRecord(torch.stack(maps), tuple(ts)) if capture else None
    return LatentImage(x, t="clean"), record


def pipeline(denoiser: ToyDenoiser, x_T, cond, mode: str, schedule: NoiseSchedule, steps: int,
             seed: int = 0, cond_second=None, clip_denoised: bool = True) -> LatentImage:
    """'1step' = denoise; '2step' = denoise, renoise to T, denoise again.

    ``cond_second`` conditions the second denoise (defaults to ``cond``).
    """
    if mode == "1step":
        return sample(denoiser, x_T, cond, steps, schedule, clip_denoised=clip_denoised)[0]
    if mode == "2step":
        first, _ = sample(denoiser, x_T, cond, steps, schedule, clip_denoised=clip_denoised)
        x_star = renoise(first, schedule, seed)
        second = cond if cond_second is None else cond_second
        return sample(denoiser, x_star, second, steps, schedule, clip_denoised=clip_denoised)[0]
    raise ValueError(f"unknown pipeline mode {mode!r}")


# ---------------------------------------------------------------------------
# synthetic data and training

BLOB_COLORS = {
    "red": (1.0, 0.1, 0.1), "green": (0.1, 0.9, 0.2), "blue": (0.15, 0.25, 1.0),
    "yellow": (1.0, 0.95, 0.1), "white": (1.0, 1.0, 1.0),
}
BLOB_SHAPES = ("ball", "box")


def blob_dataset(n: int, shape: Sequence[int], seed: int = 0):
    """Colored blobs on black, in [-1, 1], with two-word captions like ``"red ball"``."""
    c, h, w = shape
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    images, captions = np.empty((n, c, h, w)), []
    colors = list(BLOB_COLORS)
    for k in range(n):
        color = colors[rng.integers(len(colors))]
        kind = BLOB_SHAPES[rng.integers(len(BLOB_SHAPES))]
        cy, cx = rng.uniform(1.5, h - 2.5), rng.uniform(1.5, w - 2.5)
        r = rng.uniform(1.2, min(h, w) / 3.5)
        if kind == "ball":
            alpha = np.clip(r + 0.5 - np.hypot(yy - cy, xx - cx), 0.0, 1.0)
        else:
            dist = np.maximum(np.abs(yy - cy), np.abs(xx - cx))
            alpha = np.clip(r + 0.5 - dist, 0.0, 1.0)
        rgb = np.array(BLOB_COLORS[color])
        chans = np.resize(rgb, c)
        images[k] = 2.0 * alpha[None] * chans[:, None, None] - 1.0
        captions.append(f"{color} {kind}")
    return torch.from_numpy(images), captions


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    initial_eval: float = float("nan")
    final_eval: float = float("nan")

    def running(self, window: int = 100) -> tuple:
        """(mean of first window, mean of last window) of the per-step losses."""
        if not self.losses:
            return float("nan"), float("nan")
        w = min(window, len(self.losses))
        return float(np.mean(self.losses[:w])), float(np.mean(self.losses[-w:]))


def _eval_loss(denoiser, x0, cond, t, noise, schedule) -> float:
    abar = torch.tensor([schedule.alpha_bars[i] for i in t.tolist()], dtype=x0.dtype)[:, None, None, None]
    xt = abar.sqrt() * x0 + (1 - abar).sqrt() * noise
    with torch.no_grad():
        return float(nn.functional.mse_loss(denoiser(xt, t, cond), noise))


def train_toy_denoiser(denoiser: ToyDenoiser, images: torch.Tensor, conds: torch.Tensor,
                       schedule: NoiseSchedule, steps: int, seed: int = 0,
                       batch_size: int = 32, lr: float = 2e-3, n_eval: int = 512) -> TrainReport:
    """Minimise E||eps - eps_theta(x_t, t)||^2 over random (x0, t, eps); updates in place.

    ``conds`` holds one conditioning matrix per image, shape (n, rows, d).
    """
    dtype = denoiser.dtype
    images, conds = images.to(dtype), conds.to(dtype)
    gen = torch.Generator().manual_seed(seed)
    n = images.shape[0]
    report = TrainReport()

    ev_idx = torch.randint(0, n, (n_eval,), generator=gen)
    ev_t = torch.randint(1, schedule.T + 1, (n_eval,), generator=gen)
    ev_noise = torch.randn(n_eval, *images.shape[1:], generator=gen, dtype=dtype)
    ev = (images[ev_idx], conds[ev_idx], ev_t, ev_noise)
    report.initial_eval = _eval_loss(denoiser, *ev, schedule)
    if steps == 0:
        report.final_eval = report.initial_eval
        return report

    abars = torch.tensor(schedule.alpha_bars, dtype=dtype)
    opt = torch.optim.Adam(denoiser.parameters(), lr=lr)
    for p in denoiser.parameters():
        p.requires_grad_(True)
    denoiser.train()
    for _ in range(steps):
        idx = torch.randint(0, n, (batch_size,), generator=gen)
        t = torch.randint(1, schedule.T + 1, (batch_size,), generator=gen)
        noise = torch.randn(batch_size, *images.shape[1:], generator=gen, dtype=dtype)
        a = abars[t][:, None, None, None]
        xt = a.sqrt() * images[idx] + (1 - a).sqrt() * noise
        loss = nn.functional.mse_loss(denoiser(xt, t, conds[idx]), noise)
        if not torch.isfinite(loss):
            raise NumericalAbort(f"denoiser training diverged at step {len(report.losses)}",
                                 step=len(report.losses))
        opt.zero_grad()
        loss.backward()
        opt.step()
        report.losses.append(loss.item())
    denoiser.eval()
    for p in denoiser.parameters():
        p.requires_grad_(False)
    report.final_eval = _eval_loss(denoiser, *ev, schedule)
    return report
