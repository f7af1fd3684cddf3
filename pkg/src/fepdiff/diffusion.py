"""Residual diffusion refiner.

The generator denoises normalized residuals (ground truth minus proxy
trajectory) instead of full trajectories. Each denoising step sees the noisy
residual and the proxy position concatenated per future step (token-level
conditioning), a sinusoidal timestep embedding, and a global condition vector
[mu_z ; goal]. Sampling is deterministic DDIM over a uniformly spaced
timestep subsequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .dataio import ResidualStats
from .encoder import TransformerBlock, sinusoidal_encoding


@dataclass
class NoiseSchedule:
    """Linear beta schedule with exact cumulative products, 1-based steps."""

    t_steps: int
    beta: torch.Tensor  # [T] float64
    alpha: torch.Tensor  # [T]
    alpha_bar: torch.Tensor  # [T]

    def alpha_bar_at(self, t: int | torch.Tensor) -> torch.Tensor:
        """Cumulative product at step t (t in 1..T; tensor or int)."""
        if torch.is_tensor(t):
            return self.alpha_bar[t.long() - 1]
        return self.alpha_bar[int(t) - 1]

    def snr(self, t: int | torch.Tensor) -> torch.Tensor:
        ab = self.alpha_bar_at(t)
        return ab / (1.0 - ab)


def make_schedule(
    t_steps: int = 200, beta_start: float = 1e-4, beta_end: float = 0.02
) -> NoiseSchedule:
    if not (0.0 < beta_start < beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start < beta_end < 1, got ({beta_start}, {beta_end})")
    if t_steps < 1:
        raise ValueError("t_steps must be >= 1")
    beta = torch.linspace(beta_start, beta_end, t_steps, dtype=torch.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(t_steps=t_steps, beta=beta, alpha=alpha, alpha_bar=torch.cumprod(alpha, dim=0))


def _broadcast(ab: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    ab = ab.to(like.dtype)
    while ab.dim() < like.dim():
        ab = ab.unsqueeze(-1)
    return ab


def forward_sample(
    x0: torch.Tensor, t: int | torch.Tensor, eps: torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    """Closed-form noising: x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    if torch.is_tensor(t):
        if not ((t >= 1).all() and (t <= schedule.t_steps).all()):
            raise ValueError("t out of range")
    elif not 1 <= int(t) <= schedule.t_steps:
        raise ValueError(f"t={t} out of range 1..{schedule.t_steps}")
    if eps.shape != x0.shape:
        raise ValueError("eps shape must match x0")
    ab = _broadcast(schedule.alpha_bar_at(t), x0)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps


def _stats_tensors(stats: ResidualStats, like: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    mu = torch.as_tensor(np.asarray(stats.mu_r), dtype=like.dtype, device=like.device)
    sigma = torch.as_tensor(np.asarray(stats.sigma_r), dtype=like.dtype, device=like.device)
    return mu, sigma


def normalize_residual(delta: torch.Tensor, stats: ResidualStats) -> torch.Tensor:
    mu, sigma = _stats_tensors(stats, delta)
    return (delta - mu) / sigma


def denormalize_residual(x0: torch.Tensor, stats: ResidualStats) -> torch.Tensor:
    mu, sigma = _stats_tensors(stats, x0)
    return x0 * sigma + mu


def build_tokens(noisy_residual: torch.Tensor, proxy: torch.Tensor) -> torch.Tensor:
    """Per-step concatenation [r_t ; proxy_t] -> [..., T_fut, 4]."""
    if noisy_residual.shape != proxy.shape:
        raise ValueError(
            f"residual/proxy length mismatch: {noisy_residual.shape} vs {proxy.shape}"
        )
    return torch.cat([noisy_residual, proxy], dim=-1)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of (possibly fractional) step values, [B, dim]."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half
    )
    args = t.unsqueeze(-1) * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2 == 1:
        emb = torch.cat([emb, emb.new_zeros(*emb.shape[:-1], 1)], dim=-1)
    return emb


class ResidualDenoiser(nn.Module):
    """Noise predictor over future-step tokens.

    Tokens are embedded, summed with a step position table, a timestep
    embedding and a projected global condition, passed through self-attention
    blocks over the future axis and projected to 2 channels per step. With
    ``use_token_condition`` off the proxy is dropped from the tokens
    (residual-only tokens), everything else unchanged.

    The output is preconditioned with the analytic skip
    eps_hat = x_t / sqrt(1 - alpha_bar_t) + f(tokens, t, cond): with f = 0
    every DDIM step maps x_t to its zero-residual estimate, so an untrained
    refiner returns the proxy unchanged instead of injecting noise; training
    moves away from that prior only where the data supports it.
    """

    def __init__(
        self,
        schedule: NoiseSchedule,
        cond_dim: int = 130,
        width: int = 128,
        depth: int = 4,
        heads: int = 8,
        use_token_condition: bool = True,
        head_init_scale: float = 0.05,
    ):
        super().__init__()
        self.width = width
        self.use_token_condition = use_token_condition
        self.token_embed = nn.Linear(4 if use_token_condition else 2, width)
        self.time_mlp = nn.Sequential(nn.Linear(width, width), nn.SiLU(), nn.Linear(width, width))
        self.cond_proj = nn.Linear(cond_dim, width)
        self.blocks = nn.ModuleList(TransformerBlock(width, heads, ff_mult=4) for _ in range(depth))
        self.head = nn.Linear(width, 2)
        with torch.no_grad():
            self.head.weight.mul_(head_init_scale)
            self.head.bias.zero_()
        self.register_buffer(
            "skip_scale",
            torch.rsqrt(1.0 - schedule.alpha_bar.to(torch.float32)),
        )

    def forward(
        self,
        x_t: torch.Tensor,
        t: int | torch.Tensor,
        cond: torch.Tensor,
        proxy: torch.Tensor,
    ) -> torch.Tensor:
        b, steps, _ = x_t.shape
        if not torch.is_tensor(t):
            t = torch.full((b,), t, dtype=torch.long, device=x_t.device)
        skip = self.skip_scale[t.long() - 1].to(x_t.dtype).view(b, 1, 1)
        tokens = build_tokens(x_t, proxy) if self.use_token_condition else x_t
        x = self.token_embed(tokens)
        x = x + sinusoidal_encoding(steps, self.width, dtype=x.dtype, device=x.device)
        x = x + self.time_mlp(timestep_embedding(t.to(x.dtype), self.width)).unsqueeze(1)
        x = x + self.cond_proj(cond).unsqueeze(1)
        for block in self.blocks:
            x = block(x)
        return skip * x_t + self.head(x)


def min_snr_loss(
    eps_hat: torch.Tensor,
    eps: torch.Tensor,
    t: int | torch.Tensor,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """w(t) ||eps_hat - eps||^2 with w(t) = 1 / (SNR(t) + 1).

    With a per-sample step tensor ``t`` (Long[B]) the first axis is treated as
    the batch and the weighted squared norms are averaged; with a scalar ``t``
    the whole tensor is one sample.
    """
    if eps_hat.shape != eps.shape:
        raise ValueError("eps_hat shape must match eps")
    w = (1.0 / (schedule.snr(t) + 1.0)).to(eps.dtype)
    sq = (eps_hat - eps).square()
    if torch.is_tensor(t) and t.dim() > 0:
        return (w * sq.reshape(sq.shape[0], -1).sum(dim=-1)).mean()
    return w * sq.sum()


def ddim_timesteps(t_steps: int, n_steps: int) -> list[int]:
    """Descending step subsequence: uniformly spaced from T down to 1."""
    if n_steps > t_steps:
        raise ValueError(f"n_steps={n_steps} exceeds schedule length {t_steps}")
    if n_steps == 1:
        return [t_steps]
    grid = np.round(np.linspace(t_steps, 1, n_steps)).astype(int)
    taus: list[int] = []
    for t in grid.tolist():
        if not taus or t < taus[-1]:
            taus.append(t)
    return taus


@torch.no_grad()
def ddim_sample(
    model,
    cond: torch.Tensor,
    proxy: torch.Tensor,
    schedule: NoiseSchedule,
    n_steps: int = 50,
    x_t: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM from x_T ~ N(0, I) to a residual estimate.

    ``model`` is any callable (x_t, t, cond, proxy) -> eps_hat; the start
    point may be supplied directly via ``x_t`` or drawn from ``generator``.
    """
    taus = ddim_timesteps(schedule.t_steps, n_steps)
    if x_t is None:
        x_t = torch.randn(proxy.shape, generator=generator, dtype=proxy.dtype, device=proxy.device)
    x = x_t
    for i, t in enumerate(taus):
        ab_t = _broadcast(schedule.alpha_bar_at(t), x)
        eps_hat = model(x, t, cond, proxy)
        x0_hat = (x - torch.sqrt(1.0 - ab_t) * eps_hat) / torch.sqrt(ab_t)
        if i + 1 < len(taus):
            ab_prev = _broadcast(schedule.alpha_bar_at(taus[i + 1]), x)
            x = torch.sqrt(ab_prev) * x0_hat + torch.sqrt(1.0 - ab_prev) * eps_hat
        else:
            x = x0_hat  # final jump to alpha_bar = 1
    return x


def refine(proxy: torch.Tensor, residual: torch.Tensor) -> torch.Tensor:
    """Final prediction: proxy plus (de-normalized) residual."""
    if proxy.shape != residual.shape:
        raise ValueError(f"length mismatch: {proxy.shape} vs {residual.shape}")
    return proxy + residual
