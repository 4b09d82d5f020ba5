"""Noise schedule, forward process, latent objective, DDIM stepping and guidance."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .synthdata import SCARCE_TEXT

DROP_PROB = 0.30


class NoiseSchedule:
    """Cosine cumulative signal schedule ``alpha_bar[t]`` for ``t`` in ``[0, T)``.

    ``alpha_bar(-1)`` is defined as 1 so a DDIM step to ``t_prev = -1`` lands on
    clean data.
    """

    def __init__(self, T: int = 1000, s: float = 0.008, max_beta: float = 0.999):
        self.T = T
        f = lambda u: math.cos((u / T + s) / (1 + s) * math.pi / 2) ** 2
        betas = np.array([min(1 - f(t + 1) / f(t), max_beta) for t in range(T)])
        self.alpha_bar = torch.tensor(np.cumprod(1.0 - betas), dtype=torch.float64)

    def ab(self, t) -> torch.Tensor:
        """``alpha_bar`` gathered at integer steps; ``-1`` maps to 1."""
        t = torch.as_tensor(t, dtype=torch.long)
        if torch.any(t < -1) or torch.any(t >= self.T):
            raise ValueError(f"timestep out of range [-1, {self.T})")
        padded = torch.cat([torch.ones(1, dtype=torch.float64), self.alpha_bar])
        return padded[t + 1]

    def sampling_timesteps(self, steps: int = 50) -> list[int]:
        """Uniformly spaced steps, descending, e.g. ``[980, 960, ..., 0]`` for 50 of 1000."""
        stride = self.T // steps
        return list(range(stride * (steps - 1), -1, -stride))


def _bcast(v: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    v = v.to(like.dtype)
    return v.view(-1, *([1] * (like.dim() - 1))) if v.dim() else v


def forward_diffuse(z0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    if eps.shape != z0.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != latent shape {tuple(z0.shape)}")
    t = torch.as_tensor(t)
    if torch.any(t < 0) or torch.any(t >= sched.T):
        raise ValueError(f"timestep out of range [0, {sched.T})")
    ab = _bcast(sched.ab(t), z0)
    return torch.sqrt(ab) * z0 + torch.sqrt(1 - ab) * eps


def ddim_step(z_t: torch.Tensor, eps_hat: torch.Tensor, t, t_prev, sched: NoiseSchedule) -> torch.Tensor:
    """Deterministic DDIM update from ``t`` to ``t_prev`` (``t_prev = -1`` means clean)."""
    t, t_prev = torch.as_tensor(t), torch.as_tensor(t_prev)
    if torch.any(t_prev >= t):
        raise ValueError(f"t_prev ({t_prev.tolist()}) must be smaller than t ({t.tolist()})")
    ab_t = _bcast(sched.ab(t), z_t)
    ab_prev = _bcast(sched.ab(t_prev), z_t)
    z0_hat = (z_t - torch.sqrt(1 - ab_t) * eps_hat) / torch.sqrt(ab_t)
    return torch.sqrt(ab_prev) * z0_hat + torch.sqrt(1 - ab_prev) * eps_hat


def guided_eps(eps_cond: torch.Tensor, eps_scarce: torch.Tensor, scale: float) -> torch.Tensor:
    """``eps_scarce + scale * (eps_cond - eps_scarce)``.

    ``torch.lerp`` keeps the identities exact: scale 0 gives ``eps_scarce``,
    scale 1 gives ``eps_cond`` and equal branches give that branch for any scale.
    """
    if scale < 0:
        raise ValueError(f"guidance scale must be >= 0, got {scale}")
    if eps_cond.shape != eps_scarce.shape:
        raise ValueError("conditional and scarce predictions differ in shape")
    return torch.lerp(eps_scarce, eps_cond, scale)


@dataclass
class GuidanceConfig:
    scale: float = 3.0
    scarce_text: str = SCARCE_TEXT
    drop_prob: float = DROP_PROB

    def __post_init__(self):
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ValueError(f"drop_prob must be in [0, 1], got {self.drop_prob}")
        if self.scale < 0:
            raise ValueError(f"guidance scale must be >= 0, got {self.scale}")


def cfg_predict(
    model,
    z_t: torch.Tensor,
    t: torch.Tensor,
    y_cond: tuple[torch.Tensor, torch.Tensor],
    y_scarce: tuple[torch.Tensor, torch.Tensor],
    pyramid: list[torch.Tensor] | None,
    scale: float,
    override=None,
):
    """One batched call over ``[cond, scarce]`` combined by classifier-free guidance.

    ``override`` (if any) must already cover the doubled batch. Returns the
    guided noise and the attention maps of the doubled batch.
    """
    b = z_t.shape[0]
    text = torch.cat([y_cond[0], y_scarce[0]])
    pad = torch.cat([y_cond[1], y_scarce[1]])
    t = t.expand(b) if t.dim() == 0 else t
    pyr2 = [torch.cat([p, p]) for p in pyramid] if pyramid is not None else None
    eps, maps = model(torch.cat([z_t, z_t]), torch.cat([t, t]), text, pad, pyr2, override)
    return guided_eps(eps[:b], eps[b:], scale), maps


def scarce_dropout(
    tokens: torch.Tensor, scarce_tokens: torch.Tensor, levels: list[str], p: float, generator: torch.Generator | None = None
) -> tuple[torch.Tensor, torch.Tensor]:
    """Replace each complete/partial description by the scarce one with probability ``p``."""
    draws = torch.rand(len(levels), generator=generator)
    eligible = torch.tensor([lvl in ("complete", "partial") for lvl in levels])
    replaced = eligible & (draws < p)
    out = torch.where(replaced[:, None], scarce_tokens[None].expand_as(tokens), tokens)
    return out, replaced


@dataclass
class LatentBatch:
    z0: torch.Tensor
    tokens: torch.Tensor
    levels: list[str]
    pyramid: list[torch.Tensor] | None = None


def latent_loss(
    batch: LatentBatch,
    predictor: Callable,
    text_encoder: Callable,
    scarce_tokens: torch.Tensor,
    sched: NoiseSchedule,
    generator: torch.Generator | None = None,
    drop_prob: float = DROP_PROB,
    stats: dict | None = None,
) -> torch.Tensor:
    """Mean squared error between sampled noise and its prediction.

    ``predictor(z_t, t, text, pad, pyramid)`` returns the predicted noise (or a
    ``(eps, maps)`` pair); ``text_encoder(tokens)`` returns ``(text, pad)``.
    """
    b = batch.z0.shape[0]
    if b == 0:
        raise ValueError("empty batch")
    tokens, replaced = scarce_dropout(batch.tokens, scarce_tokens, batch.levels, drop_prob, generator)
    t = torch.randint(0, sched.T, (b,), generator=generator)
    eps = torch.randn(batch.z0.shape, generator=generator, dtype=batch.z0.dtype)
    z_t = forward_diffuse(batch.z0, t, eps, sched)
    text, pad = text_encoder(tokens.to(batch.z0.device))
    out = predictor(z_t, t.to(batch.z0.device), text, pad, batch.pyramid)
    eps_hat = out[0] if isinstance(out, tuple) else out
    if stats is not None:
        stats["replaced"] = replaced
        stats["t"] = t
        stats["maps"] = out[1] if isinstance(out, tuple) else None
    return ((eps.to(eps_hat.device) - eps_hat) ** 2).mean()
