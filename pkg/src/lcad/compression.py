"""Pixel-space stage: compression autoencoder, luminance encoder and pixel losses.

Tensors are channel-first torch tensors:

* RGB images ``(B, 3, H, W)`` in ``[0, 1]``
* gray images ``(B, 1, H, W)`` holding Lab ``L`` in ``[0, 100]``
* latents ``(B, C_z, H / 4, W / 4)``
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class CompressionConfig:
    channels: tuple[int, int, int] = (32, 64, 64)
    latent_channels: int = 4
    n_win: int = 7
    alpha: float = 1.0
    beta: float = 0.5
    disc_channels: tuple[int, int] = (32, 64)

    @property
    def factor(self) -> int:
        return 2 ** (len(self.channels) - 1)


def _conv(cin: int, cout: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1, padding_mode="reflect")


class Encoder(nn.Module):
    """Two convolutions per scale, stride-2 convolutions between scales.

    Only reflect-padded convolutions and pointwise activations, so constant
    inputs give spatially constant features and each tap has a finite
    receptive field. ``forward`` returns ``(out, taps)`` with one tap per scale.
    """

    def __init__(self, in_channels: int, channels: tuple[int, ...], out_channels: int):
        super().__init__()
        self.in_channels = in_channels
        self.stages = nn.ModuleList()
        prev = in_channels
        for s, ch in enumerate(channels):
            self.stages.append(nn.Sequential(_conv(prev, ch, stride=1 if s == 0 else 2), nn.SiLU(), _conv(ch, ch), nn.SiLU()))
            prev = ch
        self.conv_out = _conv(prev, out_channels)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        taps = []
        for stage in self.stages:
            x = stage(x)
            taps.append(x)
        return self.conv_out(x), taps


class Decoder(nn.Module):
    """Upsampling decoder with additive, channel-projected luminance injection per scale."""

    def __init__(self, latent_channels: int, channels: tuple[int, ...], lum_channels: tuple[int, ...]):
        super().__init__()
        rev = list(reversed(channels))
        self.conv_in = _conv(latent_channels, rev[0])
        self.pre = nn.ModuleList()
        self.post = nn.ModuleList()
        self.inject = nn.ModuleList()
        prev = rev[0]
        for ch, lum_ch in zip(rev, reversed(lum_channels)):
            self.pre.append(_conv(prev, ch))
            self.post.append(_conv(ch, ch))
            proj = nn.Conv2d(lum_ch, ch, 1, bias=False)
            nn.init.zeros_(proj.weight)
            self.inject.append(proj)
            prev = ch
        self.conv_out = _conv(prev, 3)

    def forward(self, z: torch.Tensor, pyramid: list[torch.Tensor] | None) -> torch.Tensor:
        n = len(self.pre)
        if pyramid is not None and len(pyramid) != n:
            raise ValueError(f"pyramid has {len(pyramid)} levels, decoder expects {n}")
        h = F.silu(self.conv_in(z))
        for i in range(n):
            if i:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = F.silu(self.pre[i](h))
            if pyramid is not None:
                h = h + self.inject[i](pyramid[n - 1 - i])
            h = F.silu(self.post[i](h))
        return torch.sigmoid(self.conv_out(h))


class PatchDiscriminator(nn.Module):
    """Three convolutions, receptive field 18 px."""

    def __init__(self, channels: tuple[int, int] = (32, 64)):
        super().__init__()
        c1, c2 = channels
        self.net = nn.Sequential(
            nn.Conv2d(3, c1, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(c1, c2, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(c2, 1, 3, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x * 2.0 - 1.0)


class PixelModel(nn.Module):
    """Compression encoder/decoder plus the luminance encoder.

    ``latent_mean``/``latent_std`` are per-channel statistics of encoder
    outputs over the training set; :meth:`standardize` maps raw latents to
    the unit-variance space the diffusion model works in.
    """

    def __init__(self, config: CompressionConfig | None = None):
        super().__init__()
        self.config = cfg = config or CompressionConfig()
        self.encoder = Encoder(3, cfg.channels, cfg.latent_channels)
        self.lum_encoder = Encoder(1, cfg.channels, cfg.latent_channels)
        self.decoder = Decoder(cfg.latent_channels, cfg.channels, cfg.channels)
        self.register_buffer("latent_mean", torch.zeros(cfg.latent_channels))
        self.register_buffer("latent_std", torch.ones(cfg.latent_channels))

    def _check_spatial(self, x: torch.Tensor, channels: int, what: str) -> None:
        f = self.config.factor
        if x.dim() != 4 or x.shape[1] != channels:
            raise ValueError(f"{what}: expected (B, {channels}, H, W), got {tuple(x.shape)}")
        if x.shape[2] % f or x.shape[3] % f:
            raise ValueError(f"{what}: spatial size {tuple(x.shape[2:])} not divisible by {f}")

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        self._check_spatial(x, 3, "compress_encode")
        return self.encoder(x * 2.0 - 1.0)[0]

    def luminance_features(self, gray: torch.Tensor) -> list[torch.Tensor]:
        self._check_spatial(gray, 1, "luminance_features")
        return self.lum_encoder(gray / 50.0 - 1.0)[1]

    def decode(self, z: torch.Tensor, pyramid: list[torch.Tensor] | None) -> torch.Tensor:
        return self.decoder(z, pyramid)

    def standardize(self, z: torch.Tensor) -> torch.Tensor:
        return (z - self.latent_mean[:, None, None]) / self.latent_std[:, None, None]

    def unstandardize(self, z: torch.Tensor) -> torch.Tensor:
        return z * self.latent_std[:, None, None] + self.latent_mean[:, None, None]

    @property
    def lum_channels(self) -> tuple[int, ...]:
        return tuple(self.config.channels)


def zero_pyramid(pyramid: list[torch.Tensor]) -> list[torch.Tensor]:
    return [torch.zeros_like(p) for p in pyramid]


def artifact_map(residual: torch.Tensor, n_win: int = 7) -> torch.Tensor:
    """Local variance of the residual in ``n_win x n_win`` windows, channel-averaged.

    ``residual`` is ``(C, H, W)`` or ``(B, C, H, W)``; borders use reflect padding.
    The result drops the channel axis.
    """
    if n_win < 3 or n_win % 2 == 0:
        raise ValueError(f"window size must be odd and >= 3, got {n_win}")
    if not torch.all(torch.isfinite(residual)):
        raise ValueError("residual contains non-finite values")
    squeeze = residual.dim() == 3
    r = residual[None] if squeeze else residual
    b, c, h, w = r.shape
    pad = n_win // 2
    padded = F.pad(r, (pad, pad, pad, pad), mode="reflect")
    windows = F.unfold(padded, n_win).view(b, c, n_win * n_win, h * w)
    # centring on the window's middle pixel keeps locally constant residuals exactly zero
    windows = windows - r.reshape(b, c, 1, h * w)
    mu = windows.mean(dim=2, keepdim=True)
    var = ((windows - mu) ** 2).mean(dim=2).view(b, c, h, w)
    out = var.mean(dim=1)
    return out[0] if squeeze else out


def _grad_mag(x: torch.Tensor) -> torch.Tensor:
    gx = F.pad(x[..., :, 1:] - x[..., :, :-1], (0, 1, 0, 0))
    gy = F.pad(x[..., 1:, :] - x[..., :-1, :], (0, 0, 0, 1))
    return torch.sqrt(gx * gx + gy * gy + 1e-12)


def gradient_similarity_loss(x: torch.Tensor, y: torch.Tensor, scales: int = 3, c: float = 0.0026) -> torch.Tensor:
    """Multi-scale gradient-magnitude similarity, ``mean(1 - GMS)`` summed over scales."""
    total = x.new_zeros(())
    for s in range(scales):
        if s:
            x = F.avg_pool2d(x, 2)
            y = F.avg_pool2d(y, 2)
        gx, gy = _grad_mag(x), _grad_mag(y)
        gms = (2.0 * gx * gy + c) / (gx * gx + gy * gy + c)
        total = total + (1.0 - gms).mean()
    return total / scales


@dataclass
class PixelLossAux:
    discriminator: nn.Module | None = None
    perceptual: Callable[[torch.Tensor, torch.Tensor], torch.Tensor] = gradient_similarity_loss
    n_win: int = 7
    alpha: float = 1.0
    beta: float = 0.5
    # parameter used to balance the adversarial gradient against the others; None disables balancing
    balance_param: nn.Parameter | None = None
    extra: dict = field(default_factory=dict)


def adversarial_balance(base: torch.Tensor, adv: torch.Tensor, param: nn.Parameter, max_weight: float = 1e4) -> torch.Tensor:
    """``|grad base| / |grad adv|`` at ``param``, detached, so the adversarial term cannot swamp reconstruction."""
    g_base = torch.autograd.grad(base, param, retain_graph=True)[0]
    g_adv = torch.autograd.grad(adv, param, retain_graph=True)[0]
    return (g_base.norm() / (g_adv.norm() + 1e-4)).clamp(0.0, max_weight).detach()


def reconstruction_loss(x: torch.Tensor, x_rec: torch.Tensor, n_win: int = 7) -> torch.Tensor:
    """Artifact-weighted L1: ``mean((1 + M / max M) * |x - x_rec|)`` with M detached."""
    delta = (x - x_rec).detach()
    m = artifact_map(delta, n_win)
    peak = m.flatten(1).amax(dim=1).clamp_min(1e-12)[:, None, None]
    weight = 1.0 + m / peak
    return (weight[:, None] * (x - x_rec).abs()).mean()


def pixel_loss(x: torch.Tensor, x_rec: torch.Tensor, aux: PixelLossAux | None = None) -> tuple[torch.Tensor, dict[str, float]]:
    """Total pixel objective ``rec + alpha * w * dis + beta * per`` and its components.

    ``w`` is 1 unless ``aux.balance_param`` is set, in which case it is the
    gradient-norm ratio from :func:`adversarial_balance`.
    """
    aux = aux or PixelLossAux()
    if x.shape != x_rec.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_rec.shape)}")
    if not (torch.all(torch.isfinite(x)) and torch.all(torch.isfinite(x_rec))):
        raise ValueError("non-finite input to pixel_loss")
    rec = reconstruction_loss(x, x_rec, aux.n_win)
    per = aux.perceptual(x, x_rec)
    weight = x.new_ones(())
    if aux.discriminator is not None:
        dis = F.relu(1.0 - aux.discriminator(x_rec)).mean()
        if aux.balance_param is not None and dis.requires_grad:
            weight = adversarial_balance(rec + aux.beta * per, dis, aux.balance_param)
    else:
        dis = x.new_zeros(())
    total = rec + aux.alpha * weight * dis + aux.beta * per
    parts = {"rec": rec.item(), "dis": dis.item(), "per": per.item(), "total": total.item()}
    if aux.balance_param is not None:
        parts["adv_weight"] = weight.item()
    return total, parts


def discriminator_loss(disc: nn.Module, x: torch.Tensor, x_rec: torch.Tensor) -> torch.Tensor:
    return F.relu(1.0 - disc(x)).mean() + F.relu(1.0 + disc(x_rec.detach())).mean()
