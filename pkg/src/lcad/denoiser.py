"""Latent noise predictor: a small U-Net with channel-extended convolutions and cross-attention.

Each downsampling stage runs ``[residual block -> cross-attention block]``.
Before :meth:`Denoiser.extend_channels` the residual blocks use vanilla
convolutions; afterwards their stride-1 convolutions become
:class:`ChannelExtendedConv` kernels whose base weights are frozen buffers
and whose extension weights start at zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class DenoiserConfig:
    latent_channels: int = 4
    channels: tuple[int, ...] = (64, 96, 128)
    n_ext: tuple[int, ...] = (32, 32, 32)
    heads: int = 1
    attn_dim: int = 64
    text_dim: int = 64
    time_dim: int = 256
    groups: int = 8
    # stride-1 convolutions per downsampling residual block that become channel-extended (1 or 2)
    cec_convs: int = 1
    # 3x3 conv layers applied to the resized luminance features before the extension channels
    lum_adapter_layers: int = 0

    def __post_init__(self):
        if self.cec_convs not in (1, 2):
            raise ValueError(f"cec_convs must be 1 or 2, got {self.cec_convs}")
        if self.lum_adapter_layers < 0:
            raise ValueError("lum_adapter_layers must be non-negative")


class ChannelExtendedConv(nn.Module):
    """``conv(f; w_fix) + conv(y; w_ext) + bias`` with stride 1 and zero padding.

    ``weight_fix`` is stored as a buffer so no optimizer can touch it.
    """

    def __init__(self, weight_fix: torch.Tensor, bias: torch.Tensor | None, n_ext: int):
        super().__init__()
        c_out, _, k, k2 = weight_fix.shape
        if k != k2 or k % 2 == 0:
            raise ValueError(f"kernel must be square and odd, got {k}x{k2}")
        self.register_buffer("weight_fix", weight_fix.detach().clone())
        self.weight_ext = nn.Parameter(torch.zeros(c_out, n_ext, k, k, dtype=weight_fix.dtype))
        # the pretrained bias belongs to the frozen prior as well
        if bias is not None:
            self.register_buffer("bias", bias.detach().clone())
        else:
            self.bias = None
        self.padding = k // 2

    @classmethod
    def from_conv(cls, conv: nn.Conv2d, n_ext: int) -> "ChannelExtendedConv":
        if conv.stride != (1, 1) or conv.padding_mode != "zeros":
            raise ValueError("only stride-1, zero-padded convolutions can be extended")
        return cls(conv.weight, conv.bias, n_ext)

    @property
    def n_fix(self) -> int:
        return self.weight_fix.shape[1]

    @property
    def n_ext(self) -> int:
        return self.weight_ext.shape[1]

    def forward(self, f: torch.Tensor, y: torch.Tensor | None = None) -> torch.Tensor:
        if f.shape[1] != self.n_fix:
            raise ValueError(f"feature map has {f.shape[1]} channels, kernel expects {self.n_fix}")
        out = F.conv2d(f, self.weight_fix, self.bias, padding=self.padding)
        if y is None:
            return out
        if y.shape[1] != self.n_ext:
            raise ValueError(f"luminance map has {y.shape[1]} channels, kernel expects {self.n_ext}")
        if y.shape[-2:] != f.shape[-2:]:
            raise ValueError(f"spatial mismatch {tuple(f.shape[-2:])} vs {tuple(y.shape[-2:])}")
        return out + F.conv2d(y, self.weight_ext, padding=self.padding)


def cec_forward(f: torch.Tensor, y: torch.Tensor, kernel: ChannelExtendedConv) -> torch.Tensor:
    return kernel(f, y)


def resize_luminance(
    pyramid: list[torch.Tensor], target: tuple[int, int], proj: nn.Module | None = None
) -> torch.Tensor:
    """Pick the pyramid level closest in scale to ``target``, resize bilinearly, project."""
    if not pyramid:
        raise ValueError("empty luminance pyramid")
    finest = pyramid[0].shape[-2:]
    if target[0] > finest[0] or target[1] > finest[1]:
        raise ValueError(f"target {target} exceeds the finest pyramid level {tuple(finest)}")
    level = min(pyramid, key=lambda p: abs(math.log2(p.shape[-2] / target[0])))
    if tuple(level.shape[-2:]) != tuple(target):
        level = F.interpolate(level, size=target, mode="bilinear", align_corners=False)
    return proj(level) if proj is not None else level


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1: nn.Module = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(time_dim, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2: nn.Module = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor, lum: torch.Tensor | None = None) -> torch.Tensor:
        h = F.silu(self.norm1(x))
        if isinstance(self.conv1, ChannelExtendedConv):
            h = self.conv1(h, lum)
        else:
            h = self.conv1(h)
        h = h + self.temb(temb)[:, :, None, None]
        h = F.silu(self.norm2(h))
        if isinstance(self.conv2, ChannelExtendedConv):
            h = self.conv2(h, lum)
        else:
            h = self.conv2(h)
        return self.skip(x) + h


@dataclass
class AttentionMapSet:
    """Per cross-attention block: head-averaged weights and raw scores, ``(B, h*w, N_tok)``."""

    weights: list[torch.Tensor]
    raw: list[torch.Tensor]
    sizes: list[tuple[int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.weights)


@dataclass
class AttentionOverride:
    """Replacement attention values for selected token columns.

    ``values[l]`` is ``(B, h*w, N_tok)``; ``columns[l]`` is a ``(B, N_tok)`` bool
    mask of the columns to replace. ``None`` entries leave a block untouched.
    """

    values: list[torch.Tensor | None]
    columns: list[torch.Tensor | None]

    @classmethod
    def from_maps(cls, maps: AttentionMapSet) -> "AttentionOverride":
        cols = [torch.ones(w.shape[0], w.shape[-1], dtype=torch.bool, device=w.device) for w in maps.weights]
        return cls([w.clone() for w in maps.weights], cols)


def apply_override(w: torch.Tensor, values: torch.Tensor, columns: torch.Tensor) -> torch.Tensor:
    """Substitute ``values`` into per-head weights ``w`` ``(B, heads, Q, N)``.

    Each head is rescaled at the selected columns so the head mean equals
    ``values``; the remaining columns of every row are rescaled to keep the
    row summing to one. Rows with no selected column are returned untouched.
    """
    mean = w.mean(dim=1, keepdim=True)
    vals = values[:, None]
    safe = mean > 1e-12
    replaced = torch.where(safe, w * (vals / torch.where(safe, mean, torch.ones_like(mean))), vals.expand_as(w))
    col = columns[:, None, None, :]
    sel = torch.where(col, replaced, torch.zeros_like(w)).sum(dim=-1, keepdim=True)
    rest = torch.where(col, torch.zeros_like(w), w).sum(dim=-1, keepdim=True)
    scale_rest = torch.where(rest > 0, (1.0 - sel).clamp_min(0.0) / torch.where(rest > 0, rest, torch.ones_like(rest)), torch.ones_like(rest))
    scale_sel = torch.where(sel > 1.0, 1.0 / sel, torch.ones_like(sel))
    any_col = columns.any(dim=-1)[:, None, None, None]
    out = torch.where(col, replaced * scale_sel, w * scale_rest)
    return torch.where(any_col, out, w)


class CrossAttention(nn.Module):
    def __init__(self, channels: int, text_dim: int, attn_dim: int, heads: int, groups: int):
        super().__init__()
        if attn_dim % heads:
            raise ValueError("attention width must be divisible by the head count")
        self.heads = heads
        self.norm = nn.GroupNorm(groups, channels)
        self.to_q = nn.Linear(channels, attn_dim, bias=False)
        self.to_k = nn.Linear(text_dim, attn_dim, bias=False)
        self.to_v = nn.Linear(text_dim, attn_dim, bias=False)
        self.to_out = nn.Linear(attn_dim, channels)
        nn.init.zeros_(self.to_out.weight)
        nn.init.zeros_(self.to_out.bias)

    def forward(
        self,
        x: torch.Tensor,
        text: torch.Tensor,
        pad: torch.Tensor,
        override: tuple[torch.Tensor, torch.Tensor] | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        b, c, h, w = x.shape
        tokens = self.norm(x).flatten(2).transpose(1, 2)
        nh = self.heads
        q = self.to_q(tokens).view(b, h * w, nh, -1).transpose(1, 2)
        k = self.to_k(text).view(b, text.shape[1], nh, -1).transpose(1, 2)
        v = self.to_v(text).view(b, text.shape[1], nh, -1).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        weights = scores.masked_fill(pad[:, None, None, :], -1e9).softmax(dim=-1)
        if override is not None:
            values, columns = override
            if values.shape != (b, h * w, text.shape[1]) or columns.shape != (b, text.shape[1]):
                raise ValueError(
                    f"override shape {tuple(values.shape)}/{tuple(columns.shape)} does not match "
                    f"attention map {(b, h * w, text.shape[1])}"
                )
            weights = apply_override(weights, values.to(weights.dtype), columns)
        out = (weights @ v).transpose(1, 2).reshape(b, h * w, -1)
        out = self.to_out(out).transpose(1, 2).view(b, c, h, w)
        return x + out, weights.mean(dim=1), scores.mean(dim=1)


class Denoiser(nn.Module):
    def __init__(self, config: DenoiserConfig | None = None):
        super().__init__()
        self.config = cfg = config or DenoiserConfig()
        ch = cfg.channels
        self.time_mlp = nn.Sequential(nn.Linear(ch[0], cfg.time_dim), nn.SiLU(), nn.Linear(cfg.time_dim, cfg.time_dim))
        self.conv_in = nn.Conv2d(cfg.latent_channels, ch[0], 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.attn_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        prev = ch[0]
        for i, c in enumerate(ch):
            self.down_blocks.append(ResBlock(prev, c, cfg.time_dim, cfg.groups))
            self.attn_blocks.append(CrossAttention(c, cfg.text_dim, cfg.attn_dim, cfg.heads, cfg.groups))
            self.downsamples.append(nn.Conv2d(c, c, 3, stride=2, padding=1) if i < len(ch) - 1 else nn.Identity())
            prev = c
        self.mid = ResBlock(prev, prev, cfg.time_dim, cfg.groups)
        self.up_blocks = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i in reversed(range(len(ch))):
            self.up_blocks.append(ResBlock(prev + ch[i], ch[i], cfg.time_dim, cfg.groups))
            self.upsamples.append(nn.Conv2d(ch[i], ch[i - 1], 3, padding=1) if i > 0 else nn.Identity())
            prev = ch[i - 1] if i > 0 else ch[0]
        self.norm_out = nn.GroupNorm(cfg.groups, ch[0])
        self.conv_out = nn.Conv2d(ch[0], cfg.latent_channels, 3, padding=1)
        self.lum_proj: nn.ModuleList | None = None
        self.eval_count = 0

    @property
    def extended(self) -> bool:
        return self.lum_proj is not None

    def _lum_projection(self, c_in: int, n_ext: int) -> nn.Module:
        layers: list[nn.Module] = []
        for _ in range(self.config.lum_adapter_layers):
            layers += [nn.Conv2d(c_in, n_ext, 3, padding=1), nn.SiLU()]
            c_in = n_ext
        layers.append(nn.Conv2d(c_in, n_ext, 1))
        return layers[0] if len(layers) == 1 else nn.Sequential(*layers)

    def extend_channels(self, lum_channels: tuple[int, ...]) -> None:
        """Turn the downsampling blocks' stride-1 convs into CECs with zero extension weights.

        ``lum_channels`` lists the luminance pyramid's channel counts, finest first.
        """
        if self.extended:
            raise RuntimeError("denoiser is already channel-extended")
        projs = []
        for block, n_ext in zip(self.down_blocks, self.config.n_ext):
            block.conv1 = ChannelExtendedConv.from_conv(block.conv1, n_ext)
            if self.config.cec_convs == 2:
                block.conv2 = ChannelExtendedConv.from_conv(block.conv2, n_ext)
            projs.append(nn.ModuleList([self._lum_projection(c, n_ext) for c in lum_channels]))
        self.lum_proj = nn.ModuleList(projs)
        self._lum_channels = tuple(lum_channels)

    def cec_kernels(self) -> list[ChannelExtendedConv]:
        return [m for b in self.down_blocks for m in (b.conv1, b.conv2) if isinstance(m, ChannelExtendedConv)]

    def _lum_for(self, stage: int, pyramid: list[torch.Tensor], size: tuple[int, int]) -> torch.Tensor:
        level = min(range(len(pyramid)), key=lambda j: abs(math.log2(pyramid[j].shape[-2] / size[0])))
        return resize_luminance([pyramid[level]], size, self.lum_proj[stage][level])

    def forward(
        self,
        z: torch.Tensor,
        t: torch.Tensor,
        text: torch.Tensor,
        pad: torch.Tensor,
        pyramid: list[torch.Tensor] | None = None,
        override: AttentionOverride | None = None,
    ) -> tuple[torch.Tensor, AttentionMapSet]:
        self.eval_count += 1
        if pyramid is not None and not self.extended:
            raise RuntimeError("luminance features supplied to a denoiser without CEC blocks")
        n_blocks = len(self.attn_blocks)
        if override is not None and (len(override.values) != n_blocks or len(override.columns) != n_blocks):
            raise ValueError(f"override covers {len(override.values)} blocks, network has {n_blocks}")
        t = t.expand(z.shape[0]) if t.dim() == 0 else t
        temb = self.time_mlp(timestep_embedding(t, self.config.channels[0]).to(z.dtype))
        h = self.conv_in(z)
        skips = []
        weights, raws, sizes = [], [], []
        for i, (block, attn, down) in enumerate(zip(self.down_blocks, self.attn_blocks, self.downsamples)):
            lum = self._lum_for(i, pyramid, tuple(h.shape[-2:])) if pyramid is not None else None
            h = block(h, temb, lum)
            ov = None
            if override is not None and override.values[i] is not None:
                ov = (override.values[i], override.columns[i])
            h, w, raw = attn(h, text, pad, ov)
            weights.append(w)
            raws.append(raw)
            sizes.append(tuple(h.shape[-2:]))
            skips.append(h)
            h = down(h)
        h = self.mid(h, temb)
        for block, up in zip(self.up_blocks, self.upsamples):
            h = block(torch.cat([h, skips.pop()], dim=1), temb)
            if not isinstance(up, nn.Identity):
                h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
        eps = self.conv_out(F.silu(self.norm_out(h)))
        return eps, AttentionMapSet(weights, raws, sizes)


def denoise_predict(
    model: Denoiser,
    z_t: torch.Tensor,
    t: torch.Tensor,
    text: torch.Tensor,
    pad: torch.Tensor,
    pyramid: list[torch.Tensor] | None = None,
    override: AttentionOverride | None = None,
) -> tuple[torch.Tensor, AttentionMapSet]:
    return model(z_t, t, text, pad, pyramid, override)


def param_checksum(tensors) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, tensor in tensors:
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def frozen_tensors(model: Denoiser):
    """Every ``w_fix`` buffer plus parameters excluded from stage-2 training."""
    for prefix, module in model.named_modules():
        if isinstance(module, ChannelExtendedConv):
            yield f"{prefix}.weight_fix", module.weight_fix
            if module.bias is not None:
                yield f"{prefix}.bias", module.bias
    for name, p in model.named_parameters():
        if not p.requires_grad:
            yield name, p
