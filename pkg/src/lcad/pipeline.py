"""End-to-end colorization: gray image + description (+ optional masks) to RGB."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .compression import PixelModel, zero_pyramid
from .config import RunConfig
from .denoiser import Denoiser
from .diffusion import NoiseSchedule
from .instsample import ContourMask, RefineConfig, sample_instance_aware
from .synthdata import SCARCE_TEXT
from .textenc import TextEncoder, tokenize_batch
from .training import LATENT_CKPT, PIXEL_CKPT, load_latent, load_pixel

log = logging.getLogger(__name__)


@dataclass
class ColorizeRequest:
    gray: np.ndarray  # (H, W) Lab L in [0, 100]
    text: str
    masks: list[ContourMask]
    seed: int


class Colorizer:
    def __init__(self, pixel: PixelModel, text_encoder: TextEncoder, denoiser: Denoiser, cfg: RunConfig):
        self.pixel = pixel
        self.text_encoder = text_encoder
        self.denoiser = denoiser
        self.cfg = cfg
        self.sched = NoiseSchedule(cfg.T)

    @classmethod
    def load(cls, cfg: RunConfig) -> "Colorizer":
        run = Path(cfg.run_dir)
        pixel = load_pixel(run / PIXEL_CKPT)
        te, den, _ = load_latent(run / LATENT_CKPT)
        return cls(pixel, te, den, cfg)

    @property
    def refine_config(self) -> RefineConfig:
        return RefineConfig(
            lam=self.cfg.lam, min_size=self.cfg.refine_min_size,
            inner_iters=self.cfg.inner_iters, backtrack=self.cfg.backtrack,
        )

    def initial_noise(self, seeds: list[int], shape: tuple[int, int]) -> torch.Tensor:
        """Per-sample noise so results do not depend on batch composition."""
        f = self.pixel.config.factor
        c = self.pixel.config.latent_channels
        return torch.stack([
            torch.randn(c, shape[0] // f, shape[1] // f, generator=torch.Generator().manual_seed(int(s)))
            for s in seeds
        ])

    @torch.no_grad()
    def colorize(self, requests: list[ColorizeRequest], ablate: tuple[str, ...] = ()) -> np.ndarray:
        """Returns ``(B, H, W, 3)`` RGB in ``[0, 1]``.

        ``no_lic`` decodes with a zeroed luminance pyramid, ``no_slr`` feeds no
        luminance into the denoiser's extension channels, ``no_iss`` ignores
        the masks and samples with plain guided DDIM.
        """
        if not requests:
            return np.zeros((0, 0, 0, 3))
        gray = torch.tensor(np.stack([r.gray for r in requests]), dtype=torch.float32)[:, None]
        pyramid = self.pixel.luminance_features(gray)
        n_tok = self.text_encoder.n_tok
        vocab = self.text_encoder.vocab
        y_cond = self.text_encoder(tokenize_batch([r.text for r in requests], vocab, n_tok))
        y_scarce = self.text_encoder(tokenize_batch([SCARCE_TEXT] * len(requests), vocab, n_tok))
        masks = [[] if "no_iss" in ablate else list(r.masks) for r in requests]
        z_T = self.initial_noise([r.seed for r in requests], tuple(gray.shape[-2:]))
        z0 = sample_instance_aware(
            self.denoiser, z_T, y_cond, y_scarce, masks,
            None if "no_slr" in ablate else pyramid,
            self.sched, self.cfg.guidance_scale, self.refine_config, self.cfg.sampling_steps,
        )
        z = self.pixel.unstandardize(z0)
        rgb = self.pixel.decode(z, zero_pyramid(pyramid) if "no_lic" in ablate else pyramid)
        return rgb.clamp(0, 1).permute(0, 2, 3, 1).double().numpy()

    def colorize_batched(self, requests: list[ColorizeRequest], ablate=(), batch: int | None = None) -> np.ndarray:
        batch = batch or self.cfg.eval_batch
        parts = [self.colorize(requests[i : i + batch], ablate) for i in range(0, len(requests), batch)]
        return np.concatenate(parts)
