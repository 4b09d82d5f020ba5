"""Two-stage training and checkpoint handling.

Pixel stage (``train_pixel``):
  A. plain autoencoder, no luminance guidance (the "pretrained" compression model)
  B. encoder/decoder frozen; luminance encoder and decoder injections trained

Latent stage (``train_latent``):
  1. vanilla-convolution denoiser trained on scarce descriptions without luminance
  2. convolutions extended with zero-initialized luminance channels; the base
     kernels stay frozen while the rest trains on any-level descriptions with
     scarce dropout, plus a grounding BCE tying color-word attention to instance masks
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from pathlib import Path

import numpy as np
import torch

from .compression import (
    CompressionConfig,
    PatchDiscriminator,
    PixelLossAux,
    PixelModel,
    discriminator_loss,
    pixel_loss,
)
from .config import RunConfig
from .denoiser import Denoiser, DenoiserConfig, frozen_tensors, param_checksum
from .diffusion import LatentBatch, NoiseSchedule, latent_loss
from .instsample import downsample_mask, grounding_loss
from .synthdata import SCARCE_TEXT, SceneSample, read_manifest
from .textenc import TextEncoder, tokenize, tokenize_batch

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
PIXEL_CKPT = "pixel.pt"
LATENT_CKPT = "latent.pt"


class PrerequisiteError(RuntimeError):
    """A training stage was started before the stage it depends on."""


def file_sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---- data ---------------------------------------------------------------------


def scenes_to_tensors(samples: list[SceneSample]) -> tuple[torch.Tensor, torch.Tensor]:
    images = torch.tensor(np.stack([s.image for s in samples]), dtype=torch.float32).permute(0, 3, 1, 2)
    grays = torch.tensor(np.stack([s.gray for s in samples]), dtype=torch.float32)[:, None]
    return images.contiguous(), grays.contiguous()


def load_split(cfg: RunConfig, split: str) -> list[SceneSample]:
    return read_manifest(Path(cfg.data_dir) / split)


def _batches(n: int, size: int, gen: torch.Generator):
    perm = torch.randperm(n, generator=gen)
    for i in range(0, n, size):
        yield perm[i : i + size]


# ---- checkpoints -------------------------------------------------------------


def compression_config(cfg: RunConfig) -> CompressionConfig:
    return CompressionConfig(
        channels=tuple(cfg.ae_channels), latent_channels=cfg.latent_channels, n_win=cfg.n_win,
        alpha=cfg.alpha, beta=cfg.beta,
    )


def denoiser_config(cfg: RunConfig) -> DenoiserConfig:
    return DenoiserConfig(
        latent_channels=cfg.latent_channels, channels=tuple(cfg.den_channels), n_ext=tuple(cfg.n_ext),
        heads=cfg.heads, text_dim=cfg.d_text, cec_convs=cfg.cec_convs, lum_adapter_layers=cfg.lum_adapter_layers,
    )


def save_pixel(path: Path, model: PixelModel, disc: PatchDiscriminator, history: dict) -> None:
    torch.save(
        {
            "format_version": FORMAT_VERSION,
            "kind": "pixel",
            "config": vars(model.config),
            "model": model.state_dict(),
            "discriminator": disc.state_dict(),
            "history": history,
        },
        path,
    )


def _read_ckpt(path: Path, kind: str) -> dict:
    if not path.exists():
        stage = "train-pixel" if kind == "pixel" else "train-latent"
        raise PrerequisiteError(f"missing {kind} checkpoint {path}; run `lcad {stage}` first")
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("format_version") != FORMAT_VERSION or ckpt.get("kind") != kind:
        raise PrerequisiteError(
            f"{path}: expected a version-{FORMAT_VERSION} {kind} checkpoint, "
            f"found version {ckpt.get('format_version')!r} kind {ckpt.get('kind')!r}"
        )
    return ckpt


def load_pixel(path: Path) -> PixelModel:
    ckpt = _read_ckpt(Path(path), "pixel")
    c = ckpt["config"]
    model = PixelModel(CompressionConfig(**{**c, "channels": tuple(c["channels"]), "disc_channels": tuple(c["disc_channels"])}))
    model.load_state_dict(ckpt["model"])
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def save_latent(path: Path, text_enc: TextEncoder, den: Denoiser, lum_channels, history: dict) -> None:
    frozen = {name for name, _ in frozen_tensors(den)}
    state = den.state_dict()
    torch.save(
        {
            "format_version": FORMAT_VERSION,
            "kind": "latent",
            "denoiser_config": vars(den.config),
            "extended": den.extended,
            "lum_channels": list(lum_channels),
            "vocab": list(text_enc.vocab.tokens),
            "text_config": {"n_tok": text_enc.n_tok, "dim": text_enc.dim, "heads": text_enc.heads},
            "text_encoder": text_enc.state_dict(),
            "frozen": {k: v for k, v in state.items() if k in frozen},
            "trainable": {k: v for k, v in state.items() if k not in frozen},
            "history": history,
        },
        path,
    )


def load_latent(path: Path) -> tuple[TextEncoder, Denoiser, dict]:
    from .textenc import Vocabulary

    ckpt = _read_ckpt(Path(path), "latent")
    dc = ckpt["denoiser_config"]
    den = Denoiser(DenoiserConfig(**{**dc, "channels": tuple(dc["channels"]), "n_ext": tuple(dc["n_ext"])}))
    if ckpt["extended"]:
        den.extend_channels(tuple(ckpt["lum_channels"]))
    den.load_state_dict({**ckpt["frozen"], **ckpt["trainable"]})
    te = TextEncoder(Vocabulary(tuple(ckpt["vocab"])), **ckpt["text_config"])
    te.load_state_dict(ckpt["text_encoder"])
    den.eval()
    te.eval()
    for p in list(den.parameters()) + list(te.parameters()):
        p.requires_grad_(False)
    return te, den, ckpt["history"]


# ---- pixel stage ---------------------------------------------------------------


def _pixel_epochs(model, disc, params, balance, images, grays, cfg, epochs, use_pyramid, gen, tag, history):
    opt = torch.optim.Adam(params, lr=cfg.lr_pixel, betas=(0.5, 0.9))
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr_disc, betas=(0.5, 0.9))
    for epoch in range(epochs):
        sums: dict[str, float] = {}
        n = 0
        t0 = time.time()
        use_disc = epoch >= cfg.disc_start_epoch
        aux = PixelLossAux(
            disc if use_disc else None, n_win=cfg.n_win, alpha=cfg.alpha, beta=cfg.beta, balance_param=balance
        )
        for idx in _batches(len(images), cfg.pixel_batch_size, gen):
            x = images[idx]
            z = model.encode(x)
            pyr = model.luminance_features(grays[idx]) if use_pyramid else None
            x_rec = model.decode(z, pyr)
            loss, parts = pixel_loss(x, x_rec, aux)
            opt.zero_grad()
            loss.backward()
            opt.step()
            if use_disc:
                d_loss = discriminator_loss(disc, x, x_rec)
                opt_d.zero_grad()
                d_loss.backward()
                opt_d.step()
                parts["disc"] = d_loss.item()
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            n += 1
        means = {k: v / n for k, v in sums.items()}
        history.setdefault(tag, []).append(means)
        log.info("pixel %s epoch %d/%d %s (%.0fs)", tag, epoch + 1, epochs,
                 " ".join(f"{k}={v:.4f}" for k, v in means.items()), time.time() - t0)


@torch.no_grad()
def latent_statistics(model: PixelModel, images: torch.Tensor, batch: int = 128) -> tuple[torch.Tensor, torch.Tensor]:
    zs = torch.cat([model.encode(images[i : i + batch]) for i in range(0, len(images), batch)])
    return zs.mean(dim=(0, 2, 3)), zs.std(dim=(0, 2, 3))


def train_pixel(cfg: RunConfig) -> Path:
    run = Path(cfg.run_dir)
    run.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    images, grays = scenes_to_tensors(load_split(cfg, "train"))

    model = PixelModel(compression_config(cfg))
    disc = PatchDiscriminator(model.config.disc_channels)
    history: dict = {}

    ae_params = list(model.encoder.parameters()) + [
        p for n, p in model.decoder.named_parameters() if not n.startswith("inject")
    ]
    _pixel_epochs(
        model, disc, ae_params, model.decoder.conv_out.weight, images, grays, cfg,
        cfg.pixel_ae_epochs, False, gen, "autoencoder", history,
    )

    model.eval()
    mean, std = latent_statistics(model, images)
    model.latent_mean.copy_(mean)
    model.latent_std.copy_(std.clamp_min(1e-6))

    for p in ae_params:
        p.requires_grad_(False)
    lic_params = list(model.lum_encoder.parameters()) + list(model.decoder.inject.parameters())
    _pixel_epochs(
        model, disc, lic_params, model.decoder.inject[-1].weight, images, grays, cfg,
        cfg.pixel_lic_epochs, True, gen, "luminance", history,
    )

    path = run / PIXEL_CKPT
    save_pixel(path, model, disc, history)
    (run / "pixel_log.json").write_text(json.dumps(history, indent=1), encoding="utf-8")
    return path


# ---- latent stage --------------------------------------------------------------


def _set_scope(den: Denoiser, text_enc: TextEncoder, scope: str) -> list[torch.nn.Parameter]:
    for p in den.parameters():
        p.requires_grad_(scope == "all")
    if scope == "text_ext":
        for block in den.attn_blocks:
            for p in block.parameters():
                p.requires_grad_(True)
        for p in den.lum_proj.parameters():
            p.requires_grad_(True)
        for k in den.cec_kernels():
            k.weight_ext.requires_grad_(True)
    for p in text_enc.parameters():
        p.requires_grad_(True)
    return [p for p in list(den.parameters()) + list(text_enc.parameters()) if p.requires_grad]


class GroundingTargets:
    """Instance masks of the training split, area-pooled once per attention resolution."""

    def __init__(self, samples: list[SceneSample], min_size: int):
        self.samples = samples
        self.min_size = min_size
        self._pooled: dict[tuple[int, int], torch.Tensor] = {}

    def pooled(self, size: tuple[int, int]) -> torch.Tensor:
        """``(N, max instances, h*w)``; missing instances are zero rows."""
        if size not in self._pooled:
            n_max = max(len(s.instances) for s in self.samples)
            out = torch.zeros(len(self.samples), n_max, size[0] * size[1])
            for i, s in enumerate(self.samples):
                for j, inst in enumerate(s.instances):
                    out[i, j] = downsample_mask(inst.mask, size).flatten().float()
            self._pooled[size] = out
        return self._pooled[size]

    def loss(self, maps, idx: torch.Tensor, levels: list[str], replaced: torch.Tensor) -> torch.Tensor | None:
        """Mean grounding BCE over refined blocks; None when no sample in the batch keeps a binding."""
        rows, tokens, scenes, insts = [], [], [], []
        for r, (i, lvl, dropped) in enumerate(zip(idx.tolist(), levels, replaced.tolist())):
            if dropped:
                continue
            for pos, inst in self.samples[i].descriptions[lvl].bindings:
                rows.append(r)
                tokens.append(pos)
                scenes.append(i)
                insts.append(inst)
        blocks = [l for l, size in enumerate(maps.sizes) if min(size) >= self.min_size]
        if not rows or not blocks:
            return None
        rows_t, tokens_t = torch.tensor(rows), torch.tensor(tokens)
        terms = [
            grounding_loss(maps.raw[l], rows_t, tokens_t, self.pooled(maps.sizes[l])[scenes, insts])
            for l in blocks
        ]
        return torch.stack(terms).mean()


def train_latent(cfg: RunConfig) -> Path:
    run = Path(cfg.run_dir)
    pixel_path = run / PIXEL_CKPT
    if not pixel_path.exists():
        raise PrerequisiteError(f"pixel-stage checkpoint {pixel_path} not found; run `lcad train-pixel` first")
    pixel_hash_before = file_sha256(pixel_path)
    pixel = load_pixel(pixel_path)
    pixel_params_before = param_checksum(sorted(pixel.state_dict().items()))

    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    samples = load_split(cfg, "train")
    images, grays = scenes_to_tensors(samples)
    with torch.no_grad():
        z0 = torch.cat([pixel.standardize(pixel.encode(images[i : i + 128])) for i in range(0, len(images), 128)])
    te = TextEncoder(n_tok=cfg.n_tok, dim=cfg.d_text)
    tok = {
        lvl: tokenize_batch([s.descriptions[lvl].text for s in samples], te.vocab, cfg.n_tok)
        for lvl in ("complete", "partial")
    }
    scarce = torch.tensor(tokenize(SCARCE_TEXT, te.vocab, cfg.n_tok))
    sched = NoiseSchedule(cfg.T)
    den = Denoiser(denoiser_config(cfg))
    history: dict = {"prior": [], "latent": []}
    grounding = GroundingTargets(samples, cfg.refine_min_size)

    def run_epochs(tag, epochs, params, any_level):
        opt = torch.optim.Adam(params, lr=cfg.lr_latent)
        for epoch in range(epochs):
            t0 = time.time()
            total, total_ground, n = 0.0, 0.0, 0
            for idx in _batches(len(samples), cfg.batch_size, gen):
                b = len(idx)
                if any_level:
                    pick = torch.rand(b, generator=gen) < 0.5
                    tokens = torch.where(pick[:, None], tok["complete"][idx], tok["partial"][idx])
                    levels = ["complete" if p else "partial" for p in pick.tolist()]
                    with torch.no_grad():
                        pyr = pixel.luminance_features(grays[idx])
                    batch = LatentBatch(z0[idx], tokens, levels, pyr)
                else:
                    batch = LatentBatch(z0[idx], scarce[None].expand(b, -1), ["scarce"] * b, None)
                stats: dict = {}
                loss = latent_loss(batch, den, te, scarce, sched, gen, cfg.drop_prob, stats)
                total += loss.item()
                if any_level and cfg.grounding_weight > 0:
                    ground = grounding.loss(stats["maps"], idx, batch.levels, stats["replaced"])
                    if ground is not None:
                        total_ground += ground.item()
                        loss = loss + cfg.grounding_weight * ground
                opt.zero_grad()
                loss.backward()
                opt.step()
                n += 1
            history[tag].append(total / n)
            log.info(
                "latent %s epoch %d/%d loss=%.4f grounding=%.4f (%.0fs)",
                tag, epoch + 1, epochs, total / n, total_ground / n, time.time() - t0,
            )

    den.train()
    run_epochs("prior", cfg.prior_epochs, list(den.parameters()) + list(te.parameters()), any_level=False)

    den.extend_channels(pixel.lum_channels)
    params = _set_scope(den, te, cfg.latent_train_scope)
    frozen_before = param_checksum(frozen_tensors(den))
    run_epochs("latent", cfg.latent_epochs, params, any_level=True)
    frozen_after = param_checksum(frozen_tensors(den))

    history["audit"] = {
        "frozen_checksum_before": frozen_before,
        "frozen_checksum_after": frozen_after,
        "pixel_params_before": pixel_params_before,
        "pixel_params_after": param_checksum(sorted(pixel.state_dict().items())),
        "pixel_file_before": pixel_hash_before,
        "pixel_file_after": file_sha256(pixel_path),
    }
    den.eval()
    path = run / LATENT_CKPT
    save_latent(path, te, den, pixel.lum_channels, history)
    (run / "latent_log.json").write_text(json.dumps(history, indent=1), encoding="utf-8")
    return path
