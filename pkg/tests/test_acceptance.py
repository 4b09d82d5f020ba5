"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

Criteria 6 to 8 need the default-config run. It lives in ``$LCAD_ACCEPTANCE_DIR``
(default ``<repo>/acceptance``) and is trained there on first use, which
takes several CPU hours. The benchmark is re-run whenever ``latent.pt`` is
newer than ``eval/benchmark.json`` or the evaluation config has changed.
"""

import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from conftest import ACCEPTANCE_LINES, LUM_CHANNELS, random_pyramid, random_text, randomize, small_denoiser
from test_compression import brute_variance_map
from test_denoiser import nested_loop_cec
from test_diffusion import _run_ddim
from test_instsample import _masks, _setup, reference_plain, reference_self_override
from test_metrics import brute_ssim, scalar_colorfulness, scalar_psnr

from lcad.cli import cmd_evaluate, cmd_gen_data, cmd_train_latent, cmd_train_pixel
from lcad.compression import artifact_map
from lcad.config import ABLATIONS, RunConfig
from lcad.denoiser import ChannelExtendedConv, Denoiser, DenoiserConfig, cec_forward
from lcad.diffusion import NoiseSchedule, cfg_predict, forward_diffuse, guided_eps
from lcad.imaging import lab_to_rgb
from lcad.instsample import RefineConfig, bce, bce_grad, refine_attention, sample_instance_aware
from lcad.metrics import colorfulness, psnr, ssim, ssim_gray
from lcad.training import LATENT_CKPT, PIXEL_CKPT, file_sha256, load_latent

SCHED = NoiseSchedule(1000)
REPO = Path(__file__).resolve().parents[1]


class Criterion:
    """Collects named checks; ``finish`` records one summary line and fails the test if any check failed."""

    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.failures: list[str] = []
        self.notes: list[str] = []
        self.t0 = time.time()

    def check(self, ok: bool, what: str) -> None:
        self.notes.append(what)
        if not ok:
            self.failures.append(what)

    def finish(self, budget_s: float | None = None) -> None:
        elapsed = time.time() - self.t0
        if budget_s is not None:
            self.check(elapsed < budget_s, f"runtime {elapsed:.1f}s < {budget_s:.0f}s")
        status = "FAIL" if self.failures else "PASS"
        detail = "; ".join(self.failures or self.notes)
        line = f"[{status}] criterion {self.number}: {self.title} ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert not self.failures, line


def test_criterion_1_zero_init_equivalence():
    c = Criterion(1, "zero-init extension reproduces the pre-extension denoiser")
    worst = 0.0
    for seed, cfg, dtype in [(0, None, torch.float64), (1, DenoiserConfig(), torch.float32)]:
        if cfg is None:
            base = small_denoiser(seed=seed)
            lum = LUM_CHANNELS
        else:
            torch.manual_seed(seed)
            base = Denoiser(cfg)
            randomize(base, seed, std=0.05)
            lum = (32, 64, 64)
        ext = Denoiser(base.config).to(dtype)
        ext.load_state_dict(base.state_dict())
        ext.extend_channels(lum)
        ext.to(dtype)
        randomize(ext.lum_proj, seed=seed + 10, std=1.0)
        g = torch.Generator().manual_seed(seed)
        z = torch.randn(3, 4, 16, 16, generator=g, dtype=dtype)
        t = torch.tensor([0, 500, 999])
        text, pad = random_text(3, seed=seed, dtype=dtype)
        pyr = [torch.randn(3, ch, s, s, generator=g, dtype=dtype) for ch, s in zip(lum, (64, 32, 16))]
        with torch.no_grad():
            ref, _ = base.to(dtype)(z, t, text, pad)
            out, _ = ext(z, t, text, pad, pyr)
        worst = max(worst, (out - ref).abs().max().item())
    c.check(worst <= 1e-6, f"max |diff| {worst:.2e} <= 1e-6")
    c.finish(60)


def test_criterion_2_artifact_map_oracle():
    c = Criterion(2, "artifact map equals brute-force windowed variance")
    g = torch.Generator().manual_seed(2)
    worst = 0.0
    for _ in range(100):
        r = torch.randn(3, 16, 16, generator=g, dtype=torch.float64)
        worst = max(worst, float(np.abs(artifact_map(r, 7).numpy() - brute_variance_map(r.numpy(), 7)).max()))
    c.check(worst < 1e-10, f"100 residuals, max |diff| {worst:.2e} < 1e-10")
    c.finish(60)


def test_criterion_3_cec_oracle():
    c = Criterion(3, "channel-extended conv equals nested-loop evaluation")
    g = torch.Generator().manual_seed(3)
    worst = 0.0
    for _ in range(6):
        n_fix, n_ext, c_out = (int(v) for v in torch.randint(1, 5, (3,), generator=g))
        k = int(torch.tensor([1, 3, 5])[torch.randint(0, 3, (1,), generator=g)])
        h, w = (int(v) for v in torch.randint(4, 10, (2,), generator=g))
        kern = ChannelExtendedConv(torch.randn(c_out, n_fix, k, k, generator=g, dtype=torch.float64),
                                   torch.randn(c_out, generator=g, dtype=torch.float64), n_ext)
        with torch.no_grad():
            kern.weight_ext.copy_(torch.randn(c_out, n_ext, k, k, generator=g, dtype=torch.float64))
        f = torch.randn(1, n_fix, h, w, generator=g, dtype=torch.float64)
        y = torch.randn(1, n_ext, h, w, generator=g, dtype=torch.float64)
        ours = cec_forward(f, y, kern)[0].detach().numpy()
        ref = nested_loop_cec(f[0], y[0], kern.weight_fix, kern.weight_ext.detach(), kern.bias)
        worst = max(worst, float(np.abs(ours - ref).max()))
    c.check(worst < 1e-6, f"6 random shapes, max |diff| {worst:.2e} < 1e-6")
    c.finish(60)


def test_criterion_4_diffusion_algebra():
    c = Criterion(4, "diffusion algebra")
    g = torch.Generator().manual_seed(4)
    z0 = torch.randn(64, generator=g, dtype=torch.float64)
    n = 10_000
    worst_se = 0.0
    for t in (50, 500, 950):
        eps = torch.randn(n, 64, generator=g, dtype=torch.float64)
        energy = forward_diffuse(z0.expand(n, 64), torch.full((n,), t), eps, SCHED).pow(2).sum(1)
        ab = SCHED.alpha_bar[t].item()
        expected = ab * z0.pow(2).sum().item() + (1 - ab) * 64
        worst_se = max(worst_se, abs(energy.mean().item() - expected) / (energy.std().item() / math.sqrt(n)))
    c.check(worst_se <= 3, f"energy identity within {worst_se:.2f} SE <= 3")

    target = torch.randn(2, 4, 16, 16, generator=g, dtype=torch.float64)
    err = (_run_ddim(target, 50) - target).abs().max().item()
    c.check(err < 1e-5, f"oracle DDIM error {err:.1e} < 1e-5")

    den = small_denoiser(seed=4)
    z = torch.randn(2, 4, 16, 16, generator=g, dtype=torch.float64)
    tt = torch.tensor([100, 700])
    cond, scarce = random_text(2, seed=1), random_text(2, seed=2)
    e_cond, _ = den(z, tt, *cond)
    e_scarce, _ = den(z, tt, *scarce)
    one, _ = cfg_predict(den, z, tt, cond, scarce, None, 1.0)
    zero, _ = cfg_predict(den, z, tt, cond, scarce, None, 0.0)
    a, b = torch.randn(3, 5, generator=g), torch.randn(3, 5, generator=g)
    ok = (torch.allclose(one, e_cond, atol=1e-12) and torch.allclose(zero, e_scarce, atol=1e-12)
          and torch.equal(guided_eps(a, b, 1.0), a) and torch.equal(guided_eps(a, b, 0.0), b))
    c.check(ok, "guidance identities at scale 0 and 1")
    c.finish(120)


def test_criterion_5_refinement_calculus():
    c = Criterion(5, "refinement calculus")
    g = torch.Generator().manual_seed(5)
    m = torch.rand(8, 8, generator=g, dtype=torch.float64) * 0.9 + 0.05
    target = torch.rand(8, 8, generator=g, dtype=torch.float64)
    grad = bce_grad(m, target)
    h, worst = 1e-5, 0.0
    for i in range(8):
        for j in range(8):
            mp, mm = m.clone(), m.clone()
            mp[i, j] += h
            mm[i, j] -= h
            fd = (bce(mp, target) - bce(mm, target)).item() / (2 * h)
            worst = max(worst, abs(fd - grad[i, j].item()) / abs(fd))
    c.check(worst < 1e-4, f"BCE gradient rel. error {worst:.1e} < 1e-4")

    descent = True
    for seed in range(20):
        gg = torch.Generator().manual_seed(100 + seed)
        raw = torch.randn(4, 8, 8, generator=gg, dtype=torch.float64) * 3
        tgt = (torch.rand(4, 8, 8, generator=gg) > 0.5).double()
        for lam in (0.5, 20.0, 1e4):
            ref = refine_attention(raw, tgt, RefineConfig(lam=lam))
            descent &= bool(bce(ref, tgt) <= bce(torch.sigmoid(raw), tgt))
    c.check(descent, "backtracked step never increases BCE")

    den, z_T, cond, scarce, pyr = _setup()
    empty = sample_instance_aware(den, z_T, cond, scarce, [[], []], pyr, SCHED, 3.0, steps=6)
    c.check(torch.equal(empty, reference_plain(den, z_T, cond, scarce, pyr, 3.0, 6)), "empty masks bit-identical to plain sampling")
    den, z_T, cond, scarce, pyr = _setup(seed=1)
    masks = _masks()
    lam0 = sample_instance_aware(den, z_T, cond, scarce, masks, pyr, SCHED, 3.0, RefineConfig(lam=0.0), steps=5)
    c.check(torch.equal(lam0, reference_self_override(den, z_T, cond, scarce, pyr, 3.0, 5, masks)),
            "lambda=0 bit-identical to the unrefined override path")
    c.finish(120)


def test_criterion_9_metric_oracles():
    c = Criterion(9, "metric oracles")
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(5):
        a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
        worst = max(worst, abs(psnr(a, b) - scalar_psnr(a, b)), abs(colorfulness(a) - scalar_colorfulness(a)))
        x, y = rng.random((13, 14)), rng.random((13, 14))
        worst = max(worst, abs(ssim_gray(x, y) - brute_ssim(x, y)))
    c.check(worst < 1e-9, f"scalar re-implementations agree to {worst:.1e} < 1e-9")
    gray = lab_to_rgb(np.stack([rng.random((16, 16)) * 100, np.zeros((16, 16)), np.zeros((16, 16))], axis=-1))
    gray = np.repeat(gray[..., :1], 3, axis=2)
    c.check(colorfulness(gray) == 0.0, "achromatic colorfulness is 0")
    img = rng.random((24, 24, 3))
    c.check(abs(ssim(img, img) - 1.0) < 1e-12, "self-SSIM is 1")
    c.finish()


# ---- default-config run -----------------------------------------------------------


@pytest.fixture(scope="module")
def default_run():
    root = Path(os.environ.get("LCAD_ACCEPTANCE_DIR", REPO / "acceptance")).resolve()
    cfg = RunConfig(data_dir=str(root / "data"), run_dir=str(root / "runs" / "default"))
    run = Path(cfg.run_dir)
    if not (Path(cfg.data_dir) / "eval" / "manifest.json").exists():
        cmd_gen_data(cfg)
    if not (run / PIXEL_CKPT).exists():
        cmd_train_pixel(cfg)
    if not (run / LATENT_CKPT).exists():
        cmd_train_latent(cfg)
    bench_path = run / "eval" / "benchmark.json"
    eval_cfg = cfg.replace(ablate=ABLATIONS)
    stored_cfg = run / "eval" / "evaluate.config"
    if (
        not bench_path.exists()
        or bench_path.stat().st_mtime < (run / LATENT_CKPT).stat().st_mtime
        or not stored_cfg.exists()
        or stored_cfg.read_text(encoding="utf-8") != eval_cfg.to_text()
    ):
        cmd_evaluate(eval_cfg, None, None, run / "eval")
    return cfg, json.loads(bench_path.read_text())


def _seconds(run: Path, command: str) -> float:
    meta = run / f"{command}.meta.json"
    return json.loads(meta.read_text()).get("seconds", 0.0) if meta.exists() else 0.0


@pytest.mark.slow
def test_criterion_6_frozen_weight_audit(default_run):
    cfg, _ = default_run
    run = Path(cfg.run_dir)
    c = Criterion(6, "latent training leaves frozen and pixel-stage weights unchanged")
    _, _, history = load_latent(run / LATENT_CKPT)
    audit = history["audit"]
    c.check(audit["frozen_checksum_before"] == audit["frozen_checksum_after"], "frozen denoiser weights checksum equal")
    c.check(audit["pixel_params_before"] == audit["pixel_params_after"], "pixel-stage parameters checksum equal")
    c.check(audit["pixel_file_before"] == audit["pixel_file_after"] == file_sha256(run / PIXEL_CKPT), "pixel checkpoint bytes unchanged")
    c.finish()


@pytest.mark.slow
def test_criterion_7_desk_scale_end_to_end(default_run):
    cfg, bench = default_run
    c = Criterion(7, "desk-scale end-to-end on the 200-scene eval split")
    acc = bench["variants"]["full"]["instance_color_accuracy"]
    acc_off = bench["variants"]["no_iss"]["instance_color_accuracy"]
    rec = bench["reconstruction_psnr"]
    gain = rec["with_pyramid"] - rec["zero_pyramid"]
    c.check(acc >= 0.80, f"(a) accuracy {acc:.3f} >= 0.80")
    c.check(acc - acc_off >= 0.10, f"(b) ISS gain {acc - acc_off:+.3f} >= 0.10")
    c.check(gain >= 1.0, f"(c) pyramid PSNR gain {gain:+.2f} dB >= 1")
    c.check(bench["luminance_psnr"] >= 25.0, f"(d) L-channel PSNR {bench['luminance_psnr']:.2f} >= 25")
    c.check(bench["scarce_colorfulness"] >= 15.0, f"(e) scarce colorfulness {bench['scarce_colorfulness']:.1f} >= 15")
    hours = (_seconds(Path(cfg.run_dir), "train-pixel") + _seconds(Path(cfg.run_dir), "train-latent")) / 3600
    c.check(hours <= 8.0, f"training {hours:.2f} h <= 8 h CPU")
    c.finish()


@pytest.mark.slow
def test_criterion_8_mask_robustness(default_run):
    _, bench = default_run
    c = Criterion(8, "2-px mask dilation barely moves instance color accuracy")
    delta = abs(bench["dilated_accuracy"] - bench["variants"]["full"]["instance_color_accuracy"])
    c.check(delta < 0.1, f"|accuracy change| {delta:.3f} < 0.1")
    c.finish()
