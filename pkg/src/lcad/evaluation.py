"""Benchmark on the synthetic eval split: metric reports, ablation table and sanity probes."""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import binary_dilation

from .compression import zero_pyramid
from .config import ABLATIONS, RunConfig
from .imaging import load_image, rgb_to_lab, save_image
from .instsample import ContourMask
from .metrics import MetricReport, colorfulness, evaluate_image, format_table, psnr
from .pipeline import ColorizeRequest, Colorizer
from .synthdata import SCARCE_TEXT, SceneSample
from .training import scenes_to_tensors

log = logging.getLogger(__name__)

VARIANT_NAMES = {"full": "Ours", "no_lic": "W/o LIC", "no_slr": "W/o SLR", "no_iss": "W/o ISS"}


class MissingResultsError(FileNotFoundError):
    def __init__(self, missing: list[str]):
        self.missing = missing
        super().__init__(f"{len(missing)} result image(s) missing: {', '.join(missing)}")


def contour_masks(sample: SceneSample, level: str = "complete", dilate: int = 0) -> list[ContourMask]:
    """One mask per color binding of the description, optionally dilated by ``dilate`` pixels."""
    desc = sample.descriptions[level]
    out = []
    for pos, idx in desc.bindings:
        mask = sample.instances[idx].mask
        if dilate:
            mask = binary_dilation(mask, iterations=dilate)
        out.append(ContourMask(mask, idx, pos))
    return out


def sample_seed(cfg: RunConfig, index: int) -> int:
    return cfg.seed * 1_000_003 + index


def build_requests(cfg: RunConfig, samples: list[SceneSample], level: str = "complete", dilate: int = 0) -> list[ColorizeRequest]:
    reqs = []
    for i, s in enumerate(samples):
        if level == "scarce":
            reqs.append(ColorizeRequest(s.gray, SCARCE_TEXT, [], sample_seed(cfg, i)))
        else:
            reqs.append(ColorizeRequest(s.gray, s.descriptions[level].text, contour_masks(s, level, dilate), sample_seed(cfg, i)))
    return reqs


def report_for(results: dict[str, np.ndarray], samples: list[SceneSample], level: str = "complete") -> MetricReport:
    report = MetricReport()
    for s in samples:
        desc = s.descriptions.get(level)
        report.add(s.scene_id, evaluate_image(results[s.scene_id], s.image, s.instances, desc))
    return report


def load_results(directory: Path, samples: list[SceneSample]) -> dict[str, np.ndarray]:
    directory = Path(directory)
    missing = [s.scene_id for s in samples if not (directory / f"{s.scene_id}.png").exists()]
    if missing:
        raise MissingResultsError(missing)
    return {s.scene_id: load_image(directory / f"{s.scene_id}.png") for s in samples}


def write_results(directory: Path, samples: list[SceneSample], images: np.ndarray) -> dict[str, np.ndarray]:
    """Write PNGs and return them re-read, so metrics see the quantized files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for s, img in zip(samples, images):
        save_image(img, directory / f"{s.scene_id}.png")
    return load_results(directory, samples)


def luminance_psnr(result: np.ndarray, gray: np.ndarray) -> float:
    """PSNR between the output's Lab L and the input gray, both scaled to ``[0, 1]``."""
    return psnr(rgb_to_lab(result)[..., 0] / 100.0, np.asarray(gray) / 100.0)


@torch.no_grad()
def reconstruction_psnr(colorizer: Colorizer, samples: list[SceneSample], batch: int = 100) -> dict[str, float]:
    """Autoencoder round-trip PSNR with the luminance pyramid and with it zeroed."""
    images, grays = scenes_to_tensors(samples)
    pix = colorizer.pixel
    scores = {"with_pyramid": [], "zero_pyramid": []}
    for i in range(0, len(images), batch):
        x, g = images[i : i + batch], grays[i : i + batch]
        z = pix.encode(x)
        pyr = pix.luminance_features(g)
        for key, p in (("with_pyramid", pyr), ("zero_pyramid", zero_pyramid(pyr))):
            rec = pix.decode(z, p).clamp(0, 1).permute(0, 2, 3, 1).double().numpy()
            ref = x.permute(0, 2, 3, 1).double().numpy()
            scores[key].extend(psnr(r, t) for r, t in zip(rec, ref))
    return {k: float(np.mean(v)) for k, v in scores.items()}


def run_variant(colorizer: Colorizer, cfg: RunConfig, samples, name: str, out_dir: Path, level="complete", dilate=0):
    ablate = () if name in ("full", "scarce", "dilated") else (name,)
    t0 = time.time()
    images = colorizer.colorize_batched(build_requests(cfg, samples, level, dilate), ablate)
    results = write_results(out_dir / name, samples, images)
    log.info("variant %s: %d images in %.0fs", name, len(samples), time.time() - t0)
    return results


def run_benchmark(cfg: RunConfig, samples: list[SceneSample], out_dir: Path, variants=None, colorizer=None) -> dict:
    """Colorize the eval split under each variant and collect every reported number."""
    colorizer = colorizer or Colorizer.load(cfg)
    out_dir = Path(out_dir)
    variants = ["full", *(variants if variants is not None else ABLATIONS)]
    reports: dict[str, MetricReport] = {}
    summary: dict = {"variants": {}}
    for name in variants:
        results = run_variant(colorizer, cfg, samples, name, out_dir)
        reports[name] = report_for(results, samples)
        reports[name].write(out_dir / f"report_{name}.json")
        summary["variants"][name] = reports[name].aggregate
        if name == "full":
            summary["luminance_psnr"] = float(np.mean([luminance_psnr(results[s.scene_id], s.gray) for s in samples]))

    scarce = run_variant(colorizer, cfg, samples, "scarce", out_dir, level="scarce")
    summary["scarce_colorfulness"] = float(np.mean([colorfulness(img) for img in scarce.values()]))

    dilated = run_variant(colorizer, cfg, samples, "dilated", out_dir, dilate=2)
    summary["dilated_accuracy"] = report_for(dilated, samples).aggregate["instance_color_accuracy"]

    summary["reconstruction_psnr"] = reconstruction_psnr(colorizer, samples)
    summary["table"] = format_table({VARIANT_NAMES[k]: summary["variants"][k] for k in variants})
    (out_dir / "benchmark.json").write_text(json.dumps(summary, indent=1, sort_keys=True), encoding="utf-8")
    (out_dir / "table.txt").write_text(summary["table"] + "\n", encoding="utf-8")
    return summary
