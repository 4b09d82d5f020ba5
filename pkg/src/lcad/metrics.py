"""Image quality and description-compliance metrics.

All inputs are ``(H, W, 3)`` RGB numpy arrays in ``[0, 1]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import convolve2d

from .imaging import rgb_to_lab
from .synthdata import ACHROMATIC, PALETTE, Description, InstanceRecord

PSNR_CAP = 99.0
METRIC_KEYS = ("psnr", "ssim", "colorfulness", "delta_colorfulness", "instance_color_accuracy")


def _pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """``10 log10(1 / MSE)`` over all channels, capped at 99 dB."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_gray(x: np.ndarray, y: np.ndarray, window: np.ndarray | None = None) -> float:
    """Single-scale SSIM of two ``[0, 1]`` grayscale images over valid window positions."""
    x, y = _pair(x, y)
    w = gaussian_window() if window is None else window
    if min(x.shape) < w.shape[0]:
        raise ValueError(f"image {x.shape} smaller than the {w.shape[0]}x{w.shape[0]} SSIM window")
    c1, c2 = 0.01**2, 0.03**2
    filt = lambda img: convolve2d(img, w[::-1, ::-1], mode="valid")
    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x**2
    syy = filt(y * y) - mu_y**2
    sxy = filt(x * y) - mu_x * mu_y
    s = ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) / ((mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2))
    return float(s.mean())


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """SSIM on Lab ``L / 100``."""
    a, b = _pair(a, b)
    return ssim_gray(rgb_to_lab(a)[..., 0] / 100.0, rgb_to_lab(b)[..., 0] / 100.0)


def colorfulness(img: np.ndarray) -> float:
    """Hasler-Suesstrunk colorfulness on the 0-255 scale."""
    img = np.asarray(img, dtype=np.float64) * 255.0
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    rg = r - g
    yb = 0.5 * (r + g) - b
    return float(np.sqrt(rg.std() ** 2 + yb.std() ** 2) + 0.3 * np.sqrt(rg.mean() ** 2 + yb.mean() ** 2))


def delta_colorfulness(result: np.ndarray, reference: np.ndarray) -> float:
    return abs(colorfulness(result) - colorfulness(reference))


_AB_NAMES = list(PALETTE)
_AB_REFS = np.stack([PALETTE[k][1:] for k in _AB_NAMES])


def classify_ab(ab: np.ndarray) -> str:
    """Nearest palette entry in the ab plane; black, white and gray collapse to ``"achromatic"``."""
    name = _AB_NAMES[int(np.argmin(np.linalg.norm(_AB_REFS - np.asarray(ab), axis=1)))]
    return "achromatic" if name in ACHROMATIC else name


def _color_class(name: str) -> str:
    return "achromatic" if name in ACHROMATIC else name


def instance_color_accuracy(result: np.ndarray, instances: list[InstanceRecord], description: Description) -> float:
    """Fraction of bound instances whose mean ab classifies to the requested color."""
    if not description.bindings:
        raise ValueError("instance color accuracy is undefined for descriptions without bindings")
    lab = rgb_to_lab(np.asarray(result, dtype=np.float64))
    hits = 0
    for pos, idx in description.bindings:
        inst = instances[idx]
        requested = description.tokens[pos]
        mean_ab = lab[inst.mask][:, 1:].mean(axis=0)
        hits += classify_ab(mean_ab) == _color_class(requested)
    return hits / len(description.bindings)


@dataclass
class MetricReport:
    per_image: dict[str, dict[str, float | None]] = field(default_factory=dict)
    # LPIPS / FID need pretrained networks; slots stay empty at this scale
    unavailable: tuple[str, ...] = ("lpips", "fid")

    def add(self, image_id: str, values: dict[str, float | None]) -> None:
        self.per_image[image_id] = dict(values)

    @property
    def aggregate(self) -> dict[str, float | None]:
        out: dict[str, float | None] = {}
        for key in METRIC_KEYS:
            vals = [v[key] for v in self.per_image.values() if v.get(key) is not None]
            out[key] = float(np.mean(vals)) if vals else None
        return out

    @property
    def counts(self) -> dict[str, int]:
        return {key: sum(v.get(key) is not None for v in self.per_image.values()) for key in METRIC_KEYS}

    def to_json(self) -> dict:
        return {
            "aggregate": self.aggregate,
            "counts": self.counts,
            "per_image": self.per_image,
            **{k: None for k in self.unavailable},
        }

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True), encoding="utf-8")


def evaluate_image(
    result: np.ndarray,
    reference: np.ndarray,
    instances: list[InstanceRecord] | None = None,
    description: Description | None = None,
) -> dict[str, float | None]:
    acc = None
    if instances is not None and description is not None and description.bindings:
        acc = instance_color_accuracy(result, instances, description)
    return {
        "psnr": psnr(result, reference),
        "ssim": ssim(result, reference),
        "colorfulness": colorfulness(result),
        "delta_colorfulness": delta_colorfulness(result, reference),
        "instance_color_accuracy": acc,
    }


def format_table(rows: dict[str, dict[str, float | None]]) -> str:
    """Plain-text table, one row per method, in the usual PSNR / SSIM / LPIPS column order."""
    cols = ["PSNR", "SSIM", "LPIPS", "colorful", "dcolorful", "inst-acc"]
    keys = ["psnr", "ssim", None, "colorfulness", "delta_colorfulness", "instance_color_accuracy"]
    width = max([len("Method")] + [len(r) for r in rows]) + 2
    lines = ["Method".ljust(width) + "".join(c.rjust(11) for c in cols)]
    for name, vals in rows.items():
        cells = []
        for key in keys:
            v = vals.get(key) if key else None
            cells.append(("n/a" if v is None else f"{v:.4f}").rjust(11))
        lines.append(name.ljust(width) + "".join(cells))
    return "\n".join(lines)
