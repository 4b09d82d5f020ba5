"""CIELAB color math, grayscale extraction and PNG I/O.

Images are float64 numpy arrays in channel-last layout:

* RGB: ``(H, W, 3)`` sRGB values in ``[0, 1]``
* Lab: ``(H, W, 3)`` with ``L`` in ``[0, 100]`` and ``a, b`` roughly in ``[-128, 127]``
* gray: ``(H, W)`` holding the ``L`` channel only
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

MIN_SIZE = 8

# sRGB -> XYZ, D65, 2 degree observer
_RGB2XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_XYZ2RGB = np.linalg.inv(_RGB2XYZ)
# Reference white taken as the image of sRGB white so that (1, 1, 1) maps to a = b = 0.
WHITE = _RGB2XYZ.sum(axis=1)

_EPS = 216.0 / 24389.0
_KAPPA = 24389.0 / 27.0


class ImageIOError(OSError):
    """Raised when an image file cannot be read or written."""


def validate_rgb(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) RGB array, got shape {img.shape}")
    if img.shape[0] < MIN_SIZE or img.shape[1] < MIN_SIZE:
        raise ValueError(f"image must be at least {MIN_SIZE}x{MIN_SIZE}, got {img.shape[:2]}")
    if not np.all(np.isfinite(img)):
        raise ValueError("RGB image contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError(f"RGB values must lie in [0, 1], got [{img.min()}, {img.max()}]")
    return img


def _srgb_to_linear(c: np.ndarray) -> np.ndarray:
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(c: np.ndarray) -> np.ndarray:
    c = np.clip(c, 0.0, None)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1.0 / 2.4) - 0.055)


def _f(t: np.ndarray) -> np.ndarray:
    return np.where(t > _EPS, np.cbrt(t), (_KAPPA * t + 16.0) / 116.0)


def _f_inv(t: np.ndarray) -> np.ndarray:
    t3 = t**3
    return np.where(t3 > _EPS, t3, (116.0 * t - 16.0) / _KAPPA)


def rgb_to_lab(img: np.ndarray) -> np.ndarray:
    """Convert an sRGB image to CIELAB (D65).

    Works pixel-wise; any leading shape is accepted as long as the last axis
    has length 3, but full images are validated for range and size.
    """
    img = validate_rgb(img) if np.ndim(img) == 3 else _check_pixels(img)
    xyz = _srgb_to_linear(img) @ _RGB2XYZ.T
    f = _f(xyz / WHITE)
    lab = np.empty_like(xyz)
    lab[..., 0] = np.clip(116.0 * f[..., 1] - 16.0, 0.0, 100.0)
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def _check_pixels(px: np.ndarray) -> np.ndarray:
    px = np.asarray(px, dtype=np.float64)
    if px.shape[-1] != 3:
        raise ValueError(f"last axis must have length 3, got shape {px.shape}")
    if px.size and (px.min() < 0.0 or px.max() > 1.0 or not np.all(np.isfinite(px))):
        raise ValueError("RGB values must lie in [0, 1]")
    return px


def lab_to_rgb(lab: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rgb_to_lab`; out-of-gamut colors are clipped to ``[0, 1]``."""
    lab = np.asarray(lab, dtype=np.float64)
    if lab.shape[-1] != 3:
        raise ValueError(f"last axis must have length 3, got shape {lab.shape}")
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    xyz = np.stack([_f_inv(fx), _f_inv(fy), _f_inv(fz)], axis=-1) * WHITE
    rgb = _linear_to_srgb(xyz @ _XYZ2RGB.T)
    return np.clip(rgb, 0.0, 1.0)


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """The ``L`` channel of :func:`rgb_to_lab`."""
    return rgb_to_lab(img)[..., 0]


def delta_e(lab1: np.ndarray, lab2: np.ndarray) -> np.ndarray:
    """CIE76 color difference."""
    return np.linalg.norm(np.asarray(lab1) - np.asarray(lab2), axis=-1)


def save_image(img: np.ndarray, path: str | Path) -> None:
    img = validate_rgb(img)
    path = Path(path)
    data = np.round(img * 255.0).astype(np.uint8)
    try:
        Image.fromarray(data, mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise ImageIOError(f"cannot write {path}: {exc}") from exc


def load_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    data = _read_png(path)
    if data.mode not in ("RGB", "L", "P"):
        raise ImageIOError(f"{path}: unsupported PNG mode {data.mode!r} (expected 8-bit RGB)")
    return np.asarray(data.convert("RGB"), dtype=np.float64) / 255.0


def save_mask(mask: np.ndarray, path: str | Path) -> None:
    mask = np.asarray(mask)
    path = Path(path)
    data = np.where(mask > 0.5, 255, 0).astype(np.uint8)
    try:
        Image.fromarray(data, mode="L").save(path, format="PNG")
    except OSError as exc:
        raise ImageIOError(f"cannot write {path}: {exc}") from exc


def load_mask(path: str | Path) -> np.ndarray:
    """Read a single-channel PNG as a boolean mask (threshold at mid-gray)."""
    path = Path(path)
    data = np.asarray(_read_png(path).convert("L"))
    return data >= 128


def _read_png(path: Path) -> Image.Image:
    if not path.exists():
        raise ImageIOError(f"{path}: no such file")
    try:
        img = Image.open(path)
        img.load()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageIOError(f"{path}: cannot decode image ({exc})") from exc
    if img.format != "PNG":
        raise ImageIOError(f"{path}: expected PNG, found {img.format}")
    return img
