"""Procedural colored-shape scenes with instance masks and any-level descriptions."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imaging import (
    lab_to_rgb,
    load_image,
    load_mask,
    rgb_to_lab,
    save_image,
    save_mask,
    to_grayscale,
    ImageIOError,
)

SCHEMA_VERSION = 1
SCARCE_TEXT = "a colorful image"
SHAPES = ("circle", "square", "triangle")
LEVELS = ("complete", "partial", "scarce")

# sRGB anchors; Lab references are derived from them so every entry is in gamut.
_PALETTE_RGB = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.60, 0.15),
    "blue": (0.10, 0.20, 0.85),
    "yellow": (0.95, 0.90, 0.10),
    "orange": (1.00, 0.55, 0.05),
    "purple": (0.50, 0.15, 0.65),
    "pink": (1.00, 0.60, 0.75),
    "brown": (0.50, 0.30, 0.12),
    "black": (0.08, 0.08, 0.08),
    "white": (0.95, 0.95, 0.95),
    "gray": (0.50, 0.50, 0.50),
}
PALETTE: dict[str, np.ndarray] = {
    name: rgb_to_lab(np.array([rgb]))[0] for name, rgb in _PALETTE_RGB.items()
}
COLOR_NAMES = tuple(PALETTE)
ACHROMATIC = frozenset({"black", "white", "gray"})


class GenerationError(RuntimeError):
    """The requested scene configuration could not be realized."""


class ManifestError(RuntimeError):
    """A dataset directory is missing files or has an incompatible schema."""


@dataclass
class SceneConfig:
    size: int = 64
    min_instances: int = 1
    max_instances: int = 4
    bg_l_range: tuple[float, float] = (30.0, 80.0)
    min_area_frac: float = 0.05
    max_union_frac: float = 0.80
    shading: float = 10.0
    max_retries: int = 200


@dataclass
class InstanceRecord:
    shape: str
    color_name: str
    mask: np.ndarray

    @property
    def noun(self) -> str:
        return self.shape


@dataclass
class Description:
    level: str
    tokens: list[str]
    bindings: list[tuple[int, int]]  # (color-token position, instance index)
    fallback: bool = False

    @property
    def text(self) -> str:
        return " ".join(self.tokens).replace(" ,", ",")


@dataclass
class SceneSample:
    image: np.ndarray
    gray: np.ndarray
    instances: list[InstanceRecord]
    descriptions: dict[str, Description]
    seed: int
    scene_id: str = ""
    meta: dict = field(default_factory=dict)


def render_description(
    instances: list[InstanceRecord], level: str, rng: np.random.Generator
) -> Description:
    if level not in LEVELS:
        raise ValueError(f"unknown description level {level!r}")
    if not instances:
        raise ValueError("cannot describe a scene without instances")
    if level == "scarce":
        return Description("scarce", SCARCE_TEXT.split(), [])

    n = len(instances)
    fallback = False
    if level == "partial" and n < 2:
        level, fallback = "complete", True
        chosen = [0]
    elif level == "partial":
        k = int(rng.integers(1, n))
        chosen = sorted(rng.choice(n, size=k, replace=False).tolist())
    else:
        chosen = list(range(n))

    tokens: list[str] = []
    bindings: list[tuple[int, int]] = []
    for j, idx in enumerate(chosen):
        if j:
            tokens.append(",")
        inst = instances[idx]
        tokens.append("a")
        bindings.append((len(tokens), idx))
        tokens.extend([inst.color_name, inst.noun])
    return Description(level, tokens, bindings, fallback)


def _coverage(shape: str, cx: float, cy: float, s: float, size: int, ss: int = 4) -> np.ndarray:
    """Anti-aliased coverage in [0, 1] via ss x ss supersampling."""
    offs = (np.arange(ss) + 0.5) / ss
    coords = (np.arange(size)[:, None] + offs[None, :]).ravel()
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    half = s / 2.0
    if shape == "circle":
        inside = (xx - cx) ** 2 + (yy - cy) ** 2 <= half**2
    elif shape == "square":
        inside = (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half)
    elif shape == "triangle":
        # upright isoceles triangle inscribed in the s x s box
        top, bottom = cy - half, cy + half
        frac = (yy - top) / s
        inside = (yy >= top) & (yy <= bottom) & (np.abs(xx - cx) <= frac * half)
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return inside.reshape(size, ss, size, ss).mean(axis=(1, 3))


def _place_boxes(n, s_min, s_max, size, rng, retries, gap=2):
    """Axis-aligned boxes ``(cx, cy, side)`` separated by at least ``gap`` px.

    Each attempt places all ``n`` boxes by rejection; a failed attempt restarts
    the whole layout. Returns None when every attempt fails.
    """
    for _ in range(retries):
        boxes: list[tuple[float, float, float]] = []
        for _ in range(n):
            for _ in range(50):
                s = float(rng.uniform(s_min, s_max + 1))
                half = s / 2.0
                cx = float(rng.uniform(half + 1, size - half - 1))
                cy = float(rng.uniform(half + 1, size - half - 1))
                if all(
                    abs(cx - bx) >= half + bs / 2 + gap or abs(cy - by) >= half + bs / 2 + gap
                    for bx, by, bs in boxes
                ):
                    boxes.append((cx, cy, s))
                    break
            else:
                break
        if len(boxes) == n:
            return boxes
    return None


def generate_scene(seed: int, config: SceneConfig | None = None) -> SceneSample:
    """Draw one scene; bit-identical for equal ``(seed, config)``."""
    cfg = config or SceneConfig()
    if cfg.size < 8:
        raise GenerationError(f"canvas size {cfg.size} is below the 8 px minimum")
    if not 1 <= cfg.min_instances <= cfg.max_instances <= 4:
        raise GenerationError(
            f"instance range [{cfg.min_instances}, {cfg.max_instances}] must satisfy 1 <= lo <= hi <= 4"
        )
    rng = np.random.default_rng(seed)
    size = cfg.size
    n = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))
    min_area = cfg.min_area_frac * size * size
    # triangles cover half their box, which sets the smallest usable box side
    s_min = int(np.ceil(np.sqrt(2.0 * min_area))) + 1
    s_max = max(s_min, int(round(size * (0.53 - 0.047 * n))))

    shapes = [SHAPES[i] for i in rng.integers(0, len(SHAPES), size=n)]
    colors = [COLOR_NAMES[i] for i in rng.choice(len(COLOR_NAMES), size=n, replace=False)]

    boxes = _place_boxes(n, s_min, s_max, size, rng, cfg.max_retries)
    if boxes is None:
        raise GenerationError(
            f"seed {seed}: could not place {n} non-overlapping instances on a "
            f"{size}x{size} canvas after {cfg.max_retries} retries"
        )
    coverages = [_coverage(shape, cx, cy, s, size) for shape, (cx, cy, s) in zip(shapes, boxes)]
    if any((cov >= 0.5).sum() < min_area for cov in coverages):
        raise GenerationError(f"seed {seed}: an instance fell below the minimum area")

    masks = [cov >= 0.5 for cov in coverages]
    if sum(m.sum() for m in masks) > cfg.max_union_frac * size * size:
        raise GenerationError(f"seed {seed}: instances cover more than {cfg.max_union_frac:.0%} of the canvas")

    # achromatic background gradient
    lo, hi = cfg.bg_l_range
    l0, l1 = rng.uniform(lo, hi, size=2)
    theta = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    ramp = (np.cos(theta) * xx + np.sin(theta) * yy)
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-12)
    bg_lab = np.zeros((size, size, 3))
    bg_lab[..., 0] = l0 + (l1 - l0) * ramp
    image = lab_to_rgb(bg_lab)

    for cov, color in zip(coverages, colors):
        phi = rng.uniform(0, 2 * np.pi)
        shade = np.cos(phi) * xx + np.sin(phi) * yy
        ys, xs = np.nonzero(cov > 0)
        sub = shade[ys, xs]
        span = max(sub.max() - sub.min(), 1e-12)
        lab = np.zeros((size, size, 3))
        lab[...] = PALETTE[color]
        lab[..., 0] += cfg.shading * (2.0 * (shade - sub.min()) / span - 1.0)
        lab[..., 0] = np.clip(lab[..., 0], 0.0, 100.0)
        fill = lab_to_rgb(lab)
        a = cov[..., None]
        image = a * fill + (1.0 - a) * image

    image = np.clip(image, 0.0, 1.0)
    instances = [InstanceRecord(s, c, m) for s, c, m in zip(shapes, colors, masks)]
    descriptions = {level: render_description(instances, level, rng) for level in LEVELS}
    return SceneSample(
        image=image,
        gray=to_grayscale(image),
        instances=instances,
        descriptions=descriptions,
        seed=int(seed),
    )


def generate_dataset(
    count: int, base_seed: int, config: SceneConfig | None = None, prefix: str = "scene"
) -> list[SceneSample]:
    samples = []
    for i in range(count):
        sample = generate_scene(base_seed + i, config)
        sample.scene_id = f"{prefix}_{i:05d}"
        samples.append(sample)
    return samples


def _description_to_json(d: Description) -> dict:
    return {
        "level": d.level,
        "text": d.text,
        "tokens": list(d.tokens),
        "bindings": [list(b) for b in d.bindings],
        "fallback": d.fallback,
    }


def _description_from_json(obj: dict) -> Description:
    return Description(
        level=obj["level"],
        tokens=list(obj["tokens"]),
        bindings=[(int(p), int(i)) for p, i in obj["bindings"]],
        fallback=bool(obj.get("fallback", False)),
    )


def write_manifest(samples: list[SceneSample], directory: str | Path) -> Path:
    """Write ``images/``, ``masks/`` and ``manifest.json`` under ``directory``."""
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    scenes = []
    for i, sample in enumerate(samples):
        sid = sample.scene_id or f"scene_{i:05d}"
        save_image(sample.image, root / "images" / f"{sid}.png")
        insts = []
        for k, inst in enumerate(sample.instances):
            rel = f"masks/{sid}_{k}.png"
            save_mask(inst.mask, root / rel)
            insts.append({"shape": inst.shape, "color_name": inst.color_name, "noun": inst.noun, "mask": rel})
        scenes.append(
            {
                "id": sid,
                "seed": sample.seed,
                "image": f"images/{sid}.png",
                "size": list(sample.image.shape[:2]),
                "instances": insts,
                "descriptions": {lvl: _description_to_json(d) for lvl, d in sample.descriptions.items()},
            }
        )
    manifest = {"schema_version": SCHEMA_VERSION, "palette": list(COLOR_NAMES), "scenes": scenes}
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return path


def read_manifest(directory: str | Path) -> list[SceneSample]:
    root = Path(directory)
    path = root / "manifest.json"
    if not path.exists():
        raise ManifestError(f"{root}: manifest.json not found")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from exc
    version = manifest.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ManifestError(f"{path}: schema version {version!r}, expected {SCHEMA_VERSION}")

    samples = []
    for scene in manifest["scenes"]:
        sid = scene["id"]
        try:
            image = load_image(root / scene["image"])
            instances = [
                InstanceRecord(inst["shape"], inst["color_name"], load_mask(root / inst["mask"]))
                for inst in scene["instances"]
            ]
        except ImageIOError as exc:
            raise ManifestError(f"scene {sid}: {exc}") from exc
        samples.append(
            SceneSample(
                image=image,
                gray=to_grayscale(image),
                instances=instances,
                descriptions={
                    lvl: _description_from_json(d) for lvl, d in scene["descriptions"].items()
                },
                seed=int(scene["seed"]),
                scene_id=sid,
            )
        )
    return samples


def classify_lab(lab: np.ndarray) -> str:
    """Nearest palette entry by CIE76 distance."""
    names = list(PALETTE)
    refs = np.stack([PALETTE[k] for k in names])
    return names[int(np.argmin(np.linalg.norm(refs - lab, axis=1)))]
