"""Flat ``key = value`` run configuration."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, fields
from pathlib import Path

ABLATIONS = ("no_lic", "no_slr", "no_iss")


class ConfigError(ValueError):
    """Bad configuration file or value; maps to exit status 2."""


@dataclass
class RunConfig:
    data_dir: str = "data"
    run_dir: str = "runs/default"
    seed: int = 0

    # data
    image_size: int = 64
    n_train: int = 2000
    n_eval: int = 200
    min_instances: int = 1
    max_instances: int = 4
    eval_seed_offset: int = 1_000_000

    # pixel stage
    ae_channels: tuple[int, ...] = (32, 64, 64)
    latent_channels: int = 4
    n_win: int = 7
    alpha: float = 0.1  # scales the gradient-balanced adversarial term
    beta: float = 0.5
    pixel_batch_size: int = 16
    lr_pixel: float = 5e-4
    lr_disc: float = 2e-4
    pixel_ae_epochs: int = 20
    pixel_lic_epochs: int = 10
    disc_start_epoch: int = 4

    # latent stage
    den_channels: tuple[int, ...] = (64, 96, 128)
    n_ext: tuple[int, ...] = (32, 32, 32)
    heads: int = 1
    cec_convs: int = 1
    lum_adapter_layers: int = 0
    n_tok: int = 16
    d_text: int = 64
    T: int = 1000
    batch_size: int = 32
    lr_latent: float = 3e-4
    prior_epochs: int = 20
    latent_epochs: int = 80
    drop_prob: float = 0.30
    latent_train_scope: str = "all"
    grounding_weight: float = 0.1  # BCE of bound-token attention against instance masks

    # sampling
    sampling_steps: int = 50
    guidance_scale: float = 3.0
    lam: float = 20.0
    refine_min_size: int = 8
    inner_iters: int = 3  # backtracked BCE steps per block per sampling step
    backtrack: bool = True
    eval_batch: int = 100

    ablate: tuple[str, ...] = ()

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.n_train < 1 or self.n_eval < 1:
            raise ConfigError(f"scene counts must be positive (n_train={self.n_train}, n_eval={self.n_eval})")
        if self.image_size % 4 or self.image_size < 16:
            raise ConfigError(f"image_size must be a multiple of 4 and >= 16, got {self.image_size}")
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ConfigError(f"drop_prob must be in [0, 1], got {self.drop_prob}")
        if self.n_win < 3 or self.n_win % 2 == 0:
            raise ConfigError(f"n_win must be odd and >= 3, got {self.n_win}")
        if self.guidance_scale < 0 or self.lam < 0 or self.grounding_weight < 0:
            raise ConfigError("guidance_scale, lam and grounding_weight must be non-negative")
        if self.T % self.sampling_steps:
            raise ConfigError(f"T ({self.T}) must be a multiple of sampling_steps ({self.sampling_steps})")
        if self.latent_train_scope not in ("text_ext", "all"):
            raise ConfigError(f"latent_train_scope must be 'text_ext' or 'all', got {self.latent_train_scope!r}")
        bad = [a for a in self.ablate if a not in ABLATIONS]
        if bad:
            raise ConfigError(f"unknown ablation(s) {bad}; choose from {', '.join(ABLATIONS)}")

    # ---- (de)serialization -------------------------------------------------

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        values = parse_kv(path.read_text(encoding="utf-8"), str(path))
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(values)

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        kwargs = {k: _coerce(known[k], v) for k, v in values.items()}
        return cls(**kwargs)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def _coerce(f: dataclasses.Field, value):
    if not isinstance(value, str):
        return tuple(value) if isinstance(value, list) else value
    default = f.default
    try:
        if isinstance(default, bool):
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return value.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            parts = [p.strip() for p in value.split(",") if p.strip()]
            if f.name == "ablate":
                return tuple(parts)
            return tuple(int(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"invalid value for {f.name}: {value!r}") from exc
    return value


def write_run_record(cfg: RunConfig, directory: Path, command: str, extra: dict | None = None) -> None:
    """Persist the resolved config and a metadata file beside a command's outputs."""
    directory.mkdir(parents=True, exist_ok=True)
    (directory / f"{command}.config").write_text(cfg.to_text(), encoding="utf-8")
    meta = {
        "command": command,
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    meta.update(extra or {})
    (directory / f"{command}.meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True), encoding="utf-8")
