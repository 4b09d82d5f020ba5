"""``lcad`` command line: gen-data, train-pixel, train-latent, colorize, evaluate.

Exit status 0 on success, 1 on runtime failure, 2 on usage or configuration errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .config import ConfigError, RunConfig, write_run_record
from .imaging import ImageIOError, load_image, load_mask, save_image, to_grayscale
from .synthdata import COLOR_NAMES, SceneConfig, generate_dataset, write_manifest, read_manifest
from .textenc import split_words

log = logging.getLogger("lcad")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--ablate", help="comma-separated subset of no_lic,no_slr,no_iss")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="lcad", description="Language-guided colorization of grayscale images.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate the synthetic train/eval scenes")
    sub.add_parser("train-pixel", parents=[common], help="train the luminance-guided autoencoder")
    sub.add_parser("train-latent", parents=[common], help="train the text-conditioned latent denoiser")

    c = sub.add_parser("colorize", parents=[common], help="colorize one grayscale PNG")
    c.add_argument("--gray", type=Path, required=True)
    c.add_argument("--text", required=True)
    c.add_argument("--mask", action="append", default=[], metavar="PNG=WORD",
                   help="instance mask bound to a color word (or token index) of --text")
    c.add_argument("--masks", type=Path, metavar="JSON",
                   help="binding file mapping mask PNG (relative to the file) to a color word or token index")
    c.add_argument("--out", type=Path, required=True)

    e = sub.add_parser("evaluate", parents=[common], help="score results, or run the benchmark")
    e.add_argument("--results", type=Path, help="directory of <scene id>.png to score")
    e.add_argument("--data", type=Path, help="dataset directory (default: <data_dir>/eval)")
    e.add_argument("--out", type=Path, help="output directory (default: <run_dir>/eval)")
    return p


def resolve_config(args) -> RunConfig:
    values: dict = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    if args.seed is not None:
        values["seed"] = str(args.seed)
    if args.ablate is not None:
        values["ablate"] = args.ablate
    if args.config is not None:
        return RunConfig.from_file(args.config, **values)
    return RunConfig.from_dict(values)


# ---- commands -------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig) -> dict:
    scene_cfg = SceneConfig(size=cfg.image_size, min_instances=cfg.min_instances, max_instances=cfg.max_instances)
    root = Path(cfg.data_dir)
    splits = {
        "train": generate_dataset(cfg.n_train, cfg.seed, scene_cfg, "train"),
        "eval": generate_dataset(cfg.n_eval, cfg.seed + cfg.eval_seed_offset, scene_cfg, "eval"),
    }
    for name, samples in splits.items():
        write_manifest(samples, root / name)
    write_run_record(cfg, root, "gen-data", {"counts": {k: len(v) for k, v in splits.items()}})
    log.info("wrote %d train and %d eval scenes to %s", cfg.n_train, cfg.n_eval, root)
    return {"train": len(splits["train"]), "eval": len(splits["eval"])}


def cmd_train_pixel(cfg: RunConfig) -> Path:
    from .training import train_pixel

    t0 = time.time()
    path = train_pixel(cfg)
    write_run_record(cfg, Path(cfg.run_dir), "train-pixel", {"checkpoint": str(path), "seconds": time.time() - t0})
    return path


def cmd_train_latent(cfg: RunConfig) -> Path:
    from .training import train_latent

    t0 = time.time()
    path = train_latent(cfg)
    write_run_record(cfg, Path(cfg.run_dir), "train-latent", {"checkpoint": str(path), "seconds": time.time() - t0})
    return path


def _resolve_token(text: str, spec: str, used: set[int]) -> int:
    words = split_words(text)
    if spec.isdigit():
        pos = int(spec)
        if pos >= len(words):
            raise UsageError(f"token index {pos} out of range for {len(words)} words")
        return pos
    for pos, w in enumerate(words):
        if w == spec and pos not in used:
            return pos
    raise UsageError(f"word {spec!r} not found in description {text!r}")


def read_binding_file(path: Path) -> list[str]:
    """``{"mask.png": "red", "other.png": 5}`` to ``PNG=WORD`` specs with paths resolved."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read binding file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"{path}: expected a JSON object mapping mask files to tokens")
    return [f"{Path(path).parent / name}={value}" for name, value in data.items()]


def cmd_colorize(cfg: RunConfig, gray_path: Path, text: str, mask_specs: list[str], out: Path) -> Path:
    from .instsample import ContourMask
    from .pipeline import ColorizeRequest, Colorizer

    gray = to_grayscale(load_image(gray_path))
    masks, used = [], set()
    for k, spec in enumerate(mask_specs):
        if "=" not in spec:
            raise UsageError(f"--mask expects PNG=WORD, got {spec!r}")
        path, word = spec.rsplit("=", 1)
        pos = _resolve_token(text, word.strip(), used)
        used.add(pos)
        mask = load_mask(path)
        if mask.shape != gray.shape:
            raise UsageError(f"mask {path} is {mask.shape}, image is {gray.shape}")
        masks.append(ContourMask(mask, k, pos))
    if not masks and "no_iss" not in cfg.ablate and any(w in COLOR_NAMES for w in split_words(text)):
        log.warning("description names colors but no masks were given; using plain sampling")
    colorizer = Colorizer.load(cfg)
    rgb = colorizer.colorize([ColorizeRequest(gray, text, masks, cfg.seed)], cfg.ablate)[0]
    out.parent.mkdir(parents=True, exist_ok=True)
    save_image(rgb, out)
    write_run_record(cfg, out.parent, f"colorize-{out.stem}", {"gray": str(gray_path), "text": text, "masks": mask_specs})
    return out


def cmd_evaluate(cfg: RunConfig, results: Path | None, data: Path | None, out: Path | None) -> dict:
    from .evaluation import load_results, report_for, run_benchmark
    from .metrics import format_table

    samples = read_manifest(data or Path(cfg.data_dir) / "eval")
    out = out or Path(cfg.run_dir) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    if results is not None:
        report = report_for(load_results(results, samples), samples)
        report.write(out / "report.json")
        summary = {"aggregate": report.aggregate}
        print(format_table({results.name: report.aggregate}))
    else:
        summary = run_benchmark(cfg, samples, out, variants=list(cfg.ablate))
        print(summary["table"])
        print(json.dumps({k: v for k, v in summary.items() if k not in ("table", "variants")}, indent=1, sort_keys=True))
    write_run_record(cfg, out, "evaluate", {"results": str(results) if results else None})
    return summary


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    from .training import PrerequisiteError

    try:
        cfg = resolve_config(args)
        if args.command == "gen-data":
            cmd_gen_data(cfg)
        elif args.command == "train-pixel":
            cmd_train_pixel(cfg)
        elif args.command == "train-latent":
            cmd_train_latent(cfg)
        elif args.command == "colorize":
            specs = list(args.mask) + (read_binding_file(args.masks) if args.masks else [])
            cmd_colorize(cfg, args.gray, args.text, specs, args.out)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.results, args.data, args.out)
    except (ConfigError, UsageError) as exc:
        print(f"lcad: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PrerequisiteError, ImageIOError, FileNotFoundError, RuntimeError, ValueError) as exc:
        print(f"lcad: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
