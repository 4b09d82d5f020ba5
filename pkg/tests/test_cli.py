"""End-to-end CLI runs on a tiny configuration."""

import json

import numpy as np
import pytest

from lcad.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, main
from lcad.imaging import load_image, save_image, save_mask
from lcad.synthdata import read_manifest
from lcad.training import LATENT_CKPT, PIXEL_CKPT, file_sha256

TINY = """
image_size = 32
max_instances = 2
n_train = 24
n_eval = 3
ae_channels = 8,16,16
den_channels = 16,16,16
n_ext = 8,8,8
d_text = 16
pixel_batch_size = 8
batch_size = 8
pixel_ae_epochs = 1
pixel_lic_epochs = 1
disc_start_epoch = 0
prior_epochs = 1
latent_epochs = 1
sampling_steps = 4
eval_batch = 8
"""


def write_config(root, **extra):
    text = TINY + f"data_dir = {root / 'data'}\nrun_dir = {root / 'run'}\n"
    text += "".join(f"{k} = {v}\n" for k, v in extra.items())
    path = root / "tiny.cfg"
    path.write_text(text)
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root)
    for cmd in ("gen-data", "train-pixel", "train-latent"):
        assert main([cmd, "--config", str(cfg)]) == EXIT_OK
    return root, cfg


def test_gen_data_is_reproducible(tmp_path, trained):
    root, _ = trained
    cfg = write_config(tmp_path)
    assert main(["gen-data", "--config", str(cfg)]) == EXIT_OK
    for split in ("train", "eval"):
        a = (root / "data" / split / "manifest.json").read_bytes()
        b = (tmp_path / "data" / split / "manifest.json").read_bytes()
        assert a == b
    assert len(read_manifest(tmp_path / "data" / "eval")) == 3
    assert (tmp_path / "data" / "gen-data.meta.json").exists()


def test_training_writes_checkpoints(trained):
    root, _ = trained
    assert (root / "run" / PIXEL_CKPT).exists() and (root / "run" / LATENT_CKPT).exists()
    meta = json.loads((root / "run" / "train-latent.meta.json").read_text())
    assert meta["command"] == "train-latent" and len(meta["config_hash"]) == 16


def test_colorize_same_seed_same_png(tmp_path, trained):
    root, cfg = trained
    sample = read_manifest(root / "data" / "eval")[0]
    gray = tmp_path / "g.png"
    save_image(np.repeat(sample.gray[..., None] / 100.0, 3, axis=2), gray)
    desc = sample.descriptions["complete"]
    args = ["colorize", "--config", str(cfg), "--gray", str(gray), "--text", desc.text]
    for k, (pos, idx) in enumerate(desc.bindings):
        save_mask(sample.instances[idx].mask, tmp_path / f"m{k}.png")
        args += ["--mask", f"{tmp_path / f'm{k}.png'}={pos}"]
    assert main(args + ["--out", str(tmp_path / "a.png")]) == EXIT_OK
    assert main(args + ["--out", str(tmp_path / "b.png")]) == EXIT_OK
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    assert load_image(tmp_path / "a.png").shape == (32, 32, 3)
    assert main(args + ["--seed", "7", "--out", str(tmp_path / "c.png")]) == EXIT_OK


def test_colorize_binding_file(tmp_path, trained):
    root, cfg = trained
    sample = read_manifest(root / "data" / "eval")[0]
    save_image(np.repeat(sample.gray[..., None] / 100.0, 3, axis=2), tmp_path / "g.png")
    save_mask(sample.instances[0].mask, tmp_path / "m.png")
    (tmp_path / "bind.json").write_text(json.dumps({"m.png": "red"}))
    base = ["colorize", "--config", str(cfg), "--gray", str(tmp_path / "g.png"), "--out", str(tmp_path / "o.png")]
    assert main(base + ["--text", "a red circle", "--masks", str(tmp_path / "bind.json")]) == EXIT_OK
    assert main(base + ["--text", "a blue circle", "--masks", str(tmp_path / "bind.json")]) == EXIT_USAGE


def test_evaluate_results_directory(tmp_path, trained):
    root, cfg = trained
    samples = read_manifest(root / "data" / "eval")
    res = tmp_path / "res"
    res.mkdir()
    for s in samples:
        save_image(s.image, res / f"{s.scene_id}.png")
    out = tmp_path / "ev"
    assert main(["evaluate", "--config", str(cfg), "--results", str(res), "--out", str(out)]) == EXIT_OK
    agg = json.loads((out / "report.json").read_text())["aggregate"]
    assert agg["instance_color_accuracy"] == 1.0 and agg["ssim"] > 0.999
    (res / f"{samples[0].scene_id}.png").unlink()
    assert main(["evaluate", "--config", str(cfg), "--results", str(res), "--out", str(out)]) == EXIT_FAILURE


def test_evaluate_benchmark(tmp_path, trained):
    _, cfg = trained
    out = tmp_path / "bench"
    assert main(["evaluate", "--config", str(cfg), "--ablate", "no_lic,no_slr,no_iss", "--out", str(out)]) == EXIT_OK
    bench = json.loads((out / "benchmark.json").read_text())
    assert set(bench["variants"]) == {"full", "no_lic", "no_slr", "no_iss"}
    assert "W/o ISS" in (out / "table.txt").read_text()


def test_exit_codes(tmp_path):
    assert main(["gen-data", "--set", "n_train=0"]) == EXIT_USAGE
    assert main(["gen-data", "--set", "bogus=1"]) == EXIT_USAGE
    assert main(["gen-data", "--ablate", "no_magic"]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["gen-data", "--config", str(tmp_path / "missing.cfg")]) == EXIT_USAGE
    cfg = write_config(tmp_path)
    assert main(["train-latent", "--config", str(cfg)]) == EXIT_FAILURE
    assert main(["colorize", "--config", str(cfg), "--gray", str(tmp_path / "nope.png"),
                 "--text", "x", "--out", str(tmp_path / "o.png")]) == EXIT_FAILURE
