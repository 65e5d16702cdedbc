#!/usr/bin/env python3
"""
Smoke Test for Latent Domain Transfer

This script drives the command-line pipeline end to end on small synthetic
IDX datasets written to a temporary directory, so it needs no downloads.
It covers:
- Training both VAEs, the classifier and both transfer directions
- Sampling, evaluation, grids and the lambda_reg ablation
- Exit codes for configuration errors and missing checkpoints
- Frozen VAE checkpoints and run-to-run reproducibility
"""

import gzip
import logging
import os
import struct
import sys
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

# Add the project root to the Python path to allow importing the package
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from src.latent_domain_transfer.checkpoint import file_digest
from src.latent_domain_transfer.config import RunConfig, load_config
from src.latent_domain_transfer.evaluator import EvalReport
from src.latent_domain_transfer.exceptions import DataError
from src.latent_domain_transfer.grid import read_pgm
from src.latent_domain_transfer.loader import (
    IDX_FILES,
    IMAGE_MAGIC,
    LABEL_MAGIC,
    LabeledImageSet,
    default_conditional_map,
)
from src.latent_domain_transfer.pipeline import EXIT_MISSING, EXIT_OK, EXIT_USAGE, Pipeline, main


def setup_test_logging():
    """Set up logging for the smoke test."""
    logging.basicConfig(
        level=logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[logging.StreamHandler()]
    )
    return logging.getLogger('smoke_test')


def synthetic_images(labels: np.ndarray, dataset: str, seed: int) -> np.ndarray:
    """
    Class-dependent 28x28 byte images: a bright block (mnist) or a vertical
    bar (fashion) whose position encodes the label, over faint noise.
    """
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 40, size=(len(labels), 28, 28)).astype(np.uint8)
    for image, label in zip(images, labels):
        if dataset == "mnist":
            row, col = 2 + (label // 5) * 12, 1 + (label % 5) * 5
            image[row:row + 6, col:col + 6] = rng.integers(200, 256, size=(6, 6))
        else:
            col = 2 + label * 2
            image[4:24, col:col + 3] = rng.integers(200, 256, size=(20, 3))
    return images


def write_idx(directory: Path, split: str, images: np.ndarray, labels: np.ndarray, compress: bool = False) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    image_name, label_name = IDX_FILES[split]
    image_bytes = struct.pack(">IIII", IMAGE_MAGIC, len(images), 28, 28) + images.tobytes()
    label_bytes = struct.pack(">II", LABEL_MAGIC, len(labels)) + labels.astype(np.uint8).tobytes()
    if compress:
        (directory / f"{image_name}.gz").write_bytes(gzip.compress(image_bytes))
        (directory / f"{label_name}.gz").write_bytes(gzip.compress(label_bytes))
    else:
        (directory / image_name).write_bytes(image_bytes)
        (directory / label_name).write_bytes(label_bytes)


def create_synthetic_datasets(root: Path, train_per_class: int = 20, test_per_class: int = 6) -> None:
    """Write mnist/ and fashion/ IDX directories under ``root``; the test splits are gzipped."""
    for offset, dataset in enumerate(("mnist", "fashion")):
        for split, per_class in (("train", train_per_class), ("test", test_per_class)):
            labels = np.tile(np.arange(10), per_class)
            images = synthetic_images(labels, dataset, seed=100 * offset + len(split))
            write_idx(root / dataset, split, images, labels, compress=split == "test")


def create_test_config():
    """Create a tiny configuration over synthetic data in a temporary directory."""
    temp_dir = tempfile.mkdtemp()
    create_synthetic_datasets(Path(temp_dir))
    config = RunConfig(
        mnist_dir=os.path.join(temp_dir, "mnist"),
        fashion_dir=os.path.join(temp_dir, "fashion"),
        train_size=None,
        latent_dim=8,
        base_channels=4,
        encoder_hidden=16,
        gan_hidden=16,
        gan_layers=2,
        batch_size=16,
        vae_epochs=2,
        transfer_steps=15,
        classifier_epochs=2,
        log_interval=5,
        samples_per_class=8,
        n_shuffles=2,
        grid_per_class=2,
        diversity_samples=3,
        seed=7,
        out_dir=os.path.join(temp_dir, "run"),
        log_level="WARNING",
    )
    return config, temp_dir


def write_config_file(config: RunConfig, path: Path) -> Path:
    """Write ``config`` in the ``key = value`` syntax."""
    lines = ["# generated by the smoke test"]
    for key, value in config.to_dict().items():
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        elif value is None:
            value = ""
        lines.append(f"{key} = {value}")
    path.write_text("\n".join(lines) + "\n")
    return path


ARTIFACTS = [
    "vae_1.lbck", "vae_2.lbck",
    "gen_1to2.lbck", "disc_1to2.lbck", "gen_2to1.lbck", "disc_2to1.lbck",
    "classifier_mnist.lbck",
    "eval_report.txt", "eval_report.csv",
    "grid_1to2.pgm", "grid_2to1.pgm",
    "vae_1_history.csv", "vae_2_history.csv",
    "transfer_1to2_history.csv", "transfer_2to1_history.csv",
    "effective_config.yaml",
]


@pytest.fixture(scope="module")
def config_file(config):
    path = Path(tempfile.mkdtemp()) / "run.conf"
    return write_config_file(config, path)


@pytest.fixture(scope="module")
def full_run(config_file):
    """Output directory of one complete ``all`` run."""
    out_dir = Path(tempfile.mkdtemp()) / "full"
    assert main(["all", "--config", str(config_file), "--out", str(out_dir)]) == EXIT_OK
    return out_dir


def test_config_file_round_trip(config, config_file):
    assert load_config(config_file) == config


def test_full_run_artifacts(full_run, logger):
    logger.info(f"Checking artifacts in {full_run}")
    missing = [name for name in ARTIFACTS if not (full_run / name).exists()]
    assert missing == []


def test_full_run_report(full_run, config):
    report = EvalReport.from_text((full_run / "eval_report.txt").read_text())
    frame = pd.read_csv(full_run / "eval_report.csv")
    assert list(frame.columns) == ["dataset", "train_size", "shuffle_seed", "pair", "accuracy"]
    assert len(frame) == 5 * config.n_shuffles
    assert frame["accuracy"].between(0, 1).all()
    assert abs(report.mean_shuffle_accuracy - np.mean(list(report.shuffle_accuracies.values()))) < 1e-9
    assert report.diversity is not None and report.diversity >= 0
    assert report.config["seed"] == config.seed


def test_full_run_histories_finite(full_run):
    for name in ("vae_1", "vae_2", "transfer_1to2", "transfer_2to1"):
        frame = pd.read_csv(full_run / f"{name}_history.csv")
        assert np.isfinite(frame.select_dtypes("number").to_numpy()).all()


def test_full_run_grid_layout(full_run, config):
    pixels = read_pgm(full_run / "grid_1to2.pgm")
    assert pixels.shape == (2 * 28, 5 * config.grid_per_class * 28)


def test_sample_command(full_run, config_file):
    assert main(["sample", "--class", "2", "--count", "4", "--config", str(config_file),
                 "--out", str(full_run)]) == EXIT_OK
    pixels = read_pgm(full_run / "sample_1to2_class2.pgm")
    assert pixels.shape == (28, 4 * 28)


def test_sample_rejects_target_class(full_run, config_file):
    assert main(["sample", "--class", "7", "--config", str(config_file), "--out", str(full_run)]) == EXIT_USAGE


def test_transfer_keeps_vae_checkpoints(full_run, config_file):
    before = {name: file_digest(full_run / name) for name in ("vae_1.lbck", "vae_2.lbck")}
    assert main(["train-transfer", "--direction", "1to2", "--config", str(config_file),
                 "--out", str(full_run)]) == EXIT_OK
    after = {name: file_digest(full_run / name) for name in ("vae_1.lbck", "vae_2.lbck")}
    assert before == after


def test_ablate_command(full_run, config_file, config):
    assert main(["ablate", "--config", str(config_file), "--out", str(full_run)]) == EXIT_OK
    frame = pd.read_csv(full_run / "ablation.csv")
    assert len(frame) == 2 * config.n_shuffles
    assert sorted(frame["lambda_reg"].unique()) == [0.0, config.lambda_reg]
    assert (frame["diversity"] >= 0).all()


def test_reproducible_report(full_run, config_file):
    out_dir = Path(tempfile.mkdtemp()) / "again"
    assert main(["all", "--config", str(config_file), "--out", str(out_dir)]) == EXIT_OK
    assert (out_dir / "eval_report.csv").read_bytes() == (full_run / "eval_report.csv").read_bytes()
    assert file_digest(out_dir / "gen_1to2.lbck") == file_digest(full_run / "gen_1to2.lbck")


def test_transfer_without_vae_exits_missing(config_file, capsys):
    out_dir = Path(tempfile.mkdtemp())
    code = main(["train-transfer", "--direction", "1to2", "--config", str(config_file), "--out", str(out_dir)])
    assert code == EXIT_MISSING
    assert "missing VAE checkpoint for domain 1" in capsys.readouterr().out


def test_bad_config_exits_usage(tmp_path):
    path = tmp_path / "bad.conf"
    path.write_text("lambda_reg = banana\n")
    assert main(["train-vae", "--domain", "1", "--config", str(path)]) == EXIT_USAGE


def test_missing_config_file_exits_usage(tmp_path):
    assert main(["eval", "--config", str(tmp_path / "absent.yaml")]) == EXIT_USAGE


def test_unknown_command_exits_usage():
    with pytest.raises(SystemExit) as excinfo:
        main(["train-everything"])
    assert excinfo.value.code == EXIT_USAGE


def test_train_size_flag(config_file, tmp_path):
    out_dir = tmp_path / "small"
    assert main(["train-vae", "--domain", "2", "--train-size", "500", "--no-reg",
                 "--config", str(config_file), "--out", str(out_dir)]) == EXIT_OK
    effective = load_config(out_dir / "effective_config.yaml")
    assert effective.train_size == 500
    assert effective.lambda_reg == 0.0


def test_fixed_conditionals_need_every_source_class(config, tmp_path):
    pipeline = Pipeline(config.replace(out_dir=str(tmp_path)))
    cond_map = default_conditional_map()
    images = np.linspace(-1, 1, 6, dtype=np.float32).reshape(6, 1, 1, 1) * np.ones((1, 1, 28, 28), np.float32)

    partial = LabeledImageSet(images[:3], np.array([0, 1, 3]))
    with pytest.raises(DataError, match=r"\[2, 4\]"):
        pipeline._fixed_conditionals(partial, cond_map)

    complete = LabeledImageSet(images, np.array([4, 0, 1, 2, 0, 3]))
    fixed = pipeline._fixed_conditionals(complete, cond_map)
    np.testing.assert_array_equal(fixed, images[[1, 2, 3, 5, 0]])


def run_smoke_test():
    """Run the smoke test through pytest."""
    logger = setup_test_logging()
    logger.info("Starting smoke test for latent-domain-transfer")
    return pytest.main([__file__, "-v"])


if __name__ == '__main__':
    sys.exit(run_smoke_test())
