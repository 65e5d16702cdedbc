"""
Module for orchestrating the staged latent domain transfer pipeline.

This module serves as the CLI entry point. Each command runs one stage and
isolates it through checkpoints in the output directory: the two VAEs are
trained first, then the transfer pairs against the frozen VAEs, then
sampling, evaluation and figure grids. Every stage writes
effective_config.yaml beside its artifacts.
"""

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.latent_domain_transfer.classifier import ClassifierTrainer
from src.latent_domain_transfer.config import RunConfig, convert_value
from src.latent_domain_transfer.config import load_config as read_config_file
from src.latent_domain_transfer.evaluator import EvalReport, diversity_score, shuffled_eval
from src.latent_domain_transfer.exceptions import (
    ConfigError,
    DataError,
    MissingPrerequisiteError,
    NumericalError,
    TransferError,
)
from src.latent_domain_transfer.loader import ConditionalMap, DataLoader, LabeledImageSet, take_subset
from src.latent_domain_transfer.model import ModelFactory, ModelStore
from src.latent_domain_transfer.sampler import Sampler
from src.latent_domain_transfer.seeding import derive_seed, make_rng
from src.latent_domain_transfer.transfer import DIRECTIONS, TransferPipeline, train_transfer_pair
from src.latent_domain_transfer.vae import VaeModel, train_vae

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_MISSING = 2
EXIT_DIVERGED = 3

DEFAULT_CONFIG = "config.yaml"
HELD_OUT_SIZE = 500
CLASSIFIER_ACCURACY_BAR = 0.985


def setup_logging(config: RunConfig) -> None:
    """
    Set up the logging configuration.

    Args:
        config: Run configuration holding log_level, log_format and log_file.
    """
    log_level = getattr(logging, config.log_level.upper())
    handlers = []

    # Console handler
    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setFormatter(logging.Formatter(config.log_format))
    handlers.append(console_handler)

    # File handler if specified
    if config.log_file:
        Path(config.log_file).parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(config.log_file)
        file_handler.setFormatter(logging.Formatter(config.log_format))
        handlers.append(file_handler)

    logging.basicConfig(level=log_level, format=config.log_format, handlers=handlers, force=True)


def load_config(config_path: Optional[str]) -> RunConfig:
    """
    Load the run configuration.

    Without an explicit path, config.yaml in the working directory is used
    when present and the built-in defaults otherwise.

    Raises:
        ConfigError: If the file is missing or invalid.
    """
    if config_path is None:
        if not Path(DEFAULT_CONFIG).exists():
            return RunConfig()
        config_path = DEFAULT_CONFIG
    return read_config_file(config_path)


def apply_overrides(config: RunConfig, args: argparse.Namespace) -> RunConfig:
    """Apply the command-line flags that override configuration values."""
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out_dir"] = args.out
    if args.train_size is not None:
        changes["train_size"] = convert_value("train_size", args.train_size)
    if args.no_reg:
        changes["lambda_reg"] = 0.0
    if args.shuffles is not None:
        changes["n_shuffles"] = args.shuffles
    return config.replace(**changes) if changes else config


class Pipeline:
    """
    Class for orchestrating the stages of a latent domain transfer run.
    """

    def __init__(self, config: RunConfig):
        """
        Initialize the Pipeline with configuration.

        Args:
            config: Run configuration.
        """
        self.config = config
        self.logger = logging.getLogger(__name__)
        self.loader = DataLoader(config)
        self.store = ModelStore(config)

    def _seed(self, stage: str, index: Optional[int] = None) -> int:
        return derive_seed(self.config.seed, stage, index)

    def _save_config(self) -> Path:
        return self.config.save(self.config.output_dir / "effective_config.yaml")

    def conditional_map(self, direction: str) -> ConditionalMap:
        cond_map = self.loader.conditional_map()
        return cond_map if direction == "1to2" else cond_map.inverse()

    def _load_vaes(self) -> Tuple[VaeModel, VaeModel]:
        return self.store.load_vae(1), self.store.load_vae(2)

    @staticmethod
    def _orient(direction: str, first, second):
        return (first, second) if direction == "1to2" else (second, first)

    def _target_dataset(self, direction: str) -> str:
        target = 2 if direction == "1to2" else 1
        return self.loader.domain_spec(target).dataset

    def train_vae(self, domain_id: int) -> Path:
        """Train and save the VAE of ``domain_id`` with its loss history."""
        train_set = self.loader.load_domain(domain_id, "train")
        held_out = take_subset(self.loader.load_domain(domain_id, "test"), HELD_OUT_SIZE, self._seed("eval"))
        rng = make_rng(self._seed(f"vae_{domain_id}"))
        vae = ModelFactory.create_vae(self.config, domain_id, seed=rng)
        result = train_vae(vae, train_set, self.config, held_out=held_out, seed=rng)
        path = self.store.save_vae(vae)
        self.store.save_history(f"vae_{domain_id}", result.history_frame())
        self._save_config()
        return path

    def _train_pair(self, direction: str, cond_map: ConditionalMap, vaes: Tuple[VaeModel, VaeModel],
                    seed: int, lambda_reg: Optional[float] = None):
        data = self.loader.load_domains("train")
        vae_src, vae_tgt = self._orient(direction, *vaes)
        data_src, data_tgt = self._orient(direction, *data)
        rng = make_rng(seed)
        pair = ModelFactory.create_transfer_pair(self.config, direction, cond_map, seed=rng, lambda_reg=lambda_reg)
        return train_transfer_pair(pair, vae_src, vae_tgt, data_src, data_tgt, self.config, seed=rng)

    def train_transfer(self, direction: str) -> List[Path]:
        """
        Train and save the transfer pair of ``direction`` against the saved VAEs.

        Raises:
            MissingPrerequisiteError: If a VAE checkpoint is missing.
            TransferError: If a VAE checkpoint changed during training.
        """
        vaes = self._load_vaes()
        digests = self.store.vae_digests()
        result = self._train_pair(direction, self.conditional_map(direction), vaes,
                                  self._seed(f"transfer_{direction}"))
        paths = self.store.save_pair(result.pair)
        self.store.save_history(f"transfer_{direction}", result.history_frame())
        if self.store.vae_digests() != digests:
            error_msg = "VAE checkpoints changed during transfer training"
            self.logger.error(error_msg)
            raise TransferError(error_msg)
        self._save_config()
        return list(paths.values())

    def train_classifier(self, domain_id: int) -> Path:
        """Train the evaluation classifier on the full training split of a domain's dataset."""
        dataset = self.loader.domain_spec(domain_id).dataset
        train_set = self.loader.load_dataset(dataset, "train")
        test_set = self.loader.load_dataset(dataset, "test")
        rng = make_rng(self._seed(f"classifier_{domain_id}"))
        model = ModelFactory.create_classifier(seed=rng)
        result = ClassifierTrainer(self.config).train(model, train_set, test_set, seed=rng)
        self.logger.info(f"Classifier for {dataset}: test accuracy {result.accuracy:.4f}")
        path = self.store.save_classifier(result.model, dataset, result.accuracy)
        self.store.save_history(f"classifier_{dataset}", result.history_frame())
        self._save_config()
        return path

    def transfer_pipeline(self, direction: str) -> TransferPipeline:
        """
        Raises:
            MissingPrerequisiteError: If a VAE or transfer checkpoint is missing.
        """
        vae_src, vae_tgt = self._orient(direction, *self._load_vaes())
        pair = self.store.load_pair(direction, self.conditional_map(direction))
        return TransferPipeline(pair, vae_src, vae_tgt, use_mean=self.config.use_mean_conditional)

    def _source_test_set(self, direction: str) -> LabeledImageSet:
        return self.loader.load_domain(1 if direction == "1to2" else 2, "test")

    def sample(self, source_class: int, count: int, direction: str = "1to2") -> Path:
        sampler = Sampler(self.config, self.transfer_pipeline(direction))
        path = sampler.sample_to_file(source_class, count, self._source_test_set(direction),
                                      seed=self._seed("sample", source_class))
        self._save_config()
        return path

    def evaluate(self, direction: str = "1to2") -> EvalReport:
        """
        Run the shuffled accuracy protocol and the diversity score; save the report.

        The first map is the run's own, evaluated from the saved checkpoints;
        each further map gets a freshly trained pair against the same frozen VAEs.
        """
        cfg = self.config
        pipeline = self.transfer_pipeline(direction)
        dataset = self._target_dataset(direction)
        classifier = self.store.load_classifier(dataset)
        accuracy = self.store.classifier_accuracy(dataset)
        if accuracy is not None and accuracy < CLASSIFIER_ACCURACY_BAR:
            self.logger.warning(f"Classifier test accuracy {accuracy:.4f} is below {CLASSIFIER_ACCURACY_BAR}")

        vaes = (pipeline.vae_src, pipeline.vae_tgt) if direction == "1to2" else (pipeline.vae_tgt, pipeline.vae_src)
        own_map = pipeline.conditional_map

        def build(cond_map: ConditionalMap, shuffle_seed: Optional[int]) -> TransferPipeline:
            if shuffle_seed is None:
                return pipeline
            result = self._train_pair(direction, cond_map, vaes, shuffle_seed)
            return TransferPipeline(result.pair, pipeline.vae_src, pipeline.vae_tgt, use_mean=cfg.use_mean_conditional)

        seeds = [None] + [self._seed("shuffle", k) for k in range(1, cfg.n_shuffles)]
        test_src = self._source_test_set(direction)
        report = shuffled_eval(
            build, cfg.n_shuffles, seeds,
            test_set_src=test_src, classifier=classifier, samples_per_class=cfg.samples_per_class,
            sources=own_map.sources, targets=own_map.targets, default_map=own_map,
            seed=self._seed("eval"), dataset=dataset, train_size=cfg.train_size,
        )
        if cfg.diversity_samples >= 2:
            report.diversity = diversity_score(pipeline, self._fixed_conditionals(test_src, own_map),
                                               cfg.diversity_samples, seed=self._seed("eval", 1))
        report.config = cfg.to_dict()
        report.save(cfg.output_dir)
        self._save_config()
        self.logger.info(
            f"Evaluation: mean accuracy {report.mean_shuffle_accuracy:.4f} over {cfg.n_shuffles} maps"
            + (f", diversity {report.diversity:.5f}" if report.diversity is not None else "")
        )
        return report

    def _fixed_conditionals(self, test_src: LabeledImageSet, cond_map: ConditionalMap) -> np.ndarray:
        """
        First test image of every source class of ``cond_map``.

        Raises:
            DataError: If a source class has no test image.
        """
        missing = [c for c in cond_map.sources if len(test_src.indices_of(c)) == 0]
        if missing:
            error_msg = f"No test images of source class(es) {missing} for the fixed conditionals"
            self.logger.error(error_msg)
            raise DataError(error_msg)
        return np.stack([test_src.images[test_src.indices_of(c)[0]] for c in cond_map.sources])

    def grid(self) -> List[Path]:
        """Write a two-row conditionals/transfers panel for every trained direction."""
        paths = []
        for direction in DIRECTIONS:
            try:
                pipeline = self.transfer_pipeline(direction)
            except MissingPrerequisiteError:
                if direction == "1to2":
                    raise
                self.logger.info(f"No {direction} checkpoints; skipping its grid")
                continue
            sampler = Sampler(self.config, pipeline)
            paths.append(sampler.panel_to_file(self._source_test_set(direction), self.config.grid_per_class,
                                               seed=self._seed("grid", DIRECTIONS.index(direction))))
        self._save_config()
        return paths

    def ablate(self, direction: str = "1to2") -> Path:
        """
        Compare diversity with the configured lambda_reg against lambda_reg = 0 on paired seeds.

        Both runs of a seed start from the same initialization and draw the
        same batches; only the regularizer weight differs.
        """
        cfg = self.config
        vaes = self._load_vaes()
        vae_src, vae_tgt = self._orient(direction, *vaes)
        cond_map = self.conditional_map(direction)
        x_fixed = self._fixed_conditionals(self._source_test_set(direction), cond_map)
        rows = []
        for k in range(max(cfg.n_shuffles, 1)):
            seed = self._seed("ablation", k)
            for lambda_reg in sorted({cfg.lambda_reg, 0.0}, reverse=True):
                result = self._train_pair(direction, cond_map, vaes, seed, lambda_reg=lambda_reg)
                pipeline = TransferPipeline(result.pair, vae_src, vae_tgt, use_mean=cfg.use_mean_conditional)
                score = diversity_score(pipeline, x_fixed, max(cfg.diversity_samples, 2), seed=seed)
                rows.append({"seed": seed, "lambda_reg": lambda_reg, "diversity": score,
                             "final_d_fake_mean": result.history[-1]["d_fake_mean"] if result.history else np.nan})
                self.logger.info(f"Ablation seed {seed} lambda_reg={lambda_reg}: diversity {score:.5f}")

        frame = pd.DataFrame(rows)
        path = cfg.output_dir / "ablation.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False)
        if cfg.lambda_reg > 0:
            by_seed = frame.pivot(index="seed", columns="lambda_reg", values="diversity")
            wins = int((by_seed[cfg.lambda_reg] >= by_seed[0.0]).sum())
            verdict = "holds" if wins * 2 > len(by_seed) else "does not hold"
            self.logger.info(
                f"Regularized diversity >= unregularized on {wins}/{len(by_seed)} seeds; majority check {verdict}"
            )
        self._save_config()
        return path

    def run_all(self) -> None:
        """Run every stage in order."""
        self.train_vae(1)
        self.train_vae(2)
        self.train_classifier(2)
        for direction in DIRECTIONS:
            self.train_transfer(direction)
        self.evaluate()
        self.grid()

    def run(self, args: argparse.Namespace) -> None:
        """
        Run the stage selected on the command line.
        """
        start_time = time.time()
        self.logger.info(f"Starting stage '{args.command}' (seed {self.config.seed}, out {self.config.out_dir})")
        try:
            if args.command == "train-vae":
                self.train_vae(args.domain)
            elif args.command == "train-transfer":
                self.train_transfer(args.direction)
            elif args.command == "train-classifier":
                self.train_classifier(args.domain)
            elif args.command == "sample":
                self.sample(args.source_class, args.count, args.direction)
            elif args.command == "eval":
                self.evaluate()
            elif args.command == "grid":
                self.grid()
            elif args.command == "ablate":
                self.ablate()
            elif args.command == "all":
                self.run_all()
            elapsed_time = time.time() - start_time
            self.logger.info(f"Stage '{args.command}' completed in {elapsed_time:.2f} seconds")
        except Exception as e:
            elapsed_time = time.time() - start_time
            self.logger.error(f"Stage '{args.command}' failed after {elapsed_time:.2f} seconds: {str(e)}")
            raise


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _ArgumentParser(add_help=False)
    common.add_argument('--config', '-c', type=str, default=None,
                        help=f'Path to a configuration file (default: {DEFAULT_CONFIG} if present)')
    common.add_argument('--seed', type=int, default=None, help='Master seed')
    common.add_argument('--out', type=str, default=None, help='Output directory')
    common.add_argument('--train-size', choices=['500', '1000', '2000', 'full'], default=None,
                        help='Per-domain training set size')
    common.add_argument('--no-reg', action='store_true', help='Set lambda_reg to 0')
    common.add_argument('--shuffles', type=int, default=None, help='Number of conditional maps to evaluate')

    parser = _ArgumentParser(description='Conditional latent domain transfer pipeline')
    commands = parser.add_subparsers(dest='command', required=True)

    vae = commands.add_parser('train-vae', parents=[common], help='Train one domain VAE')
    vae.add_argument('--domain', type=int, choices=[1, 2], required=True)

    transfer = commands.add_parser('train-transfer', parents=[common], help='Train one transfer pair')
    transfer.add_argument('--direction', choices=list(DIRECTIONS), required=True)

    classifier = commands.add_parser('train-classifier', parents=[common], help='Train the evaluation classifier')
    classifier.add_argument('--domain', type=int, choices=[1, 2], default=2)

    sample = commands.add_parser('sample', parents=[common], help='Write a grid of transfers of one class')
    sample.add_argument('--class', dest='source_class', type=int, required=True)
    sample.add_argument('--count', type=int, default=10)
    sample.add_argument('--direction', choices=list(DIRECTIONS), default='1to2')

    commands.add_parser('eval', parents=[common], help='Write the evaluation report')
    commands.add_parser('grid', parents=[common], help='Write conditionals/transfers panels')
    commands.add_parser('ablate', parents=[common], help='Compare diversity with and without lambda_reg')
    commands.add_parser('all', parents=[common], help='Run every stage')
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Main entry point for the CLI.

    Returns:
        0 on success, 1 on a usage or configuration error, 2 when a stage's
        prerequisite is missing, 3 when training diverged.
    """
    args = build_parser().parse_args(argv)
    if getattr(args, 'count', 1) < 1:
        print("error: --count must be at least 1", file=sys.stderr)
        return EXIT_USAGE

    try:
        config = apply_overrides(load_config(args.config), args)
    except ConfigError as e:
        print(f"Configuration error: {str(e)}", file=sys.stderr)
        return EXIT_USAGE

    setup_logging(config)

    try:
        Pipeline(config).run(args)
    except ConfigError as e:
        logging.error(f"Configuration error: {str(e)}")
        return EXIT_USAGE
    except MissingPrerequisiteError as e:
        logging.error(f"Missing prerequisite: {str(e)}")
        return EXIT_MISSING
    except NumericalError as e:
        logging.error(f"Numerical divergence: {str(e)}")
        return EXIT_DIVERGED
    except Exception as e:
        logging.error(f"Pipeline execution failed: {str(e)}", exc_info=True)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
