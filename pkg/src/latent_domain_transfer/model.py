"""
Module for building the networks of a run and keeping their checkpoints.

ModelFactory creates every network from a RunConfig; ModelStore maps each
network to its checkpoint file in the output directory and saves or loads it.
"""

import logging
from pathlib import Path
from typing import Dict, Optional

import pandas as pd

from src.latent_domain_transfer.checkpoint import file_digest, load_module, save_module
from src.latent_domain_transfer.classifier import ClassifierModel
from src.latent_domain_transfer.config import RunConfig
from src.latent_domain_transfer.exceptions import MissingPrerequisiteError
from src.latent_domain_transfer.loader import ConditionalMap
from src.latent_domain_transfer.seeding import SeedLike, make_rng
from src.latent_domain_transfer.transfer import TransferDiscriminator, TransferGenerator, TransferPair
from src.latent_domain_transfer.vae import VaeModel


class ModelFactory:
    """
    Factory class for creating the networks of a run.
    """

    @staticmethod
    def create_vae(config: RunConfig, domain_id: int, seed: SeedLike = None) -> VaeModel:
        logger = logging.getLogger(__name__)
        logger.debug(f"Creating VAE for domain {domain_id} (latent_dim={config.latent_dim})")
        return VaeModel(
            domain_id,
            latent_dim=config.latent_dim,
            alpha=config.alpha,
            base_channels=config.base_channels,
            encoder_hidden=config.encoder_hidden,
            rng=make_rng(seed),
        )

    @staticmethod
    def create_transfer_pair(config: RunConfig, direction: str, conditional_map: ConditionalMap,
                             seed: SeedLike = None, lambda_reg: Optional[float] = None) -> TransferPair:
        """
        Create an untrained generator/discriminator pair.

        Args:
            config: Run configuration.
            direction: "1to2" or "2to1".
            conditional_map: Source -> target class law of this direction.
            seed: Initialization seed.
            lambda_reg: Overrides ``config.lambda_reg``.
        """
        logger = logging.getLogger(__name__)
        rng = make_rng(seed)
        lambda_reg = config.lambda_reg if lambda_reg is None else lambda_reg
        logger.debug(f"Creating transfer pair {direction} (map {conditional_map}, lambda_reg={lambda_reg})")
        generator = TransferGenerator(config.latent_dim, config.gan_hidden, config.gan_layers,
                                      lambda_reg=lambda_reg, rng=rng)
        discriminator = TransferDiscriminator(config.latent_dim, config.gan_hidden, config.gan_layers, rng=rng)
        return TransferPair(direction, generator, discriminator, conditional_map)

    @staticmethod
    def create_classifier(seed: SeedLike = None) -> ClassifierModel:
        return ClassifierModel(rng=make_rng(seed))


class ModelStore:
    """
    Class for saving and loading the checkpoints of one output directory.
    """

    def __init__(self, config: RunConfig):
        """
        Initialize the ModelStore with configuration.

        Args:
            config: Run configuration; checkpoints live in ``config.out_dir``.
        """
        self.config = config
        self.out_dir = config.output_dir
        self.logger = logging.getLogger(__name__)

    def vae_path(self, domain_id: int) -> Path:
        return self.out_dir / f"vae_{domain_id}.lbck"

    def pair_paths(self, direction: str) -> Dict[str, Path]:
        return {
            "generator": self.out_dir / f"gen_{direction}.lbck",
            "discriminator": self.out_dir / f"disc_{direction}.lbck",
        }

    def classifier_path(self, dataset: str) -> Path:
        return self.out_dir / f"classifier_{dataset}.lbck"

    def history_path(self, name: str) -> Path:
        return self.out_dir / f"{name}_history.csv"

    def save_vae(self, vae: VaeModel) -> Path:
        return save_module(vae, self.vae_path(vae.domain_id), f"vae_{vae.domain_id}")

    def load_vae(self, domain_id: int) -> VaeModel:
        """
        Raises:
            MissingPrerequisiteError: If the domain's VAE checkpoint is missing.
        """
        path = self.vae_path(domain_id)
        if not path.exists():
            error_msg = f"missing VAE checkpoint for domain {domain_id} ({path})"
            self.logger.error(error_msg)
            raise MissingPrerequisiteError(error_msg)
        vae = ModelFactory.create_vae(self.config, domain_id)
        load_module(vae, path, f"vae_{domain_id}")
        vae.eval()
        return vae

    def vae_digests(self) -> Dict[int, str]:
        return {domain_id: file_digest(self.vae_path(domain_id))
                for domain_id in (1, 2) if self.vae_path(domain_id).exists()}

    def save_pair(self, pair: TransferPair) -> Dict[str, Path]:
        paths = self.pair_paths(pair.direction)
        names = pair.checkpoint_names()
        save_module(pair.generator, paths["generator"], names["generator"])
        save_module(pair.discriminator, paths["discriminator"], names["discriminator"])
        return paths

    def load_pair(self, direction: str, conditional_map: ConditionalMap) -> TransferPair:
        """
        Raises:
            MissingPrerequisiteError: If either checkpoint of ``direction`` is missing.
        """
        paths = self.pair_paths(direction)
        for path in paths.values():
            if not path.exists():
                error_msg = f"missing transfer checkpoint for direction {direction} ({path})"
                self.logger.error(error_msg)
                raise MissingPrerequisiteError(error_msg)
        pair = ModelFactory.create_transfer_pair(self.config, direction, conditional_map)
        names = pair.checkpoint_names()
        load_module(pair.generator, paths["generator"], names["generator"])
        load_module(pair.discriminator, paths["discriminator"], names["discriminator"])
        pair.generator.eval()
        pair.discriminator.eval()
        return pair

    def save_classifier(self, model: ClassifierModel, dataset: str, test_accuracy: float) -> Path:
        path = save_module(model, self.classifier_path(dataset), f"classifier_{dataset}")
        accuracy_path = path.with_suffix(".accuracy")
        accuracy_path.write_text(f"test_accuracy={test_accuracy!r}\n")
        return path

    def load_classifier(self, dataset: str) -> ClassifierModel:
        """
        Raises:
            MissingPrerequisiteError: If the dataset's classifier checkpoint is missing.
        """
        path = self.classifier_path(dataset)
        if not path.exists():
            error_msg = f"missing classifier checkpoint for {dataset} ({path})"
            self.logger.error(error_msg)
            raise MissingPrerequisiteError(error_msg)
        model = ModelFactory.create_classifier()
        load_module(model, path, f"classifier_{dataset}")
        model.eval()
        return model

    def classifier_accuracy(self, dataset: str) -> Optional[float]:
        path = self.classifier_path(dataset).with_suffix(".accuracy")
        if not path.exists():
            return None
        return float(path.read_text().strip().split("=", 1)[1])

    def save_history(self, name: str, history: pd.DataFrame) -> Path:
        path = self.history_path(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        history.to_csv(path, index=False, float_format="%.8g")
        self.logger.info(f"Saved {name} history to {path}")
        return path
