"""
Module for conditional sampling from a trained transfer pipeline.

The Sampler draws source-domain images of a requested class from the test
split, transfers them and writes the results as PGM grids.
"""

import logging
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from src.latent_domain_transfer.config import RunConfig
from src.latent_domain_transfer.grid import conditional_panel, emit_grid
from src.latent_domain_transfer.loader import LabeledImageSet, sample_class_batch
from src.latent_domain_transfer.seeding import SeedLike, make_rng
from src.latent_domain_transfer.transfer import TransferPipeline


class Sampler:
    """
    Class for sampling transferred images from a trained pipeline.
    """

    def __init__(self, config: RunConfig, pipeline: TransferPipeline):
        """
        Initialize the Sampler with configuration and a trained pipeline.

        Args:
            config: Run configuration.
            pipeline: Trained TransferPipeline of one direction.
        """
        self.config = config
        self.pipeline = pipeline
        self.logger = logging.getLogger(__name__)

    def sample(self, source_class: int, count: int, data_src: LabeledImageSet,
               seed: SeedLike = None) -> Tuple[np.ndarray, np.ndarray]:
        """
        Transfer ``count`` source images of ``source_class``.

        Returns:
            (source images, transferred images), each (count, 1, 28, 28).

        Raises:
            ValueError: If the class is not a source of the pipeline's map
                or ``count`` < 1.
        """
        cond_map = self.pipeline.conditional_map
        if source_class not in cond_map.sources:
            error_msg = f"Class {source_class} is not a source class of map {cond_map}"
            self.logger.error(error_msg)
            raise ValueError(error_msg)

        rng = make_rng(seed)
        x_src = sample_class_batch(data_src, source_class, count, rng)
        outputs = self.pipeline.transfer(x_src, eps_seed=rng)
        self.logger.info(
            f"Sampled {count} transfers of class {source_class} -> {cond_map(source_class)} "
            f"({self.pipeline.pair.direction})"
        )
        return x_src, outputs

    def sample_to_file(self, source_class: int, count: int, data_src: LabeledImageSet,
                       path: Optional[Path] = None, seed: SeedLike = None) -> Path:
        """Sample and write the transfers as one grid (at most 10 per row)."""
        _, outputs = self.sample(source_class, count, data_src, seed=seed)
        if path is None:
            path = self.config.output_dir / f"sample_{self.pipeline.pair.direction}_class{source_class}.pgm"
        return emit_grid(outputs, cols=min(count, 10), path=path)

    def panel(self, data_src: LabeledImageSet, per_class: int, seed: SeedLike = None) -> np.ndarray:
        """
        Two-row panel over every source class: conditionals on top, transfers below.
        """
        rng = make_rng(seed)
        conditionals, outputs = [], []
        for source_class in self.pipeline.conditional_map.sources:
            x_src, transferred = self.sample(source_class, per_class, data_src, seed=rng)
            conditionals.append(x_src)
            outputs.append(transferred)
        return conditional_panel(np.concatenate(conditionals), np.concatenate(outputs))

    def panel_to_file(self, data_src: LabeledImageSet, per_class: int, path: Optional[Path] = None,
                      seed: SeedLike = None) -> Path:
        images = self.panel(data_src, per_class, seed=seed)
        if path is None:
            path = self.config.output_dir / f"grid_{self.pipeline.pair.direction}.pgm"
        return emit_grid(images, cols=len(images) // 2, path=path)
