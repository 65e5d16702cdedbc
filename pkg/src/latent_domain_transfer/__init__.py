"""
Package initialization for latent_domain_transfer.

This file exposes key components from the package modules.
"""

from src.latent_domain_transfer.config import RunConfig, load_config, parse_config
from src.latent_domain_transfer.loader import ConditionalMap, DataLoader, LabeledImageSet
from src.latent_domain_transfer.model import ModelFactory, ModelStore
from src.latent_domain_transfer.pipeline import Pipeline, main
from src.latent_domain_transfer.transfer import TransferPair, TransferPipeline
from src.latent_domain_transfer.vae import VaeModel
