import os
import sys

import numpy as np
import pytest

# Add the project root to the Python path to allow importing the package
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

# Import the create_test_config and setup_test_logging functions from smoke_test
from tests.smoke_test import create_test_config, setup_test_logging
from src.latent_domain_transfer.classifier import train_classifier
from src.latent_domain_transfer.loader import DataLoader
from src.latent_domain_transfer.model import ModelFactory
from src.latent_domain_transfer.tensor import current_graph
from src.latent_domain_transfer.transfer import TransferPipeline, train_transfer_pair
from src.latent_domain_transfer.vae import train_vae

# Change to project root directory for tests
os.chdir(os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))


@pytest.fixture(scope="session")
def config():
    """
    Fixture that provides a test configuration over synthetic IDX data.

    This fixture has session scope to avoid rewriting the datasets for each test.
    """
    config, _ = create_test_config()
    return config


@pytest.fixture(scope="session")
def logger():
    """
    Fixture that provides a logger for tests.

    This fixture has session scope to avoid recreating the logger for each test.
    """
    return setup_test_logging()


@pytest.fixture(scope="session")
def loader(config):
    return DataLoader(config)


@pytest.fixture(scope="module")
def domains(loader, logger):
    """
    Fixture that provides the (domain 1, domain 2) training sets.

    Module scope avoids re-splitting the data for each test in the same module.
    """
    logger.info("Loading training domains")
    return loader.load_domains("train")


@pytest.fixture(scope="module")
def vaes(config, domains, logger):
    """
    Fixture that provides both trained VAEs, in eval mode.

    This fixture has module scope since VAE training is the most expensive
    step and the frozen VAEs are shared by every transfer test of a module.
    """
    logger.info("Training VAEs")
    trained = []
    for domain_id, data in zip((1, 2), domains):
        vae = ModelFactory.create_vae(config, domain_id, seed=domain_id)
        train_vae(vae, data, config, seed=10 + domain_id)
        trained.append(vae)
    return tuple(trained)


@pytest.fixture(scope="module")
def trained_pair(config, loader, vaes, domains, logger):
    """
    Fixture that provides the trained 1to2 transfer pair.

    Args:
        config: The test configuration
        loader: The test data loader
        vaes: The frozen VAEs
        domains: The training domains
        logger: The test logger

    Returns:
        TransferPair: Generator and discriminator after training
    """
    logger.info("Training 1to2 transfer pair")
    pair = ModelFactory.create_transfer_pair(config, "1to2", loader.conditional_map(), seed=3)
    return train_transfer_pair(pair, vaes[0], vaes[1], domains[0], domains[1], config, seed=4).pair


@pytest.fixture(scope="module")
def classifier(config, loader, logger):
    """
    Fixture that provides a classifier trained on the full synthetic MNIST split.
    """
    logger.info("Training classifier")
    model, _ = train_classifier(loader.load_dataset("mnist", "train"), loader.load_dataset("mnist", "test"),
                                config, seed=5)
    return model


@pytest.fixture(scope="function")
def pipeline(trained_pair, vaes):
    """
    Fixture that provides a fresh TransferPipeline around the shared trained networks.
    """
    return TransferPipeline(trained_pair, vaes[0], vaes[1])


@pytest.fixture(scope="function")
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def fresh_graph():
    """
    Fixture that drops ops recorded but never differentiated by an earlier test.
    """
    current_graph().clear()
    yield
