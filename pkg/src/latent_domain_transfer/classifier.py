"""
Module implementing the CNN classifier used to judge transferred images.

Two stride-2 convolutions and two linear layers map a 1x28x28 image to 10
logits. It is trained on the full training split of one dataset and scored
on that dataset's test split.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from src.latent_domain_transfer.config import RunConfig
from src.latent_domain_transfer.exceptions import DivergenceError, NumericalError, ShapeError
from src.latent_domain_transfer.layers import Conv2d, Linear, Module, flatten
from src.latent_domain_transfer.loader import LabeledImageSet
from src.latent_domain_transfer.optim import Adam
from src.latent_domain_transfer.seeding import SeedLike, make_rng
from src.latent_domain_transfer.tensor import Tensor, as_tensor, backward, no_grad

NUM_CLASSES = 10


class ClassifierModel(Module):
    def __init__(self, channels: Tuple[int, int] = (32, 64), hidden: int = 128,
                 rng: Optional[np.random.Generator] = None):
        rng = make_rng(rng)
        self.conv1 = Conv2d(1, channels[0], 4, 2, 1, rng)  # 28 -> 14
        self.conv2 = Conv2d(channels[0], channels[1], 4, 2, 1, rng)  # 14 -> 7
        self.fc1 = Linear(channels[1] * 7 * 7, hidden, rng)
        self.fc2 = Linear(hidden, NUM_CLASSES, rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1:] != (1, 28, 28):
            raise ShapeError(f"Classifier expects (batch, 1, 28, 28), got {x.shape}")
        h = self.conv1(x).relu()
        h = self.conv2(h).relu()
        h = self.fc1(flatten(h)).relu()
        return self.fc2(h)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    one_hot = np.eye(logits.shape[1], dtype=logits.dtype)[np.asarray(labels)]
    return -(logits.log_softmax(axis=1) * one_hot).sum(axis=1).mean()


def class_probabilities(model: ClassifierModel, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Softmax class probabilities, (batch, 10); rows sum to 1."""
    model.eval()
    chunks = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            log_probs = model(as_tensor(images[start:start + batch_size])).log_softmax(axis=1)
            chunks.append(np.exp(log_probs.data))
    return np.concatenate(chunks) if chunks else np.zeros((0, NUM_CLASSES))


def predict(model: ClassifierModel, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Predicted class id per image."""
    return class_probabilities(model, images, batch_size=batch_size).argmax(axis=1)


def accuracy(model: ClassifierModel, data: LabeledImageSet) -> float:
    if len(data) == 0:
        return 0.0
    return float(np.mean(predict(model, data.images) == data.labels))


@dataclass
class ClassifierTrainingResult:
    model: ClassifierModel
    accuracy: float
    history: List[dict] = field(default_factory=list)

    def history_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.history)


class ClassifierTrainer:
    """
    Class for training the evaluation classifier.
    """

    def __init__(self, config: RunConfig):
        self.config = config
        self.logger = logging.getLogger(__name__)

    def train(self, model: ClassifierModel, train_set: LabeledImageSet, test_set: LabeledImageSet,
              seed: SeedLike = None) -> ClassifierTrainingResult:
        """
        Train with Adam on cross-entropy and measure test accuracy after each epoch.

        Raises:
            ValueError: If ``train_set`` is empty.
            DivergenceError: If the loss becomes non-finite.
        """
        if len(train_set) == 0:
            error_msg = "No training images for the classifier"
            self.logger.error(error_msg)
            raise ValueError(error_msg)

        cfg = self.config
        rng = make_rng(seed)
        optimizer = Adam(model.parameters(), lr=cfg.classifier_lr, beta1=cfg.vae_beta1, beta2=cfg.adam_beta2)
        history = []
        test_accuracy = 0.0

        self.logger.info(f"Training classifier on {len(train_set)} images for {cfg.classifier_epochs} epochs")
        epochs = tqdm(range(1, cfg.classifier_epochs + 1), desc="classifier",
                      disable=not self.logger.isEnabledFor(logging.INFO))
        for epoch in epochs:
            model.train()
            order = rng.permutation(len(train_set))
            losses = []
            for start in range(0, len(order), cfg.batch_size):
                index = order[start:start + cfg.batch_size]
                try:
                    loss = cross_entropy(model(as_tensor(train_set.images[index])), train_set.labels[index])
                except NumericalError as e:
                    error_msg = f"Classifier diverged at epoch {epoch}: {e}"
                    self.logger.error(error_msg)
                    raise DivergenceError(error_msg) from e
                backward(loss)
                optimizer.step()
                losses.append(loss.item())

            test_accuracy = accuracy(model, test_set)
            history.append({"epoch": epoch, "loss": float(np.mean(losses)), "test_accuracy": test_accuracy})
            self.logger.info(f"Classifier epoch {epoch}: loss={np.mean(losses):.4f} test_accuracy={test_accuracy:.4f}")

        model.eval()
        return ClassifierTrainingResult(model, test_accuracy, history)


def train_classifier(train_set: LabeledImageSet, test_set: LabeledImageSet, config: RunConfig,
                     seed: SeedLike = None) -> Tuple[ClassifierModel, float]:
    """Build, train and score a classifier; returns (model, test accuracy)."""
    model = ClassifierModel(rng=make_rng(seed))
    result = ClassifierTrainer(config).train(model, train_set, test_set, seed=seed)
    return result.model, result.accuracy
