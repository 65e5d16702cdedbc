"""
Module implementing the unconditional per-domain variational autoencoder.

The encoder f maps an image to (mu, sigma); the latent code is
z = mu + alpha * sigma * u with u ~ N(0, I); the decoder g maps z back to an
image in (-1, 1). Training minimizes lambda1 * reconstruction + lambda2 * KL.
"""

import logging
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from src.latent_domain_transfer.config import RunConfig
from src.latent_domain_transfer.conv import conv_output_size
from src.latent_domain_transfer.exceptions import DivergenceError, NumericalError, ShapeError
from src.latent_domain_transfer.layers import BatchNorm, Conv2d, ConvTranspose2d, Linear, Module, flatten
from src.latent_domain_transfer.loader import LabeledImageSet
from src.latent_domain_transfer.optim import Adam
from src.latent_domain_transfer.seeding import SeedLike, make_rng
from src.latent_domain_transfer.tensor import Tensor, as_tensor, backward, no_grad

IMAGE_SIZE = 28

logger = logging.getLogger(__name__)


@dataclass
class LatentCode:
    """
    A batch of points in one VAE's latent space.

    Attributes:
        z: Tensor of shape (batch, latent_dim).
        domain_id: Domain whose VAE the space belongs to.
        class_id: Class the codes were drawn for, when known.
    """

    z: Tensor
    domain_id: int
    class_id: Optional[int] = None

    @property
    def latent_dim(self) -> int:
        return self.z.shape[-1]


class VaeEncoder(Module):
    """Three stride-2 convolutions, a hidden linear layer and the mu / log-sigma heads."""

    def __init__(self, latent_dim: int, base_channels: int, hidden: int, rng: np.random.Generator):
        c = base_channels
        self.conv1 = Conv2d(1, c, 4, 2, 1, rng)
        self.bn1 = BatchNorm(c)
        self.conv2 = Conv2d(c, 2 * c, 4, 2, 1, rng)
        self.bn2 = BatchNorm(2 * c)
        self.conv3 = Conv2d(2 * c, 4 * c, 4, 2, 1, rng)
        self.bn3 = BatchNorm(4 * c)
        side = IMAGE_SIZE
        for _ in range(3):
            side = conv_output_size(side, 4, 2, 1)
        self.fc = Linear(4 * c * side * side, hidden, rng)
        self.mu_head = Linear(hidden, latent_dim, rng)
        # sigma starts at 1
        self.log_sigma_head = Linear(hidden, latent_dim, rng, zero_init=True)

    def forward(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        h = self.bn1(self.conv1(x)).relu()
        h = self.bn2(self.conv2(h)).relu()
        h = self.bn3(self.conv3(h)).relu()
        h = self.fc(flatten(h)).relu()
        return self.mu_head(h), self.log_sigma_head(h)


class VaeDecoder(Module):
    """A linear projection to (4c, 4, 4) and four transposed convolutions up to 1x28x28."""

    def __init__(self, latent_dim: int, base_channels: int, rng: np.random.Generator):
        c = base_channels
        self.channels = 4 * c
        self.fc = Linear(latent_dim, 4 * c * 16, rng)
        self.deconv1 = ConvTranspose2d(4 * c, 2 * c, 3, 2, 1, rng)  # 4 -> 7
        self.bn1 = BatchNorm(2 * c)
        self.deconv2 = ConvTranspose2d(2 * c, c, 4, 2, 1, rng)  # 7 -> 14
        self.bn2 = BatchNorm(c)
        self.deconv3 = ConvTranspose2d(c, c // 2, 4, 2, 1, rng)  # 14 -> 28
        self.bn3 = BatchNorm(c // 2)
        self.deconv4 = ConvTranspose2d(c // 2, 1, 3, 1, 1, rng)

    def forward(self, z: Tensor) -> Tensor:
        h = self.fc(z).relu().reshape(z.shape[0], self.channels, 4, 4)
        h = self.bn1(self.deconv1(h)).relu()
        h = self.bn2(self.deconv2(h)).relu()
        h = self.bn3(self.deconv3(h)).relu()
        return self.deconv4(h).tanh()


class VaeModel(Module):
    """
    Encoder/decoder pair of one domain.
    """

    def __init__(self, domain_id: int, latent_dim: int = 100, alpha: float = 0.1,
                 base_channels: int = 32, encoder_hidden: int = 256,
                 rng: Optional[np.random.Generator] = None):
        rng = make_rng(rng)
        self.domain_id = domain_id
        self.latent_dim = latent_dim
        self.alpha = alpha
        self.encoder = VaeEncoder(latent_dim, base_channels, encoder_hidden, rng)
        self.decoder = VaeDecoder(latent_dim, base_channels, rng)


def _image_tensor(x: Union[Tensor, np.ndarray]) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[1:] != (1, IMAGE_SIZE, IMAGE_SIZE):
        raise ShapeError(f"Expected images of shape (batch, 1, {IMAGE_SIZE}, {IMAGE_SIZE}), got {x.shape}")
    return x


def encode(model: VaeModel, x: Union[Tensor, np.ndarray]) -> Tuple[Tensor, Tensor]:
    """
    Encode images to the posterior parameters.

    Returns:
        (mu, sigma), each (batch, latent_dim); sigma = exp(log-sigma head) > 0.
    """
    mu, log_sigma = model.encoder(_image_tensor(x))
    return mu, log_sigma.exp()


def encode_mean(model: VaeModel, x: Union[Tensor, np.ndarray]) -> Tensor:
    mu, _ = model.encoder(_image_tensor(x))
    return mu


def reparameterize(mu: Tensor, sigma: Tensor, alpha: float, seed: SeedLike = None,
                   noise: Optional[np.ndarray] = None, domain_id: int = 0,
                   class_id: Optional[int] = None) -> LatentCode:
    """
    Draw z = mu + alpha * sigma * u with u ~ N(0, I).

    Args:
        mu: Posterior means.
        sigma: Posterior standard deviations.
        alpha: Coefficient applied to sigma; 0 gives z = mu exactly.
        seed: Seed or generator for u.
        noise: Explicit u, overriding ``seed``.
    """
    if alpha < 0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    if noise is None:
        noise = make_rng(seed).standard_normal(mu.shape)
    u = Tensor(noise, dtype=mu.dtype)
    return LatentCode(mu + (sigma * u) * alpha, domain_id=domain_id, class_id=class_id)


def decode(model: VaeModel, z: Union[LatentCode, Tensor, np.ndarray]) -> Tensor:
    """Decode latent codes to (batch, 1, 28, 28) images in (-1, 1)."""
    z = z.z if isinstance(z, LatentCode) else as_tensor(z)
    if z.ndim != 2 or z.shape[1] != model.latent_dim:
        raise ShapeError(f"Expected codes of shape (batch, {model.latent_dim}), got {z.shape}")
    return model.decoder(z)


def elbo_terms(mu: Tensor, sigma: Tensor) -> Tensor:
    """
    KL term of the evidence lower bound.

    KL(N(mu, sigma^2) || N(0, I)) = 1/2 * sum_d (mu_d^2 + sigma_d^2 - 1 - 2 log sigma_d),
    averaged over the batch.

    Raises:
        ValueError: If any sigma is non-positive.
    """
    if np.any(sigma.data <= 0):
        raise ValueError("sigma must be strictly positive")
    per_dim = mu.square() + sigma.square() - 1.0 - sigma.log() * 2.0
    return per_dim.sum(axis=1).mean() * 0.5


class VaeLossTerms(NamedTuple):
    loss: Tensor
    reconstruction: Tensor
    kl: Tensor


def vae_loss_terms(model: VaeModel, x: Union[Tensor, np.ndarray], lambda1: float, lambda2: float,
                   seed: SeedLike = None, noise: Optional[np.ndarray] = None) -> VaeLossTerms:
    """
    Total VAE objective and its two components.

    The reconstruction cost is the per-image sum of squared pixel errors,
    averaged over the batch, so it sits on the same per-image scale as KL.
    """
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("lambda1 and lambda2 must be non-negative")
    x = _image_tensor(x)
    mu, sigma = encode(model, x)
    code = reparameterize(mu, sigma, model.alpha, seed=seed, noise=noise, domain_id=model.domain_id)
    x_hat = decode(model, code)
    reconstruction = (x_hat - x).square().sum(axis=(1, 2, 3)).mean()
    kl = elbo_terms(mu, sigma)
    return VaeLossTerms(reconstruction * lambda1 + kl * lambda2, reconstruction, kl)


def vae_loss(model: VaeModel, x: Union[Tensor, np.ndarray], lambda1: float, lambda2: float,
             seed: SeedLike = None, noise: Optional[np.ndarray] = None) -> Tensor:
    """
    lambda1 * reconstruction + lambda2 * KL, averaged over the batch.

    Reconstruction is summed over the pixels of each image, not averaged, so
    for 28x28 images it is 784 times the per-pixel MSE reported by
    ``reconstruction_mse``. Both terms are per-image quantities.
    """
    return vae_loss_terms(model, x, lambda1, lambda2, seed=seed, noise=noise).loss


def reconstruction_mse(model: VaeModel, images: np.ndarray, batch_size: int = 256) -> float:
    """Per-pixel MSE of decode(encode_mean(x)) in eval mode."""
    was_training = model.training
    model.eval()
    total, count = 0.0, 0
    try:
        with no_grad():
            for start in range(0, len(images), batch_size):
                batch = images[start:start + batch_size]
                x_hat = decode(model, encode_mean(model, batch))
                total += float(np.sum((x_hat.data - batch) ** 2))
                count += batch.size
    finally:
        model.train(was_training)
    return total / max(count, 1)


@dataclass
class VaeTrainingResult:
    model: VaeModel
    history: List[dict] = field(default_factory=list)

    def history_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.history)


class VaeTrainer:
    """
    Class for training one domain's VAE with Adam over a fixed epoch budget.
    """

    def __init__(self, config: RunConfig):
        """
        Initialize the VaeTrainer with configuration.

        Args:
            config: Run configuration (epochs, batch size, learning rate,
                lambda1, lambda2).
        """
        self.config = config
        self.logger = logging.getLogger(__name__)

    def _initial_objective(self, model: VaeModel, data: LabeledImageSet, rng: np.random.Generator) -> dict:
        """Mean loss terms of the untrained model over ``data``, in eval mode and without updates."""
        cfg = self.config
        was_training = model.training
        model.eval()
        sums = np.zeros(3)
        batches = 0
        try:
            with no_grad():
                for start in range(0, len(data), cfg.batch_size):
                    try:
                        terms = vae_loss_terms(model, data.images[start:start + cfg.batch_size],
                                               cfg.lambda1, cfg.lambda2, seed=rng)
                    except NumericalError as e:
                        error_msg = f"VAE domain {model.domain_id} diverged at epoch 0: {e}"
                        self.logger.error(error_msg)
                        raise DivergenceError(error_msg) from e
                    sums += [terms.loss.item(), terms.reconstruction.item(), terms.kl.item()]
                    batches += 1
        finally:
            model.train(was_training)
        return dict(zip(("loss", "reconstruction", "kl"), sums / max(batches, 1)))

    def train(self, model: VaeModel, data: LabeledImageSet, held_out: Optional[LabeledImageSet] = None,
              seed: SeedLike = None) -> VaeTrainingResult:
        """
        Train ``model`` on ``data``.

        Each history row holds the epoch's mean loss, reconstruction and KL
        plus the held-out reconstruction MSE; row 0 is measured before any
        update. The model is returned in eval mode.

        Raises:
            ValueError: If ``data`` is empty.
            DivergenceError: If a loss becomes non-finite.
        """
        if len(data) == 0:
            error_msg = f"No training images for domain {model.domain_id}"
            self.logger.error(error_msg)
            raise ValueError(error_msg)

        cfg = self.config
        rng = make_rng(seed)
        optimizer = Adam(model.parameters(), lr=cfg.vae_lr, beta1=cfg.vae_beta1, beta2=cfg.adam_beta2)
        result = VaeTrainingResult(model)
        held_images = held_out.images if held_out is not None and len(held_out) else None

        initial = {"epoch": 0, **self._initial_objective(model, data, rng)}
        if held_images is not None:
            initial["held_out_mse"] = reconstruction_mse(model, held_images)
        result.history.append(initial)

        self.logger.info(
            f"Training VAE for domain {model.domain_id} on {len(data)} images for {cfg.vae_epochs} epochs"
        )
        epochs = tqdm(range(1, cfg.vae_epochs + 1), desc=f"vae_{model.domain_id}",
                      disable=not self.logger.isEnabledFor(logging.INFO))
        for epoch in epochs:
            model.train()
            order = rng.permutation(len(data))
            sums = np.zeros(3)
            batches = 0
            for start in range(0, len(order), cfg.batch_size):
                index = order[start:start + cfg.batch_size]
                if len(index) < 2:
                    continue
                try:
                    terms = vae_loss_terms(model, data.images[index], cfg.lambda1, cfg.lambda2, seed=rng)
                except NumericalError as e:
                    error_msg = f"VAE domain {model.domain_id} diverged at epoch {epoch}, batch {batches}: {e}"
                    self.logger.error(error_msg)
                    raise DivergenceError(error_msg) from e
                backward(terms.loss)
                optimizer.step()
                sums += [terms.loss.item(), terms.reconstruction.item(), terms.kl.item()]
                batches += 1
                self.logger.debug(f"epoch {epoch} batch {batches}: loss={terms.loss.item():.4f}")

            row = {"epoch": epoch, **dict(zip(("loss", "reconstruction", "kl"), sums / max(batches, 1)))}
            if held_images is not None:
                row["held_out_mse"] = reconstruction_mse(model, held_images)
            result.history.append(row)
            self.logger.info(
                f"VAE domain {model.domain_id} epoch {epoch}: loss={row['loss']:.4f} "
                f"reconstruction={row['reconstruction']:.4f} kl={row['kl']:.4f}"
                + (f" held_out_mse={row['held_out_mse']:.5f}" if "held_out_mse" in row else "")
            )

        model.eval()
        return result


def train_vae(model: VaeModel, data: LabeledImageSet, config: RunConfig,
              held_out: Optional[LabeledImageSet] = None, seed: SeedLike = None) -> VaeTrainingResult:
    return VaeTrainer(config).train(model, data, held_out=held_out, seed=seed)
