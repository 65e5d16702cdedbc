"""
Module implementing the conditional GAN that transfers latent codes between
two frozen VAEs.

For a class pair (i, j) of the conditional map, the generator G(eps, z_i)
maps prior noise, conditioned on a source-domain code of class i, into the
target VAE's latent space; the discriminator D(z_cond, z') judges whether z'
is a real class-j encoding under the class-j conditional z_cond.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, NamedTuple, Optional, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from src.latent_domain_transfer.checkpoint import state_digest
from src.latent_domain_transfer.config import RunConfig
from src.latent_domain_transfer.exceptions import DivergenceError, NumericalError, ShapeError, TransferError
from src.latent_domain_transfer.layers import Linear, Module
from src.latent_domain_transfer.loader import ConditionalMap, LabeledImageSet
from src.latent_domain_transfer.optim import Adam
from src.latent_domain_transfer.seeding import SeedLike, make_rng
from src.latent_domain_transfer.tensor import Tensor, as_tensor, backward, concat, no_grad
from src.latent_domain_transfer.vae import LatentCode, VaeModel, decode, encode, reparameterize

PROB_EPS = 1e-7
DIRECTIONS = ("1to2", "2to1")

logger = logging.getLogger(__name__)

CodeLike = Union[LatentCode, Tensor, np.ndarray]


def _codes(value: CodeLike) -> Tensor:
    return value.z if isinstance(value, LatentCode) else as_tensor(value)


def _check_batch(latent_dim: int, **batches: Tensor) -> None:
    sizes = {}
    for name, batch in batches.items():
        if batch.ndim != 2 or batch.shape[1] != latent_dim:
            raise ShapeError(f"{name} must be (batch, {latent_dim}), got {batch.shape}")
        sizes[name] = batch.shape[0]
    if len(set(sizes.values())) > 1:
        raise ShapeError(f"Batches differ in size: {sizes}")


def _hidden_stack(in_features: int, hidden: int, layers: int, rng: np.random.Generator) -> List[Linear]:
    return [Linear(in_features if k == 0 else hidden, hidden, rng) for k in range(layers)]


class GeneratorOutput(NamedTuple):
    output: Tensor
    gate: Tensor
    transformed: Tensor


class TransferGenerator(Module):
    """
    Fully connected generator with a gated interpolation output.

    The input is concat(z_cond, eps); the two heads give the transformed
    embedding t and the gate s = sigmoid(.), and the output is
    s * t + (1 - s) * eps.
    """

    def __init__(self, latent_dim: int = 100, hidden: int = 512, layers: int = 4,
                 lambda_reg: float = 0.1, rng: Optional[np.random.Generator] = None):
        rng = make_rng(rng)
        self.latent_dim = latent_dim
        self.lambda_reg = lambda_reg
        self.hidden = _hidden_stack(2 * latent_dim, hidden, layers, rng)
        self.transform_head = Linear(hidden, latent_dim, rng)
        self.gate_head = Linear(hidden, latent_dim, rng)

    def forward(self, eps: Tensor, z_cond: Tensor) -> GeneratorOutput:
        _check_batch(self.latent_dim, eps=eps, z_cond=z_cond)
        h = concat([z_cond, eps], axis=1)
        for layer in self.hidden:
            h = layer(h).relu()
        t = self.transform_head(h)
        s = self.gate_head(h).sigmoid()
        return GeneratorOutput(s * t + (1.0 - s) * eps, s, t)


class TransferDiscriminator(Module):
    """Fully connected discriminator on concat(z_cond, z_candidate), one logit per row."""

    def __init__(self, latent_dim: int = 100, hidden: int = 512, layers: int = 4,
                 rng: Optional[np.random.Generator] = None, zero_init_output: bool = False):
        rng = make_rng(rng)
        self.latent_dim = latent_dim
        self.hidden = _hidden_stack(2 * latent_dim, hidden, layers, rng)
        self.output = Linear(hidden, 1, rng, zero_init=zero_init_output)

    def forward(self, z_cond: Tensor, z_candidate: Tensor) -> Tensor:
        _check_batch(self.latent_dim, z_cond=z_cond, z_candidate=z_candidate)
        h = concat([z_cond, z_candidate], axis=1)
        for layer in self.hidden:
            h = layer(h).relu()
        return self.output(h).reshape(-1)


@dataclass
class TransferPair:
    """
    Generator and discriminator carrying one direction of the transfer.

    ``conditional_map`` pairs this direction's source classes with its
    target classes; for "2to1" it is the inverse of the run's map.
    """

    direction: str
    generator: TransferGenerator
    discriminator: TransferDiscriminator
    conditional_map: ConditionalMap

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}, got '{self.direction}'")
        if self.generator.latent_dim != self.discriminator.latent_dim:
            raise ShapeError(
                f"Generator latent_dim {self.generator.latent_dim} != "
                f"discriminator latent_dim {self.discriminator.latent_dim}"
            )

    @property
    def source_domain(self) -> int:
        return int(self.direction[0])

    @property
    def target_domain(self) -> int:
        return int(self.direction[-1])

    @property
    def latent_dim(self) -> int:
        return self.generator.latent_dim

    def check_vaes(self, vae_src: VaeModel, vae_tgt: VaeModel) -> None:
        """
        Raises:
            ShapeError: If either VAE's latent width differs from the pair's.
        """
        for vae in (vae_src, vae_tgt):
            if vae.latent_dim != self.latent_dim:
                raise ShapeError(f"VAE domain {vae.domain_id} has latent_dim {vae.latent_dim}, pair has {self.latent_dim}")

    def checkpoint_names(self) -> Dict[str, str]:
        return {"generator": f"gen_{self.direction}", "discriminator": f"disc_{self.direction}"}


def generate(gen: TransferGenerator, eps: CodeLike, z_cond: CodeLike, domain_id: int = 0) -> LatentCode:
    """
    Transfer conditional codes into the target latent space.

    Returns:
        LatentCode in ``domain_id``; class_id is carried over from ``z_cond``.
    """
    class_id = z_cond.class_id if isinstance(z_cond, LatentCode) else None
    out = gen(_codes(eps), _codes(z_cond)).output
    return LatentCode(out, domain_id=domain_id, class_id=class_id)


def discriminate(disc: TransferDiscriminator, z_cond_true: CodeLike, z_candidate: CodeLike) -> Tensor:
    """Probability, per row, that ``z_candidate`` is a real encoding under ``z_cond_true``."""
    return disc(_codes(z_cond_true), _codes(z_candidate)).sigmoid()


def _log_prob(p: Tensor) -> Tensor:
    return p.clip(PROB_EPS, 1.0 - PROB_EPS).log()


def _log_complement(p: Tensor) -> Tensor:
    return (1.0 - p.clip(PROB_EPS, 1.0 - PROB_EPS)).log()


class DiscriminatorLossTerms(NamedTuple):
    loss: Tensor
    p_real: Tensor
    p_fake: Tensor
    p_noise: Tensor


def discriminator_loss_terms(disc: TransferDiscriminator, z_real: CodeLike, z_fake: CodeLike,
                             eps_batch: CodeLike, z_cond: Optional[CodeLike] = None) -> DiscriminatorLossTerms:
    """
    Three-term conditional discriminator loss and the probabilities behind it.

    mean over the batch of
    -log D(c, z_real) - log(1 - D(c, z_fake)) - log(1 - D(c, eps))
    where the conditional c is ``z_cond`` when given and ``z_real`` otherwise.
    Probabilities are clamped to [1e-7, 1 - 1e-7] before the logs.
    """
    z_real, z_fake, eps_batch = _codes(z_real), _codes(z_fake), _codes(eps_batch)
    cond = _codes(z_cond) if z_cond is not None else z_real
    _check_batch(disc.latent_dim, z_real=z_real, z_fake=z_fake, eps_batch=eps_batch, z_cond=cond)

    p_real = discriminate(disc, cond, z_real)
    p_fake = discriminate(disc, cond, z_fake)
    p_noise = discriminate(disc, cond, eps_batch)
    total = _log_prob(p_real) + _log_complement(p_fake) + _log_complement(p_noise)
    return DiscriminatorLossTerms(-total.mean(), p_real, p_fake, p_noise)


def discriminator_loss(disc: TransferDiscriminator, z_real: CodeLike, z_fake: CodeLike,
                       eps_batch: CodeLike, z_cond: Optional[CodeLike] = None) -> Tensor:
    return discriminator_loss_terms(disc, z_real, z_fake, eps_batch, z_cond=z_cond).loss


def pullback_regularizer(eps_batch: CodeLike, generated: CodeLike, lambda_reg: float) -> Tensor:
    """Per-row (lambda_reg / n) * ||eps - G(eps, z)||^2 with n the latent width."""
    eps_batch, generated = _codes(eps_batch), _codes(generated)
    n = eps_batch.shape[1]
    return (eps_batch - generated).square().sum(axis=1) * (lambda_reg / n)


def generator_loss(gen: TransferGenerator, disc: TransferDiscriminator, z_cond_batch: CodeLike,
                   eps_batch: CodeLike, lambda_reg: Optional[float] = None,
                   z_real_batch: Optional[CodeLike] = None) -> Tensor:
    """
    Generator loss with the pull-back regularizer.

    mean over the batch of -log D(c, G(eps, z_cond)) + (lambda_reg / n) * ||eps - G(eps, z_cond)||^2.

    Args:
        lambda_reg: Regularizer weight; the generator's own when omitted.
        z_real_batch: Target-class encodings used as D's conditional c;
            ``z_cond_batch`` is used when omitted.
    """
    if lambda_reg is None:
        lambda_reg = gen.lambda_reg
    if lambda_reg < 0:
        raise ValueError(f"lambda_reg must be non-negative, got {lambda_reg}")
    z_cond_batch, eps_batch = _codes(z_cond_batch), _codes(eps_batch)
    cond = _codes(z_real_batch) if z_real_batch is not None else z_cond_batch

    fake = gen(eps_batch, z_cond_batch).output
    adversarial = -_log_prob(discriminate(disc, cond, fake))
    return (adversarial + pullback_regularizer(eps_batch, fake, lambda_reg)).mean()


@dataclass
class LatentCache:
    """
    Posterior parameters of one frozen VAE over its training images, per class.

    Drawing from the cache is the same as re-encoding the sampled images,
    because the VAE is frozen and its batchnorm layers run on running
    statistics.
    """

    domain_id: int
    alpha: float
    mu: Dict[int, np.ndarray] = field(default_factory=dict)
    sigma: Dict[int, np.ndarray] = field(default_factory=dict)

    @classmethod
    def build(cls, vae: VaeModel, data: LabeledImageSet, classes: Iterable[int],
              batch_size: int = 256) -> "LatentCache":
        """
        Raises:
            ValueError: If a requested class has no images.
        """
        cache = cls(vae.domain_id, vae.alpha)
        vae.eval()
        with no_grad():
            for class_id in classes:
                images = data.images[data.indices_of(class_id)]
                if len(images) == 0:
                    raise ValueError(f"Class {class_id} has no images in domain {vae.domain_id}")
                mus, sigmas = [], []
                for start in range(0, len(images), batch_size):
                    mu, sigma = encode(vae, images[start:start + batch_size])
                    mus.append(mu.data)
                    sigmas.append(sigma.data)
                cache.mu[class_id] = np.concatenate(mus)
                cache.sigma[class_id] = np.concatenate(sigmas)
        return cache

    def sample(self, class_id: int, batch: int, rng: np.random.Generator, use_mean: bool = False) -> LatentCode:
        """Codes of ``batch`` images of ``class_id`` drawn with replacement."""
        index = rng.integers(0, len(self.mu[class_id]), size=batch)
        mu = Tensor(self.mu[class_id][index])
        if use_mean:
            return LatentCode(mu, self.domain_id, class_id)
        sigma = Tensor(self.sigma[class_id][index])
        return reparameterize(mu, sigma, self.alpha, seed=rng, domain_id=self.domain_id, class_id=class_id)


@dataclass
class TransferTrainingResult:
    pair: TransferPair
    history: List[dict] = field(default_factory=list)

    def history_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.history)


class TransferTrainer:
    """
    Class for training one direction's generator and discriminator against
    two frozen VAEs.
    """

    def __init__(self, config: RunConfig):
        """
        Initialize the TransferTrainer with configuration.

        Args:
            config: Run configuration (steps, batch size, GAN learning rate,
                lambda_reg, use_mean_conditional, log_interval).
        """
        self.config = config
        self.logger = logging.getLogger(__name__)

    def train(self, pair: TransferPair, vae_src: VaeModel, vae_tgt: VaeModel, data_src: LabeledImageSet,
              data_tgt: LabeledImageSet, seed: SeedLike = None) -> TransferTrainingResult:
        """
        Alternate one discriminator and one generator update per step.

        Each step draws a class pair (i, j) from the pair's conditional map,
        class-i source codes as the generator's conditional and class-j
        target codes as real samples and as the discriminator's conditional.

        Raises:
            ShapeError: If the VAEs do not match the pair's latent width.
            DivergenceError: If a loss becomes non-finite.
            TransferError: If either VAE changed during training.
        """
        cfg = self.config
        pair.check_vaes(vae_src, vae_tgt)
        digests = (state_digest(vae_src.state_dict()), state_digest(vae_tgt.state_dict()))
        rng = make_rng(seed)
        gen, disc = pair.generator, pair.discriminator
        n, batch = pair.latent_dim, cfg.batch_size

        source_cache = LatentCache.build(vae_src, data_src, pair.conditional_map.sources)
        target_cache = LatentCache.build(vae_tgt, data_tgt, pair.conditional_map.targets)
        pairs = list(pair.conditional_map)

        gen_opt = Adam(gen.parameters(), lr=cfg.gan_lr, beta1=cfg.gan_beta1, beta2=cfg.adam_beta2)
        disc_opt = Adam(disc.parameters(), lr=cfg.gan_lr, beta1=cfg.gan_beta1, beta2=cfg.adam_beta2)
        gen.train()
        disc.train()
        result = TransferTrainingResult(pair)

        self.logger.info(
            f"Training transfer {pair.direction} for {cfg.transfer_steps} steps "
            f"(map {pair.conditional_map}, lambda_reg={gen.lambda_reg})"
        )
        steps = tqdm(range(1, cfg.transfer_steps + 1), desc=f"transfer_{pair.direction}",
                     disable=not self.logger.isEnabledFor(logging.INFO))
        for step in steps:
            source_class, target_class = pairs[rng.integers(len(pairs))]
            z_cond = source_cache.sample(source_class, batch, rng, use_mean=cfg.use_mean_conditional)
            z_real = target_cache.sample(target_class, batch, rng)
            d_cond = target_cache.sample(target_class, batch, rng)
            eps = Tensor(rng.standard_normal((batch, n)))
            try:
                with no_grad():
                    z_fake = generate(gen, eps, z_cond, domain_id=pair.target_domain)
                d_terms = discriminator_loss_terms(disc, z_real, z_fake, eps, z_cond=d_cond)
                backward(d_terms.loss)
                disc_opt.step()

                g_cond = target_cache.sample(target_class, batch, rng)
                g_eps = Tensor(rng.standard_normal((batch, n)))
                disc.requires_grad_(False)
                try:
                    g_loss = generator_loss(gen, disc, z_cond, g_eps, z_real_batch=g_cond)
                    backward(g_loss)
                finally:
                    disc.requires_grad_(True)
                gen_opt.step()
            except NumericalError as e:
                error_msg = f"Transfer {pair.direction} diverged at step {step}: {e}"
                self.logger.error(error_msg)
                raise DivergenceError(error_msg) from e

            row = {
                "step": step,
                "source_class": int(source_class),
                "target_class": int(target_class),
                "d_loss": d_terms.loss.item(),
                "g_loss": g_loss.item(),
                "d_real_mean": float(d_terms.p_real.data.mean()),
                "d_fake_mean": float(d_terms.p_fake.data.mean()),
            }
            result.history.append(row)
            if step % max(cfg.log_interval, 1) == 0 or step == cfg.transfer_steps:
                self.logger.info(
                    f"Transfer {pair.direction} step {step}: d_loss={row['d_loss']:.4f} "
                    f"g_loss={row['g_loss']:.4f} D(real)={row['d_real_mean']:.3f} D(fake)={row['d_fake_mean']:.3f}"
                )

        if (state_digest(vae_src.state_dict()), state_digest(vae_tgt.state_dict())) != digests:
            error_msg = f"VAE parameters changed while training transfer {pair.direction}"
            self.logger.error(error_msg)
            raise TransferError(error_msg)

        gen.eval()
        disc.eval()
        return result


def train_transfer_pair(pair: TransferPair, vae_src: VaeModel, vae_tgt: VaeModel, data_src: LabeledImageSet,
                        data_tgt: LabeledImageSet, config: RunConfig, seed: SeedLike = None) -> TransferTrainingResult:
    return TransferTrainer(config).train(pair, vae_src, vae_tgt, data_src, data_tgt, seed=seed)


def conditional_sample(pair: TransferPair, vae_src: VaeModel, vae_tgt: VaeModel, x_src: np.ndarray,
                       eps_seed: SeedLike, z_seed: SeedLike = None, use_mean: bool = False) -> np.ndarray:
    """
    Transfer source images into the target domain: g_tgt(G(eps, z_src)).

    Args:
        x_src: Source-domain images (batch, 1, 28, 28).
        eps_seed: Seed of the prior noise.
        z_seed: Seed of the reparameterization noise; drawn from the
            ``eps_seed`` stream after eps when omitted.
        use_mean: Condition on mu instead of a reparameterized sample.

    Returns:
        Target-domain images (batch, 1, 28, 28) in (-1, 1).
    """
    pair.check_vaes(vae_src, vae_tgt)
    vae_src.eval()
    vae_tgt.eval()
    rng = make_rng(eps_seed)
    with no_grad():
        mu, sigma = encode(vae_src, x_src)
        eps = Tensor(rng.standard_normal(mu.shape))
        if use_mean:
            code = LatentCode(mu, vae_src.domain_id)
        else:
            z_rng = make_rng(z_seed) if z_seed is not None else rng
            code = reparameterize(mu, sigma, vae_src.alpha, seed=z_rng, domain_id=vae_src.domain_id)
        transferred = generate(pair.generator, eps, code, domain_id=pair.target_domain)
        return decode(vae_tgt, transferred).data


class TransferPipeline:
    """
    A trained pair with its two VAEs, ready to transfer images.
    """

    def __init__(self, pair: TransferPair, vae_src: VaeModel, vae_tgt: VaeModel, use_mean: bool = False):
        pair.check_vaes(vae_src, vae_tgt)
        self.pair = pair
        self.vae_src = vae_src
        self.vae_tgt = vae_tgt
        self.use_mean = use_mean

    @property
    def conditional_map(self) -> ConditionalMap:
        return self.pair.conditional_map

    def transfer(self, x_src: np.ndarray, eps_seed: SeedLike, z_seed: SeedLike = None) -> np.ndarray:
        return conditional_sample(self.pair, self.vae_src, self.vae_tgt, x_src, eps_seed,
                                  z_seed=z_seed, use_mean=self.use_mean)

    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        """Source images passed through the source VAE with mean codes."""
        self.vae_src.eval()
        with no_grad():
            mu, _ = encode(self.vae_src, x)
            return decode(self.vae_src, mu).data
