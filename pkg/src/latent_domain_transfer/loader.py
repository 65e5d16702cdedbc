"""
Module for loading and preparing the image datasets.

This module parses the IDX files of MNIST and Fashion-MNIST, normalizes the
images to [-1, 1], splits classes into the two domains and provides the
conditional maps that pair domain-1 classes with domain-2 classes.
"""

import gzip
import logging
import struct
from dataclasses import dataclass
from itertools import permutations
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, Iterator, Mapping, Optional, Sequence, Tuple

import numpy as np

from src.latent_domain_transfer.config import RunConfig
from src.latent_domain_transfer.exceptions import ConfigError, FormatError, MissingPrerequisiteError
from src.latent_domain_transfer.seeding import SeedLike, derive_seed, make_rng

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

IDX_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

FASHION_LABELS = (
    "T-shirt", "Trouser", "Pullover", "Dress", "Coat",
    "Sandal", "Shirt", "Sneaker", "Bag", "Ankle boot",
)


def parse_idx_images(payload: bytes) -> np.ndarray:
    """
    Parse an IDX image file.

    Args:
        payload: Raw (decompressed) file contents.

    Returns:
        uint8 array of shape (N, 1, H, W) with values 0-255.

    Raises:
        FormatError: On a wrong magic number or a truncated payload.
    """
    if len(payload) < 16:
        raise FormatError("IDX image header truncated")
    magic, count, rows, cols = struct.unpack(">IIII", payload[:16])
    if magic == LABEL_MAGIC:
        raise FormatError("label file passed as images")
    if magic != IMAGE_MAGIC:
        raise FormatError(f"Bad IDX image magic 0x{magic:08x}")
    expected = count * rows * cols
    if len(payload) - 16 < expected:
        raise FormatError(f"IDX image payload truncated: expected {expected} bytes, got {len(payload) - 16}")
    return np.frombuffer(payload, dtype=np.uint8, count=expected, offset=16).reshape(count, 1, rows, cols)


def parse_idx_labels(payload: bytes) -> np.ndarray:
    """
    Parse an IDX label file into an int64 array of class ids 0-9.

    Raises:
        FormatError: On a wrong magic number, a truncated payload or a
            label outside 0-9.
    """
    if len(payload) < 8:
        raise FormatError("IDX label header truncated")
    magic, count = struct.unpack(">II", payload[:8])
    if magic == IMAGE_MAGIC:
        raise FormatError("image file passed as labels")
    if magic != LABEL_MAGIC:
        raise FormatError(f"Bad IDX label magic 0x{magic:08x}")
    if len(payload) - 8 < count:
        raise FormatError(f"IDX label payload truncated: expected {count} bytes, got {len(payload) - 8}")
    labels = np.frombuffer(payload, dtype=np.uint8, count=count, offset=8).astype(np.int64)
    if np.any(labels > 9):
        bad = int(labels[labels > 9][0])
        raise FormatError(f"Label {bad} out of range 0-9")
    return labels


def read_idx_file(path: Path) -> bytes:
    """Read an IDX file, decompressing gzip transparently (``path`` or ``path.gz``)."""
    if not path.exists() and path.with_name(path.name + ".gz").exists():
        path = path.with_name(path.name + ".gz")
    if not path.exists():
        raise MissingPrerequisiteError(f"File not found: {path}")
    payload = path.read_bytes()
    if payload[:2] == b"\x1f\x8b":
        payload = gzip.decompress(payload)
    return payload


def normalize(raw: np.ndarray) -> np.ndarray:
    """
    Map pixel values 0-255 to [-1, 1] by v / 127.5 - 1.

    Raises:
        ValueError: If any value lies outside [0, 255].
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size and (raw.min() < 0 or raw.max() > 255):
        raise ValueError(f"Pixel values must lie in [0, 255], got [{raw.min()}, {raw.max()}]")
    return (raw / 127.5 - 1.0).astype(np.float32)


@dataclass(frozen=True)
class LabeledImageSet:
    """
    Images in [-1, 1] with their class labels. Arrays are read-only.

    Attributes:
        images: float32 array of shape (N, 1, H, W).
        labels: int64 array of shape (N,).
    """

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < -1.0 or self.images.max() > 1.0):
            raise ValueError("Image values must lie in [-1, 1]")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def classes(self) -> Tuple[int, ...]:
        return tuple(int(c) for c in np.unique(self.labels))

    def indices_of(self, class_id: int) -> np.ndarray:
        return np.flatnonzero(self.labels == class_id)

    def subset(self, indices: Sequence[int]) -> "LabeledImageSet":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledImageSet(self.images[indices], self.labels[indices])


@dataclass(frozen=True)
class DomainSpec:
    """The classes (of one dataset) that make up a domain."""

    domain_id: int
    class_set: FrozenSet[int]
    dataset: str = "mnist"


@dataclass(frozen=True)
class ConditionalMap:
    """
    Bijection pairing domain-1 classes with domain-2 classes.
    """

    pairs: Tuple[Tuple[int, int], ...]

    def __post_init__(self):
        sources = [s for s, _ in self.pairs]
        targets = [t for _, t in self.pairs]
        if len(set(sources)) != len(sources) or len(set(targets)) != len(targets):
            raise ValueError(f"Conditional map is not a bijection: {self.pairs}")

    @classmethod
    def from_dict(cls, mapping: Mapping[int, int]) -> "ConditionalMap":
        return cls(tuple(sorted((int(s), int(t)) for s, t in mapping.items())))

    @classmethod
    def parse(cls, text: str) -> "ConditionalMap":
        """Parse ``"0:5,1:6"`` (``->`` is accepted in place of ``:``)."""
        pairs = {}
        for part in text.replace("->", ":").replace(" ", "").split(","):
            if not part:
                continue
            source, target = part.split(":")
            if int(source) in pairs:
                raise ValueError(f"Source class {source} is mapped twice")
            pairs[int(source)] = int(target)
        return cls.from_dict(pairs)

    def __call__(self, source_class: int) -> int:
        return self.as_dict()[source_class]

    def __iter__(self) -> Iterator[Tuple[int, int]]:
        return iter(self.pairs)

    def __len__(self) -> int:
        return len(self.pairs)

    def __str__(self) -> str:
        return ",".join(f"{s}:{t}" for s, t in self.pairs)

    def as_dict(self) -> Dict[int, int]:
        return dict(self.pairs)

    @property
    def sources(self) -> Tuple[int, ...]:
        return tuple(s for s, _ in self.pairs)

    @property
    def targets(self) -> Tuple[int, ...]:
        return tuple(t for _, t in self.pairs)

    def inverse(self) -> "ConditionalMap":
        return ConditionalMap.from_dict({t: s for s, t in self.pairs})

    def covers(self, sources: Iterable[int], targets: Iterable[int]) -> bool:
        return set(self.sources) == set(sources) and set(self.targets) == set(targets)


def default_conditional_map() -> ConditionalMap:
    """The MNIST -> MNIST law {0 -> 5, 1 -> 6, 2 -> 7, 3 -> 8, 4 -> 9}."""
    return ordered_conditional_map(range(5), range(5, 10))


def ordered_conditional_map(sources: Iterable[int], targets: Iterable[int]) -> ConditionalMap:
    """Pair the i-th smallest source class with the i-th smallest target class."""
    return ConditionalMap(tuple(zip(sorted(sources), sorted(targets))))


def shuffle_conditional_map(seed: SeedLike, sources: Iterable[int] = range(5),
                            targets: Iterable[int] = range(5, 10)) -> ConditionalMap:
    """A uniformly random bijection from ``sources`` onto ``targets``, fixed by ``seed``."""
    sources, targets = sorted(sources), sorted(targets)
    shuffled = make_rng(seed).permutation(targets)
    return ConditionalMap(tuple((s, int(t)) for s, t in zip(sources, shuffled)))


def all_conditional_maps(sources: Iterable[int] = range(5),
                         targets: Iterable[int] = range(5, 10)) -> Tuple[ConditionalMap, ...]:
    sources = sorted(sources)
    return tuple(ConditionalMap(tuple(zip(sources, perm))) for perm in permutations(sorted(targets)))


def select_classes(data: LabeledImageSet, class_set: Iterable[int]) -> LabeledImageSet:
    """The images whose label is in ``class_set``, in original order."""
    mask = np.isin(data.labels, list(class_set))
    return data.subset(np.flatnonzero(mask))


def split_domains(data: LabeledImageSet, spec1: DomainSpec, spec2: DomainSpec,
                  strict: bool = False) -> Tuple[LabeledImageSet, LabeledImageSet]:
    """
    Partition one dataset into the two domains' class sets.

    Raises:
        ValueError: If the class sets overlap, or if ``strict`` and some
            label belongs to neither domain.
    """
    if spec1.class_set & spec2.class_set:
        raise ValueError(f"Domain class sets overlap: {sorted(spec1.class_set & spec2.class_set)}")
    if strict:
        stray = set(data.classes) - spec1.class_set - spec2.class_set
        if stray:
            raise ValueError(f"Labels {sorted(stray)} belong to neither domain")
    return select_classes(data, spec1.class_set), select_classes(data, spec2.class_set)


def take_subset(data: LabeledImageSet, size: Optional[int], seed: SeedLike) -> LabeledImageSet:
    """The first ``size`` examples after a seeded shuffle; everything when ``size`` is None."""
    if size is None or size >= len(data):
        return data
    order = make_rng(seed).permutation(len(data))
    return data.subset(np.sort(order[:size]))


def sample_class_indices(data: LabeledImageSet, class_id: int, batch: int, seed: SeedLike) -> np.ndarray:
    """
    Uniform with-replacement draws of indices of ``class_id``.

    Raises:
        ValueError: If the class is absent or batch < 1.
    """
    if batch < 1:
        raise ValueError(f"batch must be at least 1, got {batch}")
    candidates = data.indices_of(class_id)
    if len(candidates) == 0:
        raise ValueError(f"Class {class_id} is absent from the data")
    return candidates[make_rng(seed).integers(0, len(candidates), size=batch)]


def sample_class_batch(data: LabeledImageSet, class_id: int, batch: int, seed: SeedLike) -> np.ndarray:
    """A (batch, 1, H, W) draw of images of ``class_id``."""
    return data.images[sample_class_indices(data, class_id, batch, seed)]


class DataLoader:
    """
    Class for loading the datasets and domains a run is configured with.
    """

    def __init__(self, config: RunConfig):
        """
        Initialize the DataLoader with configuration.

        Args:
            config: Run configuration holding dataset directories, domain
                class sets and the training subset size.
        """
        self.config = config
        self.logger = logging.getLogger(__name__)
        self._cache: Dict[Tuple[str, str], LabeledImageSet] = {}

    def dataset_dir(self, dataset: str) -> Path:
        return Path(self.config.mnist_dir if dataset == "mnist" else self.config.fashion_dir)

    def load_dataset(self, dataset: str, split: str) -> LabeledImageSet:
        """
        Load and normalize one split ("train" or "test") of a dataset.

        Raises:
            MissingPrerequisiteError: If an IDX file is missing.
            FormatError: If a file is malformed or images and labels disagree.
        """
        key = (dataset, split)
        if key in self._cache:
            return self._cache[key]

        image_name, label_name = IDX_FILES[split]
        directory = self.dataset_dir(dataset)
        self.logger.info(f"Loading {dataset} {split} split from {directory}")
        try:
            images = parse_idx_images(read_idx_file(directory / image_name))
            labels = parse_idx_labels(read_idx_file(directory / label_name))
        except (FormatError, MissingPrerequisiteError) as e:
            error_msg = f"Error loading {dataset} {split}: {str(e)}"
            self.logger.error(error_msg)
            raise type(e)(error_msg) from e

        if len(images) != len(labels):
            error_msg = f"{dataset} {split}: {len(images)} images but {len(labels)} labels"
            self.logger.error(error_msg)
            raise FormatError(error_msg)

        data = LabeledImageSet(normalize(images), labels)
        self.logger.debug(f"Loaded {len(data)} {dataset} {split} images of shape {images.shape[1:]}")
        self._cache[key] = data
        return data

    def domain_spec(self, domain_id: int) -> DomainSpec:
        if domain_id == 1:
            return DomainSpec(1, frozenset(self.config.domain1_classes), "mnist")
        if domain_id == 2:
            return DomainSpec(2, frozenset(self.config.domain2_classes), self.config.domain2_dataset)
        raise ValueError(f"domain_id must be 1 or 2, got {domain_id}")

    def load_domains(self, split: str) -> Tuple[LabeledImageSet, LabeledImageSet]:
        """
        Both domains of a split; training splits are cut to ``train_size``.
        """
        spec1, spec2 = self.domain_spec(1), self.domain_spec(2)
        if spec1.dataset == spec2.dataset:
            domain1, domain2 = split_domains(
                self.load_dataset(spec1.dataset, split), spec1, spec2, strict=self.config.strict_domains
            )
        else:
            domain1 = select_classes(self.load_dataset(spec1.dataset, split), spec1.class_set)
            domain2 = select_classes(self.load_dataset(spec2.dataset, split), spec2.class_set)

        if split == "train":
            domain1 = take_subset(domain1, self.config.train_size, derive_seed(self.config.seed, "subset_1"))
            domain2 = take_subset(domain2, self.config.train_size, derive_seed(self.config.seed, "subset_2"))
        self.logger.info(f"Domain sizes ({split}): domain 1 = {len(domain1)}, domain 2 = {len(domain2)}")
        return domain1, domain2

    def load_domain(self, domain_id: int, split: str) -> LabeledImageSet:
        return self.load_domains(split)[domain_id - 1]

    def conditional_map(self) -> ConditionalMap:
        """
        The domain-1 -> domain-2 law of this run.

        An explicit ``conditional_map`` wins, then ``shuffle_seed``, then the
        ordered pairing of the two class sets.
        """
        sources, targets = self.config.domain1_classes, self.config.domain2_classes
        if self.config.conditional_map:
            try:
                cond_map = ConditionalMap.parse(self.config.conditional_map)
            except ValueError as e:
                raise ConfigError(f"Invalid conditional_map '{self.config.conditional_map}': {e}") from None
            if not cond_map.covers(sources, targets):
                raise ConfigError(f"Conditional map {cond_map} does not pair {sources} with {targets}")
            return cond_map
        if self.config.shuffle_seed is not None:
            return shuffle_conditional_map(self.config.shuffle_seed, sources, targets)
        return ordered_conditional_map(sources, targets)
