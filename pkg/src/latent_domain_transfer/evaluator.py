"""
Module for evaluating transfer pipelines.

Transferred images are labelled by a trained classifier; the accuracy of a
class pair (i, j) is the fraction of class-i transfers classified as j. The
shuffled protocol repeats this over several conditional maps and averages.
"""

import logging
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import yaml

from src.latent_domain_transfer.classifier import ClassifierModel, predict
from src.latent_domain_transfer.loader import (
    ConditionalMap,
    LabeledImageSet,
    ordered_conditional_map,
    sample_class_batch,
    shuffle_conditional_map,
)
from src.latent_domain_transfer.seeding import SeedLike, make_rng

logger = logging.getLogger(__name__)

DEFAULT_SEED_LABEL = "default"


class Transferer(Protocol):
    def transfer(self, x_src: np.ndarray, eps_seed: SeedLike, z_seed: SeedLike = None) -> np.ndarray:
        ...


def _seed_label(seed: Optional[int]) -> str:
    return DEFAULT_SEED_LABEL if seed is None else str(seed)


def _parse_seed(label: str) -> Optional[int]:
    return None if label in (DEFAULT_SEED_LABEL, "", "none") else int(label)


@dataclass
class PairResult:
    source_class: int
    target_class: int
    accuracy: float
    count: int
    shuffle_seed: Optional[int] = None

    @property
    def pair(self) -> str:
        return f"{self.source_class}:{self.target_class}"


@dataclass
class EvalReport:
    """
    Accuracy of one or more conditional maps, per class pair.

    Attributes:
        pairs: Per-pair results, tagged with the shuffle seed of their map
            (None for the run's own map).
        dataset: Name of the target dataset ("mnist" or "fashion").
        train_size: Per-domain training size (None for the full split).
        diversity: Optional diversity score of the run.
        config: Snapshot of the effective configuration.
    """

    pairs: List[PairResult] = field(default_factory=list)
    dataset: str = "mnist"
    train_size: Optional[int] = None
    diversity: Optional[float] = None
    config: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        for result in self.pairs:
            if not 0.0 <= result.accuracy <= 1.0:
                raise ValueError(f"Accuracy {result.accuracy} of pair {result.pair} outside [0, 1]")

    @property
    def shuffle_seeds(self) -> List[Optional[int]]:
        seeds = []
        for result in self.pairs:
            if result.shuffle_seed not in seeds:
                seeds.append(result.shuffle_seed)
        return seeds

    @property
    def overall(self) -> float:
        """Sample-weighted mean of the per-pair accuracies."""
        total = sum(result.count for result in self.pairs)
        if total == 0:
            return 0.0
        return sum(result.accuracy * result.count for result in self.pairs) / total

    def for_seed(self, seed: Optional[int]) -> "EvalReport":
        return EvalReport([r for r in self.pairs if r.shuffle_seed == seed], self.dataset, self.train_size)

    @property
    def shuffle_accuracies(self) -> Dict[Optional[int], float]:
        return {seed: self.for_seed(seed).overall for seed in self.shuffle_seeds}

    @property
    def mean_shuffle_accuracy(self) -> float:
        accuracies = list(self.shuffle_accuracies.values())
        return float(np.mean(accuracies)) if accuracies else 0.0

    def to_text(self) -> str:
        """Line-oriented ``key=value`` rendering; ``pair`` lines repeat."""
        lines = [
            f"dataset={self.dataset}",
            f"train_size={'full' if self.train_size is None else self.train_size}",
            f"shuffle_seeds={','.join(_seed_label(s) for s in self.shuffle_seeds)}",
            f"overall_accuracy={self.overall!r}",
            f"mean_shuffle_accuracy={self.mean_shuffle_accuracy!r}",
            f"diversity={'none' if self.diversity is None else repr(self.diversity)}",
        ]
        for result in self.pairs:
            lines.append(
                f"pair={_seed_label(result.shuffle_seed)},{result.pair},{result.accuracy!r},{result.count}"
            )
        if self.config:
            snapshot = yaml.safe_dump(self.config, default_flow_style=True, width=float("inf")).strip()
            lines.append(f"config={snapshot}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        """
        Parse the output of to_text. Derived lines (accuracies, seeds) are recomputed.

        Raises:
            ValueError: On a line without ``=`` or an unknown key.
        """
        report = cls()
        pairs = []
        for number, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            if "=" not in line:
                raise ValueError(f"Line {number}: expected key=value, got '{line}'")
            key, value = line.split("=", 1)
            if key == "dataset":
                report.dataset = value
            elif key == "train_size":
                report.train_size = None if value == "full" else int(value)
            elif key == "diversity":
                report.diversity = None if value == "none" else float(value)
            elif key == "pair":
                seed, pair, accuracy, count = value.split(",")
                source, target = pair.split(":")
                pairs.append(PairResult(int(source), int(target), float(accuracy), int(count), _parse_seed(seed)))
            elif key == "config":
                report.config = yaml.safe_load(value) or {}
            elif key not in ("shuffle_seeds", "overall_accuracy", "mean_shuffle_accuracy"):
                raise ValueError(f"Line {number}: unknown key '{key}'")
        report.pairs = pairs
        return report

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {
                "dataset": self.dataset,
                "train_size": "full" if self.train_size is None else self.train_size,
                "shuffle_seed": _seed_label(result.shuffle_seed),
                "pair": result.pair,
                "accuracy": result.accuracy,
            }
            for result in self.pairs
        ]
        return pd.DataFrame(rows, columns=["dataset", "train_size", "shuffle_seed", "pair", "accuracy"])

    def save(self, out_dir: Union[str, Path], stem: str = "eval_report") -> Tuple[Path, Path]:
        """Write ``<stem>.txt`` and ``<stem>.csv`` into ``out_dir``."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        text_path = out_dir / f"{stem}.txt"
        csv_path = out_dir / f"{stem}.csv"
        text_path.write_text(self.to_text())
        self.to_frame().to_csv(csv_path, index=False)
        logger.info(f"Saved evaluation report to {text_path} and {csv_path}")
        return text_path, csv_path


def eval_transfer_accuracy(pipeline: Transferer, cond_map: ConditionalMap, test_set_src: LabeledImageSet,
                           classifier: ClassifierModel, samples_per_class: int, seed: SeedLike = None,
                           shuffle_seed: Optional[int] = None, dataset: str = "mnist",
                           train_size: Optional[int] = None) -> EvalReport:
    """
    Classify ``samples_per_class`` transfers of every source class.

    Source images are drawn with replacement from the test split; each class
    uses its own image and noise seeds drawn from ``seed``.
    """
    if samples_per_class < 1:
        raise ValueError(f"samples_per_class must be at least 1, got {samples_per_class}")
    rng = make_rng(seed)
    results = []
    for source_class, target_class in cond_map:
        image_seed, eps_seed = rng.integers(0, 2**31, size=2)
        x_src = sample_class_batch(test_set_src, source_class, samples_per_class, int(image_seed))
        predictions = predict(classifier, pipeline.transfer(x_src, eps_seed=int(eps_seed)))
        accuracy = float(np.mean(predictions == target_class))
        results.append(PairResult(source_class, target_class, accuracy, samples_per_class, shuffle_seed))
        logger.info(f"Pair {source_class}->{target_class}: accuracy {accuracy:.4f} over {samples_per_class} samples")
    report = EvalReport(results, dataset=dataset, train_size=train_size)
    logger.info(f"Overall transfer accuracy {report.overall:.4f} (map {cond_map})")
    return report


def shuffled_eval(pipeline_builder: Callable[[ConditionalMap, Optional[int]], Transferer], n_shuffles: int = 3,
                  seeds: Optional[Sequence[Optional[int]]] = None, *, test_set_src: LabeledImageSet,
                  classifier: ClassifierModel, samples_per_class: int, sources: Sequence[int] = range(5),
                  targets: Sequence[int] = range(5, 10), default_map: Optional[ConditionalMap] = None,
                  seed: SeedLike = None, dataset: str = "mnist", train_size: Optional[int] = None) -> EvalReport:
    """
    Evaluate one pipeline per conditional map and merge the results.

    Args:
        pipeline_builder: Called with (map, shuffle seed); returns a trained
            pipeline for that map.
        n_shuffles: Number of maps to evaluate.
        seeds: Shuffle seed of each map; None stands for ``default_map``
            (the ordered pairing of ``sources`` and ``targets`` when omitted).
            Defaults to the default map followed by seeds 1, 2, ...

    Returns:
        EvalReport whose pairs are tagged by shuffle seed; its
        mean_shuffle_accuracy is the mean of the per-map accuracies.
    """
    if n_shuffles < 1:
        raise ValueError(f"n_shuffles must be at least 1, got {n_shuffles}")
    if seeds is None:
        seeds = [None] + list(range(1, n_shuffles))
    if len(seeds) < n_shuffles:
        raise ValueError(f"{n_shuffles} shuffles need as many seeds, got {len(seeds)}")
    default_map = default_map or ordered_conditional_map(sources, targets)
    rng = make_rng(seed)

    merged = EvalReport(dataset=dataset, train_size=train_size)
    for shuffle_seed in list(seeds)[:n_shuffles]:
        cond_map = default_map if shuffle_seed is None else shuffle_conditional_map(shuffle_seed, sources, targets)
        logger.info(f"Evaluating map {cond_map} (shuffle seed {_seed_label(shuffle_seed)})")
        pipeline = pipeline_builder(cond_map, shuffle_seed)
        report = eval_transfer_accuracy(pipeline, cond_map, test_set_src, classifier, samples_per_class,
                                        seed=int(rng.integers(0, 2**31)), shuffle_seed=shuffle_seed,
                                        dataset=dataset, train_size=train_size)
        merged.pairs.extend(report.pairs)
    logger.info(f"Mean accuracy over {n_shuffles} maps: {merged.mean_shuffle_accuracy:.4f}")
    return merged


def pairwise_distance(outputs: Sequence[np.ndarray]) -> float:
    """Mean over output pairs of the per-image root-mean-square pixel distance."""
    distances = []
    for a, b in combinations(outputs, 2):
        per_image = np.sqrt(np.mean((np.asarray(a, dtype=np.float64) - b) ** 2, axis=tuple(range(1, a.ndim))))
        distances.append(per_image.mean())
    return float(np.mean(distances))


def diversity_score(pipeline: Transferer, x_src_fixed: np.ndarray, n_eps: int, seed: SeedLike = None) -> float:
    """
    Spread of transfers of fixed conditionals under different noise draws.

    The conditional codes are held fixed (one reparameterization seed) while
    ``n_eps`` noise seeds vary; the score is 0 iff all outputs coincide.

    Raises:
        ValueError: If ``n_eps`` < 2.
    """
    if n_eps < 2:
        raise ValueError(f"n_eps must be at least 2, got {n_eps}")
    rng = make_rng(seed)
    z_seed = int(rng.integers(0, 2**31))
    eps_seeds = rng.integers(0, 2**31, size=n_eps)
    outputs = [pipeline.transfer(x_src_fixed, eps_seed=int(s), z_seed=z_seed) for s in eps_seeds]
    score = pairwise_distance(outputs)
    logger.debug(f"Diversity over {n_eps} noise draws: {score:.5f}")
    return score
