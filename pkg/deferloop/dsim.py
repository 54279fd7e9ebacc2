"""
Expert-input similarity priors (dSim).
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import polars as pl
from scipy.spatial.distance import cdist, pdist

from deferloop.core import Sample, SimplexVector, normalize
from deferloop.exceptions import ConfigError, ParseError

logger = logging.getLogger(__name__)

DEFAULT_CLASSIFIER_WEIGHT = 0.1

Kernel = Callable[[np.ndarray, np.ndarray], np.ndarray]


class SimilarityPrior(Protocol):
    """Anything that yields per-sample prior weights over the m slots."""

    n_slots: int

    def prior_weights(self, features: np.ndarray, groups: np.ndarray) -> np.ndarray:
        ...

    def expert_prior_weights(self, features: np.ndarray, groups: np.ndarray) -> np.ndarray:
        ...


def _normalize_with_fallback(raw: np.ndarray, keep_classifier: bool = True) -> np.ndarray:
    """
    Row-normalize (N, m) similarity rows.

    Rows whose expert entries are all zero get uniform expert weights first.
    With ``keep_classifier=False`` the classifier column is zeroed.
    """
    rows = np.array(raw, dtype=float, copy=True)
    if not keep_classifier:
        rows[:, -1] = 0.0
    if rows.shape[1] > 1:
        empty = ~np.any(rows[:, :-1] > 0, axis=1)
        rows[empty, :-1] = 1.0
    else:
        rows[:, -1] = 1.0
    return normalize(rows)


@dataclass(frozen=True)
class DSimTable:
    """
    Per-category similarity table.

    Args:
        values: (slots, categories) entries in [0, 1]; the last slot is the classifier
        category_names: Column names, position = group id
        slot_names: Row names (expert ids followed by ``classifier``)
    """

    values: np.ndarray
    category_names: Tuple[str, ...]
    slot_names: Tuple[str, ...] = ()

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 2:
            raise ConfigError("dSim table must be two-dimensional")
        if values.shape[1] != len(self.category_names):
            raise ConfigError(
                f"dSim table has {values.shape[1]} columns for {len(self.category_names)} categories"
            )
        if np.any(values < 0) or np.any(values > 1) or not np.all(np.isfinite(values)):
            raise ConfigError("dSim entries must lie in [0, 1]")
        dead = [
            self.category_names[c] for c in range(values.shape[1]) if not np.any(values[:, c] > 0)
        ]
        if dead:
            raise ConfigError(f"dSim categories without a positive entry: {dead}")
        slot_names = tuple(self.slot_names) or tuple(
            [f"e{i + 1}" for i in range(values.shape[0] - 1)] + ["classifier"]
        )
        if len(slot_names) != values.shape[0]:
            raise ConfigError("dSim slot names do not match table rows")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "category_names", tuple(self.category_names))
        object.__setattr__(self, "slot_names", slot_names)

    @property
    def n_slots(self) -> int:
        return self.values.shape[0]

    @property
    def n_categories(self) -> int:
        return self.values.shape[1]

    def prior(self, group: int) -> SimplexVector:
        """Normalized column for one category, uniform over experts if they are all zero."""
        return _normalize_with_fallback(self.values[:, group][None, :])[0]

    def prior_weights(self, features: np.ndarray, groups: np.ndarray) -> np.ndarray:
        return _normalize_with_fallback(self.values[:, np.asarray(groups, dtype=np.int64)].T)

    def expert_prior_weights(self, features: np.ndarray, groups: np.ndarray) -> np.ndarray:
        """Prior rows with the classifier slot zeroed, as mixed in by Smooth-Matching."""
        raw = self.values[:, np.asarray(groups, dtype=np.int64)].T
        return _normalize_with_fallback(raw, keep_classifier=False)

    def to_frame(self) -> pl.DataFrame:
        columns = {"slot": list(self.slot_names)}
        for c, name in enumerate(self.category_names):
            columns[name] = self.values[:, c]
        return pl.DataFrame(columns)


def make_cluster_dsim(s: float, classifier_weight: float = DEFAULT_CLASSIFIER_WEIGHT) -> DSimTable:
    """
    Two-expert table: e1 scores 1-s on orange and s on blue, e2 the reverse.

    Raises:
        ConfigError: If s is outside [0, 0.5]
    """
    if not 0.0 <= s <= 0.5:
        raise ConfigError(f"cluster similarity s must lie in [0, 0.5], got {s}")
    values = np.array(
        [
            [1.0 - s, s],
            [s, 1.0 - s],
            [classifier_weight, classifier_weight],
        ]
    )
    return DSimTable(values, ("orange", "blue"), ("e1", "e2", "classifier"))


def make_cm_dsim(
    n_s: int,
    rng: np.random.Generator,
    n_majority: int = 30,
    n_minority: int = 10,
    classifier_weight: float = DEFAULT_CLASSIFIER_WEIGHT,
) -> DSimTable:
    """
    Content-moderation table with n_s known-good experts per dialect.

    n_s minority-dialect experts are drawn first, then n_s majority-dialect
    experts, each without replacement. Members score 1 on their own group.

    Raises:
        ConfigError: If n_s is negative or exceeds either expert pool
    """
    if n_s < 0 or n_s > min(n_majority, n_minority):
        raise ConfigError(f"n_s must lie in [0, {min(n_majority, n_minority)}], got {n_s}")
    n_experts = n_majority + n_minority
    values = np.zeros((n_experts + 1, 2))
    minority = rng.choice(np.arange(n_majority, n_experts), size=n_s, replace=False)
    majority = rng.choice(np.arange(n_majority), size=n_s, replace=False)
    values[majority, 0] = 1.0
    values[minority, 1] = 1.0
    values[-1, :] = classifier_weight
    logger.debug("cm dSim: majority set %s, minority set %s", sorted(majority), sorted(minority))
    return DSimTable(values, ("non-AAE", "AAE"))


def uniform_dsim(
    n_experts: int,
    category_names: Sequence[str],
    classifier_weight: float = 1.0,
) -> DSimTable:
    """Uninformative table: every expert scores 1 everywhere."""
    values = np.ones((n_experts + 1, len(category_names)))
    values[-1, :] = classifier_weight
    return DSimTable(values, tuple(category_names))


def load_dsim_table(path: Union[str, Path]) -> DSimTable:
    """
    Read a table written as CSV: a ``slot`` column followed by one column per category.

    Raises:
        ParseError: If the file cannot be parsed or holds non-numeric entries
    """
    try:
        frame = pl.read_csv(path)
    except (pl.exceptions.ComputeError, pl.exceptions.NoDataError) as e:
        raise ParseError(f"{path}: {e}") from e
    if frame.width < 2 or frame.columns[0] != "slot":
        raise ParseError(f"{path}: expected a 'slot' column followed by categories", line=1)
    categories = frame.columns[1:]
    values = np.empty((frame.height, len(categories)))
    for c, name in enumerate(categories):
        column = frame[name].cast(pl.Float64, strict=False)
        bad = column.is_null().to_numpy()
        if bad.any():
            row = int(np.argmax(bad))
            raise ParseError(f"non-numeric dSim entry in column '{name}'", line=row + 2)
        values[:, c] = column.to_numpy()
    return DSimTable(values, tuple(categories), tuple(str(s) for s in frame["slot"]))


def rbf_kernel(bandwidth: float) -> Kernel:
    """exp(-|x - a|^2 / (2 h^2)); values in (0, 1]."""
    h2 = 2.0 * bandwidth * bandwidth

    def kernel(x: np.ndarray, anchors: np.ndarray) -> np.ndarray:
        return np.exp(-cdist(x, anchors, "sqeuclidean") / h2)

    return kernel


def median_bandwidth(anchor_features: np.ndarray) -> float:
    """Median pairwise anchor distance, 1.0 when it is undefined or zero."""
    if len(anchor_features) < 2:
        return 1.0
    median = float(np.median(pdist(anchor_features)))
    return median if median > 0 else 1.0


@dataclass(frozen=True)
class AnchorSimilarity:
    """
    Per-sample similarity from anchors with known expert correctness.

    dSim(e, x) is the mean kernel similarity between x and the anchors on
    which e was correct, and 0 if e was never correct.

    Args:
        anchor_features: (A, n) anchor inputs
        correct: (A, experts) boolean correctness of each expert on each anchor
        kernel: Pairwise similarity (N, n) x (A, n) -> (N, A) with range [0, 1]
        classifier_weight: Fixed score for the classifier slot
    """

    anchor_features: np.ndarray
    correct: np.ndarray
    kernel: Kernel
    classifier_weight: float = DEFAULT_CLASSIFIER_WEIGHT

    @property
    def n_slots(self) -> int:
        return self.correct.shape[1] + 1

    def similarity(self, features: np.ndarray) -> np.ndarray:
        """(N, experts) scores in [0, 1]."""
        k = np.clip(self.kernel(np.atleast_2d(features), self.anchor_features), 0.0, 1.0)
        hits = self.correct.astype(float)
        counts = hits.sum(axis=0)
        totals = k @ hits
        return np.divide(totals, counts, out=np.zeros_like(totals), where=counts > 0)

    def __call__(self, expert: int, sample: Sample) -> float:
        return float(self.similarity(sample.features[None, :])[0, expert])

    def _rows(self, features: np.ndarray) -> np.ndarray:
        scores = self.similarity(features)
        return np.hstack([scores, np.full((len(scores), 1), self.classifier_weight)])

    def prior_weights(self, features: np.ndarray, groups: Optional[np.ndarray] = None) -> np.ndarray:
        return _normalize_with_fallback(self._rows(features))

    def expert_prior_weights(
        self, features: np.ndarray, groups: Optional[np.ndarray] = None
    ) -> np.ndarray:
        return _normalize_with_fallback(self._rows(features), keep_classifier=False)


def anchor_dsim(
    anchors: Sequence[Tuple[Sample, Sequence[bool]]],
    kernel: Optional[Kernel] = None,
    classifier_weight: float = DEFAULT_CLASSIFIER_WEIGHT,
) -> AnchorSimilarity:
    """
    Build an anchor-based similarity.

    Args:
        anchors: (sample, per-expert correctness bits) pairs
        kernel: Pairwise kernel; defaults to an RBF with median-distance bandwidth
        classifier_weight: Score for the classifier slot

    Raises:
        ConfigError: If there are no anchors or the correctness rows differ in length
    """
    if not anchors:
        raise ConfigError("anchor similarity needs at least one anchor")
    features = np.vstack([np.asarray(s.features, dtype=float) for s, _ in anchors])
    widths = {len(bits) for _, bits in anchors}
    if len(widths) != 1:
        raise ConfigError("every anchor needs one correctness bit per expert")
    correct = np.array([list(bits) for _, bits in anchors], dtype=bool)
    if kernel is None:
        kernel = rbf_kernel(median_bandwidth(features))
    return AnchorSimilarity(features, correct, kernel, classifier_weight)
