"""
Classifier + deferrer + expert panel composed into one decision engine.
"""

import copy
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit
from scipy.stats import binom

from deferloop.classifiers import NetworkClassifier, TreeClassifier
from deferloop.core import Dataset, PredictionVector, Sample, SimplexVector
from deferloop.core import prediction_vector as make_prediction_vector
from deferloop.dsim import SimilarityPrior
from deferloop.exceptions import ConfigError, ShapeError
from deferloop.experts import ExpertPanel, expert_predict, panel_votes
from deferloop.nn import Network, OptimizerState

AGGREGATIONS = ("full", "committee")

Classifier = Union[NetworkClassifier, TreeClassifier]


@dataclass
class PipelineState:
    """
    Everything a training loop owns.

    Args:
        classifier: Network- or tree-backed classifier
        deferrer: Softmax network with one output per expert plus the classifier
        panel: The experts
        deferrer_optimizer: Optimizer state for the deferrer
        committee_size: k, draws per committee decision
        aggregation: ``full`` weighted vote or ``committee`` majority
    """

    classifier: Classifier
    deferrer: Network
    panel: ExpertPanel
    deferrer_optimizer: OptimizerState
    committee_size: int = 1
    aggregation: str = "full"

    def __post_init__(self):
        if self.deferrer.head != "softmax":
            raise ConfigError("the deferrer needs a softmax head")
        if self.deferrer.n_outputs != self.panel.n_slots:
            raise ShapeError(
                f"deferrer has {self.deferrer.n_outputs} outputs for {self.panel.n_slots} slots"
            )
        if not 1 <= self.committee_size <= self.panel.n_slots:
            raise ConfigError(
                f"committee size {self.committee_size} outside [1, {self.panel.n_slots}]"
            )
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"unknown aggregation '{self.aggregation}'")

    @property
    def n_slots(self) -> int:
        return self.panel.n_slots

    def deferral_weights(self, x: np.ndarray) -> np.ndarray:
        """(N, m) deferrer output rows."""
        return np.atleast_2d(self.deferrer.forward(np.atleast_2d(x)))

    def classifier_proba(self, x: np.ndarray) -> np.ndarray:
        return self.classifier.predict_proba(x)

    def snapshot(self) -> "PipelineState":
        """Independent copy for read-only evaluation."""
        return PipelineState(
            classifier=self.classifier.copy(),
            deferrer=self.deferrer.copy(),
            panel=self.panel,
            deferrer_optimizer=copy.deepcopy(self.deferrer_optimizer),
            committee_size=self.committee_size,
            aggregation=self.aggregation,
        )


def prediction_vector(
    state: PipelineState,
    s: Sample,
    rngs: Sequence[np.random.Generator],
) -> PredictionVector:
    """
    ``[e_1(x), ..., e_{m-1}(x), f(x)]`` for one sample.

    Every expert is queried once with its own generator.
    """
    votes = [expert_predict(e, s, rng) for e, rng in zip(state.panel.experts, rngs)]
    f = float(state.classifier_proba(np.asarray(s.features)[None, :])[0])
    return make_prediction_vector(votes, f)


def prediction_matrix(votes: np.ndarray, classifier_prob: np.ndarray) -> np.ndarray:
    """Batch form of ``prediction_vector``: (N, experts) votes + (N,) probabilities."""
    votes = np.asarray(votes, dtype=float).reshape(len(classifier_prob), -1)
    return np.hstack([votes, np.asarray(classifier_prob, dtype=float)[:, None]])


def sigma(x: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """exp(x) / (exp(x) + exp(1 - x)), i.e. a logistic centred at 0.5 with slope 2."""
    return expit(2.0 * np.asarray(x, dtype=float) - 1.0)


def soft_prediction(d: np.ndarray, y_e: np.ndarray) -> Union[float, np.ndarray]:
    """sigma(D . y_e); accepts single rows or (N, m) batches."""
    _check_lengths(d, y_e)
    out = sigma(np.sum(np.asarray(d) * np.asarray(y_e), axis=-1))
    return float(out) if np.ndim(out) == 0 else out


def aggregate_full(d: SimplexVector, y_e: PredictionVector) -> Union[int, np.ndarray]:
    """1 iff the weighted vote strictly exceeds 0.5; accepts single rows or batches."""
    _check_lengths(d, y_e)
    out = (np.sum(np.asarray(d) * np.asarray(y_e), axis=-1) > 0.5).astype(np.int64)
    return int(out) if np.ndim(out) == 0 else out


def aggregate_committee(
    d: SimplexVector,
    y_e: PredictionVector,
    k: int,
    rng: np.random.Generator,
) -> int:
    """
    Majority of k slots drawn with replacement from ``d``.

    The classifier slot votes 1[f(x) > 0.5]. Ties are settled by a fair coin
    drawn from ``rng`` (only then is the extra draw consumed).
    """
    _check_lengths(d, y_e)
    if k < 1:
        raise ConfigError(f"committee size must be at least 1, got {k}")
    d = np.asarray(d, dtype=float)
    slots = rng.choice(len(d), size=k, replace=True, p=d / d.sum())
    ballots = _binarized(np.asarray(y_e, dtype=float))
    ones = int(ballots[slots].sum())
    if 2 * ones > k:
        return 1
    if 2 * ones < k:
        return 0
    return int(rng.random() < 0.5)


def aggregate_committee_batch(
    d: np.ndarray,
    y_e: np.ndarray,
    k: int,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Committee decisions for a batch.

    Draws an (N, k) block of uniforms for the slot choices and one coin per row
    for tie-breaks.

    Returns:
        (labels of shape (N,), sampled slots of shape (N, k))
    """
    d = np.atleast_2d(np.asarray(d, dtype=float))
    y_e = np.atleast_2d(np.asarray(y_e, dtype=float))
    _check_lengths(d, y_e)
    if k < 1:
        raise ConfigError(f"committee size must be at least 1, got {k}")
    n = d.shape[0]
    cdf = np.cumsum(d, axis=1)
    cdf[:, -1] = np.inf
    draws = rng.random((n, k))
    slots = np.sum(draws[:, :, None] >= cdf[:, None, :], axis=2)
    ballots = _binarized(y_e)
    ones = np.take_along_axis(ballots, slots, axis=1).sum(axis=1)
    coins = (rng.random(n) < 0.5).astype(np.int64)
    labels = np.where(2 * ones > k, 1, np.where(2 * ones < k, 0, coins))
    return labels.astype(np.int64), slots


def committee_accuracy(p: float, k: int) -> float:
    """
    Probability that a majority of k independent votes, each right with
    probability p, is right (ties settled by a fair coin).
    """
    tail = binom.sf(k // 2, k, p)
    if k % 2 == 0:
        tail += 0.5 * binom.pmf(k // 2, k, p)
    return float(tail)


def _binarized(y_e: np.ndarray) -> np.ndarray:
    ballots = np.array(y_e, dtype=float, copy=True)
    ballots[..., -1] = (ballots[..., -1] > 0.5).astype(float)
    return ballots


def _check_lengths(d: np.ndarray, y_e: np.ndarray) -> None:
    if np.shape(d) != np.shape(y_e):
        raise ShapeError(f"deferral weights {np.shape(d)} and predictions {np.shape(y_e)} differ")


@dataclass
class Observation:
    """
    What the training side learns about a batch of stream samples.

    ``true_labels`` is only filled when the run explicitly trains on ground
    truth (oracle mode); otherwise training has no way to reach the labels.
    """

    ids: np.ndarray
    features: np.ndarray
    groups: np.ndarray
    votes: np.ndarray
    true_labels: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.ids)


def observe(
    panel: ExpertPanel,
    stream: Dataset,
    rows: slice,
    rngs: Sequence[np.random.Generator],
    reveal_labels: bool = False,
) -> Observation:
    """
    Query the panel on ``stream[rows]`` and hand back a label-free view.

    This is the only place where stream ground truth meets the experts.
    """
    groups = stream.groups[rows].copy()
    votes = panel_votes(panel, groups, stream.labels[rows], rngs)
    return Observation(
        ids=stream.ids[rows].copy(),
        features=stream.features[rows].copy(),
        groups=groups,
        votes=votes,
        true_labels=stream.labels[rows].copy() if reveal_labels else None,
    )


def mix_prior(
    learned: np.ndarray,
    prior: SimilarityPrior,
    features: np.ndarray,
    groups: np.ndarray,
    mu: Union[float, np.ndarray],
) -> np.ndarray:
    """mu * prior + (1 - mu) * learned, row by row; mu may be a scalar or (N,)."""
    mu = np.asarray(mu, dtype=float).reshape(-1, 1)
    return mu * prior.expert_prior_weights(features, groups) + (1.0 - mu) * learned


def policy_weights(
    state: PipelineState,
    features: np.ndarray,
    groups: np.ndarray,
    prior: Optional[SimilarityPrior] = None,
    mu: float = 0.0,
) -> np.ndarray:
    """Deferral rows actually used for decisions, with an optional prior mix."""
    weights = state.deferral_weights(features)
    if prior is not None and mu > 0:
        weights = mix_prior(weights, prior, features, groups, mu)
    return weights
