"""
Run metrics, evaluation and per-iteration traces.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import polars as pl

from deferloop.core import Dataset
from deferloop.dsim import SimilarityPrior
from deferloop.exceptions import ConfigError
from deferloop.experts import panel_votes
from deferloop.pipeline import (
    PipelineState,
    aggregate_committee_batch,
    aggregate_full,
    policy_weights,
    prediction_matrix,
)

logger = logging.getLogger(__name__)

TRACE_COLUMNS = (
    "iter",
    "overall_acc",
    "acc_group_0",
    "acc_group_1",
    "disparity",
    "mean_committee_cost",
)


@dataclass
class RunMetrics:
    """Metrics for one run (or one evaluation of a pipeline)"""
    overall_accuracy: float
    group_accuracy: Dict[str, float]
    disparity: float
    deferral_rate: Dict[str, float]
    mean_committee_cost: float
    n_samples: int
    classifier_accuracy: Optional[float] = None
    classifier_group_accuracy: Dict[str, float] = field(default_factory=dict)
    trace: Optional[pl.DataFrame] = None

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary (the trace is written separately)"""
        return {
            "overall_accuracy": self.overall_accuracy,
            "group_accuracy": dict(self.group_accuracy),
            "disparity": self.disparity,
            "deferral_rate": dict(self.deferral_rate),
            "mean_committee_cost": self.mean_committee_cost,
            "classifier_accuracy": self.classifier_accuracy,
            "classifier_group_accuracy": dict(self.classifier_group_accuracy),
            "n_samples": self.n_samples,
        }

    def flat(self) -> Dict[str, float]:
        """Scalar columns for sweep tables."""
        row = {
            "overall_acc": self.overall_accuracy,
            "disparity": self.disparity,
            "mean_committee_cost": self.mean_committee_cost,
        }
        for name, acc in self.group_accuracy.items():
            row[f"acc_{name}"] = acc
        if self.classifier_accuracy is not None:
            row["classifier_acc"] = self.classifier_accuracy
        for name, acc in self.classifier_group_accuracy.items():
            row[f"classifier_acc_{name}"] = acc
        for name, rate in self.deferral_rate.items():
            row[f"defer_{name}"] = rate
        return row


def group_accuracies(
    correct: np.ndarray,
    groups: np.ndarray,
    group_names: Sequence[str],
) -> Dict[str, float]:
    """Mean correctness per group; groups without samples are left out."""
    out = {}
    for g, name in enumerate(group_names):
        mask = groups == g
        if mask.any():
            out[name] = float(correct[mask].mean())
    return out


def disparity_of(group_accuracy: Dict[str, float]) -> float:
    """|acc_0 - acc_1| for two groups, max - min in general, 0 with fewer than two."""
    values = list(group_accuracy.values())
    if len(values) < 2:
        return 0.0
    return float(max(values) - min(values))


def decision_metrics(
    decisions: np.ndarray,
    dataset: Dataset,
    slot_names: Sequence[str],
    slot_rates: np.ndarray,
    mean_cost: float,
    classifier_prob: Optional[np.ndarray] = None,
) -> RunMetrics:
    """
    Score pipeline decisions against ground truth.

    Args:
        decisions: (N,) labels the pipeline produced for ``dataset``
        dataset: The scored samples (ground truth read here, for evaluation only)
        slot_names: Names for the deferral-rate entries
        slot_rates: (m,) deferral frequency per slot
        mean_cost: Mean per-decision consultation cost
        classifier_prob: Optional (N,) classifier outputs for classifier-only accuracy
    """
    if len(dataset) == 0:
        raise ConfigError("cannot score an empty dataset")
    correct = (np.asarray(decisions) == dataset.labels).astype(float)
    by_group = group_accuracies(correct, dataset.groups, dataset.group_names)
    metrics = RunMetrics(
        overall_accuracy=float(correct.mean()),
        group_accuracy=by_group,
        disparity=disparity_of(by_group),
        deferral_rate={name: float(r) for name, r in zip(slot_names, slot_rates)},
        mean_committee_cost=float(mean_cost),
        n_samples=len(dataset),
    )
    if classifier_prob is not None:
        clf_correct = ((np.asarray(classifier_prob) > 0.5).astype(int) == dataset.labels)
        metrics.classifier_accuracy = float(clf_correct.mean())
        metrics.classifier_group_accuracy = group_accuracies(
            clf_correct.astype(float), dataset.groups, dataset.group_names
        )
    return metrics


def committee_cost(slots: np.ndarray, costs: np.ndarray) -> np.ndarray:
    """Per-row cost of the distinct slots a committee consulted."""
    n, m = costs.shape
    used = np.zeros((n, m), dtype=bool)
    np.put_along_axis(used, slots, True, axis=1)
    return np.sum(costs * used, axis=1)


def evaluate(
    state: PipelineState,
    test: Dataset,
    mode: str = "full",
    k: int = 5,
    rng: Optional[np.random.Generator] = None,
    repetitions: int = 1,
    prior: Optional[SimilarityPrior] = None,
    mu: float = 0.0,
) -> RunMetrics:
    """
    Score a pipeline snapshot on a held-out set.

    Every repetition re-queries the experts (fresh coin flips) and, in
    committee mode, re-draws the committees; metrics are averaged. The state
    is never modified.

    Args:
        state: Pipeline to score
        test: Held-out samples
        mode: ``full`` weighted vote or ``committee`` majority
        k: Committee size for committee mode
        rng: Source of expert and committee randomness
        repetitions: Number of independent evaluation passes
        prior: Optional similarity prior mixed into the deferrer output
        mu: Prior weight for the mix

    Raises:
        ConfigError: If the test set is empty or the mode unknown
    """
    if len(test) == 0:
        raise ConfigError("test set is empty")
    if mode not in ("full", "committee"):
        raise ConfigError(f"unknown evaluation mode '{mode}'")
    if repetitions < 1:
        raise ConfigError("repetitions must be at least 1")
    rng = rng if rng is not None else np.random.default_rng()

    panel = state.panel
    weights = policy_weights(state, test.features, test.groups, prior, mu)
    classifier_prob = state.classifier_proba(test.features)
    costs = panel.cost_matrix(test.features, test.groups)
    slot_names = [*panel.ids, "classifier"]

    runs: List[RunMetrics] = []
    for _ in range(repetitions):
        expert_seed = np.random.SeedSequence(int(rng.integers(2**62)))
        votes = panel_votes(panel, test.groups, test.labels, panel.rng_streams(expert_seed))
        y_e = prediction_matrix(votes, classifier_prob)
        if mode == "full":
            decisions = aggregate_full(weights, y_e)
            rates = weights.mean(axis=0)
            cost = float(np.mean(np.sum(weights * costs, axis=1)))
        else:
            decisions, slots = aggregate_committee_batch(weights, y_e, k, rng)
            rates = np.bincount(slots.ravel(), minlength=panel.n_slots) / slots.size
            cost = float(committee_cost(slots, costs).mean())
        runs.append(decision_metrics(decisions, test, slot_names, rates, cost, classifier_prob))
    return average_metrics(runs)


def average_metrics(runs: Sequence[RunMetrics]) -> RunMetrics:
    """Mean of several equally sized evaluations; disparity is recomputed from the means."""
    if len(runs) == 1:
        return runs[0]
    first = runs[0]

    def mean_of(dicts: List[Dict[str, float]]) -> Dict[str, float]:
        keys = dicts[0].keys()
        return {key: float(np.mean([d[key] for d in dicts])) for key in keys}

    group_accuracy = mean_of([r.group_accuracy for r in runs])
    return RunMetrics(
        overall_accuracy=float(np.mean([r.overall_accuracy for r in runs])),
        group_accuracy=group_accuracy,
        disparity=disparity_of(group_accuracy),
        deferral_rate=mean_of([r.deferral_rate for r in runs]),
        mean_committee_cost=float(np.mean([r.mean_committee_cost for r in runs])),
        n_samples=first.n_samples,
        classifier_accuracy=first.classifier_accuracy,
        classifier_group_accuracy=dict(first.classifier_group_accuracy),
    )


class TraceRecorder:
    """
    Collect per-iteration evaluation rows during training.

    Every recording re-seeds its generator from the same seed sequence, so
    consecutive rows differ only through the pipeline, not through expert
    noise.

    Args:
        test: Held-out samples scored at each recording
        seed: Seed sequence for evaluation randomness
        mode: Evaluation aggregation mode
        k: Committee size
        every: Record after every ``every``-th update (0 disables)
    """

    def __init__(
        self,
        test: Dataset,
        seed: np.random.SeedSequence,
        mode: str = "full",
        k: int = 5,
        every: int = 1,
    ):
        self.test = test
        self.seed = seed
        self.mode = mode
        self.k = k
        self.every = every
        self.rows: List[Dict[str, float]] = []

    def due(self, update: int) -> bool:
        return self.every > 0 and update % self.every == 0

    def record(
        self,
        state: PipelineState,
        iteration: int,
        prior: Optional[SimilarityPrior] = None,
        mu: float = 0.0,
    ) -> None:
        metrics = evaluate(
            state,
            self.test,
            mode=self.mode,
            k=self.k,
            rng=np.random.default_rng(self.seed),
            prior=prior,
            mu=mu,
        )
        accs = [metrics.group_accuracy.get(name, float("nan")) for name in self.test.group_names]
        accs += [float("nan")] * (2 - len(accs))
        self.rows.append(
            {
                "iter": iteration,
                "overall_acc": metrics.overall_accuracy,
                "acc_group_0": accs[0],
                "acc_group_1": accs[1],
                "disparity": metrics.disparity,
                "mean_committee_cost": metrics.mean_committee_cost,
            }
        )
        logger.debug("iter %d: overall accuracy %.4f", iteration, metrics.overall_accuracy)

    def frame(self) -> pl.DataFrame:
        if not self.rows:
            return pl.DataFrame(
                {c: pl.Series(c, [], dtype=pl.Int64 if c == "iter" else pl.Float64)
                 for c in TRACE_COLUMNS}
            )
        return pl.DataFrame(self.rows).select(list(TRACE_COLUMNS))
