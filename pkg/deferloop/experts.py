"""
Simulated human experts with group-dependent accuracy.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from deferloop.core import BlindSample, CostVector, Sample, cost_vector
from deferloop.exceptions import ConfigError

logger = logging.getLogger(__name__)

CLUSTER_GROUPS = ("orange", "blue")
CM_GROUPS = ("non-AAE", "AAE")

CostFn = Callable[[BlindSample], float]


@dataclass(frozen=True)
class ExpertModel:
    """
    One simulated expert.

    Args:
        expert_id: Unique name within a panel
        accuracy_by_group: Group id -> probability of reporting the true label
        cost: Constant per-query cost, or a function of the (label-free) sample
    """

    expert_id: str
    accuracy_by_group: Mapping[int, float]
    cost: Union[float, CostFn] = 1.0

    def __post_init__(self):
        for group, acc in self.accuracy_by_group.items():
            if not 0.0 <= acc <= 1.0:
                raise ConfigError(
                    f"expert {self.expert_id}: accuracy {acc} for group {group} outside [0, 1]"
                )
        if not callable(self.cost) and self.cost < 0:
            raise ConfigError(f"expert {self.expert_id}: negative cost {self.cost}")

    def accuracy(self, group: int) -> float:
        try:
            return float(self.accuracy_by_group[group])
        except KeyError:
            raise ConfigError(f"expert {self.expert_id} has no accuracy for group {group}") from None

    def cost_for(self, sample: BlindSample) -> float:
        if callable(self.cost):
            value = float(self.cost(sample))
            if value < 0:
                raise ConfigError(f"expert {self.expert_id}: negative cost {value}")
            return value
        return float(self.cost)


@dataclass(frozen=True)
class ExpertPanel:
    """
    Ordered experts e_1..e_{m-1}; the classifier takes slot m by convention.

    Args:
        experts: The experts, in slot order
        group_names: Names of the group ids the accuracies refer to
    """

    experts: Tuple[ExpertModel, ...]
    group_names: Tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "experts", tuple(self.experts))
        object.__setattr__(self, "group_names", tuple(self.group_names))
        ids = [e.expert_id for e in self.experts]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate expert ids in panel: {ids}")

    def __len__(self) -> int:
        return len(self.experts)

    def __iter__(self):
        return iter(self.experts)

    @property
    def ids(self) -> List[str]:
        return [e.expert_id for e in self.experts]

    @property
    def n_slots(self) -> int:
        """Experts plus the classifier."""
        return len(self.experts) + 1

    def accuracy_matrix(self, n_groups: int) -> np.ndarray:
        """(experts, groups) array of correctness probabilities."""
        return np.array(
            [[e.accuracy(g) for g in range(n_groups)] for e in self.experts], dtype=float
        ).reshape(len(self.experts), n_groups)

    def has_constant_costs(self) -> bool:
        return not any(callable(e.cost) for e in self.experts)

    def cost_vector(self, sample: Optional[BlindSample] = None) -> CostVector:
        """Costs for one sample; ``sample`` may be omitted when all costs are constant."""
        if sample is None and not self.has_constant_costs():
            raise ConfigError("sample-dependent costs need a sample")
        return cost_vector([e.cost_for(sample) for e in self.experts])

    def cost_matrix(self, features: np.ndarray, groups: np.ndarray) -> np.ndarray:
        """(N, m) cost rows for a batch; the classifier column is zero."""
        n = len(groups)
        if self.has_constant_costs():
            return np.tile(self.cost_vector(), (n, 1))
        rows = [
            self.cost_vector(BlindSample(id=i, features=features[i], group=int(groups[i])))
            for i in range(n)
        ]
        return np.vstack(rows) if rows else np.zeros((0, self.n_slots))

    def rng_streams(self, seed: np.random.SeedSequence) -> List[np.random.Generator]:
        """One independent generator per expert, spawned from ``seed``."""
        return [np.random.default_rng(s) for s in seed.spawn(len(self.experts))]

    @classmethod
    def from_records(
        cls,
        records: Sequence[Mapping[str, Any]],
        group_names: Sequence[str],
    ) -> "ExpertPanel":
        """
        Build a panel from config records.

        Each record holds ``accuracy`` (group name -> probability), an optional
        ``cost`` (default 1) and an optional ``id``.

        Raises:
            ConfigError: If a record names an undeclared group
        """
        index = {name: i for i, name in enumerate(group_names)}
        experts = []
        for j, record in enumerate(records, start=1):
            accuracy = {}
            for name, value in dict(record.get("accuracy", {})).items():
                if name not in index:
                    raise ConfigError(f"expert record {j}: unknown group '{name}'")
                accuracy[index[name]] = float(value)
            experts.append(
                ExpertModel(
                    expert_id=str(record.get("id", f"e{j}")),
                    accuracy_by_group=accuracy,
                    cost=float(record.get("cost", 1.0)),
                )
            )
        return cls(tuple(experts), tuple(group_names))


def expert_predict(e: ExpertModel, s: Sample, rng: np.random.Generator) -> int:
    """
    Report the sample's label, corrupted with probability 1 - accuracy.

    Draws exactly one value from ``rng``.

    Raises:
        ConfigError: If the expert has no accuracy for the sample's group
    """
    correct = rng.random() < e.accuracy(s.group)
    return int(s.true_label) if correct else 1 - int(s.true_label)


def panel_votes(
    panel: ExpertPanel,
    groups: np.ndarray,
    labels: np.ndarray,
    streams: Sequence[np.random.Generator],
) -> np.ndarray:
    """
    Query every expert on a batch.

    Equivalent to calling ``expert_predict`` row by row: expert j consumes one
    draw per sample from its own stream, in sample order.

    Returns:
        (N, experts) integer array of votes
    """
    groups = np.asarray(groups, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    votes = np.empty((len(labels), len(panel)), dtype=np.int64)
    if len(labels) == 0:
        return votes
    accuracy = panel.accuracy_matrix(int(groups.max()) + 1)
    for j, stream in enumerate(streams[: len(panel)]):
        correct = stream.random(len(labels)) < accuracy[j, groups]
        votes[:, j] = np.where(correct, labels, 1 - labels)
    return votes


def make_cluster_experts() -> ExpertPanel:
    """e1 is perfect on orange and 20% right on blue; e2 is the mirror image."""
    return ExpertPanel(
        (
            ExpertModel("e1", {0: 1.0, 1: 0.2}, cost=1.0),
            ExpertModel("e2", {0: 0.2, 1: 1.0}, cost=1.0),
        ),
        CLUSTER_GROUPS,
    )


def make_cm_experts(n_majority: int = 30, n_minority: int = 10) -> ExpertPanel:
    """
    Content-moderation panel.

    Majority-dialect experts j=1..n_majority are right with probability
    0.6 + 0.4 j / n_majority on their own group and 0.3 less on the other;
    minority-dialect experts follow the same rule with n_minority.
    Group 0 is the majority dialect, group 1 the minority (AAE).

    Args:
        n_majority: Number of majority-dialect experts
        n_minority: Number of minority-dialect experts
    """
    if n_majority < 0 or n_minority < 0 or n_majority + n_minority < 1:
        raise ConfigError("content-moderation panel needs at least one expert")
    experts = []
    for j in range(1, n_majority + 1):
        p = 0.6 + 0.4 * j / n_majority
        experts.append(ExpertModel(f"e{j}", {0: p, 1: p - 0.3}, cost=1.0))
    for j in range(1, n_minority + 1):
        p = 0.6 + 0.4 * j / n_minority
        experts.append(ExpertModel(f"e{n_majority + j}", {0: p - 0.3, 1: p}, cost=1.0))
    return ExpertPanel(tuple(experts), CM_GROUPS)


def biased_panel(m: int, alpha: float) -> ExpertPanel:
    """
    Panel where a fraction alpha of experts flip coins on group 0.

    Biased experts are right with probability 0.5 on group 0 and always right
    on group 1; the others are the mirror image. When alpha*m is fractional
    the count is rounded to nearest and a warning is logged.

    Raises:
        ConfigError: If m < 1 or alpha is outside [0, 1]
    """
    if m < 1:
        raise ConfigError(f"panel size must be at least 1, got {m}")
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    exact = alpha * m
    n_biased = int(math.floor(exact + 0.5))
    if abs(exact - n_biased) > 1e-9:
        logger.warning("alpha*m = %.4f is not integral; using %d biased experts", exact, n_biased)
    experts = [
        ExpertModel(f"e{j + 1}", {0: 0.5, 1: 1.0} if j < n_biased else {0: 1.0, 1: 0.5})
        for j in range(m)
    ]
    return ExpertPanel(tuple(experts), ("z0", "z1"))
