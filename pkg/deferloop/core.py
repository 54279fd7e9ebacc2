"""
Domain types and simplex arithmetic shared by every deferloop module.
"""

from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Union

import numpy as np
import polars as pl

from deferloop.exceptions import ConfigError, DegenerateWeights, LabelAccessError, ShapeError

SIMPLEX_TOL = 1e-9

# Readability aliases; all three are plain float arrays.
SimplexVector = np.ndarray
PredictionVector = np.ndarray
CostVector = np.ndarray


@dataclass(frozen=True, eq=False)
class Sample:
    """
    One input seen by the pipeline.

    Args:
        id: Stable sample identifier
        features: Feature vector of dimension n
        group: Dense integer category id
        true_label: Ground-truth label in {0, 1}, or None once hidden from training
    """

    id: int
    features: np.ndarray
    group: int
    true_label: Optional[int]


@dataclass(frozen=True, eq=False)
class BlindSample:
    """A sample as the classifier and deferrer see it."""

    id: int
    features: np.ndarray
    group: int

    @property
    def true_label(self) -> int:
        raise LabelAccessError(f"sample {self.id}: ground truth is not visible to training")


@dataclass
class Dataset:
    """
    Column-oriented collection of samples.

    Features, groups and labels are kept as aligned numpy arrays so that
    training loops can slice whole batches at once; ``dataset[i]`` gives the
    per-row ``Sample`` view.

    Args:
        features: Array of shape (N, n)
        groups: Integer array of shape (N,) indexing ``group_names``
        labels: Integer array of shape (N,) with values in {0, 1}
        group_names: Declared category names, position = group id
        ids: Optional integer ids, defaults to 0..N-1
    """

    features: np.ndarray
    groups: np.ndarray
    labels: np.ndarray
    group_names: List[str]
    ids: Optional[np.ndarray] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        if self.features.ndim == 1:
            self.features = self.features[:, None]
        self.groups = np.asarray(self.groups, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.ids is None:
            self.ids = np.arange(len(self.groups), dtype=np.int64)
        else:
            self.ids = np.asarray(self.ids, dtype=np.int64)
        self.group_names = [str(name) for name in self.group_names]
        self.validate()

    def validate(self) -> None:
        """
        Check the dataset invariants.

        Raises:
            ShapeError: If the columns are not aligned
            ConfigError: If features are non-finite, groups undeclared or labels non-binary
        """
        n = self.features.shape[0]
        if not (len(self.groups) == len(self.labels) == len(self.ids) == n):
            raise ShapeError(
                f"misaligned dataset columns: features={n}, groups={len(self.groups)}, "
                f"labels={len(self.labels)}, ids={len(self.ids)}"
            )
        if not np.all(np.isfinite(self.features)):
            raise ConfigError("features must be finite")
        if n and (self.groups.min() < 0 or self.groups.max() >= len(self.group_names)):
            raise ConfigError(f"group ids outside declared categories {self.group_names}")
        if n and not np.isin(self.labels, (0, 1)).all():
            raise ConfigError("labels must be 0 or 1")

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, index: int) -> Sample:
        return Sample(
            id=int(self.ids[index]),
            features=self.features[index],
            group=int(self.groups[index]),
            true_label=int(self.labels[index]),
        )

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self[i]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_groups(self) -> int:
        return len(self.group_names)

    def subset(self, index: Union[np.ndarray, Sequence[int], slice]) -> "Dataset":
        """Return the rows selected by ``index`` as a new dataset (copies)."""
        return Dataset(
            features=self.features[index].copy(),
            groups=self.groups[index].copy(),
            labels=self.labels[index].copy(),
            group_names=list(self.group_names),
            ids=self.ids[index].copy(),
        )

    def to_frame(self) -> pl.DataFrame:
        """Render in the on-disk layout: ``id, group, label, f1..fn``."""
        columns = {
            "id": self.ids,
            "group": [self.group_names[g] for g in self.groups],
            "label": self.labels,
        }
        for j in range(self.n_features):
            columns[f"f{j + 1}"] = self.features[:, j]
        return pl.DataFrame(columns)


def normalize(v: np.ndarray) -> SimplexVector:
    """
    Scale a nonnegative vector (or each row of a matrix) to sum to one.

    Args:
        v: Nonnegative weights, shape (m,) or (N, m)

    Returns:
        Weights divided by their sum

    Raises:
        ConfigError: If any entry is negative
        DegenerateWeights: If a vector sums to zero
    """
    v = np.asarray(v, dtype=float)
    if np.any(v < 0):
        raise ConfigError("cannot normalize negative weights")
    total = v.sum(axis=-1, keepdims=True)
    if np.any(total <= 0):
        raise DegenerateWeights("cannot normalize an all-zero weight vector")
    return v / total


def project_simplex(v: np.ndarray) -> SimplexVector:
    """
    Euclidean projection onto the probability simplex.

    Sorted-threshold method: find the largest rho such that the rho-th sorted
    entry stays positive after subtracting the common shift, then clip.
    Accepts a single vector or a matrix (projected row by row).

    Args:
        v: Finite array of shape (m,) or (N, m)

    Returns:
        Closest point(s) of the simplex
    """
    v = np.asarray(v, dtype=float)
    if v.ndim == 1:
        return _project_rows(v[None, :])[0]
    return _project_rows(v)


def _project_rows(v: np.ndarray) -> np.ndarray:
    n_rows, m = v.shape
    u = -np.sort(-v, axis=1)
    css = np.cumsum(u, axis=1) - 1.0
    ind = np.arange(1, m + 1)
    positive = u - css / ind > 0
    rho = m - np.argmax(positive[:, ::-1], axis=1)
    theta = css[np.arange(n_rows), rho - 1] / rho
    return np.maximum(v - theta[:, None], 0.0)


def is_simplex(w: np.ndarray, tol: float = SIMPLEX_TOL) -> bool:
    """True if every row of ``w`` is nonnegative and sums to one within ``tol``."""
    w = np.asarray(w, dtype=float)
    return bool(np.all(w >= -tol) and np.all(np.abs(w.sum(axis=-1) - 1.0) <= tol))


def prediction_vector(expert_votes: Sequence[int], classifier_prob: float) -> PredictionVector:
    """
    Assemble ``[e_1, ..., e_{m-1}, f(x)]``.

    Raises:
        ConfigError: If votes are not binary or the probability is outside [0, 1]
    """
    votes = np.asarray(expert_votes, dtype=float).reshape(-1)
    if votes.size and not np.isin(votes, (0.0, 1.0)).all():
        raise ConfigError("expert votes must be 0 or 1")
    if not 0.0 <= classifier_prob <= 1.0:
        raise ConfigError(f"classifier probability {classifier_prob} outside [0, 1]")
    return np.append(votes, float(classifier_prob))


def cost_vector(expert_costs: Sequence[float]) -> CostVector:
    """
    Assemble ``[c_1, ..., c_{m-1}, 0]``; the classifier slot is free.

    Raises:
        ConfigError: If any cost is negative
    """
    costs = np.asarray(expert_costs, dtype=float).reshape(-1)
    if np.any(costs < 0):
        raise ConfigError("expert costs must be nonnegative")
    return np.append(costs, 0.0)
