"""
Classifier adapters used as the pipeline's automated decision-maker.
"""

import copy
from typing import List, Optional

import numpy as np
from sklearn.tree import DecisionTreeClassifier

from deferloop.nn import Network, OptimizerState, step


class NetworkClassifier:
    """
    Sigmoid-head network trained by gradient steps.

    Args:
        net: Network with a sigmoid head
        optimizer: Optimizer state owned by this classifier
    """

    kind = "network"

    def __init__(self, net: Network, optimizer: OptimizerState):
        self.net = net
        self.optimizer = optimizer

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.net.forward(np.atleast_2d(x)), dtype=float)

    def gradient_step(self, x: np.ndarray, logit_grad: np.ndarray) -> None:
        """Step along dLoss/dLogit rows for the batch ``x``."""
        grads = self.net.backward(x, logit_grad[:, None], wrt_logits=True)
        step(self.net, grads, self.optimizer)

    def copy(self) -> "NetworkClassifier":
        return NetworkClassifier(self.net.copy(), copy.deepcopy(self.optimizer))


class TreeClassifier:
    """
    CART classifier refit from scratch on every (x, label) pair seen so far.

    Before the first fit it answers 0.5 everywhere.

    Args:
        max_depth: Tree depth limit
        random_state: Seed for scikit-learn's split tie-breaking
    """

    kind = "tree"

    def __init__(self, max_depth: int = 4, random_state: Optional[int] = None):
        self.max_depth = max_depth
        self.random_state = random_state
        self.model: Optional[DecisionTreeClassifier] = None
        self._features: List[np.ndarray] = []
        self._labels: List[np.ndarray] = []

    @property
    def n_seen(self) -> int:
        return int(sum(len(y) for y in self._labels))

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        if self.model is None:
            return np.full(len(x), 0.5)
        classes = list(self.model.classes_)
        if 1 not in classes:
            return np.zeros(len(x))
        return self.model.predict_proba(x)[:, classes.index(1)]

    def refit(self, x: np.ndarray, labels: np.ndarray) -> None:
        """Add a batch to the history and refit on all of it."""
        self._features.append(np.atleast_2d(np.asarray(x, dtype=float)).copy())
        self._labels.append(np.asarray(labels, dtype=np.int64).copy())
        model = DecisionTreeClassifier(max_depth=self.max_depth, random_state=self.random_state)
        model.fit(np.vstack(self._features), np.concatenate(self._labels))
        self.model = model

    def copy(self) -> "TreeClassifier":
        return copy.deepcopy(self)
