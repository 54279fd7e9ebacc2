"""
Pytest fixtures for deferloop tests
"""

import numpy as np
import pytest

from deferloop.core import Dataset
from deferloop.dsim import make_cluster_dsim
from deferloop.experiments import ClusterSpec, gen_cluster_data
from deferloop.experts import ExpertModel, ExpertPanel, make_cluster_experts
from deferloop.nn import Network, OptimizerState
from deferloop.pipeline import PipelineState
from deferloop.training import make_classifier


@pytest.fixture
def rng():
    """Seeded generator"""
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_dataset():
    """Ten samples, two groups, hand-written labels"""
    features = np.arange(20, dtype=float).reshape(10, 2)
    groups = np.array([0, 0, 0, 0, 0, 1, 1, 1, 1, 1])
    labels = np.array([0, 1, 0, 1, 1, 0, 0, 1, 1, 0])
    return Dataset(features, groups, labels, ["a", "b"])


@pytest.fixture
def small_cluster():
    """Cluster-task dataset at a fifth of the default size"""
    return gen_cluster_data(ClusterSpec(seed=7, n_label0=100, n_label1=100, n_blue=200))


@pytest.fixture
def cluster_panel():
    """The two mirror-image cluster experts"""
    return make_cluster_experts()


@pytest.fixture
def cluster_table():
    """Cluster dSim table with s = 0.4"""
    return make_cluster_dsim(0.4)


@pytest.fixture
def perfect_panel():
    """Two experts that never err"""
    return ExpertPanel(
        (ExpertModel("p1", {0: 1.0, 1: 1.0}), ExpertModel("p2", {0: 1.0, 1: 1.0})),
        ("orange", "blue"),
    )


@pytest.fixture
def make_state():
    """Factory for a small pipeline over a panel"""

    def build(
        panel,
        n_inputs=2,
        classifier="network",
        aggregation="full",
        committee_size=1,
        learning_rate=0.01,
        seed=0,
    ):
        rng = np.random.default_rng(seed)
        clf = make_classifier(classifier, n_inputs, rng, hidden=(8,), learning_rate=learning_rate)
        deferrer = Network([n_inputs, 8, panel.n_slots], head="softmax", rng=rng)
        return PipelineState(
            classifier=clf,
            deferrer=deferrer,
            panel=panel,
            deferrer_optimizer=OptimizerState("sgd", learning_rate),
            committee_size=committee_size,
            aggregation=aggregation,
        )

    return build


@pytest.fixture
def cluster_toml():
    """Minimal cluster run config as TOML text"""
    return """
task = "cluster"
algorithm = "strict"
seed = 3

[data]
n_label0 = 60
n_label1 = 60
n_blue = 120
prior_size = 60

[training]
prior_steps = 50
eval_every = 5
"""


@pytest.fixture
def write_config(tmp_path):
    """Write TOML text to a file and return its path"""

    def write(text, name="run.toml"):
        path = tmp_path / name
        path.write_text(text)
        return path

    return write
