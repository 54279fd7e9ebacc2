"""
Unit tests for simulated experts
"""

import logging

import numpy as np
import pytest

from deferloop.core import BlindSample, Sample
from deferloop.exceptions import ConfigError
from deferloop.experts import (
    ExpertModel,
    ExpertPanel,
    biased_panel,
    expert_predict,
    make_cluster_experts,
    make_cm_experts,
    panel_votes,
)


def test_expert_validation():
    """Test accuracy and cost ranges"""
    with pytest.raises(ConfigError):
        ExpertModel("bad", {0: 1.2})
    with pytest.raises(ConfigError):
        ExpertModel("bad", {0: 0.5}, cost=-1.0)
    with pytest.raises(ConfigError):
        ExpertModel("e", {0: 0.5}).accuracy(1)


def test_duplicate_ids_rejected():
    """Test panels refuse repeated expert ids"""
    e = ExpertModel("e", {0: 0.5})
    with pytest.raises(ConfigError):
        ExpertPanel((e, e))


def test_perfect_and_adversarial_experts(rng):
    """Test accuracy 1 always reports y and accuracy 0 always reports 1 - y"""
    perfect = ExpertModel("p", {0: 1.0})
    wrong = ExpertModel("w", {0: 0.0})
    for label in (0, 1):
        s = Sample(id=0, features=np.zeros(2), group=0, true_label=label)
        assert all(expert_predict(perfect, s, rng) == label for _ in range(20))
        assert all(expert_predict(wrong, s, rng) == 1 - label for _ in range(20))


def test_expert_frequency(rng):
    """Test the correctness rate matches the accuracy"""
    e = ExpertModel("e", {0: 0.7})
    s = Sample(id=0, features=np.zeros(1), group=0, true_label=1)
    hits = sum(expert_predict(e, s, rng) == 1 for _ in range(20000))
    assert abs(hits / 20000 - 0.7) < 0.015


def test_panel_votes_match_single_queries(cluster_panel):
    """Test batch voting consumes the same draws as per-sample queries"""
    groups = np.array([0, 1, 1, 0, 1])
    labels = np.array([1, 0, 1, 1, 0])
    batch = panel_votes(cluster_panel, groups, labels, cluster_panel.rng_streams(np.random.SeedSequence(4)))
    streams = cluster_panel.rng_streams(np.random.SeedSequence(4))
    for i in range(len(labels)):
        s = Sample(id=i, features=np.zeros(2), group=int(groups[i]), true_label=int(labels[i]))
        for j, e in enumerate(cluster_panel):
            assert expert_predict(e, s, streams[j]) == batch[i, j]


def test_cluster_experts():
    """Test the mirror-image accuracies"""
    panel = make_cluster_experts()
    assert np.allclose(panel.accuracy_matrix(2), [[1.0, 0.2], [0.2, 1.0]])
    assert panel.n_slots == 3
    assert np.allclose(panel.cost_vector(), [1.0, 1.0, 0.0])


def test_cm_experts():
    """Test the content-moderation accuracy ladder"""
    panel = make_cm_experts()
    assert len(panel) == 40
    acc = panel.accuracy_matrix(2)
    assert acc[0, 0] == pytest.approx(0.6 + 0.4 / 30)
    assert acc[29, 0] == pytest.approx(1.0)
    assert acc[29, 1] == pytest.approx(0.7)
    assert acc[30, 1] == pytest.approx(0.64)
    assert acc[39, 0] == pytest.approx(0.7)
    with pytest.raises(ConfigError):
        make_cm_experts(0, 0)


def test_biased_panel_rounding(caplog):
    """Test fractional alpha * m rounds and warns"""
    with caplog.at_level(logging.WARNING):
        panel = biased_panel(10, 0.75)
    assert "not integral" in caplog.text
    acc = panel.accuracy_matrix(2)
    assert int(np.sum(acc[:, 0] == 0.5)) == 8
    assert biased_panel(4, 0.5).accuracy_matrix(2)[:, 0].tolist() == [0.5, 0.5, 1.0, 1.0]
    with pytest.raises(ConfigError):
        biased_panel(0, 0.5)
    with pytest.raises(ConfigError):
        biased_panel(3, 1.5)


def test_from_records():
    """Test panels built from config records"""
    panel = ExpertPanel.from_records(
        [{"id": "x", "accuracy": {"a": 0.9, "b": 0.4}, "cost": 2}, {"accuracy": {"a": 0.5, "b": 0.5}}],
        ["a", "b"],
    )
    assert panel.ids == ["x", "e2"]
    assert np.allclose(panel.cost_vector(), [2.0, 1.0, 0.0])
    with pytest.raises(ConfigError):
        ExpertPanel.from_records([{"accuracy": {"c": 0.9}}], ["a", "b"])


def test_sample_dependent_costs():
    """Test callable costs see the label-free sample"""
    panel = ExpertPanel((ExpertModel("e", {0: 1.0}, cost=lambda s: float(s.features[0])),), ("a",))
    with pytest.raises(ConfigError):
        panel.cost_vector()
    costs = panel.cost_matrix(np.array([[0.5], [2.0]]), np.array([0, 0]))
    assert np.allclose(costs, [[0.5, 0.0], [2.0, 0.0]])
    assert panel.cost_vector(BlindSample(id=0, features=np.array([3.0]), group=0))[0] == 3.0
