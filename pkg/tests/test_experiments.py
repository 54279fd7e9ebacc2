"""
Tests for data generation, dataset files, evaluation and experiment runners
"""

import numpy as np
import polars as pl
import pytest
from sklearn.linear_model import LogisticRegression

from deferloop.config import config_from_dict, load_config
from deferloop.exceptions import ConfigError, ParseError
from deferloop.experiments import (
    CMSpec,
    ClusterSpec,
    deferral_map,
    gen_cluster_data,
    gen_cm_surrogate,
    load_embeddings,
    partition,
    run_experiment,
    run_sweep,
    split_dataset,
)
from deferloop.monitoring import committee_cost, decision_metrics, evaluate
from deferloop.nn import Network


def test_cluster_generator_is_deterministic():
    """Test the same seed gives the same dataset"""
    a = gen_cluster_data(ClusterSpec(seed=3))
    b = gen_cluster_data(ClusterSpec(seed=3))
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.labels, b.labels)
    c = gen_cluster_data(ClusterSpec(seed=4))
    assert not np.array_equal(a.features, c.features)


def test_cluster_generator_layout(small_cluster):
    """Test group sizes and orange labels"""
    assert len(small_cluster) == 400
    assert small_cluster.group_names == ["orange", "blue"]
    assert int(np.sum(small_cluster.groups == 0)) == 200
    orange = small_cluster.groups == 0
    assert int(small_cluster.labels[orange].sum()) == 100


def test_tree_separates_orange(small_cluster):
    """Test the orange label is learnable from features"""
    from sklearn.tree import DecisionTreeClassifier

    orange = small_cluster.subset(np.flatnonzero(small_cluster.groups == 0))
    train, test = split_dataset(orange, 0.5, np.random.default_rng(0))
    tree = DecisionTreeClassifier(max_depth=4, random_state=0).fit(train.features, train.labels)
    assert tree.score(test.features, test.labels) >= 0.9


def test_cm_surrogate_proportions():
    """Test group share and label balance of the surrogate"""
    data = gen_cm_surrogate(CMSpec(seed=1, n_samples=5000))
    assert data.group_names == ["non-AAE", "AAE"]
    assert abs(data.groups.mean() - 0.64) < 0.001
    rates = [data.labels[data.groups == g].mean() for g in (0, 1)]
    assert all(0.4 < r < 0.6 for r in rates)


def test_cm_surrogate_linear_probe():
    """Test a linear model reaches about 85% accuracy"""
    data = gen_cm_surrogate(CMSpec(seed=2, n_samples=10000))
    train, test = split_dataset(data, 0.8, np.random.default_rng(0))
    model = LogisticRegression(max_iter=1000).fit(train.features, train.labels)
    assert 0.81 <= model.score(test.features, test.labels) <= 0.89


def test_load_embeddings_roundtrip(tmp_path, tiny_dataset):
    """Test a written dataset file loads back unchanged"""
    path = tmp_path / "data.csv"
    tiny_dataset.to_frame().write_csv(path)
    loaded = load_embeddings(path, ["a", "b"])
    assert np.array_equal(loaded.features, tiny_dataset.features)
    assert np.array_equal(loaded.labels, tiny_dataset.labels)
    assert np.array_equal(loaded.groups, tiny_dataset.groups)


def test_load_embeddings_bad_value_line(tmp_path):
    """Test a non-numeric feature reports its line"""
    path = tmp_path / "data.csv"
    path.write_text("id,group,label,f1\n0,a,0,1.5\n1,a,1,oops\n")
    with pytest.raises(ParseError) as excinfo:
        load_embeddings(path)
    assert excinfo.value.line == 3


def test_load_embeddings_bad_label_and_ragged_row(tmp_path):
    """Test label values and field counts are checked"""
    path = tmp_path / "labels.csv"
    path.write_text("id,group,label,f1\n0,a,0,1.5\n1,a,2,0.5\n")
    with pytest.raises(ParseError) as excinfo:
        load_embeddings(path)
    assert excinfo.value.line == 3
    ragged = tmp_path / "ragged.csv"
    ragged.write_text("id,group,label,f1\n0,a,0,1.5\n1,a,1\n")
    with pytest.raises(ParseError) as excinfo:
        load_embeddings(ragged)
    assert excinfo.value.line == 3
    long_row = tmp_path / "long.csv"
    long_row.write_text("id,group,label,f1\n0,a,0,1.5\n1,a,1,0.5,9.0\n")
    with pytest.raises(ParseError):
        load_embeddings(long_row)


def test_load_embeddings_quoted_group_with_comma(tmp_path):
    """Test a quoted field containing a comma is one field"""
    path = tmp_path / "quoted.csv"
    path.write_text('id,group,label,f1\n0,"north, east",0,1.5\n1,south,1,0.5\n')
    loaded = load_embeddings(path)
    assert loaded.group_names == ["north, east", "south"]
    assert loaded.features[:, 0].tolist() == [1.5, 0.5]


def test_load_embeddings_header_only_and_unknown_group(tmp_path):
    """Test empty files and undeclared groups"""
    path = tmp_path / "empty.csv"
    path.write_text("id,group,label,f1\n")
    with pytest.raises(ConfigError):
        load_embeddings(path)
    path.write_text("id,group,label,f1\n0,c,0,1.0\n")
    with pytest.raises(ConfigError):
        load_embeddings(path, ["a", "b"])


def test_split_is_disjoint_and_exhaustive(small_cluster, rng):
    """Test train and test partition the ids"""
    train, test = split_dataset(small_cluster, 0.8, rng)
    assert len(train) == 320 and len(test) == 80
    assert not set(train.ids) & set(test.ids)
    assert set(train.ids) | set(test.ids) == set(small_cluster.ids)
    with pytest.raises(ConfigError):
        split_dataset(small_cluster, 1.0, rng)


def test_partition_sizes(small_cluster, rng):
    """Test both prior-set placements"""
    first = partition(small_cluster, 0.8, 50, rng, prior_first=True)
    assert len(first.prior) == 50 and len(first.stream) == 280 and len(first.test) == 70
    head = partition(small_cluster, 0.8, 50, rng)
    assert len(head.prior) == 50 and len(head.stream) == 270 and len(head.test) == 80
    assert not set(head.prior.ids) & set(head.stream.ids)
    with pytest.raises(ConfigError):
        partition(small_cluster, 0.8, 400, rng)


def test_perfect_experts_score_one(small_cluster, perfect_panel, make_state, rng):
    """Test uniform deferral over perfect experts is always right"""
    state = make_state(perfect_panel)
    state.deferrer = Network.zeros([2, 8, 3], head="softmax")
    metrics = evaluate(state, small_cluster, mode="full", rng=rng, repetitions=2)
    assert metrics.overall_accuracy == 1.0
    assert metrics.disparity == 0.0
    assert metrics.deferral_rate["classifier"] == pytest.approx(1 / 3)


def test_disparity_by_hand(tiny_dataset):
    """Test group accuracies for all-zero decisions"""
    metrics = decision_metrics(np.zeros(10, dtype=int), tiny_dataset, ["e1", "classifier"], [0.5, 0.5], 1.0)
    assert metrics.group_accuracy == {"a": pytest.approx(0.4), "b": pytest.approx(0.6)}
    assert metrics.disparity == pytest.approx(0.2)
    assert metrics.overall_accuracy == pytest.approx(0.5)


def test_committee_cost_counts_distinct_slots():
    """Test repeated draws of one expert are paid once"""
    costs = np.array([[1.0, 2.0, 0.0], [1.0, 2.0, 0.0]])
    slots = np.array([[0, 0, 1], [2, 2, 2]])
    assert committee_cost(slots, costs).tolist() == [3.0, 0.0]


@pytest.mark.parametrize("algorithm", ["strict", "smooth", "oracle", "random-committee", "mwu"])
def test_run_experiment_algorithms(algorithm, cluster_toml, write_config):
    """Test every algorithm runs on a small cluster config"""
    config = load_config(write_config(cluster_toml)).model_copy(update={"algorithm": algorithm})
    result = run_experiment(config)
    assert 0.0 <= result.metrics.overall_accuracy <= 1.0
    assert set(result.metrics.group_accuracy) == {"orange", "blue"}
    if algorithm in ("strict", "smooth", "oracle"):
        assert result.state is not None
        assert result.trace.height == 2
    if algorithm == "mwu":
        assert result.mwu_weights.sum() == pytest.approx(1.0)


def test_run_experiment_is_reproducible(cluster_toml, write_config):
    """Test the same seed gives the same metrics"""
    config = load_config(write_config(cluster_toml))
    assert run_experiment(config).metrics.flat() == run_experiment(config).metrics.flat()


def test_anchor_prior_from_config(cluster_toml, write_config):
    """Test an anchor-based prior drives a full run"""
    config = load_config(write_config(cluster_toml)).with_overrides(
        {"dsim.kind": "anchor", "dsim.n_anchors": 40}
    )
    result = run_experiment(config)
    assert result.prior.n_slots == 3
    assert 0.0 <= result.metrics.overall_accuracy <= 1.0


def test_deferral_map_columns(cluster_toml, write_config):
    """Test relative weights peak at 1 in every row"""
    result = run_experiment(load_config(write_config(cluster_toml)))
    frame = deferral_map(result.state, result.test)
    assert frame.columns == ["id", "group", "f1", "f2", "w_e1", "w_e2", "w_classifier"]
    peaks = frame.select(pl.max_horizontal("w_e1", "w_e2", "w_classifier"))[:, 0]
    assert np.allclose(peaks.to_numpy(), 1.0)


def test_single_point_sweep_has_zero_std(cluster_toml, write_config):
    """Test one run per point gives std 0"""
    config = load_config(write_config(cluster_toml)).with_overrides({"sweep.grid": {"dsim.s": [0.3]}})
    result = run_sweep(config)
    assert result.summary.height == 1
    assert result.summary["n_runs"].to_list() == [1]
    assert result.summary["overall_acc_std"].to_list() == [0.0]
    assert result.spearman == {}


def test_sweep_reports_spearman():
    """Test a three-point numeric grid gets a rank correlation"""
    raw = {
        "task": "cluster",
        "seed": 1,
        "data": {"n_label0": 40, "n_label1": 40, "n_blue": 80, "prior_size": 40},
        "training": {"prior_steps": 10, "eval_every": 0},
        "sweep": {"grid": {"dsim.s": [0.1, 0.25, 0.4]}, "workers": 2},
    }
    result = run_sweep(config_from_dict(raw))
    assert result.runs.height == 3
    assert list(result.spearman) == ["dsim.s"]


def test_sweep_rejects_unknown_grid_key(cluster_toml, write_config):
    """Test grid keys are validated before any run"""
    config = load_config(write_config(cluster_toml)).with_overrides({"sweep.grid": {"dsim.q": [1]}})
    with pytest.raises(ConfigError):
        run_sweep(config)
