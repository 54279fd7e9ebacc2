"""
Tests for losses, model updates, prior fitting and the training loops
"""

import numpy as np
import pytest

import deferloop.training as training
from deferloop.core import Dataset
from deferloop.dsim import make_cluster_dsim, uniform_dsim
from deferloop.exceptions import ConfigError
from deferloop.experiments import split_dataset
from deferloop.experts import ExpertModel, ExpertPanel, biased_panel, make_cluster_experts
from deferloop.nn import Network, OptimizerState, step
from deferloop.training import (
    Batch,
    LambdaSchedule,
    PriorFitSettings,
    TrainConfig,
    classifier_loss,
    combined_loss,
    deferral_loss,
    fit_prior_deferrer,
    loss_gradients,
    make_classifier,
    mwu_baseline,
    random_committee_baseline,
    smooth_matching,
    smooth_weight,
    strict_matching,
    update_model,
)
from deferloop.utils import SeedStreams


def _random_batch(rng, n=6, dim=2, experts=2):
    return Batch(
        features=rng.normal(size=(n, dim)),
        groups=rng.integers(0, 2, size=n),
        labels=rng.integers(0, 2, size=n),
        votes=rng.integers(0, 2, size=(n, experts)),
        costs=np.tile([1.0, 2.0, 0.0], (n, 1)),
    )


def _finite_difference(net, loss, h=1e-6):
    flat = net.get_flat()
    out = np.empty_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] += h
        net.set_flat(bumped)
        up = loss()
        bumped[i] -= 2 * h
        net.set_flat(bumped)
        down = loss()
        out[i] = (up - down) / (2 * h)
    net.set_flat(flat)
    return out


def test_loss_examples():
    """Test hand-computed loss values"""
    assert classifier_loss(0.5, 1) == pytest.approx(np.log(2))
    assert classifier_loss(0.1, 1) == pytest.approx(2.302585, rel=1e-6)
    d = np.array([0.5, 0.5, 0.0])
    y_e = np.array([1.0, 0.0, 0.3])
    c = np.array([1.0, 2.0, 0.0])
    assert deferral_loss(d, y_e, 1, c, 0.0) == pytest.approx(np.log(2))
    assert deferral_loss(d, y_e, 1, c, 1.0) == pytest.approx(np.log(2) + 1.5)


def test_classifier_loss_is_clamped():
    """Test probabilities at 0 and 1 give finite losses"""
    assert np.isfinite(classifier_loss(0.0, 1))
    assert classifier_loss(1.0, 0) == pytest.approx(-np.log(1e-7), rel=1e-6)


def test_combined_loss_rejects_empty_batch(rng):
    """Test the empty-batch guard"""
    empty = Batch(np.zeros((0, 2)), np.zeros(0, int), np.zeros(0, int), np.zeros((0, 2)), np.zeros((0, 3)))
    net = Network([2, 3], rng=rng)
    clf = make_classifier("network", 2, rng, hidden=(4,))
    with pytest.raises(ConfigError):
        combined_loss(empty, net, clf, 1.0, 0.0)


def test_loss_gradients_match_finite_differences(rng):
    """Test deferrer and classifier gradients of the combined loss"""
    for _ in range(5):
        batch = _random_batch(rng)
        deferrer = Network([2, 5, 3], head="softmax", rng=rng)
        clf = make_classifier("network", 2, rng, hidden=(4,))
        alpha, lam = 0.7, 0.3

        d_grads, logit_grad = loss_gradients(batch, deferrer, clf, alpha, lam)
        numeric = _finite_difference(deferrer, lambda: combined_loss(batch, deferrer, clf, alpha, lam))
        assert np.allclose(d_grads.flat(), numeric, rtol=1e-4, atol=1e-7)

        analytic = clf.net.backward(batch.features, logit_grad[:, None], wrt_logits=True).flat()
        numeric = _finite_difference(clf.net, lambda: combined_loss(batch, deferrer, clf, alpha, lam))
        assert np.allclose(analytic, numeric, rtol=1e-4, atol=1e-7)


def test_tree_classifier_has_no_logit_gradient(rng):
    """Test trees get refit instead of a gradient"""
    batch = _random_batch(rng)
    deferrer = Network([2, 5, 3], head="softmax", rng=rng)
    tree = make_classifier("tree", 2, rng, random_state=0)
    _, logit_grad = loss_gradients(batch, deferrer, tree, 1.0, 0.0)
    assert logit_grad is None


def test_update_model_moves_deferrer(cluster_panel, make_state, rng):
    """Test one update changes the deferrer and refits a tree"""
    state = make_state(cluster_panel, classifier="tree")
    before = state.deferrer.get_flat()
    update_model(state, _random_batch(rng, n=10), alpha=1.0, lam=0.0)
    assert not np.array_equal(state.deferrer.get_flat(), before)
    assert state.classifier.n_seen == 10


def test_update_model_rewards_agreeing_expert(cluster_panel, make_state):
    """Test the expert that matches the decisions gains weight and the other loses it"""
    state = make_state(cluster_panel, classifier="tree")
    state.deferrer = Network.zeros([2, 8, 3], head="softmax")
    labels = np.array([0, 1] * 5)
    batch = Batch(
        features=np.random.default_rng(3).normal(size=(10, 2)),
        groups=np.zeros(10, dtype=int),
        labels=labels,
        votes=np.column_stack([labels, 1 - labels]),
        costs=np.tile([1.0, 1.0, 0.0], (10, 1)),
    )
    update_model(state, batch, alpha=1.0, lam=0.0)
    after = state.deferrer.forward(batch.features)
    assert np.all(after[:, 0] > 1 / 3)
    assert np.all(after[:, 1] < 1 / 3)
    assert np.all(after[:, 0] > after[:, 2])


def test_small_steps_descend(rng):
    """Test a 1e-4 gradient step lowers the batch loss almost always"""
    descended = 0
    for _ in range(100):
        batch = _random_batch(rng, n=8)
        deferrer = Network([2, 5, 3], head="softmax", rng=rng)
        classifier = make_classifier("network", 2, rng, hidden=(4,), learning_rate=1e-4)
        lam = float(rng.uniform(0.0, 1.0))
        before = combined_loss(batch, deferrer, classifier, 1.0, lam)
        deferrer_grads, logit_grad = loss_gradients(batch, deferrer, classifier, 1.0, lam)
        step(deferrer, deferrer_grads, OptimizerState("sgd", 1e-4))
        classifier.gradient_step(batch.features, logit_grad)
        if combined_loss(batch, deferrer, classifier, 1.0, lam) < before:
            descended += 1
    assert descended >= 95


def test_schedules():
    """Test lambda schedules and the smoothing weight"""
    assert LambdaSchedule("linear", 0.01)(3) == pytest.approx(0.03)
    assert LambdaSchedule("constant", 0.5)(100) == 0.5
    with pytest.raises(ConfigError):
        LambdaSchedule("cosine", 0.1)
    assert smooth_weight(1, 500) == pytest.approx(500 / 501)
    assert smooth_weight(500, 500) == pytest.approx(0.5)
    assert smooth_weight(10, 0) == 0.0


def test_train_config_validation():
    """Test hyperparameter checks and the task presets"""
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(aggregation="mean")
    cm = TrainConfig.content_moderation()
    assert cm.batch_size == 100 and cm.committee_size == 5 and cm.aggregation == "committee"
    assert TrainConfig.cluster().learning_rate == 0.0075


def test_prior_fit_reduces_error(small_cluster, cluster_table):
    """Test regression onto dSim rows lowers the squared error"""
    targets = cluster_table.prior_weights(small_cluster.features, small_cluster.groups)

    def error(steps):
        net = fit_prior_deferrer(
            small_cluster, cluster_table, PriorFitSettings("adam", 0.01, steps), np.random.default_rng(2)
        )
        return float(np.mean(np.sum((net.forward(small_cluster.features) - targets) ** 2, axis=1)))

    assert error(300) < 0.5 * error(0)


def test_prior_fit_zero_steps_keeps_network(small_cluster, cluster_table, rng):
    """Test zero steps leave the given deferrer untouched"""
    net = Network([2, 8, 3], rng=rng)
    before = net.get_flat()
    fit_prior_deferrer(small_cluster, cluster_table, PriorFitSettings(steps=0), rng, deferrer=net)
    assert np.array_equal(net.get_flat(), before)


def test_prior_fit_uniform_table(small_cluster):
    """Test an uninformative table gives a uniform deferrer on held-out samples"""
    train, held_out = split_dataset(small_cluster, 0.5, np.random.default_rng(0))
    table = uniform_dsim(2, small_cluster.group_names)
    net = fit_prior_deferrer(train, table, PriorFitSettings("adam", 0.01, 500), np.random.default_rng(4))
    assert np.max(np.abs(net.forward(held_out.features) - 1 / 3)) < 0.05


def test_prior_fit_oracle_table_picks_e1_on_orange(small_cluster):
    """Test s = 0 makes e1 the top slot on orange samples"""
    net = fit_prior_deferrer(
        small_cluster, make_cluster_dsim(0.0), PriorFitSettings("adam", 0.01, 500), np.random.default_rng(5)
    )
    orange = small_cluster.features[small_cluster.groups == 0]
    assert np.mean(net.forward(orange).argmax(axis=1) == 0) >= 0.95


def test_prior_fit_single_category(small_cluster, cluster_table):
    """Test a one-category prior set reproduces that category's normalized column"""
    orange = small_cluster.subset(np.flatnonzero(small_cluster.groups == 0))
    net = fit_prior_deferrer(orange, cluster_table, PriorFitSettings("adam", 0.01, 500), np.random.default_rng(6))
    assert np.max(np.abs(net.forward(orange.features) - cluster_table.prior(0))) < 0.05


def test_cm_prior_fit_concentrates_on_known_experts():
    """Test the content-moderation prior fit puts most mass on the n_s known experts"""
    from deferloop.dsim import make_cm_dsim
    from deferloop.experiments import CMSpec, gen_cm_surrogate

    data = gen_cm_surrogate(CMSpec(seed=3, n_samples=1000))
    table = make_cm_dsim(2, np.random.default_rng(1))
    known = table.values[:-1, data.groups].T > 0

    def known_mass(settings):
        net = fit_prior_deferrer(data, table, settings, np.random.default_rng(2), hidden=(64, 32, 16))
        return float(np.mean(np.sum(net.forward(data.features)[:, :-1] * known, axis=1)))

    full_batch = known_mass(PriorFitSettings("adam", 1e-4, 1000))
    passes = known_mass(TrainConfig.content_moderation().prior)
    assert passes > full_batch
    assert passes >= 0.5


def test_strict_matching_runs(small_cluster, cluster_panel, cluster_table, make_state):
    """Test update count, dropped tail and simplex-valued deferrer"""
    state = make_state(cluster_panel, classifier="tree")
    config = TrainConfig.cluster(eval_every=0, max_iterations=95, prior=PriorFitSettings(steps=20))
    result = strict_matching(
        small_cluster, state, cluster_table, config, prior_set=small_cluster, seeds=SeedStreams(1)
    )
    assert result.samples == 95
    assert result.updates == 9
    assert len(result.decisions) == 95
    assert state.classifier.n_seen == 90
    weights = state.deferral_weights(small_cluster.features)
    assert np.allclose(weights.sum(axis=1), 1.0)


def test_strict_matching_is_deterministic(small_cluster, cluster_panel, cluster_table, make_state):
    """Test two runs with the same seeds agree exactly"""
    config = TrainConfig.cluster(eval_every=0)

    def run():
        state = make_state(cluster_panel, seed=4)
        return strict_matching(small_cluster, state, cluster_table, config, seeds=SeedStreams(9))

    first, second = run(), run()
    assert np.array_equal(first.decisions, second.decisions)
    assert np.array_equal(first.deferrer.get_flat(), second.deferrer.get_flat())


def test_training_never_reads_stream_labels(
    monkeypatch, small_cluster, cluster_panel, cluster_table, make_state
):
    """Test flipping every stream label changes nothing once expert votes are fixed"""
    real_observe = training.observe
    recorded = []

    def recording(panel, stream, rows, rngs, reveal_labels=False):
        obs = real_observe(panel, stream, rows, rngs, reveal_labels)
        recorded.append(obs.votes.copy())
        return obs

    config = TrainConfig.cluster(eval_every=0)
    monkeypatch.setattr(training, "observe", recording)
    first = strict_matching(
        small_cluster, make_state(cluster_panel, seed=2), cluster_table, config, seeds=SeedStreams(3)
    )

    flipped = small_cluster.subset(slice(0, len(small_cluster)))
    flipped.labels[:] = 1 - flipped.labels
    replay = iter(recorded)

    def replaying(panel, stream, rows, rngs, reveal_labels=False):
        obs = real_observe(panel, stream, rows, rngs, reveal_labels)
        obs.votes = next(replay)
        return obs

    monkeypatch.setattr(training, "observe", replaying)
    second = strict_matching(
        flipped, make_state(cluster_panel, seed=2), cluster_table, config, seeds=SeedStreams(3)
    )
    assert np.array_equal(first.decisions, second.decisions)
    assert np.array_equal(first.deferrer.get_flat(), second.deferrer.get_flat())
    assert np.array_equal(first.classifier.net.get_flat(), second.classifier.net.get_flat())


def test_oracle_mode_trains_on_truth(small_cluster, cluster_panel, cluster_table, make_state):
    """Test the tree sees ground truth when oracle mode is on"""
    state = make_state(cluster_panel, classifier="tree")
    config = TrainConfig.cluster(eval_every=0, oracle=True)
    strict_matching(small_cluster, state, cluster_table, config, seeds=SeedStreams(0))
    seen = np.concatenate(state.classifier._labels)
    assert np.array_equal(seen, small_cluster.labels[: len(seen)])


def test_smooth_matching_final_mu(small_cluster, cluster_panel, cluster_table, make_state):
    """Test the prior weight decays as T_d / (T + T_d)"""
    state = make_state(cluster_panel)
    config = TrainConfig.cluster(eval_every=0, smooth_horizon=100)
    result = smooth_matching(small_cluster, state, cluster_table, config, seeds=SeedStreams(0))
    assert result.final_mu == pytest.approx(100 / (len(small_cluster) + 100))
    assert result.metrics.n_samples == len(small_cluster)


def test_smooth_matching_with_test_set(small_cluster, cluster_panel, cluster_table, make_state):
    """Test metrics come from the held-out set when one is given"""
    stream = small_cluster.subset(np.arange(0, 400, 2))
    test = small_cluster.subset(np.arange(1, 400, 2))
    result = smooth_matching(
        stream, make_state(cluster_panel), cluster_table, TrainConfig.cluster(eval_every=0), test_set=test
    )
    assert result.metrics.n_samples == len(test)
    assert set(result.metrics.group_accuracy) == {"orange", "blue"}


def test_linear_lambda_grows_classifier_share(perfect_panel, make_state):
    """Test a rising cost weight never lowers the classifier's share"""
    state = make_state(perfect_panel, classifier="tree")
    state.deferrer = Network.zeros([2, 8, 3], head="softmax")
    rng = np.random.default_rng(8)
    grid = rng.normal(size=(50, 2))
    state.classifier.refit(rng.normal(size=(10, 2)), np.ones(10, dtype=int))
    schedule = LambdaSchedule("linear", 0.01)
    shares = [float(state.deferral_weights(grid)[:, -1].mean())]
    for t in range(1, 31):
        x = rng.normal(size=(10, 2))
        ones = np.ones(10, dtype=int)
        batch = Batch(
            x, np.zeros(10, dtype=int), ones, np.column_stack([ones, ones]), np.tile([1.0, 1.0, 0.0], (10, 1))
        )
        update_model(state, batch, alpha=1.0, lam=schedule(t))
        shares.append(float(state.deferral_weights(grid)[:, -1].mean()))
    assert np.all(np.diff(shares) >= 0.0)
    assert shares[-1] > shares[0]


def test_strict_matching_keeps_oracle_prior(small_cluster, cluster_panel, make_state):
    """Test training from an exact dSim table keeps each expert on its own cluster"""
    table = make_cluster_dsim(0.0)

    def run(max_iterations):
        state = make_state(cluster_panel, classifier="tree", learning_rate=0.0075)
        config = TrainConfig.cluster(
            eval_every=0, prior=PriorFitSettings("adam", 0.01, 300), max_iterations=max_iterations
        )
        result = strict_matching(
            small_cluster,
            state,
            table,
            config,
            prior_set=small_cluster,
            seeds=SeedStreams(5),
            test_set=small_cluster,
        )
        return state, result.metrics.overall_accuracy

    _, prior_only = run(0)
    state, trained = run(None)
    top = state.deferral_weights(small_cluster.features).argmax(axis=1)
    orange = small_cluster.groups == 0
    assert np.mean(top[orange] == 0) >= 0.95
    assert np.mean(top[~orange] == 1) >= 0.95
    assert trained >= prior_only - 0.02
    assert trained >= 0.95


def test_mwu_baseline(small_cluster, cluster_panel):
    """Test weights stay on the simplex and eta = 0 keeps them uniform"""
    rngs = cluster_panel.rng_streams(np.random.SeedSequence(0))
    result = mwu_baseline(small_cluster, cluster_panel, 0.1, rngs)
    assert result.weights.shape == (len(small_cluster) + 1, 2)
    assert np.allclose(result.weights.sum(axis=1), 1.0)
    frozen = mwu_baseline(small_cluster, cluster_panel, 0.0, cluster_panel.rng_streams(np.random.SeedSequence(0)))
    assert np.allclose(frozen.weights, 0.5)
    with pytest.raises(ConfigError):
        mwu_baseline(small_cluster, cluster_panel, 0.7, rngs)


def test_random_committee_baseline(small_cluster, perfect_panel, rng):
    """Test perfect experts give perfect committees and the classifier is never drawn"""
    metrics = random_committee_baseline(small_cluster, perfect_panel, 3, rng)
    assert metrics.overall_accuracy == 1.0
    assert metrics.deferral_rate["classifier"] == 0.0
    assert metrics.mean_committee_cost <= 2.0
    with pytest.raises(ConfigError):
        random_committee_baseline(small_cluster, make_cluster_experts(), 0, rng)


def test_mwu_weights_decay_geometrically(small_cluster):
    """Test an always-wrong expert loses a factor 1 - eta per step"""
    panel = ExpertPanel(
        (
            ExpertModel("good1", {0: 1.0, 1: 1.0}),
            ExpertModel("good2", {0: 1.0, 1: 1.0}),
            ExpertModel("bad", {0: 0.0, 1: 0.0}),
        ),
        ("orange", "blue"),
    )
    result = mwu_baseline(small_cluster, panel, 0.2, panel.rng_streams(np.random.SeedSequence(1)))
    expected = 0.8 ** np.arange(len(small_cluster) + 1)
    assert np.allclose(result.weights[:, 2] / result.weights[:, 0], expected)
    assert np.array_equal(result.decisions, small_cluster.labels)


def test_mwu_identical_experts_stay_uniform(small_cluster, perfect_panel):
    """Test experts that always agree keep equal weights"""
    panel = ExpertPanel((*perfect_panel.experts, ExpertModel("p3", {0: 1.0, 1: 1.0})), ("orange", "blue"))
    result = mwu_baseline(small_cluster, panel, 0.3, panel.rng_streams(np.random.SeedSequence(2)))
    assert np.allclose(result.weights, 1 / 3)


def test_single_expert_committee_on_biased_panel():
    """Test k = 1 on group z1 scores alpha + 0.5 * (1 - alpha)"""
    n = 20000
    rng = np.random.default_rng(11)
    stream = Dataset(rng.normal(size=(n, 2)), np.ones(n, dtype=int), rng.integers(0, 2, size=n), ["z0", "z1"])
    metrics = random_committee_baseline(stream, biased_panel(8, 0.75), 1, np.random.default_rng(12))
    assert metrics.overall_accuracy == pytest.approx(0.75 + 0.5 * 0.25, abs=0.01)
