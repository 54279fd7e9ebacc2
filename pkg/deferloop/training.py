"""
Loss stack, model updates, prior fitting, the two matching algorithms and baselines.

Everything here sees stream samples only through ``pipeline.observe``: expert
votes, features and groups. Aggregated pipeline decisions are the training
signal unless a run explicitly asks for ground truth (oracle mode).
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import polars as pl

from deferloop.classifiers import NetworkClassifier, TreeClassifier
from deferloop.core import Dataset
from deferloop.dsim import SimilarityPrior
from deferloop.exceptions import ConfigError
from deferloop.experts import ExpertPanel
from deferloop.monitoring import (
    RunMetrics,
    TraceRecorder,
    committee_cost,
    decision_metrics,
    evaluate,
)
from deferloop.nn import Gradients, Network, OptimizerState, step
from deferloop.pipeline import (
    Classifier,
    PipelineState,
    aggregate_committee_batch,
    aggregate_full,
    mix_prior,
    observe,
    prediction_matrix,
    sigma,
)
from deferloop.utils import SeedStreams

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


@dataclass
class PriorFitSettings:
    """
    How the initial deferrer is regressed onto dSim rows.

    The squared error is summed over outputs and over the (mini)batch.

    Args:
        optimizer: ``sgd`` or ``adam``
        learning_rate: Step size
        steps: Number of optimizer steps
        batch_size: Minibatch size, ``None`` for the full prior set
    """

    optimizer: str = "sgd"
    learning_rate: float = 0.001
    steps: int = 500
    batch_size: Optional[int] = None

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("prior-fit steps must be nonnegative")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("prior-fit batch size must be positive")
        OptimizerState(self.optimizer, self.learning_rate)


@dataclass
class LambdaSchedule:
    """
    Cost weight as a function of the update counter t (1-based).

    ``constant``: lambda = value. ``linear``: lambda = value * t.
    """

    kind: str = "constant"
    value: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "linear"):
            raise ConfigError(f"unknown lambda schedule '{self.kind}'")
        if self.value < 0:
            raise ConfigError("lambda must be nonnegative")

    def __call__(self, t: int) -> float:
        return self.value * t if self.kind == "linear" else self.value


@dataclass
class TrainConfig:
    """
    Training hyperparameters.

    Args:
        alpha: Weight of the deferral loss in L = L_f + alpha * L_D
        learning_rate: Main-loop step size for deferrer and network classifier
        optimizer: Main-loop optimizer kind
        lambda_schedule: Cost weight schedule
        batch_size: Samples per model update (B)
        committee_size: k for committee aggregation
        aggregation: ``full`` or ``committee`` decisions during training
        smooth_horizon: T_d, the Smooth-Matching prior half-life in samples
        prior: Prior-fit settings
        oracle: Train on ground truth instead of aggregated decisions
        eval_every: Trace recording period in updates (0 disables)
        max_iterations: Cap on stream samples consumed
        seed: Global seed
    """

    alpha: float = 1.0
    learning_rate: float = 0.0075
    optimizer: str = "sgd"
    lambda_schedule: LambdaSchedule = field(default_factory=LambdaSchedule)
    batch_size: int = 10
    committee_size: int = 1
    aggregation: str = "full"
    smooth_horizon: int = 500
    prior: PriorFitSettings = field(default_factory=PriorFitSettings)
    oracle: bool = False
    eval_every: int = 1
    max_iterations: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError("alpha must be nonnegative")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch size must be at least 1")
        if self.committee_size < 1:
            raise ConfigError("committee size must be at least 1")
        if self.aggregation not in ("full", "committee"):
            raise ConfigError(f"unknown aggregation '{self.aggregation}'")
        if self.smooth_horizon < 0:
            raise ConfigError("smooth horizon must be nonnegative")
        if self.max_iterations is not None and self.max_iterations < 0:
            raise ConfigError("max_iterations must be nonnegative")

    @classmethod
    def cluster(cls, **overrides) -> "TrainConfig":
        """Cluster-detection defaults: plain gradient at 0.0075, B=10, full vote."""
        return cls(**overrides)

    @classmethod
    def content_moderation(cls, **overrides) -> "TrainConfig":
        """Content-moderation defaults: lambda = t/100, B=100, k=5 committees, T_d=10000, prior fit over 1000 passes."""
        values = dict(
            learning_rate=0.01,
            lambda_schedule=LambdaSchedule("linear", 0.01),
            batch_size=100,
            committee_size=5,
            aggregation="committee",
            smooth_horizon=10000,
            prior=PriorFitSettings("adam", 1e-4, 10000, batch_size=100),
            eval_every=10,
        )
        values.update(overrides)
        return cls(**values)


@dataclass
class Batch:
    """
    Buffered samples for one model update.

    Args:
        features: (N, n) inputs
        groups: (N,) group ids
        labels: (N,) training labels (aggregated decisions, or truth in oracle mode)
        votes: (N, experts) cached expert votes
        costs: (N, m) per-slot costs
    """

    features: np.ndarray
    groups: np.ndarray
    labels: np.ndarray
    votes: np.ndarray
    costs: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def _clamp(p: np.ndarray) -> np.ndarray:
    return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def _log_loss(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    p = _clamp(np.asarray(p, dtype=float))
    y = np.asarray(y, dtype=float)
    return -y * np.log(p) - (1.0 - y) * np.log(1.0 - p)


def classifier_loss(f_out: Union[float, np.ndarray], y: Union[int, np.ndarray]):
    """Logistic log-loss of the classifier output, probabilities clamped to [1e-7, 1-1e-7]."""
    out = _log_loss(f_out, y)
    return float(out) if np.ndim(out) == 0 else out


def deferral_loss(
    d: np.ndarray,
    y_e: np.ndarray,
    y: Union[int, np.ndarray],
    c: np.ndarray,
    lam: float,
):
    """Log-loss of sigma(D . y_e) plus lam * D . c; accepts single rows or batches."""
    d = np.asarray(d, dtype=float)
    y_hat = sigma(np.sum(d * np.asarray(y_e, dtype=float), axis=-1))
    out = _log_loss(y_hat, y) + lam * np.sum(d * np.asarray(c, dtype=float), axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def combined_loss(
    batch: Batch,
    deferrer: Network,
    classifier: Classifier,
    alpha: float,
    lam: float,
) -> float:
    """
    Batch mean of L_f + alpha * L_D.

    Raises:
        ConfigError: If the batch is empty
    """
    if len(batch) == 0:
        raise ConfigError("cannot compute a loss on an empty batch")
    f = classifier.predict_proba(batch.features)
    d = np.atleast_2d(deferrer.forward(batch.features))
    y_e = prediction_matrix(batch.votes, f)
    total = classifier_loss(f, batch.labels) + alpha * deferral_loss(
        d, y_e, batch.labels, batch.costs, lam
    )
    return float(np.mean(total))


def loss_gradients(
    batch: Batch,
    deferrer: Network,
    classifier: Classifier,
    alpha: float,
    lam: float,
) -> Tuple[Gradients, Optional[np.ndarray]]:
    """
    Exact gradients of ``combined_loss`` at the current parameters.

    Returns:
        (deferrer gradients, classifier dLoss/dLogit rows or None for a tree)
    """
    if len(batch) == 0:
        raise ConfigError("cannot compute gradients on an empty batch")
    n = len(batch)
    y = batch.labels.astype(float)
    f = classifier.predict_proba(batch.features)
    d = np.atleast_2d(deferrer.forward(batch.features))
    y_e = prediction_matrix(batch.votes, f)
    y_hat = sigma(np.sum(d * y_e, axis=1))

    # d(log-loss of sigma(s))/ds; zero where the clamp is active
    live = (y_hat > PROB_CLAMP) & (y_hat < 1.0 - PROB_CLAMP)
    d_s = np.where(live, 2.0 * (y_hat - y), 0.0)

    d_deferrer = alpha * (d_s[:, None] * y_e + lam * batch.costs) / n
    deferrer_grads = deferrer.backward(batch.features, d_deferrer)

    if not isinstance(classifier, NetworkClassifier):
        return deferrer_grads, None
    f_live = (f > PROB_CLAMP) & (f < 1.0 - PROB_CLAMP)
    d_logit = np.where(f_live, f - y, 0.0) + alpha * d_s * d[:, -1] * f * (1.0 - f)
    return deferrer_grads, d_logit / n


def update_model(state: PipelineState, batch: Batch, alpha: float, lam: float) -> PipelineState:
    """
    One UpdateModel call: gradient step on the deferrer, classifier update.

    Both gradients are taken at the pre-update parameters. A network
    classifier takes a gradient step; a tree classifier is refit from scratch
    on every (x, label) pair it has been given.

    Raises:
        NumericError: If a gradient is non-finite
    """
    deferrer_grads, classifier_logit_grad = loss_gradients(
        batch, state.deferrer, state.classifier, alpha, lam
    )
    step(state.deferrer, deferrer_grads, state.deferrer_optimizer)
    if isinstance(state.classifier, NetworkClassifier):
        state.classifier.gradient_step(batch.features, classifier_logit_grad)
    elif isinstance(state.classifier, TreeClassifier):
        state.classifier.refit(batch.features, batch.labels)
    return state


def fit_prior_deferrer(
    unlabeled: Dataset,
    table: SimilarityPrior,
    settings: PriorFitSettings,
    rng: np.random.Generator,
    hidden: Sequence[int] = (16, 8),
    deferrer: Optional[Network] = None,
) -> Network:
    """
    Regress a softmax deferrer onto normalized dSim rows.

    Only features and groups of ``unlabeled`` are used. Inputs are
    standardized with the statistics of this set.

    Args:
        unlabeled: Prior set
        table: Similarity prior giving the target rows
        settings: Optimizer, rate and number of steps
        rng: Initialization and minibatch randomness
        hidden: Hidden layer widths when a new network is built
        deferrer: Existing network to fit instead of a fresh one

    Raises:
        ConfigError: If the prior set is empty
    """
    if len(unlabeled) == 0:
        raise ConfigError("prior fitting needs at least one unlabeled sample")
    x = unlabeled.features
    targets = table.prior_weights(x, unlabeled.groups)
    if deferrer is None:
        deferrer = Network([x.shape[1], *hidden, targets.shape[1]], head="softmax", rng=rng)
        deferrer.fit_input_scaling(x)
    opt = OptimizerState(settings.optimizer, settings.learning_rate)

    for _ in range(settings.steps):
        if settings.batch_size is None or settings.batch_size >= len(x):
            xb, tb = x, targets
        else:
            idx = rng.choice(len(x), size=settings.batch_size, replace=False)
            xb, tb = x[idx], targets[idx]
        out = np.atleast_2d(deferrer.forward(xb))
        step(deferrer, deferrer.backward(xb, 2.0 * (out - tb)), opt)

    fitted = np.atleast_2d(deferrer.forward(x))
    logger.info(
        "prior fit: %d steps, mean squared error %.5f",
        settings.steps,
        float(np.mean(np.sum((fitted - targets) ** 2, axis=1))),
    )
    return deferrer


@dataclass
class TrainingResult:
    """
    Outcome of one training run.

    Args:
        state: Final pipeline (u_T, v_T)
        metrics: Test-set metrics, or online-decision metrics without a test set
        decisions: Aggregated decision for every consumed stream sample
        updates: Number of model updates performed
        samples: Number of stream samples consumed
        final_mu: Prior weight in effect after the last sample (Smooth-Matching)
        trace: Per-update evaluation rows
    """

    state: PipelineState
    metrics: RunMetrics
    decisions: np.ndarray
    updates: int
    samples: int
    final_mu: float = 0.0
    trace: pl.DataFrame = field(default_factory=pl.DataFrame)

    @property
    def deferrer(self) -> Network:
        return self.state.deferrer

    @property
    def classifier(self) -> Classifier:
        return self.state.classifier


def smooth_weight(t: Union[int, np.ndarray], horizon: int) -> Union[float, np.ndarray]:
    """mu_t = T_d / (t + T_d); 0 when T_d = 0 (t counts samples from 1)."""
    t = np.asarray(t, dtype=float)
    if horizon == 0:
        out = np.zeros_like(t)
    else:
        out = horizon / (t + horizon)
    return float(out) if out.ndim == 0 else out


def _run_loop(
    stream: Dataset,
    state: PipelineState,
    config: TrainConfig,
    seeds: SeedStreams,
    prior: Optional[SimilarityPrior],
    test_set: Optional[Dataset],
    recorder: Optional[TraceRecorder],
) -> TrainingResult:
    n = len(stream) if config.max_iterations is None else min(len(stream), config.max_iterations)
    expert_rngs = state.panel.rng_streams(seeds.seed_sequence("experts"))
    committee_rng = seeds.generator("committee")
    batch_size = config.batch_size

    decisions = np.zeros(n, dtype=np.int64)
    slot_totals = np.zeros(state.n_slots)
    cost_total = 0.0
    updates = 0
    mu = smooth_weight(n, config.smooth_horizon) if prior is not None else 0.0

    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        obs = observe(state.panel, stream, slice(start, stop), expert_rngs, config.oracle)
        features = obs.features
        f = state.classifier_proba(features)
        y_e = prediction_matrix(obs.votes, f)
        weights = state.deferral_weights(features)
        if prior is not None:
            mu_rows = smooth_weight(np.arange(start + 1, stop + 1), config.smooth_horizon)
            weights = mix_prior(weights, prior, features, obs.groups, mu_rows)
        costs = state.panel.cost_matrix(features, obs.groups)

        if state.aggregation == "committee":
            labels, slots = aggregate_committee_batch(
                weights, y_e, state.committee_size, committee_rng
            )
            slot_totals += np.bincount(slots.ravel(), minlength=state.n_slots) / slots.shape[1]
            cost_total += float(committee_cost(slots, costs).sum())
        else:
            labels = aggregate_full(weights, y_e)
            slot_totals += weights.sum(axis=0)
            cost_total += float(np.sum(weights * costs))
        decisions[start:stop] = labels

        if stop - start < batch_size:
            logger.debug("dropping trailing partial batch of %d samples", stop - start)
            break
        train_labels = obs.true_labels if config.oracle else labels
        batch = Batch(features, obs.groups, train_labels, obs.votes, costs)
        updates += 1
        update_model(state, batch, config.alpha, config.lambda_schedule(updates))

        if recorder is not None and recorder.due(updates):
            step_mu = smooth_weight(stop, config.smooth_horizon) if prior is not None else 0.0
            recorder.record(state, stop, prior, step_mu)

    logger.info("training done: %d samples, %d updates", n, updates)
    if test_set is not None:
        metrics = evaluate(
            state,
            test_set,
            mode=state.aggregation,
            k=state.committee_size,
            rng=seeds.generator("evaluation"),
            prior=prior,
            mu=mu,
        )
    else:
        seen = stream.subset(slice(0, n))
        metrics = decision_metrics(
            decisions,
            seen,
            [*state.panel.ids, "classifier"],
            slot_totals / max(n, 1),
            cost_total / max(n, 1),
            state.classifier_proba(seen.features) if n else None,
        )
    trace = recorder.frame() if recorder is not None else pl.DataFrame()
    metrics.trace = trace
    return TrainingResult(state, metrics, decisions, updates, n, float(mu), trace)


def strict_matching(
    stream: Dataset,
    state: PipelineState,
    table: SimilarityPrior,
    config: TrainConfig,
    prior_set: Optional[Dataset] = None,
    seeds: Optional[SeedStreams] = None,
    test_set: Optional[Dataset] = None,
    recorder: Optional[TraceRecorder] = None,
) -> TrainingResult:
    """
    Strict-Matching: fit the deferrer to the dSim prior, then train on decisions.

    Per sample the pipeline forms y_e, computes D(x) and aggregates; every B
    samples it calls ``update_model`` on the buffered (x, decision) pairs.

    Args:
        stream: Training stream
        state: Pipeline to train (its deferrer is overwritten by the prior fit)
        table: Similarity prior the deferrer starts from
        config: Hyperparameters
        prior_set: Unlabeled samples for the prior fit; skip the fit when None
        seeds: Random streams, defaults to ``SeedStreams(config.seed)``
        test_set: Held-out set for final metrics
        recorder: Optional per-update trace recorder
    """
    seeds = seeds if seeds is not None else SeedStreams(config.seed)
    if prior_set is not None:
        state.deferrer.fit_input_scaling(prior_set.features)
        fit_prior_deferrer(
            prior_set,
            table,
            config.prior,
            seeds.generator("deferrer-init"),
            deferrer=state.deferrer,
        )
    return _run_loop(stream, state, config, seeds, None, test_set, recorder)


def smooth_matching(
    stream: Dataset,
    state: PipelineState,
    prior: SimilarityPrior,
    config: TrainConfig,
    seeds: Optional[SeedStreams] = None,
    test_set: Optional[Dataset] = None,
    recorder: Optional[TraceRecorder] = None,
) -> TrainingResult:
    """
    Smooth-Matching: decide with mu_t * prior + (1 - mu_t) * D_u(x).

    mu_t = T_d / (t + T_d) with t counting stream samples from 1; the prior
    row has its classifier slot zeroed. Updates train D_u alone, as in
    Strict-Matching.
    """
    seeds = seeds if seeds is not None else SeedStreams(config.seed)
    return _run_loop(stream, state, config, seeds, prior, test_set, recorder)


@dataclass
class MWUResult:
    """Weight trajectory (T+1, experts) and per-step aggregated decisions."""

    weights: np.ndarray
    decisions: np.ndarray


def mwu_baseline(
    stream: Dataset,
    panel: ExpertPanel,
    eta: float,
    rngs: Sequence[np.random.Generator],
) -> MWUResult:
    """
    Context-free multiplicative weights over the experts.

    With no ground truth available, each step's reference label is the
    weighted-majority vote 1[w . votes > 0.5]; experts disagreeing with it
    are multiplied by (1 - eta), then weights are renormalized.

    Raises:
        ConfigError: If eta is outside [0, 0.5] or the panel is empty
    """
    if not 0.0 <= eta <= 0.5:
        raise ConfigError(f"eta must lie in [0, 0.5], got {eta}")
    if len(panel) == 0:
        raise ConfigError("multiplicative weights need at least one expert")
    n = len(stream)
    votes = observe(panel, stream, slice(0, n), rngs).votes.astype(float)
    weights = np.empty((n + 1, len(panel)))
    weights[0] = 1.0 / len(panel)
    decisions = np.empty(n, dtype=np.int64)
    for t in range(n):
        w = weights[t]
        decisions[t] = int(w @ votes[t] > 0.5)
        w = w * np.where(votes[t] != decisions[t], 1.0 - eta, 1.0)
        weights[t + 1] = w / w.sum()
    return MWUResult(weights, decisions)


def random_committee_baseline(
    stream: Dataset,
    panel: ExpertPanel,
    k: int,
    rng: np.random.Generator,
    expert_rngs: Optional[Sequence[np.random.Generator]] = None,
) -> RunMetrics:
    """
    Majority of k experts drawn uniformly with replacement; no training.

    Args:
        stream: Samples to decide (scored against ground truth)
        panel: The experts
        k: Committee size
        rng: Committee draws and tie-breaks
        expert_rngs: Expert streams, spawned from ``rng`` when omitted
    """
    if k < 1:
        raise ConfigError(f"committee size must be at least 1, got {k}")
    if len(panel) == 0:
        raise ConfigError("random committees need at least one expert")
    if expert_rngs is None:
        expert_rngs = panel.rng_streams(np.random.SeedSequence(int(rng.integers(2**62))))
    n = len(stream)
    votes = observe(panel, stream, slice(0, n), expert_rngs).votes
    weights = np.zeros((n, panel.n_slots))
    weights[:, :-1] = 1.0 / len(panel)
    y_e = prediction_matrix(votes, np.zeros(n))
    decisions, slots = aggregate_committee_batch(weights, y_e, k, rng)
    costs = panel.cost_matrix(stream.features, stream.groups)
    rates = np.bincount(slots.ravel(), minlength=panel.n_slots) / slots.size
    return decision_metrics(
        decisions,
        stream,
        [*panel.ids, "classifier"],
        rates,
        float(committee_cost(slots, costs).mean()),
    )


def make_classifier(
    kind: str,
    n_inputs: int,
    rng: np.random.Generator,
    hidden: Sequence[int] = (64, 32, 16),
    optimizer: str = "sgd",
    learning_rate: float = 0.01,
    max_depth: int = 4,
    scaling_data: Optional[np.ndarray] = None,
    random_state: Optional[int] = None,
) -> Classifier:
    """Build a ``tree`` (CART) or ``network`` classifier."""
    if kind == "tree":
        return TreeClassifier(max_depth=max_depth, random_state=random_state)
    if kind == "network":
        net = Network([n_inputs, *hidden, 1], head="sigmoid", rng=rng)
        if scaling_data is not None and len(scaling_data):
            net.fit_input_scaling(scaling_data)
        return NetworkClassifier(net, OptimizerState(optimizer, learning_rate))
    raise ConfigError(f"unknown classifier kind '{kind}'")

