"""
Data generators, dataset files, pipeline assembly and experiment runners.
"""

import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import polars as pl
from scipy.stats import spearmanr

from deferloop.config import RunConfig
from deferloop.core import Dataset
from deferloop.dsim import (
    SimilarityPrior,
    anchor_dsim,
    load_dsim_table,
    make_cluster_dsim,
    make_cm_dsim,
    uniform_dsim,
)
from deferloop.exceptions import ConfigError, ParseError, ShapeError
from deferloop.experts import (
    CLUSTER_GROUPS,
    CM_GROUPS,
    ExpertPanel,
    make_cluster_experts,
    make_cm_experts,
    panel_votes,
)
from deferloop.monitoring import (
    RunMetrics,
    TraceRecorder,
    average_metrics,
    committee_cost,
    decision_metrics,
    evaluate,
)
from deferloop.nn import Network, OptimizerState
from deferloop.parallel import ParallelExecutor
from deferloop.pipeline import (
    PipelineState,
    aggregate_committee_batch,
    aggregate_full,
    policy_weights,
    prediction_matrix,
)
from deferloop.quality import DataValidator
from deferloop.training import (
    TrainingResult,
    make_classifier,
    mwu_baseline,
    random_committee_baseline,
    smooth_matching,
    strict_matching,
)
from deferloop.utils import SeedStreams

logger = logging.getLogger(__name__)

__all__ = [
    "ClusterSpec",
    "CMSpec",
    "Partitions",
    "ExperimentResult",
    "SweepResult",
    "RunMetrics",
    "gen_cluster_data",
    "gen_cm_surrogate",
    "load_embeddings",
    "split_dataset",
    "partition",
    "make_dataset",
    "build_panel",
    "build_prior",
    "build_pipeline",
    "evaluate",
    "run_experiment",
    "run_sweep",
    "deferral_map",
]


@dataclass(frozen=True)
class ClusterSpec:
    """
    Three Gaussian sub-clusters sharing one random diagonal covariance.

    Orange label-0 points sit at mu, orange label-1 points at mu + 2.5, blue
    points at mu + 5 with coin-flip labels. mu and the variances are drawn
    uniformly from [0, 1].

    Args:
        seed: Generator seed
        n_label0: Orange points with label 0
        n_label1: Orange points with label 1
        n_blue: Blue points
        dim: Feature dimension
    """

    seed: int = 0
    n_label0: int = 500
    n_label1: int = 500
    n_blue: int = 1000
    dim: int = 2
    label1_offset: float = 2.5
    blue_offset: float = 5.0

    def __post_init__(self):
        if min(self.n_label0, self.n_label1, self.n_blue) < 1:
            raise ConfigError("cluster counts must be positive")
        if self.dim < 1:
            raise ConfigError("cluster dimension must be at least 1")


@dataclass(frozen=True)
class CMSpec:
    """
    Content-moderation surrogate: two isotropic Gaussian clouds and a noisy linear label rule.

    Args:
        seed: Generator seed
        n_samples: Total samples
        aae_fraction: Share of group 1 (the AAE dialect)
        dim: Feature dimension
        group_separation: Distance between the two group means
        label_noise: Noise scale of the label rule (0.51 gives about 85% Bayes accuracy)
        train_fraction: Train share of the train/test split
    """

    seed: int = 0
    n_samples: int = 25000
    aae_fraction: float = 0.64
    dim: int = 25
    group_separation: float = 4.0
    label_noise: float = 0.51
    train_fraction: float = 0.8

    def __post_init__(self):
        if not 0.0 < self.aae_fraction < 1.0:
            raise ConfigError("minority fraction must lie in (0, 1)")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train fraction must lie in (0, 1)")
        if self.dim < 2:
            raise ConfigError("the surrogate needs at least two feature dimensions")
        if self.n_samples < 2:
            raise ConfigError("the surrogate needs at least two samples")


def gen_cluster_data(spec: ClusterSpec) -> Dataset:
    """Generate the cluster-detection dataset (orange = group 0, blue = group 1)."""
    rng = np.random.default_rng(spec.seed)
    mu = rng.uniform(0.0, 1.0, size=spec.dim)
    std = np.sqrt(rng.uniform(0.0, 1.0, size=spec.dim))

    def cloud(n: int, offset: float) -> np.ndarray:
        return mu + offset + std * rng.standard_normal((n, spec.dim))

    features = np.vstack(
        [
            cloud(spec.n_label0, 0.0),
            cloud(spec.n_label1, spec.label1_offset),
            cloud(spec.n_blue, spec.blue_offset),
        ]
    )
    labels = np.concatenate(
        [
            np.zeros(spec.n_label0, dtype=np.int64),
            np.ones(spec.n_label1, dtype=np.int64),
            rng.integers(0, 2, size=spec.n_blue),
        ]
    )
    groups = np.concatenate(
        [np.zeros(spec.n_label0 + spec.n_label1, dtype=np.int64), np.ones(spec.n_blue, np.int64)]
    )
    return Dataset(features, groups, labels, list(CLUSTER_GROUPS))


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def gen_cm_surrogate(spec: CMSpec) -> Dataset:
    """
    Generate the content-moderation surrogate.

    x = mu_z + xi with xi ~ N(0, I); label y = 1[w . x + sigma * eps > 0]
    where w is a unit vector orthogonal to mu_1 - mu_0, so both groups see
    the same label rate and the same Bayes accuracy. Group 1 (AAE) makes up
    ``aae_fraction`` of the rows, in shuffled order.
    """
    rng = np.random.default_rng(spec.seed)
    n1 = int(round(spec.aae_fraction * spec.n_samples))
    groups = rng.permutation(
        np.concatenate([np.zeros(spec.n_samples - n1, np.int64), np.ones(n1, np.int64)])
    )
    direction = _unit(rng.standard_normal(spec.dim))
    rule = rng.standard_normal(spec.dim)
    rule = _unit(rule - (rule @ direction) * direction)
    means = np.vstack([np.zeros(spec.dim), spec.group_separation * direction])

    features = means[groups] + rng.standard_normal((spec.n_samples, spec.dim))
    score = features @ rule + spec.label_noise * rng.standard_normal(spec.n_samples)
    labels = (score > 0).astype(np.int64)
    return Dataset(features, groups, labels, list(CM_GROUPS))


def load_embeddings(
    path: Union[str, Path],
    group_names: Optional[List[str]] = None,
) -> Dataset:
    """
    Load a dataset file with columns ``id, group, label, f1..fn``.

    Args:
        path: CSV file
        group_names: Declared groups (position = id); defaults to the groups in
            order of first appearance

    Raises:
        ParseError: If a row is malformed (with its line number)
        ConfigError: If the file has no rows or names an undeclared group
    """
    try:
        frame = pl.read_csv(path, infer_schema_length=0)
    except pl.exceptions.NoDataError:
        raise ParseError(f"{path}: empty file", line=1) from None
    except pl.exceptions.ComputeError as e:
        raise ParseError(f"{path}: {e}") from None

    validator = DataValidator()
    missing = validator.check_columns(frame, ["id", "group", "label"])
    feature_cols = sorted(
        (c for c in frame.columns if c.startswith("f") and c[1:].isdigit()),
        key=lambda c: int(c[1:]),
    )
    if missing or not feature_cols:
        raise ParseError(f"{path}: expected columns id, group, label, f1..fn", line=1)
    if frame.height == 0:
        raise ConfigError(f"{path}: no samples (header only)")

    report = validator.validate(
        frame,
        {
            "id": pl.col("id").str.strip_chars().cast(pl.Int64, strict=False).is_not_null(),
            "label": pl.col("label").str.strip_chars().is_in(["0", "1"]),
            "group": pl.col("group").is_not_null(),
        },
    )
    for column, row in report["failures"].items():
        raise ParseError(f"bad {column} value '{frame[column][row]}'", line=row + 2)
    for column in feature_cols:
        row = validator.first_non_numeric(frame, column)
        if row is not None:
            raise ParseError(f"non-numeric feature '{frame[column][row]}' in {column}", line=row + 2)

    raw_groups = [g.strip() for g in frame["group"].to_list()]
    if group_names is None:
        group_names = list(dict.fromkeys(raw_groups))
    index = {name: i for i, name in enumerate(group_names)}
    unknown = sorted(set(raw_groups) - set(index))
    if unknown:
        raise ConfigError(f"{path}: undeclared groups {unknown}; expected {list(group_names)}")

    features = frame.select(
        [pl.col(c).str.strip_chars().cast(pl.Float64) for c in feature_cols]
    ).to_numpy()
    return Dataset(
        features=features,
        groups=np.array([index[g] for g in raw_groups], dtype=np.int64),
        labels=frame["label"].str.strip_chars().cast(pl.Int64).to_numpy(),
        group_names=list(group_names),
        ids=frame["id"].str.strip_chars().cast(pl.Int64).to_numpy(),
    )


def split_dataset(
    dataset: Dataset,
    train_fraction: float,
    rng: np.random.Generator,
) -> Tuple[Dataset, Dataset]:
    """
    Random disjoint, exhaustive train/test split.

    The train part holds round(train_fraction * N) rows.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train fraction must lie in (0, 1), got {train_fraction}")
    order = rng.permutation(len(dataset))
    n_train = int(round(train_fraction * len(dataset)))
    return dataset.subset(order[:n_train]), dataset.subset(order[n_train:])


@dataclass
class Partitions:
    """Unlabeled prior set, training stream and held-out test set."""

    prior: Dataset
    stream: Dataset
    test: Dataset


def partition(
    dataset: Dataset,
    train_fraction: float,
    prior_size: int,
    rng: np.random.Generator,
    prior_first: bool = False,
) -> Partitions:
    """
    Carve the prior set, stream and test set out of one dataset.

    With ``prior_first`` the shuffled dataset gives up its first
    ``prior_size`` rows before the train/test split (cluster task);
    otherwise the prior set is the head of the train partition and is left
    out of the stream (content moderation).

    Raises:
        ConfigError: If nothing is left for the stream or the test set
    """
    if prior_first:
        order = rng.permutation(len(dataset))
        if prior_size >= len(dataset) - 1:
            raise ConfigError(f"prior size {prior_size} leaves no data for training")
        prior = dataset.subset(order[:prior_size])
        stream, test = split_dataset(dataset.subset(order[prior_size:]), train_fraction, rng)
    else:
        train, test = split_dataset(dataset, train_fraction, rng)
        if prior_size >= len(train):
            raise ConfigError(f"prior size {prior_size} leaves no data for training")
        prior = train.subset(slice(0, prior_size))
        stream = train.subset(slice(prior_size, None))
    if len(stream) == 0 or len(test) == 0:
        raise ConfigError("the split left an empty stream or test set")
    return Partitions(prior, stream, test)


def _task_groups(task: str) -> List[str]:
    return list(CLUSTER_GROUPS) if task == "cluster" else list(CM_GROUPS)


def make_dataset(config: RunConfig, seeds: SeedStreams) -> Dataset:
    """Generate the task's dataset, or load it from ``data.path``."""
    d = config.data
    if d.path:
        return load_embeddings(d.path, _task_groups(config.task))
    if config.task == "cluster":
        spec = ClusterSpec(
            seed=seeds.int_seed("data"), n_label0=d.n_label0, n_label1=d.n_label1, n_blue=d.n_blue
        )
        return gen_cluster_data(spec)
    spec = CMSpec(
        seed=seeds.int_seed("data"),
        n_samples=d.n_samples,
        aae_fraction=d.aae_fraction,
        dim=d.dim,
        group_separation=d.group_separation,
        label_noise=d.label_noise,
        train_fraction=d.train_fraction,
    )
    return gen_cm_surrogate(spec)


def build_panel(config: RunConfig, group_names: List[str]) -> ExpertPanel:
    e = config.experts
    if e.kind == "cluster":
        return make_cluster_experts()
    if e.kind == "cm":
        return make_cm_experts(e.n_majority, e.n_minority)
    return ExpertPanel.from_records(e.records, group_names)


def build_prior(
    config: RunConfig,
    panel: ExpertPanel,
    parts: Partitions,
    seeds: SeedStreams,
) -> SimilarityPrior:
    """
    Build the dSim prior named in ``[dsim]``.

    The anchor kind scores experts on the first ``n_anchors`` prior-set
    samples, whose labels stand in for historical expert records.

    Raises:
        ShapeError: If the prior does not cover the panel's slots
    """
    s = config.dsim
    group_names = parts.stream.group_names
    if s.kind == "cluster":
        prior: SimilarityPrior = make_cluster_dsim(s.s, s.classifier_weight)
    elif s.kind == "cm":
        prior = make_cm_dsim(
            s.n_s,
            seeds.generator("dsim"),
            config.experts.n_majority,
            config.experts.n_minority,
            s.classifier_weight,
        )
    elif s.kind == "uniform":
        prior = uniform_dsim(len(panel), group_names)
    elif s.kind == "file":
        prior = load_dsim_table(s.path)
    else:
        anchors = parts.prior.subset(slice(0, s.n_anchors))
        votes = panel_votes(
            panel, anchors.groups, anchors.labels, panel.rng_streams(seeds.seed_sequence("dsim"))
        )
        correct = votes == anchors.labels[:, None]
        prior = anchor_dsim(
            [(anchors[i], correct[i]) for i in range(len(anchors))],
            classifier_weight=s.classifier_weight,
        )
    if prior.n_slots != panel.n_slots:
        raise ShapeError(f"dSim covers {prior.n_slots} slots, the panel has {panel.n_slots}")
    return prior


def build_pipeline(
    config: RunConfig,
    panel: ExpertPanel,
    parts: Partitions,
    seeds: SeedStreams,
) -> PipelineState:
    """Fresh classifier and deferrer for a run; inputs are scaled with prior-set statistics."""
    n_inputs = parts.stream.n_features
    t = config.training
    classifier = make_classifier(
        config.nn.classifier,
        n_inputs,
        seeds.generator("classifier-init"),
        hidden=config.nn.classifier_hidden,
        optimizer=t.optimizer,
        learning_rate=t.learning_rate,
        max_depth=config.nn.max_depth,
        scaling_data=parts.prior.features,
        random_state=seeds.int_seed("classifier-init"),
    )
    deferrer = Network(
        [n_inputs, *config.nn.deferrer_hidden, panel.n_slots],
        head="softmax",
        rng=seeds.generator("deferrer-init"),
    )
    deferrer.fit_input_scaling(parts.prior.features)
    return PipelineState(
        classifier=classifier,
        deferrer=deferrer,
        panel=panel,
        deferrer_optimizer=OptimizerState(t.optimizer, t.learning_rate),
        committee_size=min(t.committee_size, panel.n_slots),
        aggregation=t.aggregation,
    )


@dataclass
class ExperimentResult:
    """
    One run of one algorithm.

    Args:
        metrics: Test-set metrics
        seed: Global seed of the run
        training: Training outcome for the learning algorithms
        state: Final pipeline for the learning algorithms
        prior: The dSim prior in use
        mu: Prior weight mixed in at evaluation (Smooth-Matching)
        test: Held-out set
        mwu_weights: Final multiplicative weights for the MWU baseline
    """

    metrics: RunMetrics
    seed: int
    training: Optional[TrainingResult] = None
    state: Optional[PipelineState] = None
    prior: Optional[SimilarityPrior] = None
    mu: float = 0.0
    test: Optional[Dataset] = None
    mwu_weights: Optional[np.ndarray] = None

    @property
    def trace(self) -> pl.DataFrame:
        return self.metrics.trace if self.metrics.trace is not None else pl.DataFrame()


def _score_fixed_weights(
    weights: np.ndarray,
    panel: ExpertPanel,
    test: Dataset,
    mode: str,
    k: int,
    rng: np.random.Generator,
) -> RunMetrics:
    """Score a context-free expert weighting (classifier slot 0) on ``test``."""
    n = len(test)
    rows = np.zeros((n, panel.n_slots))
    rows[:, :-1] = weights
    expert_seed = np.random.SeedSequence(int(rng.integers(2**62)))
    votes = panel_votes(panel, test.groups, test.labels, panel.rng_streams(expert_seed))
    y_e = prediction_matrix(votes, np.zeros(n))
    costs = panel.cost_matrix(test.features, test.groups)
    if mode == "committee":
        decisions, slots = aggregate_committee_batch(rows, y_e, k, rng)
        rates = np.bincount(slots.ravel(), minlength=panel.n_slots) / slots.size
        cost = float(committee_cost(slots, costs).mean())
    else:
        decisions = aggregate_full(rows, y_e)
        rates = rows.mean(axis=0)
        cost = float(np.mean(np.sum(rows * costs, axis=1)))
    return decision_metrics(decisions, test, [*panel.ids, "classifier"], rates, cost)


def run_experiment(config: RunConfig, seed: Optional[int] = None) -> ExperimentResult:
    """
    Generate data, build the pipeline, run the configured algorithm and score it.

    Args:
        config: Validated run configuration
        seed: Global seed, defaults to ``config.seed``
    """
    seed = config.seed if seed is None else seed
    seeds = SeedStreams(seed)
    dataset = make_dataset(config, seeds)
    parts = partition(
        dataset,
        config.data.train_fraction,
        config.data.prior_size,
        seeds.generator("split"),
        prior_first=config.task == "cluster",
    )
    panel = build_panel(config, dataset.group_names)
    mode, k = config.evaluation_mode()
    k = min(k, panel.n_slots)
    repetitions = config.evaluation.repetitions
    logger.info(
        "%s on %s (seed %d): prior %d, stream %d, test %d",
        config.algorithm,
        config.task,
        seed,
        len(parts.prior),
        len(parts.stream),
        len(parts.test),
    )

    if config.algorithm == "random-committee":
        rng = seeds.generator("committee")
        runs = [
            random_committee_baseline(parts.test, panel, k, rng)
            for _ in range(repetitions)
        ]
        return ExperimentResult(average_metrics(runs), seed, test=parts.test)

    if config.algorithm == "mwu":
        mwu = mwu_baseline(
            parts.stream,
            panel,
            config.training.mwu_eta,
            panel.rng_streams(seeds.seed_sequence("experts")),
        )
        rng = seeds.generator("evaluation")
        runs = [
            _score_fixed_weights(mwu.weights[-1], panel, parts.test, mode, k, rng)
            for _ in range(repetitions)
        ]
        return ExperimentResult(
            average_metrics(runs), seed, test=parts.test, mwu_weights=mwu.weights[-1]
        )

    prior = build_prior(config, panel, parts, seeds)
    state = build_pipeline(config, panel, parts, seeds)
    train_config = config.train_config()
    recorder = TraceRecorder(
        parts.test, seeds.seed_sequence("evaluation"), mode, k, config.training.eval_every
    )
    if config.algorithm == "smooth":
        result = smooth_matching(
            parts.stream, state, prior, train_config, seeds, parts.test, recorder
        )
        mixed: Optional[SimilarityPrior] = prior
    else:
        result = strict_matching(
            parts.stream,
            state,
            prior,
            train_config,
            prior_set=parts.prior,
            seeds=seeds,
            test_set=parts.test,
            recorder=recorder,
        )
        mixed = None

    metrics = evaluate(
        state,
        parts.test,
        mode=mode,
        k=k,
        rng=seeds.generator("evaluation"),
        repetitions=repetitions,
        prior=mixed,
        mu=result.final_mu,
    )
    metrics.trace = result.trace
    return ExperimentResult(
        metrics, seed, result, state, prior, result.final_mu if mixed else 0.0, parts.test
    )


def deferral_map(
    state: PipelineState,
    dataset: Dataset,
    prior: Optional[SimilarityPrior] = None,
    mu: float = 0.0,
) -> pl.DataFrame:
    """
    Per-sample deferral weights relative to the sample's largest slot (max = 1).

    Columns: ``id, group, f1..fn`` then one ``w_<slot>`` column per slot.
    """
    weights = policy_weights(state, dataset.features, dataset.groups, prior, mu)
    relative = weights / weights.max(axis=1, keepdims=True)
    frame = dataset.to_frame().drop("label")
    slot_names = [*state.panel.ids, "classifier"]
    return frame.with_columns(
        [pl.Series(f"w_{name}", relative[:, j]) for j, name in enumerate(slot_names)]
    )


@dataclass
class SweepResult:
    """
    Sweep output.

    Args:
        runs: One row per (grid point, repetition)
        summary: Mean and standard deviation of every metric per grid point
        spearman: Spearman correlation of mean disparity against a single numeric grid key
    """

    runs: pl.DataFrame
    summary: pl.DataFrame
    spearman: Dict[str, float] = field(default_factory=dict)


def _grid_points(grid: Dict[str, List[Any]]) -> List[Dict[str, Any]]:
    if not grid:
        return [{}]
    keys = list(grid)
    if any(len(values) == 0 for values in grid.values()):
        raise ConfigError("sweep grid has a key without values")
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def _sweep_job(job: Tuple[int, int, Dict[str, Any]], config: RunConfig) -> Dict[str, Any]:
    point, rep, overrides = job
    seed = SeedStreams(config.seed).child(point, rep).seed
    result = run_experiment(config.with_overrides(overrides), seed)
    return {"point": point, "rep": rep, "seed": seed, **overrides, **result.metrics.flat()}


def run_sweep(config: RunConfig, workers: Optional[int] = None) -> SweepResult:
    """
    Run every grid point ``config.repetitions`` times with fresh seeds.

    Each (point, repetition) gets its own global seed, hence fresh data
    splits, expert noise and dSim draws. Errors from any run propagate.

    Args:
        config: Base configuration with ``[sweep] grid``
        workers: Thread count, defaults to ``[sweep] workers``
    """
    points = _grid_points(config.sweep.grid)
    for overrides in points:
        config.with_overrides(overrides)
    jobs = [
        (p, rep, overrides)
        for p, overrides in enumerate(points)
        for rep in range(config.repetitions)
    ]
    executor = ParallelExecutor(max_workers=workers or config.sweep.workers)
    rows = executor.execute_parallel(_sweep_job, jobs, config=config)
    runs = pl.DataFrame(rows)

    keys = list(config.sweep.grid)
    metric_cols = [c for c in runs.columns if c not in ("point", "rep", "seed", *keys)]
    summary = (
        runs.group_by(["point", *keys], maintain_order=True)
        .agg(
            [pl.col(c).mean().alias(f"{c}_mean") for c in metric_cols]
            + [pl.col(c).std(ddof=0).alias(f"{c}_std") for c in metric_cols]
            + [pl.len().alias("n_runs")]
        )
        .sort("point")
    )

    spearman: Dict[str, float] = {}
    if len(keys) == 1 and len(points) >= 3:
        values = summary[keys[0]]
        if values.dtype.is_numeric():
            rho, _ = spearmanr(values.to_numpy(), summary["disparity_mean"].to_numpy())
            spearman[keys[0]] = float(rho)
            logger.info("sweep: spearman(%s, disparity) = %.3f", keys[0], rho)
    return SweepResult(runs, summary, spearman)
