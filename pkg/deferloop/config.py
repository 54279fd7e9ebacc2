"""
Run configuration: pydantic models, TOML loading and task defaults.
"""

import copy
import re
import sys
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from deferloop.exceptions import ConfigError, ParseError
from deferloop.training import LambdaSchedule, PriorFitSettings, TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

TASKS = ("cluster", "cm-surrogate")
ALGORITHMS = ("strict", "smooth", "random-committee", "mwu", "oracle")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataSection(_Section):
    """Dataset generation / loading. Cluster and content-moderation fields live side by side."""

    n_label0: int = Field(500, ge=1)
    n_label1: int = Field(500, ge=1)
    n_blue: int = Field(1000, ge=1)
    n_samples: int = Field(25000, ge=2)
    aae_fraction: float = Field(0.64, gt=0.0, lt=1.0)
    dim: int = Field(25, ge=1)
    group_separation: float = Field(4.0, ge=0.0)
    label_noise: float = Field(0.51, ge=0.0)
    train_fraction: float = Field(0.8, gt=0.0, lt=1.0)
    prior_size: int = Field(500, ge=1)
    path: Optional[str] = None


class ExpertsSection(_Section):
    """Which panel to build; ``custom`` reads ``records``."""

    kind: Literal["cluster", "cm", "custom"] = "cluster"
    n_majority: int = Field(30, ge=0)
    n_minority: int = Field(10, ge=0)
    records: List[Dict[str, Any]] = Field(default_factory=list)


class DSimSection(_Section):
    kind: Literal["cluster", "cm", "uniform", "anchor", "file"] = "cluster"
    s: float = Field(0.4, ge=0.0, le=0.5)
    n_s: int = Field(2, ge=0)
    classifier_weight: float = Field(0.1, ge=0.0, le=1.0)
    n_anchors: int = Field(200, ge=1)
    path: Optional[str] = None


class NNSection(_Section):
    classifier: Literal["tree", "network"] = "tree"
    classifier_hidden: List[int] = Field(default_factory=lambda: [64, 32, 16])
    deferrer_hidden: List[int] = Field(default_factory=lambda: [16, 8])
    max_depth: int = Field(4, ge=1)


class TrainingSection(_Section):
    alpha: float = Field(1.0, ge=0.0)
    learning_rate: float = Field(0.0075, gt=0.0)
    optimizer: Literal["sgd", "adam"] = "sgd"
    lambda_kind: Literal["constant", "linear"] = "constant"
    lambda_value: float = Field(0.0, ge=0.0)
    batch_size: int = Field(10, ge=1)
    committee_size: int = Field(1, ge=1)
    aggregation: Literal["full", "committee"] = "full"
    smooth_horizon: int = Field(500, ge=0)
    prior_optimizer: Literal["sgd", "adam"] = "sgd"
    prior_learning_rate: float = Field(0.001, gt=0.0)
    prior_steps: int = Field(500, ge=0)
    prior_batch_size: Optional[int] = Field(None, ge=1)
    eval_every: int = Field(1, ge=0)
    max_iterations: Optional[int] = Field(None, ge=0)
    mwu_eta: float = Field(0.1, ge=0.0, le=0.5)


class EvaluationSection(_Section):
    mode: Optional[Literal["full", "committee"]] = None
    k: Optional[int] = Field(None, ge=1)
    repetitions: int = Field(1, ge=1)


class SweepSection(_Section):
    """``grid`` maps dotted config keys (``dsim.n_s``) to the values to try."""

    grid: Dict[str, List[Any]] = Field(default_factory=dict)
    workers: int = Field(1, ge=1)


class TheoryProbeSection(_Section):
    probe: Optional[Literal["claim1", "remark2", "theorem1", "theorem2"]] = None
    params: Dict[str, Any] = Field(default_factory=dict)


class RunConfig(_Section):
    """
    A complete, validated run configuration.

    Build it with ``load_config`` / ``config_from_dict`` so that task
    defaults are filled in underneath the user's values.
    """

    task: Literal["cluster", "cm-surrogate"]
    algorithm: Literal["strict", "smooth", "random-committee", "mwu", "oracle"] = "strict"
    seed: int = Field(0, ge=0)
    repetitions: int = Field(1, ge=1)
    out_dir: str = "results"
    data: DataSection = Field(default_factory=DataSection)
    experts: ExpertsSection = Field(default_factory=ExpertsSection)
    dsim: DSimSection = Field(default_factory=DSimSection)
    nn: NNSection = Field(default_factory=NNSection)
    training: TrainingSection = Field(default_factory=TrainingSection)
    evaluation: EvaluationSection = Field(default_factory=EvaluationSection)
    sweep: SweepSection = Field(default_factory=SweepSection)
    theoryprobe: TheoryProbeSection = Field(default_factory=TheoryProbeSection)

    @model_validator(mode="after")
    def _check_panel(self) -> "RunConfig":
        if self.experts.kind == "custom" and not self.experts.records:
            raise ValueError("experts.kind = 'custom' needs at least one record")
        if self.experts.kind == "cm" and self.experts.n_majority + self.experts.n_minority < 1:
            raise ValueError("the expert panel needs at least one expert")
        if self.dsim.kind == "file" and not self.dsim.path:
            raise ValueError("dsim.kind = 'file' needs dsim.path")
        return self

    def train_config(self) -> TrainConfig:
        t = self.training
        return TrainConfig(
            alpha=t.alpha,
            learning_rate=t.learning_rate,
            optimizer=t.optimizer,
            lambda_schedule=LambdaSchedule(t.lambda_kind, t.lambda_value),
            batch_size=t.batch_size,
            committee_size=t.committee_size,
            aggregation=t.aggregation,
            smooth_horizon=t.smooth_horizon,
            prior=PriorFitSettings(
                t.prior_optimizer, t.prior_learning_rate, t.prior_steps, t.prior_batch_size
            ),
            oracle=self.algorithm == "oracle",
            eval_every=t.eval_every,
            max_iterations=t.max_iterations,
            seed=self.seed,
        )

    def evaluation_mode(self) -> Tuple[str, int]:
        """(mode, k) used for test-set scoring; defaults follow the training aggregation."""
        mode = self.evaluation.mode or self.training.aggregation
        k = self.evaluation.k or self.training.committee_size
        return mode, k

    def with_overrides(self, overrides: Dict[str, Any]) -> "RunConfig":
        """Copy with dotted-key overrides applied (``{"dsim.n_s": 4}``)."""
        raw = self.model_dump()
        for key, value in overrides.items():
            _set_dotted(raw, key, value)
        return _validate(raw)


def task_defaults(task: str) -> Dict[str, Any]:
    """
    Hyperparameters for a task, as a nested dict.

    ``cluster``: two experts, s = 0.4 table, CART classifier, 16-8 deferrer,
    plain gradient at 0.0075 with B = 10, full-vote aggregation, prior fit by
    SGD at 0.001 for 500 steps on the first 500 samples.

    ``cm-surrogate``: 30 + 10 experts, n_s = 2, 64-32-16 networks, lambda =
    t / 100, B = 100, k = 5 committees, T_d = 10000, prior fit with Adam at
    1e-4 on 1000 samples for 1000 passes (10000 minibatch steps of 100).
    """
    if task == "cluster":
        return {
            "task": "cluster",
            "data": {"train_fraction": 0.8, "prior_size": 500},
            "experts": {"kind": "cluster"},
            "dsim": {"kind": "cluster", "s": 0.4},
            "nn": {"classifier": "tree", "deferrer_hidden": [16, 8], "max_depth": 4},
            "training": {
                "learning_rate": 0.0075,
                "batch_size": 10,
                "aggregation": "full",
                "committee_size": 1,
                "smooth_horizon": 500,
                "prior_optimizer": "sgd",
                "prior_learning_rate": 0.001,
                "prior_steps": 500,
            },
        }
    if task == "cm-surrogate":
        return {
            "task": "cm-surrogate",
            "data": {"train_fraction": 0.8, "prior_size": 1000},
            "experts": {"kind": "cm"},
            "dsim": {"kind": "cm", "n_s": 2},
            "nn": {
                "classifier": "network",
                "classifier_hidden": [64, 32, 16],
                "deferrer_hidden": [64, 32, 16],
            },
            "training": {
                "learning_rate": 0.01,
                "lambda_kind": "linear",
                "lambda_value": 0.01,
                "batch_size": 100,
                "aggregation": "committee",
                "committee_size": 5,
                "smooth_horizon": 10000,
                "prior_optimizer": "adam",
                "prior_learning_rate": 1e-4,
                "prior_steps": 10000,
                "prior_batch_size": 100,
                "eval_every": 10,
            },
        }
    raise ConfigError(f"unknown task '{task}'; choose from {list(TASKS)}")


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _set_dotted(raw: Dict[str, Any], key: str, value: Any) -> None:
    parts = key.split(".")
    node = raw
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            raise ConfigError(f"unknown config section in '{key}'")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key '{key}'")
    node[parts[-1]] = value


def _validate(raw: Dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or 'config'}: {err['msg']}" for err in e.errors()
        )
        raise ConfigError(f"invalid config: {problems}") from None


def config_from_dict(raw: Dict[str, Any]) -> RunConfig:
    """
    Validate a raw config dict with task defaults merged underneath.

    Raises:
        ConfigError: If ``task`` is missing or unknown, or a value is invalid
    """
    task = raw.get("task")
    if task is None:
        raise ConfigError("config is missing the 'task' field")
    return _validate(_merge(task_defaults(str(task)), raw))


def _toml_line(error: Exception) -> Optional[int]:
    """Line number of a TOML error; older parsers only put it in the message."""
    lineno = getattr(error, "lineno", None)
    if lineno is not None:
        return int(lineno)
    match = re.search(r"line (\d+)", str(error))
    return int(match.group(1)) if match else None


def load_config(path: Union[str, Path]) -> RunConfig:
    """
    Load a TOML run config.

    Raises:
        OSError: If the file cannot be read
        ParseError: If the TOML is malformed
        ConfigError: If validation fails
    """
    with open(path, "rb") as f:
        text = f.read()
    try:
        raw = tomllib.loads(text.decode("utf-8"))
    except tomllib.TOMLDecodeError as e:
        raise ParseError(f"{path}: {e}", line=_toml_line(e)) from None
    except UnicodeDecodeError as e:
        raise ParseError(f"{path}: not UTF-8 text ({e})") from None
    return config_from_dict(raw)
