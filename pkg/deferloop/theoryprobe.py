"""
Numerical witnesses for the reward/penalty weight dynamics.

The deferrer here is a bare per-group weight vector over the experts (no
network). Correct slots gain delta_reward, incorrect ones lose
delta_penalty, weights are clipped at zero and projected back onto the
simplex.

Every probe returns a ``ProbeResult`` whose ``to_dict`` is the JSON payload
``{probe, params, measured, bound, stderr, pass}`` plus probe-specific extras.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import binom, linregress

from deferloop.core import SimplexVector, project_simplex
from deferloop.exceptions import ConfigError
from deferloop.experts import biased_panel

logger = logging.getLogger(__name__)

DEFAULT_DELTA_PENALTY = 0.01
MODES = ("single", "committee")

CorrectSet = Union[Sequence[int], np.ndarray]


def delta_reward(
    m: int,
    delta_penalty: float,
    mode: str = "single",
    k_prime: Optional[Union[float, np.ndarray]] = None,
) -> Union[float, np.ndarray]:
    """
    Reward paired with a penalty so one update keeps the total weight.

    ``single``: (m - 1) * delta_penalty.
    ``committee``: (m / k' - 1) * delta_penalty with k' correct members; 0 where k' = 0.
    """
    if mode == "single":
        return (m - 1) * delta_penalty
    if mode != "committee":
        raise ConfigError(f"unknown update mode '{mode}'")
    if k_prime is None:
        raise ConfigError("committee updates need k' (the number of correct members)")
    k_prime = np.asarray(k_prime, dtype=float)
    out = np.divide(m, k_prime, out=np.ones_like(k_prime), where=k_prime > 0) - 1.0
    out = out * delta_penalty
    return float(out) if out.ndim == 0 else out


def _correct_mask(correct_set: CorrectSet, m: int) -> np.ndarray:
    arr = np.asarray(correct_set)
    if arr.dtype == bool:
        if arr.shape[-1] != m:
            raise ConfigError(f"correct mask has {arr.shape[-1]} entries for {m} slots")
        return arr
    mask = np.zeros(m, dtype=bool)
    if arr.size:
        if arr.min() < 0 or arr.max() >= m:
            raise ConfigError(f"correct set {arr.tolist()} is not a subset of the {m} slots")
        mask[arr.astype(np.int64)] = True
    return mask


def abstract_update(
    w: SimplexVector,
    correct_set: CorrectSet,
    mode: str = "single",
    delta_penalty: float = DEFAULT_DELTA_PENALTY,
    k_prime: Optional[Union[float, np.ndarray]] = None,
) -> SimplexVector:
    """
    One reward/penalty step on a weight vector (or a batch of rows).

    Args:
        w: Weights of shape (m,) or (N, m)
        correct_set: Slot indices, or a boolean mask of the same shape as ``w``
        mode: ``single`` or ``committee``
        delta_penalty: Amount subtracted from incorrect slots
        k_prime: Correct-member count for committee mode; defaults to the mask size

    Returns:
        Updated weights, clipped at 0 and projected onto the simplex

    Raises:
        ConfigError: If delta_penalty is not positive or the correct set is out of range
    """
    if delta_penalty <= 0:
        raise ConfigError("delta_penalty must be positive")
    w = np.asarray(w, dtype=float)
    m = w.shape[-1]
    mask = _correct_mask(correct_set, m)
    if mode == "committee" and k_prime is None:
        k_prime = mask.sum(axis=-1)
    reward = np.asarray(delta_reward(m, delta_penalty, mode, k_prime), dtype=float)
    if reward.ndim == 1:
        reward = reward[:, None]
    stepped = w + np.where(mask, reward, -delta_penalty)
    return project_simplex(np.maximum(stepped, 0.0))


class AbstractDeferrer:
    """
    Per-group simplex weights over m experts, trained by ``abstract_update``.

    Args:
        n_groups: Number of protected groups
        m: Number of experts
        delta_penalty: Penalty per incorrect slot
        mode: ``single`` or ``committee``
        weights: Optional (n_groups, m) starting weights (uniform otherwise)
    """

    def __init__(
        self,
        n_groups: int,
        m: int,
        delta_penalty: float = DEFAULT_DELTA_PENALTY,
        mode: str = "single",
        weights: Optional[np.ndarray] = None,
    ):
        if m < 1 or n_groups < 1:
            raise ConfigError("an abstract deferrer needs at least one group and one expert")
        if delta_penalty <= 0:
            raise ConfigError("delta_penalty must be positive")
        if mode not in MODES:
            raise ConfigError(f"unknown update mode '{mode}'")
        self.m = m
        self.delta_penalty = delta_penalty
        self.mode = mode
        if weights is None:
            self.weights = np.full((n_groups, m), 1.0 / m)
        else:
            self.weights = project_simplex(np.asarray(weights, dtype=float).reshape(n_groups, m))

    def policy(self, group: int) -> SimplexVector:
        return self.weights[group].copy()

    def delta_reward(self, k_prime: Optional[int] = None) -> float:
        return float(delta_reward(self.m, self.delta_penalty, self.mode, k_prime))

    def update(self, group: int, correct_set: CorrectSet, k_prime: Optional[int] = None) -> None:
        self.weights[group] = abstract_update(
            self.weights[group], correct_set, self.mode, self.delta_penalty, k_prime
        )

    def accuracy(self, accuracy_matrix: np.ndarray) -> np.ndarray:
        """Exact per-group accuracy of single-expert deferral given (experts, groups) accuracies."""
        return np.einsum("gm,mg->g", self.weights, accuracy_matrix)


@dataclass
class ProbeResult:
    """
    Outcome of one probe.

    Args:
        probe: Probe name
        params: Inputs the probe ran with
        measured: The measured quantity
        bound: The bound or reference it is checked against
        stderr: Monte-Carlo standard error of ``measured``
        passed: Whether the check holds
        extra: Probe-specific details
    """

    probe: str
    params: Dict[str, Any]
    measured: Any
    bound: Any
    stderr: float
    passed: bool
    extra: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        out = {
            "probe": self.probe,
            "params": dict(self.params),
            "measured": _jsonable(self.measured),
            "bound": _jsonable(self.bound),
            "stderr": float(self.stderr),
            "pass": bool(self.passed),
        }
        out.update({key: _jsonable(value) for key, value in self.extra.items()})
        return out


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, dict):
        return {key: _jsonable(v) for key, v in value.items()}
    if isinstance(value, (tuple, list)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.floating, np.integer, np.bool_)):
        return value.item()
    return value


def _sample_slots(weights: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-cdf draw of one slot per row of ``weights`` from uniforms ``u``."""
    cdf = np.cumsum(weights, axis=1)
    cdf[:, -1] = np.inf
    return np.sum(u[:, None] >= cdf, axis=1)


def simulate_claim1(
    alpha: float,
    m: int,
    steps: int,
    trials: int,
    rng: np.random.Generator,
    delta_penalty: float = DEFAULT_DELTA_PENALTY,
) -> np.ndarray:
    """
    Mean disparity of single-expert deferral over a biased panel, per step.

    A fraction alpha of the m experts flip coins on group 0 and are perfect
    on group 1, the rest the other way round. Every trial starts from uniform
    per-group weights. Each step draws a group, defers to one expert sampled
    from that group's weights, and takes that expert's vote as the decision:
    the consulted expert is rewarded and the others are penalized. The
    disparity recorded is the exact acc(group 1) - acc(group 0) of the
    induced policy, averaged over trials.

    Returns:
        (steps + 1,) mean signed disparity, entry 0 before any update
    """
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    if steps < 0 or trials < 1:
        raise ConfigError("claim1 needs steps >= 0 and trials >= 1")
    accuracy = biased_panel(m, alpha).accuracy_matrix(2)
    weights = np.full((trials, 2, m), 1.0 / m)
    rows = np.arange(trials)

    def disparity() -> float:
        acc = np.einsum("tgm,mg->tg", weights, accuracy)
        return float(np.mean(acc[:, 1] - acc[:, 0]))

    trajectory = np.empty(steps + 1)
    trajectory[0] = disparity()
    for step in range(1, steps + 1):
        groups = rng.integers(2, size=trials)
        current = weights[rows, groups]
        chosen = _sample_slots(current, rng.random(trials))
        mask = np.zeros((trials, m), dtype=bool)
        mask[rows, chosen] = True
        weights[rows, groups] = abstract_update(current, mask, "single", delta_penalty)
        trajectory[step] = disparity()
    return trajectory


def claim1_probe(
    alpha: float = 0.75,
    m: int = 8,
    steps: int = 500,
    trials: int = 10000,
    rng: Optional[np.random.Generator] = None,
    delta_penalty: float = DEFAULT_DELTA_PENALTY,
    start_tolerance: float = 0.01,
    slope_tolerance: float = 1e-4,
) -> ProbeResult:
    """Check that the starting disparity is alpha - 0.5 and the trajectory has no trend."""
    rng = rng if rng is not None else np.random.default_rng()
    trajectory = simulate_claim1(alpha, m, steps, trials, rng, delta_penalty)
    alpha_used = int(np.floor(alpha * m + 0.5)) / m
    expected = alpha_used - 0.5
    slope = float(linregress(np.arange(steps + 1), trajectory).slope) if steps > 1 else 0.0
    start_ok = abs(trajectory[0] - expected) <= start_tolerance
    flat = abs(slope) < slope_tolerance
    logger.info("claim1: start %.4f, slope %.2e", trajectory[0], slope)
    return ProbeResult(
        probe="claim1",
        params={"alpha": alpha, "m": m, "steps": steps, "trials": trials,
                "delta_penalty": delta_penalty},
        measured={"start": float(trajectory[0]), "end": float(trajectory[-1]), "slope": slope},
        bound={"start": expected, "slope": slope_tolerance},
        stderr=float(np.std(trajectory) / np.sqrt(len(trajectory))),
        passed=bool(start_ok and flat),
        extra={"trajectory": trajectory},
    )


def disparity_bounds(gamma: float, alpha: float) -> Tuple[float, float]:
    """(gamma / 2, alpha / (1 - alpha) * gamma / 2)."""
    if not 0.0 <= gamma <= 1.0:
        raise ConfigError(f"gamma must lie in [0, 1], got {gamma}")
    if not 0.5 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0.5, 1), got {alpha}")
    return gamma / 2.0, alpha / (1.0 - alpha) * gamma / 2.0


def dsim_start_disparity(gamma: float, alpha: float) -> float:
    """
    Exact starting disparity acc(group 1) - acc(group 0) of the dSim policy.

    The dSim prior scores experts that are reliable on a group 1 and the
    coin-flipping ones gamma. On group 0 the coin-flippers are the alpha
    fraction, on group 1 the remaining 1 - alpha.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ConfigError(f"gamma must lie in [0, 1], got {gamma}")
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    error_0 = 0.5 * alpha * gamma / ((1.0 - alpha) + alpha * gamma)
    error_1 = 0.5 * (1.0 - alpha) * gamma / ((1.0 - alpha) * gamma + alpha)
    return error_0 - error_1


def remark2_check(
    gamma: float,
    alpha: float,
    m: int = 20,
    trials: int = 100000,
    rng: Optional[np.random.Generator] = None,
) -> ProbeResult:
    """
    Monte-Carlo starting disparity of the dSim-induced single-expert policy.

    The lower and upper bounds are checked separately. The lower bound
    gamma / 2 does not hold in general (gamma = 1 gives alpha - 0.5), so
    ``pass`` requires the upper bound and agreement with the exact value;
    ``lower_ok`` is reported alongside.
    """
    rng = rng if rng is not None else np.random.default_rng()
    if trials < 2:
        raise ConfigError("remark2 needs at least two trials")
    panel = biased_panel(m, alpha)
    accuracy = panel.accuracy_matrix(2)
    coin_flipper = accuracy < 1.0
    prior = np.where(coin_flipper, gamma, 1.0).T
    prior = prior / prior.sum(axis=1, keepdims=True)

    groups = rng.integers(2, size=trials)
    chosen = _sample_slots(prior[groups], rng.random(trials))
    correct = (rng.random(trials) < accuracy[chosen, groups]).astype(float)
    parts = [correct[groups == g] for g in (0, 1)]
    if min(len(p) for p in parts) < 2:
        raise ConfigError("remark2 drew too few samples of one group")
    measured = float(parts[1].mean() - parts[0].mean())
    stderr = float(np.sqrt(sum(p.var(ddof=1) / len(p) for p in parts)))

    alpha_used = float(coin_flipper[:, 0].mean())
    exact = dsim_start_disparity(gamma, alpha_used)
    lo, hi = disparity_bounds(gamma, alpha_used) if alpha_used > 0.5 else (gamma / 2.0, np.inf)
    lower_ok = measured >= lo - 3 * stderr
    upper_ok = measured <= hi + 3 * stderr
    agrees = abs(measured - exact) <= 3 * stderr
    return ProbeResult(
        probe="remark2",
        params={"gamma": gamma, "alpha": alpha, "m": m, "trials": trials},
        measured=measured,
        bound=[lo, hi],
        stderr=stderr,
        passed=bool(upper_ok and agrees),
        extra={"exact": exact, "lower_ok": bool(lower_ok), "upper_ok": bool(upper_ok)},
    )


def theorem1_weights(beta: float, m: int) -> np.ndarray:
    """Starting weights [(1 + beta) / 2, (1 - beta) / 2, 0, ...]: best expert first, gap beta."""
    if m < 2:
        raise ConfigError("theorem1 needs at least two experts")
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"beta must lie in [0, 1], got {beta}")
    w = np.zeros(m)
    w[0] = (1.0 + beta) / 2.0
    w[1] = (1.0 - beta) / 2.0
    return w


def theorem1_check(
    beta: float,
    delta: float,
    m: int,
    trials: int = 100000,
    rng: Optional[np.random.Generator] = None,
    weights: Optional[np.ndarray] = None,
) -> ProbeResult:
    """
    Expected one-step weight change of the best expert under single-expert deferral.

    The best expert (slot 0) gains delta when it is consulted and loses
    delta / (m - 1) otherwise; the raw increment is measured before clipping
    and projection. Checked against 2 * beta * delta - 3 * stderr. The exact
    expectation delta * (m w_0 - 1) / (m - 1) is reported next to it.
    """
    rng = rng if rng is not None else np.random.default_rng()
    if delta <= 0:
        raise ConfigError("delta must be positive")
    if trials < 2:
        raise ConfigError("theorem1 needs at least two trials")
    w = theorem1_weights(beta, m) if weights is None else project_simplex(weights)
    m = len(w)
    chosen = _sample_slots(np.broadcast_to(w, (trials, m)).copy(), rng.random(trials))
    increments = np.where(chosen == 0, delta, -delta / (m - 1))
    measured = float(increments.mean())
    stderr = float(increments.std(ddof=1) / np.sqrt(trials))
    bound = 2.0 * beta * delta
    exact = delta * (m * w[0] - 1.0) / (m - 1)
    return ProbeResult(
        probe="theorem1",
        params={"beta": beta, "delta": delta, "m": m, "trials": trials},
        measured=measured,
        bound=bound,
        stderr=stderr,
        passed=bool(measured >= bound - 3 * stderr),
        extra={"exact": exact, "weights": w},
    )


def theorem2_threshold(k: int, m: int) -> float:
    """1 - (1 - k / 2m) ** (1 / k)."""
    if not 1 <= k <= m:
        raise ConfigError(f"need 1 <= k <= m, got k={k}, m={m}")
    return float(-np.expm1(np.log1p(-k / (2.0 * m)) / k))


def theorem2_expected_change(
    epsilon: float,
    k: int,
    m: int,
    delta_penalty: float = DEFAULT_DELTA_PENALTY,
    k_prime: str = "expected",
    others_correct: float = 0.5,
) -> float:
    """
    Exact expected one-step change of the hidden perfect expert's weight.

    ``expected``: k' fixed at k / 2, giving
    (1 - (1 - eps)^k) * delta_r - (1 - eps)^k * delta_p.
    ``sampled``: k' is the hidden expert's draws plus the other members that
    happen to be correct (each with probability ``others_correct``).
    """
    miss = (1.0 - epsilon) ** k
    if k_prime == "expected":
        reward = delta_reward(m, delta_penalty, "committee", k / 2.0)
        return float((1.0 - miss) * reward - miss * delta_penalty)
    if k_prime != "sampled":
        raise ConfigError(f"unknown k' mode '{k_prime}'")
    total = -miss * delta_penalty
    for hits in range(1, k + 1):
        others = np.arange(k - hits + 1)
        p_others = binom.pmf(others, k - hits, others_correct)
        rewards = delta_reward(m, delta_penalty, "committee", hits + others)
        total += binom.pmf(hits, k, epsilon) * float(np.sum(p_others * rewards))
    return float(total)


def theorem2_check(
    epsilon: float,
    k: int,
    m: int,
    trials: int = 200000,
    rng: Optional[np.random.Generator] = None,
    k_prime: str = "expected",
    delta_penalty: float = DEFAULT_DELTA_PENALTY,
    others_correct: float = 0.5,
) -> ProbeResult:
    """
    Monte-Carlo expected weight change of a hidden perfect expert with weight epsilon.

    Committees of k are drawn with replacement. If the hidden expert sits in
    the committee it gains delta_r = (m / k' - 1) * delta_p, otherwise it
    loses delta_p. ``pass`` holds when the measured sign matches the exact
    expectation, or the exact value is within 3 * stderr of zero.
    """
    rng = rng if rng is not None else np.random.default_rng()
    if not 0.0 <= epsilon <= 1.0:
        raise ConfigError(f"epsilon must lie in [0, 1], got {epsilon}")
    if trials < 2:
        raise ConfigError("theorem2 needs at least two trials")
    threshold = theorem2_threshold(k, m)
    hits = rng.binomial(k, epsilon, size=trials)
    if k_prime == "expected":
        correct = np.full(trials, k / 2.0)
    elif k_prime == "sampled":
        correct = hits + rng.binomial(k - hits, others_correct)
    else:
        raise ConfigError(f"unknown k' mode '{k_prime}'")
    reward = np.asarray(delta_reward(m, delta_penalty, "committee", correct), dtype=float)
    increments = np.where(hits > 0, reward, -delta_penalty)
    measured = float(increments.mean())
    stderr = float(increments.std(ddof=1) / np.sqrt(trials))
    exact = theorem2_expected_change(epsilon, k, m, delta_penalty, k_prime, others_correct)
    agrees = np.sign(measured) == np.sign(exact) or abs(exact) < 3 * stderr
    return ProbeResult(
        probe="theorem2",
        params={"epsilon": epsilon, "k": k, "m": m, "trials": trials, "k_prime": k_prime},
        measured=measured,
        bound=threshold,
        stderr=stderr,
        passed=bool(agrees),
        extra={"exact": exact, "above_threshold": bool(epsilon > threshold)},
    )


def _remark2_probe(
    gamma: float = 0.4,
    alpha: float = 0.75,
    m: int = 20,
    trials: int = 100000,
    rng: Optional[np.random.Generator] = None,
) -> ProbeResult:
    return remark2_check(gamma, alpha, m, trials, rng)


def _theorem1_probe(
    beta: float = 0.2,
    delta: float = 0.05,
    m: int = 3,
    trials: int = 100000,
    rng: Optional[np.random.Generator] = None,
) -> ProbeResult:
    return theorem1_check(beta, delta, m, trials, rng)


def _theorem2_probe(
    k: int = 5,
    m: int = 41,
    epsilon: Optional[float] = None,
    trials: int = 200000,
    k_prime: str = "expected",
    rng: Optional[np.random.Generator] = None,
) -> ProbeResult:
    if epsilon is None:
        epsilon = 2.0 * theorem2_threshold(k, m)
    return theorem2_check(epsilon, k, m, trials, rng, k_prime)


PROBES: Dict[str, Callable[..., ProbeResult]] = {
    "claim1": claim1_probe,
    "remark2": _remark2_probe,
    "theorem1": _theorem1_probe,
    "theorem2": _theorem2_probe,
}

PROBE_PARAMS: Dict[str, Dict[str, type]] = {
    "claim1": {"alpha": float, "m": int, "steps": int, "trials": int, "delta_penalty": float},
    "remark2": {"gamma": float, "alpha": float, "m": int, "trials": int},
    "theorem1": {"beta": float, "delta": float, "m": int, "trials": int},
    "theorem2": {"k": int, "m": int, "epsilon": float, "trials": int, "k_prime": str},
}


def parse_probe_params(name: str, raw: Mapping[str, Any]) -> Dict[str, Any]:
    """
    Convert ``key=value`` strings (or already typed values) for a probe.

    Raises:
        ConfigError: If the probe or a parameter is unknown, or a value does not parse
    """
    if name not in PROBE_PARAMS:
        raise ConfigError(f"unknown probe '{name}'; choose from {sorted(PROBE_PARAMS)}")
    types = PROBE_PARAMS[name]
    params = {}
    for key, value in raw.items():
        if key not in types:
            raise ConfigError(f"probe {name} has no parameter '{key}'")
        try:
            params[key] = types[key](value)
        except (TypeError, ValueError):
            raise ConfigError(f"probe {name}: bad value '{value}' for {key}") from None
    return params


def run_probe(name: str, params: Mapping[str, Any], rng: np.random.Generator) -> ProbeResult:
    """Run a named probe with parsed parameters."""
    parsed = parse_probe_params(name, params)
    result = PROBES[name](rng=rng, **parsed)
    logger.info("probe %s: pass=%s", name, result.passed)
    return result
