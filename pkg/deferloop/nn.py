"""
Dense feed-forward networks with hand-written backpropagation.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
from scipy.special import expit, softmax

from deferloop.exceptions import ConfigError, NumericError, ParseError, ShapeError

logger = logging.getLogger(__name__)

HEADS = ("sigmoid", "softmax", "linear")
OPTIMIZERS = ("sgd", "adam")


@dataclass
class Gradients:
    """Per-layer parameter gradients, aligned with ``Network.weights``/``Network.biases``."""

    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def arrays(self) -> List[np.ndarray]:
        return [*self.weights, *self.biases]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


class Network:
    """
    Multi-layer perceptron with ReLU hidden layers.

    The classifier uses a single-unit sigmoid head, the deferrer an m-way
    softmax head. Inputs are standardized with a fixed shift/scale that is not
    trained (identity until ``fit_input_scaling`` is called).

    Args:
        layer_sizes: Units per layer, input first, output last
        head: Output head, one of ``sigmoid``, ``softmax`` or ``linear``
        rng: Generator for the uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization
    """

    def __init__(
        self,
        layer_sizes: Sequence[int],
        head: str = "softmax",
        rng: Optional[np.random.Generator] = None,
    ):
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ConfigError(f"invalid layer sizes {list(layer_sizes)}")
        if head not in HEADS:
            raise ConfigError(f"unknown output head '{head}', expected one of {HEADS}")
        if head == "sigmoid" and sizes[-1] != 1:
            raise ConfigError("sigmoid head needs exactly one output unit")

        rng = rng if rng is not None else np.random.default_rng()
        self.layer_sizes = sizes
        self.head = head
        self.weights: List[np.ndarray] = []
        self.biases: List[np.ndarray] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(rng.uniform(-bound, bound, size=fan_out))
        self.input_shift = np.zeros(sizes[0])
        self.input_scale = np.ones(sizes[0])

    @classmethod
    def zeros(cls, layer_sizes: Sequence[int], head: str = "softmax") -> "Network":
        """Network with every parameter set to zero."""
        net = cls(layer_sizes, head=head, rng=np.random.default_rng(0))
        net.weights = [np.zeros_like(w) for w in net.weights]
        net.biases = [np.zeros_like(b) for b in net.biases]
        return net

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_parameters(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "Network":
        clone = Network.zeros(self.layer_sizes, head=self.head)
        clone.weights = [w.copy() for w in self.weights]
        clone.biases = [b.copy() for b in self.biases]
        clone.input_shift = self.input_shift.copy()
        clone.input_scale = self.input_scale.copy()
        return clone

    def fit_input_scaling(self, x: np.ndarray) -> None:
        """Standardize future inputs with the column mean and std of ``x``."""
        x = self._as_batch(x)
        self.input_shift = x.mean(axis=0)
        std = x.std(axis=0)
        self.input_scale = np.where(std > 0, std, 1.0)

    def get_flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in [*self.weights, *self.biases]])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.size != self.n_parameters:
            raise ShapeError(f"expected {self.n_parameters} parameters, got {flat.size}")
        offset = 0
        for arrays in (self.weights, self.biases):
            for i, a in enumerate(arrays):
                arrays[i] = flat[offset:offset + a.size].reshape(a.shape).copy()
                offset += a.size

    def _as_batch(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        batch = x[None, :] if x.ndim == 1 else x
        if batch.ndim != 2 or batch.shape[1] != self.n_inputs:
            raise ShapeError(f"expected input dimension {self.n_inputs}, got shape {x.shape}")
        return batch

    def _forward(self, batch: np.ndarray):
        a = (batch - self.input_shift) / self.input_scale
        inputs = [a]
        pre = []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w + b
            pre.append(z)
            if i < last:
                a = np.maximum(z, 0.0)
                inputs.append(a)
        logits = pre[-1]
        if self.head == "sigmoid":
            out = expit(logits)
        elif self.head == "softmax":
            out = softmax(logits, axis=1)
        else:
            out = logits
        return inputs, pre, out

    def forward(self, x: np.ndarray) -> Union[float, np.ndarray]:
        """
        Evaluate the network.

        Args:
            x: One input of shape (n,) or a batch of shape (N, n)

        Returns:
            Sigmoid head: a probability (float) or an (N,) array.
            Softmax/linear head: an (m,) vector or an (N, m) matrix.

        Raises:
            ShapeError: If the input dimension does not match the first layer
        """
        single = np.ndim(x) == 1
        _, _, out = self._forward(self._as_batch(x))
        if self.head == "sigmoid":
            return float(out[0, 0]) if single else out[:, 0]
        return out[0] if single else out

    def backward(
        self,
        x: np.ndarray,
        upstream_grad: np.ndarray,
        wrt_logits: bool = False,
    ) -> Gradients:
        """
        Backpropagate a loss gradient to every parameter.

        The forward pass is recomputed for ``x`` so the result never depends on
        stale cached activations. For a batch the gradients are summed over rows.

        Args:
            x: Input(s) the upstream gradient refers to
            upstream_grad: dLoss/dOutput, same shape as ``forward(x)``
            wrt_logits: Treat ``upstream_grad`` as dLoss/dLogits (skips the head Jacobian)

        Returns:
            Gradients for weights and biases
        """
        batch = self._as_batch(x)
        inputs, pre, out = self._forward(batch)
        grad = np.asarray(upstream_grad, dtype=float).reshape(out.shape)

        if not wrt_logits:
            if self.head == "sigmoid":
                grad = grad * out * (1.0 - out)
            elif self.head == "softmax":
                grad = out * (grad - np.sum(grad * out, axis=1, keepdims=True))

        n_layers = len(self.weights)
        d_weights: List[np.ndarray] = [np.empty(0)] * n_layers
        d_biases: List[np.ndarray] = [np.empty(0)] * n_layers
        delta = grad
        for i in reversed(range(n_layers)):
            d_weights[i] = inputs[i].T @ delta
            d_biases[i] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.weights[i].T) * (pre[i - 1] > 0)
        return Gradients(d_weights, d_biases)


@dataclass
class OptimizerState:
    """
    Gradient-step state for one network.

    Args:
        kind: ``sgd`` (plain gradient) or ``adam`` (adaptive moments)
        learning_rate: Step size, must be nonnegative
        beta1: First-moment decay
        beta2: Second-moment decay
        eps: Denominator floor
    """

    kind: str = "sgd"
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer '{self.kind}', expected one of {OPTIMIZERS}")
        if self.learning_rate < 0:
            raise ConfigError("learning rate must be nonnegative")


def step(net: Network, grads: Gradients, opt: OptimizerState) -> Network:
    """
    Apply one optimizer step to ``net`` in place.

    Args:
        net: Network to update
        grads: Gradients from ``Network.backward``
        opt: Optimizer state, updated in place

    Returns:
        The same network, for chaining

    Raises:
        ShapeError: If gradient shapes do not match the parameters
        NumericError: If a gradient or updated parameter is non-finite
    """
    params = [*net.weights, *net.biases]
    grad_arrays = grads.arrays()
    if len(params) != len(grad_arrays) or any(
        p.shape != g.shape for p, g in zip(params, grad_arrays)
    ):
        raise ShapeError("gradient shapes do not match network parameters")
    if not grads.is_finite():
        raise NumericError(
            f"non-finite gradient at optimizer step {opt.t + 1} "
            f"(layer sizes {net.layer_sizes})"
        )

    if opt.kind == "sgd":
        opt.t += 1
        updated = [p - opt.learning_rate * g for p, g in zip(params, grad_arrays)]
    else:
        if not opt.m:
            opt.m = [np.zeros_like(p) for p in params]
            opt.v = [np.zeros_like(p) for p in params]
        opt.t += 1
        correction1 = 1.0 - opt.beta1 ** opt.t
        correction2 = 1.0 - opt.beta2 ** opt.t
        updated = []
        for i, (p, g) in enumerate(zip(params, grad_arrays)):
            opt.m[i] = opt.beta1 * opt.m[i] + (1.0 - opt.beta1) * g
            opt.v[i] = opt.beta2 * opt.v[i] + (1.0 - opt.beta2) * g * g
            m_hat = opt.m[i] / correction1
            v_hat = opt.v[i] / correction2
            updated.append(p - opt.learning_rate * m_hat / (np.sqrt(v_hat) + opt.eps))

    if not all(np.all(np.isfinite(p)) for p in updated):
        raise NumericError(f"parameters became non-finite at optimizer step {opt.t}")
    n_layers = len(net.weights)
    net.weights = updated[:n_layers]
    net.biases = updated[n_layers:]
    return net


def save_network(net: Network, path: Union[str, Path]) -> None:
    """
    Write parameters as plain text: header lines, then one block per array.

    Values use 17 significant digits so that a reload is bit-exact.
    """
    lines = [
        "# deferloop network",
        f"head {net.head}",
        "layers " + " ".join(str(s) for s in net.layer_sizes),
        "shift " + _row(net.input_shift),
        "scale " + _row(net.input_scale),
    ]
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        lines.append(f"W{i} {w.shape[0]} {w.shape[1]}")
        lines.extend(_row(r) for r in w)
        lines.append(f"b{i} {b.shape[0]}")
        lines.append(_row(b))
    Path(path).write_text("\n".join(lines) + "\n")


def _row(values: np.ndarray) -> str:
    return " ".join(format(float(v), ".17g") for v in values)


def load_network(path: Union[str, Path]) -> Network:
    """
    Read a network written by ``save_network``.

    Raises:
        ParseError: With the offending line number if the file is malformed
    """
    lines = Path(path).read_text().splitlines()
    cursor = 0

    def take(prefix: str):
        nonlocal cursor
        while cursor < len(lines) and (not lines[cursor].strip() or lines[cursor].startswith("#")):
            cursor += 1
        if cursor >= len(lines):
            raise ParseError(f"unexpected end of file, expected '{prefix}'", line=cursor + 1)
        parts = lines[cursor].split()
        if parts[0] != prefix:
            raise ParseError(f"expected '{prefix}', found '{parts[0]}'", line=cursor + 1)
        cursor += 1
        return parts[1:], cursor

    def numbers(tokens, line_no, cast=float):
        try:
            return [cast(t) for t in tokens]
        except ValueError as e:
            raise ParseError(str(e), line=line_no) from e

    head_tokens, _ = take("head")
    size_tokens, line_no = take("layers")
    sizes = numbers(size_tokens, line_no, int)
    net = Network.zeros(sizes, head=head_tokens[0])
    shift, line_no = take("shift")
    net.input_shift = np.array(numbers(shift, line_no))
    scale, line_no = take("scale")
    net.input_scale = np.array(numbers(scale, line_no))

    for i in range(len(sizes) - 1):
        _, line_no = take(f"W{i}")
        rows = []
        for _ in range(sizes[i]):
            if cursor >= len(lines):
                raise ParseError(f"truncated weight block W{i}", line=cursor + 1)
            rows.append(numbers(lines[cursor].split(), cursor + 1))
            cursor += 1
        w = np.array(rows)
        if w.shape != (sizes[i], sizes[i + 1]):
            raise ParseError(f"weight block W{i} has shape {w.shape}", line=line_no)
        _, line_no = take(f"b{i}")
        if cursor >= len(lines):
            raise ParseError(f"truncated bias block b{i}", line=cursor + 1)
        b = np.array(numbers(lines[cursor].split(), cursor + 1))
        cursor += 1
        if b.shape != (sizes[i + 1],):
            raise ParseError(f"bias block b{i} has shape {b.shape}", line=line_no + 1)
        net.weights[i] = w
        net.biases[i] = b
    logger.debug("loaded network %s from %s", net.layer_sizes, path)
    return net
