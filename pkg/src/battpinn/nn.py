"""Fully connected tanh networks and the Adam optimizer on top of the autodiff graph."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}; update rejected")
        self.parameter = name


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    hidden_layers: int
    neurons: int
    output_dim: int = 1
    dropout: float = 0.0

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if self.hidden_layers < 1:
            raise ValueError("hidden_layers must be >= 1")
        if self.neurons < 1:
            raise ValueError("neurons must be >= 1")
        if self.output_dim < 1:
            raise ValueError("output_dim must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim] + [self.neurons] * self.hidden_layers + [self.output_dim]

    @property
    def n_parameters(self) -> int:
        sizes = self.layer_sizes
        return sum((fan_in + 1) * fan_out for fan_in, fan_out in zip(sizes[:-1], sizes[1:]))


def xavier_normal_arrays(config: MlpConfig, seed: int) -> list[np.ndarray]:
    """Weights ~ N(0, 2/(fan_in+fan_out)), zero biases, as [W1, b1, W2, b2, ...]."""
    rng = np.random.default_rng(seed)
    arrays = []
    sizes = config.layer_sizes
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        std = np.sqrt(2.0 / (fan_in + fan_out))
        arrays.append(rng.normal(0.0, std, size=(fan_in, fan_out)))
        arrays.append(np.zeros(fan_out))
    return arrays


class Mlp:
    """tanh network whose weights are parameter nodes of ``graph``.

    Hidden layers apply ``tanh`` then (in training mode) inverted dropout; the
    output layer is linear.  Weight matrices are stored ``(fan_in, fan_out)``
    so a batch ``(N, input_dim)`` maps to ``(N, output_dim)``.
    """

    def __init__(self, config: MlpConfig, graph: ad.Graph, seed: int = 0, name: str = "mlp",
                 arrays: list[np.ndarray] | None = None):
        self.config = config
        self.graph = graph
        self.seed = seed
        self.name = name
        if arrays is None:
            arrays = xavier_normal_arrays(config, seed)
        self._check_arrays(arrays)
        self.weights: list[ad.Node] = []
        self.biases: list[ad.Node] = []
        for layer in range(len(arrays) // 2):
            self.weights.append(graph.parameter(arrays[2 * layer], f"{name}.W{layer + 1}"))
            self.biases.append(graph.parameter(arrays[2 * layer + 1], f"{name}.b{layer + 1}"))

    def _check_arrays(self, arrays):
        sizes = self.config.layer_sizes
        expected = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            expected += [(fan_in, fan_out), (fan_out,)]
        got = [np.shape(a) for a in arrays]
        if got != expected:
            raise ad.StructuralError(f"parameter shapes {got} do not match config {expected}")

    @property
    def parameters(self) -> list[ad.Node]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def arrays(self) -> list[np.ndarray]:
        return [p.value.copy() for p in self.parameters]

    def load_arrays(self, arrays) -> None:
        self._check_arrays(arrays)
        for p, a in zip(self.parameters, arrays):
            self.graph.set_value(p, a)

    def _input_node(self, inputs) -> ad.Node:
        if isinstance(inputs, ad.Node):
            x = inputs
        else:
            cols = []
            for part in inputs:
                if not isinstance(part, ad.Node):
                    part = self.graph.constant(part)
                cols.append(part.reshape(part.shape[0], 1) if len(part.shape) == 1 else part)
            x = ad.concat(cols, axis=1)
        if len(x.shape) != 2 or x.shape[1] != self.config.input_dim:
            raise ad.StructuralError(
                f"{self.name}: expected input (N, {self.config.input_dim}), got {x.shape}"
            )
        return x

    def dropout_masks(self, n_rows: int, rng: np.random.Generator) -> list[np.ndarray]:
        p = self.config.dropout
        keep = 1.0 - p
        return [
            (rng.random((n_rows, self.config.neurons)) < keep) / keep
            for _ in range(self.config.hidden_layers)
        ]

    def forward(self, inputs, training: bool = False, rng: np.random.Generator | None = None,
                masks: list[np.ndarray] | None = None) -> ad.Node:
        """Record a forward pass; returns an ``(N, output_dim)`` node.

        ``inputs`` is either one ``(N, input_dim)`` node or a sequence of
        column nodes that are concatenated.  Dropout is applied only when
        ``training`` is set and the configured probability is positive.
        """
        h = self._input_node(inputs)
        if training and self.config.dropout > 0.0 and masks is None:
            if rng is None:
                raise ValueError("training-mode dropout needs an rng or explicit masks")
            masks = self.dropout_masks(h.shape[0], rng)
        if not training:
            masks = None
        n_hidden = self.config.hidden_layers
        for layer in range(n_hidden):
            h = ad.tanh(h @ self.weights[layer] + self.biases[layer])
            if masks is not None:
                h = h * masks[layer]
        return h @ self.weights[n_hidden] + self.biases[n_hidden]

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Evaluation-mode forward pass on plain arrays (no graph recording)."""
        h = np.asarray(x, dtype=np.float64)
        n_hidden = self.config.hidden_layers
        for layer in range(n_hidden):
            h = np.tanh(h @ self.weights[layer].value + self.biases[layer].value)
        return h @ self.weights[n_hidden].value + self.biases[n_hidden].value

    def to_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "seed": self.seed,
            "name": self.name,
            "parameters": [
                {"name": self.graph.parameter_name(p), "shape": list(p.shape),
                 "values": p.value.ravel().tolist()}
                for p in self.parameters
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict, graph: ad.Graph) -> "Mlp":
        config = MlpConfig(**doc["config"])
        arrays = [np.array(p["values"], dtype=np.float64).reshape(p["shape"]) for p in doc["parameters"]]
        return cls(config, graph, seed=doc.get("seed", 0), name=doc.get("name", "mlp"), arrays=arrays)


def xavier_normal_init(config: MlpConfig, seed: int, graph: ad.Graph | None = None,
                       name: str = "mlp") -> Mlp:
    return Mlp(config, graph if graph is not None else ad.Graph(), seed=seed, name=name)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(state: AdamState, parameters: list[ad.Node], gradients: list[np.ndarray]) -> None:
    """One bias-corrected Adam update, mutating parameter values in place.

    The whole update is rejected if any gradient is non-finite.
    """
    if len(parameters) != len(gradients):
        raise ad.StructuralError("gradients are not aligned with parameters")
    grads = []
    for p, g in zip(parameters, gradients):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ad.StructuralError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(p.graph.parameter_name(p))
        grads.append(g)
    if not state.m:
        state.m = [np.zeros(p.shape) for p in parameters]
        state.v = [np.zeros(p.shape) for p in parameters]
    state.step += 1
    for p, g, m, v in zip(parameters, grads, state.m, state.v):
        kernels.adam_update(p.value, g, m, v, state.lr, state.beta1, state.beta2, state.eps,
                            state.step)


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffle ``range(n)`` and cut it into batches (sampling without replacement)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]
