"""Rate models for the physics residual: constrained Verhulst and a DeepHPM network."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from itertools import combinations

import numpy as np

from . import autodiff as ad
from .nn import Mlp, MlpConfig

TERM_ORDER = ("x", "t", "u", "ux", "uxx")
TERM_LABELS = {"x": "x", "t": "t", "u": "u", "ux": "u_x", "uxx": "u_xx"}
_TERM_ALIASES = {"x": "x", "t": "t", "u": "u", "ux": "ux", "u_x": "ux", "uxx": "uxx", "u_xx": "uxx"}

# keeps mapped parameters strictly inside their open intervals in float64
_SQUEEZE = 1e-12


class ConfigurationError(ValueError):
    pass


def _logit(p: float) -> float:
    return float(np.log(p) - np.log1p(-p))


def _inv_softplus(y: float) -> float:
    return float(y + np.log(-np.expm1(-y)))


def _squeezed_sigmoid(raw):
    return _SQUEEZE + (1.0 - 2.0 * _SQUEEZE) * ad.sigmoid(raw)


def map_verhulst(raw_r, raw_k, raw_c, u0: float, k_bounds=(0.20, 1.0)):
    """Map unconstrained raws to (r, K, C); works on floats, arrays or graph nodes."""
    k_lo, k_hi = k_bounds
    r = ad.softplus(raw_r) + _SQUEEZE
    k = k_lo + (k_hi - k_lo) * _squeezed_sigmoid(raw_k)
    c = u0 * _squeezed_sigmoid(raw_c)
    return r, k, c


def verhulst_rate_value(u, r: float, k: float, c: float):
    """Plain-number right-hand side r (u - C) (1 - (u - C) / (K - C))."""
    v = np.asarray(u, dtype=np.float64) - c
    return r * v * (1.0 - v / (k - c))


class VerhulstParams:
    """Trainable raw-r, raw-K, raw-C leaves with a fixed initial loss ``u0``."""

    kind = "verhulst"
    needs = ("u",)

    def __init__(self, graph: ad.Graph, u0: float = 0.10, r: float = 0.01, k: float = 0.60,
                 c: float | None = None, k_bounds=(0.20, 1.0)):
        k_lo, k_hi = k_bounds
        if not 0.0 < k_lo < k_hi:
            raise ConfigurationError("K bounds must satisfy 0 < low < high")
        if not 0.0 < u0 < k_lo:
            raise ConfigurationError("u0 must lie in (0, lower K bound)")
        if c is None:
            c = 0.5 * u0
        if r <= 0 or not k_lo < k < k_hi or not 0 < c <= u0:
            raise ConfigurationError("initial (r, K, C) violate their constraints")
        self.graph = graph
        self.u0 = float(u0)
        self.k_bounds = (float(k_lo), float(k_hi))
        c_frac = min(c / u0, 1.0 - 1e-9)
        self.raw_r = graph.parameter(_inv_softplus(r), "verhulst.raw_r")
        self.raw_k = graph.parameter(_logit((k - k_lo) / (k_hi - k_lo)), "verhulst.raw_K")
        self.raw_c = graph.parameter(_logit(c_frac), "verhulst.raw_C")

    @property
    def parameters(self) -> list[ad.Node]:
        return [self.raw_r, self.raw_k, self.raw_c]

    def mapped(self):
        return map_verhulst(self.raw_r, self.raw_k, self.raw_c, self.u0, self.k_bounds)

    def values(self) -> dict:
        r, k, c = map_verhulst(self.raw_r.value, self.raw_k.value, self.raw_c.value, self.u0,
                               self.k_bounds)
        return {"r": float(r), "K": float(k), "C": float(c), "u0": self.u0}

    def rate(self, u):
        return verhulst_rate(u, self)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "u0": self.u0,
            "k_bounds": list(self.k_bounds),
            "raw": [float(self.raw_r.value), float(self.raw_k.value), float(self.raw_c.value)],
            "mapped": self.values(),
        }

    @classmethod
    def from_dict(cls, doc: dict, graph: ad.Graph) -> "VerhulstParams":
        obj = cls(graph, u0=doc["u0"], k_bounds=tuple(doc["k_bounds"]))
        for node, raw in zip(obj.parameters, doc["raw"]):
            graph.set_value(node, raw)
        return obj


def verhulst_rate(u, params: VerhulstParams):
    """Graph node for r (u - C) (1 - (u - C) / (K - C)) at PCL ``u``."""
    r, k, c = params.mapped()
    v = u - c
    return r * v * (1.0 - v / (k - c))


def parse_terms(spec) -> tuple[str, ...]:
    """Normalize a term list such as ``"t,u,u_x"`` to canonical order."""
    if isinstance(spec, str):
        items = [s.strip() for s in spec.split(",") if s.strip()]
    else:
        items = list(spec)
    chosen = set()
    for item in items:
        key = _TERM_ALIASES.get(item.lower() if isinstance(item, str) else item)
        if key is None:
            raise ConfigurationError(f"unknown DeepHPM input term {item!r}")
        chosen.add(key)
    if not chosen:
        raise ConfigurationError("DeepHPM needs at least one input term")
    return tuple(t for t in TERM_ORDER if t in chosen)


def term_width(term: str, n_features: int) -> int:
    return n_features if term in ("x", "ux", "uxx") else 1


def input_library() -> list[tuple[str, ...]]:
    """The 15 non-empty subsets of (x, t, u, u_x) in appendix order."""
    base = ("x", "t", "u", "ux")
    return [combo for size in range(1, 5) for combo in combinations(base, size)]


def format_terms(terms) -> str:
    return ",".join(TERM_LABELS[t] for t in terms)


@dataclass(frozen=True)
class DeepHpmConfig:
    terms: tuple
    n_features: int
    network: MlpConfig

    def __post_init__(self):
        terms = parse_terms(self.terms)
        if terms != tuple(self.terms):
            raise ConfigurationError(f"terms must be canonical, e.g. {terms}")
        if self.network.output_dim != 1:
            raise ConfigurationError("DeepHPM network must have one output")
        if self.network.input_dim != self.input_dim:
            raise ConfigurationError(
                f"DeepHPM network input_dim {self.network.input_dim} != term count {self.input_dim}"
            )

    @property
    def input_dim(self) -> int:
        return sum(term_width(t, self.n_features) for t in self.terms)

    @classmethod
    def build(cls, terms, n_features: int, hidden_layers: int, neurons: int,
              dropout: float = 0.0) -> "DeepHpmConfig":
        terms = parse_terms(terms)
        if n_features < 1 and any(t in ("x", "ux", "uxx") for t in terms):
            raise ConfigurationError("feature-based DeepHPM terms need n_features >= 1")
        width = sum(term_width(t, n_features) for t in terms)
        return cls(terms, n_features, MlpConfig(width, hidden_layers, neurons, 1, dropout))


def assemble_terms(config: DeepHpmConfig, term_values: dict):
    """Concatenate the configured terms into an ``(N, input_dim)`` node."""
    missing = [t for t in config.terms if t not in term_values]
    if missing:
        raise ConfigurationError(f"DeepHPM terms not supplied: {', '.join(missing)}")
    cols = []
    for t in config.terms:
        v = term_values[t]
        if len(v.shape) == 1:
            v = v.reshape(v.shape[0], 1)
        if v.shape[1] != term_width(t, config.n_features):
            raise ConfigurationError(f"term {t} has width {v.shape[1]}")
        cols.append(v)
    return ad.concat(cols, axis=1) if len(cols) > 1 else cols[0]


class DeepHpm:
    """Network G(terms; theta) predicting u_t from the selected library terms."""

    kind = "deephpm"

    def __init__(self, config: DeepHpmConfig, graph: ad.Graph, seed: int = 0,
                 arrays: list[np.ndarray] | None = None):
        self.config = config
        self.net = Mlp(config.network, graph, seed=seed, name="deephpm", arrays=arrays)

    @property
    def needs(self) -> tuple:
        return self.config.terms

    @property
    def parameters(self) -> list[ad.Node]:
        return self.net.parameters

    def rate(self, term_values: dict, training: bool = False, rng=None, masks=None):
        return deephpm_rate(self.config, self.net, term_values, training, rng, masks)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "terms": list(self.config.terms),
            "n_features": self.config.n_features,
            "network": self.net.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: dict, graph: ad.Graph) -> "DeepHpm":
        net_doc = doc["network"]
        config = DeepHpmConfig(tuple(doc["terms"]), doc["n_features"], MlpConfig(**net_doc["config"]))
        arrays = [np.array(p["values"], dtype=np.float64).reshape(p["shape"])
                  for p in net_doc["parameters"]]
        return cls(config, graph, seed=net_doc.get("seed", 0), arrays=arrays)


def deephpm_rate(config: DeepHpmConfig, net: Mlp, term_values: dict, training: bool = False,
                 rng=None, masks=None):
    x = assemble_terms(config, term_values)
    out = net.forward(x, training=training, rng=rng, masks=masks)
    return out.reshape(out.shape[0])


def dynamics_from_dict(doc: dict | None, graph: ad.Graph):
    if doc is None:
        return None
    if doc["kind"] == "verhulst":
        return VerhulstParams.from_dict(doc, graph)
    if doc["kind"] == "deephpm":
        return DeepHpm.from_dict(doc, graph)
    raise ConfigurationError(f"unknown dynamics kind {doc['kind']!r}")
