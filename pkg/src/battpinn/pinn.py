"""Physics residual, loss terms, adaptive loss balancing and the training loop."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import FeatureTable, StandardizationFactors
from .dynamics import (ConfigurationError, DeepHpm, DeepHpmConfig, VerhulstParams,
                       dynamics_from_dict, parse_terms)
from .nn import AdamState, Mlp, MlpConfig, NonFiniteGradientError, adam_step, minibatches

log = logging.getLogger(__name__)

BALANCING = ("sum", "adpbal")
REDUCTIONS = ("mean", "sum")
DYNAMICS = ("none", "verhulst", "deephpm")
TERM_NAMES = ("L_u", "L_f", "L_ft")
HISTORY_COLUMNS = ("epoch", "L_u", "L_f", "L_ft", "lambda_u", "lambda_f", "lambda_ft", "total")


class TrainingError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, epoch: int, terms: dict, detail: str = ""):
        parts = ", ".join(f"{k}={v:.6g}" for k, v in terms.items())
        msg = f"non-finite training state at epoch {epoch} ({parts})"
        super().__init__(msg + (f": {detail}" if detail else ""))
        self.epoch = epoch
        self.terms = dict(terms)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2000
    batch_size: int = 1024
    lr: float = 1e-3
    seed: int = 0
    balancing: str = "adpbal"
    reduction: str = "mean"
    dynamics: str = "verhulst"
    task: str = "soh"
    hidden_layers: int = 2
    neurons: int = 128
    dropout: float = 0.2
    hpm_terms: tuple = ("t",)
    enable_uxx: bool = True
    dropout_in_residual: bool = True
    select_best: bool = True
    verhulst_init: dict = field(default_factory=lambda: {"r": 0.01, "K": 0.6})
    verhulst_u0: float = 0.10
    residual_units: str = "standardized"
    features: tuple | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.balancing not in BALANCING:
            raise ValueError(f"balancing must be one of {BALANCING}")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"reduction must be one of {REDUCTIONS}")
        if self.dynamics not in DYNAMICS:
            raise ValueError(f"dynamics must be one of {DYNAMICS}")
        if self.residual_units not in ("standardized", "physical"):
            raise ValueError("residual_units must be 'standardized' or 'physical'")
        if self.task not in ("soh", "rul"):
            raise ValueError("task must be 'soh' or 'rul'")
        if self.dynamics == "verhulst" and self.task != "soh":
            raise ConfigurationError("the Verhulst model describes capacity loss; use it for soh")
        object.__setattr__(self, "hpm_terms", parse_terms(self.hpm_terms))
        if self.features is not None:
            object.__setattr__(self, "features", tuple(self.features))
        MlpConfig(1, self.hidden_layers, self.neurons, 1, self.dropout)

    @property
    def variant(self) -> str:
        return {"none": "baseline", "verhulst": "pinn-verhulst", "deephpm": "pinn-deephpm"}[
            self.dynamics]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hpm_terms"] = list(self.hpm_terms)
        d["features"] = None if self.features is None else list(self.features)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        d = dict(d)
        if "hpm_terms" in d:
            d["hpm_terms"] = tuple(parse_terms(d["hpm_terms"]))
        if d.get("features") is not None:
            d["features"] = tuple(d["features"])
        return cls(**d)


class LossWeights:
    """Trainable log-precisions lambda' = -log(lambda) for L_u, L_f and L_ft."""

    def __init__(self, graph: ad.Graph, init=(0.0, 0.0, 0.0)):
        self.graph = graph
        self.nodes = [graph.parameter(float(v), f"lambda.{n}")
                      for v, n in zip(init, ("u", "f", "ft"))]

    @property
    def parameters(self) -> list[ad.Node]:
        return list(self.nodes)

    def values(self) -> tuple:
        return tuple(float(n.value) for n in self.nodes)

    def effective(self) -> tuple:
        return tuple(math.exp(-v) for v in self.values())


# ---------------------------------------------------------------------------
# residual and losses
# ---------------------------------------------------------------------------


@dataclass
class Residual:
    f: ad.Node
    u: ad.Node
    x: ad.Node
    t: ad.Node
    t_scale: float = 1.0  # d(time)/d(input t); 1/std_t for physical-unit residuals


def _as_column(node: ad.Node) -> ad.Node:
    return node.reshape(node.shape[0], 1) if len(node.shape) == 1 else node


def surrogate_forward(surrogate, x: ad.Node, t: ad.Node, training=False, masks=None) -> ad.Node:
    """``(N,)`` prediction node; ``surrogate`` is an :class:`Mlp` or a callable ``(x, t)``."""
    if isinstance(surrogate, Mlp):
        cols = [x, _as_column(t)] if x.shape[1] else [_as_column(t)]
        out = surrogate.forward(cols, training=training, masks=masks)
    else:
        out = surrogate(x, t)
    return out.reshape(out.shape[0]) if len(out.shape) == 2 else out


def residual(surrogate, dynamics, x, t, factors: StandardizationFactors | None = None,
             training: bool = False, masks=None, hpm_masks=None, enable_uxx: bool = True,
             graph: ad.Graph | None = None, physical: bool = False) -> Residual:
    """f = u_t - G(...) at the samples ``(x, t)`` as a re-differentiable node.

    ``x`` and ``t`` are standardized inputs, either arrays (wrapped as
    differentiable leaves on ``graph``) or existing nodes.  For the Verhulst
    model G is evaluated on label-unit capacity loss; by default it is divided
    by ``factors.rate_scale`` so f lives in standardized units, while
    ``physical=True`` instead rescales u_t and returns f in label units per
    cycle.  DeepHPM works in standardized space directly.  ``dynamics=None``
    gives G = 0.
    """
    if not isinstance(x, ad.Node) or not isinstance(t, ad.Node):
        if graph is None:
            graph = surrogate.graph
        x = x if isinstance(x, ad.Node) else graph.variable(np.asarray(x, dtype=np.float64))
        t = t if isinstance(t, ad.Node) else graph.variable(np.asarray(t, dtype=np.float64))
    g = x.graph
    u = surrogate_forward(surrogate, x, t, training, masks)
    needs = () if dynamics is None else tuple(dynamics.needs)
    want_ux = any(n in ("ux", "uxx") for n in needs)
    wrt = [t, x] if want_ux else [t]
    grads = g.derive(u.sum(), wrt, create_graph=True)
    u_t = grads[0].reshape(u.shape[0]) if len(grads[0].shape) == 2 else grads[0]
    if dynamics is None:
        return Residual(u_t, u, x, t)
    if isinstance(dynamics, VerhulstParams):
        scale = 1.0 if factors is None else factors.rate_scale
        u_phys = u if factors is None else u * factors.u_std + factors.u_mean
        if physical:
            t_scale = 1.0 if factors is None else 1.0 / factors.t_std
            return Residual(u_t * scale - dynamics.rate(u_phys), u, x, t, t_scale)
        return Residual(u_t - dynamics.rate(u_phys) / scale, u, x, t)
    terms = {"x": x, "t": _as_column(t), "u": _as_column(u)}
    if want_ux:
        terms["ux"] = grads[1]
    if "uxx" in needs:
        if not enable_uxx:
            raise ConfigurationError("DeepHPM requests u_xx but second feature derivatives are disabled")
        n_feat = x.shape[1]
        cols = [g.derive(grads[1][:, j].sum(), [x], create_graph=True)[0][:, j:j + 1]
                for j in range(n_feat)]
        terms["uxx"] = ad.concat(cols, axis=1) if n_feat > 1 else cols[0]
    rate = dynamics.rate(terms, training=training and hpm_masks is not None, masks=hpm_masks)
    return Residual(u_t - rate, u, x, t)


def _reduce(sq: ad.Node, reduction: str) -> ad.Node:
    total = sq.sum()
    return total * (1.0 / sq.shape[0]) if reduction == "mean" else total


def loss_terms(res: Residual, labels, reduction: str = "mean", physics: bool = True):
    """(L_u, L_f, L_ft) nodes; the physics terms are ``None`` when ``physics`` is off."""
    labels = np.asarray(labels, dtype=np.float64)
    err = res.u - labels
    l_u = _reduce(err * err, reduction)
    if not physics:
        return l_u, None, None
    l_f = _reduce(res.f * res.f, reduction)
    f_t = res.t.graph.derive(res.f.sum(), [res.t], create_graph=True)[0]
    if res.t_scale != 1.0:
        f_t = f_t * res.t_scale
    l_ft = _reduce(f_t * f_t, reduction)
    return l_u, l_f, l_ft


def total_loss(terms, weights: LossWeights | None, balancing: str = "adpbal") -> ad.Node:
    """Sum of exp(-lambda') L_k plus sum of lambda' (adpbal) or plain sum.

    Terms given as ``None`` are skipped together with their weight.
    """
    if balancing not in BALANCING:
        raise ValueError(f"balancing must be one of {BALANCING}")
    present = [(k, term) for k, term in enumerate(terms) if term is not None]
    if balancing == "sum" or weights is None:
        out = present[0][1]
        for _, term in present[1:]:
            out = out + term
        return out
    out = None
    for k, term in present:
        lam = weights.nodes[k]
        piece = ad.exp(-lam) * term + lam
        out = piece if out is None else out + piece
    return out


# ---------------------------------------------------------------------------
# trained model and persistence
# ---------------------------------------------------------------------------


@dataclass
class TrainedModel:
    config: TrainConfig
    surrogate: Mlp
    dynamics: object
    weights: tuple
    factors: StandardizationFactors
    history: dict
    best_epoch: int = 0
    best_val_loss: float = float("nan")
    train_seconds: float = 0.0

    def predict_standardized(self, x, t) -> np.ndarray:
        xs = np.asarray(x, dtype=np.float64)
        ts = np.asarray(t, dtype=np.float64).reshape(-1, 1)
        return self.surrogate.predict(np.hstack([xs, ts]))[:, 0]

    def predict(self, x, t) -> np.ndarray:
        """Prediction in label units (capacity-loss fraction or cycles) for raw inputs."""
        xs, ts = self.factors.apply(x, t)
        return self.factors.invert_u(self.predict_standardized(xs, ts))

    def predict_table(self, table: FeatureTable) -> np.ndarray:
        if self.config.features is not None:
            table = table.select_features(self.config.features)
        return self.predict(table.x, table.t)

    def dynamics_summary(self) -> dict | None:
        if isinstance(self.dynamics, VerhulstParams):
            return self.dynamics.values()
        if isinstance(self.dynamics, DeepHpm):
            return {"terms": list(self.dynamics.config.terms)}
        return None

    def checkpoint(self) -> dict:
        return {
            "format": "battpinn-checkpoint/1",
            "config": self.config.to_dict(),
            "factors": self.factors.to_dict(),
            "surrogate": self.surrogate.to_dict(),
            "dynamics": None if self.dynamics is None else self.dynamics.to_dict(),
            "lambda_prime": list(self.weights),
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "train_seconds": self.train_seconds,
        }

    @classmethod
    def from_checkpoint(cls, doc: dict) -> "TrainedModel":
        graph = ad.Graph()
        surrogate = Mlp.from_dict(doc["surrogate"], graph)
        dyn = dynamics_from_dict(doc.get("dynamics"), graph)
        return cls(TrainConfig.from_dict(doc["config"]), surrogate, dyn,
                   tuple(doc["lambda_prime"]), StandardizationFactors.from_dict(doc["factors"]),
                   {c: [] for c in HISTORY_COLUMNS}, doc.get("best_epoch", 0),
                   doc.get("best_val_loss", float("nan")), doc.get("train_seconds", 0.0))

    def save_checkpoint(self, path) -> None:
        Path(path).write_text(json.dumps(self.checkpoint(), indent=1))

    def metrics(self) -> dict:
        last = {k: self.history[k][-1] for k in TERM_NAMES if self.history.get(k)}
        return {
            "variant": self.config.variant,
            "balancing": self.config.balancing,
            "epochs": self.config.epochs,
            "best_epoch": self.best_epoch,
            "best_val_L_u": self.best_val_loss,
            "final_losses": last,
            "lambda_prime": list(self.weights),
            "dynamics": self.dynamics_summary(),
            "train_seconds": self.train_seconds,
        }

    def save_run(self, run_dir, extra_metrics: dict | None = None) -> Path:
        """Write config.json, losses.csv, checkpoint.json and metrics.json."""
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(json.dumps(self.config.to_dict(), indent=1))
        write_history(run_dir / "losses.csv", self.history)
        self.save_checkpoint(run_dir / "checkpoint.json")
        metrics = self.metrics()
        if extra_metrics:
            metrics.update(extra_metrics)
        (run_dir / "metrics.json").write_text(json.dumps(metrics, indent=1))
        return run_dir


def load_checkpoint(path) -> TrainedModel:
    return TrainedModel.from_checkpoint(json.loads(Path(path).read_text()))


def write_history(path, history: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for row in zip(*(history[c] for c in HISTORY_COLUMNS)):
            w.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def build_dynamics(config: TrainConfig, graph: ad.Graph, n_features: int, u0: float):
    if config.dynamics == "none":
        return None
    if config.dynamics == "verhulst":
        init = dict(config.verhulst_init)
        return VerhulstParams(graph, u0=u0, r=init.get("r", 0.01), k=init.get("K", 0.6),
                              c=init.get("C"))
    hpm = DeepHpmConfig.build(config.hpm_terms, n_features, config.hidden_layers,
                              config.neurons, config.dropout)
    return DeepHpm(hpm, graph, seed=config.seed + 7919)


def _term_values(terms) -> dict:
    return {name: (float(t.value) if t is not None else 0.0) for name, t in zip(TERM_NAMES, terms)}


def train(train_table: FeatureTable, config: TrainConfig,
          validation: FeatureTable | None = None,
          factors: StandardizationFactors | None = None,
          callback=None) -> TrainedModel:
    """Run the joint optimisation of surrogate, dynamics and loss weights.

    Each epoch visits the shuffled training rows once in minibatches.  Per
    batch the surrogate is evaluated at the standardized (x, t), the
    residual and its time derivative are built by nested differentiation,
    the three loss terms are combined by the configured balancing, and one
    Adam step updates every trainable leaf.  Runs are deterministic in
    ``config.seed``.  With ``select_best`` the returned parameters are those
    with the lowest validation L_u (training L_u when no validation rows).
    """
    if len(train_table) == 0:
        raise ValueError("training table is empty")
    if config.features is not None:
        train_table = train_table.select_features(config.features)
        if validation is not None:
            validation = validation.select_features(config.features)
    labels_raw = train_table.labels(config.task)
    if not np.all(np.isfinite(labels_raw)):
        raise ValueError(f"training labels for task {config.task!r} contain non-finite values")
    if factors is None:
        factors = StandardizationFactors.fit_table(train_table, config.task)
    xs, ts, ys = factors.apply(train_table.x, train_table.t, labels_raw)
    has_val = validation is not None and len(validation) > 0
    if has_val:
        vx, vt, vy = factors.apply(validation.x, validation.t, validation.labels(config.task))
        v_in = np.hstack([vx, vt.reshape(-1, 1)])
    else:
        # without validation rows, score the end-of-epoch network on the training rows
        v_in, vy = np.hstack([xs, ts.reshape(-1, 1)]), ys

    graph = ad.Graph()
    n_feat = xs.shape[1]
    surrogate = Mlp(MlpConfig(n_feat + 1, config.hidden_layers, config.neurons, 1, config.dropout),
                    graph, seed=config.seed, name="surrogate")
    dynamics = build_dynamics(config, graph, n_feat, config.verhulst_u0)
    weights = LossWeights(graph)
    physics = dynamics is not None
    params = surrogate.parameters + (dynamics.parameters if physics else [])
    if config.balancing == "adpbal":
        params += weights.parameters if physics else weights.parameters[:1]
    opt = AdamState(lr=config.lr)

    seeds = np.random.SeedSequence(config.seed).spawn(2)
    batch_rng = np.random.default_rng(seeds[0])
    drop_rng = np.random.default_rng(seeds[1])
    history = {c: [] for c in HISTORY_COLUMNS}
    best = (math.inf, 0, None)
    started = time.perf_counter()
    n = len(ys)

    for epoch in range(1, config.epochs + 1):
        sums = dict.fromkeys(TERM_NAMES + ("total",), 0.0)
        for idx in minibatches(n, config.batch_size, batch_rng):
            graph.reset()
            xb = graph.variable(xs[idx])
            tb = graph.variable(ts[idx])
            masks = hpm_masks = None
            if config.dropout > 0:
                masks = surrogate.dropout_masks(len(idx), drop_rng)
                if isinstance(dynamics, DeepHpm):
                    hpm_masks = dynamics.net.dropout_masks(len(idx), drop_rng)
            if physics:
                shared = config.dropout_in_residual and masks is not None
                res = residual(surrogate, dynamics, xb, tb, factors, training=shared,
                               masks=masks if shared else None,
                               hpm_masks=hpm_masks if shared else None,
                               enable_uxx=config.enable_uxx,
                               physical=config.residual_units == "physical")
                terms = loss_terms(res, ys[idx], config.reduction)
                if masks is not None and not shared:
                    # data fit keeps dropout, the residual is taken on the full network
                    fit = surrogate_forward(surrogate, xb, tb, True, masks)
                    err = fit - ys[idx]
                    terms = (_reduce(err * err, config.reduction),) + tuple(terms[1:])
            else:
                u = surrogate_forward(surrogate, xb, tb, True, masks)
                terms = (loss_terms(Residual(u, u, xb, tb), ys[idx], config.reduction,
                                    physics=False)[0], None, None)
            total = total_loss(terms, weights, config.balancing)
            values = _term_values(terms)
            values["total"] = float(total.value)
            if not all(math.isfinite(v) for v in values.values()):
                raise TrainingError(epoch, values)
            try:
                adam_step(opt, params, graph.gradients(total, params))
            except NonFiniteGradientError as exc:
                raise TrainingError(epoch, values, str(exc)) from exc
            share = len(idx) / n
            for k in sums:
                sums[k] += share * values[k]
        lam = weights.values()
        history["epoch"].append(epoch)
        for k in TERM_NAMES + ("total",):
            history[k].append(sums[k])
        history["lambda_u"].append(lam[0])
        history["lambda_f"].append(lam[1])
        history["lambda_ft"].append(lam[2])

        score = float(np.mean((surrogate.predict(v_in)[:, 0] - vy) ** 2))
        if config.select_best and score < best[0]:
            best = (score, epoch, [p.value.copy() for p in params])
        if callback is not None:
            callback(epoch, history, surrogate)

    if config.select_best and best[2] is not None:
        for p, v in zip(params, best[2]):
            graph.set_value(p, v)
        best_epoch, best_score = best[1], best[0]
    else:
        best_epoch, best_score = config.epochs, score
    graph.reset()
    return TrainedModel(config, surrogate, dynamics, weights.values(), factors, history,
                        best_epoch, best_score, time.perf_counter() - started)
