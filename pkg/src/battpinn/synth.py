"""Synthetic degradation trajectories, rate models and closed-form oracles."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import kernels
from .data import (EOL_THRESHOLD, Q_NOM, CellCycleRecord, FeatureTable, write_cell,
                   write_cells_index)

# per-channel (a, b) of the synthetic health indicators x_s = a u + b u^2
FEATURE_COEFFS = (
    (1.0, 0.5),
    (-0.8, 0.2),
    (0.5, -1.0),
    (-1.2, 0.3),
    (0.3, 1.5),
    (0.9, -0.6),
    (-0.4, 0.8),
    (0.7, 0.1),
)
SYNTH_FEATURE_NAMES = tuple(f"x{i + 1}" for i in range(len(FEATURE_COEFFS)))


class ParameterError(ValueError):
    pass


class IntegrationError(FloatingPointError):
    def __init__(self, t: float, u: float):
        super().__init__(f"non-finite rate at t={t!r}, u={u!r}")
        self.t = t
        self.u = u


# ---------------------------------------------------------------------------
# closed forms
# ---------------------------------------------------------------------------


def _check_logistic(k: float, c: float, u0: float) -> None:
    if not c < u0 < k:
        raise ParameterError(f"logistic solution needs C < u0 < K, got C={c}, u0={u0}, K={k}")


def logistic_closed_form(t, r: float, k: float, c: float, u0: float):
    """Solution of du/dt = r (u - C) (1 - (u - C)/(K - C)) with u(0) = u0."""
    _check_logistic(k, c, u0)
    a = (k - u0) / (u0 - c)
    return c + (k - c) / (1.0 + a * np.exp(-r * np.asarray(t, dtype=np.float64)))


def logistic_node(t: ad.Node, r: float, k: float, c: float, u0: float) -> ad.Node:
    """The same closed form recorded on the autodiff graph (differentiable in t)."""
    _check_logistic(k, c, u0)
    a = (k - u0) / (u0 - c)
    return c + (k - c) / (1.0 + a * ad.exp(t * (-r)))


def exponential_closed_form(t, r: float, u0: float):
    return u0 * np.exp(r * np.asarray(t, dtype=np.float64))


def xu_closed_form(t, theta: float, u0: float):
    return 1.0 - (1.0 - u0) * np.exp(-theta * np.asarray(t, dtype=np.float64))


# ---------------------------------------------------------------------------
# rate models
# ---------------------------------------------------------------------------


def xu_rate(u, theta: float):
    return theta * (1.0 - np.asarray(u, dtype=np.float64))


def exp_rate(u, r: float):
    return r * np.asarray(u, dtype=np.float64)


def logistic_rate(u, r: float, k: float, c: float):
    v = np.asarray(u, dtype=np.float64) - c
    return r * v * (1.0 - v / (k - c))


@dataclass(frozen=True)
class SpModelParams:
    theta: tuple = (2.0e-4, 1.0e-3, 0.4, 4.0e-3, 1.0, 2.0e-6)
    t_start: float = 1.0

    def __post_init__(self):
        if len(self.theta) != 6:
            raise ParameterError("SP model needs six composite parameters")
        if self.theta[2] == 2.0:
            raise ParameterError("theta3 must differ from 2")
        if not self.t_start > 0:
            raise ParameterError("SP model start time must be positive")


def sp_rate(t: float, history: Sequence[float], params: SpModelParams) -> float:
    """SEI-growth rate at monitoring time ``t`` given earlier monitoring times."""
    if not t > 0:
        raise ParameterError("SP rate is defined only for t > 0")
    hist = np.asarray(history, dtype=np.float64)
    if hist.size and (np.any(np.diff(hist) <= 0) or hist[-1] >= t):
        raise ParameterError("history must be strictly increasing and earlier than t")
    th1, th2, th3, th4, th5, th6 = params.theta
    expo = th3 / (2.0 - th3)
    rate = th1 * th5 * (1.0 + th2 * t) ** expo + th4 / math.sqrt(t)
    if hist.size:
        dt = t - hist
        rate += th1 * th6 * float(np.sum((1.0 + th2 * dt) ** expo / np.sqrt(dt)))
    return rate


def sp_trajectory(times, params: SpModelParams, u0: float) -> np.ndarray:
    """Accumulate SP rates over the monitoring grid (rate held over each interval)."""
    times = np.asarray(times, dtype=np.float64)
    if times[0] < params.t_start or np.any(np.diff(times) <= 0):
        raise ParameterError("SP times must be increasing and start at or after t_start")
    rates = kernels.sp_rates(times, np.array(params.theta))
    u = np.empty_like(times)
    u[0] = u0
    u[1:] = u0 + np.cumsum(rates[1:] * np.diff(times))
    return u


@dataclass(frozen=True)
class RateModel:
    """Autonomous rate model with a compiled RK4 path."""

    kind: str
    params: tuple

    _CODES = {"zero": kernels.RATE_ZERO, "logistic": kernels.RATE_LOGISTIC,
              "exp": kernels.RATE_EXP, "xu": kernels.RATE_XU}

    def __call__(self, t, u):
        if self.kind == "logistic":
            return logistic_rate(u, *self.params)
        if self.kind == "exp":
            return exp_rate(u, *self.params)
        if self.kind == "xu":
            return xu_rate(u, *self.params)
        return np.zeros_like(np.asarray(u, dtype=np.float64))

    @property
    def code(self) -> int:
        return self._CODES[self.kind]


@dataclass
class Trajectory:
    times: np.ndarray
    values: np.ndarray
    generator: str = ""
    noise_std: float = 0.0


def rk4_integrate(rate: Callable, u_start: float, t_span: tuple, step: float) -> Trajectory:
    """Classical fourth-order Runge-Kutta on ``[t0, t1]``.

    ``rate(t, u)`` may be any callable; :class:`RateModel` instances take a
    compiled path.  The step is shrunk so an integer number of steps covers
    the span exactly.
    """
    if not step > 0:
        raise ParameterError("step must be positive")
    t0, t1 = map(float, t_span)
    if not t1 > t0:
        raise ParameterError("t_span must be increasing")
    n = max(1, int(math.ceil((t1 - t0) / step - 1e-9)))
    h = (t1 - t0) / n
    times = t0 + h * np.arange(n + 1)
    if isinstance(rate, RateModel):
        values = kernels.rk4_builtin(rate.code, np.array(rate.params, dtype=np.float64),
                                     u_start, h, n)
        bad = np.nonzero(~np.isfinite(values))[0]
        if bad.size:
            i = max(int(bad[0]) - 1, 0)
            raise IntegrationError(float(times[i]), float(values[i]))
        return Trajectory(times, values, rate.kind)
    values = np.empty(n + 1)
    u = float(u_start)
    values[0] = u
    for i in range(n):
        t = times[i]
        k1 = float(rate(t, u))
        k2 = float(rate(t + 0.5 * h, u + 0.5 * h * k1))
        k3 = float(rate(t + 0.5 * h, u + 0.5 * h * k2))
        k4 = float(rate(t + h, u + h * k3))
        if not all(map(math.isfinite, (k1, k2, k3, k4))):
            raise IntegrationError(float(t), u)
        u = u + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        values[i + 1] = u
    return Trajectory(times, values, getattr(rate, "__name__", "callable"))


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------


@dataclass
class GeneratorSpec:
    """Nominal degradation model; ``rate_param`` is the one spread across cells."""

    name: str = "logistic"
    params: dict = field(default_factory=lambda: {"r": 0.01, "K": 0.5, "C": 0.05})
    u0: float = 0.10

    def curve(self, t, params: dict) -> np.ndarray:
        if self.name == "logistic":
            return logistic_closed_form(t, params["r"], params["K"], params["C"], self.u0)
        if self.name == "exp":
            return exponential_closed_form(t, params["r"], self.u0)
        if self.name == "xu":
            return xu_closed_form(t, params["theta"], self.u0)
        if self.name == "sp":
            theta = tuple(params.get("theta", SpModelParams().theta))
            return sp_trajectory(t, SpModelParams(theta, float(np.min(t))), self.u0)
        raise ParameterError(f"unknown generator {self.name!r}")

    @property
    def rate_param(self) -> str:
        return {"logistic": "r", "exp": "r", "xu": "theta", "sp": "theta"}[self.name]


def _cell_params(spec: GeneratorSpec, heterogeneity: float, rng) -> dict:
    params = dict(spec.params)
    factor = 1.0 + heterogeneity * rng.uniform(-1.0, 1.0)
    key = spec.rate_param
    if spec.name == "sp":
        theta = list(params.get("theta", SpModelParams().theta))
        theta[0] *= factor
        params["theta"] = tuple(theta)
    else:
        params[key] = params[key] * factor
    return params


def generate_dataset(generator: GeneratorSpec | None = None, cells: int | Sequence[str] = 3,
                     heterogeneity: float = 0.0, noise_std: float = 1e-3, seed: int = 0,
                     n_cycles: int = 500, feature_noise_std: float | None = None,
                     truncate_at_eol: bool = True, eol_threshold: float = EOL_THRESHOLD,
                     batch: int | Sequence[int] = 1, n_features: int = 8):
    """Per-cell synthetic feature tables plus the noiseless truth.

    Cell ``i`` uses the nominal parameters with the rate constant scaled by
    ``1 + heterogeneity * U(-1, 1)``.  Time is the cycle index ``1..n_cycles``.
    Health indicators are ``a_s u + b_s u^2`` of the noiseless PCL plus
    independent noise (``feature_noise_std``, default ``noise_std``).

    Returns ``(table, truth)`` where ``truth`` maps cell id to a dict with the
    cell's parameters and its noiseless PCL on the kept cycles.
    """
    spec = generator or GeneratorSpec()
    ids = [f"sim{i + 1:03d}" for i in range(cells)] if isinstance(cells, int) else list(cells)
    batches = [batch] * len(ids) if isinstance(batch, int) else list(batch)
    if len(batches) != len(ids):
        raise ParameterError("one batch number per cell is required")
    if not 1 <= n_features <= len(FEATURE_COEFFS):
        raise ParameterError(f"n_features must be in 1..{len(FEATURE_COEFFS)}")
    fx_std = noise_std if feature_noise_std is None else feature_noise_std
    rng = np.random.default_rng(seed)
    coeffs = np.array(FEATURE_COEFFS[:n_features])
    cycles = np.arange(1, n_cycles + 1)
    tables = []
    truth = {}
    for cid, b in zip(ids, batches):
        params = _cell_params(spec, heterogeneity, rng)
        u_true = spec.curve(cycles.astype(np.float64), params)
        u_obs = u_true + noise_std * rng.standard_normal(n_cycles)
        x = coeffs[:, 0] * u_true[:, None] + coeffs[:, 1] * u_true[:, None] ** 2
        x = x + fx_std * rng.standard_normal(x.shape)
        crossed = np.nonzero(u_obs >= eol_threshold)[0]
        eol = int(cycles[crossed[0]]) if crossed.size else None
        keep = n_cycles
        if truncate_at_eol and eol is not None:
            keep = crossed[0] + 1
        rul = (eol - cycles[:keep]).astype(np.float64) if eol is not None else np.full(keep, np.nan)
        tables.append(FeatureTable(np.full(keep, cid, dtype=object), np.full(keep, b),
                                   cycles[:keep], x[:keep], cycles[:keep].astype(np.float64),
                                   u_obs[:keep], rul, SYNTH_FEATURE_NAMES[:n_features]))
        truth[cid] = {"params": params, "pcl": u_true[:keep], "eol": eol}
    return FeatureTable.concat(tables), truth


def paper_layout_cells() -> tuple[list[str], list[int]]:
    """Cell ids and batches matching the case definitions (batch 2 = #42..#84)."""
    batch2 = [str(i) for i in range(42, 85)]
    batch3 = ["91", "100", "101", "108", "116", "120", "124"]
    return batch2 + batch3, [2] * len(batch2) + [3] * len(batch3)


# ---------------------------------------------------------------------------
# raw cycling records (discharge curves plus summary channels)
# ---------------------------------------------------------------------------


def discharge_curve(q_k: float, u: float, n_points: int = 100, v_range=(3.6, 2.0)):
    """Voltage sweep and cumulative discharge capacity for one cycle.

    The capacity-voltage profile is a logistic step whose midpoint sinks and
    whose width grows with capacity loss ``u``, so the incremental-capacity
    peak flattens as the cell ages.
    """
    v = np.linspace(v_range[0], v_range[1], n_points)
    mid = 3.15 - 0.4 * u
    width = 0.06 + 0.15 * u
    s = 1.0 / (1.0 + np.exp((v - mid) / width))
    s = (s - s[0]) / (s[-1] - s[0])
    return v, q_k * s


def raw_records(cell_id: str, pcl: np.ndarray, rng: np.random.Generator, q_nom: float = Q_NOM,
                n_points: int = 100, noise_std: float = 0.0) -> list:
    """Per-cycle records consistent with a capacity-loss path (cycle k = index + 1)."""
    records = []
    for k, u in enumerate(np.asarray(pcl, dtype=np.float64), start=1):
        q_k = q_nom * (1.0 - u)
        v, q = discharge_curve(q_k, u, n_points)
        if noise_std:
            q = np.maximum.accumulate(q + noise_std * rng.standard_normal(q.shape))
        records.append(CellCycleRecord(
            str(cell_id), k, v, q,
            charge_time=10.0 + 25.0 * u + 0.05 * rng.standard_normal(),
            internal_resistance=0.016 + 0.012 * u + 1e-5 * rng.standard_normal(),
            avg_temperature=31.0 + 6.0 * u + 0.05 * rng.standard_normal(),
            discharge_capacity=float(q_k),
        ))
    return records


def write_raw_dataset(out_dir, cells: Sequence[str], batches: Sequence[int],
                      generator: GeneratorSpec | None = None, heterogeneity: float = 0.0,
                      seed: int = 0, extra_cycles: int = 5, max_cycles: int = 2000,
                      n_points: int = 100, q_nom: float = Q_NOM) -> dict:
    """Write cells in the on-disk raw schema; each life runs a few cycles past EOL."""
    spec = generator or GeneratorSpec("logistic", {"r": 0.034, "K": 0.5, "C": 0.01}, u0=0.02)
    rng = np.random.default_rng(seed)
    cycles = np.arange(1, max_cycles + 1, dtype=np.float64)
    index, truth = [], {}
    for cid, b in zip(cells, batches):
        params = _cell_params(spec, heterogeneity, rng)
        u = spec.curve(cycles, params)
        crossed = np.nonzero(u >= EOL_THRESHOLD)[0]
        n = int(crossed[0]) + 1 + extra_cycles if crossed.size else max_cycles
        write_cell(out_dir, cid, raw_records(cid, u[:n], rng, q_nom, n_points))
        index.append({"cell_id": cid, "batch": int(b), "policy": spec.name, "q_nom_Ah": q_nom})
        truth[cid] = {"params": params, "eol": int(crossed[0]) + 1 if crossed.size else None}
    write_cells_index(out_dir, index)
    return truth
