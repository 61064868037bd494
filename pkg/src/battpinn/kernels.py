"""Numeric inner loops with a numba path and a pure-numpy fallback.

The numba path is used when numba imports and ``BATTPINN_USE_NUMBA`` is not
set to ``0``.  Both implementations are always importable as
``kernels.NUMBA`` and ``kernels.NUMPY`` so tests and the benchmark can compare
them directly; the module-level names are bound to the selected one.
"""
from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("BATTPINN_USE_NUMBA", "1").lower() not in (
    "0",
    "false",
    "no",
    "off",
)

# rate-model codes understood by rk4_builtin
RATE_ZERO = 0
RATE_LOGISTIC = 1
RATE_EXP = 2
RATE_XU = 3


# ---------------------------------------------------------------------------
# loop implementations (compiled by numba, never called uncompiled in prod)
# ---------------------------------------------------------------------------


def _loop_trailing_mean(x, window):
    n = x.shape[0]
    out = np.empty(n)
    acc = 0.0
    for i in range(n):
        acc += x[i]
        if i >= window:
            acc -= x[i - window]
        out[i] = acc / min(i + 1, window)
    return out


def _loop_centered_mean(x, window):
    n = x.shape[0]
    half = window // 2
    out = np.empty(n)
    for i in range(n):
        h = min(half, i, n - 1 - i)
        s = 0.0
        for j in range(i - h, i + h + 1):
            s += x[j]
        out[i] = s / (2 * h + 1)
    return out


def _loop_gradient(y, x):
    n = y.shape[0]
    out = np.empty(n)
    if n == 2:
        d = (y[1] - y[0]) / (x[1] - x[0])
        out[0] = d
        out[1] = d
        return out
    for i in range(1, n - 1):
        h1 = x[i] - x[i - 1]
        h2 = x[i + 1] - x[i]
        out[i] = (h1 * h1 * y[i + 1] - h2 * h2 * y[i - 1] + (h2 * h2 - h1 * h1) * y[i]) / (
            h1 * h2 * (h1 + h2)
        )
    d1 = x[1] - x[0]
    d2 = x[2] - x[1]
    out[0] = (
        -(2.0 * d1 + d2) / (d1 * (d1 + d2)) * y[0]
        + (d1 + d2) / (d1 * d2) * y[1]
        - d1 / (d2 * (d1 + d2)) * y[2]
    )
    d1 = x[n - 2] - x[n - 3]
    d2 = x[n - 1] - x[n - 2]
    out[n - 1] = (
        d2 / (d1 * (d1 + d2)) * y[n - 3]
        - (d2 + d1) / (d1 * d2) * y[n - 2]
        + (2.0 * d2 + d1) / (d2 * (d1 + d2)) * y[n - 1]
    )
    return out


def _loop_quadratic_trend(q):
    # dQ_i = -omega * Q_i**2 + b, ordinary least squares on centered sums
    m = q.shape[0] - 1
    if m < 2:
        return np.nan, np.nan, np.nan
    mz = 0.0
    md = 0.0
    for i in range(m):
        mz += -q[i] * q[i]
        md += q[i + 1] - q[i]
    mz /= m
    md /= m
    szz = 0.0
    szd = 0.0
    for i in range(m):
        dz = -q[i] * q[i] - mz
        szz += dz * dz
        szd += dz * (q[i + 1] - q[i] - md)
    if szz == 0.0:
        return np.nan, np.nan, np.nan
    omega = szd / szz
    b = md - omega * mz
    ssr = 0.0
    for i in range(m):
        r = q[i + 1] - q[i] - (-omega * q[i] * q[i] + b)
        ssr += r * r
    dof = m - 2 if m > 2 else 1
    return omega, b, np.sqrt(ssr / dof)


def _rate_scalar(kind, params, u):
    if kind == 1:
        r = params[0]
        k = params[1]
        c = params[2]
        v = u - c
        return r * v * (1.0 - v / (k - c))
    if kind == 2:
        return params[0] * u
    if kind == 3:
        return params[0] * (1.0 - u)
    return 0.0


def _loop_sp_rates(times, theta):
    n = times.shape[0]
    out = np.empty(n)
    th1, th2, th3, th4, th5, th6 = theta[0], theta[1], theta[2], theta[3], theta[4], theta[5]
    expo = th3 / (2.0 - th3)
    for k in range(n):
        tk = times[k]
        acc = th1 * th5 * (1.0 + th2 * tk) ** expo + th4 / np.sqrt(tk)
        mem = 0.0
        for l in range(k):
            dt = tk - times[l]
            mem += (1.0 + th2 * dt) ** expo / np.sqrt(dt)
        out[k] = acc + th1 * th6 * mem
    return out


def _loop_adam(p, g, m, v, lr, beta1, beta2, eps, step):
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    for i in range(p.shape[0]):
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        p[i] -= lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + eps)


# ---------------------------------------------------------------------------
# numpy fallbacks
# ---------------------------------------------------------------------------


def _np_trailing_mean(x, window):
    c = np.cumsum(np.concatenate(([0.0], x)))
    idx = np.arange(1, x.shape[0] + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def _np_centered_mean(x, window):
    n = x.shape[0]
    i = np.arange(n)
    h = np.minimum(np.minimum(window // 2, i), n - 1 - i)
    c = np.cumsum(np.concatenate(([0.0], x)))
    return (c[i + h + 1] - c[i - h]) / (2 * h + 1)


def _np_gradient(y, x):
    if y.shape[0] == 2:
        d = (y[1] - y[0]) / (x[1] - x[0])
        return np.array([d, d])
    return np.gradient(y, x, edge_order=2)


def _np_quadratic_trend(q):
    if q.shape[0] < 3:
        return np.nan, np.nan, np.nan
    z = -q[:-1] ** 2
    d = np.diff(q)
    zc = z - z.mean()
    szz = zc @ zc
    if szz == 0.0:
        return np.nan, np.nan, np.nan
    omega = zc @ (d - d.mean()) / szz
    b = d.mean() - omega * z.mean()
    resid = d - (omega * z + b)
    dof = max(d.shape[0] - 2, 1)
    return float(omega), float(b), float(np.sqrt(resid @ resid / dof))


def _np_rk4_builtin(kind, params, u_start, step, n_steps):
    out = np.empty(n_steps + 1)
    u = float(u_start)
    out[0] = u
    for i in range(n_steps):
        k1 = _rate_scalar(kind, params, u)
        k2 = _rate_scalar(kind, params, u + 0.5 * step * k1)
        k3 = _rate_scalar(kind, params, u + 0.5 * step * k2)
        k4 = _rate_scalar(kind, params, u + step * k3)
        u = u + step / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[i + 1] = u
    return out


def _np_sp_rates(times, theta):
    th1, th2, th3, th4, th5, th6 = (float(v) for v in theta)
    expo = th3 / (2.0 - th3)
    out = th1 * th5 * (1.0 + th2 * times) ** expo + th4 / np.sqrt(times)
    for k in range(1, times.shape[0]):
        dt = times[k] - times[:k]
        out[k] += th1 * th6 * np.sum((1.0 + th2 * dt) ** expo / np.sqrt(dt))
    return out


def _np_adam(p, g, m, v, lr, beta1, beta2, eps, step):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    p -= lr * (m / (1.0 - beta1**step)) / (np.sqrt(v / (1.0 - beta2**step)) + eps)


NUMPY = SimpleNamespace(
    name="numpy",
    trailing_mean=_np_trailing_mean,
    centered_mean=_np_centered_mean,
    gradient=_np_gradient,
    quadratic_trend=_np_quadratic_trend,
    rk4_builtin=_np_rk4_builtin,
    sp_rates=_np_sp_rates,
    adam=_np_adam,
)

if HAVE_NUMBA:
    _jit = numba.njit(cache=True, nogil=True)
    _rate_scalar_nb = _jit(_rate_scalar)

    def _rk4_nb_src(kind, params, u_start, step, n_steps):
        out = np.empty(n_steps + 1)
        u = u_start
        out[0] = u
        for i in range(n_steps):
            k1 = _rate_scalar_nb(kind, params, u)
            k2 = _rate_scalar_nb(kind, params, u + 0.5 * step * k1)
            k3 = _rate_scalar_nb(kind, params, u + 0.5 * step * k2)
            k4 = _rate_scalar_nb(kind, params, u + step * k3)
            u = u + step / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            out[i + 1] = u
        return out

    _gradient_nb = _jit(_loop_gradient)
    _quadratic_nb = _jit(_loop_quadratic_trend)

    def _nb_quadratic_trend(q):
        omega, b, s = _quadratic_nb(q)
        return float(omega), float(b), float(s)

    NUMBA = SimpleNamespace(
        name="numba",
        trailing_mean=_jit(_loop_trailing_mean),
        centered_mean=_jit(_loop_centered_mean),
        gradient=_gradient_nb,
        quadratic_trend=_nb_quadratic_trend,
        rk4_builtin=_jit(_rk4_nb_src),
        sp_rates=numba.njit(cache=True, nogil=True, fastmath=True)(_loop_sp_rates),
        adam=_jit(_loop_adam),
    )
else:  # pragma: no cover
    NUMBA = None

ACTIVE = NUMBA if USE_NUMBA else NUMPY


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def trailing_mean(x, window: int) -> np.ndarray:
    """Causal moving average; the first ``window-1`` entries average what exists."""
    if window < 1:
        raise ValueError("window must be >= 1")
    x = _f64(x)
    if x.shape[0] == 0:
        return x.copy()
    return ACTIVE.trailing_mean(x, int(window))


def centered_mean(x, window: int) -> np.ndarray:
    """Centered moving average whose window shrinks symmetrically at the edges.

    Symmetric truncation keeps linear sequences exactly unchanged.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    x = _f64(x)
    if x.shape[0] == 0:
        return x.copy()
    return ACTIVE.centered_mean(x, int(window))


def gradient(y, x) -> np.ndarray:
    """dy/dx on a non-uniform grid, second order everywhere (needs >= 2 points)."""
    y = _f64(y)
    x = _f64(x)
    if y.shape != x.shape or y.ndim != 1 or y.shape[0] < 2:
        raise ValueError("gradient needs two equal-length 1-D arrays with >= 2 points")
    return ACTIVE.gradient(y, x)


def quadratic_trend(q) -> tuple[float, float, float]:
    """Fit ``Q[i+1] - Q[i] = -omega * Q[i]**2 + b``; returns (omega, b, residual std).

    NaNs are returned when the regressor is degenerate.
    """
    return ACTIVE.quadratic_trend(_f64(q))


def rk4_builtin(kind: int, params, u_start: float, step: float, n_steps: int) -> np.ndarray:
    return ACTIVE.rk4_builtin(int(kind), _f64(params), float(u_start), float(step), int(n_steps))


def sp_rates(times, theta) -> np.ndarray:
    return ACTIVE.sp_rates(_f64(times), _f64(theta))


def adam_update(p, g, m, v, lr, beta1, beta2, eps, step) -> None:
    """In-place Adam update of ``p`` with bias-corrected moments ``m`` and ``v``.

    All four arrays must be C-contiguous float64 of one shape; they are viewed
    flat so the update lands in the caller's buffers.
    """
    ACTIVE.adam(p.reshape(-1), _f64(g).reshape(-1), m.reshape(-1), v.reshape(-1), float(lr), float(beta1), float(beta2), float(eps), int(step))
