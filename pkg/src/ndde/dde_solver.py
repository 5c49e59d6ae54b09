"""Fixed-step RK4 integration for ODEs and constant-delay DDEs.

A delayed solve with n segments integrates the n*d dimensional stacked system
over one local window [0, tau]: layer k's delayed argument is layer k-1's
current stage value and layer 1 reads the initial function at exact stage
times.  The layers are lower triangular in each other, so they are advanced
sequentially, each consuming the per-step stage record of the one below.
Horizons are integer multiples of tau by construction.

Dense output is cubic Hermite on stored (state, derivative) grid pairs; grid
points return the stored states unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DimensionError,
    DivergenceError,
    DomainError,
    InputError,
    StateError,
)
from .numerics import check_finite


@dataclass
class SolverConfig:
    """Fixed-step solver settings.  steps_per_segment is per delay window."""

    steps_per_segment: int = 100
    method: str = "rk4"

    def __post_init__(self):
        if self.steps_per_segment < 1:
            raise InputError("steps_per_segment must be >= 1")
        if self.method != "rk4":
            raise InputError("unsupported method %r" % self.method)


def segment_times(seg_len, m):
    """Node times 0 = s_0 < ... < s_m = seg_len with s_j = seg_len * j / m.

    Endpoints are exact in floating point; interior spacing differs from
    seg_len/m by at most one ulp and the steps telescope to seg_len exactly.
    """
    j = np.arange(m + 1, dtype=np.float64)
    return seg_len * (j / m)


# ---------------------------------------------------------------------------
# histories


class ConstantHistory:
    """Initial function frozen at a single state value."""

    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64)
        check_finite(self.value, "history value")

    def eval(self, t):
        return self.value

    def deriv(self, t):
        return np.zeros_like(self.value)

    def coverage(self):
        return -np.inf, np.inf


class SplineHistory:
    """Initial function given by a natural cubic spline through samples.

    The knots must straddle the delay interval of any solve that uses this
    history: first knot at or before -tau, last knot at or after 0.
    """

    def __init__(self, spline):
        self.spline = spline

    def eval(self, t):
        return self.spline.eval(t)

    def deriv(self, t):
        return self.spline.derivative(t)

    def coverage(self):
        return self.spline.t_min, self.spline.t_max


class ShiftedHistory:
    """A history displaced by a constant offset; slopes are untouched.

    This is the perturbation that the initial-function sensitivity measures,
    so finite differences built on it are the oracle for grad_h0.
    """

    def __init__(self, base, offset):
        self.base = base
        self.offset = np.asarray(offset, dtype=np.float64)

    def eval(self, t):
        return self.base.eval(t) + self.offset

    def deriv(self, t):
        return self.base.deriv(t)

    def coverage(self):
        return self.base.coverage()


class OdeHistory:
    """Initial function produced by integrating an undelayed field on [-tau, 0]."""

    def __init__(self, traj):
        if traj.n_segments != 1:
            raise InputError("history trajectory must be a single window")
        self.traj = traj

    def eval(self, t):
        return dense_eval(self.traj, t)

    def deriv(self, t):
        return dense_deriv(self.traj, t)

    def coverage(self):
        return self.traj.t0, self.traj.t_end


def make_ode_history(field, params, base_state, tau, steps=100):
    """Integrate field from base_state over [-tau, 0] and wrap as a history."""
    if not tau > 0:
        raise InputError("tau must be positive")
    traj = integrate_node(field, params, base_state, -float(tau), 0.0, steps)
    return OdeHistory(traj)


_SLACK = 1e-9


def eval_history(history, t, tau=None):
    """Initial-function value at time t, with optional domain enforcement.

    When tau is given, t must lie in [-tau, 0] up to roundoff slack.  The
    history's own coverage (spline knots, generated window) is enforced
    regardless.
    """
    if tau is not None:
        slack = _SLACK * max(1.0, abs(tau))
        if t < -tau - slack or t > slack:
            raise DomainError("history queried at t=%r outside [-%r, 0]" % (t, tau))
    lo, hi = history.coverage()
    slack = _SLACK * max(1.0, abs(lo) if np.isfinite(lo) else 1.0)
    if t < lo - slack or t > hi + slack:
        raise DomainError("history queried at t=%r outside coverage [%r, %r]" % (t, lo, hi))
    return history.eval(t)


def history_deriv(history, t):
    """Time derivative of the initial function at t (analytic per variant)."""
    lo, hi = history.coverage()
    slack = _SLACK * max(1.0, abs(lo) if np.isfinite(lo) else 1.0)
    if t < lo - slack or t > hi + slack:
        raise DomainError("history derivative queried at t=%r outside coverage" % t)
    return history.deriv(t)


# ---------------------------------------------------------------------------
# natural cubic spline


class NaturalCubicSpline:
    """Interpolating cubic with zero second derivative at both ends.

    Vector valued: values has shape (k, d).  Evaluation and the analytic
    first derivative use the classical second-derivative form.
    """

    def __init__(self, times, values, second_derivs):
        self.times = times
        self.values = values
        self.second_derivs = second_derivs

    @property
    def t_min(self):
        return float(self.times[0])

    @property
    def t_max(self):
        return float(self.times[-1])

    def _locate(self, t):
        times = self.times
        slack = _SLACK * max(1.0, abs(self.t_min), abs(self.t_max))
        if t < times[0] - slack or t > times[-1] + slack:
            raise DomainError("spline queried at t=%r outside [%r, %r]" % (t, self.t_min, self.t_max))
        p = int(np.searchsorted(times, t, side="right")) - 1
        return min(max(p, 0), len(times) - 2)

    def eval(self, t):
        p = self._locate(t)
        ts, ys, m2 = self.times, self.values, self.second_derivs
        h = ts[p + 1] - ts[p]
        a = (ts[p + 1] - t) / h
        b = (t - ts[p]) / h
        return (a * ys[p] + b * ys[p + 1]
                + ((a ** 3 - a) * m2[p] + (b ** 3 - b) * m2[p + 1]) * h * h / 6.0)

    def derivative(self, t):
        p = self._locate(t)
        ts, ys, m2 = self.times, self.values, self.second_derivs
        h = ts[p + 1] - ts[p]
        a = (ts[p + 1] - t) / h
        b = (t - ts[p]) / h
        return ((ys[p + 1] - ys[p]) / h
                - (3.0 * a * a - 1.0) / 6.0 * h * m2[p]
                + (3.0 * b * b - 1.0) / 6.0 * h * m2[p + 1])


def fit_natural_cubic_spline(times, values):
    """Fit a natural cubic spline through (times, values) samples.

    times must be strictly increasing with at least three samples; values may
    be (k,), (k, d), or any (k, ...) stack of independent channels (e.g. a
    batch of histories sharing one knot grid).
    """
    t = np.asarray(times, dtype=np.float64)
    y = np.asarray(values, dtype=np.float64)
    if t.ndim != 1 or len(t) < 3:
        raise InputError("need at least three strictly increasing sample times")
    if np.any(np.diff(t) <= 0):
        raise InputError("sample times must be strictly increasing")
    tail = y.shape[1:]
    if y.ndim == 1:
        y = y[:, None]
    elif y.ndim > 2:
        y = y.reshape(y.shape[0], -1)
    if y.shape[0] != t.shape[0]:
        raise DimensionError("values rows %d != times length %d" % (y.shape[0], t.shape[0]))
    check_finite(t, "spline times")
    check_finite(y, "spline values")

    k = len(t)
    h = np.diff(t)
    m2 = np.zeros_like(y)
    if k > 2:
        # tridiagonal system for interior second derivatives, natural ends zero
        lower = h[:-1] / 6.0
        diag = (h[:-1] + h[1:]) / 3.0
        upper = h[1:] / 6.0
        rhs = (y[2:] - y[1:-1]) / h[1:, None] - (y[1:-1] - y[:-2]) / h[:-1, None]
        n_int = k - 2
        cp = np.zeros(n_int)
        dp = np.zeros((n_int, y.shape[1]))
        beta = diag[0]
        cp[0] = upper[0] / beta
        dp[0] = rhs[0] / beta
        for i in range(1, n_int):
            beta = diag[i] - lower[i] * cp[i - 1]
            cp[i] = upper[i] / beta
            dp[i] = (rhs[i] - lower[i] * dp[i - 1]) / beta
        sol = np.zeros((n_int, y.shape[1]))
        sol[-1] = dp[-1]
        for i in range(n_int - 2, -1, -1):
            sol[i] = dp[i] - cp[i] * sol[i + 1]
        m2[1:-1] = sol
    if len(tail) > 1:
        y = y.reshape((k,) + tail)
        m2 = m2.reshape((k,) + tail)
    return NaturalCubicSpline(t, y, m2)


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    """Dense fixed-grid solver output.

    seg_states[k, j] is the state at seg_times[k, j] (global time); boundary
    states are duplicated so seg_states[k, -1] equals seg_states[k+1, 0]
    exactly.  seg_derivs holds the vector field at each node; the terminal
    node of the final segment stores the last RK4 stage slope, which agrees
    with the field value to the method's order.  checkpoints are the n+1
    window boundary states.
    """

    tau: object          # float for delayed solves, None for plain ODE runs
    t0: float
    seg_len: float
    n_segments: int
    steps: int
    seg_times: np.ndarray
    seg_states: np.ndarray
    seg_derivs: np.ndarray
    checkpoints: np.ndarray
    nfe: int

    @property
    def t_end(self):
        return float(self.seg_times[-1, -1])

    @property
    def state_shape(self):
        return self.seg_states.shape[2:]

    @property
    def dim(self):
        return self.seg_states.shape[-1]

    def grid_times(self):
        """All distinct node times in increasing order."""
        parts = [self.seg_times[0]]
        for k in range(1, self.n_segments):
            parts.append(self.seg_times[k][1:])
        return np.concatenate(parts)

    def grid_states(self):
        parts = [self.seg_states[0]]
        for k in range(1, self.n_segments):
            parts.append(self.seg_states[k][1:])
        return np.concatenate(parts)


def _hermite_value(y0, d0, y1, d1, h, theta):
    t2 = theta * theta
    t3 = t2 * theta
    return ((2.0 * t3 - 3.0 * t2 + 1.0) * y0
            + (t3 - 2.0 * t2 + theta) * h * d0
            + (-2.0 * t3 + 3.0 * t2) * y1
            + (t3 - t2) * h * d1)


def _hermite_slope(y0, d0, y1, d1, h, theta):
    t2 = theta * theta
    return ((6.0 * t2 - 6.0 * theta) * y0 / h
            + (3.0 * t2 - 4.0 * theta + 1.0) * d0
            + (-6.0 * t2 + 6.0 * theta) * y1 / h
            + (3.0 * t2 - 2.0 * theta) * d1)


def _locate(traj, t):
    slack = _SLACK * max(1.0, abs(traj.seg_len))
    if t < traj.t0 - slack or t > traj.t_end + slack:
        raise DomainError("time %r outside trajectory span [%r, %r]" % (t, traj.t0, traj.t_end))
    k = int((t - traj.t0) // traj.seg_len) if traj.seg_len > 0 else 0
    k = min(max(k, 0), traj.n_segments - 1)
    times = traj.seg_times[k]
    # guard against roundoff putting t just below the segment start
    if t < times[0] and k > 0:
        k -= 1
        times = traj.seg_times[k]
    p = int(np.searchsorted(times, t, side="right")) - 1
    p = min(max(p, 0), traj.steps - 1)
    return k, p


def _dense_eval_one(traj, t):
    k, p = _locate(traj, t)
    times = traj.seg_times[k]
    if t == times[p]:
        return traj.seg_states[k, p].copy()
    if t == times[p + 1]:
        return traj.seg_states[k, p + 1].copy()
    h = times[p + 1] - times[p]
    theta = (t - times[p]) / h
    return _hermite_value(traj.seg_states[k, p], traj.seg_derivs[k, p],
                          traj.seg_states[k, p + 1], traj.seg_derivs[k, p + 1],
                          h, theta)


def _dense_deriv_one(traj, t):
    k, p = _locate(traj, t)
    times = traj.seg_times[k]
    if t == times[p]:
        return traj.seg_derivs[k, p].copy()
    if t == times[p + 1]:
        return traj.seg_derivs[k, p + 1].copy()
    h = times[p + 1] - times[p]
    theta = (t - times[p]) / h
    return _hermite_slope(traj.seg_states[k, p], traj.seg_derivs[k, p],
                          traj.seg_states[k, p + 1], traj.seg_derivs[k, p + 1],
                          h, theta)


def dense_eval(traj, t):
    """State at time t; an array of times returns stacked states.

    Grid times return the stored node state bitwise.
    """
    if np.ndim(t) == 0:
        return _dense_eval_one(traj, float(t))
    return np.stack([_dense_eval_one(traj, float(ti)) for ti in np.asarray(t)])


def dense_deriv(traj, t):
    """Time derivative of the interpolant; stored slope at grid times."""
    if np.ndim(t) == 0:
        return _dense_deriv_one(traj, float(t))
    return np.stack([_dense_deriv_one(traj, float(ti)) for ti in np.asarray(t)])


# ---------------------------------------------------------------------------
# core stepping


class _HistoryFeed:
    """Delayed argument for the first layer: the initial function itself."""

    def __init__(self, history, tau):
        self.history = history
        self.tau = tau

    def stage(self, j, q, t_local, y_stage):
        return eval_history(self.history, t_local - self.tau, self.tau)


class _RecordFeed:
    """Delayed argument from the layer below: its recorded stage values."""

    def __init__(self, record):
        self.record = record

    def stage(self, j, q, t_local, y_stage):
        return self.record[j][q]


class _SelfFeed:
    """Undelayed runs: hand the current stage state to the unused slot."""

    def stage(self, j, q, t_local, y_stage):
        return y_stage


def _integrate_segment(field, params, y0, times, t_offset, feed):
    """March one segment with classical RK4.

    Returns (states, k1s, record, last_k4, nfe): states at every node, the
    field value at nodes 0..m-1, the per-step stage values consumed by the
    next layer up, and the final step's last stage slope.
    """
    m = len(times) - 1
    states = np.empty((m + 1,) + np.shape(y0))
    k1s = np.empty((m,) + np.shape(y0))
    record = []
    y = np.array(y0, dtype=np.float64, copy=True)
    states[0] = y
    nfe = 0
    last_k4 = None
    for j in range(m):
        s = times[j]
        h = times[j + 1] - times[j]
        mid = s + 0.5 * h

        k1 = field.eval(y, feed.stage(j, 0, s, y), t_offset + s, params)
        y2 = y + (0.5 * h) * k1
        k2 = field.eval(y2, feed.stage(j, 1, mid, y2), t_offset + mid, params)
        y3 = y + (0.5 * h) * k2
        k3 = field.eval(y3, feed.stage(j, 2, mid, y3), t_offset + mid, params)
        y4 = y + h * k3
        k4 = field.eval(y4, feed.stage(j, 3, times[j + 1], y4), t_offset + times[j + 1], params)
        nfe += 4

        k1s[j] = k1
        record.append((y, y2, y3, y4))
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(y)):
            raise DivergenceError(t_offset + times[j + 1])
        states[j + 1] = y
        last_k4 = k4
    return states, k1s, record, last_k4, nfe


def integrate_node(field, params, h0, t0, t1, steps):
    """Integrate an undelayed field from h0 over [t0, t1] with RK4."""
    if not t1 > t0:
        raise DomainError("need t1 > t0")
    if steps < 1:
        raise InputError("steps must be >= 1")
    h0 = np.asarray(h0, dtype=np.float64)
    check_finite(h0, "initial state")
    seg_len = t1 - t0
    times = segment_times(seg_len, steps)
    states, k1s, _, last_k4, nfe = _integrate_segment(
        field, params, h0, times, t0, _SelfFeed())
    derivs = np.empty_like(states)
    derivs[:-1] = k1s
    derivs[-1] = last_k4
    checkpoints = np.stack([states[0], states[-1]])
    return Trajectory(tau=None, t0=float(t0), seg_len=float(seg_len),
                      n_segments=1, steps=steps,
                      seg_times=(t0 + times)[None, :],
                      seg_states=states[None, ...],
                      seg_derivs=derivs[None, ...],
                      checkpoints=checkpoints, nfe=nfe)


def integrate_ndde(field, params, history, tau, n_segments, config=None):
    """Integrate a constant-delay field over [0, n_segments * tau].

    history supplies the state on [-tau, 0]; the delayed argument of segment
    k reads segment k-1's stage values at matching local times, so the whole
    run is one RK4 pass over the stacked system.
    """
    if config is None:
        config = SolverConfig()
    if not tau > 0:
        raise InputError("tau must be positive")
    if n_segments < 1:
        raise InputError("n_segments must be >= 1")
    m = config.steps_per_segment
    lo, hi = history.coverage()
    if lo > -tau + _SLACK * max(1.0, tau) or hi < -_SLACK:
        raise DomainError("history coverage [%r, %r] does not span [-%r, 0]" % (lo, hi, tau))

    times = segment_times(float(tau), m)
    y0 = np.asarray(eval_history(history, 0.0, tau), dtype=np.float64)
    check_finite(y0, "history at 0")

    seg_states = np.empty((n_segments, m + 1) + y0.shape)
    seg_derivs = np.empty_like(seg_states)
    seg_times = np.empty((n_segments, m + 1))
    checkpoints = np.empty((n_segments + 1,) + y0.shape)
    checkpoints[0] = y0

    nfe = 0
    feed = _HistoryFeed(history, float(tau))
    y = y0
    for k in range(n_segments):
        states, k1s, record, last_k4, seg_nfe = _integrate_segment(
            field, params, y, times, k * float(tau), feed)
        nfe += seg_nfe
        seg_states[k] = states
        seg_derivs[k, :-1] = k1s
        seg_derivs[k, -1] = last_k4     # replaced below unless final segment
        seg_times[k] = k * float(tau) + times
        if k > 0:
            # slope is continuous across interior boundaries: reuse k1
            seg_derivs[k - 1, -1] = k1s[0]
        y = states[-1]
        checkpoints[k + 1] = y
        feed = _RecordFeed(record)
    return Trajectory(tau=float(tau), t0=0.0, seg_len=float(tau),
                      n_segments=n_segments, steps=m,
                      seg_times=seg_times, seg_states=seg_states,
                      seg_derivs=seg_derivs, checkpoints=checkpoints, nfe=nfe)


# ---------------------------------------------------------------------------
# series files


def write_series_csv(path, times, values, decimate=1):
    """Write a time series as CSV with header t,x1,...,xd.

    Values are printed with 17 significant digits; decimate keeps every
    decimate-th row (the first row always survives).
    """
    if decimate < 1:
        raise InputError("decimate must be >= 1")
    t = np.asarray(times, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 1:
        v = v[:, None]
    if t.ndim != 1 or v.shape[0] != t.shape[0]:
        raise DimensionError("times and values lengths differ")
    d = v.shape[1]
    lines = ["t," + ",".join("x%d" % (i + 1) for i in range(d))]
    for i in range(0, len(t), decimate):
        lines.append(",".join("%.17g" % x for x in [t[i], *v[i]]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_series_csv(path):
    """Read a CSV written by write_series_csv; returns (times, values)."""
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith("t,"):
        raise InputError("missing t,x1,... header")
    d = len(lines[0].split(",")) - 1
    times, values = [], []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != d + 1:
            raise InputError("row width mismatch in %r" % ln)
        times.append(float(parts[0]))
        values.append([float(x) for x in parts[1:]])
    return np.array(times), np.array(values)


def trajectory_series(traj, decimate=1):
    """(times, values) over the full grid with boundary rows deduplicated."""
    if decimate < 1:
        raise InputError("decimate must be >= 1")
    times = traj.grid_times()[::decimate]
    states = traj.grid_states()[::decimate]
    return times, states
