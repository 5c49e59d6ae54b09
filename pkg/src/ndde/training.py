"""Optimization loops for delayed and undelayed flows.

Four regimes: trajectory regression, classification through a linear
readout on the terminal state, identification of the constants of an
analytic field, and model-free delay inference with a neural field.
All gradients come from the checkpointed backward pass; the optimizer
is a from-scratch Adam (or plain gradient descent).
"""

import time
from dataclasses import dataclass, field as dataclass_field, replace

import numpy as np

from .adjoint import adjoint_backward, observe_trajectory
from .dde_solver import (
    ConstantHistory,
    SolverConfig,
    SplineHistory,
    dense_deriv,
    fit_natural_cubic_spline,
    integrate_ndde,
)
from .errors import ConfigError, DivergenceError, DomainError, InputError, NumericalError
from .models import NeuralDelayField
from .numerics import MlpParams, init_mlp, mlp_forward, mlp_vjp


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class AdamState:
    """First/second moment buffers and the step counter."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0


def adam_init(n):
    return AdamState(np.zeros(n), np.zeros(n), 0)


def adam_step(x, g, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected moment update; returns (new_x, new_state).

    A zero gradient from fresh state leaves x bitwise unchanged, so a model
    sitting at an exact data fit stays put.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if x.shape != g.shape:
        raise InputError("parameter/gradient shape mismatch %r vs %r" % (x.shape, g.shape))
    t = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    return x - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, t)


def sgd_step(x, g, lr):
    return np.asarray(x, dtype=np.float64) - lr * np.asarray(g, dtype=np.float64)


class _Group:
    """One optimizer parameter group: a flat vector with its own rate."""

    def __init__(self, x, lr, cfg):
        self.x = np.asarray(x, dtype=np.float64).copy()
        self.lr = float(lr)
        self.kind = cfg.optimizer
        self.beta1, self.beta2 = cfg.betas
        self.eps = cfg.eps
        self.state = adam_init(self.x.size) if self.kind == "adam" else None

    def step(self, g):
        if self.kind == "adam":
            self.x, self.state = adam_step(self.x, g, self.state, self.lr,
                                           self.beta1, self.beta2, self.eps)
        else:
            self.x = sgd_step(self.x, g, self.lr)

    def snapshot(self):
        st = None
        if self.state is not None:
            st = AdamState(self.state.m.copy(), self.state.v.copy(), self.state.step)
        return (self.x.copy(), self.lr, st)

    def restore(self, snap):
        self.x, self.lr, st = snap[0].copy(), snap[1], snap[2]
        if st is not None:
            self.state = AdamState(st.m.copy(), st.v.copy(), st.step)


# ---------------------------------------------------------------------------
# losses


def mse_parts(pred, target):
    """Mean squared error over every element, with its cotangent."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise InputError("prediction shape %r != target shape %r" % (pred.shape, target.shape))
    r = pred - target
    n = r.size
    return float(np.sum(r * r) / n), 2.0 * r / n


def _expit(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def logistic_parts(scores, labels):
    """Mean logistic loss for +-1 labels, with d(loss)/d(scores)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.shape != labels.shape:
        raise InputError("score/label shape mismatch")
    if not np.all(np.abs(labels) == 1.0):
        raise InputError("labels must be +1 or -1")
    z = -labels * scores
    loss = float(np.mean(np.logaddexp(0.0, z)))
    return loss, -labels * _expit(z) / scores.size


def accuracy(scores, labels):
    pred = np.where(np.asarray(scores) >= 0.0, 1.0, -1.0)
    return float(np.mean(pred == np.asarray(labels)))


# ---------------------------------------------------------------------------
# configuration and record


@dataclass
class TrainConfig:
    """Optimizer settings and trainability switches."""

    optimizer: str = "adam"
    lr: float = 1e-3
    lr_tau: float = None          # falls back to lr
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 100
    batch_size: int = None        # classifier minibatching; None = full batch
    seed: int = 0
    train_params: bool = True
    train_tau: bool = False
    tau_min: float = None
    tau_max: float = None
    max_retries: int = 5

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("optimizer must be adam or sgd, got %r" % self.optimizer)
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if self.lr_tau is not None and not self.lr_tau > 0:
            raise ConfigError("delay learning rate must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")


@dataclass
class TrainRecord:
    """Per-epoch curves plus the final and best-loss iterates.

    losses[e] is the loss at the parameters entering epoch e, +Inf for an
    epoch whose solve failed.  nfe counts forward vector-field evaluations
    (4 stages x steps x segments per completed solve); backward-pass
    recomputation is excluded.
    """

    losses: list = dataclass_field(default_factory=list)
    test_losses: list = dataclass_field(default_factory=list)
    taus: list = dataclass_field(default_factory=list)
    nfes: list = dataclass_field(default_factory=list)
    tracked: dict = dataclass_field(default_factory=dict)
    warnings: list = dataclass_field(default_factory=list)
    diverged_epochs: list = dataclass_field(default_factory=list)
    retries_used: int = 0
    nfe: int = 0
    wall_time: float = 0.0
    final_params: object = None
    final_tau: float = None
    final_readout: object = None
    best_epoch: int = -1
    best_loss: float = np.inf
    best_params: object = None
    best_tau: float = None
    scan: list = None

    def track(self, name, value):
        self.tracked.setdefault(name, []).append(float(value))


def _concat_records(a, b):
    """Stitch two training phases into one record (curves concatenate)."""
    out = TrainRecord()
    out.losses = a.losses + b.losses
    out.test_losses = a.test_losses + b.test_losses
    out.taus = a.taus + b.taus
    out.nfes = a.nfes + [a.nfe + x for x in b.nfes]
    for name in set(a.tracked) | set(b.tracked):
        out.tracked[name] = a.tracked.get(name, []) + b.tracked.get(name, [])
    out.warnings = a.warnings + b.warnings
    off = len(a.losses)
    out.diverged_epochs = a.diverged_epochs + [e + off for e in b.diverged_epochs]
    out.retries_used = a.retries_used + b.retries_used
    out.nfe = a.nfe + b.nfe
    out.wall_time = a.wall_time + b.wall_time
    out.final_params = b.final_params
    out.final_tau = b.final_tau
    out.final_readout = b.final_readout
    pick = a if a.best_loss <= b.best_loss else b
    out.best_loss = pick.best_loss
    out.best_epoch = pick.best_epoch + (off if pick is b else 0)
    out.best_params = pick.best_params
    out.best_tau = pick.best_tau
    return out


_SOLVE_FAILURES = (DivergenceError, DomainError, NumericalError, FloatingPointError)


# ---------------------------------------------------------------------------
# observation plumbing


class Observations:
    """What the loss compares against, in one of two time conventions.

    mode "times": fixed physical times with fixed targets; each time snaps
    to its nearest grid node.  The right choice when the delay is frozen
    (pick sample times on the grid and the snap is exact).

    mode "grid": fixed node indices whose physical times move with the
    delay; targets are re-read from a data interpolant each epoch.  The
    right choice when the delay trains: the data fit stays exact at the
    generating parameters for every candidate delay, where fixed-time
    snapping would bias the optimum by O(grid spacing).
    """

    def __init__(self, mode, times=None, targets=None, nodes=None, target_fn=None):
        if mode not in ("times", "grid"):
            raise InputError("observation mode must be times or grid")
        self.mode = mode
        if mode == "times":
            self.times = np.asarray(times, dtype=np.float64)
            self.targets = np.asarray(targets, dtype=np.float64)
            if self.times.ndim != 1 or len(self.times) == 0:
                raise InputError("need a nonempty 1-D array of observation times")
            if np.any(self.times <= 0):
                raise InputError("observation times must be positive")
        else:
            self.nodes = np.asarray(nodes, dtype=np.int64)
            if self.nodes.ndim != 1 or len(self.nodes) == 0:
                raise InputError("need a nonempty 1-D array of node indices")
            if np.any(self.nodes < 1):
                raise InputError("node indices start at 1")
            if target_fn is None:
                raise InputError("grid observations need a target function")
            self.target_fn = target_fn
            self.target_deriv = getattr(target_fn, "deriv", None)

    def realize(self, tau, n_segments, steps):
        """Observation times and targets for the current delay."""
        if self.mode == "times":
            return self.times, self.targets
        if np.any(self.nodes > n_segments * steps):
            raise InputError("node index beyond the solve grid")
        t = self.nodes * (tau / steps)
        return t, self.target_fn(t)


def series_interpolant(times, values):
    """Natural-spline read of a sampled series, vectorized over query times.

    The returned callable also carries .deriv for the series slope, which
    the moving-grid delay gradient needs.
    """
    spline = fit_natural_cubic_spline(times, values)

    def at(ts):
        return np.stack([spline.eval(float(t)) for t in np.atleast_1d(ts)])

    at.deriv = lambda ts: np.stack([spline.derivative(float(t))
                                    for t in np.atleast_1d(ts)])
    at.t_min, at.t_max = spline.t_min, spline.t_max
    return at


def history_from_series(times, values, mode, tau):
    """Initial function built from the pre-zero part of a series."""
    times = np.asarray(times, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    pre = times <= 0.0
    if not np.any(pre):
        raise InputError("series has no sample at or before t=0 to seed the history")
    if mode == "constant":
        i = np.argmax(times[pre])
        return ConstantHistory(values[pre][i])
    knots = times[pre]
    if len(knots) < 3:
        raise InputError("spline history needs at least three pre-zero samples")
    if knots[0] > -tau + 1e-12:
        raise InputError("pre-zero samples do not reach back to -tau")
    return SplineHistory(fit_natural_cubic_spline(knots, values[pre]))


# ---------------------------------------------------------------------------
# the shared fit loop


def _project_tau(tau, lo, hi, epoch, record):
    if lo is not None and tau < lo:
        record.warnings.append("epoch %d: delay projected up to %g" % (epoch, lo))
        return lo
    if hi is not None and tau > hi:
        record.warnings.append("epoch %d: delay projected down to %g" % (epoch, hi))
        return hi
    return tau


def _fit_trajectory(field, params0, tau0, history, n_segments, steps, obs, cfg,
                    test_obs=None, track_names=None, true_values=None,
                    train_tau=None, tau_cap=None):
    """Gradient-descent fit of (params, delay) to trajectory observations.

    Returns a TrainRecord.  Loss is recorded before each step; a failed
    solve records +Inf, rolls back to the last good iterate, halves every
    learning rate, and retries, up to cfg.max_retries failures in total.
    train_tau and tau_cap override the config without mutating it.
    """
    start = time.perf_counter()
    record = TrainRecord()
    config = SolverConfig(steps_per_segment=steps)
    flat0 = field.pack(params0)
    tau_trains = cfg.train_tau if train_tau is None else train_tau

    groups = {}
    if cfg.train_params:
        groups["w"] = _Group(flat0, cfg.lr, cfg)
    if tau_trains:
        groups["tau"] = _Group([tau0], cfg.lr_tau if cfg.lr_tau is not None else cfg.lr, cfg)

    flat = flat0.copy()
    tau = float(tau0)
    tau_lo, tau_hi = cfg.tau_min, cfg.tau_max
    if tau_hi is None:
        tau_hi = tau_cap
    if tau_trains:
        # the initial function must span [-tau, 0] for every candidate delay
        reach = -history.coverage()[0]
        if np.isfinite(reach):
            tau_hi = reach if tau_hi is None else min(tau_hi, reach)
    if obs.mode == "times":
        # the horizon must reach the last observation for every candidate delay
        need = float(np.max(obs.times)) / n_segments
        tau_lo = need if tau_lo is None else max(tau_lo, need)
    if tau_lo is not None and tau_hi is not None and tau_lo > tau_hi:
        raise ConfigError("delay floor %g exceeds ceiling %g" % (tau_lo, tau_hi))
    tau = _project_tau(tau, tau_lo, tau_hi, -1, record)

    snapshot = None
    epoch = 0
    while epoch < cfg.epochs:
        try:
            params = field.unpack(flat)
            traj = integrate_ndde(field, params, history, tau, n_segments, config)
            record.nfe += traj.nfe
            t_obs, targets = obs.realize(tau, n_segments, steps)
            snapped, states = observe_trajectory(traj, t_obs)
            loss, cots = mse_parts(states, targets)
            bundle = adjoint_backward(field, params, history, traj,
                                      list(zip(snapped, cots)))
            grad_tau = bundle.grad_tau
            if tau_trains and obs.mode == "grid" and obs.target_deriv is not None:
                # moving-grid correction: the observation times ride the
                # delay, so both the prediction and the target slide along
                # their slopes as tau changes
                xdot = np.stack([dense_deriv(traj, float(tt)) for tt in t_obs])
                ydot = obs.target_deriv(t_obs)
                w = (obs.nodes / steps).reshape((-1,) + (1,) * (cots.ndim - 1))
                grad_tau += float(np.sum(cots * (xdot - ydot) * w))
        except _SOLVE_FAILURES:
            record.losses.append(np.inf)
            if test_obs is not None:
                record.test_losses.append(np.inf)
            record.taus.append(tau)
            record.nfes.append(record.nfe)
            record.diverged_epochs.append(epoch)
            record.retries_used += 1
            if record.retries_used > cfg.max_retries:
                raise DivergenceError(
                    "training diverged at epoch %d after %d retries"
                    % (epoch, cfg.max_retries))
            if snapshot is not None:
                flat, tau = snapshot[0].copy(), snapshot[1]
                for name, snap in snapshot[2].items():
                    groups[name].restore(snap)
            for g in groups.values():
                g.lr *= 0.5
            epoch += 1
            continue

        snapshot = (flat.copy(), tau, {k: g.snapshot() for k, g in groups.items()})
        record.losses.append(loss)
        if test_obs is not None:
            tt, ty = test_obs.realize(tau, n_segments, steps)
            _, ts_states = observe_trajectory(traj, tt)
            record.test_losses.append(mse_parts(ts_states, ty)[0])
        record.taus.append(tau)
        record.nfes.append(record.nfe)
        if track_names:
            for i, name in enumerate(track_names):
                record.track(name, flat[i])
                if true_values is not None:
                    record.track(name + "_norm", flat[i] / true_values[i])
        if loss < record.best_loss:
            record.best_loss = loss
            record.best_epoch = epoch
            record.best_params = flat.copy()
            record.best_tau = tau

        if cfg.train_params:
            groups["w"].step(field.pack(bundle.grad_params))
            flat = groups["w"].x
        if tau_trains:
            groups["tau"].step(np.array([grad_tau]))
            tau = _project_tau(float(groups["tau"].x[0]), tau_lo, tau_hi, epoch, record)
            groups["tau"].x = np.array([tau])
        epoch += 1

    record.final_params = field.unpack(flat)
    record.final_tau = tau
    if record.best_params is not None:
        record.best_params = field.unpack(record.best_params)
    record.wall_time = time.perf_counter() - start
    return record


# ---------------------------------------------------------------------------
# public training regimes


def _series_arrays(series):
    times, values = series
    times = np.asarray(times, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    if len(times) != len(values):
        raise InputError("series times and values disagree in length")
    return times, values


def train_regression(model, series, cfg, *, test_series=None, init_params=None,
                     history=None, rng=None):
    """Fit a ModelSpec to a sampled trajectory.

    series is (times, values); samples at t <= 0 seed the initial function,
    samples at t > 0 are fitted.  The delay stays at model.tau unless
    cfg.train_tau is set, in which case observations switch to the moving
    grid convention automatically.
    """
    times, values = _series_arrays(series)
    field = model.build_field()
    if init_params is not None:
        params0 = init_params
    elif isinstance(model.kind, str) and model.kind.startswith("neural"):
        if rng is None:
            rng = np.random.default_rng(cfg.seed)
        params0 = init_mlp(field.widths, rng)
    elif hasattr(field, "reference_params"):
        params0 = field.reference_params()
    else:
        raise InputError("analytic model %r needs init_params" % model.kind)
    if history is None:
        history = history_from_series(times, values, model.history, model.tau)

    pos = times > 0.0
    if not np.any(pos):
        raise InputError("series has no samples after t=0 to fit")
    if cfg.train_tau:
        interp = series_interpolant(times, values)
        m = model.steps_per_segment
        nodes = np.unique(np.clip(np.round(
            times[pos] / (model.tau / m)), 1, model.n_segments * m).astype(np.int64))
        obs = Observations("grid", nodes=nodes, target_fn=interp)
    else:
        obs = Observations("times", times=times[pos], targets=values[pos])

    test_obs = None
    if test_series is not None:
        tt, tv = _series_arrays(test_series)
        keep = tt > 0.0
        test_obs = Observations("times", times=tt[keep], targets=tv[keep])

    return _fit_trajectory(field, params0, model.tau, history, model.n_segments,
                           model.steps_per_segment, obs, cfg, test_obs=test_obs,
                           track_names=field.param_names)


def train_classifier(model, points, labels, cfg, *, readout=None, init_params=None,
                     rng=None):
    """Fit a flow plus a linear readout of the terminal state.

    Each data point is the (constant) initial function of its own solve;
    the whole batch integrates as one stacked system.  The readout is a
    single identity-activation layer scoring sign(+1/-1).
    """
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if points.ndim != 2 or len(points) != len(labels):
        raise InputError("points must be (n, d) with one label each")
    if model.flow_dim != points.shape[1]:
        if model.kind == "neural-anode" and model.state_dim == points.shape[1]:
            pad = np.zeros((len(points), model.augment))
            points = np.concatenate([points, pad], axis=1)
        else:
            raise InputError("point width %d != model flow width %d"
                             % (points.shape[1], model.flow_dim))

    start = time.perf_counter()
    field = model.build_field()
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    if init_params is None:
        init_params = init_mlp(field.widths, rng)
    if readout is None:
        readout = MlpParams([np.zeros((1, model.flow_dim))], [np.zeros(1)], ["identity"])

    cfgsolve = SolverConfig(steps_per_segment=model.steps_per_segment)
    record = TrainRecord()
    flat = field.pack(init_params)
    r_flat = readout.flatten()
    groups = {}
    if cfg.train_params:
        groups["w"] = _Group(flat, cfg.lr, cfg)
    groups["readout"] = _Group(r_flat, cfg.lr, cfg)

    n_data = len(points)
    batch = cfg.batch_size or n_data
    snapshot = None
    epoch = 0
    while epoch < cfg.epochs:
        if batch < n_data:
            idx = rng.permutation(n_data)[:batch]
        else:
            idx = slice(None)
        px, py = points[idx], labels[idx]
        try:
            params = init_params.unflatten(flat)
            rd = readout.unflatten(r_flat)
            traj = integrate_ndde(field, params, ConstantHistory(px), model.tau,
                                  model.n_segments, cfgsolve)
            record.nfe += traj.nfe
            h_end = traj.checkpoints[-1]
            scores = mlp_forward(rd, h_end)[:, 0]
            loss, dscore = logistic_parts(scores, py)
            grad_h_end, grad_readout = mlp_vjp(rd, h_end, dscore[:, None])
            bundle = adjoint_backward(field, params, ConstantHistory(px), traj,
                                      [(traj.t_end, grad_h_end)])
        except _SOLVE_FAILURES:
            record.losses.append(np.inf)
            record.taus.append(model.tau)
            record.nfes.append(record.nfe)
            record.diverged_epochs.append(epoch)
            record.retries_used += 1
            if record.retries_used > cfg.max_retries:
                raise DivergenceError(
                    "training diverged at epoch %d after %d retries"
                    % (epoch, cfg.max_retries))
            if snapshot is not None:
                flat, r_flat = snapshot[0].copy(), snapshot[1].copy()
                for name, snap in snapshot[2].items():
                    groups[name].restore(snap)
            for g in groups.values():
                g.lr *= 0.5
            epoch += 1
            continue

        snapshot = (flat.copy(), r_flat.copy(),
                    {k: g.snapshot() for k, g in groups.items()})
        record.losses.append(loss)
        record.taus.append(model.tau)
        record.nfes.append(record.nfe)
        record.track("accuracy", accuracy(scores, py))
        if loss < record.best_loss:
            record.best_loss = loss
            record.best_epoch = epoch
            record.best_params = flat.copy()
            record.best_tau = model.tau

        if cfg.train_params:
            groups["w"].step(field.pack(bundle.grad_params))
            flat = groups["w"].x
        groups["readout"].step(grad_readout.flatten())
        r_flat = groups["readout"].x
        epoch += 1

    record.final_params = init_params.unflatten(flat)
    record.final_tau = model.tau
    record.final_readout = readout.unflatten(r_flat)
    if record.best_params is not None:
        record.best_params = init_params.unflatten(record.best_params)
    record.wall_time = time.perf_counter() - start
    return record


def identify_parameters(field, series, init_params, tau_init, cfg, *,
                        n_segments, steps_per_segment=64, history=None,
                        obs_mode="grid", obs_nodes=None, true_params=None,
                        true_tau=None):
    """Recover the constants (and optionally the delay) of an analytic field.

    Observations default to the moving-grid convention so the loss floor
    sits exactly at the generating constants whatever the current delay
    estimate is.  Tracked per epoch: each named constant, its ratio to the
    supplied true value, and the delay.
    """
    times, values = _series_arrays(series)
    if history is None:
        history = history_from_series(times, values, "spline", tau_init)
    interp = series_interpolant(times, values)
    m = steps_per_segment
    tau_cap = None
    if obs_mode == "grid":
        if obs_nodes is None:
            obs_nodes = np.arange(2, n_segments * m + 1, max(1, m // 16))
        tau_cap = interp.t_max / n_segments
        obs = Observations("grid", nodes=obs_nodes, target_fn=interp)
    else:
        pos = times > 0.0
        obs = Observations("times", times=times[pos], targets=values[pos])

    track = field.param_names
    true_vals = np.asarray(true_params, dtype=np.float64) if true_params is not None else None
    record = _fit_trajectory(field, np.asarray(init_params, dtype=np.float64),
                             tau_init, history, n_segments, m, obs, cfg,
                             track_names=track, true_values=true_vals,
                             tau_cap=tau_cap)
    if true_tau is not None:
        record.tracked["tau_norm"] = [t / true_tau for t in record.taus]
    return record


def make_windows(series, starts, back_span, knot_spacing=0.25):
    """Cut a long series into batched fitting windows.

    Each start time becomes one batch member whose local clock has t=0 at
    the start; its initial function is a spline over [-back_span, 0] read
    from the series, and its targets are read from the series at shifted
    times.  Returns (history, target_fn, tau_cap) with tau_cap the largest
    delay the shared knot grid can cover.
    """
    times, values = _series_arrays(series)
    starts = np.asarray(starts, dtype=np.float64)
    if starts.ndim != 1 or len(starts) == 0:
        raise InputError("need at least one window start time")
    interp = series_interpolant(times, values)
    if np.any(starts - back_span < interp.t_min - 1e-9):
        raise InputError("window history reaches before the series start")
    knots = np.arange(-back_span, 0.0 + 1e-12, knot_spacing)
    if abs(knots[-1]) > 1e-12:
        knots = np.append(knots, 0.0)
    # (k, b, d) values: one spline channel per window per component
    vals = np.stack([interp(starts + s) for s in knots])
    history = SplineHistory(fit_natural_cubic_spline(knots, vals))

    def target_fn(ts):
        return np.stack([interp(starts + s) for s in np.atleast_1d(ts)])

    target_fn.deriv = lambda ts: np.stack([interp.deriv(starts + s)
                                           for s in np.atleast_1d(ts)])
    horizon_room = float(interp.t_max - np.max(starts))
    return history, target_fn, horizon_room


def infer_delay_model_free(hidden, series, tau_init, cfg, *, n_segments,
                           steps_per_segment=24, history=None, obs_nodes=None,
                           obs_times=None, state_dim=1, rng=None,
                           window_starts=None, back_span=None,
                           warmup_epochs=0, scan_candidates=0,
                           scan_epochs=300, scan_span=1.6):
    """Joint fit of a neural field and the delay itself, no model template.

    hidden may be an int (replicated over three layers) or an explicit
    width tuple.  The delay gets its own learning rate (cfg.lr_tau).
    window_starts batches several stretches of the series into one solve,
    which is what pins the delay: a single shared field cannot absorb a
    wrong delay across windows with different local behaviour.

    obs_times switches to fixed physical observation times (targets frozen
    at the start).  With moving-grid observations a shorter delay also
    shrinks the fitted horizon, which biases the delay downward; a fixed
    observation span removes that pressure, at the price of each time
    snapping to the nearest node of the current grid.

    warmup_epochs trains the net alone before the delay is released.  A
    randomly initialized net produces a delay gradient that reflects its
    own junk rather than misalignment, and the delay can wander into a
    co-adapted trap before the net settles; warming up first means the
    released delay feels the fitted-net mismatch.  Total epochs run is
    warmup_epochs + cfg.epochs.

    scan_candidates > 0 replaces the warmup with a coarse search: that
    many delay candidates, geometrically spaced over
    [tau_init/scan_span, tau_init], each get a scan_epochs net-only fit
    from the same initialization, and joint descent continues from the
    winner.  The achievable loss as a function of the delay is a deep
    narrow funnel at the true value surrounded by a bumpy shallow
    plateau (the net partially absorbs any fixed misalignment), so plain
    descent started far away stalls on the plateau while the scan
    brackets the funnel and the descent then finishes the job.  The
    probed (delay, loss) pairs land in record.scan.
    """
    if isinstance(hidden, (int, np.integer)):
        hidden = (int(hidden),) * 3
    field = NeuralDelayField(state_dim, hidden)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    params0 = init_mlp(field.widths, rng)

    times, values = _series_arrays(series)
    m = steps_per_segment
    if window_starts is not None:
        if back_span is None:
            back_span = 1.6 * tau_init
        history, target_fn, room = make_windows(series, window_starts, back_span)
        if obs_times is not None:
            # targets are frozen up front, so data coverage only limits the
            # observation span, not the reach of the delay itself
            if np.max(obs_times) > room:
                raise InputError("observation times run past the series end")
            tau_cap = back_span
        else:
            tau_cap = min(back_span, room / n_segments)
    else:
        if history is None:
            history = history_from_series(times, values, "spline", tau_init)
        interp = series_interpolant(times, values)
        target_fn = interp
        tau_cap = interp.t_max / n_segments
    if obs_times is not None:
        obs_times = np.asarray(obs_times, dtype=float)
        obs = Observations("times", times=obs_times, targets=target_fn(obs_times))
    else:
        if obs_nodes is None:
            obs_nodes = np.arange(2, n_segments * m + 1, max(1, m // 8))
        obs = Observations("grid", nodes=obs_nodes, target_fn=target_fn)

    if scan_candidates > 0:
        lo = tau_init / float(scan_span)
        if cfg.tau_min is not None:
            lo = max(lo, cfg.tau_min)
        if obs.mode == "times":
            lo = max(lo, float(np.max(obs.times)) / n_segments)
        cands = np.geomspace(lo, min(tau_init, tau_cap), int(scan_candidates))
        scan_cfg = replace(cfg, epochs=int(scan_epochs))
        winner = None
        scan, extra_nfe = [], 0
        for tau_c in cands:
            probe = _fit_trajectory(field, params0, float(tau_c), history,
                                    n_segments, m, obs, scan_cfg,
                                    train_tau=False, tau_cap=tau_cap)
            scan.append((float(tau_c), probe.best_loss))
            if winner is None or probe.best_loss < winner[1].best_loss:
                winner = (float(tau_c), probe)
            extra_nfe += probe.nfe
        tau_start, warm = winner
        rec = _fit_trajectory(field, warm.final_params, tau_start, history,
                              n_segments, m, obs, cfg, train_tau=True,
                              tau_cap=tau_cap)
        rec = _concat_records(warm, rec)
        rec.nfe = extra_nfe + rec.nfe - warm.nfe
        rec.scan = scan
        return rec
    if warmup_epochs > 0:
        warm_cfg = replace(cfg, epochs=int(warmup_epochs))
        warm = _fit_trajectory(field, params0, tau_init, history, n_segments,
                               m, obs, warm_cfg, train_tau=False,
                               tau_cap=tau_cap)
        params0 = warm.final_params
        rec = _fit_trajectory(field, params0, tau_init, history, n_segments,
                              m, obs, cfg, train_tau=True, tau_cap=tau_cap)
        return _concat_records(warm, rec)
    return _fit_trajectory(field, params0, tau_init, history, n_segments, m,
                           obs, cfg, train_tau=True, tau_cap=tau_cap)


# ---------------------------------------------------------------------------
# datasets


def concentric_dataset(seed, n_inner=1000, n_outer=1000, r_inner=1.0,
                       r_gap=2.0, r_outer=3.0):
    """Disk-vs-annulus classification sample, labels +1 inside, -1 outside.

    The inner class is uniform on the disk of radius r_inner, the outer
    uniform on the annulus [r_gap, r_outer]; areas are sampled exactly via
    the square-root radius trick.
    """
    if not (0 < r_inner < r_gap < r_outer):
        raise InputError("radii must satisfy 0 < inner < gap < outer")
    rng = np.random.default_rng(seed)
    th = rng.uniform(0.0, 2.0 * np.pi, n_inner)
    r = r_inner * np.sqrt(rng.uniform(0.0, 1.0, n_inner))
    inner = np.column_stack([r * np.cos(th), r * np.sin(th)])
    th = rng.uniform(0.0, 2.0 * np.pi, n_outer)
    r = np.sqrt(r_gap ** 2 + rng.uniform(0.0, 1.0, n_outer) * (r_outer ** 2 - r_gap ** 2))
    outer = np.column_stack([r * np.cos(th), r * np.sin(th)])
    points = np.concatenate([inner, outer])
    labels = np.concatenate([np.ones(n_inner), -np.ones(n_outer)])
    perm = rng.permutation(len(points))
    return points[perm], labels[perm]
