"""Finite-difference verification of the backward pass.

Every sensitivity the backward pass reports is checked against a central
difference that goes through the forward solver only:

  parameters  — perturb each flat component, re-solve, re-evaluate the loss
  delay       — re-solve at tau +/- eps with observation times held fixed
                (the shrunk horizon gets one extra window for coverage)
  initial fn  — shift the whole history by +/- eps along each state basis
                direction
  horizon     — move only the final evaluation time, reading the earlier
                state from dense output and the later one from a single
                explicit step beyond the stored end

The loss is 0.5 * sum of squared residuals against fixed targets at the
snapped observation times, so its cotangents are just the residuals.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .adjoint import adjoint_backward, observe_trajectory
from .dde_solver import (
    ConstantHistory,
    ShiftedHistory,
    SolverConfig,
    SplineHistory,
    dense_eval,
    fit_natural_cubic_spline,
    integrate_ndde,
)
from .models import (
    DelayOnlyNeuralField,
    LinearTanhField,
    MackeyGlassField,
    NeuralDelayField,
    NeuralStateField,
    PopulationField,
    ScalarDelayField,
)


@dataclass
class GradCheckResult:
    label: str
    passed: bool
    max_abs_err: dict
    max_rel_err: dict
    details: dict = dc_field(default_factory=dict)

    def worst_rel(self):
        vals = [v for v in self.max_rel_err.values() if np.isfinite(v)]
        return max(vals) if vals else 0.0


def _errs(adj, fd, rtol, afloor):
    adj = np.atleast_1d(np.asarray(adj, dtype=np.float64)).ravel()
    fd = np.atleast_1d(np.asarray(fd, dtype=np.float64)).ravel()
    abs_err = np.abs(adj - fd)
    denom = np.abs(fd)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(denom > afloor, abs_err / denom, 0.0)
    ok = np.all((abs_err <= afloor) | (abs_err <= rtol * denom))
    return bool(ok), float(abs_err.max(initial=0.0)), float(rel.max(initial=0.0))


def _loss_at_times(traj, times, targets):
    states = dense_eval(traj, times)
    return 0.5 * float(np.sum((states - targets) ** 2))


def _step_beyond_end(field, params, traj, eps):
    """One explicit step of length eps past the stored end of traj."""
    T = traj.t_end
    tau = traj.tau
    y = traj.checkpoints[-1]
    d0 = dense_eval(traj, T - tau)
    dm = dense_eval(traj, T - tau + 0.5 * eps)
    d1 = dense_eval(traj, T - tau + eps)
    k1 = field.eval(y, d0, T, params)
    k2 = field.eval(y + 0.5 * eps * k1, dm, T + 0.5 * eps, params)
    k3 = field.eval(y + 0.5 * eps * k2, dm, T + 0.5 * eps, params)
    k4 = field.eval(y + eps * k3, d1, T + eps, params)
    return y + (eps / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def check_gradients(field, params, history, tau, n_segments, obs_times,
                    targets=None, steps=64, rtol=1e-4, afloor=1e-7,
                    label="instance", rng=None):
    """Compare one backward pass against finite differences on all four
    sensitivities.  Returns a GradCheckResult."""
    cfg = SolverConfig(steps_per_segment=steps)
    traj = integrate_ndde(field, params, history, tau, n_segments, config=cfg)
    snapped, states = observe_trajectory(traj, obs_times)
    if targets is None:
        if rng is None:
            rng = np.random.default_rng(0)
        targets = states + 0.3 * rng.standard_normal(states.shape)
    cots = states - targets
    observations = [(snapped[i], cots[i]) for i in range(len(snapped))]
    bundle = adjoint_backward(field, params, history, traj, observations)

    base_flat = field.pack(params)
    abs_err = {}
    rel_err = {}
    all_ok = True

    # parameters
    if base_flat.size:
        def loss_of_flat(v):
            tr = integrate_ndde(field, field.unpack(v), history, tau,
                                n_segments, config=cfg)
            return _loss_at_times(tr, snapped, targets)
        step = 1e-5
        fd_w = np.empty_like(base_flat)
        for c in range(base_flat.size):
            e = np.zeros_like(base_flat)
            e[c] = step
            fd_w[c] = (loss_of_flat(base_flat + e)
                       - loss_of_flat(base_flat - e)) / (2 * step)
        ok, a, r = _errs(field.pack(bundle.grad_params), fd_w, rtol, afloor)
        all_ok &= ok
        abs_err["params"] = a
        rel_err["params"] = r

    # delay, observation times held fixed; the step is small because the
    # loss can have a curvature break where the delay crosses an
    # observation-to-window alignment, and the central difference picks
    # that up at first order in the step
    eps = 1e-7 * max(1.0, tau)
    tr_hi = integrate_ndde(field, params, history, tau + eps, n_segments,
                           config=cfg)
    tr_lo = integrate_ndde(field, params, history, tau - eps, n_segments + 1,
                           config=cfg)
    fd_tau = (_loss_at_times(tr_hi, snapped, targets)
              - _loss_at_times(tr_lo, snapped, targets)) / (2 * eps)
    ok, a, r = _errs(bundle.grad_tau, fd_tau, rtol, afloor)
    all_ok &= ok
    abs_err["tau"] = a
    rel_err["tau"] = r

    # initial-function shift, one basis direction at a time
    eps = 1e-5
    fd_h0 = np.empty(traj.state_shape)
    it = np.ndindex(*traj.state_shape)
    for idx in it:
        off = np.zeros(traj.state_shape)
        off[idx] = eps
        tr_p = integrate_ndde(field, params, ShiftedHistory(history, off),
                              tau, n_segments, config=cfg)
        tr_m = integrate_ndde(field, params, ShiftedHistory(history, -off),
                              tau, n_segments, config=cfg)
        fd_h0[idx] = (_loss_at_times(tr_p, snapped, targets)
                      - _loss_at_times(tr_m, snapped, targets)) / (2 * eps)
    ok, a, r = _errs(bundle.grad_h0, fd_h0, rtol, afloor)
    all_ok &= ok
    abs_err["h0"] = a
    rel_err["h0"] = r

    # horizon: move the final evaluation only
    eps = 1e-5
    is_term = snapped == traj.t_end
    if np.any(is_term):
        y_hi = _step_beyond_end(field, params, traj, eps)
        y_lo = dense_eval(traj, traj.t_end - eps)
        base_states = dense_eval(traj, snapped)

        def term_loss(y_end):
            ss = base_states.copy()
            ss[is_term] = y_end
            return 0.5 * float(np.sum((ss - targets) ** 2))

        fd_T = (term_loss(y_hi) - term_loss(y_lo)) / (2 * eps)
    else:
        fd_T = 0.0
    ok, a, r = _errs(bundle.grad_T, fd_T, rtol, afloor)
    all_ok &= ok
    abs_err["T"] = a
    rel_err["T"] = r

    return GradCheckResult(label=label, passed=bool(all_ok),
                           max_abs_err=abs_err, max_rel_err=rel_err,
                           details={"n_segments": n_segments, "steps": steps,
                                    "tau": tau, "n_obs": len(obs_times)})


def _smooth_spline_history(tau, dim, rng, knots=9):
    ts = np.linspace(-1.3 * tau, 0.0, knots)
    amp = 0.4 + 0.3 * rng.random(dim)
    phase = rng.uniform(0, 2 * np.pi, dim)
    vals = 1.0 + amp * np.sin(2.0 * ts[:, None] + phase)
    return SplineHistory(fit_natural_cubic_spline(ts, vals))


def standard_instances(seed=0):
    """The instance zoo: analytic and neural fields, one to four state
    dimensions, one to three windows, constant and spline histories."""
    rng = np.random.default_rng(seed)
    out = []

    for a, tau, n in [(-2.0, 1.0, 1), (0.7, 0.8, 2), (-0.8, 0.6, 3)]:
        out.append(dict(label="scalar-delay-a%g-n%d" % (a, n),
                        field=ScalarDelayField(), params=np.array([a]),
                        history=ConstantHistory(np.array([1.0])),
                        tau=tau, n_segments=n))
    out.append(dict(label="scalar-delay-spline",
                    field=ScalarDelayField(), params=np.array([-1.1]),
                    history=_smooth_spline_history(0.9, 1, rng),
                    tau=0.9, n_segments=2))

    for (b, nn, g), tau, n in [((1.5, 4.0, 0.8), 0.7, 2),
                               ((2.0, 6.0, 1.0), 0.5, 3)]:
        out.append(dict(label="mackey-glass-n%d" % n,
                        field=MackeyGlassField(),
                        params=np.array([b, nn, g]),
                        history=ConstantHistory(np.array([1.1])),
                        tau=tau, n_segments=n))
    out.append(dict(label="mackey-glass-spline",
                    field=MackeyGlassField(),
                    params=np.array([1.2, 5.0, 0.7]),
                    history=_smooth_spline_history(0.8, 1, rng),
                    tau=0.8, n_segments=2))

    out.append(dict(label="population",
                    field=PopulationField(), params=np.array([1.3]),
                    history=ConstantHistory(np.array([0.4])),
                    tau=0.9, n_segments=2))

    fld = LinearTanhField(2)
    out.append(dict(label="linear-tanh-const",
                    field=fld, params=fld.default_matrix().ravel(),
                    history=ConstantHistory(np.array([0.8, -0.3])),
                    tau=0.6, n_segments=2))
    out.append(dict(label="linear-tanh-spline",
                    field=LinearTanhField(2),
                    params=np.array([-0.2, 1.5, -1.5, -0.2]),
                    history=_smooth_spline_history(0.7, 2, rng),
                    tau=0.7, n_segments=2))

    for d, hid, tau, n, hmode in [(1, (5,), 0.8, 2, "const"),
                                  (2, (5,), 0.7, 1, "const"),
                                  (2, (4, 4), 0.6, 2, "spline"),
                                  (3, (5,), 0.9, 2, "const"),
                                  (3, (4,), 0.5, 3, "spline"),
                                  (4, (4,), 0.7, 2, "const")]:
        fld = NeuralDelayField(d, hid)
        params = fld.init_params(rng)
        hist = (ConstantHistory(0.5 + 0.5 * rng.random(d)) if hmode == "const"
                else _smooth_spline_history(tau, d, rng))
        out.append(dict(label="neural-ndde-d%d-n%d-%s" % (d, n, hmode),
                        field=fld, params=params, history=hist,
                        tau=tau, n_segments=n))

    for d, tau, n in [(2, 0.8, 2), (1, 0.6, 3)]:
        fld = NeuralStateField(d, (5,))
        out.append(dict(label="neural-node-d%d-n%d" % (d, n),
                        field=fld, params=fld.init_params(rng),
                        history=ConstantHistory(0.3 + 0.4 * rng.random(d)),
                        tau=tau, n_segments=n))

    for d, tau, n in [(2, 0.7, 2), (1, 1.0, 1)]:
        fld = DelayOnlyNeuralField(d, (5,))
        out.append(dict(label="delay-only-d%d-n%d" % (d, n),
                        field=fld, params=fld.init_params(rng),
                        history=ConstantHistory(0.4 + 0.4 * rng.random(d)),
                        tau=tau, n_segments=n))

    return out


def run_gradient_suite(seed=0, steps=64, rtol=1e-4, afloor=1e-7):
    """Run the whole instance zoo; returns a list of GradCheckResult."""
    rng = np.random.default_rng(seed + 1)
    results = []
    for inst in standard_instances(seed):
        tau, n = inst["tau"], inst["n_segments"]
        T = n * tau
        obs = [0.35 * T, 0.6 * T, tau, T]
        results.append(check_gradients(
            inst["field"], inst["params"], inst["history"], tau, n,
            obs_times=obs, steps=steps, rtol=rtol, afloor=afloor,
            label=inst["label"], rng=rng))
    return results
