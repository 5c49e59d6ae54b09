"""Reverse-mode gradients for constant-delay integrations.

The backward pass never stores the forward's per-step internals.  It keeps
the n+1 window-boundary states, then walks windows last to first: inside
window i it rebuilds the node grids of window i and its predecessor from
the boundary states and advances one adjoint variable down the window with
the same RK4 the forward used.  The coupling a window receives from its
successor's adjoint rides in a per-stage record of delayed-argument VJPs
written during the successor's traversal, so live storage per window stays
constant no matter how many windows the solve has.  States between nodes
come from cubic Hermite interpolation, so the whole pass discretizes the
continuous adjoint equations rather than differentiating the solver's
arithmetic.

Observation cotangents enter as jumps on the adjoint variable.  Every
observation time is snapped to its nearest node; the node at global time
(j+1)*tau belongs to window j, which keeps each jump applied exactly once
per traversal.  Quadrature accumulators for the parameter, delay, initial
function, and horizon sensitivities ride inside the backward integration
state, so their quadrature is stage-consistent with the adjoint itself.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .dde_solver import (
    _HistoryFeed,
    _RecordFeed,
    _SelfFeed,
    _hermite_slope,
    _hermite_value,
    _integrate_segment,
    eval_history,
    history_deriv,
    segment_times,
)
from .errors import DimensionError, InputError


@dataclass
class AdjointAudit:
    """Memory and work accounting for one backward pass."""

    n_segments: int
    steps_per_segment: int
    checkpoints_held: int
    persistent_buffers_per_window: list = dc_field(default_factory=list)
    transient_record_peak: int = 0
    state_recompute_segments: int = 0
    vjp_stage_calls: int = 0

    @property
    def persistent_buffer_peak(self):
        return max(self.persistent_buffers_per_window, default=0)


@dataclass
class GradientBundle:
    """Loss sensitivities from one backward pass.

    grad_params matches the field's parameter container.  grad_h0 is the
    response to a uniform additive shift of the whole initial function
    (history value and the state it launches); for a constant history this
    is the gradient with respect to the history value itself.  grad_tau
    holds observation times fixed while the delay moves; grad_T moves only
    the final evaluation time.
    """

    grad_params: object
    grad_tau: float
    grad_h0: np.ndarray
    grad_T: float
    lam0: np.ndarray
    audit: AdjointAudit


def _snap_observations(observations, n_segments, steps, delta, t_end, state_shape):
    """Snap (time, cotangent) pairs to nodes, merging duplicates.

    Returns {(window, node): summed cotangent} with node in 1..steps.
    """
    slack = 1e-9 * max(1.0, abs(t_end))
    jumps = {}
    for t, cot in observations:
        t = float(t)
        cot = np.asarray(cot, dtype=np.float64)
        if cot.shape != state_shape:
            raise DimensionError(
                "cotangent shape %r does not match state shape %r"
                % (cot.shape, state_shape))
        if t <= slack or t > t_end + slack:
            raise InputError("observation time %r outside (0, %r]" % (t, t_end))
        g = int(round(t / delta))
        g = min(max(g, 1), n_segments * steps)
        j = (g - 1) // steps
        p = g - j * steps
        key = (j, p)
        if key in jumps:
            jumps[key] = jumps[key] + cot
        else:
            jumps[key] = cot.copy()
    return jumps


def observe_trajectory(traj, times):
    """States at the nodes nearest the requested times.

    Returns (snapped_times, states); gradients computed against these states
    line up exactly with finite differences of a loss built on them.
    """
    delta = traj.seg_len / traj.steps
    out_t = np.empty(len(times))
    out_x = np.empty((len(times),) + traj.state_shape)
    slack = 1e-9 * max(1.0, abs(traj.t_end))
    for i, t in enumerate(times):
        rel = float(t) - traj.t0
        if rel <= slack or rel > traj.t_end - traj.t0 + slack:
            raise InputError("observation time %r outside (%r, %r]"
                             % (t, traj.t0, traj.t_end))
        g = int(round(rel / delta))
        g = min(max(g, 1), traj.n_segments * traj.steps)
        j = (g - 1) // traj.steps
        p = g - j * traj.steps
        out_t[i] = traj.seg_times[j][p]
        out_x[i] = traj.seg_states[j, p]
    return out_t, out_x


def _mid_value(S, D, p, h):
    """Hermite interpolant at the midpoint of interval [p, p+1]."""
    return _hermite_value(S[p], D[p], S[p + 1], D[p + 1], h, 0.5)


def _mid_slope(S, D, p, h):
    return _hermite_slope(S[p], D[p], S[p + 1], D[p + 1], h, 0.5)


class _LayerStates:
    """Stage-time states of one layer and of its delayed argument."""

    def __init__(self, S, D):
        self.S = S
        self.D = D

    def at_node(self, p):
        return self.S[p]

    def at_mid(self, p, h):
        return _mid_value(self.S, self.D, p, h)

    def slope_node(self, p):
        return self.D[p]

    def slope_mid(self, p, h):
        return _mid_slope(self.S, self.D, p, h)


class _HistoryStates:
    """History values/slopes presented on the window grid shifted by -tau."""

    def __init__(self, history, times, tau):
        self.history = history
        self.times = times
        self.tau = tau

    def at_node(self, p):
        return np.asarray(eval_history(self.history, self.times[p] - self.tau,
                                       self.tau), dtype=np.float64)

    def at_mid(self, p, h):
        s = 0.5 * (self.times[p] + self.times[p + 1])
        return np.asarray(eval_history(self.history, s - self.tau, self.tau),
                          dtype=np.float64)

    def slope_node(self, p):
        return np.asarray(history_deriv(self.history, self.times[p] - self.tau),
                          dtype=np.float64)

    def slope_mid(self, p, h):
        s = 0.5 * (self.times[p] + self.times[p + 1])
        return np.asarray(history_deriv(self.history, s - self.tau),
                          dtype=np.float64)


def _recompute_grids(field, params, history, checkpoints, times, tau,
                     n_segments, keep_from, keep_to, audit):
    """Node states and slopes for layers keep_from..keep_to, chained from
    the stored boundary states.  Layers below pass through transiently; one
    layer above keep_to is integrated only for the boundary slope of the
    top kept grid."""
    grids = {}
    feed = _HistoryFeed(history, tau) if field.uses_delay else _SelfFeed()
    live_records = 0
    last = min(keep_to + 1, n_segments - 1)
    for j in range(last + 1):
        states, k1s, record, last_k4, _ = _integrate_segment(
            field, params, checkpoints[j], times, j * tau, feed)
        audit.state_recompute_segments += 1
        if field.uses_delay:
            feed = _RecordFeed(record)
            live_records = min(live_records + 1, 2)
            audit.transient_record_peak = max(audit.transient_record_peak,
                                              live_records)
            live_records = 1     # predecessor record dropped here
        if keep_from <= j - 1 <= keep_to:
            grids[j - 1].D[-1] = k1s[0]
        if keep_from <= j <= keep_to:
            D = np.empty_like(states)
            D[:-1] = k1s
            D[-1] = last_k4
            grids[j] = _LayerStates(states, D)
    return grids


def _phantom_cotangent(jumps, top_key, state_shape):
    if top_key in jumps:
        return jumps[top_key]
    return np.ones(state_shape)


def adjoint_backward(field, params, history, traj, observations,
                     _phantom_top_coupling=False):
    """Gradient bundle for a delayed integration.

    traj must come from integrate_ndde with the same field, params, and
    history; only its boundary states and grid geometry are consumed.
    observations is a sequence of (time, cotangent) pairs with times in
    (0, t_end]; each is snapped to the nearest node.
    """
    n = traj.n_segments
    m = traj.steps
    tau = traj.tau
    if tau is None:
        raise InputError("trajectory was not produced by a delayed run")
    ckpt = traj.checkpoints
    state_shape = traj.state_shape
    times = segment_times(tau, m)
    delta = tau / m

    jumps = _snap_observations(observations, n, m, delta, traj.t_end,
                               state_shape)
    audit = AdjointAudit(n_segments=n, steps_per_segment=m,
                         checkpoints_held=n + 1)

    n_flat = field.pack(field.zero_params()).size
    acc_w = np.zeros(n_flat)
    acc_tau = 0.0
    acc_h0 = np.zeros(state_shape)
    Lam = [None] * (n + 1)
    Lam[n] = np.zeros(state_shape)

    phantom_cot = None
    if _phantom_top_coupling:
        phantom_cot = _phantom_cotangent(jumps, (n - 1, m), state_shape)

    # layer i+1's delayed-argument VJPs, recorded stage by stage during its
    # own traversal and replayed here as the coupling source for layer i;
    # this is the only adjoint state carried between windows
    rec_in = None
    for i in range(n - 1, -1, -1):
        keep_from = max(i - 1, 0)
        grids = _recompute_grids(field, params, history, ckpt, times, tau, n,
                                 keep_from, i, audit)
        own = grids[i]
        dly = grids[i - 1] if i >= 1 else _HistoryStates(history, times, tau)
        rec_out = [] if i > 0 else None
        audit.persistent_buffers_per_window.append(
            2 * len(grids) + (4 if rec_in is not None else 0)
            + (4 if rec_out is not None else 0))
        cursor = [0]

        lam = np.array(Lam[i + 1] + jumps.get((i, m), 0.0), dtype=np.float64)

        def stage_rates(lam_stage, p_node, where, h_fwd):
            # where: "hi" -> node p_node, "mid" -> interval p_node midpoint,
            # "lo" -> node p_node; caller picks p accordingly
            if where == "mid":
                y = own.at_mid(p_node, h_fwd)
                yd = dly.at_mid(p_node, h_fwd)
                s_loc = 0.5 * (times[p_node] + times[p_node + 1])
            else:
                y = own.at_node(p_node)
                yd = dly.at_node(p_node)
                s_loc = times[p_node]
            gh, ghd, gp = field.vjp(y, yd, i * tau + s_loc, params, lam_stage)
            audit.vjp_stage_calls += 1
            if rec_out is not None:
                rec_out.append(ghd)
            rate = -gh
            if rec_in is not None:
                rate = rate - rec_in[cursor[0]]
            elif _phantom_top_coupling:
                _, ghd_ph, _ = field.vjp(ckpt[n], y, n * tau + s_loc,
                                         params, phantom_cot)
                audit.vjp_stage_calls += 1
                rate = rate - ghd_ph
            cursor[0] += 1
            if where == "mid":
                hdot = dly.slope_mid(p_node, h_fwd)
            else:
                hdot = dly.slope_node(p_node)
            d_w = -field.pack(gp)
            d_tau = float(np.sum(ghd * hdot))
            d_h0 = -ghd if i == 0 else None
            return rate, d_w, d_tau, d_h0

        for p in range(m, 0, -1):
            if (i, p) in jumps and p < m:
                lam = lam + jumps[(i, p)]
            h_fwd = times[p] - times[p - 1]
            hs = -h_fwd

            K1 = stage_rates(lam, p, "hi", h_fwd)
            K2 = stage_rates(lam + 0.5 * hs * K1[0], p - 1, "mid", h_fwd)
            K3 = stage_rates(lam + 0.5 * hs * K2[0], p - 1, "mid", h_fwd)
            K4 = stage_rates(lam + 1.0 * hs * K3[0], p - 1, "lo", h_fwd)

            lam = lam + (hs / 6.0) * (
                K1[0] + 2.0 * K2[0] + 2.0 * K3[0] + K4[0])
            acc_w = acc_w + (hs / 6.0) * (K1[1] + 2 * K2[1] + 2 * K3[1] + K4[1])
            acc_tau = acc_tau + (hs / 6.0) * (K1[2] + 2 * K2[2] + 2 * K3[2] + K4[2])
            if i == 0:
                acc_h0 = acc_h0 + (hs / 6.0) * (
                    K1[3] + 2 * K2[3] + 2 * K3[3] + K4[3])

        Lam[i] = lam
        rec_in = rec_out

    grad_T = 0.0
    top = jumps.get((n - 1, m))
    if top is not None:
        f_end = field.eval(ckpt[n], ckpt[n - 1], n * tau, params)
        grad_T = float(np.sum(top * f_end))

    grad_h0 = Lam[0] + acc_h0
    return GradientBundle(grad_params=field.unpack(acc_w),
                          grad_tau=float(acc_tau),
                          grad_h0=grad_h0,
                          grad_T=grad_T,
                          lam0=Lam[0].copy(),
                          audit=audit)


def node_adjoint_backward(field, params, traj, observations):
    """Gradient bundle for an undelayed integration over [t0, t1].

    Mirrors the delayed backward pass with a single window and no delayed
    coupling: same stage placement, same Hermite midpoint states, same
    accumulator quadrature.  grad_h0 is the sensitivity to the initial
    state; grad_tau is identically zero.
    """
    if traj.n_segments != 1 or traj.tau is not None:
        raise InputError("expected a trajectory from an undelayed run")
    m = traj.steps
    state_shape = traj.state_shape
    seg_len = traj.seg_len
    times = segment_times(seg_len, m)
    delta = seg_len / m

    shifted = [(float(t) - traj.t0, cot) for t, cot in observations]
    jumps = _snap_observations(
        shifted, 1, m, delta, traj.t_end - traj.t0, state_shape)
    audit = AdjointAudit(n_segments=1, steps_per_segment=m,
                         checkpoints_held=2)

    states, k1s, _, last_k4, _ = _integrate_segment(
        field, params, traj.checkpoints[0], times, traj.t0, _SelfFeed())
    audit.state_recompute_segments += 1
    D = np.empty_like(states)
    D[:-1] = k1s
    D[-1] = last_k4
    own = _LayerStates(states, D)
    audit.persistent_buffers_per_window.append(2)

    n_flat = field.pack(field.zero_params()).size
    acc_w = np.zeros(n_flat)
    lam = np.array(jumps.get((0, m), np.zeros(state_shape)), dtype=np.float64)

    def stage_rates(lam_stage, p_node, where, h_fwd):
        if where == "mid":
            y = own.at_mid(p_node, h_fwd)
            s_loc = 0.5 * (times[p_node] + times[p_node + 1])
        else:
            y = own.at_node(p_node)
            s_loc = times[p_node]
        gh, _, gp = field.vjp(y, y, traj.t0 + s_loc, params, lam_stage)
        audit.vjp_stage_calls += 1
        return -gh, -field.pack(gp)

    for p in range(m, 0, -1):
        if (0, p) in jumps and p < m:
            lam = lam + jumps[(0, p)]
        h_fwd = times[p] - times[p - 1]
        hs = -h_fwd
        K1 = stage_rates(lam, p, "hi", h_fwd)
        K2 = stage_rates(lam + 0.5 * hs * K1[0], p - 1, "mid", h_fwd)
        K3 = stage_rates(lam + 0.5 * hs * K2[0], p - 1, "mid", h_fwd)
        K4 = stage_rates(lam + hs * K3[0], p - 1, "lo", h_fwd)
        lam = lam + (hs / 6.0) * (K1[0] + 2 * K2[0] + 2 * K3[0] + K4[0])
        acc_w = acc_w + (hs / 6.0) * (K1[1] + 2 * K2[1] + 2 * K3[1] + K4[1])

    grad_T = 0.0
    top = jumps.get((0, m))
    if top is not None:
        f_end = field.eval(traj.checkpoints[1], traj.checkpoints[1],
                           traj.t0 + seg_len, params)
        grad_T = float(np.sum(top * f_end))

    return GradientBundle(grad_params=field.unpack(acc_w),
                          grad_tau=0.0,
                          grad_h0=lam.copy(),
                          grad_T=grad_T,
                          lam0=lam.copy(),
                          audit=audit)
