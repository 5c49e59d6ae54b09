"""Solver oracles: closed forms, degenerate reductions, dense-output accuracy,
convergence order, and file round-trips."""

import numpy as np
import pytest

from ndde.dde_solver import (
    ConstantHistory,
    OdeHistory,
    SolverConfig,
    SplineHistory,
    dense_deriv,
    dense_eval,
    eval_history,
    fit_natural_cubic_spline,
    history_deriv,
    integrate_ndde,
    integrate_node,
    make_ode_history,
    read_series_csv,
    segment_times,
    trajectory_series,
    write_series_csv,
)
from ndde.errors import DivergenceError, DomainError, InputError
from ndde.models import AnnulusField, ScalarDelayField, build_annulus_separator


class ZeroField:
    uses_delay = True

    def eval(self, h, h_delayed, t, params):
        return np.zeros_like(h)


class DecayField:
    uses_delay = False

    def eval(self, h, h_delayed, t, params):
        return -h


class QuadField:
    uses_delay = False

    def eval(self, h, h_delayed, t, params):
        with np.errstate(over="ignore"):
            return h * h


class DelayMirror:
    # x' = -2 x(t - tau)
    uses_delay = True

    def eval(self, h, h_delayed, t, params):
        return -2.0 * h_delayed


class SelfCoupled:
    # x' = a x(t) + b x(t - tau): smooth reference via fine integration
    uses_delay = True

    def eval(self, h, h_delayed, t, params):
        return params[0] * h + params[1] * h_delayed


def test_segment_times_exact_endpoints():
    ts = segment_times(0.3, 7)
    assert ts[0] == 0.0
    assert ts[-1] == 0.3
    assert np.all(np.diff(ts) > 0)


def test_zero_field_conserves_history_value():
    hist = ConstantHistory(np.array([1.25, -0.5]))
    traj = integrate_ndde(ZeroField(), None, hist, tau=0.7, n_segments=3,
                          config=SolverConfig(steps_per_segment=20))
    assert np.array_equal(traj.checkpoints[-1], np.array([1.25, -0.5]))
    assert traj.nfe == 4 * 20 * 3


def test_exponential_decay_matches_closed_form():
    hist = ConstantHistory(np.array([1.0]))
    traj = integrate_ndde(DecayField(), None, hist, tau=1.0, n_segments=1,
                          config=SolverConfig(steps_per_segment=200))
    assert abs(traj.checkpoints[-1][0] - np.exp(-1.0)) < 1e-10


def test_delay_mirror_sign_flip_exact():
    # x' = -2 x(t-1), history -1: on [0,1] x' = +2, x(1) = -1 + 2 = 1.
    hist = ConstantHistory(np.array([-1.0]))
    traj = integrate_ndde(DelayMirror(), None, hist, tau=1.0, n_segments=1,
                          config=SolverConfig(steps_per_segment=64))
    assert abs(traj.checkpoints[-1][0] - 1.0) < 1e-12


def test_second_window_quadratic_closed_form():
    # x' = a x(t-tau), constant history x0: piecewise polynomial in t.
    # On [0,tau]: x = x0 (1 + a t); on [tau,2tau]:
    # x = x0 (1 + a tau + a (t-tau) + a^2 (t-tau)^2 / 2).
    a, tau, x0 = -0.8, 0.6, 1.3
    traj = integrate_ndde(ScalarDelayField(), np.array([a]),
                          ConstantHistory(np.array([x0])), tau=tau,
                          n_segments=2, config=SolverConfig(steps_per_segment=40))
    want_mid = x0 * (1 + a * tau)
    want_end = x0 * (1 + a * tau + a * tau + a * a * tau * tau / 2)
    assert abs(traj.checkpoints[1][0] - want_mid) < 1e-12
    assert abs(traj.checkpoints[2][0] - want_end) < 1e-12
    # dense output reproduces the quadratic piece between nodes
    t = tau + 0.37 * tau
    want = x0 * (1 + a * tau + a * (t - tau) + a * a * (t - tau) ** 2 / 2)
    got = dense_eval(traj, np.array([t]))[0][0]
    assert abs(got - want) < 1e-12


def test_undelayed_field_reduces_to_node_bitwise():
    # same field through the delayed machinery and chained plain runs over
    # the identical per-window grids: every stage computation must agree
    hist = ConstantHistory(np.array([0.3, -0.2, 1.1]))
    cfg = SolverConfig(steps_per_segment=25)
    traj_d = integrate_ndde(DecayField(), None, hist, tau=0.5, n_segments=2,
                            config=cfg)
    y = np.array([0.3, -0.2, 1.1])
    for k in range(2):
        seg = integrate_node(DecayField(), None, y, 0.5 * k, 0.5 * (k + 1),
                             steps=25)
        y = seg.checkpoints[-1]
        assert np.array_equal(traj_d.checkpoints[k + 1], y)


def test_annulus_field_closed_form_map():
    # single window, constant history: x1 -> x1 + T (||x|| - r)
    fld, tau, horizon = build_annulus_separator(1.0, 2.0, 3.0)
    assert fld.radius == 1.5 and tau == horizon == 10.0
    for pt in [(2.0, 0.0), (0.0, 2.0), (3.0, 4.0), (0.5, 0.0)]:
        want = pt[0] + horizon * (np.hypot(*pt) - 1.5)
        traj = integrate_ndde(fld, np.zeros(0), ConstantHistory(np.array(pt)),
                              tau=tau, n_segments=1,
                              config=SolverConfig(steps_per_segment=8))
        assert abs(traj.checkpoints[-1][0] - want) < 1e-10
        assert abs(traj.checkpoints[-1][1] - pt[1]) < 1e-15


def test_annulus_batched_matches_loop():
    fld = AnnulusField(2.0, 2)
    pts = np.array([[2.0, 0.0], [0.0, 2.0], [3.0, 4.0], [0.5, 0.0]])
    traj = integrate_ndde(fld, np.zeros(0), ConstantHistory(pts), tau=1.0,
                          n_segments=1, config=SolverConfig(steps_per_segment=8))
    for i, pt in enumerate(pts):
        single = integrate_ndde(fld, np.zeros(0), ConstantHistory(pt), tau=1.0,
                                n_segments=1,
                                config=SolverConfig(steps_per_segment=8))
        assert np.array_equal(traj.checkpoints[-1][i], single.checkpoints[-1])


def test_spline_history_interpolates_knots_exactly():
    ts = np.linspace(-2.0, 0.0, 9)
    ys = np.sin(ts).reshape(-1, 1)
    sp = fit_natural_cubic_spline(ts, ys)
    for t, y in zip(ts, ys):
        assert np.array_equal(sp.eval(t), y)


def test_spline_reproduces_linear_data():
    ts = np.linspace(-1.0, 0.0, 6)
    ys = (2.0 * ts + 0.5).reshape(-1, 1)
    sp = fit_natural_cubic_spline(ts, ys)
    for t in np.linspace(-1.0, 0.0, 41):
        assert abs(sp.eval(t)[0] - (2.0 * t + 0.5)) < 1e-13
        assert abs(sp.derivative(t)[0] - 2.0) < 1e-12


def test_spline_accuracy_on_smooth_function():
    ts = np.linspace(-3.0, 0.0, 61)
    ys = np.sin(ts).reshape(-1, 1)
    sp = fit_natural_cubic_spline(ts, ys)
    probe = np.linspace(-2.5, -0.5, 101)  # stay away from natural ends
    err = max(abs(sp.eval(t)[0] - np.sin(t)) for t in probe)
    derr = max(abs(sp.derivative(t)[0] - np.cos(t)) for t in probe)
    assert err < 1e-4
    assert derr < 1e-3


def test_spline_history_coverage_enforced():
    ts = np.linspace(-1.0, 0.0, 5)
    sp = SplineHistory(fit_natural_cubic_spline(ts, np.cos(ts).reshape(-1, 1)))
    with pytest.raises(DomainError):
        eval_history(sp, -1.5)
    v = eval_history(sp, -0.25)
    assert v.shape == (1,)


def test_constant_history_derivative_is_zero():
    h = ConstantHistory(np.array([2.0, 3.0]))
    assert np.array_equal(history_deriv(h, -0.3), np.zeros(2))


def test_dense_eval_is_bitwise_at_grid_nodes():
    hist = ConstantHistory(np.array([0.7]))
    traj = integrate_ndde(DelayMirror(), None, hist, tau=0.9, n_segments=2,
                          config=SolverConfig(steps_per_segment=30))
    ts = traj.grid_times()
    vals = dense_eval(traj, ts)
    assert np.array_equal(vals, traj.grid_states())


def test_dense_eval_midpoint_accuracy():
    hist = ConstantHistory(np.array([1.0]))
    traj = integrate_node(DecayField(), None, np.array([1.0]), 0.0, 1.0,
                          steps=1000)
    for t in (0.1234567, 0.5, 0.9995):
        got = dense_eval(traj, np.array([t]))[0][0]
        assert abs(got - np.exp(-t)) < 1e-10


def test_dense_deriv_matches_field():
    hist = ConstantHistory(np.array([1.0]))
    traj = integrate_node(DecayField(), None, np.array([1.0]), 0.0, 1.0,
                          steps=500)
    for t in (0.0, 0.31, 1.0):
        got = dense_deriv(traj, np.array([t]))[0][0]
        assert abs(got - (-np.exp(-t))) < 1e-8


def test_dense_eval_rejects_out_of_span():
    traj = integrate_node(DecayField(), None, np.array([1.0]), 0.0, 1.0,
                          steps=10)
    with pytest.raises(DomainError):
        dense_eval(traj, np.array([1.5]))


def test_ode_history_warmup():
    # warm up along x' = -x from x(-tau) = 1; at t=0 the value is e^{-tau}
    hist = make_ode_history(DecayField(), None, np.array([1.0]), tau=1.0,
                            steps=400)
    v0 = eval_history(hist, 0.0)
    assert abs(v0[0] - np.exp(-1.0)) < 1e-8
    vm = eval_history(hist, -0.5)
    assert abs(vm[0] - np.exp(-0.5)) < 1e-8
    d = history_deriv(hist, -0.5)
    assert abs(d[0] + np.exp(-0.5)) < 1e-6


def test_interior_derivative_continuity():
    # stored node derivatives at interior window boundaries agree between
    # the two owning segments by construction; dense derivative is
    # continuous there
    a, b = 0.4, -1.1
    hist = ConstantHistory(np.array([1.0]))
    traj = integrate_ndde(SelfCoupled(), np.array([a, b]), hist, tau=0.5,
                          n_segments=3, config=SolverConfig(steps_per_segment=20))
    t = traj.tau
    left = dense_deriv(traj, np.array([t - 1e-13]))[0][0]
    right = dense_deriv(traj, np.array([t + 1e-13]))[0][0]
    assert abs(left - right) < 1e-9


def test_convergence_order_is_four():
    # self-coupled delayed system, smooth after the first window interior;
    # observed order on doubling should sit near 4
    a, b = 0.4, -1.1
    hist = ConstantHistory(np.array([1.0]))
    vals = {}
    for m in (20, 40, 80, 160):
        traj = integrate_ndde(SelfCoupled(), np.array([a, b]), hist, tau=0.7,
                              n_segments=2,
                              config=SolverConfig(steps_per_segment=m))
        vals[m] = traj.checkpoints[-1][0]
    ref = integrate_ndde(SelfCoupled(), np.array([a, b]), hist, tau=0.7,
                         n_segments=2,
                         config=SolverConfig(steps_per_segment=1280))
    refv = ref.checkpoints[-1][0]
    e20 = abs(vals[20] - refv)
    e80 = abs(vals[80] - refv)
    order = np.log2(e20 / e80) / 2.0
    assert order > 3.5


def test_divergence_raises_with_time():
    hist = ConstantHistory(np.array([3.0]))
    with pytest.raises(DivergenceError) as exc:
        integrate_ndde(QuadField(), None, hist, tau=2.0, n_segments=1,
                       config=SolverConfig(steps_per_segment=400))
    assert exc.value.t is not None
    assert 0.0 < exc.value.t <= 2.0


def test_input_validation():
    hist = ConstantHistory(np.array([1.0]))
    with pytest.raises(InputError):
        integrate_ndde(ZeroField(), None, hist, tau=-1.0, n_segments=1)
    with pytest.raises(InputError):
        integrate_ndde(ZeroField(), None, hist, tau=1.0, n_segments=0)
    with pytest.raises(InputError):
        SolverConfig(steps_per_segment=0)


def test_series_csv_round_trip(tmp_path):
    hist = ConstantHistory(np.array([1.0, -2.0]))
    traj = integrate_ndde(ZeroField(), None, hist, tau=1.0, n_segments=2,
                          config=SolverConfig(steps_per_segment=5))
    ts, xs = trajectory_series(traj)
    p = tmp_path / "series.csv"
    write_series_csv(p, ts, xs)
    ts2, xs2 = read_series_csv(p)
    assert np.array_equal(ts, ts2)
    assert np.array_equal(xs, xs2)


def test_trajectory_series_decimation():
    hist = ConstantHistory(np.array([1.0]))
    traj = integrate_ndde(ZeroField(), None, hist, tau=1.0, n_segments=1,
                          config=SolverConfig(steps_per_segment=10))
    ts, xs = trajectory_series(traj, decimate=5)
    assert ts[0] == 0.0 and ts[-1] == 1.0
    assert len(ts) == 3
