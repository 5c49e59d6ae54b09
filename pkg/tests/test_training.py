"""Optimizer and training-loop checks.

Oracles: hand-run Adam recursions, exact fixed-point arithmetic for
self-consistent data, closed-form solves for the scalar delay line, and
direct counters for the cost accounting.
"""

import numpy as np
import pytest

from ndde.dde_solver import (
    ConstantHistory,
    SolverConfig,
    integrate_ndde,
    trajectory_series,
)
from ndde.errors import ConfigError, DivergenceError, InputError
from ndde.models import ModelSpec, ScalarDelayField, VectorField
from ndde.training import (
    Observations,
    TrainConfig,
    adam_init,
    adam_step,
    concentric_dataset,
    infer_delay_model_free,
    logistic_parts,
    mse_parts,
    sgd_step,
    train_classifier,
    train_regression,
    _fit_trajectory,
)


# ---------------------------------------------------------------------------
# optimizer


def test_adam_zero_gradient_is_exact_fixed_point():
    x = np.array([0.3, -1.7, 2.5])
    st = adam_init(3)
    for _ in range(5):
        x2, st = adam_step(x, np.zeros(3), st, lr=0.1)
        assert np.array_equal(x2, x)
        x = x2


def test_adam_first_step_magnitude_is_learning_rate():
    # with fresh moments the bias-corrected ratio is g/|g|, up to eps
    for g in (1e-3, 0.5, 40.0):
        x2, _ = adam_step(np.zeros(1), np.array([g]), adam_init(1), lr=0.05)
        assert x2[0] < 0
        assert abs(abs(x2[0]) - 0.05) < 1e-5


def test_adam_converges_on_quadratic():
    # min of 0.5*(x-3)^2 from x=0, lr=0.1
    x = np.zeros(1)
    st = adam_init(1)
    for _ in range(500):
        x, st = adam_step(x, x - 3.0, st, lr=0.1)
    assert abs(x[0] - 3.0) < 1e-6


def test_adam_matches_hand_recursion():
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    x = np.array([1.0])
    st = adam_init(1)
    m = v = 0.0
    xs = 1.0
    for t in range(1, 6):
        g = 2.0 * xs
        x, st = adam_step(x, np.array([g]), st, lr, b1, b2, eps)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        xs = xs - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        assert abs(x[0] - xs) < 1e-15


def test_sgd_step():
    assert np.allclose(sgd_step(np.array([1.0, 2.0]), np.array([0.5, -1.0]), 0.1),
                       [0.95, 2.1])


# ---------------------------------------------------------------------------
# losses


def test_mse_parts_matches_finite_differences():
    rng = np.random.default_rng(3)
    pred = rng.normal(size=(4, 2))
    target = rng.normal(size=(4, 2))
    loss, cot = mse_parts(pred, target)
    eps = 1e-6
    for i in range(4):
        for j in range(2):
            p2 = pred.copy()
            p2[i, j] += eps
            lp = mse_parts(p2, target)[0]
            p2[i, j] -= 2 * eps
            lm = mse_parts(p2, target)[0]
            assert abs((lp - lm) / (2 * eps) - cot[i, j]) < 1e-8


def test_logistic_parts_matches_finite_differences():
    rng = np.random.default_rng(4)
    s = rng.normal(size=6) * 3
    y = np.where(rng.uniform(size=6) < 0.5, 1.0, -1.0)
    loss, ds = logistic_parts(s, y)
    assert loss > 0
    eps = 1e-6
    for i in range(6):
        s2 = s.copy()
        s2[i] += eps
        lp = logistic_parts(s2, y)[0]
        s2[i] -= 2 * eps
        lm = logistic_parts(s2, y)[0]
        assert abs((lp - lm) / (2 * eps) - ds[i]) < 1e-8


def test_logistic_extreme_scores_stay_finite():
    s = np.array([800.0, -800.0])
    y = np.array([1.0, -1.0])
    loss, ds = logistic_parts(s, y)
    assert np.isfinite(loss) and loss < 1e-300
    assert np.all(np.isfinite(ds))


# ---------------------------------------------------------------------------
# config validation


def test_config_rejects_bad_values():
    with pytest.raises(ConfigError):
        TrainConfig(lr=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(optimizer="adamw")


# ---------------------------------------------------------------------------
# regression fixed point and learning


def _scalar_spec(m=16):
    return ModelSpec(kind="scalar-delay", state_dim=1, tau=1.0, n_segments=2,
                     steps_per_segment=m)


def _self_consistent_series(spec, gain):
    field = spec.build_field()
    hist = ConstantHistory([1.0])
    traj = integrate_ndde(field, np.array([gain]), hist, spec.tau,
                          spec.n_segments, SolverConfig(spec.steps_per_segment))
    return trajectory_series(traj)


def test_self_consistency_is_exact_zero_fixed_point():
    spec = _scalar_spec()
    series = _self_consistent_series(spec, -0.7)
    cfg = TrainConfig(lr=1e-2, epochs=50, seed=0)
    rec = train_regression(spec, series, cfg, init_params=np.array([-0.7]))
    assert all(l == 0.0 for l in rec.losses)
    assert np.array_equal(rec.final_params, np.array([-0.7]))


def test_regression_recovers_scalar_gain():
    spec = _scalar_spec()
    field = spec.build_field()
    hist = ConstantHistory([1.0])
    fine = integrate_ndde(field, np.array([-0.7]), hist, 1.0, 2,
                          SolverConfig(steps_per_segment=160))
    t, v = trajectory_series(fine)
    sub = slice(0, None, 10)
    cfg = TrainConfig(lr=5e-2, epochs=300, seed=0)
    rec = train_regression(spec, (t[sub], v[sub]), cfg, init_params=np.array([-0.2]))
    assert abs(rec.final_params[0] + 0.7) < 1e-5
    assert rec.losses[-1] < 1e-10


def test_epoch_loss_decreases_at_small_learning_rate():
    spec = _scalar_spec()
    series = _self_consistent_series(spec, -0.7)
    cfg = TrainConfig(lr=1e-4, epochs=2, seed=0)
    rec = train_regression(spec, series, cfg, init_params=np.array([-0.3]))
    assert rec.losses[1] < rec.losses[0]


def test_training_is_deterministic():
    spec = ModelSpec(kind="neural-ndde", state_dim=1, tau=1.0, n_segments=1,
                     hidden=(4,), steps_per_segment=8)
    series = _self_consistent_series(_scalar_spec(8), -0.5)
    cfg = TrainConfig(lr=1e-2, epochs=6, seed=11)
    recs = [train_regression(spec, series, cfg) for _ in range(2)]
    assert recs[0].losses == recs[1].losses
    assert np.array_equal(recs[0].final_params.flatten(),
                          recs[1].final_params.flatten())


def test_nfe_accounting():
    class CountingField(ScalarDelayField):
        calls = 0

        def eval(self, h, hd, t, params):
            CountingField.calls += 1
            return super().eval(h, hd, t, params)

    field = CountingField()
    hist = ConstantHistory([1.0])
    traj = integrate_ndde(field, np.array([-0.5]), hist, 0.8, 3,
                          SolverConfig(steps_per_segment=12))
    assert CountingField.calls == traj.nfe == 4 * 12 * 3

    spec = _scalar_spec(8)
    series = _self_consistent_series(spec, -0.5)
    cfg = TrainConfig(lr=1e-3, epochs=7, seed=0)
    rec = train_regression(spec, series, cfg, init_params=np.array([-0.5]))
    assert rec.nfe == 7 * 4 * 8 * 2


# ---------------------------------------------------------------------------
# divergence policy


class QuadGrowthField(VectorField):
    """d/dt h = p*h^2: finite-time blowup when p*h0*T >= 1."""

    uses_delay = False
    dim = 1
    n_params = 1
    param_names = ("strength",)

    def eval(self, h, h_delayed, t, params):
        with np.errstate(over="ignore", invalid="ignore"):
            return params[0] * h * h

    def vjp(self, h, h_delayed, t, params, cotangent):
        with np.errstate(over="ignore", invalid="ignore"):
            gh = cotangent * 2.0 * params[0] * h
            gp = np.array([np.sum(cotangent * h * h)])
        return gh, np.zeros_like(cotangent), gp

    def unpack(self, flat):
        return np.asarray(flat, dtype=np.float64).copy()

    def zero_params(self):
        return np.zeros(1)


def _quad_observations(p_true, tau, n, m):
    field = QuadGrowthField()
    traj = integrate_ndde(field, np.array([p_true]), ConstantHistory([1.0]),
                          tau, n, SolverConfig(steps_per_segment=m))
    t, v = trajectory_series(traj)
    pos = t > 0
    return Observations("times", times=t[pos], targets=v[pos])


def test_divergence_rolls_back_and_halves_rate():
    # blowup threshold on [0, 0.4] is p = 2.5; a lr=2 first step jumps the
    # gain from 1 to ~3, which must fail, roll back, and succeed at lr=1
    obs = _quad_observations(1.1, 0.2, 2, 10)
    cfg = TrainConfig(lr=2.0, epochs=12, seed=0, max_retries=6)
    rec = _fit_trajectory(QuadGrowthField(), np.array([1.0]), 0.2,
                          ConstantHistory([1.0]), 2, 10, obs, cfg)
    assert rec.retries_used >= 1
    assert np.inf in rec.losses
    assert len(rec.diverged_epochs) == rec.retries_used
    assert np.isfinite(rec.losses[-1])
    assert np.isfinite(rec.final_params[0])


def test_divergence_budget_exhaustion_raises():
    obs = _quad_observations(1.1, 0.2, 2, 10)
    cfg = TrainConfig(lr=2.0, epochs=12, seed=0, max_retries=0)
    with pytest.raises(DivergenceError):
        _fit_trajectory(QuadGrowthField(), np.array([1.0]), 0.2,
                        ConstantHistory([1.0]), 2, 10, obs, cfg)


# ---------------------------------------------------------------------------
# delay projection


def test_delay_projection_floor_warns_and_clamps():
    field = ScalarDelayField()
    fine = integrate_ndde(field, np.array([-2.0]), ConstantHistory([1.0]), 0.6, 4,
                          SolverConfig(steps_per_segment=64))
    t, v = trajectory_series(fine)
    from ndde.training import series_interpolant
    interp = series_interpolant(t, v)
    obs = Observations("grid", nodes=np.arange(2, 33, 2), target_fn=interp)
    cfg = TrainConfig(lr=1e-2, lr_tau=5e-2, epochs=25, seed=0,
                      train_params=False, train_tau=True, tau_min=0.9)
    rec = _fit_trajectory(field, np.array([-2.0]), 1.0, ConstantHistory([1.0]),
                          2, 16, obs, cfg, tau_cap=1.2)
    assert rec.final_tau == pytest.approx(0.9)
    assert any("projected" in w for w in rec.warnings)


# ---------------------------------------------------------------------------
# classifier


def test_readout_alone_separates_linear_features():
    # zero flow: terminal state is the input point itself
    pts = np.array([[1.5, 0.2], [2.0, -0.3], [0.8, 1.1],
                    [-1.2, 0.4], [-2.2, 0.1], [-0.9, -0.8]])
    labs = np.array([1.0, 1.0, 1.0, -1.0, -1.0, -1.0])
    spec = ModelSpec(kind="neural-node", state_dim=2, tau=0.5, n_segments=1,
                     hidden=(4,), steps_per_segment=6)
    cfg = TrainConfig(lr=0.2, epochs=250, seed=1, train_params=False)
    rec = train_classifier(spec, pts, labs, cfg)
    assert rec.tracked["accuracy"][-1] == 1.0
    assert rec.losses[-1] < 0.05


def test_classifier_minibatch_and_anode_padding():
    pts, labs = concentric_dataset(0, n_inner=24, n_outer=24)
    spec = ModelSpec(kind="neural-anode", state_dim=2, tau=0.5, n_segments=1,
                     hidden=(8,), augment=1, steps_per_segment=6)
    cfg = TrainConfig(lr=1e-2, epochs=4, seed=3, batch_size=16)
    rec = train_classifier(spec, pts, labs, cfg)
    assert len(rec.losses) == 4
    assert all(np.isfinite(l) for l in rec.losses)
    assert rec.final_readout.weights[0].shape == (1, 3)


def test_classifier_rejects_mismatched_shapes():
    spec = ModelSpec(kind="neural-node", state_dim=2, tau=0.5, n_segments=1)
    with pytest.raises(InputError):
        train_classifier(spec, np.zeros((4, 3)), np.ones(4), TrainConfig(epochs=1))
    with pytest.raises(InputError):
        train_classifier(spec, np.zeros((4, 2)), np.ones(3), TrainConfig(epochs=1))


# ---------------------------------------------------------------------------
# datasets


def test_concentric_dataset_geometry():
    pts, labs = concentric_dataset(7, n_inner=300, n_outer=400)
    assert pts.shape == (700, 2) and labs.shape == (700,)
    r = np.linalg.norm(pts, axis=1)
    assert np.all(r[labs == 1.0] <= 1.0 + 1e-12)
    assert np.all((r[labs == -1.0] >= 2.0 - 1e-12) & (r[labs == -1.0] <= 3.0 + 1e-12))
    p2, l2 = concentric_dataset(7, n_inner=300, n_outer=400)
    assert np.array_equal(pts, p2) and np.array_equal(labs, l2)


# ---------------------------------------------------------------------------
# delay inference on the simplest delayed line (slow)


@pytest.mark.slow
def test_model_free_delay_inference_linear_system():
    field = ScalarDelayField()
    fine = integrate_ndde(field, np.array([-2.0]), ConstantHistory([1.0]), 1.0, 4,
                          SolverConfig(steps_per_segment=80))
    t, v = trajectory_series(fine)
    # give the interpolant pre-zero coverage for the spline history
    t_all = np.concatenate([np.linspace(-1.6, -0.05, 12), t])
    v_all = np.concatenate([np.ones((12, 1)), v])
    cfg = TrainConfig(lr=2e-3, lr_tau=1e-2, epochs=500, seed=2, tau_min=0.5)
    rec = infer_delay_model_free((8, 8), (t_all, v_all), 1.2, cfg,
                                 n_segments=2, steps_per_segment=16)
    assert abs(rec.final_tau - 1.0) < 0.05
