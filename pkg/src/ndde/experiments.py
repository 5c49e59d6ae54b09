"""Named experiment recipes with file outputs and a run manifest.

Each experiment regenerates its data, runs whatever solves or training the
recipe calls for, and writes plain data files (CSV, JSON lines) plus a
result.json carrying named boolean checks.  Plots are left to external
tooling; everything here is reproducible byte for byte from the seed.
"""

import hashlib
import json
import os
import time
import zlib
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .dde_solver import (
    ConstantHistory,
    SolverConfig,
    integrate_ndde,
    trajectory_series,
    write_series_csv,
)
from .errors import InputError
from .gradcheck import run_gradient_suite
from .models import (
    LinearTanhField,
    MackeyGlassField,
    ModelSpec,
    PopulationField,
    ScalarDelayField,
    build_annulus_separator,
    build_universal_representation,
)
from .numerics import init_mlp, mlp_forward
from .training import (
    TrainConfig,
    concentric_dataset,
    identify_parameters,
    infer_delay_model_free,
    train_classifier,
    train_regression,
)

EXPERIMENT_NAMES = (
    "fig2-signflip",
    "fig3-annulus",
    "fig4-concentric",
    "fig5-spiral",
    "fig6-population",
    "fig6-mackeyglass",
    "fig7-identify",
    "fig8-delayfree",
    "thm2-universal",
    "gradcheck",
)

ARTIFACT_VERSION = "1.0"


def default_seed(name):
    """Stable per-name seed so a bare run is reproducible with zero flags."""
    return zlib.crc32(name.encode("utf-8")) & 0x7FFFFFFF


def default_out_root():
    return os.environ.get("NDDE_OUT_DIR", "runs")


@dataclass
class ExperimentSpec:
    name: str
    seed: int = None
    out_dir: str = None
    steps_per_segment: int = None  # recipe override, None = recipe default
    quiet: bool = False

    def __post_init__(self):
        if self.name not in EXPERIMENT_NAMES:
            raise InputError("unknown experiment %r; known: %s"
                             % (self.name, ", ".join(EXPERIMENT_NAMES)))
        if self.seed is None:
            self.seed = default_seed(self.name)
        self.seed = int(self.seed)
        if self.out_dir is None:
            self.out_dir = os.path.join(default_out_root(), self.name)

    def payload(self):
        """Hash input: everything that determines the run, minus the paths."""
        return {
            "name": self.name,
            "seed": self.seed,
            "steps_per_segment": self.steps_per_segment,
            "version": ARTIFACT_VERSION,
        }


def spec_hash(payload):
    """Order-independent content hash of a spec payload dict."""
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class RunManifest:
    name: str
    seed: int
    spec_hash: str
    version: str = ARTIFACT_VERSION
    started: str = ""
    finished: str = ""
    files: list = dataclass_field(default_factory=list)
    ok: bool = False
    failure_stage: str = None

    def to_dict(self):
        return {
            "name": self.name,
            "seed": self.seed,
            "spec_hash": self.spec_hash,
            "version": self.version,
            "started": self.started,
            "finished": self.finished,
            "files": sorted(self.files),
            "ok": self.ok,
            "failure_stage": self.failure_stage,
        }


# ---------------------------------------------------------------------------
# output helpers


class _Emitter:
    """Collects every file written under one run directory."""

    def __init__(self, out_dir):
        self.out_dir = out_dir
        self.files = []
        os.makedirs(out_dir, exist_ok=True)

    def path(self, name):
        self.files.append(name)
        return os.path.join(self.out_dir, name)

    def write_json(self, name, obj):
        with open(self.path(name), "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_metrics(self, name, record):
        """One JSON object per epoch; no wall-clock times, so byte-stable."""
        with open(self.path(name), "w") as fh:
            n = len(record.losses)
            for e in range(n):
                row = {"epoch": e, "train_loss": _num(record.losses[e])}
                if record.test_losses:
                    row["test_loss"] = _num(record.test_losses[e])
                if record.nfes:
                    row["nfe"] = record.nfes[e]
                if record.taus:
                    row["tau"] = _num(record.taus[e])
                for key, series in sorted(record.tracked.items()):
                    if e < len(series):
                        row[key] = _num(series[e])
                fh.write(json.dumps(row, sort_keys=True) + "\n")

    def write_points_csv(self, name, header, columns):
        cols = [np.asarray(c, dtype=np.float64).reshape(len(c), -1)
                for c in columns]
        table = np.concatenate(cols, axis=1)
        with open(self.path(name), "w") as fh:
            fh.write(",".join(header) + "\n")
            for row in table:
                fh.write(",".join("%.17g" % x for x in row) + "\n")


def _num(x):
    """JSON-safe float (inf is not valid JSON)."""
    x = float(x)
    if np.isinf(x):
        return "inf" if x > 0 else "-inf"
    if np.isnan(x):
        return "nan"
    return x


def generate_series(field, params, history, tau, n_segments, dt, seed,
                    noise_sd=0.0, fine=10):
    """Sampled trajectory of a reference system, optionally noisy.

    The solve runs on a grid `fine` times denser than the sample spacing,
    and samples are taken at exact solver nodes, so there is no
    interpolation error in the data itself.
    """
    if not dt > 0:
        raise InputError("sample spacing must be positive")
    per_dt = max(1, int(round(tau / dt)))
    steps = per_dt * int(fine)
    traj = integrate_ndde(field, params, history, tau, n_segments,
                          SolverConfig(steps_per_segment=steps))
    t, v = trajectory_series(traj)
    stride = int(fine)
    t, v = t[::stride].copy(), v[::stride].copy()
    if noise_sd > 0.0:
        rng = np.random.default_rng(seed)
        v = v + rng.normal(0.0, noise_sd, v.shape)
    return t, v


# ---------------------------------------------------------------------------
# experiment recipes


def _run_fig2(spec, em):
    field = ScalarDelayField()
    results = {}
    for x0 in (-1.0, 1.0):
        traj = integrate_ndde(field, np.array([-2.0]), ConstantHistory([x0]),
                              1.0, 1, SolverConfig(
                                  steps_per_segment=spec.steps_per_segment or 100))
        t, v = trajectory_series(traj)
        em.path("solution_x0_%+d.csv" % int(x0))
        write_series_csv(os.path.join(em.out_dir, "solution_x0_%+d.csv" % int(x0)),
                         t, v)
        results["x1_from_%+d" % int(x0)] = float(v[-1, 0])
    err_minus = abs(results["x1_from_-1"] - 1.0)
    err_plus = abs(results["x1_from_+1"] + 1.0)
    checks = {"signflip_minus": err_minus < 1e-10,
              "signflip_plus": err_plus < 1e-10}
    return {"values": results,
            "errors": {"from_-1": err_minus, "from_+1": err_plus},
            "checks": checks}


def _run_fig3(spec, em):
    r1, r2, r3 = 1.0, 2.0, 3.0
    field, tau, horizon = build_annulus_separator(r1, r2, r3)
    rng = np.random.default_rng(spec.seed)
    th = rng.uniform(0.0, 2.0 * np.pi, 1000)
    rad = r1 * np.sqrt(rng.uniform(0.0, 1.0, 1000))
    inner = np.column_stack([rad * np.cos(th), rad * np.sin(th)])
    th = rng.uniform(0.0, 2.0 * np.pi, 1000)
    rad = np.sqrt(r2 ** 2 + rng.uniform(0.0, 1.0, 1000) * (r3 ** 2 - r2 ** 2))
    outer = np.column_stack([rad * np.cos(th), rad * np.sin(th)])
    pts = np.concatenate([inner, outer])

    m = spec.steps_per_segment or 50
    traj = integrate_ndde(field, np.zeros(0), ConstantHistory(pts), tau, 1,
                          SolverConfig(steps_per_segment=m))
    h_end = traj.checkpoints[-1]
    margins = h_end[:, 0]
    m_in, m_out = margins[:1000], margins[1000:]

    em.write_points_csv("transformed.csv", ["x1", "x2", "h1_in", "h1_out_flag"],
                        [pts[:, 0], pts[:, 1], margins,
                         np.concatenate([np.zeros(1000), np.ones(1000)])])
    inner_bound = r1 - r2 - r3
    checks = {
        "inner_below_bound": bool(np.max(m_in) <= inner_bound + 1e-8),
        "annulus_above_bound": bool(np.min(m_out) >= r2 - 1e-8),
        "linearly_separated": bool(np.max(m_in) < 0.0 < np.min(m_out)),
    }
    return {"values": {"inner_max": float(np.max(m_in)),
                       "annulus_min": float(np.min(m_out)),
                       "inner_bound": inner_bound, "annulus_bound": r2},
            "checks": checks}


def _run_fig4(spec, em):
    pts, labs = concentric_dataset(seed=spec.seed)
    em.write_points_csv("dataset.csv", ["x1", "x2", "label"],
                        [pts[:, 0], pts[:, 1], labs])
    m = spec.steps_per_segment or 20
    records, values, checks = {}, {}, {}
    for kind, tag in (("neural-ndde", "ndde"), ("neural-node", "node")):
        model = ModelSpec(kind=kind, state_dim=2, tau=1.0, n_segments=1,
                          hidden=(16, 16, 16), steps_per_segment=m)
        cfg = TrainConfig(lr=3e-3, epochs=500, seed=spec.seed)
        rec = train_classifier(model, pts, labs, cfg)
        records[tag] = (model, rec)
        em.write_metrics("%s_metrics.jsonl" % tag, rec)
        values["%s_final_loss" % tag] = float(rec.losses[-1])
        values["%s_accuracy" % tag] = rec.tracked["accuracy"][-1]
        _emit_decision_grid(em, "%s_decision.csv" % tag, model, rec)
    ndde_loss = values["ndde_final_loss"]
    node_loss = values["node_final_loss"]
    checks["ndde_under_1e-2"] = ndde_loss < 1e-2
    checks["node_at_least_5x"] = node_loss >= 5.0 * ndde_loss
    values["loss_ratio"] = node_loss / ndde_loss
    return {"values": values, "checks": checks}


def _emit_decision_grid(em, name, model, rec, lo=-4.0, hi=4.0, res=200):
    """Classifier score on a dense grid, for external boundary plots."""
    g = np.linspace(lo, hi, res)
    xx, yy = np.meshgrid(g, g)
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    field = model.build_field()
    fill = model.flow_dim - pts.shape[1]
    if fill > 0:
        pts_in = np.concatenate([pts, np.zeros((len(pts), fill))], axis=1)
    else:
        pts_in = pts
    traj = integrate_ndde(field, rec.final_params, ConstantHistory(pts_in),
                          model.tau, model.n_segments,
                          SolverConfig(steps_per_segment=model.steps_per_segment))
    scores = mlp_forward(rec.final_readout, traj.checkpoints[-1])[:, 0]
    em.write_points_csv(name, ["x1", "x2", "score"],
                        [pts[:, 0], pts[:, 1], scores])


def _run_fig5(spec, em):
    # delay comparable to the rotation period makes the radius breathe, so
    # the planar curve keeps re-entering regions it already visited with a
    # different velocity; a planar autonomous field cannot thread those
    # self-intersections and parks at an O(0.1) loss
    field = LinearTanhField(2)
    A = field.default_matrix().ravel()
    tau, n_data = 3.5, 4
    hist = ConstantHistory([0.1, 0.0])
    t, v = generate_series(field, A, hist, tau, n_data, dt=tau / 10.0,
                           seed=spec.seed)
    em.path("series.csv")
    write_series_csv(os.path.join(em.out_dir, "series.csv"), t, v)
    keep = t > 0
    ts, vs = t[keep], v[keep]

    m = spec.steps_per_segment or 20
    values, checks = {}, {}
    for kind, tag in (("neural-ndde", "ndde"), ("neural-node", "node")):
        model = ModelSpec(kind=kind, state_dim=2, tau=tau, n_segments=n_data,
                          hidden=(16, 16, 16), steps_per_segment=m)
        cfg = TrainConfig(lr=3e-3, epochs=800, seed=spec.seed)
        rec = train_regression(model, (ts, vs), cfg, history=hist)
        em.write_metrics("%s_metrics.jsonl" % tag, rec)
        _emit_fit_csv(em, "%s_fit.csv" % tag, model, rec, hist, ts)
        values["%s_final_loss" % tag] = float(rec.losses[-1])
        values["%s_best_loss" % tag] = float(rec.best_loss)
    checks["ndde_under_1e-2"] = values["ndde_final_loss"] < 1e-2
    checks["node_above_0.2"] = values["node_final_loss"] > 0.2
    return {"values": values, "checks": checks}


def _emit_fit_csv(em, name, model, rec, history, ts):
    from .dde_solver import dense_eval
    field = model.build_field()
    traj = integrate_ndde(field, rec.final_params, history, model.tau,
                          model.n_segments,
                          SolverConfig(steps_per_segment=model.steps_per_segment))
    fit = np.stack([dense_eval(traj, min(float(x), traj.t_end)) for x in ts])
    em.write_points_csv(name, ["t"] + ["x%d" % i for i in range(fit.shape[1])],
                        [ts, fit])


def _fit_and_predict(spec, em, field_true, params_true, tau, hist, state_dim,
                     train_windows, total_windows, dt, epochs, m, lr=3e-3):
    """Shared fig6 recipe: fit on a prefix, score prediction on the rest."""
    t, v = generate_series(field_true, params_true, hist, tau, total_windows,
                           dt=dt, seed=spec.seed)
    em.path("series.csv")
    write_series_csv(os.path.join(em.out_dir, "series.csv"), t, v)
    t_train = train_windows * tau
    fit_mask = (t > 0) & (t <= t_train + 1e-9)
    vals = {}
    for kind, tag in (("neural-ndde", "ndde"), ("neural-node", "node")):
        model = ModelSpec(kind=kind, state_dim=state_dim, tau=tau,
                          n_segments=train_windows, steps_per_segment=m,
                          hidden=(16, 16, 16))
        cfg = TrainConfig(lr=lr, epochs=epochs, seed=spec.seed)
        rec = train_regression(model, (t[fit_mask], v[fit_mask]), cfg,
                               history=hist)
        em.write_metrics("%s_metrics.jsonl" % tag, rec)
        vals["%s_train_loss" % tag] = float(rec.losses[-1])

        # roll the fitted model over the full span and score the tail
        model_full = ModelSpec(kind=kind, state_dim=state_dim, tau=tau,
                               n_segments=total_windows, steps_per_segment=m,
                               hidden=(16, 16, 16))
        field = model_full.build_field()
        traj = integrate_ndde(field, rec.final_params, hist, tau,
                              total_windows, SolverConfig(steps_per_segment=m))
        from .dde_solver import dense_eval
        # test losses over windows of increasing length past the fitted span
        for label, span in (("tau", 1.0), ("2tau", 2.0), ("5tau", 5.0)):
            mask = (t > t_train) & (t <= t_train + span * tau + 1e-9)
            pred = np.stack([dense_eval(traj, float(x)) for x in t[mask]])
            vals["%s_pred_%s" % (tag, label)] = float(
                np.mean((pred - v[mask]) ** 2))
        _emit_fit_csv(em, "%s_rollout.csv" % tag, model_full, rec, hist,
                      t[t > 0])
    for label in ("tau", "2tau", "5tau"):
        vals["pred_ratio_%s" % label] = (
            vals["node_pred_%s" % label]
            / max(vals["ndde_pred_%s" % label], 1e-300))
    return vals


def _run_fig6_population(spec, em):
    m = spec.steps_per_segment or 20
    vals = _fit_and_predict(spec, em, PopulationField(), np.array([1.8]),
                            1.0, ConstantHistory([0.5]), 1,
                            train_windows=5, total_windows=10, dt=0.1,
                            epochs=600, m=m)
    checks = {"ndde_trains": vals["ndde_train_loss"] < 1e-3,
              "node_stuck": vals["node_train_loss"] > 10.0 * vals["ndde_train_loss"],
              "ndde_predicts": vals["pred_ratio_5tau"] > 5.0}
    return {"values": vals, "checks": checks}


def _run_fig6_mackeyglass(spec, em):
    m = spec.steps_per_segment or 20
    vals = _fit_and_predict(spec, em, MackeyGlassField(),
                            np.array([4.0, 9.65, 2.0]), 1.0,
                            ConstantHistory([0.5]), 1,
                            train_windows=5, total_windows=10, dt=0.1,
                            epochs=800, m=m)
    checks = {"ndde_trains": vals["ndde_train_loss"] < 1e-2,
              "node_train_stuck": vals["node_train_loss"] > 5.0 * vals["ndde_train_loss"],
              "ndde_predicts_short": vals["pred_ratio_tau"] > 2.0}
    return {"values": vals, "checks": checks}


def _run_fig7(spec, em):
    field = MackeyGlassField()
    true_p = field.reference_params()
    tau_true = 3.18
    gen = integrate_ndde(field, true_p, ConstantHistory([0.5]), tau_true, 8,
                         SolverConfig(steps_per_segment=400))
    t, v = trajectory_series(gen)
    # recenter on an exact sample so the pre-zero stretch seeds the history
    center = t[np.argmin(np.abs(t - 10.0))]
    t = t - center
    em.path("series.csv")
    write_series_csv(os.path.join(em.out_dir, "series.csv"), t, v)

    values, checks = {}, {}
    for dl, tol, m_train, epochs in ((0.3, 0.02, 48, 1500),
                                     (0.5, 0.05, 40, 2400)):
        cfg = TrainConfig(lr=1e-2, lr_tau=1e-2, epochs=epochs, seed=spec.seed,
                          train_tau=True, tau_min=1.5)
        rec = identify_parameters(field, (t, v), (1.0 + dl) * true_p,
                                  (1.0 + dl) * tau_true, cfg, n_segments=3,
                                  steps_per_segment=spec.steps_per_segment or m_train,
                                  true_params=true_p, true_tau=tau_true)
        tag = "dl%02d" % int(dl * 10)
        em.write_metrics("%s_metrics.jsonl" % tag, rec)
        devs = {name: abs(rec.tracked[name + "_norm"][-1] - 1.0)
                for name in field.param_names}
        devs["tau"] = abs(rec.tracked["tau_norm"][-1] - 1.0)
        values["%s_deviations" % tag] = devs
        checks["%s_within_%g%%" % (tag, tol * 100)] = max(devs.values()) <= tol
    return {"values": values, "checks": checks}


def _run_fig8(spec, em):
    field = MackeyGlassField()
    tau_true = 3.18
    gen = integrate_ndde(field, field.reference_params(), ConstantHistory([0.5]),
                         tau_true, 10, SolverConfig(steps_per_segment=400))
    t, v = trajectory_series(gen)
    em.path("series.csv")
    write_series_csv(os.path.join(em.out_dir, "series.csv"), t, v)

    starts = np.linspace(8.0, 25.0, 16)
    obs_times = np.arange(1, 21) * 0.125
    values, checks = {}, {}
    for dl, assert_band in ((0.2, True), (0.4, True), (0.8, False)):
        cfg = TrainConfig(lr=3e-3, lr_tau=1e-2, epochs=1200, seed=spec.seed,
                          tau_min=1.5)
        rec = infer_delay_model_free(
            16, (t, v), (1.0 + dl) * tau_true, cfg, n_segments=1,
            steps_per_segment=spec.steps_per_segment or 32,
            window_starts=starts, back_span=7.0, obs_times=obs_times,
            scan_candidates=8, scan_epochs=300)
        tag = "dl%02d" % int(dl * 10)
        em.write_metrics("%s_metrics.jsonl" % tag, rec)
        values["%s_final_tau" % tag] = float(rec.final_tau)
        values["%s_scan" % tag] = [[float(a), float(b)] for a, b in rec.scan]
        in_band = 0.95 * tau_true <= rec.final_tau <= 1.05 * tau_true
        values["%s_in_band" % tag] = bool(in_band)
        if assert_band:
            checks["%s_within_5%%" % tag] = bool(in_band)
        else:
            checks["%s_completed" % tag] = len(rec.losses) > 0
    return {"values": values, "checks": checks}


def _run_thm2(spec, em):
    horizon = 2.0
    g = init_mlp([1, 1], np.random.default_rng(0), hidden_activation="identity")
    g.weights[0][0, 0] = -2.0 / horizon
    g.biases[0][0] = 0.0
    field = build_universal_representation(g, horizon)
    xs = np.linspace(-1.0, 1.0, 41).reshape(-1, 1)
    traj = integrate_ndde(field, field.default_params, ConstantHistory(xs),
                          field.horizon, 1,
                          SolverConfig(steps_per_segment=spec.steps_per_segment or 50))
    out = traj.checkpoints[-1]
    err = float(np.max(np.abs(out - (-xs))))
    em.write_points_csv("mapping.csv", ["x", "mapped"], [xs, out])
    checks = {"maps_to_negation": err < 1e-8}
    return {"values": {"max_error": err,
                       "endpoints": {"minus_one": float(out[0, 0]),
                                     "plus_one": float(out[-1, 0])}},
            "checks": checks}


def _run_gradcheck(spec, em):
    results = run_gradient_suite(seed=spec.seed,
                                 steps=spec.steps_per_segment or 64)
    with open(em.path("gradcheck.jsonl"), "w") as fh:
        for r in results:
            fh.write(json.dumps({"label": r.label, "passed": r.passed,
                                 "max_rel_err": r.max_rel_err,
                                 "max_abs_err": r.max_abs_err},
                                sort_keys=True) + "\n")
    worst = max(r.worst_rel() for r in results)
    checks = {"all_instances_pass": all(r.passed for r in results)}
    return {"values": {"instances": len(results), "worst_rel_err": worst},
            "checks": checks}


_RUNNERS = {
    "fig2-signflip": _run_fig2,
    "fig3-annulus": _run_fig3,
    "fig4-concentric": _run_fig4,
    "fig5-spiral": _run_fig5,
    "fig6-population": _run_fig6_population,
    "fig6-mackeyglass": _run_fig6_mackeyglass,
    "fig7-identify": _run_fig7,
    "fig8-delayfree": _run_fig8,
    "thm2-universal": _run_thm2,
    "gradcheck": _run_gradcheck,
}


def run_experiment(spec):
    """Execute one named recipe; returns the manifest (also written to disk)."""
    em = _Emitter(spec.out_dir)
    manifest = RunManifest(name=spec.name, seed=spec.seed,
                           spec_hash=spec_hash(spec.payload()))
    manifest.started = time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())
    stage = "setup"
    try:
        stage = "run"
        result = _RUNNERS[spec.name](spec, em)
        stage = "report"
        result["ok"] = all(result["checks"].values())
        result["seed"] = spec.seed
        result["name"] = spec.name
        em.write_json("result.json", result)
        manifest.ok = result["ok"]
    except Exception as exc:
        manifest.failure_stage = stage
        manifest.ok = False
        em.write_json("failure.json",
                      {"stage": stage, "error": "%s: %s"
                       % (type(exc).__name__, exc)})
        _finish(manifest, em)
        raise
    _finish(manifest, em)
    return manifest


def _finish(manifest, em):
    manifest.finished = time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())
    manifest.files = sorted(set(em.files) | {"manifest.json"})
    with open(os.path.join(em.out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
