"""Command-line surface: solves, gradient checks, training, experiments.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error,
3 an acceptance check ran and failed.
"""

import argparse
import os
import sys

import numpy as np

from .dde_solver import ConstantHistory, SolverConfig, integrate_ndde, \
    trajectory_series, write_series_csv
from .errors import ConfigError
from .experiments import (
    EXPERIMENT_NAMES,
    ExperimentSpec,
    default_out_root,
    generate_series,
    run_experiment,
)
from .gradcheck import run_gradient_suite
from .models import (
    LinearTanhField,
    MackeyGlassField,
    ModelSpec,
    PopulationField,
    ScalarDelayField,
)
from .training import (
    TrainConfig,
    concentric_dataset,
    identify_parameters,
    train_classifier,
    train_regression,
)

_SYSTEMS = {
    "mackey-glass": MackeyGlassField,
    "population": PopulationField,
    "scalar-delay": ScalarDelayField,
    "linear-tanh": LinearTanhField,
}


# ---------------------------------------------------------------------------
# config files: [section] headers, key = value, # comments


def parse_config(path, schema):
    """Flat INI-like file -> {section: {key: typed value}}.

    schema maps section -> {key: converter}.  Unknown sections or keys are
    errors; a typo must never be silently ignored.
    """
    if not os.path.exists(path):
        raise ConfigError("config file %r does not exist" % path)
    out = {}
    section = None
    with open(path) as fh:
        for ln, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip()
                if section not in schema:
                    raise ConfigError("%s:%d: unknown section [%s]"
                                      % (path, ln, section))
                out.setdefault(section, {})
                continue
            if "=" not in line:
                raise ConfigError("%s:%d: expected key = value" % (path, ln))
            if section is None:
                raise ConfigError("%s:%d: key outside any [section]" % (path, ln))
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in schema[section]:
                raise ConfigError("%s:%d: unknown key %r in [%s]"
                                  % (path, ln, key, section))
            try:
                out[section][key] = schema[section][key](val)
            except ConfigError:
                raise
            except Exception:
                raise ConfigError("%s:%d: bad value %r for %s" % (path, ln, val, key))
    return out


def _floats(val):
    return [float(x) for x in val.split(",") if x.strip() != ""]


def _ints(val):
    return [int(x) for x in val.split(",") if x.strip() != ""]


def _bool(val):
    low = val.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ConfigError("not a boolean: %r" % val)


# ---------------------------------------------------------------------------
# subcommands


def _out_dir(args, leaf):
    out = args.out or os.path.join(default_out_root(), leaf)
    os.makedirs(out, exist_ok=True)
    return out


def _say(args, msg):
    if not args.quiet:
        print(msg)


def _cmd_integrate(args):
    schema = {"integrate": {
        "system": str, "tau": float, "n_segments": int,
        "steps_per_segment": int, "history": _floats, "params": _floats,
    }}
    cfg = {"integrate": {}}
    if args.config:
        cfg = parse_config(args.config, schema)
    sec = cfg.get("integrate", {})
    name = sec.get("system", "mackey-glass")
    if name not in _SYSTEMS:
        raise ConfigError("unknown system %r; known: %s"
                          % (name, ", ".join(sorted(_SYSTEMS))))
    field = _SYSTEMS[name]()
    params = np.asarray(sec.get("params", field.reference_params()
                                if hasattr(field, "reference_params")
                                else np.zeros(field.n_params)), dtype=float)
    tau = sec.get("tau", 3.18 if name == "mackey-glass" else 1.0)
    n_seg = sec.get("n_segments", 4)
    m = args.steps_per_segment or sec.get("steps_per_segment", 100)
    hist_val = sec.get("history", [0.5] * field.dim)
    traj = integrate_ndde(field, params, ConstantHistory(hist_val), tau,
                          n_seg, SolverConfig(steps_per_segment=m))
    t, v = trajectory_series(traj)
    out = _out_dir(args, "integrate")
    path = os.path.join(out, "solution.csv")
    write_series_csv(path, t, v)
    _say(args, "wrote %s  (%d samples, nfe %d)" % (path, len(t), traj.nfe))
    return 0


def _cmd_gradcheck(args):
    m = args.steps_per_segment or 64
    results = run_gradient_suite(seed=args.seed or 0, steps=m)
    worst = 0.0
    for r in results:
        worst = max(worst, r.worst_rel())
        _say(args, "%-34s %s  worst rel %.3e"
             % (r.label, "ok" if r.passed else "FAIL", r.worst_rel()))
    ok = all(r.passed for r in results)
    _say(args, "%d instances, worst relative error %.3e" % (len(results), worst))
    return 0 if ok else 3


_TRAIN_SCHEMA = {"train": {
    "task": str, "kind": str, "epochs": int, "lr": float, "seed": int,
    "steps_per_segment": int, "hidden": _ints, "tau": float,
    "n_segments": int,
}}


def _cmd_train(args):
    if not args.config:
        raise ConfigError("train needs --config with a [train] section")
    sec = parse_config(args.config, _TRAIN_SCHEMA).get("train", {})
    task = sec.get("task", "concentric")
    kind = sec.get("kind", "neural-ndde")
    seed = args.seed if args.seed is not None else sec.get("seed", 0)
    epochs = sec.get("epochs", 100)
    hidden = tuple(sec.get("hidden", [16, 16, 16]))
    m = args.steps_per_segment or sec.get("steps_per_segment", 20)
    cfg = TrainConfig(lr=sec.get("lr", 3e-3), epochs=epochs, seed=seed)
    out = _out_dir(args, "train")

    if task == "concentric":
        pts, labs = concentric_dataset(seed=seed)
        model = ModelSpec(kind=kind, state_dim=2, tau=sec.get("tau", 1.0),
                          n_segments=sec.get("n_segments", 1), hidden=hidden,
                          steps_per_segment=m)
        rec = train_classifier(model, pts, labs, cfg)
    elif task == "population":
        field = PopulationField()
        tau = sec.get("tau", 1.0)
        n = sec.get("n_segments", 5)
        t, v = generate_series(field, np.array([1.8]), ConstantHistory([0.5]),
                               tau, n, dt=0.1, seed=seed)
        model = ModelSpec(kind=kind, state_dim=1, tau=tau, n_segments=n,
                          hidden=hidden, steps_per_segment=m)
        rec = train_regression(model, (t[t > 0], v[t > 0]), cfg,
                               history=ConstantHistory([0.5]))
    else:
        raise ConfigError("unknown train task %r (concentric, population)" % task)

    from .experiments import _Emitter
    em = _Emitter(out)
    em.write_metrics("metrics.jsonl", rec)
    _say(args, "final loss %.6e after %d epochs -> %s"
         % (rec.losses[-1], len(rec.losses), os.path.join(out, "metrics.jsonl")))
    return 0


_IDENTIFY_SCHEMA = {"identify": {
    "dl": float, "epochs": int, "lr": float, "lr_tau": float,
    "steps_per_segment": int, "n_segments": int, "seed": int,
}}


def _cmd_identify(args):
    sec = {}
    if args.config:
        sec = parse_config(args.config, _IDENTIFY_SCHEMA).get("identify", {})
    dl = sec.get("dl", 0.2)
    seed = args.seed if args.seed is not None else sec.get("seed", 0)
    field = MackeyGlassField()
    true_p = field.reference_params()
    tau_true = 3.18
    gen = integrate_ndde(field, true_p, ConstantHistory([0.5]), tau_true, 8,
                         SolverConfig(steps_per_segment=400))
    t, v = trajectory_series(gen)
    center = t[np.argmin(np.abs(t - 10.0))]
    cfg = TrainConfig(lr=sec.get("lr", 1e-2), lr_tau=sec.get("lr_tau", 1e-2),
                      epochs=sec.get("epochs", 600), seed=seed,
                      train_tau=True, tau_min=1.5)
    rec = identify_parameters(
        field, (t - center, v), (1.0 + dl) * true_p, (1.0 + dl) * tau_true,
        cfg, n_segments=sec.get("n_segments", 3),
        steps_per_segment=args.steps_per_segment or sec.get("steps_per_segment", 48),
        true_params=true_p, true_tau=tau_true)
    out = _out_dir(args, "identify")
    from .experiments import _Emitter
    em = _Emitter(out)
    em.write_metrics("metrics.jsonl", rec)
    devs = {nm: abs(rec.tracked[nm + "_norm"][-1] - 1.0)
            for nm in field.param_names}
    devs["tau"] = abs(rec.tracked["tau_norm"][-1] - 1.0)
    for nm, dv in sorted(devs.items()):
        _say(args, "%-10s off by %.3e" % (nm, dv))
    _say(args, "metrics -> %s" % os.path.join(out, "metrics.jsonl"))
    return 0


def _cmd_experiment(args):
    if args.action == "list":
        for name in EXPERIMENT_NAMES:
            print(name)
        return 0
    spec = ExperimentSpec(name=args.name, seed=args.seed, out_dir=args.out,
                          steps_per_segment=args.steps_per_segment,
                          quiet=args.quiet)
    manifest = run_experiment(spec)
    _say(args, "%s: %s  (outputs in %s)"
         % (spec.name, "ok" if manifest.ok else "FAILED CHECKS", spec.out_dir))
    return 0 if manifest.ok else 3


# ---------------------------------------------------------------------------


def _build_parser():
    p = argparse.ArgumentParser(
        prog="ndde",
        description="delay differential equation solver, adjoint gradients, "
                    "and the reproduction experiments")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="key = value config file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--steps-per-segment", type=int, default=None,
                        dest="steps_per_segment")
        sp.add_argument("--quiet", action="store_true")

    common(sub.add_parser("integrate", help="one solve, written as CSV"))
    common(sub.add_parser("gradcheck", help="adjoint vs finite differences"))
    common(sub.add_parser("train", help="fit a model per config"))
    common(sub.add_parser("identify", help="recover Mackey-Glass constants"))

    pe = sub.add_parser("experiment", help="run or list the named experiments")
    pe.add_argument("action", choices=["run", "list"])
    pe.add_argument("name", nargs="?", default=None,
                    choices=list(EXPERIMENT_NAMES) + [None])
    common(pe)
    return p


_DISPATCH = {
    "integrate": _cmd_integrate,
    "gradcheck": _cmd_gradcheck,
    "train": _cmd_train,
    "identify": _cmd_identify,
    "experiment": _cmd_experiment,
}


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command == "experiment" and args.action == "run" and not args.name:
        print("experiment run needs a name; see `ndde experiment list`",
              file=sys.stderr)
        return 2
    try:
        return _DISPATCH[args.command](args)
    except ConfigError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 1
    except Exception as exc:
        print("error: %s: %s" % (type(exc).__name__, exc), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
