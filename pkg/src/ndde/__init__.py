"""Constant-delay differential equations: fixed-step solver, exact-structure
adjoint gradients, model library, training loops, and an experiment CLI."""

from .numerics import (
    MlpParams,
    finite_difference_gradient,
    init_mlp,
    load_params,
    mlp_forward,
    mlp_vjp,
    save_params,
)
from .dde_solver import (
    ConstantHistory,
    NaturalCubicSpline,
    OdeHistory,
    SolverConfig,
    SplineHistory,
    Trajectory,
    dense_eval,
    fit_natural_cubic_spline,
    integrate_ndde,
    trajectory_series,
)
from .adjoint import (
    AdjointAudit,
    GradientBundle,
    adjoint_backward,
    observe_trajectory,
)
from .models import (
    AnnulusField,
    DelayOnlyNeuralField,
    LinearTanhField,
    MackeyGlassField,
    ModelSpec,
    NeuralDelayField,
    NeuralStateField,
    PopulationField,
    ScalarDelayField,
    VectorField,
    build_annulus_separator,
    build_universal_representation,
)
from .training import (
    TrainConfig,
    TrainRecord,
    concentric_dataset,
    identify_parameters,
    infer_delay_model_free,
    train_classifier,
    train_regression,
)
from .experiments import (
    EXPERIMENT_NAMES,
    ExperimentSpec,
    RunManifest,
    generate_series,
    run_experiment,
)
from .gradcheck import run_gradient_suite

__version__ = "0.1.0"

__all__ = [
    "AdjointAudit",
    "AnnulusField",
    "ConstantHistory",
    "DelayOnlyNeuralField",
    "EXPERIMENT_NAMES",
    "ExperimentSpec",
    "GradientBundle",
    "LinearTanhField",
    "MackeyGlassField",
    "MlpParams",
    "ModelSpec",
    "NaturalCubicSpline",
    "NeuralDelayField",
    "NeuralStateField",
    "OdeHistory",
    "PopulationField",
    "RunManifest",
    "ScalarDelayField",
    "SolverConfig",
    "SplineHistory",
    "TrainConfig",
    "TrainRecord",
    "Trajectory",
    "VectorField",
    "adjoint_backward",
    "build_annulus_separator",
    "build_universal_representation",
    "concentric_dataset",
    "dense_eval",
    "fit_natural_cubic_spline",
    "finite_difference_gradient",
    "generate_series",
    "identify_parameters",
    "infer_delay_model_free",
    "init_mlp",
    "integrate_ndde",
    "load_params",
    "mlp_forward",
    "mlp_vjp",
    "observe_trajectory",
    "run_experiment",
    "run_gradient_suite",
    "save_params",
    "trajectory_series",
    "train_classifier",
    "train_regression",
]
