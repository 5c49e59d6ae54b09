"""Vector fields f(h, h_delayed, t; params) with hand-derived reverse-mode
products, plus constructions that realize specific maps exactly.

All fields accept states of shape (..., d); leading axes are independent
samples.  vjp returns (grad_h, grad_h_delayed, grad_params) where the state
gradients keep the sample axes and the parameter gradient sums over them.
Parameter containers are either MlpParams or plain 1-D arrays; pack/unpack
give every field the same flat-vector optimizer interface.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import DimensionError, DomainError, InputError
from .numerics import MlpParams, init_mlp, mlp_forward, mlp_vjp


class VectorField:
    """Interface stub; concrete fields define eval and vjp."""

    dim = None
    uses_delay = True
    param_names = None

    def eval(self, h, h_delayed, t, params):
        raise NotImplementedError

    def vjp(self, h, h_delayed, t, params, cotangent):
        raise NotImplementedError

    def pack(self, params):
        if isinstance(params, MlpParams):
            return params.flatten()
        return np.asarray(params, dtype=np.float64).copy()

    def unpack(self, flat):
        raise NotImplementedError

    def zero_params(self):
        raise NotImplementedError


def field_eval(field, h, h_delayed, t, params):
    """Field value; thin functional wrapper over the method."""
    return field.eval(h, h_delayed, t, params)


def field_vjp(field, h, h_delayed, t, params, cotangent):
    """Reverse-mode products of the field; wrapper over the method."""
    return field.vjp(h, h_delayed, t, params, cotangent)


def _zeros_mlp(widths):
    ws = [np.zeros((widths[i + 1], widths[i])) for i in range(len(widths) - 1)]
    bs = [np.zeros(widths[i + 1]) for i in range(len(widths) - 1)]
    acts = ["tanh"] * (len(widths) - 2) + ["identity"]
    return MlpParams(ws, bs, acts)


class NeuralDelayField(VectorField):
    """f = net([h, h_delayed]) with a tanh MLP mapping 2d -> d."""

    uses_delay = True

    def __init__(self, state_dim, hidden):
        self.dim = int(state_dim)
        self.hidden = tuple(int(w) for w in hidden)
        self.widths = [2 * self.dim, *self.hidden, self.dim]
        self._template = _zeros_mlp(self.widths)

    def init_params(self, rng):
        return init_mlp(self.widths, rng)

    def eval(self, h, h_delayed, t, params):
        return mlp_forward(params, np.concatenate([h, h_delayed], axis=-1))

    def vjp(self, h, h_delayed, t, params, cotangent):
        x = np.concatenate([h, h_delayed], axis=-1)
        gx, gp = mlp_vjp(params, x, cotangent)
        return gx[..., :self.dim], gx[..., self.dim:], gp

    def unpack(self, flat):
        return self._template.unflatten(flat)

    def zero_params(self):
        return self._template.zeros_like()


class NeuralStateField(VectorField):
    """f = net(h): no delayed dependence, the plain neural ODE right side."""

    uses_delay = False

    def __init__(self, state_dim, hidden):
        self.dim = int(state_dim)
        self.hidden = tuple(int(w) for w in hidden)
        self.widths = [self.dim, *self.hidden, self.dim]
        self._template = _zeros_mlp(self.widths)

    def init_params(self, rng):
        return init_mlp(self.widths, rng)

    def eval(self, h, h_delayed, t, params):
        return mlp_forward(params, h)

    def vjp(self, h, h_delayed, t, params, cotangent):
        gx, gp = mlp_vjp(params, h, cotangent)
        return gx, np.zeros_like(gx), gp

    def unpack(self, flat):
        return self._template.unflatten(flat)

    def zero_params(self):
        return self._template.zeros_like()


class DelayOnlyNeuralField(VectorField):
    """f = net(h_delayed): the state enters only through its own drift."""

    uses_delay = True

    def __init__(self, state_dim, hidden=()):
        self.dim = int(state_dim)
        self.hidden = tuple(int(w) for w in hidden)
        self.widths = [self.dim, *self.hidden, self.dim]
        self._template = _zeros_mlp(self.widths)

    def init_params(self, rng):
        return init_mlp(self.widths, rng)

    def eval(self, h, h_delayed, t, params):
        return mlp_forward(params, h_delayed)

    def vjp(self, h, h_delayed, t, params, cotangent):
        gx, gp = mlp_vjp(params, h_delayed, cotangent)
        return np.zeros_like(gx), gx, gp

    def unpack(self, flat):
        return self._template.unflatten(flat)

    def zero_params(self):
        return self._template.zeros_like()


class MackeyGlassField(VectorField):
    """Scalar feedback law b*x_d / (1 + x_d**n) - g*x, params (b, n, g).

    The delayed state must stay positive: the fractional exponent makes a
    negative base meaningless, so any nonpositive delayed value aborts.
    """

    uses_delay = True
    dim = 1
    n_params = 3
    param_names = ("beta", "exponent", "decay")

    def reference_params(self):
        return np.array([2.0, 10.0, 1.0])

    def _check(self, h_delayed, t):
        if np.any(h_delayed <= 0.0):
            raise DomainError("nonpositive delayed state at t=%r" % t)

    def eval(self, h, h_delayed, t, params):
        b, n, g = params
        self._check(h_delayed, t)
        with np.errstate(over="ignore", invalid="ignore"):
            return b * h_delayed / (1.0 + h_delayed ** n) - g * h

    def vjp(self, h, h_delayed, t, params, cotangent):
        b, n, g = params
        self._check(h_delayed, t)
        with np.errstate(over="ignore", invalid="ignore"):
            xn = h_delayed ** n
            denom = (1.0 + xn) ** 2
            grad_h = -g * cotangent
            grad_hd = cotangent * b * (1.0 + (1.0 - n) * xn) / denom
            gb = np.sum(cotangent * h_delayed / (1.0 + xn))
            gn = np.sum(cotangent * (-b) * h_delayed * xn * np.log(h_delayed) / denom)
            gg = np.sum(cotangent * (-h))
        return grad_h, grad_hd, np.array([gb, gn, gg])

    def unpack(self, flat):
        return np.asarray(flat, dtype=np.float64).copy()

    def zero_params(self):
        return np.zeros(3)


class PopulationField(VectorField):
    """Delayed logistic growth r*x*(1 - x_d), params (r,)."""

    uses_delay = True
    dim = 1
    n_params = 1
    param_names = ("rate",)

    def eval(self, h, h_delayed, t, params):
        (r,) = params
        return r * h * (1.0 - h_delayed)

    def vjp(self, h, h_delayed, t, params, cotangent):
        (r,) = params
        grad_h = cotangent * r * (1.0 - h_delayed)
        grad_hd = cotangent * (-r) * h
        gr = np.sum(cotangent * h * (1.0 - h_delayed))
        return grad_h, grad_hd, np.array([gr])

    def unpack(self, flat):
        return np.asarray(flat, dtype=np.float64).copy()

    def zero_params(self):
        return np.zeros(1)


class LinearTanhField(VectorField):
    """Planar oscillator A @ tanh(h + h_delayed); params are A row-major."""

    uses_delay = True

    def __init__(self, state_dim=2):
        self.dim = int(state_dim)
        self.n_params = self.dim * self.dim

    def default_matrix(self):
        if self.dim != 2:
            raise InputError("default matrix defined for the planar case only")
        return np.array([[-0.1, 2.0], [-2.0, -0.1]])

    def eval(self, h, h_delayed, t, params):
        A = np.asarray(params).reshape(self.dim, self.dim)
        return np.tanh(h + h_delayed) @ A.T

    def vjp(self, h, h_delayed, t, params, cotangent):
        A = np.asarray(params).reshape(self.dim, self.dim)
        u = np.tanh(h + h_delayed)
        gu = (cotangent @ A) * (1.0 - u * u)
        c2 = cotangent.reshape(-1, self.dim)
        u2 = u.reshape(-1, self.dim)
        gA = c2.T @ u2
        return gu, gu.copy(), gA.ravel()

    def unpack(self, flat):
        return np.asarray(flat, dtype=np.float64).copy()

    def zero_params(self):
        return np.zeros(self.n_params)


class ScalarDelayField(VectorField):
    """One dimensional pure-delay coupling a*x_d, params (a,)."""

    uses_delay = True
    dim = 1
    n_params = 1
    param_names = ("gain",)

    def eval(self, h, h_delayed, t, params):
        (a,) = params
        return a * h_delayed

    def vjp(self, h, h_delayed, t, params, cotangent):
        (a,) = params
        grad_h = np.zeros_like(cotangent)
        grad_hd = a * cotangent
        ga = np.sum(cotangent * h_delayed)
        return grad_h, grad_hd, np.array([ga])

    def unpack(self, flat):
        return np.asarray(flat, dtype=np.float64).copy()

    def zero_params(self):
        return np.zeros(1)


class AnnulusField(VectorField):
    """First coordinate drifts by ||h_delayed|| - radius, others frozen.

    With constant history x and a single window of length T the first
    coordinate lands at x_1 + T*(||x|| - radius) exactly.
    """

    uses_delay = True
    n_params = 0

    def __init__(self, radius, state_dim=2):
        if not radius > 0:
            raise InputError("radius must be positive")
        self.radius = float(radius)
        self.dim = int(state_dim)

    def eval(self, h, h_delayed, t, params):
        out = np.zeros_like(h)
        norm = np.sqrt(np.sum(h_delayed * h_delayed, axis=-1))
        out[..., 0] = norm - self.radius
        return out

    def vjp(self, h, h_delayed, t, params, cotangent):
        norm = np.sqrt(np.sum(h_delayed * h_delayed, axis=-1, keepdims=True))
        if np.any(norm == 0.0):
            raise DomainError("norm gradient undefined at the origin")
        grad_hd = cotangent[..., :1] * h_delayed / norm
        return np.zeros_like(cotangent), grad_hd, np.zeros(0)

    def unpack(self, flat):
        return np.zeros(0)

    def zero_params(self):
        return np.zeros(0)


def build_annulus_separator(r1, r2, r3, state_dim=2):
    """Field whose single-window flow separates the disk ||x|| <= r1 from the
    annulus r2 <= ||x|| <= r3 by the sign of the first coordinate.

    Returns (field, tau, horizon) with tau equal to the horizon: run one
    window with constant history equal to the input point.  The threshold
    radius is (r1 + r2) / 2 and the horizon 2*(r2 + r3)/(r2 - r1), which
    lands the inner class at h1 <= r1 - r2 - r3 < 0 and the annulus class
    at h1 >= r2 > 0.
    """
    if not (0 < r1 < r2 < r3):
        raise InputError("radii must satisfy 0 < r1 < r2 < r3")
    horizon = 2.0 * (r2 + r3) / (r2 - r1)
    return AnnulusField((r1 + r2) / 2.0, state_dim), horizon, horizon


def build_universal_representation(g_net, horizon):
    """Field realizing x -> x + horizon * g_net(x) after one window.

    g_net must map d -> d.  Run with tau = horizon, one segment, constant
    history: the delayed argument is frozen at the input, so the drift is
    constant in time and the map is exact up to roundoff.  The returned
    field carries the supplied net as default_params.
    """
    if g_net.in_dim != g_net.out_dim:
        raise DimensionError("net must map a space to itself")
    if not horizon > 0:
        raise InputError("horizon must be positive")
    fld = DelayOnlyNeuralField(g_net.in_dim, hidden=tuple(
        w.shape[0] for w in g_net.weights[:-1]))
    fld.default_params = g_net
    fld.horizon = float(horizon)
    return fld


def augment_state(x, extra_dims):
    """Zero-pad states along the last axis (the appended-coordinate trick)."""
    if extra_dims < 0:
        raise InputError("extra_dims must be >= 0")
    if extra_dims == 0:
        return np.asarray(x, dtype=np.float64).copy()
    x = np.asarray(x, dtype=np.float64)
    pad = np.zeros(x.shape[:-1] + (extra_dims,))
    return np.concatenate([x, pad], axis=-1)


@dataclass
class ModelSpec:
    """Declarative description of a trainable model.

    kind picks the field family; hidden sizes apply to the neural kinds.
    augment appends zero coordinates to the data (neural-anode).  history
    selects how the initial function is built from data.
    """

    kind: str
    state_dim: int
    tau: float
    n_segments: int
    hidden: tuple = (16, 16, 16)
    augment: int = 0
    steps_per_segment: int = 50
    tau_trainable: bool = False
    history: str = "constant"

    _KINDS = ("neural-ndde", "neural-node", "neural-anode",
              "mackey-glass", "population", "linear-tanh", "scalar-delay")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise InputError("unknown model kind %r" % self.kind)
        if self.history not in ("constant", "spline"):
            raise InputError("unknown history mode %r" % self.history)
        if self.augment and self.kind != "neural-anode":
            raise InputError("augment applies to neural-anode only")

    @property
    def flow_dim(self):
        return self.state_dim + (self.augment if self.kind == "neural-anode" else 0)

    def build_field(self):
        if self.kind == "neural-ndde":
            return NeuralDelayField(self.flow_dim, self.hidden)
        if self.kind == "neural-node":
            return NeuralStateField(self.flow_dim, self.hidden)
        if self.kind == "neural-anode":
            return NeuralStateField(self.flow_dim, self.hidden)
        if self.kind == "mackey-glass":
            return MackeyGlassField()
        if self.kind == "population":
            return PopulationField()
        if self.kind == "linear-tanh":
            return LinearTanhField(self.flow_dim)
        if self.kind == "scalar-delay":
            return ScalarDelayField()
        raise InputError(self.kind)
