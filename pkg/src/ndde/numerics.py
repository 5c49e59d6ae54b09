"""Dense float64 kernels: validated vectors and matrices, a small tanh MLP
with hand-derived reverse-mode products, central finite differences, and a
plain-text parameter checkpoint format.

Everything here is pure and allocation-fresh: no function mutates its
arguments, repeated calls on equal inputs give bitwise equal outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, InputError, NumericalError

PARAMS_HEADER = "ndde-params v1"


def check_finite(arr, context="array"):
    """Raise NumericalError if arr contains NaN or Inf."""
    if not np.all(np.isfinite(arr)):
        raise NumericalError("non-finite values in %s" % context)


def as_vector(x, name="vector"):
    """Coerce to a finite 1-D float64 array."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError("%s must be 1-D, got shape %s" % (name, v.shape))
    check_finite(v, name)
    return v


def as_matrix(x, name="matrix"):
    """Coerce to a finite 2-D float64 array."""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError("%s must be 2-D, got shape %s" % (name, m.shape))
    check_finite(m, name)
    return m


_ACTIVATIONS = ("tanh", "identity")


@dataclass
class MlpParams:
    """Weights, biases and activation tags of a fully connected net.

    Layer i maps width[i] -> width[i+1] via x @ W_i.T + b_i followed by the
    tagged activation.  Shapes: W_i is (out, in), b_i is (out,).
    """

    weights: list
    biases: list
    activations: list

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise DimensionError("weights, biases, activations must have equal length")
        if len(self.weights) == 0:
            raise DimensionError("at least one layer required")
        prev_out = None
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            w = as_matrix(w, "weight %d" % i)
            b = as_vector(b, "bias %d" % i)
            if b.shape[0] != w.shape[0]:
                raise DimensionError("bias %d length %d != weight rows %d" % (i, b.shape[0], w.shape[0]))
            if prev_out is not None and w.shape[1] != prev_out:
                raise DimensionError("layer %d expects input %d, previous output is %d" % (i, w.shape[1], prev_out))
            if act not in _ACTIVATIONS:
                raise InputError("unknown activation %r" % act)
            prev_out = w.shape[0]
            self.weights[i] = w
            self.biases[i] = b

    @property
    def in_dim(self):
        return self.weights[0].shape[1]

    @property
    def out_dim(self):
        return self.weights[-1].shape[0]

    @property
    def widths(self):
        return [self.in_dim] + [w.shape[0] for w in self.weights]

    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def flatten(self):
        """Row-major concatenation [W_0, b_0, W_1, b_1, ...] as one vector."""
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def unflatten(self, flat):
        """Inverse of flatten against this object's shapes and tags."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_params(),):
            raise DimensionError("expected %d packed values, got shape %s" % (self.n_params(), flat.shape))
        ws, bs, pos = [], [], 0
        for w, b in zip(self.weights, self.biases):
            ws.append(flat[pos:pos + w.size].reshape(w.shape).copy())
            pos += w.size
            bs.append(flat[pos:pos + b.size].copy())
            pos += b.size
        return MlpParams(ws, bs, list(self.activations))

    def zeros_like(self):
        return MlpParams([np.zeros_like(w) for w in self.weights],
                         [np.zeros_like(b) for b in self.biases],
                         list(self.activations))


def init_mlp(widths, rng, hidden_activation="tanh"):
    """Fresh MlpParams for the given width chain.

    Weights are uniform in [-s, s] with s = 1/sqrt(fan_in), biases start at
    zero, hidden layers get hidden_activation and the output layer identity.
    """
    widths = list(widths)
    if len(widths) < 2:
        raise DimensionError("need input and output widths")
    ws, bs, acts = [], [], []
    for i in range(len(widths) - 1):
        fan_in, fan_out = widths[i], widths[i + 1]
        s = 1.0 / np.sqrt(fan_in)
        ws.append(rng.uniform(-s, s, size=(fan_out, fan_in)))
        bs.append(np.zeros(fan_out))
        acts.append(hidden_activation if i < len(widths) - 2 else "identity")
    return MlpParams(ws, bs, acts)


def mlp_forward(params, x):
    """Evaluate the net.  x has shape (..., in_dim); output (..., out_dim)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.in_dim:
        raise DimensionError("input width %d != net input %d" % (x.shape[-1], params.in_dim))
    for w, b, act in zip(params.weights, params.biases, params.activations):
        x = x @ w.T + b
        if act == "tanh":
            x = np.tanh(x)
    return x


def mlp_vjp(params, x, cotangent):
    """Reverse-mode products of the net at x.

    Returns (grad_input, grad_params) where grad_input has the shape of x and
    grad_params is MlpParams-shaped.  cotangent has shape (..., out_dim); any
    leading axes are treated as independent samples and parameter gradients
    are summed over them.
    """
    x = np.asarray(x, dtype=np.float64)
    cot = np.asarray(cotangent, dtype=np.float64)
    if x.shape[-1] != params.in_dim:
        raise DimensionError("input width %d != net input %d" % (x.shape[-1], params.in_dim))
    if cot.shape != x.shape[:-1] + (params.out_dim,):
        raise DimensionError("cotangent shape %s does not match output shape" % (cot.shape,))

    inputs = []     # per layer: the array fed into the affine map
    posts = []      # per layer: activation output (None for identity)
    a = x
    for w, b, act in zip(params.weights, params.biases, params.activations):
        inputs.append(a)
        z = a @ w.T + b
        if act == "tanh":
            a = np.tanh(z)
            posts.append(a)
        else:
            a = z
            posts.append(None)

    delta = cot
    gws, gbs = [None] * len(params.weights), [None] * len(params.weights)
    for i in range(len(params.weights) - 1, -1, -1):
        if params.activations[i] == "tanh":
            delta = delta * (1.0 - posts[i] ** 2)
        # parameter gradients sum over any leading sample axes
        d2 = delta.reshape(-1, delta.shape[-1])
        a2 = inputs[i].reshape(-1, inputs[i].shape[-1])
        gws[i] = d2.T @ a2
        gbs[i] = d2.sum(axis=0)
        delta = delta @ params.weights[i]
    return delta, MlpParams(gws, gbs, list(params.activations))


def finite_difference_gradient(fn, point, step=1e-5):
    """Central-difference gradient of a scalar function.

    Component k is (fn(x + step e_k) - fn(x - step e_k)) / (2 step).  Used
    throughout the tests as the model-independent oracle for every analytic
    gradient path.
    """
    if not step > 0:
        raise InputError("step must be positive")
    x = as_vector(point, "point")
    g = np.zeros_like(x)
    for k in range(x.shape[0]):
        xp = x.copy()
        xp[k] += step
        fp = float(fn(xp))
        xm = x.copy()
        xm[k] -= step
        fm = float(fn(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError("non-finite function value during finite differences")
        g[k] = (fp - fm) / (2.0 * step)
    return g


def _format_row(row):
    return " ".join("%.17g" % v for v in row)


def save_params(path, params):
    """Write MlpParams as portable text.

    Format: a header line, then one block per stored matrix.  Blocks
    alternate weight then bias per layer; a bias is stored as a 1 x n block.
    Values use 17 significant digits so float64 round-trips exactly.
    """
    lines = [PARAMS_HEADER]
    idx = 0
    for w, b in zip(params.weights, params.biases):
        lines.append("layer %d %d %d" % (idx, w.shape[0], w.shape[1]))
        for row in w:
            lines.append(_format_row(row))
        idx += 1
        lines.append("layer %d %d %d" % (idx, 1, b.shape[0]))
        lines.append(_format_row(b))
        idx += 1
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_params(path):
    """Read a file written by save_params back into MlpParams.

    Activation tags are not stored; the standard plan (tanh hidden layers,
    identity output) is reinstated on load.
    """
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != PARAMS_HEADER:
        raise InputError("missing %r header" % PARAMS_HEADER)
    blocks = []
    pos = 1
    while pos < len(lines):
        head = lines[pos].split()
        if len(head) != 4 or head[0] != "layer":
            raise InputError("expected 'layer <i> <rows> <cols>' at line %d" % (pos + 1))
        rows, cols = int(head[2]), int(head[3])
        if rows < 1 or cols < 1:
            raise InputError("bad block shape %dx%d" % (rows, cols))
        pos += 1
        if pos + rows > len(lines):
            raise InputError("truncated block at line %d" % pos)
        block = np.array([[float(v) for v in lines[pos + r].split()] for r in range(rows)])
        if block.shape != (rows, cols):
            raise InputError("block row width mismatch at line %d" % (pos + 1))
        blocks.append(block)
        pos += rows
    if len(blocks) % 2 != 0 or not blocks:
        raise InputError("expected alternating weight and bias blocks")
    ws, bs = [], []
    for i in range(0, len(blocks), 2):
        w, b = blocks[i], blocks[i + 1]
        if b.shape[0] != 1 or b.shape[1] != w.shape[0]:
            raise InputError("bias block %d does not match weight rows" % (i + 1))
        ws.append(w)
        bs.append(b[0])
    acts = ["tanh"] * (len(ws) - 1) + ["identity"]
    return MlpParams(ws, bs, acts)
