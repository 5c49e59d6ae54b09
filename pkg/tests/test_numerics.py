import math

import numpy as np
import pytest

from ndde.errors import DimensionError, InputError, NumericalError
from ndde.numerics import (
    MlpParams,
    as_matrix,
    as_vector,
    finite_difference_gradient,
    init_mlp,
    load_params,
    mlp_forward,
    mlp_vjp,
    save_params,
)


def small_net(seed=0, widths=(2, 4, 2)):
    rng = np.random.default_rng(seed)
    return init_mlp(widths, rng)


def test_as_vector_rejects_nonfinite():
    with pytest.raises(NumericalError):
        as_vector([1.0, np.nan])
    with pytest.raises(NumericalError):
        as_matrix([[np.inf, 0.0]])
    with pytest.raises(DimensionError):
        as_vector([[1.0]])


def test_mlp_forward_tanh_closed_form():
    # one tanh layer with unit weight: output is tanh(x)
    p = MlpParams([np.array([[1.0]])], [np.zeros(1)], ["tanh"])
    out = mlp_forward(p, np.array([0.5]))
    assert abs(out[0] - math.tanh(0.5)) < 1e-15
    assert abs(out[0] - 0.46211715726000974) < 1e-15


def test_mlp_forward_identity_affine():
    w = np.array([[2.0, -1.0], [0.5, 3.0]])
    b = np.array([1.0, -2.0])
    p = MlpParams([w], [b], ["identity"])
    x = np.array([3.0, 4.0])
    assert np.allclose(mlp_forward(p, x), w @ x + b, rtol=0, atol=0)


def test_mlp_forward_batch_matches_loop():
    p = small_net(3)
    xs = np.random.default_rng(1).normal(size=(7, 2))
    batch = mlp_forward(p, xs)
    for i in range(7):
        # batched and single-sample paths may differ by BLAS rounding only
        assert np.allclose(batch[i], mlp_forward(p, xs[i]), rtol=1e-14, atol=1e-15)


def test_mlp_forward_is_pure():
    p = small_net(4)
    x = np.array([0.3, -0.7])
    a = mlp_forward(p, x)
    b = mlp_forward(p, x)
    assert np.array_equal(a, b)


def test_mlp_vjp_against_finite_differences():
    # gradient of sum(c * f(x)) wrt both inputs and parameters
    rng = np.random.default_rng(7)
    for trial in range(12):
        widths = [rng.integers(1, 4), rng.integers(2, 6), rng.integers(1, 4)]
        p = init_mlp(widths, rng)
        x = rng.normal(size=widths[0])
        c = rng.normal(size=widths[-1])

        gx, gp = mlp_vjp(p, x, c)

        fd_x = finite_difference_gradient(lambda v: float(np.dot(c, mlp_forward(p, v))), x, 1e-6)
        assert np.allclose(gx, fd_x, rtol=1e-6, atol=1e-8)

        flat = p.flatten()
        fd_p = finite_difference_gradient(
            lambda v: float(np.dot(c, mlp_forward(p.unflatten(v), x))), flat, 1e-6)
        assert np.allclose(gp.flatten(), fd_p, rtol=1e-6, atol=1e-8)


def test_mlp_vjp_batch_sums_parameter_grads():
    p = small_net(9)
    rng = np.random.default_rng(5)
    xs = rng.normal(size=(6, 2))
    cs = rng.normal(size=(6, 2))
    gx, gp = mlp_vjp(p, xs, cs)
    assert gx.shape == xs.shape
    acc = p.zeros_like().flatten()
    for i in range(6):
        gi, gpi = mlp_vjp(p, xs[i], cs[i])
        assert np.allclose(gx[i], gi, rtol=0, atol=1e-15)
        acc = acc + gpi.flatten()
    assert np.allclose(gp.flatten(), acc, rtol=1e-13, atol=1e-13)


def test_flatten_unflatten_roundtrip_bitwise():
    for seed in range(5):
        p = small_net(seed, widths=(3, 5, 5, 2))
        q = p.unflatten(p.flatten())
        for w0, w1 in zip(p.weights, q.weights):
            assert np.array_equal(w0, w1)
        for b0, b1 in zip(p.biases, q.biases):
            assert np.array_equal(b0, b1)
        assert q.activations == p.activations


def test_unflatten_length_mismatch():
    p = small_net(0)
    with pytest.raises(DimensionError):
        p.unflatten(np.zeros(p.n_params() + 1))


def test_width_chain_validation():
    with pytest.raises(DimensionError):
        MlpParams([np.ones((2, 2)), np.ones((2, 3))], [np.zeros(2), np.zeros(2)],
                  ["tanh", "identity"])
    with pytest.raises(InputError):
        MlpParams([np.ones((1, 1))], [np.zeros(1)], ["relu"])


def test_finite_difference_on_quadratic():
    # exact for quadratics up to roundoff
    A = np.array([[2.0, 0.5], [0.5, 1.0]])

    def f(x):
        return 0.5 * float(x @ A @ x)

    x0 = np.array([1.0, -2.0])
    g = finite_difference_gradient(f, x0, 1e-5)
    assert np.allclose(g, A @ x0, rtol=0, atol=1e-9)


def test_finite_difference_rejects_bad_step_and_nan():
    with pytest.raises(InputError):
        finite_difference_gradient(lambda x: 0.0, np.zeros(1), step=0.0)
    with pytest.raises(NumericalError):
        finite_difference_gradient(lambda x: float("nan"), np.zeros(1))


def test_params_file_roundtrip_exact(tmp_path):
    p = small_net(11, widths=(2, 8, 8, 1))
    # sprinkle awkward magnitudes
    p.weights[0][0, 0] = 1.0 / 3.0
    p.weights[1][3, 4] = -1e-17
    p.biases[0][:] = np.pi
    path = tmp_path / "net.txt"
    save_params(path, p)
    q = load_params(path)
    for w0, w1 in zip(p.weights, q.weights):
        assert np.array_equal(w0, w1)
    for b0, b1 in zip(p.biases, q.biases):
        assert np.array_equal(b0, b1)
    assert q.activations == ["tanh", "tanh", "identity"]


def test_params_file_header_required(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("not a header\nlayer 0 1 1\n0.0\n")
    with pytest.raises(InputError):
        load_params(path)


def test_init_mlp_bounds_and_determinism():
    a = init_mlp([4, 8, 2], np.random.default_rng(42))
    b = init_mlp([4, 8, 2], np.random.default_rng(42))
    for w0, w1 in zip(a.weights, b.weights):
        assert np.array_equal(w0, w1)
    assert np.max(np.abs(a.weights[0])) <= 0.5  # 1/sqrt(4)
    assert np.max(np.abs(a.weights[1])) <= 1.0 / np.sqrt(8)
    assert all(np.all(bias == 0) for bias in a.biases)
    assert a.activations == ["tanh", "identity"]
