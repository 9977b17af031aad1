import numpy as np
import pytest

from anode.core_math import Rng, gaussian_tensor
from anode.dynamics import (Activation, Composite, ConstantField, Conv2dBlock, Dense, Negated,
                            Quadratic, ScalarLinear, ScalarRelu, ZeroField, check_vjp,
                            field_from_spec, linear, matrix_relu, min_abs_preactivation, vjp)


def naive_conv(z, k):
    """Direct loops over output pixels; zero padding, correlation."""
    c, h, w = z.shape
    zp = np.pad(z, ((0, 0), (1, 1), (1, 1)))
    out = np.zeros((k.shape[0], h, w))
    for o in range(k.shape[0]):
        for y in range(h):
            for x in range(w):
                out[o, y, x] = np.sum(k[o] * zp[:, y:y + 3, x:x + 3])
    return out


def test_activation_values():
    x = np.array([-2.0, 0.0, 3.0])
    assert Activation("relu")(x).tolist() == [0.0, 0.0, 3.0]
    assert Activation("leaky_relu")(x).tolist() == [-0.02, 0.0, 3.0]
    assert np.allclose(Activation("softplus")(x), np.log1p(np.exp(x)))
    assert Activation("relu").grad(x).tolist() == [0.0, 0.0, 1.0]
    with pytest.raises(ValueError):
        Activation("tanh")


def test_conv_matches_loops():
    rng = Rng(1)
    k = gaussian_tensor(rng, (2, 2, 3, 3))
    z = gaussian_tensor(rng, (2, 5, 6))
    f = Conv2dBlock(k, "identity")
    assert np.allclose(f(z), naive_conv(z, k), atol=1e-13)


def test_conv_transpose_is_adjoint():
    rng = Rng(2)
    f = Conv2dBlock(gaussian_tensor(rng, (3, 3, 3, 3)), "identity")
    k = f.unpack()["K"]
    x, y = gaussian_tensor(rng, (3, 7, 4)), gaussian_tensor(rng, (3, 7, 4))
    assert np.vdot(f.conv(x, k), y) == pytest.approx(np.vdot(x, f.conv_t(y, k)), rel=1e-12)


def test_conv_operator_norm_matches_dense_matrix():
    f = Conv2dBlock(gaussian_tensor(Rng(3), (1, 1, 3, 3)), "identity")
    shape = (1, 5, 5)
    cols = [f(np.eye(25)[i].reshape(shape)).ravel() for i in range(25)]
    a = np.array(cols).T
    assert f.operator_norm(shape, iterations=500) == pytest.approx(np.linalg.norm(a, 2), rel=1e-6)


@pytest.mark.parametrize("make", [
    lambda r: ScalarLinear(-1.7),
    lambda r: ScalarRelu(-1.0, 10.0),
    lambda r: Quadratic(0.5),
    lambda r: ConstantField([1.0, -2.0, 0.5]),
    lambda r: Dense(gaussian_tensor(r, (3, 3)), gaussian_tensor(r, (3,)), "relu"),
    lambda r: Dense(gaussian_tensor(r, (3, 3)), None, "softplus"),
    lambda r: Dense(gaussian_tensor(r, (3, 3)), gaussian_tensor(r, (3,)), "leaky_relu"),
    lambda r: Composite([Dense(gaussian_tensor(r, (3, 3)), gaussian_tensor(r, (3,)), "identity"),
                         Dense(gaussian_tensor(r, (3, 3)), None, "relu")]),
    lambda r: Negated(Quadratic(2.0)),
])
def test_vjp_against_finite_differences(make):
    rng = Rng(4)
    f = make(rng)
    assert check_vjp(f, gaussian_tensor(rng, (3,)), rng=rng) < 1e-7


def test_conv_vjp_against_finite_differences():
    rng = Rng(5)
    f = Conv2dBlock(gaussian_tensor(rng, (2, 2, 3, 3)), "relu", gaussian_tensor(rng, (2,)))
    assert check_vjp(f, gaussian_tensor(rng, (2, 4, 4)), rng=rng) < 1e-7


def test_dense_batch_axis_sums_theta_gradient():
    rng = Rng(6)
    f = Dense(gaussian_tensor(rng, (2, 3)), gaussian_tensor(rng, (2,)), "relu")
    z, v = gaussian_tensor(rng, (4, 3)), gaussian_tensor(rng, (4, 2))
    total = sum(f.vjp_theta(z[i], None, v[i]) for i in range(4))
    assert np.allclose(f.vjp_theta(z, None, v), total, atol=1e-14)
    assert f(z).shape == (4, 2)


def test_composite_shared_vjp_equals_separate():
    rng = Rng(7)
    f = Composite([Dense(gaussian_tensor(rng, (3, 3)), None, "relu"), linear(gaussian_tensor(rng, (3, 3)))])
    z, v = gaussian_tensor(rng, (3,)), gaussian_tensor(rng, (3,))
    gz, gt = vjp(f, z, None, v)
    assert np.array_equal(gz, f.vjp_z(z, None, v))
    assert np.array_equal(gt, f.vjp_theta(z, None, v))


def test_explicit_theta_overrides_default():
    f = ScalarLinear(2.0)
    assert f(np.array([1.0]), np.array([3.0])).tolist() == [3.0]
    with pytest.raises(ValueError):
        f(np.array([1.0]), np.array([1.0, 2.0]))


def test_zero_field_and_kinks():
    z = np.array([1.0, -1.0])
    assert ZeroField()(z).tolist() == [0.0, 0.0]
    assert min_abs_preactivation(ZeroField(), z) == np.inf
    assert min_abs_preactivation(ScalarRelu(-1.0, 10.0), np.array([0.02])) == pytest.approx(0.2)


def test_check_vjp_rejects_bad_h_and_detects_wrong_vjp():
    class Wrong(Quadratic):
        def _vjp_z(self, z, theta, v):
            return 1.01 * super()._vjp_z(z, theta, v)

    with pytest.raises(ValueError):
        check_vjp(Quadratic(), np.ones(2), h=1e-1)
    assert check_vjp(Wrong(), np.array([0.7, -1.2]), rng=1) > 1e-3


def test_field_from_spec_kinds():
    rng = Rng(8)
    assert field_from_spec({"kind": "scalar_linear", "lam": -100}).theta.tolist() == [-100.0]
    d = field_from_spec({"kind": "dense", "n": 4, "act": "relu", "bias": True}, rng)
    assert d.n_params == 20
    w = field_from_spec({"kind": "matrix_relu", "n": 6, "normalize": True, "seed": 1})
    assert np.linalg.norm(w.unpack()["W"], 2) == pytest.approx(1.0, rel=1e-6)
    c = field_from_spec({"kind": "conv2d_block", "channels": 1, "std": 10.0, "normalize": True,
                         "norm_shape": [1, 8, 8], "seed": 3})
    assert c.operator_norm((1, 8, 8), iterations=300) == pytest.approx(1.0, rel=1e-4)
    comp = field_from_spec({"kind": "residual_composite", "parts": [{"kind": "dense", "n": 2},
                                                                    {"kind": "dense", "n": 2}]}, rng)
    assert comp.n_params == 8
    with pytest.raises(ValueError):
        field_from_spec({"kind": "nope"})


def test_seeded_spec_is_deterministic():
    spec = {"kind": "matrix_relu", "n": 5, "seed": 42}
    assert np.array_equal(field_from_spec(spec).theta, field_from_spec(spec).theta)
    assert matrix_relu(np.eye(2)).act.name == "relu"
