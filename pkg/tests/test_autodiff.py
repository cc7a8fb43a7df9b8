import numpy as np
import pytest

from samlab import autodiff as ad
from samlab.autodiff import NonFiniteError, Tensor
from samlab.diffops import (
    DiffFunction,
    dense_hessian,
    finite_diff_grad,
    from_scalar,
    grad,
    hvp,
    quadratic,
)
from samlab.params import ParamLayout, ParamVector

from conftest import mlps_with_kink_margin, random_mlp, relu_preact_margin


def pv(values, layout=None):
    values = np.asarray(values, dtype=float)
    layout = layout or ParamLayout.from_shapes([("x", values.shape)])
    return ParamVector(values, layout)


class TestGrad:
    def test_quadratic_gradient(self):
        f = quadratic(np.eye(2))
        g = grad(f, pv([1.0, 2.0], f.layout))
        assert np.allclose(g.data, [1.0, 2.0])

    def test_constant_gradient_is_zero(self):
        f = from_scalar(lambda t: t * 0.0 + 3.0)
        g = grad(f, pv([5.0], f.layout))
        assert np.allclose(g.data, 0.0)

    def test_mlp_matches_finite_differences(self):
        # one mid-size net, checked tightly away from ReLU kinks
        spec, params, fn, X, _ = random_mlp(seed=11, widths=(6, 8, 1))
        assert relu_preact_margin(spec, params, X) > 1e-3
        g = grad(fn, params)
        gf = finite_diff_grad(fn, params, h=1e-5)
        assert (g - gf).norm() / g.norm() <= 1e-6

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_fd_across_seeds(self, seed):
        spec, params, fn, X, _ = random_mlp(seed=seed)
        if relu_preact_margin(spec, params, X) < 1e-3:
            pytest.skip("sampled a near-kink configuration")
        g = grad(fn, params)
        gf = finite_diff_grad(fn, params)
        assert (g - gf).norm() / max(g.norm(), 1e-12) <= 1e-5

    def test_smooth_function_tight_match(self):
        # tanh network built directly on the tape: smooth everywhere
        layout = ParamLayout.from_shapes([("w", (4, 6)), ("v", (6,))])

        def build(leaves):
            h = ad.tanh(Tensor(X) @ leaves["w"])
            return (h @ leaves["v"]).sum()

        rng = np.random.default_rng(7)
        X = rng.normal(size=(5, 4))
        f = DiffFunction(build, layout)
        x = ParamVector(rng.normal(size=layout.size), layout)
        for _ in range(10):
            x = ParamVector(rng.normal(size=layout.size), layout)
            g, gf = grad(f, x), finite_diff_grad(f, x)
            assert (g - gf).norm() / g.norm() <= 1e-5

    def test_relu_subgradient_at_zero_is_zero(self):
        f = from_scalar(ad.relu)
        g = grad(f, pv([0.0], f.layout))
        assert g.data[0] == 0.0

    def test_nonfinite_error_carries_name(self):
        layout = ParamLayout.from_shapes([("w", (2,))])

        def build(leaves):
            return ad.exp(leaves["w"] * 1e6).sum()

        with pytest.raises(NonFiniteError) as err:
            grad(DiffFunction(build, layout), pv([1.0, 1.0], layout))
        assert err.value.tensor_name


class TestFiniteDiff:
    def test_cubic_derivative(self):
        f = from_scalar(lambda t: t * t * t)
        g = finite_diff_grad(f, pv([2.0], f.layout), h=1e-4)
        assert abs(g.data[0] - 12.0) <= 1e-6

    def test_linear_slope_exact(self):
        slope = np.array([3.0, -1.5, 0.25])
        layout = ParamLayout.from_shapes([("x", (3,))])
        f = DiffFunction(lambda leaves: (leaves["x"] * slope).sum(), layout)
        g = finite_diff_grad(f, pv([0.3, -2.0, 4.0], layout))
        assert np.allclose(g.data, slope, atol=1e-9)

    def test_rejects_nonpositive_step(self):
        f = from_scalar(lambda t: t * t)
        with pytest.raises(ValueError):
            finite_diff_grad(f, pv([1.0], f.layout), h=0.0)


class TestHvp:
    def test_diagonal_quadratic(self):
        f = quadratic(np.diag([1.0, 3.0]))
        out = hvp(f, pv([1.0, 2.0], f.layout), pv([0.0, 1.0], f.layout))
        assert np.allclose(out.data, [0.0, 3.0], atol=1e-4)

    def test_eigenvector_direction_stays_parallel(self):
        H = np.array([[2.0, 1.0], [1.0, 2.0]])
        f = quadratic(H)
        w, V = np.linalg.eigh(H)
        v = pv(V[:, -1], f.layout)
        out = hvp(f, pv([0.5, -0.2], f.layout), v)
        cos = out.dot(v) / (out.norm() * v.norm())
        assert abs(abs(cos) - 1.0) <= 1e-8

    def test_matches_dense_hessian_on_mlp(self):
        spec, params, fn, _, _ = random_mlp(seed=5, widths=(3, 6, 1))
        H = dense_hessian(fn, params)
        rng = np.random.default_rng(0)
        v = ParamVector(rng.normal(size=len(params)), params.layout)
        hv = hvp(fn, params, v)
        ref = H @ v.data
        assert np.linalg.norm(hv.data - ref) / np.linalg.norm(ref) <= 1e-3

    def test_zero_direction_rejected(self):
        f = quadratic(np.eye(2))
        with pytest.raises(ValueError):
            hvp(f, pv([1.0, 1.0], f.layout), pv([0.0, 0.0], f.layout))

    @pytest.mark.parametrize("a,b", [(1.0, 1.0), (2.5, -0.5), (0.0, 3.0)])
    def test_linear_in_direction(self, a, b):
        H = np.array([[1.5, 0.2, 0.0], [0.2, 0.9, -0.3], [0.0, -0.3, 2.0]])
        f = quadratic(H)
        x = pv([0.4, -1.0, 0.7], f.layout)
        rng = np.random.default_rng(3)
        v = ParamVector(rng.normal(size=3), f.layout)
        w = ParamVector(rng.normal(size=3), f.layout)
        combo = hvp(f, x, a * v + b * w)
        parts = a * hvp(f, x, v) + b * hvp(f, x, w)
        assert (combo - parts).norm() / max(parts.norm(), 1e-12) <= 1e-6


class TestDenseHessian:
    def test_quadratic_recovers_symmetric_part(self):
        A = np.array([[2.0, 1.0], [0.0, 3.0]])
        layout = ParamLayout.from_shapes([("x", (2,))])

        def build(leaves):
            x = leaves["x"]
            return (x * (x @ A)).sum() * 0.5

        H = dense_hessian(DiffFunction(build, layout), pv([0.7, -0.4], layout))
        assert np.allclose(H, 0.5 * (A + A.T), atol=1e-4)

    def test_sin_at_origin(self):
        f = from_scalar(ad.sin)
        H = dense_hessian(f, pv([0.0], f.layout))
        assert abs(H[0, 0]) <= 1e-4

    def test_symmetry_defect_small_before_symmetrization(self):
        # Hessians exist only away from ReLU kinks; keep a margin larger
        # than the hvp finite-difference step.
        for spec, params, fn, _, _ in mlps_with_kink_margin(3, 0.05, widths=(3, 5, 1)):
            raw = dense_hessian(fn, params, symmetrize=False)
            assert np.abs(raw - raw.T).max() <= 1e-3

    def test_output_exactly_symmetric(self):
        spec, params, fn, _, _ = random_mlp(seed=9, widths=(3, 4, 1))
        H = dense_hessian(fn, params)
        assert np.array_equal(H, H.T)

    def test_matches_hvp_columns(self):
        f = quadratic(np.diag([1.0, 2.0, 4.0]))
        x = pv([1.0, 1.0, 1.0], f.layout)
        H = dense_hessian(f, x)
        for j in range(3):
            e = ParamVector(np.eye(3)[j], f.layout)
            assert np.allclose(H[:, j], hvp(f, x, e).data, atol=1e-6)

    def test_dimension_cap(self):
        layout = ParamLayout.from_shapes([("x", (10,))])
        f = DiffFunction(lambda leaves: (leaves["x"] * leaves["x"]).sum(), layout)
        with pytest.raises(ValueError, match="hvp"):
            dense_hessian(f, ParamVector(np.ones(10), layout), max_dim=5)
