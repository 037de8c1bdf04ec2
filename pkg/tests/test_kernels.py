import math

import numpy as np
import pytest

from rcmlab.kernels import (BooleanDiscKernel, DoubleMarkKernel, FactorizedKernel, GaussianKernel, KernelError,
                            MarkSpace, MultivariateGaussianKernel, PoissonBlobKernel, RadialProfile, ball_fourier,
                            make_kernel, radial_quadrature, unit_volume_radius)


def test_gaussian_values_and_transform():
    for d in (1, 2, 3):
        k = GaussianKernel(d)
        assert k.evaluate(np.zeros(d)) == pytest.approx((2 * math.pi) ** (-d / 2))
        assert k.fourier(np.zeros(d)) == pytest.approx(1.0)
        kv = np.full(d, 0.7)
        assert k.fourier(kv) == pytest.approx(math.exp(-0.5 * d * 0.49))
        assert k.fourier_quadrature(kv) == pytest.approx(k.fourier(kv), rel=1e-9)


def test_blob_has_unit_integral():
    for d in (1, 2, 3, 4):
        k = PoissonBlobKernel(d)
        assert k.integral() == pytest.approx(1.0, rel=1e-10)
        r = unit_volume_radius(d)
        assert k.evaluate(np.eye(d)[0] * r * 0.999) == 1.0
        assert k.evaluate(np.eye(d)[0] * r * 1.001) == 0.0


def test_ball_fourier_series_branch_matches_bessel_form():
    from scipy import special
    for d in (1, 2, 3, 5):
        for kappa in (0.5, 4.0, 7.99):
            bessel = (2 * math.pi / kappa) ** (d / 2) * special.jv(d / 2, kappa)
            assert float(ball_fourier(kappa, 1.0, d)) == pytest.approx(bessel, rel=1e-11)


def test_ball_fourier_matches_radial_quadrature():
    for d in (2, 3):
        for kappa in (0.0, 0.5, 3.0, 11.0):
            exact = float(ball_fourier(kappa, 0.8, d))
            numeric = radial_quadrature(lambda r: 1.0, kappa, d, 0.8)
            assert exact == pytest.approx(numeric, rel=1e-8, abs=1e-12)


def test_one_dimensional_ball_transform_closed_form():
    # 1-d indicator of [-R, R] transforms to 2 sin(kR)/k
    for kappa in (0.3, 2.0, 9.0):
        assert float(ball_fourier(kappa, 1.5, 1)) == pytest.approx(2 * math.sin(1.5 * kappa) / kappa)


def test_kernel_is_symmetric_in_marks():
    marks = MarkSpace.interval(0.5, 1.0, n_nodes=8)
    k = BooleanDiscKernel(2, marks, r_min=0.2, r_max=0.6)
    x = np.array([[0.3, 0.4], [0.9, 0.1]])
    assert np.array_equal(k.evaluate(x, 0.6, 0.9), k.evaluate(x, 0.9, 0.6))
    dm = DoubleMarkKernel(2, 0.3, {"11": {"shape": "ball", "scale": 0.5},
                                   "12": {"shape": "gaussian", "scale": 0.4, "amplitude": 0.5},
                                   "22": {"shape": "ball", "scale": 0.8}})
    assert np.array_equal(dm.evaluate(x, 1.0, 2.0), dm.evaluate(x, 2.0, 1.0))


def test_factorized_transform_is_profile_times_mark_kernel():
    marks = MarkSpace.finite([0.0, 1.0], [0.4, 0.6])
    k = FactorizedKernel(2, RadialProfile("gaussian", 1.0, 0.5), marks, [[1.0, 0.5], [0.5, 0.2]])
    kv = np.array([0.4, -0.3])
    assert k.fourier(kv, 0.0, 1.0) == pytest.approx(0.5 * 0.5 * math.exp(-0.125))


def test_multivariate_gaussian_transform_vs_quadrature():
    k = MultivariateGaussianKernel(2, MarkSpace.interval(0.2, 1.0, n_nodes=4), axis_scales=[1.0, 2.0])
    kv = np.array([0.8, -0.4])
    assert k.fourier_quadrature(kv, 0.3, 0.7) == pytest.approx(float(k.fourier(kv, 0.3, 0.7)), rel=1e-7)


def test_effective_range_truncation():
    k = GaussianKernel(2)
    r = k.effective_range
    assert k.evaluate(np.array([r, 0.0])) == pytest.approx(1e-12, rel=1e-6)
    assert 0 < k.truncated_mass() < 1e-9
    assert PoissonBlobKernel(2).truncated_mass() == 0.0


def test_make_kernel_round_trip():
    specs = [
        {"family": "gaussian", "d": 3},
        {"family": "poisson-blob", "d": 2},
        {"family": "boolean-disc", "d": 2, "marks": {"kind": "interval", "lower": 0.0, "upper": 1.0},
         "r_min": 0.1, "r_max": 0.4},
        {"family": "double-mark", "d": 1, "p": 0.25,
         "profiles": {"11": {"shape": "ball", "scale": 0.5, "amplitude": 1.0},
                      "12": {"shape": "ball", "scale": 0.7, "amplitude": 0.5},
                      "22": {"shape": "gaussian", "scale": 0.3, "amplitude": 0.2}}},
    ]
    for spec in specs:
        k = make_kernel(spec)
        again = make_kernel(k.to_spec())
        x = np.full(k.d, 0.21)
        a, b = k.marks.nodes[0], k.marks.nodes[-1]
        assert again.evaluate(x, a, b) == k.evaluate(x, a, b)
        assert again.fourier(x, a, b) == k.fourier(x, a, b)


def test_invalid_kernels_rejected():
    with pytest.raises(KernelError):
        make_kernel({"family": "gaussian"})
    with pytest.raises(KernelError):
        make_kernel({"family": "unknown", "d": 2})
    with pytest.raises(KernelError):
        GaussianKernel(0)
    with pytest.raises(KernelError):
        MarkSpace.finite([0.0, 1.0], [0.5, 0.6])
    with pytest.raises(KernelError):
        FactorizedKernel(2, RadialProfile("ball", 0.5), MarkSpace.finite([0.0, 1.0], [0.5, 0.5]),
                         [[1.0, 0.2], [0.3, 1.0]])


def test_mark_sampling_follows_law():
    space = MarkSpace.finite([1.0, 2.0], [0.25, 0.75])
    draws = space.sample(np.random.default_rng(0), 20000)
    assert np.mean(draws == 1.0) == pytest.approx(0.25, abs=0.015)
    grid = MarkSpace.interval(0.0, 2.0, n_nodes=10)
    assert grid.weights.sum() == pytest.approx(1.0)
    assert np.all((grid.nodes > 0) & (grid.nodes < 2))
