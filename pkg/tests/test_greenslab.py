import math

import numpy as np
import pytest

from rediff.env import SpecError
from rediff.greenslab import (SeparableBump, SlabKernel, check_green_bounds, fit_green_bounds,
                              gamma_d, gamma_d_numeric, gamma_sums, green_apply,
                              green_by_time_integral, green_function, green_gradient, heat_kernel)


@pytest.mark.parametrize("d", [3, 4, 5, 6])
def test_gamma_constant(d):
    assert gamma_d(d) == pytest.approx(gamma_d_numeric(d), rel=1e-10)


def test_heat_kernel_short_time_matches_free_gaussian():
    kern = SlabKernel(2.0, 3)
    x, y, t = np.array([0.1, 0.0, 0.0]), np.array([0.2, 0.1, -0.1]), 1e-3
    free = (2 * math.pi * t) ** -1.5 * math.exp(-np.sum((x - y) ** 2) / (2 * t))
    assert heat_kernel(kern, t, x, y) == pytest.approx(free, rel=1e-12)


def test_heat_kernel_vanishes_on_faces():
    kern = SlabKernel(1.5, 3)
    y = np.array([0.4, 0.0, 0.0])
    for t in (0.1, 1.0, 5.0):
        assert abs(heat_kernel(kern, t, [1.5, 0.3, 0.0], y)) < 1e-14


def test_leading_term_near_pole():
    kern = SlabKernel(3.0, 4)
    x = np.zeros(4)
    y = np.array([1e-3, 0, 0, 0])
    assert green_function(kern, x, y) == pytest.approx(gamma_d(4) * 1e-3 ** -2, rel=1e-5)


def test_singular_and_outside_points_are_rejected():
    kern = SlabKernel(1.0, 3)
    with pytest.raises(SpecError):
        green_function(kern, np.zeros(3), np.zeros(3))
    with pytest.raises(SpecError):
        green_function(kern, [1.5, 0, 0], np.zeros(3))
    with pytest.raises(SpecError):
        green_function(SlabKernel(1.0, 2), [0.5, 0], [0, 0])


def test_green_broadcasts():
    kern = SlabKernel(2.0, 3)
    rng = np.random.default_rng(0)
    x = rng.uniform(-1.9, 1.9, (5, 3))
    y = np.array([0.1, 0.2, 0.3])
    v = green_function(kern, x, y)
    assert v.shape == (5,)
    assert np.allclose(v, [green_function(kern, xi, y) for xi in x], rtol=0, atol=0)
    assert green_gradient(kern, x, y).shape == (5, 3)


def test_time_integral_with_finite_horizon_is_smaller():
    kern = SlabKernel(1.0, 3)
    x, y = np.array([0.2, 0, 0]), np.array([-0.3, 0.4, 0])
    full = green_by_time_integral(kern, x, y)
    assert 0 < green_by_time_integral(kern, x, y, T=0.2) < full


def test_odd_function_gives_zero_on_mid_plane():
    kern = SlabKernel(2.0, 4)
    f = lambda p: np.sin(np.pi * p[:, 0] / 2.0) * np.exp(-np.sum(p[:, 1:] ** 2, axis=1))
    assert abs(green_apply(kern, f, np.zeros(4)).value) < 1e-12


def test_separable_closed_form_matches_quadrature():
    kern = SlabKernel(2.0, 4)
    sep = SeparableBump(2.0, [1.0, 0.3], 0.6, d=4)
    x = np.array([0.3, 0.2, -0.1, 0.15])
    res = green_apply(kern, sep, x)
    assert sep.green(x) == pytest.approx(res.value, rel=1e-4)


def test_separable_gradient_matches_finite_differences():
    sep = SeparableBump(2.0, [1.0], 0.8, d=3, n_grid=60001)
    x = np.array([0.4, 0.5, -0.2])
    g = sep.green_grad(x)
    h = 1e-3
    fd = [(sep.green(x + h * e) - sep.green(x - h * e)) / (2 * h) for e in np.eye(3)]
    np.testing.assert_allclose(g, fd, rtol=1e-3, atol=1e-5)


def test_bound_fit_generalises():
    kern = SlabKernel(2.0, 4)
    rng = np.random.default_rng(1)
    pts = rng.uniform(-1, 1, (800, 2, 4)) * np.array([1.9, 6, 6, 6])
    fit = fit_green_bounds(kern, pts[:400, 0], pts[:400, 1])
    chk = check_green_bounds(kern, fit, pts[400:, 0], pts[400:, 1])
    assert chk["ok"] and chk["value_ratio"] <= 1 and chk["grad_ratio"] <= 1


def test_gamma_sums_do_not_depend_on_near_radius():
    kern = SlabKernel(8.0, 5)
    y = np.zeros((1, 5))
    a = gamma_sums(kern, y, 2.0, near=24.0)
    b = gamma_sums(kern, y, 2.0, near=40.0)
    np.testing.assert_allclose(a.sum_gamma, b.sum_gamma, rtol=1e-5)
    np.testing.assert_allclose(a.sum_gamma_tilde, b.sum_gamma_tilde, rtol=1e-5)
