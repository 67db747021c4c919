import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twistray.geometry import (
    EMITTER,
    REFLECTOR,
    GeometryError,
    NotOnBoundaryError,
    flat_annulus,
    make_chart,
    wrap_angle,
)


def test_circle_boundaries_are_signed_distances(flat):
    x = np.array([0.75, 0.6, 0.0])
    y = np.array([0.0, 0.2, 0.9])
    r = np.hypot(x, y)
    np.testing.assert_allclose(flat.rho(EMITTER, x, y), 1.0 - r)
    np.testing.assert_allclose(flat.rho(REFLECTOR, x, y), r - 0.5)
    assert np.all(flat.in_domain(x, y))
    assert not flat.in_domain(0.2, 0.1)


def test_inward_normals_and_curvatures(flat):
    for comp, k in ((EMITTER, 1.0), (REFLECTOR, -2.0)):
        x, y = flat.boundary_points(comp, 16)
        nu = flat.normal(comp, x, y)
        sgn = -1.0 if comp == EMITTER else 1.0
        np.testing.assert_allclose(nu, sgn * np.column_stack([x, y]) / np.hypot(x, y)[:, None], atol=1e-12)
        np.testing.assert_allclose(flat.signed_curvature(comp, x, y), k, atol=1e-12)


def test_normals_need_boundary_points(flat):
    with pytest.raises(NotOnBoundaryError):
        flat.normal(EMITTER, 0.7, 0.0)


def test_conformal_curvature():
    ch = flat_annulus(phi="0.5*log(1 + x^2 + y^2)")
    x = np.array([0.6, 0.1])
    y = np.array([0.2, 0.8])
    # K = -e^{-2 phi} lap phi with lap(0.5 log(1 + r^2)) = 2/(1 + r^2)^2
    r2 = x * x + y * y
    np.testing.assert_allclose(ch.gaussian_curvature(x, y), -2.0 / (1 + r2) ** 3, rtol=1e-12)


def test_unit_vectors_have_unit_length(curved, rng):
    x, y = rng.uniform(-0.7, 0.7, (2, 50))
    th = rng.uniform(0, 2 * np.pi, 50)
    v = curved.unit_vector(x, y, th)
    np.testing.assert_allclose(curved.norm(x, y, v), 1.0, rtol=1e-14)
    iv = curved.rotate90(v)
    np.testing.assert_allclose(curved.inner(x, y, v, iv), 0.0, atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 2 * math.pi), st.floats(-10, 10))
def test_reflection_is_an_involution(s, theta):
    ch = flat_annulus(phi="0.1*(x^2 + y^2)")
    x, y = 0.5 * math.cos(s), 0.5 * math.sin(s)
    once = ch.reflect(x, y, theta)
    twice = ch.reflect(x, y, once)
    assert abs(wrap_angle(twice - theta + math.pi) - math.pi) < 1e-12
    # mirror law flips the normal component and keeps the tangential one
    assert ch.normal_component(REFLECTOR, x, y, once) == pytest.approx(
        -ch.normal_component(REFLECTOR, x, y, theta), abs=1e-12)


def test_arclength_sampling_on_curved_chart(curved):
    x, y, s, total = curved.boundary_uniform_arclength(EMITTER, 8)
    assert total == pytest.approx(2 * math.pi * math.exp(0.1), rel=1e-9)
    np.testing.assert_allclose(np.diff(s), total / 8, rtol=1e-9)
    np.testing.assert_allclose(np.hypot(x, y), 1.0, atol=1e-12)


def test_component_errors(flat):
    with pytest.raises(GeometryError):
        flat.boundary_function("Q")
    with pytest.raises(GeometryError):
        make_chart("0").boundary_function(EMITTER)
    with pytest.raises(GeometryError):
        make_chart("theta*x")
