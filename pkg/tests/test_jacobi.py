import math

import numpy as np
import pytest
from scipy.linalg import expm

from twistray.dynamics import TraceOptions
from twistray.geometry import REFLECTOR, PhasePoint, plane
from twistray.jacobi import (
    JacobiError,
    beta_value,
    flow_differential_fd,
    frame_to_vector,
    growth_bound_check,
    jacobi_equation_residual,
    oracle_comparison,
    propagate_frame,
    propagate_vector,
    reflect_jacobi,
    sample_oracle_cases,
    variation_to_vector,
    vector_to_frame,
    vector_to_variation,
    write_jacobi_csv,
)
from twistray.lambdafield import constant_lambda, from_expression


def test_rotation_sign_regression(flat, lam0):
    # turning the start angle on a flat line gives J = t iv, so a = 0 and b = -t
    start = PhasePoint(0.7, 0.1, 2.0)
    J0, DJ0 = variation_to_vector(flat, 0.7, 0.1, 2.0, (0.0, 0.0, 1.0))
    out = propagate_vector(flat, lam0, start, J0, DJ0, 0.1)
    fd = flow_differential_fd(flat, lam0, start, (0.0, 0.0, 1.0), 0.1)
    iv = np.array([-math.sin(2.0), math.cos(2.0)])
    np.testing.assert_allclose(out.J, 0.1 * iv, atol=1e-10)
    np.testing.assert_allclose(out.DJ, iv, atol=1e-10)
    np.testing.assert_allclose(fd.J, out.J, atol=1e-6)
    np.testing.assert_allclose(fd.DJ, out.DJ, atol=1e-6)
    a, b, c = vector_to_frame(flat, lam0, 0.7, 0.1, 2.0, out.J, out.DJ)
    assert a == pytest.approx(0.0, abs=1e-10) and b == pytest.approx(-0.1, abs=1e-10)


def test_constant_lambda_frames_match_matrix_exponential():
    k = 1.5
    lam = constant_lambda(k)
    M = np.array([[0.0, -k, 0.0], [0.0, 0.0, -1.0], [0.0, k * k, 0.0]])
    f0 = np.array([0.3, -0.2, 0.7])
    track = propagate_frame(plane(), lam, PhasePoint(0.0, 0.0, 0.4), f0, TraceOptions(step=1e-3), t_stop=2.0)
    seg, fr = track.ray.segments[0], track.frames[0]
    exact = np.array([expm(M * t) @ f0 for t in seg[:, 0]])
    assert np.max(np.abs(fr - exact)) <= 1e-9


def test_frame_vector_round_trip(curved, lam_curved, rng):
    x, y = rng.uniform(0.5, 0.7, (2, 20))
    t = rng.uniform(0, 2 * np.pi, 20)
    f = rng.normal(size=(20, 3))
    J, DJ = frame_to_vector(curved, lam_curved, x, y, t, f)
    np.testing.assert_allclose(vector_to_frame(curved, lam_curved, x, y, t, J, DJ), f, atol=1e-13)
    xi = vector_to_variation(curved, x, y, t, J, DJ)
    J2, DJ2 = variation_to_vector(curved, x, y, t, xi)
    np.testing.assert_allclose(J2, J, atol=1e-13)
    np.testing.assert_allclose(DJ2, DJ, atol=1e-13)


def test_oracle_through_reflections(curved, lam_curved):
    P, X, T = sample_oracle_cases(curved, lam_curved, 12, np.random.default_rng(3), min_reflections=1)
    rel, res = oracle_comparison(curved, lam_curved, P, X, T)
    assert np.all(res.n_reflections >= 1)
    assert np.nanmax(rel) <= 1e-4


def test_jacobi_equation_residual_is_small(curved, lam_curved):
    track = propagate_frame(curved, lam_curved, PhasePoint(0.8, 0.1, 2.5), [0.2, -0.4, 0.3], TraceOptions())
    for seg, fr in zip(track.ray.segments, track.frames):
        if len(seg) > 5:
            r1, r2 = jacobi_equation_residual(curved, lam_curved, seg, fr)
            assert r1.max() < 1e-5 and r2.max() < 1e-5


def test_beta_rule(flat):
    x, y = 0.5, 0.0  # normal angle 0
    lam = from_expression("cos(theta)")
    beta, sing = beta_value(flat, lam, x, y, math.pi - 0.3)
    # theta -> pi - theta flips cos
    assert beta == pytest.approx(-1.0) and not sing
    beta, sing = beta_value(flat, from_expression("sin(theta)"), x, y, math.pi)
    assert beta == 1.0 and not sing  # both sides vanish
    beta, sing = beta_value(flat, from_expression("sin(theta) + 0.5*x"), x, y, math.pi)
    assert not sing
    beta, sing = beta_value(flat, from_expression("cos(theta) + 1"), x, y, math.pi)
    assert sing and math.isnan(beta)


def test_tangential_jump_is_refused(flat, lam0):
    with pytest.raises(JacobiError):
        reflect_jacobi(flat, lam0, 0.5, 0.0, math.pi / 2, np.zeros(2), np.ones(2), 1.0)


def test_growth_bound(flat, lam0):
    f0 = vector_to_frame(flat, lam0, 0.9, 0.0, 1.4, np.zeros(2),
                         np.array([-math.sin(1.4), math.cos(1.4)]))
    track = propagate_frame(flat, lam0, PhasePoint(0.9, 0.0, 1.4), f0)
    assert track.ray.n_reflections == 0
    # E = 1 + t^2 <= e^t
    assert growth_bound_check(flat, lam0, track, C=1.0).violations == 0
    assert growth_bound_check(flat, lam0, track, C=0.0).violations > 0


def test_csv_layout(tmp_path, flat, lam0):
    track = propagate_frame(flat, lam0, PhasePoint(0.9, 0.1, math.pi), [1.0, 0.0, 0.0])
    p = tmp_path / "j.csv"
    write_jacobi_csv(p, track.table(flat, lam0))
    lines = p.read_text().splitlines()
    assert lines[0] == "t,a,b,c,Jx,Jy,DJx,DJy,segment_id"
    assert lines[-1].endswith(",1")
    assert track.beta == [1.0]
