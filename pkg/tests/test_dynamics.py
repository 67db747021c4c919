import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twistray.dynamics import (
    EXITED,
    MAX_REFLECTIONS,
    STOPPED,
    TANGENTIAL,
    TRAPPED,
    OutsideDomainError,
    TraceError,
    TraceOptions,
    check_time_reversal,
    exit_times,
    flow,
    segment_residual,
    trace_batch,
    trace_broken_ray,
)
from twistray.geometry import EMITTER, REFLECTOR, PhasePoint, disk, flat_annulus, plane
from twistray.lambdafield import constant_lambda, from_expression


def test_straight_lines_in_the_disk():
    ch = disk()
    res = trace_batch(ch, from_expression("0"), np.array([[0.0, 0.0, 0.3], [0.0, 0.5, 0.0]]))
    assert list(res.status) == [EXITED, EXITED]
    np.testing.assert_allclose(res.t_end, [1.0, math.sqrt(0.75)], atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.2, 3.0), st.floats(0, 2 * math.pi), st.floats(0.1, 4.0))
def test_constant_lambda_circles(k, th0, t):
    # D_t v = k i v: v turns at rate k around a circle of radius 1/k
    p = PhasePoint(0.1, -0.2, th0)
    e = flow(plane(), constant_lambda(k), p, t, step=1e-3)
    c = np.array([p.x, p.y]) + np.array([-math.sin(th0), math.cos(th0)]) / k
    th = th0 + k * t
    expect = c - np.array([-math.sin(th), math.cos(th)]) / k
    assert np.hypot(*(np.array([e.x, e.y]) - expect)) < 1e-9


def test_reflection_law_and_event_tolerance(flat, lam0):
    start = np.array([[0.9, 0.1, math.pi]])
    res = trace_batch(flat, lam0, start, record=True)
    ev = res.events[0][0]
    assert abs(flat.rho(REFLECTOR, ev.x, ev.y)) <= 1e-10
    assert ev.normal_component < 0
    mu_out = flat.normal_component(REFLECTOR, ev.x, ev.y, ev.theta_out)
    assert mu_out == pytest.approx(-ev.normal_component, abs=1e-12)
    assert abs(flat.rho(EMITTER, res.end[0, 0], res.end[0, 1])) <= 1e-10
    ray = res.rays[0]
    assert len(ray.segments) == 2 and ray.n_reflections == 1


def test_status_codes(flat, lam0):
    opts = TraceOptions()
    tang = trace_batch(flat, lam0, np.array([[-0.8, 0.5 - 1e-13, 0.0]]), opts)
    assert tang.status[0] == TANGENTIAL
    trapped = trace_batch(flat, constant_lambda(3.0), np.array([[0.75, 0.0, 0.5]]), opts.with_(max_time=5.0))
    assert trapped.status[0] == TRAPPED
    capped = trace_batch(flat, lam0, np.array([[0.75, 0.0, math.pi]]), opts.with_(max_reflections=0))
    assert capped.status[0] == MAX_REFLECTIONS
    stopped = trace_batch(flat, lam0, np.array([[0.75, 0.0, math.pi]]), opts, t_stop=[0.1])
    assert stopped.status[0] == STOPPED
    np.testing.assert_allclose(stopped.end[0, :2], [0.65, 0.0], atol=1e-12)
    with pytest.raises(OutsideDomainError):
        trace_batch(flat, lam0, np.array([[0.2, 0.0, 0.0]]), opts)
    with pytest.raises(TraceError):
        TraceOptions(step=0.0)


def test_dual_flow_reverses_time(curved, lam_curved, rng):
    r = rng.uniform(0.6, 0.9, 20)
    a = rng.uniform(0, 2 * np.pi, 20)
    pts = np.column_stack([r * np.cos(a), r * np.sin(a), rng.uniform(0, 2 * np.pi, 20)])
    assert check_time_reversal(curved, lam_curved, pts, 0.05, n_samples=4) <= 1e-6


def test_exit_times_and_thread_invariance(curved, lam_curved, rng):
    pts = np.column_stack([rng.uniform(0.6, 0.8, 40), rng.uniform(-0.2, 0.2, 40), rng.uniform(0, 6, 40)])
    a = trace_batch(curved, lam_curved, pts, threads=1)
    b = trace_batch(curved, lam_curved, pts, threads=3)
    assert np.array_equal(a.end, b.end) and np.array_equal(a.t_end, b.t_end)
    tau, tau_minus = exit_times(curved, lam_curved, PhasePoint(*pts[0]))
    assert tau == pytest.approx(a.t_end[0], abs=1e-12) and tau_minus > 0


def test_segment_residual_is_second_order(curved, lam_curved):
    start = PhasePoint(0.7, 0.0, 2.0)
    r1 = trace_broken_ray(curved, lam_curved, start, TraceOptions(step=2e-3))
    r2 = trace_broken_ray(curved, lam_curved, start, TraceOptions(step=1e-3))
    e1 = np.max(segment_residual(curved, lam_curved, r1.segments[0]))
    e2 = np.max(segment_residual(curved, lam_curved, r2.segments[0]))
    assert e2 < 1e-5
    assert 3.0 < e1 / e2 < 5.0
