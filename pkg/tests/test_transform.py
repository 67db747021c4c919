import math

import numpy as np
import pytest

from twistray.dynamics import TraceOptions
from twistray.geometry import disk
from twistray.transform import (
    IntegrandField,
    broken_transform,
    dual_relation_check,
    emitter_fan,
    primitive,
    quadrature_convergence,
    richardson_ratio,
    scattering_consistency,
    sinogram,
    transport_residual,
    write_sinogram_csv,
)

F_CURVED = IntegrandField("1 + x*y + 0.5*sin(3*x)", ("0.3*y", "-0.2*x + 0.1"))


def _interior(rng, n):
    r = rng.uniform(0.6, 0.9, n)
    a = rng.uniform(0, 2 * np.pi, n)
    return np.column_stack([r * np.cos(a), r * np.sin(a), rng.uniform(0, 2 * np.pi, n)])


def test_disk_examples(lam0):
    ch = disk()
    one = IntegrandField("1")
    assert broken_transform(ch, lam0, one, [[-1.0, 0.0, 0.0]])[0] == pytest.approx(2.0, abs=1e-10)
    assert primitive(ch, lam0, one, [[0.0, 0.0, 1.0]])[0] == pytest.approx(1.0, abs=1e-10)
    # alpha = dx along +x integrates to the chord length
    dx = IntegrandField("0", ("1", "0"))
    assert broken_transform(ch, lam0, dx, [[-1.0, 0.0, 0.0]])[0] == pytest.approx(2.0, abs=1e-10)


def test_emitter_check(flat, lam0):
    with pytest.raises(ValueError):
        broken_transform(flat, lam0, IntegrandField("1"), [[0.7, 0.0, 0.0]])
    with pytest.raises(ValueError):
        IntegrandField("theta")


def test_gauge_is_annihilated(curved, lam_curved):
    starts, _, _ = emitter_fan(curved, 20, 10)
    h = "(1 - sqrt(x^2 + y^2))*exp(x - 0.5*y)*cos(2*y)"
    vals = broken_transform(curved, lam_curved, IntegrandField.gauge(h), starts, check_emitter=False)
    assert np.max(np.abs(vals)) <= 1e-6


def test_reversed_integrand_flips_the_form(flat):
    f = IntegrandField("x", ("y", "1"))
    g = f.reversed()
    assert f(flat, 0.6, 0.1, 0.3) - g(flat, 0.6, 0.1, 0.3) == pytest.approx(
        2 * (0.1 * math.cos(0.3) + math.sin(0.3)))


def test_transport_equation(curved, lam_curved, rng):
    pts = _interior(rng, 20)
    r = transport_residual(curved, lam_curved, F_CURVED, pts, 1e-3)
    assert np.max(np.abs(r)) <= 1e-5
    ratio, _, _ = richardson_ratio(curved, lam_curved, F_CURVED, pts[:10])
    assert 3.0 <= ratio <= 5.0


def test_exit_time_decreases_at_unit_rate(curved, lam_curved, rng):
    r = transport_residual(curved, lam_curved, IntegrandField("1"), _interior(rng, 10), 1e-3)
    assert np.max(np.abs(r)) <= 1e-6


def test_dual_relation_and_scattering(curved, lam_curved, rng):
    assert np.max(np.abs(dual_relation_check(curved, lam_curved, F_CURVED, _interior(rng, 15)))) <= 1e-6
    starts, _, _ = emitter_fan(curved, 6, 4)
    assert np.max(np.abs(scattering_consistency(curved, lam_curved, F_CURVED, starts))) <= 1e-6
    gauge = IntegrandField.gauge("(1 - sqrt(x^2 + y^2))*x")
    assert np.max(np.abs(dual_relation_check(curved, lam_curved, gauge, _interior(rng, 10)))) <= 1e-8


def test_quadrature_converges(curved, lam_curved):
    p = [[1.0, 0.0, math.pi - 0.2]]
    ref = primitive(curved, lam_curved, F_CURVED, p, TraceOptions(step=2.5e-4))[0]
    study = quadrature_convergence(curved, lam_curved, F_CURVED, p, steps=(4e-2, 1e-2))
    e = np.abs(study.values - ref)
    assert e[1] < e[0] and e[1] < 1e-6


def test_sinogram_csv(tmp_path, flat, lam0):
    rows = sinogram(flat, lam0, IntegrandField("1"), 4, 3)
    assert rows.shape == (12, 3)
    p = tmp_path / "s.csv"
    write_sinogram_csv(p, rows)
    assert p.read_text().splitlines()[0] == "s,psi,If"
