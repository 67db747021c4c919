import numpy as np
import pytest

from twistray.admissibility import (
    AdmissibilityOptions,
    check_admissible,
    convexity_dynamic_check,
    dual_admissibility_crosscheck,
    emitter_margin,
    reflector_curvature,
)
from twistray.geometry import flat_annulus
from twistray.lambdafield import constant_lambda, from_expression


def test_flat_annulus_is_admissible(flat, lam0):
    rep = check_admissible(flat, lam0, AdmissibilityOptions(n_rays=800, n_interior=2000))
    assert rep.admissible
    assert rep.emitter_convex == pytest.approx(1.0, abs=1e-9)
    assert rep.reflector_curvature == pytest.approx(-2.0, abs=1e-9)
    assert rep.trap_count == 0 and rep.max_reflections <= 1
    d = rep.as_dict()
    assert d["a_star"] is None  # no ray reflects twice


def test_positive_lambda_curvature_rejected(flat):
    rep = check_admissible(flat, constant_lambda(0.5), AdmissibilityOptions(n_rays=200, n_interior=500))
    assert rep.curvature_sign == pytest.approx(0.25)
    assert not rep.conditions["curvature_nonpositive"] and not rep.admissible


def test_curved_constant_lambda_curvature():
    ch = flat_annulus(phi="0.5*(x^2 + y^2)")
    rep = check_admissible(ch, constant_lambda(0.4), AdmissibilityOptions(n_rays=200, n_interior=3000))
    r = np.linspace(0.5, 1.0, 201)
    assert rep.curvature_sign <= np.max(-2 * np.exp(-r**2) + 0.16) + 1e-12
    assert rep.curvature_sign < 0


def test_margins_with_magnetic_lambda(flat):
    lam = from_expression("0.5")
    # sff(v, v) = 1 on the unit circle; -<lambda iv, nu> = -+0.5 on the two tangents
    m, w = emitter_margin(flat, lam)
    assert m == pytest.approx(0.5, abs=1e-9) and len(w) == 3
    # <nu, iv> is rho-even, so (kappa_lam)_e = -2 - 0.5 <nu, iv> peaks near -1.5
    rc, _ = reflector_curvature(flat, lam)
    assert rc == pytest.approx(-1.5, abs=1e-3) and rc < -1.5


def test_dual_crosscheck(curved, lam_curved):
    assert dual_admissibility_crosscheck(curved, lam_curved)["max_discrepancy"] <= 1e-12


def test_convexity_sign_is_dynamic(curved, lam_curved):
    d2, pred = convexity_dynamic_check(curved, lam_curved, n=40)
    assert np.all(d2 < 0) and np.all(pred < 0)
    np.testing.assert_allclose(d2, pred, atol=1e-4)
