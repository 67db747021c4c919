import math

import numpy as np
import pytest

from twistray.expr import parse_scalar_field
from twistray.geometry import flat_annulus
from twistray.lambdafield import from_expression
from twistray.pestov import (
    GridError,
    boundary_decomposition,
    convergence_order,
    ibp_residuals,
    make_grid,
    mode_norms,
    pestov_residual,
    structure_residuals,
    vertical_fourier,
)

PHI = "0.15*(x^2 + y^2)"
LAM = "0.3 + 0.2*cos(theta) + 0.1*x*sin(2*theta)"
FUNCS = ["exp(0.5*x)*cos(2*theta + y)", "sin(x)*cos(y) + x*sin(theta)"]
# depends on x, y and L = x sin(theta) - y cos(theta), so u = u o rho on the inner circle
SYMMETRIC = "(x*sin(theta) - y*cos(theta))^3 + x*y"


@pytest.fixture(scope="module")
def grids():
    ch = flat_annulus(phi=PHI)
    return ch, {n: make_grid(ch, n) for n in (32, 64)}


def test_grid_errors(flat):
    with pytest.raises(GridError):
        make_grid(flat, 3)
    with pytest.raises(GridError):
        make_grid(flat, 16, ntheta=15)


def test_volume_converges(grids):
    _, g = grids
    exact = 2 * math.pi * 2 * math.pi * (math.exp(0.3) - math.exp(0.075)) / 0.6
    e = [abs(g[n].volume() - exact) / exact for n in (32, 64)]
    assert e[1] < e[0] and e[1] < 1e-3


def test_structure_equations(grids):
    ch, g = grids
    lam = from_expression(LAM)
    u = parse_scalar_field(FUNCS[1])
    r = {n: structure_residuals(g[n], u, lam) for n in g}
    for key in ("[X,V]-Xperp", "[Xperp,V]+X", "[V,F]+Xperp-V(lam)V", "[V,Xperp]-F+lamV"):
        assert r[64][key] < 1e-12
    for key in ("[X,Xperp]+KV", "[F,Xperp]-lamF+PV"):
        assert convergence_order(r[32][key], r[64][key]) >= 1.5


def test_integration_by_parts(grids):
    _, g = grids
    u = parse_scalar_field(FUNCS[1])
    w = parse_scalar_field("exp(0.3*y)*cos(theta)")
    r = {n: ibp_residuals(g[n], u, w) for n in g}
    assert abs(r[64]["V"]) < 1e-12
    assert convergence_order(abs(r[32]["X"]), abs(r[64]["X"])) >= 1.5


@pytest.mark.parametrize("text", FUNCS + [SYMMETRIC])
@pytest.mark.parametrize("config", ["flat", "curved"])
def test_pestov_identity_converges(text, config):
    ch = flat_annulus() if config == "flat" else flat_annulus(phi=PHI)
    lam = from_expression("0" if config == "flat" else LAM)
    u = parse_scalar_field(text)
    r = [pestov_residual(make_grid(ch, n), lam, u).relative_residual for n in (32, 64)]
    assert r[1] <= 2e-2
    assert convergence_order(r[0], r[1]) >= 1.5


def test_boundary_reduction(grids):
    ch, g = grids
    lam = from_expression(LAM)
    rep = boundary_decomposition(g[64], lam, parse_scalar_field(SYMMETRIC))
    assert rep.lemma_residual < 1e-10
    assert rep.reduced_rhs is not None and rep.reduced_residual < 1e-10
    assert rep.orthogonality <= 1e-12
    # no reduction for a function that is not reflection invariant
    rep2 = boundary_decomposition(g[32], lam, parse_scalar_field(FUNCS[0]))
    assert rep2.reduced_rhs is None and rep2.lemma_residual < 1e-10


def test_vertical_modes(grids):
    _, g = grids
    grid = g[32]
    U = grid.sample(parse_scalar_field("cos(theta) + x*sin(2*theta)"))
    modes = vertical_fourier(grid, U)
    norms = mode_norms(grid, modes)
    assert sum(norms.values()) == pytest.approx(grid.norm2(U), rel=1e-12)
    assert norms[3] < 1e-25 and norms[1] > 0
