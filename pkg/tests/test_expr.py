import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twistray.expr import (
    EvalDomainError,
    ExprSyntaxError,
    UnknownIdentifierError,
    derivative,
    parse,
    parse_scalar_field,
    simplify,
    to_text,
)

EXPRS = [
    "sin(x)*cos(theta)",
    "exp(0.3*x - y^2)/(2 + cos(theta))",
    "log(2 + x^2)*sqrt(1 + y^2) - tanh(x*y*theta)",
    "(x*sin(theta) - y*cos(theta))^3 + pi*x",
    "x^2.5 + 1/(3 + y)",
]


def test_example_values():
    f = parse_scalar_field("sin(x)*cos(theta)")
    assert f(0.0, 0.0, math.pi / 2) == pytest.approx(0.0, abs=1e-15)
    assert f.dx(0.0, 0.0, math.pi / 2) == pytest.approx(0.0, abs=1e-15)
    assert parse_scalar_field("2^3^2")() == 512.0  # right associative
    assert parse_scalar_field("-2^2")() == -4.0
    assert parse_scalar_field("pi")() == pytest.approx(math.pi)


@pytest.mark.parametrize("text", EXPRS)
def test_partials_match_central_differences(text):
    f = parse_scalar_field(text)
    rng = np.random.default_rng(7)
    x, y, t = rng.uniform(0.1, 1.0, (3, 100))
    h = 1e-6
    for var, d in (("x", f.dx), ("y", f.dy), ("theta", f.dtheta)):
        args_p = {"x": x, "y": y, "theta": t}
        args_m = dict(args_p)
        args_p[var] = args_p[var] + h
        args_m[var] = args_m[var] - h
        fd = (f(**args_p) - f(**args_m)) / (2 * h)
        np.testing.assert_allclose(d(x, y, t), fd, rtol=1e-6, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-3, 3))
def test_printing_round_trip(x, y, t):
    for text in EXPRS[:4]:
        node = parse(text)
        again = parse(to_text(node))
        a = parse_scalar_field(text)(x, y, t)
        b = parse_scalar_field(to_text(again))(x, y, t)
        assert np.isclose(a, b, rtol=1e-12, atol=1e-12)


def test_simplified_derivative():
    assert to_text(simplify(derivative(parse("x^3*sin(y)"), "x"))) == "((3.0 * (x ^ 2.0)) * sin(y))"
    assert parse_scalar_field("x*y").d("theta").is_constant


@pytest.mark.parametrize("text,pos", [("1 +", 3), ("x $ 2", 2), ("sin x", 4), ("(x", 2)])
def test_syntax_errors_carry_position(text, pos):
    with pytest.raises(ExprSyntaxError) as info:
        parse_scalar_field(text)
    assert info.value.position == pos


def test_unknown_identifier():
    with pytest.raises(UnknownIdentifierError):
        parse_scalar_field("foo(x)")
    with pytest.raises(UnknownIdentifierError):
        parse_scalar_field("x + z")


@pytest.mark.parametrize("text,x", [("log(x)", -1.0), ("sqrt(x)", -1.0), ("1/x", 0.0)])
def test_domain_errors(text, x):
    with pytest.raises(EvalDomainError):
        parse_scalar_field(text)(x)


def test_broadcasting_and_constants():
    f = parse_scalar_field("3")
    out = f(np.zeros((2, 3)), 0.0, 0.0)
    assert out.shape == (2, 3) and np.all(out == 3.0)
