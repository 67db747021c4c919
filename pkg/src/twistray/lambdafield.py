"""Twist functions lambda on SM, their duals and the lambda-curvatures.

Frame fields in the chart (x, y, theta), v = e^{-phi}(cos theta, sin theta):

    X      = e^{-phi}[cos th d_x + sin th d_y + (-phi_x sin th + phi_y cos th) d_th]
    X_perp = [X, V] = e^{-phi}[sin th d_x - cos th d_y + (phi_x cos th + phi_y sin th) d_th]
    V      = d_th,   F = X + lambda V
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .expr import Num, ScalarField, Var, add, constant, mul, neg, parse_scalar_field, sub
from .geometry import ConformalChart

FD_STEP = 1e-5

_AXES = {"x": 0, "y": 1, "theta": 2}


def X_apply(chart: ConformalChart, x, y, theta, fx, fy, ft):
    """X f from the chart partials of f."""
    px, py = chart.grad_phi(x, y)
    s = np.exp(-chart.phi(x, y))
    c, n = np.cos(theta), np.sin(theta)
    return s * (c * fx + n * fy + (-px * n + py * c) * ft)


def Xperp_apply(chart: ConformalChart, x, y, theta, fx, fy, ft):
    """X_perp f from the chart partials of f."""
    px, py = chart.grad_phi(x, y)
    s = np.exp(-chart.phi(x, y))
    c, n = np.cos(theta), np.sin(theta)
    return s * (n * fx - c * fy + (px * c + py * n) * ft)


class LambdaField:
    """lambda(x, y, theta) with analytic partials, or FD partials for callables.

    ``param_fn`` supplies extra expression parameters computed from the base
    point; it is used for fiber functions such as lambda o rho that only make
    sense on boundary fibers.
    """

    def __init__(
        self,
        field: ScalarField | None = None,
        kind: str = "general",
        fn: Callable | None = None,
        param_fn: Callable | None = None,
        label: str | None = None,
    ):
        if (field is None) == (fn is None):
            raise ValueError("give exactly one of field or fn")
        if kind not in ("general", "magnetic", "thermostat"):
            raise ValueError(f"unknown lambda kind {kind!r}")
        self.field = field
        self.fn = fn
        self.kind = kind
        self.param_fn = param_fn
        self.label = label or (field.source if field is not None else "callable")
        self._dual: LambdaField | None = None
        if kind == "magnetic" and field is not None and field.depends_on("theta"):
            raise ValueError("magnetic lambda must not depend on theta")

    @property
    def analytic(self) -> bool:
        return self.field is not None

    def _params(self, x, y):
        return {} if self.param_fn is None else self.param_fn(x, y)

    def __call__(self, x, y, theta):
        return self.value(x, y, theta)

    def raw(self, x, y, theta):
        """Unbroadcast value for hot loops."""
        if self.field is not None:
            return self.field.raw(x, y, theta, self._params(x, y))
        return self.fn(x, y, theta)

    def value(self, x, y, theta):
        if self.field is not None:
            return self.field(x, y, theta, **self._params(x, y))
        return np.asarray(self.fn(x, y, theta), dtype=float)

    def partial(self, x, y, theta, *wrt: str):
        """Mixed partial of lambda, e.g. partial(x, y, t, "x", "theta")."""
        if self.field is not None:
            f = self.field
            for v in wrt:
                f = f.d(v)
            return f(x, y, theta, **self._params(x, y))
        return self._fd(x, y, theta, wrt)

    def _fd(self, x, y, theta, wrt):
        args = [np.asarray(x, float), np.asarray(y, float), np.asarray(theta, float)]
        if not wrt:
            return np.asarray(self.fn(*args), dtype=float)
        first, rest = wrt[0], wrt[1:]
        k = _AXES[first]
        hi = list(args)
        lo = list(args)
        hi[k] = args[k] + FD_STEP
        lo[k] = args[k] - FD_STEP
        return (self._fd(*hi, rest) - self._fd(*lo, rest)) / (2.0 * FD_STEP)

    def vertical(self, x, y, theta):
        """V(lambda) = d lambda / d theta."""
        if self.kind == "magnetic":
            return np.zeros(np.broadcast_shapes(np.shape(x), np.shape(y), np.shape(theta)))
        return self.partial(x, y, theta, "theta")

    def dual(self) -> "LambdaField":
        """lambda^-(x, v) = -lambda(x, -v), i.e. -lambda(x, y, theta + pi)."""
        if self._dual is None:
            if self.field is not None:
                shifted = self.field.substitute(theta=add(Var("theta"), Num(np.pi)))
                d = LambdaField(-shifted, kind=self.kind, param_fn=self.param_fn,
                                label=f"dual({self.label})")
            else:
                base = self.fn
                d = LambdaField(fn=lambda x, y, t: -np.asarray(base(x, y, np.asarray(t) + np.pi)),
                                kind=self.kind, label=f"dual({self.label})")
            d._dual = self
            self._dual = d
        return self._dual

    def reflected(self, chart: ConformalChart, component: str = "R") -> "LambdaField":
        """The fiber function lambda o rho on boundary fibers of a component.

        rho acts on angles by theta -> c - theta with c = pi + 2 theta_nu(x),
        so theta-derivatives pick up the sign flip symbolically.
        """
        if self.field is None:
            base = self.fn
            return LambdaField(
                fn=lambda x, y, t: np.asarray(base(x, y, chart.reflect(x, y, t, component, check=False))),
                label=f"{self.label} o rho",
            )
        g = self.field.substitute(theta=sub(Var("_c"), Var("theta")))

        def params(x, y):
            return {"_c": np.pi + 2.0 * chart.normal_angle(component, x, y, check=False)}

        return LambdaField(g, kind="general", param_fn=params, label=f"{self.label} o rho")

    def even_part(self, chart: ConformalChart, component: str = "R") -> "LambdaField":
        return _combine(self, self.reflected(chart, component), 0.5, 0.5, f"({self.label})_e")

    def odd_part(self, chart: ConformalChart, component: str = "R") -> "LambdaField":
        return _combine(self, self.reflected(chart, component), 0.5, -0.5, f"({self.label})_o")

    def __repr__(self):
        return f"LambdaField({self.label!r}, kind={self.kind!r})"


def _combine(a: LambdaField, b: LambdaField, ca: float, cb: float, label: str) -> LambdaField:
    if a.field is not None and b.field is not None:
        node = add(mul(Num(ca), a.field.node), mul(Num(cb), b.field.node))
        pa, pb = a.param_fn, b.param_fn

        def params(x, y):
            out = {} if pa is None else dict(pa(x, y))
            if pb is not None:
                out.update(pb(x, y))
            return out

        return LambdaField(ScalarField(node), param_fn=params, label=label)
    return LambdaField(fn=lambda x, y, t: ca * a.value(x, y, t) + cb * b.value(x, y, t), label=label)


# ---------------------------------------------------------------- constructors


def from_expression(text: str) -> LambdaField:
    f = parse_scalar_field(text)
    kind = "magnetic" if not f.depends_on("theta") else "general"
    return LambdaField(f, kind=kind, label=text)


def magnetic(lambda_tilde: str | ScalarField) -> LambdaField:
    f = lambda_tilde if isinstance(lambda_tilde, ScalarField) else parse_scalar_field(lambda_tilde)
    if f.depends_on("theta"):
        raise ValueError("magnetic lambda_tilde must depend on x, y only")
    return LambdaField(f, kind="magnetic", label=f.source)


def thermostat(chart: ConformalChart, E) -> LambdaField:
    """lambda(x, v) = <E(x), i v>_g with v the g-unit vector of angle theta.

    With i v = e^{-phi}(-sin th, cos th) this is e^{phi}(-E1 sin th + E2 cos th).
    """
    e1, e2 = (e if isinstance(e, ScalarField) else parse_scalar_field(e) for e in E)
    if e1.depends_on("theta") or e2.depends_on("theta"):
        raise ValueError("thermostat field E must depend on x, y only")
    th = Var("theta")
    from .expr import call

    node = mul(
        call("exp", chart.phi.node),
        add(neg(mul(e1.node, call("sin", th))), mul(e2.node, call("cos", th))),
    )
    return LambdaField(ScalarField(node), kind="thermostat", label=f"thermostat({e1.source}, {e2.source})")


def constant_lambda(c: float) -> LambdaField:
    return LambdaField(constant(c), kind="magnetic", label=repr(float(c)))


# ---------------------------------------------------------------- curvatures


def vertical_derivative(lam: LambdaField, x, y, theta):
    return lam.vertical(x, y, theta)


def dual(lam: LambdaField) -> LambdaField:
    return lam.dual()


def X_lambda(chart, lam: LambdaField, x, y, theta):
    return X_apply(chart, x, y, theta, lam.partial(x, y, theta, "x"),
                   lam.partial(x, y, theta, "y"), lam.partial(x, y, theta, "theta"))


def Xperp_lambda(chart, lam: LambdaField, x, y, theta):
    return Xperp_apply(chart, x, y, theta, lam.partial(x, y, theta, "x"),
                       lam.partial(x, y, theta, "y"), lam.partial(x, y, theta, "theta"))


def F_of_V_lambda(chart, lam: LambdaField, x, y, theta):
    """F(V lambda) = X(lambda_theta) + lambda * lambda_theta_theta."""
    lt_x = lam.partial(x, y, theta, "theta", "x")
    lt_y = lam.partial(x, y, theta, "theta", "y")
    lt_t = lam.partial(x, y, theta, "theta", "theta")
    return X_apply(chart, x, y, theta, lt_x, lt_y, lt_t) + lam.value(x, y, theta) * lt_t


def jacobi_potential(chart, lam: LambdaField, x, y, theta):
    """K + X_perp(lambda) + lambda^2, which equals K_lambda - F(V lambda)."""
    lv = lam.value(x, y, theta)
    return chart.gaussian_curvature(x, y) + Xperp_lambda(chart, lam, x, y, theta) + lv * lv


def lambda_curvature(chart, lam: LambdaField, x, y, theta):
    """K_lambda = K + X_perp(lambda) + lambda^2 + F(V(lambda))."""
    return jacobi_potential(chart, lam, x, y, theta) + F_of_V_lambda(chart, lam, x, y, theta)


def signed_lambda_curvatures(chart, lam: LambdaField, component: str, x, y, theta, check: bool = True):
    """(kappa_lambda, eta_lambda) = (kappa - <nu, lambda i v>, <V(lambda) v, nu>)."""
    nu = chart.normal(component, x, y, check=check)
    v = chart.unit_vector(x, y, theta)
    iv = chart.rotate90(v)
    kappa = chart.signed_curvature(component, x, y, check=False)
    lv = lam.value(x, y, theta)
    k_lam = kappa - lv * chart.inner(x, y, nu, iv)
    eta = lam.vertical(x, y, theta) * chart.inner(x, y, v, nu)
    return k_lam, eta


def fiber_even_odd(chart, component: str, q: Callable, x, y, theta):
    """(q_e, q_o) with q_e = (q + q o rho)/2 and q_o = (q - q o rho)/2."""
    a = np.asarray(q(x, y, theta), dtype=float)
    b = np.asarray(q(x, y, chart.reflect(x, y, theta, component)), dtype=float)
    return 0.5 * (a + b), 0.5 * (a - b)


__all__ = [
    "FD_STEP",
    "F_of_V_lambda",
    "LambdaField",
    "X_apply",
    "X_lambda",
    "Xperp_apply",
    "Xperp_lambda",
    "constant_lambda",
    "dual",
    "fiber_even_odd",
    "from_expression",
    "jacobi_potential",
    "lambda_curvature",
    "magnetic",
    "signed_lambda_curvatures",
    "thermostat",
    "vertical_derivative",
]
