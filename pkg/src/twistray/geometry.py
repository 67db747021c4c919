"""Conformal charts g = e^{2 phi}(dx^2 + dy^2) on planar domains.

The domain is {rho_E >= 0} and {rho_R >= 0}; rho_E cuts out the outer
(emitter) boundary and rho_R the inner (reflector) one. Either may be absent.
Tangent vectors are handled in chart components; since the metric is
conformal, Euclidean rotation by 90 degrees is also the g-rotation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .expr import FieldBundle, ScalarField, constant, parse_scalar_field

TWO_PI = 2.0 * np.pi
BOUNDARY_TOL = 1e-9

EMITTER = "E"
REFLECTOR = "R"


class GeometryError(ValueError):
    pass


class NotOnBoundaryError(GeometryError):
    pass


class DegenerateGradientError(GeometryError):
    pass


def wrap_angle(theta):
    """Reduce angles to [0, 2 pi)."""
    t = np.mod(theta, TWO_PI)
    return np.where(t >= TWO_PI, 0.0, t)


@dataclass(frozen=True)
class PhasePoint:
    x: float
    y: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "theta", float(wrap_angle(self.theta)))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    @classmethod
    def from_array(cls, a) -> "PhasePoint":
        return cls(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True, eq=False)
class ConformalChart:
    phi: ScalarField
    emitter: ScalarField | None = None
    reflector: ScalarField | None = None
    boundary_tol: float = BOUNDARY_TOL
    name: str = "chart"
    # optional hints used by grid builders and samplers: (xmin, xmax, ymin, ymax)
    bbox: tuple[float, float, float, float] | None = None
    meta: dict = field(default_factory=dict)

    # -- fast paths used by the integrators ---------------------------------
    @cached_property
    def _phi_bundle(self) -> FieldBundle:
        return FieldBundle([self.phi, self.phi.dx, self.phi.dy])

    def phi_grad_raw(self, x, y):
        """(phi, phi_x, phi_y) without broadcasting (constants stay scalars)."""
        return self._phi_bundle.raw(x, y)

    @cached_property
    def _rho_bundle(self):
        comps = self.components()
        if not comps:
            return comps, None
        return comps, FieldBundle([self.boundary_function(c) for c in comps])

    def rho_raw(self, x, y) -> dict:
        comps, bundle = self._rho_bundle
        if bundle is None:
            return {}
        vals = bundle.raw(x, y)
        shape = np.shape(x)
        return {c: np.broadcast_to(v, shape) for c, v in zip(comps, vals)}

    # -- metric ----------------------------------------------------------
    def conformal_factor(self, x, y):
        return np.exp(self.phi(x, y))

    def grad_phi(self, x, y):
        return self.phi.dx(x, y), self.phi.dy(x, y)

    def laplacian_phi(self, x, y):
        return self.phi.dx.dx(x, y) + self.phi.dy.dy(x, y)

    def gaussian_curvature(self, x, y):
        return -np.exp(-2.0 * self.phi(x, y)) * self.laplacian_phi(x, y)

    def inner(self, x, y, u, w):
        """g-inner product of chart vectors u, w (last axis = components)."""
        u = np.asarray(u, dtype=float)
        w = np.asarray(w, dtype=float)
        return np.exp(2.0 * self.phi(x, y)) * (u[..., 0] * w[..., 0] + u[..., 1] * w[..., 1])

    def norm(self, x, y, u):
        return np.sqrt(self.inner(x, y, u, u))

    def unit_vector(self, x, y, theta):
        s = np.exp(-self.phi(x, y))
        return np.stack([s * np.cos(theta), s * np.sin(theta)], axis=-1)

    @staticmethod
    def angle_of(u):
        u = np.asarray(u, dtype=float)
        return wrap_angle(np.arctan2(u[..., 1], u[..., 0]))

    @staticmethod
    def rotate90(u):
        """i u: counterclockwise quarter turn, an isometry for conformal g."""
        u = np.asarray(u, dtype=float)
        return np.stack([-u[..., 1], u[..., 0]], axis=-1)

    def christoffel(self, x, y, u, w):
        """Gamma^k_ij u^i w^j for the conformal metric."""
        px, py = self.grad_phi(x, y)
        u = np.asarray(u, dtype=float)
        w = np.asarray(w, dtype=float)
        gu = px * u[..., 0] + py * u[..., 1]
        gw = px * w[..., 0] + py * w[..., 1]
        uw = u[..., 0] * w[..., 0] + u[..., 1] * w[..., 1]
        return np.stack(
            [u[..., 0] * gw + w[..., 0] * gu - uw * px, u[..., 1] * gw + w[..., 1] * gu - uw * py],
            axis=-1,
        )

    # -- domain ----------------------------------------------------------
    def boundary_function(self, component: str) -> ScalarField:
        if component == EMITTER:
            f = self.emitter
        elif component == REFLECTOR:
            f = self.reflector
        else:
            raise GeometryError(f"unknown boundary component {component!r}")
        if f is None:
            raise GeometryError(f"chart {self.name!r} has no component {component!r}")
        return f

    def components(self) -> list[str]:
        out = []
        if self.emitter is not None:
            out.append(EMITTER)
        if self.reflector is not None:
            out.append(REFLECTOR)
        return out

    def rho(self, component: str, x, y):
        return self.boundary_function(component)(x, y)

    def in_domain(self, x, y, tol: float = 0.0):
        ok = np.ones(np.broadcast_shapes(np.shape(x), np.shape(y)), dtype=bool)
        for c in self.components():
            ok &= self.rho(c, x, y) >= -tol
        return ok

    def on_boundary(self, component: str, x, y, tol: float | None = None):
        tol = self.boundary_tol if tol is None else tol
        return np.abs(self.rho(component, x, y)) <= tol

    def _check_on(self, component, x, y):
        if not np.all(self.on_boundary(component, x, y)):
            raise NotOnBoundaryError(
                f"point not within {self.boundary_tol:g} of boundary component {component}"
            )

    # -- boundary geometry ---------------------------------------------------
    def _unit_chart_normal(self, component, x, y):
        f = self.boundary_function(component)
        gx, gy = f.dx(x, y), f.dy(x, y)
        mag = np.hypot(gx, gy)
        if np.any(mag <= 1e-14):
            raise DegenerateGradientError(f"vanishing gradient of rho_{component}")
        return gx / mag, gy / mag, mag

    def normal(self, component: str, x, y, check: bool = True):
        """Inward g-unit normal: normalized g-gradient of rho (chart components)."""
        if check:
            self._check_on(component, x, y)
        nx, ny, _ = self._unit_chart_normal(component, x, y)
        s = np.exp(-self.phi(x, y))
        return np.stack([s * nx, s * ny], axis=-1)

    def normal_angle(self, component: str, x, y, check: bool = True):
        if check:
            self._check_on(component, x, y)
        f = self.boundary_function(component)
        return wrap_angle(np.arctan2(f.dy(x, y), f.dx(x, y)))

    def nabla_normal(self, component: str, x, y, w):
        """Covariant derivative nabla_w nu of the off-boundary extension of nu."""
        f = self.boundary_function(component)
        w = np.asarray(w, dtype=float)
        nx, ny, mag = self._unit_chart_normal(component, x, y)
        hxx, hxy, hyy = f.dx.dx(x, y), f.dx.dy(x, y), f.dy.dy(x, y)
        px, py = self.grad_phi(x, y)
        s = np.exp(-self.phi(x, y))
        # derivative of n = grad rho / |grad rho| along w (Euclidean)
        hw_x = hxx * w[..., 0] + hxy * w[..., 1]
        hw_y = hxy * w[..., 0] + hyy * w[..., 1]
        proj = nx * hw_x + ny * hw_y
        dn_x = (hw_x - nx * proj) / mag
        dn_y = (hw_y - ny * proj) / mag
        dphi_w = px * w[..., 0] + py * w[..., 1]
        dnu = np.stack([s * (dn_x - dphi_w * nx), s * (dn_y - dphi_w * ny)], axis=-1)
        nu = np.stack([s * nx, s * ny], axis=-1)
        return dnu + self.christoffel(x, y, w, nu)

    def second_fundamental_form(self, component: str, x, y, v, w=None, check: bool = True):
        """sff(v, w) = -<nabla_v nu, w>_g (w defaults to v)."""
        if check:
            self._check_on(component, x, y)
        v = np.asarray(v, dtype=float)
        w = v if w is None else np.asarray(w, dtype=float)
        return -self.inner(x, y, self.nabla_normal(component, x, y, v), w)

    def unit_tangent(self, component: str, x, y, check: bool = True):
        return self.rotate90(self.normal(component, x, y, check=check))

    def signed_curvature(self, component: str, x, y, check: bool = True):
        t = self.unit_tangent(component, x, y, check=check)
        return self.second_fundamental_form(component, x, y, t, check=False)

    # -- reflection --------------------------------------------------------
    def reflect_vector(self, component: str, x, y, v, check: bool = True):
        nu = self.normal(component, x, y, check=check)
        return v - 2.0 * self.inner(x, y, v, nu)[..., None] * nu

    def reflect(self, x, y, theta, component: str = REFLECTOR, check: bool = True):
        """Fiber angle after the mirror law v -> v - 2<v,nu>nu.

        In angle form this is theta -> pi + 2 theta_nu - theta, which is an
        exact involution up to the final reduction mod 2 pi.
        """
        tn = self.normal_angle(component, x, y, check=check)
        return wrap_angle(np.pi + 2.0 * tn - theta)

    def reflect_point(self, p: PhasePoint, component: str = REFLECTOR) -> PhasePoint:
        return PhasePoint(p.x, p.y, float(self.reflect(p.x, p.y, p.theta, component)))

    def normal_component(self, component: str, x, y, theta, check: bool = True):
        """mu = <v, nu>_g for the unit vector of angle theta."""
        tn = self.normal_angle(component, x, y, check=check)
        return np.cos(theta - tn)

    # -- sampling helpers ------------------------------------------------------
    def boundary_points(self, component: str, n: int):
        """n points on a component by projecting a polar sweep onto rho = 0.

        Works for star-shaped components around the bbox center; a few Newton
        steps along the chart gradient land the points on the zero set.
        """
        cx, cy, reach = self._center_and_reach()
        ang = np.arange(n) * (TWO_PI / n)
        f = self.boundary_function(component)
        # bracket the zero along each ray from the center
        r_lo = np.zeros(n)
        r_hi = np.full(n, reach)
        d = np.stack([np.cos(ang), np.sin(ang)], axis=-1)
        inside_lo = f(cx + 1e-3 * reach * d[:, 0], cy + 1e-3 * reach * d[:, 1])
        sgn = np.sign(inside_lo)
        r_lo[:] = 1e-3 * reach
        for _ in range(80):
            mid = 0.5 * (r_lo + r_hi)
            val = f(cx + mid * d[:, 0], cy + mid * d[:, 1])
            same = np.sign(val) == sgn
            r_lo = np.where(same, mid, r_lo)
            r_hi = np.where(same, r_hi, mid)
        r = 0.5 * (r_lo + r_hi)
        x, y = cx + r * d[:, 0], cy + r * d[:, 1]
        for _ in range(3):
            val = f(x, y)
            gx, gy = f.dx(x, y), f.dy(x, y)
            g2 = gx * gx + gy * gy
            x, y = x - val * gx / g2, y - val * gy / g2
        return x, y

    def _center_and_reach(self):
        if self.bbox is None:
            raise GeometryError("chart has no bounding box")
        x0, x1, y0, y1 = self.bbox
        cx, cy = self.meta.get("center", (0.5 * (x0 + x1), 0.5 * (y0 + y1)))
        reach = 1.5 * max(x1 - x0, y1 - y0)
        return cx, cy, reach

    def boundary_arclength(self, component: str, n: int):
        """Points, g-arclength weights and cumulative arclength on a component.

        Uses the periodic trapezoid rule on the polar sweep, so weights are
        spectrally accurate for smooth closed curves.
        """
        x, y = self.boundary_points(component, n)
        cx, cy, _ = self._center_and_reach()
        # derivative of the polar parametrization via spectral differentiation
        k = np.fft.fftfreq(n, d=1.0 / n)
        dx = np.real(np.fft.ifft(1j * k * np.fft.fft(x)))
        dy = np.real(np.fft.ifft(1j * k * np.fft.fft(y)))
        speed = np.exp(self.phi(x, y)) * np.hypot(dx, dy)
        w = speed * (TWO_PI / n)
        s = np.concatenate([[0.0], np.cumsum(w)[:-1]])
        return x, y, w, s


    def boundary_uniform_arclength(self, component: str, n: int, n_fine: int = 4096):
        """n points equally spaced in g-arclength; returns x, y, s, total length."""
        xf, yf, wf, sf = self.boundary_arclength(component, n_fine)
        total = float(np.sum(wf))
        cx, cy, _ = self._center_and_reach()
        par = np.arange(n_fine) * (TWO_PI / n_fine)
        s_target = np.arange(n) * (total / n)
        # arclength is increasing in the sweep parameter; invert by interpolation
        par_t = np.interp(s_target, np.append(sf, total), np.append(par, TWO_PI))
        f = self.boundary_function(component)
        reach = self._center_and_reach()[2]
        d = np.stack([np.cos(par_t), np.sin(par_t)], axis=-1)
        r_lo = np.full(n, 1e-3 * reach)
        r_hi = np.full(n, reach)
        sgn = np.sign(f(cx + r_lo * d[:, 0], cy + r_lo * d[:, 1]))
        for _ in range(80):
            mid = 0.5 * (r_lo + r_hi)
            same = np.sign(f(cx + mid * d[:, 0], cy + mid * d[:, 1])) == sgn
            r_lo = np.where(same, mid, r_lo)
            r_hi = np.where(same, r_hi, mid)
        r = 0.5 * (r_lo + r_hi)
        x, y = cx + r * d[:, 0], cy + r * d[:, 1]
        for _ in range(3):
            val = f(x, y)
            gx, gy = f.dx(x, y), f.dy(x, y)
            g2 = gx * gx + gy * gy
            x, y = x - val * gx / g2, y - val * gy / g2
        return x, y, s_target, total


# ---------------------------------------------------------------- builders


def circle_function(center=(0.0, 0.0), radius=1.0, inside=True) -> ScalarField:
    cx, cy = map(float, center)
    r = f"sqrt((x - ({cx!r}))^2 + (y - ({cy!r}))^2)"
    text = f"{float(radius)!r} - {r}" if inside else f"{r} - {float(radius)!r}"
    return parse_scalar_field(text)


def ellipse_function(center=(0.0, 0.0), axes=(1.0, 1.0), inside=True) -> ScalarField:
    cx, cy = map(float, center)
    a, b = map(float, axes)
    r = f"sqrt(((x - ({cx!r}))/{a!r})^2 + ((y - ({cy!r}))/{b!r})^2)"
    return parse_scalar_field(f"1 - {r}" if inside else f"{r} - 1")


def make_chart(phi="0", emitter=None, reflector=None, name="chart", bbox=None, center=(0.0, 0.0)):
    """Convenience constructor taking expression text or fields."""
    phi_f = phi if isinstance(phi, ScalarField) else parse_scalar_field(str(phi))
    if phi_f.depends_on("theta"):
        raise GeometryError("phi must not depend on theta")
    e = emitter if (emitter is None or isinstance(emitter, ScalarField)) else parse_scalar_field(emitter)
    r = reflector if (reflector is None or isinstance(reflector, ScalarField)) else parse_scalar_field(reflector)
    return ConformalChart(phi_f, e, r, name=name, bbox=bbox, meta={"center": tuple(center)})


def flat_annulus(r_in=0.5, r_out=1.0, phi="0", name="flat-annulus") -> ConformalChart:
    return make_chart(
        phi,
        circle_function(radius=r_out, inside=True),
        circle_function(radius=r_in, inside=False),
        name=name,
        bbox=(-r_out, r_out, -r_out, r_out),
    )


def disk(radius=1.0, phi="0", name="disk") -> ConformalChart:
    return make_chart(phi, circle_function(radius=radius, inside=True), None, name=name,
                      bbox=(-radius, radius, -radius, radius))


def plane(phi="0", name="plane") -> ConformalChart:
    return make_chart(phi, None, None, name=name)


__all__ = [
    "BOUNDARY_TOL",
    "EMITTER",
    "REFLECTOR",
    "ConformalChart",
    "DegenerateGradientError",
    "GeometryError",
    "NotOnBoundaryError",
    "PhasePoint",
    "circle_function",
    "constant",
    "disk",
    "ellipse_function",
    "flat_annulus",
    "make_chart",
    "plane",
    "wrap_angle",
]
