"""Grid calculus on SM and numerical checks of the Pestov identity.

The volume grid is a Cartesian box that extends a few cells past M, so every
node that carries quadrature weight sits under a full centered stencil. This
needs u (and phi, lambda) to be defined slightly outside M, which holds for
the analytic test functions used here. Cells cut by the boundary get their
covered area from a local half-plane clip, which keeps volume quadrature
second order.

Boundary integrals live on separate rings: points equally weighted by
periodic-trapezoid g-arclength, each with its own fiber grid
theta_k = theta_nu + pi/2 + (k + 1/2) dtheta, which rho maps onto itself by
k -> -1 - k.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .geometry import EMITTER, REFLECTOR, ConformalChart
from .lambdafield import LambdaField, lambda_curvature, signed_lambda_curvatures

TWO_PI = 2.0 * np.pi


class GridError(ValueError):
    pass


# ---------------------------------------------------------------- quadrature helpers


def _clip_area(d: float, n: np.ndarray, h: float) -> float:
    """Area of the square [-h/2, h/2]^2 inside {n . q >= -d}."""
    corners = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=float) * (0.5 * h)
    s = corners @ n + d
    poly = []
    for j in range(4):
        a, b = corners[j], corners[(j + 1) % 4]
        sa, sb = s[j], s[(j + 1) % 4]
        if sa >= 0:
            poly.append(a)
        if (sa >= 0) != (sb >= 0):
            poly.append(a + (b - a) * (sa / (sa - sb)))
    if len(poly) < 3:
        return 0.0
    p = np.array(poly)
    return 0.5 * abs(np.dot(p[:, 0], np.roll(p[:, 1], -1)) - np.dot(p[:, 1], np.roll(p[:, 0], -1)))


def cell_fractions(chart: ConformalChart, X: np.ndarray, Y: np.ndarray, h: float) -> np.ndarray:
    """Fraction of each grid cell inside M (product over boundary components)."""
    frac = np.ones(X.shape)
    for comp in chart.components():
        f = chart.boundary_function(comp)
        r = f(X, Y)
        gx, gy = f.dx(X, Y), f.dy(X, Y)
        g = np.hypot(gx, gy)
        d = r / g
        full = d >= h
        empty = d <= -h
        part = np.zeros(X.shape)
        part[full] = 1.0
        for i, j in zip(*np.nonzero(~(full | empty))):
            n = np.array([gx[i, j], gy[i, j]]) / g[i, j]
            part[i, j] = _clip_area(d[i, j], n, h) / (h * h)
        frac *= part
    return frac


def _spectral_dtheta(u: np.ndarray, axis: int = -1) -> np.ndarray:
    """Exact derivative of the trigonometric interpolant along a periodic axis."""
    n = u.shape[axis]
    k = np.fft.fftfreq(n, d=1.0 / n)
    if n % 2 == 0:
        k[n // 2] = 0.0  # the Nyquist mode has no real derivative
    shape = [1] * u.ndim
    shape[axis] = n
    return np.real(np.fft.ifft(1j * k.reshape(shape) * np.fft.fft(u, axis=axis), axis=axis))


# ---------------------------------------------------------------- grids


@dataclass
class BoundaryRing:
    component: str
    x: np.ndarray  # (nb,)
    y: np.ndarray
    w: np.ndarray  # g-arclength weights
    theta_nu: np.ndarray
    theta: np.ndarray  # (nb, nt)
    dtheta: float
    dsig_dtau: np.ndarray  # sweep-parameter rate along T's horizontal part
    dthnu_dsig: np.ndarray

    def reflect_index(self) -> np.ndarray:
        nt = self.theta.shape[1]
        return (-1 - np.arange(nt)) % nt

    def sample(self, fn: Callable) -> np.ndarray:
        return np.asarray(fn(self.x[:, None], self.y[:, None], self.theta), dtype=float) \
            * np.ones_like(self.theta)

    def integrate(self, values: np.ndarray) -> float:
        """Integral over this part of dSigma^2 = dV^1 dS_x."""
        return float(np.sum(self.w[:, None] * values) * self.dtheta)

    def inner(self, a, b) -> float:
        return self.integrate(a * b)

    def even(self, values):
        return 0.5 * (values + values[:, self.reflect_index()])

    def odd(self, values):
        return 0.5 * (values - values[:, self.reflect_index()])


@dataclass
class SMGrid:
    chart: ConformalChart
    x: np.ndarray
    y: np.ndarray
    theta: np.ndarray
    h: float
    dtheta: float
    weights: np.ndarray  # (nx, ny): e^{2 phi} * covered cell area
    rings: dict[str, BoundaryRing] = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def shape(self):
        return (len(self.x), len(self.y), len(self.theta))

    def mesh(self):
        if "mesh" not in self._cache:
            self._cache["mesh"] = np.meshgrid(self.x, self.y, self.theta, indexing="ij")
        return self._cache["mesh"]

    def sample(self, fn: Callable) -> np.ndarray:
        X, Y, T = self.mesh()
        return np.asarray(fn(X, Y, T), dtype=float) * np.ones(self.shape)

    def integrate(self, values: np.ndarray) -> float:
        """Integral over SM against the Liouville measure."""
        return float(np.sum(self.weights[:, :, None] * values) * self.dtheta)

    def inner(self, a, b) -> float:
        return self.integrate(a * b)

    def norm2(self, a) -> float:
        return self.inner(a, a)

    def volume(self) -> float:
        return self.integrate(np.ones(self.shape))

    def frame_coefficients(self):
        """Coefficients of X and X_perp on the grid."""
        if "frame" not in self._cache:
            X, Y, T = self.mesh()
            p = self.chart.phi(X[:, :, :1], Y[:, :, :1])
            px, py = self.chart.grad_phi(X[:, :, :1], Y[:, :, :1])
            s = np.exp(-p)
            c, n = np.cos(T), np.sin(T)
            self._cache["frame"] = (s * c, s * n, s * (py * c - px * n),
                                    s * n, -s * c, s * (px * c + py * n))
        return self._cache["frame"]

    def lambda_samples(self, lam: LambdaField):
        key = ("lam", id(lam))
        if key not in self._cache:
            X, Y, T = self.mesh()
            lv = np.asarray(lam.value(X, Y, T), float) * np.ones(self.shape)
            self._cache[key] = (lam, lv)
        return self._cache[key][1]


def _sweep_rates(chart, bx, by, tn):
    """d sigma / d tau for a unit-speed motion along -i nu, and d theta_nu / d sigma.

    sigma is the uniform polar-sweep parameter of the boundary points.
    """
    nb = len(bx)
    sig = TWO_PI * np.arange(nb) / nb
    dx = _spectral_dtheta(bx, axis=0)
    dy = _spectral_dtheta(by, axis=0)
    un = np.unwrap(tn)
    wind = np.round((un[-1] - un[0] + (un[1] - un[0])) / TWO_PI)
    dtn = _spectral_dtheta(un - wind * sig, axis=0) + wind
    orient = np.sign(dx * -np.sin(tn) + dy * np.cos(tn))
    speed = np.exp(chart.phi(bx, by)) * np.hypot(dx, dy)
    return -orient / speed, dtn


def make_grid(chart: ConformalChart, n: int, ntheta: int | None = None, pad: int = 3,
              n_boundary: int | None = None) -> SMGrid:
    """n x n x ntheta grid covering the chart box plus ``pad`` cells per side."""
    ntheta = n if ntheta is None else ntheta
    if n < 4 or ntheta < 4:
        raise GridError("grid needs at least 4 nodes per axis")
    if ntheta % 2:
        raise GridError("theta grid size must be even for rho-symmetric fibers")
    if chart.bbox is None:
        raise GridError("chart has no bounding box")
    x0, x1, y0, y1 = chart.bbox
    span = max(x1 - x0, y1 - y0)
    h = span / (n - 1 - 2 * pad)
    cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
    half = 0.5 * (n - 1) * h
    xs = cx - half + h * np.arange(n)
    ys = cy - half + h * np.arange(n)
    dth = TWO_PI / ntheta
    th = dth * np.arange(ntheta)
    X2, Y2 = np.meshgrid(xs, ys, indexing="ij")
    frac = cell_fractions(chart, X2, Y2, h)
    weights = np.exp(2.0 * chart.phi(X2, Y2)) * frac * h * h
    nb = n_boundary or 4 * n
    rings = {}
    for comp in chart.components():
        bx, by, bw, _ = chart.boundary_arclength(comp, nb)
        tn = chart.normal_angle(comp, bx, by, check=False)
        thetas = tn[:, None] + 0.5 * np.pi + (np.arange(ntheta)[None, :] + 0.5) * dth
        rings[comp] = BoundaryRing(comp, bx, by, bw, tn, thetas, dth, *_sweep_rates(chart, bx, by, tn))
    return SMGrid(chart, xs, ys, th, h, dth, weights, rings)


# ---------------------------------------------------------------- operators


def apply_field(grid: SMGrid, which: str, u: np.ndarray, lam: LambdaField | None = None) -> np.ndarray:
    """X, Xperp, V or F applied to grid samples u.

    Spatial derivatives are centered second-order differences (one-sided at the
    box edge, which carries no weight); V is spectral on the periodic fiber.
    """
    if which == "V":
        return _spectral_dtheta(u, axis=2)
    ux = np.gradient(u, grid.h, axis=0, edge_order=2)
    uy = np.gradient(u, grid.h, axis=1, edge_order=2)
    ut = _spectral_dtheta(u, axis=2)
    a1, a2, a3, b1, b2, b3 = grid.frame_coefficients()
    if which == "X":
        return a1 * ux + a2 * uy + a3 * ut
    if which == "Xperp":
        return b1 * ux + b2 * uy + b3 * ut
    if which == "F":
        if lam is None:
            raise ValueError("F needs lambda")
        return a1 * ux + a2 * uy + a3 * ut + grid.lambda_samples(lam) * ut
    raise ValueError(f"unknown vector field {which!r}")


def structure_residuals(grid: SMGrid, u: Callable | np.ndarray, lam: LambdaField | None = None) -> dict:
    """Weighted L2 norms of the commutator residuals on a test function.

    [X,V] = Xperp, [Xperp,V] = -X, [X,Xperp] = -KV and, with lambda,
    [V,F] = -Xperp + V(lambda)V, [V,Xperp] = F - lambda V,
    [F,Xperp] = lambda F - (K + Xperp(lambda) + lambda^2) V.
    """
    from .lambdafield import jacobi_potential

    U = grid.sample(u) if callable(u) else u
    X, Y, T = grid.mesh()
    ap = lambda w, f: apply_field(grid, w, f, lam)  # noqa: E731
    K = grid.chart.gaussian_curvature(X, Y) * np.ones(grid.shape)
    Xu, Vu, Pu = ap("X", U), ap("V", U), ap("Xperp", U)
    out = {
        "[X,V]-Xperp": ap("X", Vu) - ap("V", Xu) - Pu,
        "[Xperp,V]+X": ap("Xperp", Vu) - ap("V", Pu) + Xu,
        "[X,Xperp]+KV": ap("X", Pu) - ap("Xperp", Xu) + K * Vu,
    }
    if lam is not None:
        Fu = ap("F", U)
        lv = grid.lambda_samples(lam)
        lt = np.asarray(lam.vertical(X, Y, T), float) * np.ones(grid.shape)
        pot = np.asarray(jacobi_potential(grid.chart, lam, X, Y, T), float) * np.ones(grid.shape)
        out["[V,F]+Xperp-V(lam)V"] = ap("V", Fu) - ap("F", Vu) + Pu - lt * Vu
        out["[V,Xperp]-F+lamV"] = ap("V", Pu) - ap("Xperp", Vu) - Fu + lv * Vu
        out["[F,Xperp]-lamF+PV"] = ap("F", Pu) - ap("Xperp", Fu) - lv * Fu + pot * Vu
    return {k: float(np.sqrt(grid.norm2(v))) for k, v in out.items()}


def vertical_fourier(grid: SMGrid, u: np.ndarray) -> dict[int, np.ndarray]:
    """Coefficients c_k(x, y) with u = sum_k c_k e^{i k theta} on the grid."""
    nt = u.shape[2]
    c = np.fft.fft(u, axis=2) / nt
    ks = np.fft.fftfreq(nt, d=1.0 / nt).astype(int)
    return {int(k): c[:, :, j] for j, k in enumerate(ks)}


def mode_norms(grid: SMGrid, modes: dict[int, np.ndarray]) -> dict[int, float]:
    """||u_k||^2 for each vertical mode."""
    return {k: float(TWO_PI * np.sum(grid.weights * np.abs(c) ** 2)) for k, c in modes.items()}


# ---------------------------------------------------------------- boundary calculus


def _ring_frame(chart: ConformalChart, ring: BoundaryRing):
    """mu = <v, nu>, <iv, nu> = V(mu) and the theta-rate of T on a ring."""
    x, y, th = ring.x[:, None], ring.y[:, None], ring.theta
    px, py = chart.grad_phi(x, y)
    s = np.exp(-chart.phi(x, y))
    c, n = np.cos(th), np.sin(th)
    psi = th - ring.theta_nu[:, None]
    mu = np.cos(psi)
    iv_nu = -np.sin(psi)
    # T = V(mu) X + mu Xperp; its d_theta coefficient
    t_theta = s * (iv_nu * (py * c - px * n) + mu * (px * c + py * n))
    return mu, iv_nu, t_theta


def tangential_T(chart: ConformalChart, ring: BoundaryRing, W: np.ndarray) -> np.ndarray:
    """T w for w sampled on the ring, using only boundary data.

    T is tangent to dSM: its horizontal part is -i nu, a unit-speed motion
    along the boundary, and psi = theta - theta_nu is constant along each
    fiber index. Derivatives along the sweep and the fiber are spectral.
    """
    _, _, t_theta = _ring_frame(chart, ring)
    dW_sig = _spectral_dtheta(W, axis=0)
    dW_th = _spectral_dtheta(W, axis=1)
    return ring.dsig_dtau[:, None] * dW_sig + (t_theta - (ring.dthnu_dsig * ring.dsig_dtau)[:, None]) * dW_th


def ring_fields(chart: ConformalChart, ring: BoundaryRing, fn: Callable,
                lam: LambdaField | None = None) -> dict:
    """u, Tu, Vu, mu, <iv, nu> and (with lambda) lambda, V(lambda) on a ring."""
    u = ring.sample(fn)
    mu, ivn, _ = _ring_frame(chart, ring)
    out = {"u": u, "T": tangential_T(chart, ring, u), "V": _spectral_dtheta(u, axis=1),
           "mu": mu, "iv_nu": ivn}
    if lam is not None:
        x, y = ring.x[:, None], ring.y[:, None]
        out["lam"] = np.asarray(lam.value(x, y, ring.theta), float) * np.ones_like(u)
        out["Vlam"] = np.asarray(lam.vertical(x, y, ring.theta), float) * np.ones_like(u)
    return out


def boundary_term(chart, ring: BoundaryRing, fn: Callable, lam: LambdaField) -> float:
    """(nabla_{T,lambda} u, Vu) on one ring.

    nabla_{T,lambda} = -<v_perp, nu> F - <v, nu> V(lambda) V + <v, nu> Xperp with
    v_perp = -iv the horizontal part of Xperp, which is T + <iv, nu> lambda V
    - mu V(lambda) V with T = V(mu) X + mu Xperp.
    """
    r = ring_fields(chart, ring, fn, lam)
    nt = r["T"] + (r["iv_nu"] * r["lam"] - r["mu"] * r["Vlam"]) * r["V"]
    return ring.inner(nt, r["V"])


def _as_callable(u) -> Callable:
    if callable(u):
        return u
    raise TypeError("u must be callable (x, y, theta) -> values")


@dataclass
class PestovReport:
    terms: dict
    lhs: float
    rhs: float
    relative_residual: float
    grid: dict

    def as_dict(self):
        return {"terms": self.terms, "lhs": self.lhs, "rhs": self.rhs,
                "relative_residual": self.relative_residual, "grid": self.grid}


def relative_residual(lhs: float, rhs: float, floor: float = 0.0) -> float:
    """|lhs - rhs| / max(|lhs|, |rhs|, floor); ``floor`` guards sides that cancel to zero."""
    scale = max(abs(lhs), abs(rhs), floor)
    return 0.0 if scale == 0.0 else abs(lhs - rhs) / scale


def pestov_residual(grid: SMGrid, lam: LambdaField, u) -> PestovReport:
    """Both sides of ||VFu||^2 = ||FVu||^2 - (K_lam Vu, Vu) + ||Fu||^2 + (nabla_{T,lam} u, Vu)_dSM."""
    fn = _as_callable(u)
    chart = grid.chart
    U = grid.sample(fn)
    Fu = apply_field(grid, "F", U, lam)
    Vu = apply_field(grid, "V", U)
    VFu = apply_field(grid, "V", Fu)
    FVu = apply_field(grid, "F", Vu, lam)
    X, Y, T = grid.mesh()
    Kl = np.asarray(lambda_curvature(chart, lam, X, Y, T), float) * np.ones(grid.shape)
    bnd = {c: boundary_term(chart, r, fn, lam) for c, r in grid.rings.items()}
    terms = {
        "||VFu||^2": grid.norm2(VFu),
        "||FVu||^2": grid.norm2(FVu),
        "(K_lam Vu, Vu)": grid.inner(Kl * Vu, Vu),
        "||Fu||^2": grid.norm2(Fu),
        "boundary": float(sum(bnd.values())),
        **{f"boundary[{c}]": v for c, v in bnd.items()},
    }
    lhs = terms["||VFu||^2"]
    rhs = terms["||FVu||^2"] - terms["(K_lam Vu, Vu)"] + terms["||Fu||^2"] + terms["boundary"]
    info = {"n": len(grid.x), "ntheta": len(grid.theta), "h": grid.h,
            "n_boundary": {c: len(r.x) for c, r in grid.rings.items()}}
    return PestovReport(terms, lhs, rhs, relative_residual(lhs, rhs), info)


# ---------------------------------------------------------------- even/odd reduction


def even_odd_pairing(ring: BoundaryRing, u: np.ndarray, w: np.ndarray) -> float:
    """(u_e, w_o) + (u_o, w_e) on a ring; zero on rho-symmetric fibers."""
    return ring.inner(ring.even(u), ring.odd(w)) + ring.inner(ring.odd(u), ring.even(w))


@dataclass
class BoundaryReport:
    component: str
    lhs: float
    lemma_rhs: float
    lemma_residual: float
    reduced_rhs: float | None
    reduced_residual: float | None
    symmetric_defect: float  # max |u - u o rho| on the ring
    orthogonality: float

    def as_dict(self):
        return dict(self.__dict__)


def boundary_decomposition(grid: SMGrid, lam: LambdaField, u, component: str = REFLECTOR,
                           symmetric_tol: float = 1e-10, seed: int = 0) -> BoundaryReport:
    """Both sides of the even/odd form of the boundary term on one component.

    The split form uses nabla_T = T and the coefficient c = <v_perp, nu>,
    which is rho-even. When u = u o rho on the ring, the reduced form
    -((kappa_lam + eta_lam)_e Vu, Vu) is evaluated too. ``orthogonality`` is
    the pairing (a_e, b_o) + (a_o, b_e) of random ring functions.
    """
    fn = _as_callable(u)
    chart = grid.chart
    ring = grid.rings[component]
    rf = ring_fields(chart, ring, fn, lam)
    U = rf["u"]
    lhs = ring.inner(rf["T"] + (rf["iv_nu"] * rf["lam"] - rf["mu"] * rf["Vlam"]) * rf["V"], rf["V"])
    ue, uo = ring.even(U), ring.odd(U)
    Vu = rf["V"]
    Vue, Vuo = _spectral_dtheta(ue, axis=1), _spectral_dtheta(uo, axis=1)
    Tue, Tuo = tangential_T(chart, ring, ue), tangential_T(chart, ring, uo)
    mu, c = rf["mu"], -rf["iv_nu"]
    kappa = chart.signed_curvature(component, ring.x, ring.y, check=False)[:, None]
    lVu, ltVu = rf["lam"] * Vu, rf["Vlam"] * Vu
    rhs = (ring.inner(Tue, Vuo) + ring.inner(Tuo, Vue)
           - ring.inner(kappa * Vu, Vu)
           - ring.inner(c * ring.even(lVu) + mu * ring.odd(ltVu), Vuo)
           - ring.inner(c * ring.odd(lVu) + mu * ring.even(ltVu), Vue))
    defect = float(np.max(np.abs(uo)) * 2.0)
    # size of the individual boundary terms; both sides may cancel to zero
    floor = ring.integrate(np.abs(rf["T"] * Vu) + (1.0 + np.abs(kappa) + np.abs(lVu)) * Vu ** 2)
    red = red_res = None
    if defect <= symmetric_tol * max(1.0, float(np.max(np.abs(U)))):
        k_lam, eta = signed_lambda_curvatures(chart, lam, component, ring.x[:, None], ring.y[:, None],
                                              ring.theta, check=False)
        q = np.asarray(k_lam + eta, float) * np.ones_like(U)
        red = -ring.inner(ring.even(q) * Vu, Vu)
        red_res = relative_residual(lhs, red, floor)
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=U.shape), rng.normal(size=U.shape)
    orth = abs(even_odd_pairing(ring, a, b)) / max(1.0, ring.integrate(np.abs(a * b)))
    return BoundaryReport(component, float(lhs), float(rhs), relative_residual(lhs, float(rhs), floor),
                          red, red_res, defect, float(orth))


def ibp_residuals(grid: SMGrid, u: Callable, w: Callable) -> dict:
    """Integration-by-parts defects for X, Xperp (with boundary terms) and V.

    (Xu, w) + (u, Xw) + (<v, nu> u, w)_dSM and the Xperp analogue with
    <v_perp, nu> = -<iv, nu>; V is skew with no boundary term.
    """
    U, W = grid.sample(u), grid.sample(w)
    out = {}
    for name in ("X", "Xperp"):
        vol = grid.inner(apply_field(grid, name, U), W) + grid.inner(U, apply_field(grid, name, W))
        bnd = 0.0
        for ring in grid.rings.values():
            mu, ivn, _ = _ring_frame(grid.chart, ring)
            coef = mu if name == "X" else -ivn
            bnd += ring.inner(coef * ring.sample(u), ring.sample(w))
        out[name] = vol + bnd
    out["V"] = grid.inner(apply_field(grid, "V", U), W) + grid.inner(U, apply_field(grid, "V", W))
    return out


def convergence_order(e_coarse: float, e_fine: float, ratio: float = 2.0) -> float:
    if e_fine == 0.0:
        return np.inf
    return float(np.log(e_coarse / e_fine) / np.log(ratio))


__all__ = [
    "BoundaryReport",
    "BoundaryRing",
    "GridError",
    "PestovReport",
    "SMGrid",
    "apply_field",
    "boundary_decomposition",
    "boundary_term",
    "cell_fractions",
    "convergence_order",
    "even_odd_pairing",
    "ibp_residuals",
    "make_grid",
    "mode_norms",
    "pestov_residual",
    "relative_residual",
    "ring_fields",
    "structure_residuals",
    "vertical_fourier",
]
