"""Broken lambda-ray transform of f = f0 + alpha, primitives and transport checks."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.integrate import simpson

from .dynamics import EXITED, STOPPED, TraceError, TraceOptions, trace_batch
from .expr import ScalarField, constant, parse_scalar_field
from .geometry import EMITTER, ConformalChart, PhasePoint, wrap_angle
from .lambdafield import LambdaField


def _field(v) -> ScalarField:
    if isinstance(v, ScalarField):
        return v
    if isinstance(v, (int, float)):
        return constant(float(v))
    return parse_scalar_field(str(v))


class IntegrandField:
    """f(x, v) = f0(x) + alpha_1 v^1 + alpha_2 v^2 with v = e^{-phi}(cos, sin).

    ``sign=-1`` gives the reversed integrand f~(x, v) = f(x, -v).
    """

    def __init__(self, f0="0", alpha=("0", "0"), sign: int = 1):
        self.f0 = _field(f0)
        self.alpha = (_field(alpha[0]), _field(alpha[1]))
        self.sign = sign
        for part in (self.f0, *self.alpha):
            if part.depends_on("theta"):
                raise ValueError("f0 and alpha must depend on x, y only")

    @classmethod
    def gauge(cls, h) -> "IntegrandField":
        """The exact form dh (f0 = 0, alpha = (h_x, h_y))."""
        h = _field(h)
        return cls("0", (h.dx, h.dy))

    def reversed(self) -> "IntegrandField":
        return IntegrandField(self.f0, self.alpha, -self.sign)

    def __call__(self, chart: ConformalChart, x, y, theta):
        s = np.exp(-chart.phi(x, y))
        one = self.alpha[0](x, y) * np.cos(theta) + self.alpha[1](x, y) * np.sin(theta)
        return self.f0(x, y) + self.sign * s * one

    def __repr__(self):
        return f"IntegrandField(f0={self.f0.source!r}, alpha=({self.alpha[0].source!r}, {self.alpha[1].source!r}))"


# ---------------------------------------------------------------- quadrature


def _segment_integrals(values: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Composite Simpson over one segment; values may have trailing columns."""
    if len(t) < 2:
        return np.zeros(values.shape[1:])
    return simpson(values, x=t, axis=0)


def integrate_rays(chart: ConformalChart, rays, integrand) -> np.ndarray:
    """Integrals of ``integrand(chart, x, y, theta)`` over recorded broken rays.

    The integrand may return shape (m,) or (m, k); panels never straddle a
    reflection because each segment is integrated separately.
    """
    segs = [s for r in rays for s in r.segments]
    owner = np.concatenate([np.full(len(r.segments), i) for i, r in enumerate(rays)]) if segs else np.zeros(0, int)
    allrows = np.vstack(segs)
    vals = np.asarray(integrand(chart, allrows[:, 1], allrows[:, 2], allrows[:, 3]), dtype=float)
    cuts = np.cumsum([len(s) for s in segs])[:-1]
    parts = np.split(vals, cuts, axis=0)
    out = np.zeros((len(rays),) + vals.shape[1:])
    for k, (seg, v) in enumerate(zip(segs, parts)):
        out[owner[k]] += _segment_integrals(v, np.abs(seg[:, 0]))
    return out


def _as_rows(points) -> np.ndarray:
    if isinstance(points, PhasePoint):
        return points.as_array()[None, :]
    if isinstance(points, (list, tuple)) and points and isinstance(points[0], PhasePoint):
        return np.array([p.as_array() for p in points])
    return np.atleast_2d(np.asarray(points, dtype=float))


def _traced(chart, lam, pts, opts, threads):
    res = trace_batch(chart, lam, pts, opts, record=True, threads=threads)
    bad = res.status != EXITED
    if np.any(bad):
        raise TraceError(f"{int(bad.sum())} ray(s) did not exit: {sorted(set(res.status[bad]))}")
    return res


def primitive(chart: ConformalChart, lam: LambdaField, f, points, opts: TraceOptions | None = None,
              threads: int = 1) -> np.ndarray:
    """u(x, v) = integral of f along the broken ray from (x, v) until exit."""
    pts = _as_rows(points)
    res = _traced(chart, lam, pts, opts, threads)
    return integrate_rays(chart, res.rays, f)


def dual_primitive(chart: ConformalChart, lam: LambdaField, f, points, opts: TraceOptions | None = None,
                   threads: int = 1) -> np.ndarray:
    """u^-(x, v): primitive of f~ for the dual twist."""
    return primitive(chart, lam.dual(), f.reversed(), points, opts, threads)


def broken_transform(chart: ConformalChart, lam: LambdaField, f, points, opts: TraceOptions | None = None,
                     threads: int = 1, check_emitter: bool = True) -> np.ndarray:
    """If(x, v) for phase points based on the emitter."""
    pts = _as_rows(points)
    if check_emitter:
        rho = chart.rho(EMITTER, pts[:, 0], pts[:, 1])
        if np.any(np.abs(rho) > 1e-8):
            raise ValueError("broken_transform needs base points on the emitter")
    return primitive(chart, lam, f, pts, opts, threads)


# ---------------------------------------------------------------- emitter fans


def emitter_fan(chart: ConformalChart, n_positions: int, n_angles: int, margin: float = 0.05):
    """Inward emitter rays on a uniform (arclength, angle-to-nu) grid.

    Returns (starts (n, 3), s, psi) where psi is the angle from the inward
    normal, kept inside (-pi/2 + margin, pi/2 - margin).
    """
    x, y, s, _ = chart.boundary_uniform_arclength(EMITTER, n_positions)
    tn = chart.normal_angle(EMITTER, x, y, check=False)
    width = np.pi - 2.0 * margin
    psi = -np.pi / 2 + margin + (np.arange(n_angles) + 0.5) * width / n_angles
    X = np.repeat(x, n_angles)
    Y = np.repeat(y, n_angles)
    S = np.repeat(s, n_angles)
    PSI = np.tile(psi, n_positions)
    TH = wrap_angle(np.repeat(tn, n_angles) + PSI)
    return np.column_stack([X, Y, TH]), S, PSI


def sinogram(chart: ConformalChart, lam: LambdaField, f, n_positions: int, n_angles: int,
             margin: float = 0.05, opts: TraceOptions | None = None, threads: int = 1):
    """Rows (s, psi, If) over an emitter fan."""
    starts, s, psi = emitter_fan(chart, n_positions, n_angles, margin)
    vals = broken_transform(chart, lam, f, starts, opts, threads, check_emitter=False)
    return np.column_stack([s, psi, vals])


def write_sinogram_csv(path, rows: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["s", "psi", "If"])
        for r in rows:
            w.writerow([repr(float(v)) for v in r])


# ---------------------------------------------------------------- transport checks


def _short_flow(chart, lam, pts, delta, opts):
    """phi_{+delta} and phi_{-delta} for interior points; errors on a boundary hit."""
    o = (opts or TraceOptions()).with_(step=min((opts or TraceOptions()).step, delta))
    n = len(pts)
    fwd = trace_batch(chart, lam, pts, o, t_stop=np.full(n, delta))
    bwd = trace_batch(chart, lam, pts, o, t_stop=np.full(n, delta), direction=-1)
    if np.any(fwd.status != STOPPED) or np.any(bwd.status != STOPPED) \
            or np.any(fwd.n_reflections) or np.any(bwd.n_reflections):
        raise TraceError("short flow segment hits the boundary")
    return fwd.end, bwd.end


def transport_residual(chart: ConformalChart, lam: LambdaField, f, points, delta: float = 1e-3,
                       opts: TraceOptions | None = None, threads: int = 1) -> np.ndarray:
    """(u(phi_delta) - u(phi_-delta)) / 2 delta + f at each point."""
    pts = _as_rows(points)
    plus, minus = _short_flow(chart, lam, pts, delta, opts)
    u = primitive(chart, lam, f, np.vstack([plus, minus]), opts, threads)
    n = len(pts)
    return (u[:n] - u[n:]) / (2.0 * delta) + f(chart, pts[:, 0], pts[:, 1], pts[:, 2])


def richardson_ratio(chart: ConformalChart, lam: LambdaField, f, points, delta: float = 1e-2,
                     opts: TraceOptions | None = None) -> tuple[float, np.ndarray, np.ndarray]:
    """Aggregate ratio ||r(delta)|| / ||r(delta/2)|| of transport residuals.

    Both residuals must sit well above the quadrature floor, so delta should be
    large enough that the O(delta^2) truncation dominates.
    """
    r1 = transport_residual(chart, lam, f, points, delta, opts)
    r2 = transport_residual(chart, lam, f, points, delta / 2.0, opts)
    return float(np.linalg.norm(r1) / np.linalg.norm(r2)), r1, r2


def dual_relation_check(chart: ConformalChart, lam: LambdaField, f, points,
                        opts: TraceOptions | None = None, threads: int = 1) -> np.ndarray:
    """u(x, v) + u^-(x, -v) - If(entry) where entry starts the maximal broken ray.

    The entry point is r(exit of the dual ray from (x, -v)).
    """
    pts = _as_rows(points)
    rev = pts.copy()
    rev[:, 2] = wrap_angle(rev[:, 2] + np.pi)
    u = primitive(chart, lam, f, pts, opts, threads)
    dres = _traced(chart, lam.dual(), rev, opts, threads)
    um = integrate_rays(chart, dres.rays, f.reversed())
    entry = dres.end.copy()
    entry[:, 2] = wrap_angle(entry[:, 2] + np.pi)
    full = primitive(chart, lam, f, entry, opts, threads)
    return u + um - full


def scattering_consistency(chart: ConformalChart, lam: LambdaField, f, points,
                           opts: TraceOptions | None = None) -> np.ndarray:
    """If(x, v) - I^- f~(r(alpha(x, v))) for emitter points."""
    pts = _as_rows(points)
    res = _traced(chart, lam, pts, opts, 1)
    If = integrate_rays(chart, res.rays, f)
    back = res.end.copy()
    back[:, 2] = wrap_angle(back[:, 2] + np.pi)
    Im = primitive(chart, lam.dual(), f.reversed(), back, opts)
    return If - Im


@dataclass
class QuadratureStudy:
    steps: np.ndarray
    values: np.ndarray
    orders: np.ndarray


def quadrature_convergence(chart, lam, f, point, steps=(4e-2, 2e-2, 1e-2, 5e-3)) -> QuadratureStudy:
    """If at a sequence of halving steps and observed orders between them."""
    pts = _as_rows(point)
    vals = np.array([primitive(chart, lam, f, pts, TraceOptions(step=h))[0] for h in steps])
    d = np.abs(np.diff(vals))
    orders = np.log2(d[:-1] / d[1:]) if len(d) > 1 else np.zeros(0)
    return QuadratureStudy(np.asarray(steps), vals, orders)


__all__ = [
    "IntegrandField",
    "QuadratureStudy",
    "broken_transform",
    "dual_primitive",
    "dual_relation_check",
    "emitter_fan",
    "integrate_rays",
    "primitive",
    "quadrature_convergence",
    "richardson_ratio",
    "scattering_consistency",
    "sinogram",
    "transport_residual",
    "write_sinogram_csv",
]
