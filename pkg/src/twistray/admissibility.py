"""Checks of the five admissibility conditions by evaluation and sampling."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .dynamics import EXITED, TraceOptions, trace_batch
from .geometry import EMITTER, REFLECTOR, ConformalChart, wrap_angle
from .lambdafield import LambdaField, lambda_curvature, signed_lambda_curvatures


@dataclass(frozen=True)
class AdmissibilityOptions:
    n_boundary: int = 256
    n_fiber: int = 64
    n_interior: int = 20000
    n_rays: int = 10000
    step: float = 1e-2
    max_time: float = 50.0  # candidate L
    max_reflections: int = 64
    a: float | None = None  # candidate transversality margin
    seed: int = 0
    threads: int = 1


@dataclass
class AdmissibilityReport:
    emitter_convex: float
    emitter_witness: list
    reflector_curvature: float | None
    reflector_witness: list | None
    curvature_sign: float
    curvature_witness: list
    max_tau: float
    max_tau_dual: float
    trap_count: int
    ray_budget: int
    max_reflections: int
    a_star: float | None  # largest a with at most one reflection below it per ray
    a_used: float
    max_low_reflections: int
    conditions: dict = field(default_factory=dict)
    admissible: bool = False

    def as_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, float) and not math.isfinite(v):
                d[k] = None
        return d


def sample_interior(chart: ConformalChart, n: int, rng: np.random.Generator, margin: float = 0.0):
    """n points of M by rejection from the chart box, with uniform angles."""
    x0, x1, y0, y1 = chart.bbox
    pts = []
    got = 0
    while got < n:
        m = max(2 * (n - got), 64)
        x = rng.uniform(x0, x1, m)
        y = rng.uniform(y0, y1, m)
        ok = chart.in_domain(x, y, tol=-margin) if margin > 0 else chart.in_domain(x, y)
        x, y = x[ok], y[ok]
        pts.append(np.column_stack([x, y]))
        got += len(x)
    xy = np.vstack(pts)[:n]
    th = rng.uniform(0.0, 2.0 * np.pi, n)
    return np.column_stack([xy, th])


def emitter_margin(chart: ConformalChart, lam: LambdaField, n_boundary: int = 256):
    """min over emitter points and both unit tangents of sff(v, v) - <lambda iv, nu>."""
    x, y = chart.boundary_points(EMITTER, n_boundary)
    tn = chart.normal_angle(EMITTER, x, y, check=False)
    best, witness = np.inf, None
    nu = chart.normal(EMITTER, x, y, check=False)
    for sgn in (1.0, -1.0):
        th = wrap_angle(tn + sgn * 0.5 * np.pi)
        v = chart.unit_vector(x, y, th)
        sff = chart.second_fundamental_form(EMITTER, x, y, v, check=False)
        lv = np.asarray(lam.value(x, y, th), float)
        m = sff - lv * chart.inner(x, y, chart.rotate90(v), nu)
        j = int(np.argmin(m))
        if m[j] < best:
            best, witness = float(m[j]), [float(x[j]), float(y[j]), float(th[j])]
    return best, witness


def reflector_fiber_grid(chart: ConformalChart, n_boundary: int, n_fiber: int):
    """Points on R with rho-symmetric fiber angles theta_nu + pi/2 + (k + 1/2) dtheta."""
    x, y = chart.boundary_points(REFLECTOR, n_boundary)
    tn = chart.normal_angle(REFLECTOR, x, y, check=False)
    d = 2.0 * np.pi / n_fiber
    th = tn[:, None] + 0.5 * np.pi + (np.arange(n_fiber)[None, :] + 0.5) * d
    return x[:, None] * np.ones_like(th), y[:, None] * np.ones_like(th), th


def _even_curvature(chart, lam, X, Y, T):
    k, e = signed_lambda_curvatures(chart, lam, REFLECTOR, X, Y, T, check=False)
    q = k + e
    return 0.5 * (q + q[:, ::-1])  # k -> -1 - k is rho on these fibers


def reflector_curvature(chart: ConformalChart, lam: LambdaField, n_boundary: int = 256, n_fiber: int = 64):
    """max over R-fibers of (kappa_lambda)_e + (eta_lambda)_e."""
    X, Y, T = reflector_fiber_grid(chart, n_boundary, n_fiber)
    q = _even_curvature(chart, lam, X, Y, T)
    i, j = np.unravel_index(int(np.argmax(q)), q.shape)
    return float(q[i, j]), [float(X[i, j]), float(Y[i, j]), float(wrap_angle(T[i, j]))]


def curvature_sign(chart: ConformalChart, lam: LambdaField, pts: np.ndarray):
    k = np.asarray(lambda_curvature(chart, lam, pts[:, 0], pts[:, 1], pts[:, 2]), float)
    j = int(np.argmax(k))
    return float(k[j]), [float(v) for v in pts[j]]


def _abs_mus(events):
    return [abs(e.normal_component) for e in events]


def ray_census(chart: ConformalChart, lam: LambdaField, pts: np.ndarray, opts: TraceOptions, threads: int = 1):
    """Traces from interior samples with per-ray statistics.

    tau comes from the lambda flow at (x, v) and tau^- from the dual flow at
    (x, v). The maximal broken ray through (x, v) is the forward trace joined
    with the dual trace from (x, -v); its reflections are what get counted.
    """
    fwd = trace_batch(chart, lam, pts, opts, threads=threads)
    dual = trace_batch(chart, lam.dual(), pts, opts, threads=threads)
    rev = pts.copy()
    rev[:, 2] = wrap_angle(rev[:, 2] + np.pi)
    back = trace_batch(chart, lam.dual(), rev, opts, threads=threads)
    trapped = (fwd.status != EXITED) | (dual.status != EXITED) | (back.status != EXITED)
    mus = [sorted(_abs_mus(a) + _abs_mus(b)) for a, b in zip(fwd.events, back.events)]
    nref = fwd.n_reflections + back.n_reflections
    return fwd, dual, trapped, mus, nref


def check_admissible(chart: ConformalChart, lam: LambdaField,
                     opts: AdmissibilityOptions | None = None) -> AdmissibilityReport:
    """Evaluate every admissibility condition; failures become report entries."""
    opts = opts or AdmissibilityOptions()
    rng = np.random.default_rng(opts.seed)
    em, em_w = emitter_margin(chart, lam, opts.n_boundary)
    if REFLECTOR in chart.components():
        rc, rc_w = reflector_curvature(chart, lam, opts.n_boundary, opts.n_fiber)
    else:
        rc, rc_w = None, None
    pts_k = sample_interior(chart, opts.n_interior, rng)
    ks, ks_w = curvature_sign(chart, lam, pts_k)
    pts = sample_interior(chart, opts.n_rays, rng)
    topts = TraceOptions(step=opts.step, max_time=opts.max_time, max_reflections=opts.max_reflections)
    fwd, dual, trapped, mus, nref = ray_census(chart, lam, pts, topts, opts.threads)
    ok = ~trapped
    max_tau = float(fwd.t_end[ok].max()) if np.any(ok) else math.inf
    max_tau_d = float(dual.t_end[ok].max()) if np.any(ok) else math.inf
    second = [m[1] for m in mus if len(m) >= 2]
    a_star = float(min(second)) if second else math.inf
    a_used = opts.a if opts.a is not None else (0.5 * a_star if math.isfinite(a_star) else 1.0)
    low = max((sum(1 for v in m if v < a_used) for m in mus), default=0)
    conds = {
        "emitter_strictly_convex": em > 0,
        "reflector_admissible_curvature": True if rc is None else rc <= 0,
        "curvature_nonpositive": ks <= 0,
        "nontrapping": int(trapped.sum()) == 0,
        "transversality": low <= 1,
    }
    return AdmissibilityReport(
        emitter_convex=em, emitter_witness=em_w,
        reflector_curvature=rc, reflector_witness=rc_w,
        curvature_sign=ks, curvature_witness=ks_w,
        max_tau=max_tau, max_tau_dual=max_tau_d,
        trap_count=int(trapped.sum()), ray_budget=int(opts.n_rays),
        max_reflections=int(nref.max()) if len(nref) else 0,
        a_star=a_star if math.isfinite(a_star) else None, a_used=float(a_used),
        max_low_reflections=int(low), conditions=conds, admissible=all(conds.values()),
    )


def dual_admissibility_crosscheck(chart: ConformalChart, lam: LambdaField, n_boundary: int = 128,
                                  n_fiber: int = 64) -> dict:
    """(kappa_{lam^-})_e + (eta_{lam^-})_e at (x, v) against (kappa_lam)_e + (eta_lam)_e at (x, -v)."""
    X, Y, T = reflector_fiber_grid(chart, n_boundary, n_fiber)
    lhs = _even_curvature(chart, lam.dual(), X, Y, T)
    # -v is the fiber index shifted by half a turn
    rhs = _even_curvature(chart, lam, X, Y, T)
    rhs = np.roll(rhs, -n_fiber // 2, axis=1)
    k0, _ = signed_lambda_curvatures(chart, lam, REFLECTOR, X, Y, T, check=False)
    return {"max_discrepancy": float(np.max(np.abs(lhs - rhs))),
            "lhs_max": float(lhs.max()), "rhs_max": float(rhs.max()),
            "n_samples": int(lhs.size)}


def convexity_dynamic_check(chart: ConformalChart, lam: LambdaField, n: int = 100, delta: float = 1e-3,
                            step: float = 1e-4):
    """Second differences of rho along short lambda-geodesics tangent to E.

    Returns (second differences, predicted -sff + <nu, lambda iv>) at the
    starts; strict lambda-convexity means both are negative.
    """
    x, y = chart.boundary_points(EMITTER, n // 2)
    tn = chart.normal_angle(EMITTER, x, y, check=False)
    X = np.concatenate([x, x])
    Y = np.concatenate([y, y])
    TH = wrap_angle(np.concatenate([tn + 0.5 * np.pi, tn - 0.5 * np.pi]))
    starts = np.column_stack([X, Y, TH])
    o = TraceOptions(step=step, max_time=10 * delta)
    f = trace_batch(chart, lam, starts, o, t_stop=delta, ignore_boundary=True)
    b = trace_batch(chart, lam, starts, o, t_stop=delta, direction=-1, ignore_boundary=True)
    rho = chart.boundary_function(EMITTER)
    # rho scaled to a g-unit gradient at the start
    scale = 1.0 / (np.exp(-chart.phi(X, Y)) * np.hypot(rho.dx(X, Y), rho.dy(X, Y)))
    d2 = scale * (rho(f.end[:, 0], f.end[:, 1]) - 2.0 * rho(X, Y) + rho(b.end[:, 0], b.end[:, 1])) / delta**2
    v = chart.unit_vector(X, Y, TH)
    nu = chart.normal(EMITTER, X, Y, check=False)
    pred = (-chart.second_fundamental_form(EMITTER, X, Y, v, check=False)
            + np.asarray(lam.value(X, Y, TH), float) * chart.inner(X, Y, nu, chart.rotate90(v)))
    return d2, pred


__all__ = [
    "AdmissibilityOptions",
    "AdmissibilityReport",
    "check_admissible",
    "convexity_dynamic_check",
    "curvature_sign",
    "dual_admissibility_crosscheck",
    "emitter_margin",
    "ray_census",
    "reflector_curvature",
    "reflector_fiber_grid",
    "sample_interior",
]
