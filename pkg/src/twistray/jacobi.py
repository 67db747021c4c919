"""lambda-Jacobi fields along broken lambda-rays.

A Jacobi field is carried in the frame {F, X_perp, V}. With v the unit
velocity and iv its quarter turn,

    J  = a v - b iv,        DJ = (a lambda + c) iv,

and along a segment

    a' = -lambda b,   b' = -c,   c' = c V(lambda) + (K + X_perp(lambda) + lambda^2) b.

The signs above were fixed against the finite-difference flow differential
(see ``flow_differential_fd``) and are pinned by a regression test.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (
    EXITED,
    STOPPED,
    BrokenRay,
    ExtraSystem,
    TraceError,
    TraceOptions,
    angle_diff,
    trace_batch,
)
from .geometry import REFLECTOR, ConformalChart, PhasePoint
from .lambdafield import LambdaField, Xperp_apply

BETA_TOL = 1e-8


class JacobiError(ValueError):
    pass


class ReflectionCountMismatch(JacobiError):
    """A perturbed ray reflected a different number of times than the base ray."""


@dataclass(frozen=True)
class JacobiFrame:
    a: float
    b: float
    c: float

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c])


@dataclass(frozen=True)
class JacobiVector:
    J: np.ndarray
    DJ: np.ndarray


# ---------------------------------------------------------------- coefficients


def _potential(chart: ConformalChart, lam: LambdaField, x, y, th):
    """(lambda, V lambda, K + X_perp lambda + lambda^2) at states."""
    lv = lam.raw(x, y, th)
    lv = np.broadcast_to(np.asarray(lv, float), np.shape(x))
    if lam.kind == "magnetic":
        lt = np.zeros_like(x)
        lx = lam.partial(x, y, th, "x")
        ly = lam.partial(x, y, th, "y")
    else:
        lt = lam.partial(x, y, th, "theta")
        lx = lam.partial(x, y, th, "x")
        ly = lam.partial(x, y, th, "y")
    xp = Xperp_apply(chart, x, y, th, lx, ly, lt)
    K = chart.gaussian_curvature(x, y)
    return lv, lt, K + xp + lv * lv


def frame_rhs(chart: ConformalChart, lam: LambdaField, state, frame):
    x, y, th = state[:, 0], state[:, 1], state[:, 2]
    lv, lt, P = _potential(chart, lam, x, y, th)
    a, b, c = frame[:, 0], frame[:, 1], frame[:, 2]
    out = np.empty_like(frame)
    out[:, 0] = -lv * b
    out[:, 1] = -c
    out[:, 2] = c * lt + P * b
    return out


# ---------------------------------------------------------------- conversions


def frame_to_vector(chart: ConformalChart, lam: LambdaField, x, y, theta, frame):
    """(J, DJ) in chart components from frame coefficients (..., 3)."""
    frame = np.asarray(frame, dtype=float)
    v = chart.unit_vector(x, y, theta)
    iv = chart.rotate90(v)
    lv = np.asarray(lam.value(x, y, theta), float)
    a, b, c = frame[..., 0], frame[..., 1], frame[..., 2]
    J = a[..., None] * v - b[..., None] * iv
    DJ = (a * lv + c)[..., None] * iv
    return J, DJ


def vector_to_frame(chart: ConformalChart, lam: LambdaField, x, y, theta, J, DJ):
    v = chart.unit_vector(x, y, theta)
    iv = chart.rotate90(v)
    lv = np.asarray(lam.value(x, y, theta), float)
    a = chart.inner(x, y, J, v)
    b = -chart.inner(x, y, J, iv)
    c = chart.inner(x, y, DJ, iv) - a * lv
    return np.stack([a, b, c], axis=-1)


def variation_to_vector(chart: ConformalChart, x, y, theta, xi):
    """(J, DJ) of the variation of SM with initial tangent xi = (dx, dy, dtheta)."""
    xi = np.asarray(xi, dtype=float)
    J = xi[..., :2]
    v = chart.unit_vector(x, y, theta)
    px, py = chart.grad_phi(x, y)
    s = np.exp(-chart.phi(x, y))
    dphi = px * J[..., 0] + py * J[..., 1]
    dv = -dphi[..., None] * v + (s * xi[..., 2])[..., None] * np.stack(
        [-np.sin(theta), np.cos(theta)], axis=-1)
    return J, dv + chart.christoffel(x, y, J, v)


def vector_to_variation(chart: ConformalChart, x, y, theta, J, DJ):
    """Inverse of ``variation_to_vector``: recover dtheta from DJ."""
    J = np.asarray(J, float)
    v = chart.unit_vector(x, y, theta)
    w = np.asarray(DJ, float) - chart.christoffel(x, y, J, v)
    n_hat = np.stack([-np.sin(theta), np.cos(theta)], axis=-1)
    dth = np.exp(chart.phi(x, y)) * np.sum(n_hat * w, axis=-1)
    return np.concatenate([J, dth[..., None]], axis=-1)


# ---------------------------------------------------------------- reflection


def beta_value(chart: ConformalChart, lam: LambdaField, x, y, theta_in, component: str = REFLECTOR):
    """beta = lambda o rho / lambda with the small-lambda rule.

    Returns (beta, singular): beta is 1 where both values are below BETA_TOL
    and NaN where only lambda is small (flagged singular).
    """
    th_out = chart.reflect(x, y, theta_in, component, check=False)
    l_in = np.asarray(lam.value(x, y, theta_in), float)
    l_out = np.asarray(lam.value(x, y, th_out), float)
    big = np.abs(l_in) >= BETA_TOL
    both_small = (~big) & (np.abs(l_out) < BETA_TOL)
    beta = np.where(big, l_out / np.where(big, l_in, 1.0), np.where(both_small, 1.0, np.nan))
    singular = ~(big | both_small)
    return beta, singular


def _phi_map(chart, component, x, y, zeta, w):
    """Phi_zeta w = 2(<nabla_w nu, zeta> nu + <zeta, nu> nabla_w nu)."""
    nu = chart.normal(component, x, y, check=False)
    dnu = chart.nabla_normal(component, x, y, w)
    return 2.0 * (chart.inner(x, y, dnu, zeta)[..., None] * nu
                  + chart.inner(x, y, zeta, nu)[..., None] * dnu)


def reflect_jacobi(chart: ConformalChart, lam: LambdaField, x, y, theta_in, J, DJ, beta,
                   component: str = REFLECTOR, tan_eps: float = 1e-6):
    """Jump (J-, DJ-) -> (J+, DJ+) at a reflection with incoming angle theta_in.

    J+  = rho J-
    DJ+ = rho DJ- - Phi_{v-} w - (beta + 1) (<J-, nu>/<v-, nu>) rho(lambda- i v-)

    with w = J- - (<J-, nu>/<v-, nu>) v- the part of J- tangent to the boundary.
    """
    J = np.asarray(J, float)
    DJ = np.asarray(DJ, float)
    nu = chart.normal(component, x, y, check=False)
    v = chart.unit_vector(x, y, theta_in)
    mu = chart.inner(x, y, v, nu)
    if np.any(np.abs(mu) < tan_eps):
        raise JacobiError("tangential reflection event")

    def rho(u):
        return u - 2.0 * chart.inner(x, y, u, nu)[..., None] * nu

    q = chart.inner(x, y, J, nu) / mu
    w = J - q[..., None] * v
    l_in = np.asarray(lam.value(x, y, theta_in), float)
    Jp = rho(J)
    DJp = (rho(DJ) - _phi_map(chart, component, x, y, v, w)
           - ((np.asarray(beta) + 1.0) * q * l_in)[..., None] * rho(chart.rotate90(v)))
    return Jp, DJp


# ---------------------------------------------------------------- propagation


@dataclass
class JacobiTrack:
    """A broken ray with its frame coefficients at every sample."""

    ray: BrokenRay
    frames: list[np.ndarray]  # per segment, (m, 3)
    beta: list[float] = field(default_factory=list)
    singular: bool = False

    def table(self, chart: ConformalChart, lam: LambdaField) -> np.ndarray:
        """Rows t, a, b, c, Jx, Jy, DJx, DJy, segment_id."""
        out = []
        for k, (seg, fr) in enumerate(zip(self.ray.segments, self.frames)):
            J, DJ = frame_to_vector(chart, lam, seg[:, 1], seg[:, 2], seg[:, 3], fr)
            out.append(np.column_stack([seg[:, 0], fr, J, DJ, np.full(len(seg), k)]))
        return np.vstack(out)


def _jacobi_system(chart, lam, component, tan_eps):
    def on_reflect(state_in, state_out, frame):
        x, y = state_in[:, 0], state_in[:, 1]
        J, DJ = frame_to_vector(chart, lam, x, y, state_in[:, 2], frame)
        beta, _ = beta_value(chart, lam, x, y, state_in[:, 2], component)
        Jp, DJp = reflect_jacobi(chart, lam, x, y, state_in[:, 2], J, DJ, beta, component, tan_eps)
        return vector_to_frame(chart, lam, x, y, state_out[:, 2], Jp, DJp)

    return ExtraSystem(3, lambda s, e: frame_rhs(chart, lam, s, e), on_reflect)


def propagate_frames(chart: ConformalChart, lam: LambdaField, starts, frames0,
                     opts: TraceOptions | None = None, t_stop=None, record: bool = False,
                     threads: int = 1):
    """Co-integrate frames with many rays; returns the BatchResult.

    ``end_extra`` holds the final frames. Events whose beta is singular give
    NaN frames; callers use ``flow_differential_fd`` for those rays.
    """
    opts = opts or TraceOptions()
    system = _jacobi_system(chart, lam, REFLECTOR, opts.tan_eps)
    return trace_batch(chart, lam, starts, opts, record=record, t_stop=t_stop,
                       system=system, extra0=frames0, threads=threads)


def propagate_frame(chart: ConformalChart, lam: LambdaField, start, initial,
                    opts: TraceOptions | None = None, t_stop: float | None = None) -> JacobiTrack:
    """Frame trajectory along one broken ray from ``start``."""
    p = start.as_array() if isinstance(start, PhasePoint) else np.asarray(start, float)
    f0 = initial.as_array() if isinstance(initial, JacobiFrame) else np.asarray(initial, float)
    res = propagate_frames(chart, lam, p[None, :], f0[None, :], opts,
                           None if t_stop is None else [t_stop], record=True)
    ray = res.rays[0]
    betas, singular = [], False
    for ev in ray.events:
        b, s = beta_value(chart, lam, ev.x, ev.y, ev.theta_in)
        betas.append(float(b))
        singular |= bool(s)
    return JacobiTrack(ray, ray.extras, betas, singular)


def propagate_vector(chart: ConformalChart, lam: LambdaField, start, J0, DJ0, t: float,
                     opts: TraceOptions | None = None) -> JacobiVector:
    """(J, DJ) at time t from (J, DJ) at the start, through reflections."""
    p = start.as_array() if isinstance(start, PhasePoint) else np.asarray(start, float)
    f0 = vector_to_frame(chart, lam, p[0], p[1], p[2], J0, DJ0)
    res = propagate_frames(chart, lam, p[None, :], f0[None, :], opts, [t])
    if res.status[0] not in (STOPPED, EXITED):
        raise TraceError(f"ray ended with status {res.status[0]}")
    e = res.end[0]
    J, DJ = frame_to_vector(chart, lam, e[0], e[1], e[2], res.end_extra[0])
    return JacobiVector(J, DJ)


# ---------------------------------------------------------------- FD oracle


def flow_differential_fd_batch(chart: ConformalChart, lam: LambdaField, starts, xis, t,
                               s: float = 1e-5, opts: TraceOptions | None = None):
    """Central-difference (J, DJ) at time t for many (start, xi) pairs.

    Returns (J, DJ, base BatchResult). Raises if a perturbed ray changes its
    reflection count or stops early.
    """
    if s <= 0:
        raise JacobiError("finite-difference step must be positive")
    opts = opts or TraceOptions()
    P = np.atleast_2d(np.asarray(starts, float))
    X = np.atleast_2d(np.asarray(xis, float))
    n = len(P)
    T = np.broadcast_to(np.asarray(t, float), (n,))
    allp = np.vstack([P, P + s * X, P - s * X])
    res = trace_batch(chart, lam, allp, opts, t_stop=np.concatenate([T, T, T]))
    base, plus, minus = slice(0, n), slice(n, 2 * n), slice(2 * n, 3 * n)
    if np.any(res.status != STOPPED):
        raise TraceError("a ray left the domain before the requested time")
    nr = res.n_reflections
    if np.any(nr[plus] != nr[base]) or np.any(nr[minus] != nr[base]):
        raise ReflectionCountMismatch("perturbed ray changed its reflection count")
    e, ep, em = res.end[base], res.end[plus], res.end[minus]
    dxy = (ep[:, :2] - em[:, :2]) / (2.0 * s)
    dth = angle_diff(ep[:, 2], em[:, 2]) / (2.0 * s)
    xi_t = np.column_stack([dxy, dth])
    J, DJ = variation_to_vector(chart, e[:, 0], e[:, 1], e[:, 2], xi_t)
    sub = type(res)(res.status[base], res.t_end[base], e, nr[base], res.min_abs_mu[base],
                    res.events[:n])
    return J, DJ, sub


def flow_differential_fd(chart: ConformalChart, lam: LambdaField, start, xi, t: float,
                         s: float = 1e-5, opts: TraceOptions | None = None) -> JacobiVector:
    """J(t) = d/ds gamma_s(t) by central differences of two traced broken rays."""
    p = start.as_array() if isinstance(start, PhasePoint) else np.asarray(start, float)
    J, DJ, _ = flow_differential_fd_batch(chart, lam, p[None, :], np.asarray(xi, float)[None, :],
                                          t, s, opts)
    return JacobiVector(J[0], DJ[0])


def oracle_comparison(chart: ConformalChart, lam: LambdaField, starts, xis, t,
                      s: float = 1e-5, opts: TraceOptions | None = None):
    """Relative error between frame propagation and the FD oracle, per ray.

    Rays whose events are beta-singular are reported as NaN (they would fall
    back to the FD propagation itself).
    """
    opts = opts or TraceOptions()
    P = np.atleast_2d(np.asarray(starts, float))
    X = np.atleast_2d(np.asarray(xis, float))
    n = len(P)
    T = np.broadcast_to(np.asarray(t, float), (n,))
    Jf, DJf, base = flow_differential_fd_batch(chart, lam, P, X, T, s, opts)
    J0, DJ0 = variation_to_vector(chart, P[:, 0], P[:, 1], P[:, 2], X)
    f0 = vector_to_frame(chart, lam, P[:, 0], P[:, 1], P[:, 2], J0, DJ0)
    res = propagate_frames(chart, lam, P, f0, opts, T)
    e = res.end
    Jp, DJp = frame_to_vector(chart, lam, e[:, 0], e[:, 1], e[:, 2], res.end_extra)
    ref = np.hypot(np.linalg.norm(Jf, axis=1), np.linalg.norm(DJf, axis=1))
    err = np.hypot(np.linalg.norm(Jp - Jf, axis=1), np.linalg.norm(DJp - DJf, axis=1))
    rel = err / np.maximum(ref, 1e-300)
    for i, evs in enumerate(res.events):
        for ev in evs:
            _, sing = beta_value(chart, lam, ev.x, ev.y, ev.theta_in)
            if sing:
                rel[i] = np.nan
    return rel, res


def sample_oracle_cases(chart: ConformalChart, lam: LambdaField, n: int, rng: np.random.Generator,
                        opts: TraceOptions | None = None, max_reflections: int = 2, min_mu: float = 0.1,
                        min_reflections: int = 0, fraction: float = 0.8, guard: float = 0.05):
    """Draw n (start, xi, t) cases on transversal broken rays.

    Starts are uniform interior phase points and xi is a random unit
    variation. t is ``fraction`` of the exit time, moved off any reflection
    by at least ``guard``. Rays with more than ``max_reflections`` events, a
    reflection with |<v, nu>| < min_mu, or a singular beta are redrawn.
    """
    from .admissibility import sample_interior

    opts = opts or TraceOptions()
    out_p, out_x, out_t = [], [], []
    tries = 0
    while len(out_p) < n:
        tries += 1
        if tries > 50:
            raise JacobiError("could not find enough transversal broken rays")
        m = 2 * (n - len(out_p)) + 8
        P = sample_interior(chart, m, rng, margin=0.02)
        X = rng.normal(size=(m, 3))
        X /= np.linalg.norm(X, axis=1)[:, None]
        res = trace_batch(chart, lam, P, opts)
        cand = []
        for i in range(m):
            evs = res.events[i]
            if res.status[i] != EXITED or not (min_reflections <= len(evs) <= max_reflections):
                continue
            if any(abs(e.normal_component) < min_mu or beta_value(chart, lam, e.x, e.y, e.theta_in)[1]
                   for e in evs):
                continue
            t = fraction * res.t_end[i]
            if any(abs(e.t - t) < guard for e in evs) or res.t_end[i] - t < guard:
                continue
            cand.append((P[i], X[i], t))
        cand = cand[:n - len(out_p)]
        if not cand:
            continue
        try:
            # perturbed rays must keep the reflection count
            flow_differential_fd_batch(chart, lam, np.array([c[0] for c in cand]),
                                       np.array([c[1] for c in cand]), np.array([c[2] for c in cand]),
                                       opts=opts)
            ok = cand
        except (ReflectionCountMismatch, TraceError):
            ok = []
            for c in cand:
                try:
                    flow_differential_fd_batch(chart, lam, c[0][None, :], c[1][None, :], c[2], opts=opts)
                except (ReflectionCountMismatch, TraceError):
                    continue
                ok.append(c)
        for p, x, t in ok:
            out_p.append(p)
            out_x.append(x)
            out_t.append(t)
    return np.array(out_p), np.array(out_x), np.array(out_t)


# ---------------------------------------------------------------- residuals, growth


def jacobi_equation_residual(chart: ConformalChart, lam: LambdaField, seg: np.ndarray,
                             frames: np.ndarray):
    """Residuals of D_t J = DJ and of the lambda-Jacobi equation on one segment.

    D_t^2 J = d lambda(xi) iv + lambda i DJ - K (J - <J, v> v), where xi is the
    SM variation (J, dtheta). Derivatives along t are centered second-order
    differences on the uniform interior samples, so both residuals are O(h^2).
    """
    t, x, y, th = seg[:, 0], seg[:, 1], seg[:, 2], seg[:, 3]
    dt = np.diff(t)
    h = np.median(dt)
    uni = np.abs(dt - h) <= 1e-12 * max(1.0, abs(h))
    # use the longest run of uniform steps
    ok = np.ones(len(t), bool)
    ok[1:] &= uni
    ok[:-1] &= uni
    idx = np.flatnonzero(ok[1:-1]) + 1
    J, DJ = frame_to_vector(chart, lam, x, y, th, frames)
    v = chart.unit_vector(x, y, th)
    vdot = v  # gamma' in chart components

    def cov_dt(W):
        dW = (W[idx + 1] - W[idx - 1]) / (2.0 * h)
        return dW + chart.christoffel(x[idx], y[idx], vdot[idx], W[idx])

    r1 = cov_dt(J) - DJ[idx]
    xi = vector_to_variation(chart, x, y, th, J, DJ)
    lx = lam.partial(x, y, th, "x")
    ly = lam.partial(x, y, th, "y")
    lt = lam.vertical(x, y, th)
    dlam = lx * xi[:, 0] + ly * xi[:, 1] + lt * xi[:, 2]
    lv = np.asarray(lam.value(x, y, th), float)
    iv = chart.rotate90(v)
    K = chart.gaussian_curvature(x, y)
    Jv = chart.inner(x, y, J, v)
    rhs = dlam[:, None] * iv + lv[:, None] * chart.rotate90(DJ) - K[:, None] * (J - Jv[:, None] * v)
    r2 = cov_dt(DJ) - rhs[idx]
    n1 = chart.norm(x[idx], y[idx], r1)
    n2 = chart.norm(x[idx], y[idx], r2)
    return n1, n2


@dataclass
class GrowthFit:
    C: float  # smallest rate with E(t) <= E(0) e^{Ct} on the samples
    segment_rates: list[float]
    jump_ratios: list[float]  # E(t+)/E(t-) at events
    A: float  # product of max(1, jump ratio)
    B: float  # largest per-segment rate
    violations: int  # samples breaking the bound for the checked rate


def energy(chart: ConformalChart, x, y, J, DJ):
    return chart.inner(x, y, J, J) + chart.inner(x, y, DJ, DJ)


def _rate(t, E):
    t = t - t[0]
    pos = t > 0
    if not np.any(pos):
        return 0.0
    r = np.log(E[pos] / E[0]) / t[pos]
    return float(max(0.0, r.max()))


def growth_bound_check(chart: ConformalChart, lam: LambdaField, track: JacobiTrack,
                       C: float | None = None, rtol: float = 1e-9) -> GrowthFit:
    """Fit exponential growth constants of |J|^2 + |DJ|^2 along a track.

    ``violations`` counts samples with E(t) > (1 + rtol) E(0) e^{Ct}; with
    C=None the fitted C is used, which gives zero by construction.
    """
    ts, Es, seg_rates, jumps = [], [], [], []
    prev_end = None
    for seg, fr in zip(track.ray.segments, track.frames):
        J, DJ = frame_to_vector(chart, lam, seg[:, 1], seg[:, 2], seg[:, 3], fr)
        E = energy(chart, seg[:, 1], seg[:, 2], J, DJ)
        if prev_end is not None:
            jumps.append(float(E[0] / prev_end))
        prev_end = E[-1]
        seg_rates.append(_rate(seg[:, 0], E))
        ts.append(seg[:, 0])
        Es.append(E)
    t = np.abs(np.concatenate(ts))
    E = np.concatenate(Es)
    C_fit = _rate(t, E)
    C_use = C_fit if C is None else C
    bound = E[0] * np.exp(C_use * (t - t[0])) * (1.0 + rtol)
    viol = int(np.sum(E > bound + 1e-300))
    A = float(np.prod([max(1.0, j) for j in jumps])) if jumps else 1.0
    return GrowthFit(C_fit, seg_rates, jumps, A, max(seg_rates) if seg_rates else 0.0, viol)


def write_jacobi_csv(path, table: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "a", "b", "c", "Jx", "Jy", "DJx", "DJy", "segment_id"])
        for row in table:
            w.writerow([repr(float(v)) for v in row[:8]] + [int(row[8])])


__all__ = [
    "BETA_TOL",
    "GrowthFit",
    "JacobiError",
    "JacobiFrame",
    "JacobiTrack",
    "JacobiVector",
    "ReflectionCountMismatch",
    "beta_value",
    "energy",
    "flow_differential_fd",
    "flow_differential_fd_batch",
    "frame_rhs",
    "frame_to_vector",
    "growth_bound_check",
    "jacobi_equation_residual",
    "oracle_comparison",
    "propagate_frame",
    "propagate_frames",
    "propagate_vector",
    "reflect_jacobi",
    "sample_oracle_cases",
    "variation_to_vector",
    "vector_to_frame",
    "vector_to_variation",
    "write_jacobi_csv",
]
