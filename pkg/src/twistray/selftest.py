"""A compact pass/fail suite over the shipped configurations."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .admissibility import emitter_margin, reflector_curvature, sample_interior
from .config import SHIPPED, RunConfig
from .dynamics import TraceOptions, check_time_reversal, flow
from .expr import parse_scalar_field
from .geometry import PhasePoint, plane
from .inversion import RaySampling, annulus_basis, assemble, kernel_analysis
from .jacobi import oracle_comparison, sample_oracle_cases
from .lambdafield import constant_lambda, lambda_curvature
from .pestov import boundary_decomposition, convergence_order, make_grid, pestov_residual
from .transform import IntegrandField, broken_transform, dual_relation_check, emitter_fan, transport_residual


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    limit: float
    seconds: float

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag}  {self.name}: {self.value:.3e} (limit {self.limit:.1e}, {self.seconds:.1f}s)"


def _run(name, fn: Callable[[], float], limit: float, above: bool = False) -> Check:
    t0 = time.perf_counter()
    v = float(fn())
    ok = math.isfinite(v) and (v >= limit if above else v <= limit)
    return Check(name, ok, v, limit, time.perf_counter() - t0)


def _parser_fd():
    f = parse_scalar_field("sin(x*y) + exp(0.3*theta)*cos(y)")
    rng = np.random.default_rng(0)
    x, y, t = rng.uniform(-1, 1, (3, 100))
    h = 1e-6
    fd = (f(x + h, y, t) - f(x - h, y, t)) / (2 * h)
    return np.max(np.abs(fd - f.dx(x, y, t)) / np.maximum(1.0, np.abs(fd)))


def _circle():
    p = PhasePoint(0.0, 0.0, 0.0)
    e = flow(plane(), constant_lambda(1.0), p, 2.0 * np.pi, step=1e-3)
    return math.hypot(e.x, e.y)


def _suite(cfg: RunConfig, seed: int) -> list[tuple[str, Callable[[], float], float, bool]]:
    chart, lam = cfg.chart(), cfg.lam()
    rng = np.random.default_rng(seed)
    opts = cfg.trace_options()
    fan = emitter_fan(chart, 10, 5)[0]
    pts = sample_interior(chart, 20, rng, margin=0.05)

    def dual_law():
        return check_time_reversal(chart, lam, pts, 0.03, n_samples=3, opts=opts)

    def jac():
        P, X, T = sample_oracle_cases(chart, lam, 10, rng, opts)
        return np.nanmax(oracle_comparison(chart, lam, P, X, T, opts=opts)[0])

    def gauge():
        h = "(1 - sqrt(x^2 + y^2))*exp(x - 0.5*y)"
        return np.max(np.abs(broken_transform(chart, lam, IntegrandField.gauge(h), fan, opts, check_emitter=False)))

    f = IntegrandField(cfg["integrand"]["f0"], cfg["integrand"]["alpha"])

    def transport():
        return np.max(np.abs(transport_residual(chart, lam, f, pts, 1e-3, opts)))

    def dual_rel():
        return np.max(np.abs(dual_relation_check(chart, lam, f, pts, opts)))

    def curv():
        P = sample_interior(chart, 1000, rng)
        a = lambda_curvature(chart, lam.dual(), P[:, 0], P[:, 1], P[:, 2])
        b = lambda_curvature(chart, lam, P[:, 0], P[:, 1], P[:, 2] + np.pi)
        return np.max(np.abs(np.asarray(a) - np.asarray(b)))

    fn_text = cfg["pestov"]["functions"][0]
    u = parse_scalar_field(fn_text)

    def pestov_order():
        r = [pestov_residual(make_grid(chart, n), lam, u).relative_residual for n in (32, 64)]
        return convergence_order(r[0], r[1])

    def orthogonality():
        return boundary_decomposition(make_grid(chart, 32), lam, u, seed=seed).orthogonality

    return [
        ("dual-flow law", dual_law, 1e-6, False),
        ("jacobi vs finite differences", jac, 1e-4, False),
        ("gauge annihilation", gauge, 1e-6, False),
        ("transport residual", transport, 1e-5, False),
        ("dual relation", dual_rel, 1e-6, False),
        ("K of dual vs reversed K", curv, 1e-8, False),
        ("pestov order 32 -> 64", pestov_order, 1.5, True),
        ("even/odd orthogonality", orthogonality, 1e-12, False),
    ]


def _flat_extra(seed: int):
    cfg = RunConfig.from_dict(SHIPPED["flat_annulus"])
    chart, lam = cfg.chart(), cfg.lam()

    def margin():
        return abs(emitter_margin(chart, lam)[0] - 1.0) + abs(reflector_curvature(chart, lam)[0] + 2.0)

    def inversion():
        b = annulus_basis(chart, 0.5, 1.0)
        s = assemble(chart, lam, b, RaySampling(100, 20), TraceOptions(step=5e-3))
        return kernel_analysis(s).margin

    return [
        ("admissibility margins", margin, 1e-9, False),
        ("gauge-complement margin", inversion, 1e-3, True),
    ]


def run_selftest(seed: int = 0, out=print) -> list[Check]:
    checks = [_run("parser partials vs FD", _parser_fd, 1e-6),
              _run("RK4 circle closure at h=1e-3", _circle, 1e-8)]
    for c in checks:
        out(c.line())
    for name, data in SHIPPED.items():
        cfg = RunConfig.from_dict(data, name)
        for label, fn, lim, above in _suite(cfg, seed):
            checks.append(_run(f"[{name}] {label}", fn, lim, above))
            out(checks[-1].line())
    for label, fn, lim, above in _flat_extra(seed):
        checks.append(_run(f"[flat_annulus] {label}", fn, lim, above))
        out(checks[-1].line())
    n_fail = sum(not c.passed for c in checks)
    out(f"{len(checks) - n_fail}/{len(checks)} checks passed")
    return checks


__all__ = ["Check", "run_selftest"]
