"""Acceptance criteria 1-10 at their stated tolerances.

Each test records a PASS/FAIL line that is printed in the session summary.
"""

import json
import math
import time

import numpy as np
import pytest

from twistray.admissibility import AdmissibilityOptions, check_admissible, reflector_fiber_grid, sample_interior
from twistray.cli import main as cli_main
from twistray.config import SHIPPED, RunConfig
from twistray.dynamics import TraceOptions, check_time_reversal, flow, trace_batch
from twistray.expr import parse_scalar_field
from twistray.geometry import REFLECTOR, PhasePoint, flat_annulus, plane
from twistray.inversion import (
    RaySampling,
    annulus_basis,
    assemble,
    kernel_analysis,
    project_scalar,
    reconstruct,
    split_errors,
)
from twistray.jacobi import oracle_comparison, sample_oracle_cases
from twistray.lambdafield import constant_lambda, from_expression, lambda_curvature, signed_lambda_curvatures
from twistray.pestov import boundary_decomposition, convergence_order, make_grid, pestov_residual
from twistray.transform import (
    IntegrandField,
    broken_transform,
    dual_relation_check,
    emitter_fan,
    richardson_ratio,
    transport_residual,
)

CURVED_PHI = "0.1*(x^2 + y^2)"
CURVED_LAMBDA = "0.4 + 0.3*cos(theta) + 0.2*x*sin(2*theta)"


def _line(n, ok, text, seconds, limit):
    tag = "PASS" if ok else "FAIL"
    bound = "no time limit" if limit is None else f"limit {limit}s"
    return f"criterion {n:>2} [{tag}] {text} ({seconds:.1f}s, {bound})"


def _curved():
    return flat_annulus(phi=CURVED_PHI), from_expression(CURVED_LAMBDA)


# ---------------------------------------------------------------- 1


def test_c01_integrator_order(report):
    t0 = time.perf_counter()
    lam, start = constant_lambda(1.0), PhasePoint(0.0, 0.0, 0.0)
    # the exact orbit is the unit-radius circle through the origin, closed at t = 2 pi
    steps = (0.1, 0.05, 0.025, 0.0125)
    err = []
    for h in steps:
        e = flow(plane(), lam, start, 2 * math.pi, step=h)
        err.append(math.hypot(e.x, e.y))
    ratios = [err[i] / err[i + 1] for i in range(len(err) - 1)]
    e = flow(plane(), lam, start, 2 * math.pi, step=1e-3)
    fine = math.hypot(e.x, e.y)
    dt = time.perf_counter() - t0
    ok_ratio = all(12 <= r <= 20 for r in ratios)
    ok = ok_ratio and fine <= 1e-8 and dt < 1.0
    report(_line(1, ok, f"endpoint ratios {['%.1f' % r for r in ratios]} in [12, 20]; "
                 f"error at h=1e-3 {fine:.2e} <= 1e-8", dt, 1))

    # supplementary: maximum error over the whole orbit shows the h^4 rate
    traj = []
    for h in steps:
        r = trace_batch(plane(), lam, np.array([[0.0, 0.0, 0.0]]), TraceOptions(step=h, max_time=10.0),
                        record=True, t_stop=[2 * math.pi])
        s = r.rays[0].segments[0]
        exact = np.column_stack([np.sin(s[:, 0]), 1 - np.cos(s[:, 0])])
        traj.append(np.max(np.abs(s[:, 1:3] - exact)))
    tr = [traj[i] / traj[i + 1] for i in range(len(traj) - 1)]
    report(f"             supplementary: orbit-maximum error ratios {['%.2f' % r for r in tr]}")
    assert fine <= 1e-8
    assert ok_ratio, f"endpoint error ratios {ratios} (errors {err})"


# ---------------------------------------------------------------- 2


def test_c02_dual_flow_law(report):
    t0 = time.perf_counter()
    chart, lam = _curved()
    pts = sample_interior(chart, 100, np.random.default_rng(2), margin=0.15)
    dev = check_time_reversal(chart, lam, pts, 0.15, n_samples=5)
    dt = time.perf_counter() - t0
    ok = dev <= 1e-6 and dt < 10
    report(_line(2, ok, f"dual-flow deviation {dev:.2e} <= 1e-6 over 100 starts", dt, 10))
    assert ok


# ---------------------------------------------------------------- 3


def test_c03_jacobi_oracle(report):
    t0 = time.perf_counter()
    chart, lam = _curved()
    P, X, T = sample_oracle_cases(chart, lam, 100, np.random.default_rng(3), max_reflections=2,
                                  min_reflections=1)
    rel, res = oracle_comparison(chart, lam, P, X, T)
    dt = time.perf_counter() - t0
    worst = float(np.nanmax(rel))
    ok = worst <= 1e-4 and not np.any(np.isnan(rel)) and dt < 30
    report(_line(3, ok, f"Jacobi vs FD relative error {worst:.2e} <= 1e-4 on {len(P)} rays with "
                 f"{int(res.n_reflections.min())}-{int(res.n_reflections.max())} reflections", dt, 30))
    assert ok


# ---------------------------------------------------------------- 4


def test_c04_gauge_annihilation(report):
    t0 = time.perf_counter()
    chart, lam = _curved()
    starts, _, _ = emitter_fan(chart, 20, 10)
    h_text = "(1 - sqrt(x^2 + y^2))*exp(-((x - 0.3)^2 + y^2)/0.2)*(2 + cos(3*y))"
    vals = broken_transform(chart, lam, IntegrandField.gauge(h_text), starts, check_emitter=False)
    g = np.linspace(-1, 1, 401)
    X, Y = np.meshgrid(g, g)
    inside = chart.in_domain(X, Y)
    h_sup = float(np.max(np.abs(parse_scalar_field(h_text)(X[inside], Y[inside]))))
    worst = float(np.max(np.abs(vals)))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-6 * (1 + h_sup) and dt < 10
    report(_line(4, ok, f"max |I(dh)| {worst:.2e} <= 1e-6 (1 + {h_sup:.2f}) over {len(starts)} rays", dt, 10))
    assert ok


# ---------------------------------------------------------------- 5


def test_c05_pestov_identity(report):
    t0 = time.perf_counter()
    lines, ok = [], True
    for name in ("flat_annulus", "curved"):
        cfg = RunConfig.from_dict(SHIPPED[name])
        chart, lam = cfg.chart(), cfg.lam()
        grids = {n: make_grid(chart, n) for n in (32, 64)}
        for text in cfg["pestov"]["functions"]:
            u = parse_scalar_field(text)
            r = {n: pestov_residual(grids[n], lam, u).relative_residual for n in grids}
            order = convergence_order(r[32], r[64])
            b = boundary_decomposition(grids[64], lam, u)
            red = b.reduced_residual
            good = (r[64] <= 2e-2 and order >= 1.5 and b.orthogonality <= 1e-12
                    and b.lemma_residual <= r[64] + 1e-12 and (red is None or red <= r[64] + 1e-12))
            ok &= good
            lines.append(f"{name} {text!r}: residual {r[64]:.2e}, order {order:.2f}, "
                         f"orthogonality {b.orthogonality:.1e}, split {b.lemma_residual:.1e}, "
                         f"reduced {'n/a' if red is None else f'{red:.1e}'}")
    dt = time.perf_counter() - t0
    ok &= dt < 300
    report(_line(5, ok, "Pestov residual <= 2e-2 at 64^3, order >= 1.5, even/odd and reduction checks", dt, 300))
    for s in lines:
        report("             " + s)
    assert ok


# ---------------------------------------------------------------- 6


def test_c06_curvature_identities(report):
    t0 = time.perf_counter()
    chart, lam = _curved()
    rng = np.random.default_rng(6)
    P = sample_interior(chart, 1000, rng)
    x, y, t = P[:, 0], P[:, 1], P[:, 2]
    dK = np.max(np.abs(lambda_curvature(chart, lam.dual(), x, y, t) - lambda_curvature(chart, lam, x, y, t + np.pi)))
    X, Y, T = reflector_fiber_grid(chart, 40, 26)  # 1040 boundary samples
    k, e = signed_lambda_curvatures(chart, lam, REFLECTOR, X, Y, T)
    kd, ed = signed_lambda_curvatures(chart, lam.dual(), REFLECTOR, X, Y, T)
    km, em = signed_lambda_curvatures(chart, lam, REFLECTOR, X, Y, T + np.pi)
    kr, _ = signed_lambda_curvatures(chart, lam.reflected(chart), REFLECTOR, X, Y, T)
    ko, _ = signed_lambda_curvatures(chart, lam, REFLECTOR, X, Y, chart.reflect(X, Y, T))
    ke, _ = signed_lambda_curvatures(chart, lam.even_part(chart), REFLECTOR, X, Y, T)
    devs = {
        "K dual": dK,
        "kappa dual": np.max(np.abs(kd - km)),
        "eta dual": np.max(np.abs(ed - em)),
        "kappa o rho": np.max(np.abs(kr - ko)),
        "kappa even": np.max(np.abs(ke - 0.5 * (k + ko))),
    }
    dt = time.perf_counter() - t0
    worst = max(devs.values())
    ok = worst <= 1e-8 and dt < 5
    report(_line(6, ok, "curvature/dual identities max deviation "
                 + ", ".join(f"{k} {v:.1e}" for k, v in devs.items()) + " <= 1e-8", dt, 5))
    assert ok


# ---------------------------------------------------------------- 7


def test_c07_admissibility(report):
    t0 = time.perf_counter()
    flat = flat_annulus()
    rep = check_admissible(flat, from_expression("0"), AdmissibilityOptions(n_rays=10_000))
    bad = check_admissible(flat, constant_lambda(0.5), AdmissibilityOptions(n_rays=200, n_interior=2000))
    dt = time.perf_counter() - t0
    ok = (rep.admissible and abs(rep.emitter_convex - 1) <= 1e-9 and abs(rep.reflector_curvature + 2) <= 1e-9
          and rep.trap_count == 0 and rep.max_reflections <= 1 and not bad.admissible
          and not bad.conditions["curvature_nonpositive"] and abs(bad.curvature_sign - 0.25) <= 1e-12
          and dt < 30)
    report(_line(7, ok, f"flat lambda=0 admissible (margin {rep.emitter_convex:.12f}, reflector "
                 f"{rep.reflector_curvature:.12f}, {rep.trap_count} trapped, max {rep.max_reflections} "
                 f"reflection); lambda=0.5 rejected with K_lambda {bad.curvature_sign:.3f}", dt, 30))
    assert ok


# ---------------------------------------------------------------- 8


def test_c08_inversion_modulo_gauge(report):
    t0 = time.perf_counter()
    chart, lam = flat_annulus(), from_expression("0")
    basis = annulus_basis(chart, 0.5, 1.0)
    system = assemble(chart, lam, basis, RaySampling(100, 20))
    kr = kernel_analysis(system)
    truth = np.zeros(basis.n_columns)
    truth[:basis.m0] = project_scalar(chart, basis, lambda x, y: np.exp(-((x - 0.6) ** 2 + (y - 0.2) ** 2) / 0.05))
    rec = reconstruct(system, system.matrix @ truth)
    err = split_errors(system, chart, rec.coefficients, truth)
    dt = time.perf_counter() - t0
    ok = (basis.m0 == 25 and system.shape[0] == 2000 and kr.gauge_rayleigh.max() <= 1e-5
          and kr.margin >= 1e-3 and err["f0_rel_error"] <= 1e-2 and err["alpha_rel_error"] <= 1e-2 and dt < 120)
    report(_line(8, ok, f"m0=25, N={system.shape[0]}: gauge Rayleigh {kr.gauge_rayleigh.max():.1e} <= 1e-5, "
                 f"margin {kr.margin:.2e} >= 1e-3, f0 error {err['f0_rel_error']:.1e}, "
                 f"alpha error {err['alpha_rel_error']:.1e} <= 1e-2", dt, 120))
    assert ok


# ---------------------------------------------------------------- 9


def test_c09_transport(report):
    t0 = time.perf_counter()
    chart, lam = _curved()
    f = IntegrandField("1 + x*y + 0.5*sin(3*x)", ("0.3*y", "-0.2*x + 0.1"))
    rng = np.random.default_rng(9)
    pts = np.zeros((0, 3))
    while len(pts) < 100:
        cand = sample_interior(chart, 100, rng, margin=0.02)
        fw = trace_batch(chart, lam, cand)
        bw = trace_batch(chart, lam, cand, direction=-1)
        keep = (fw.min_abs_mu >= 0.1) & (bw.min_abs_mu >= 0.1)
        pts = np.vstack([pts, cand[keep]])
    pts = pts[:100]
    res = transport_residual(chart, lam, f, pts, 1e-3)
    ratio, _, _ = richardson_ratio(chart, lam, f, pts)
    dual = dual_relation_check(chart, lam, f, pts)
    dt = time.perf_counter() - t0
    worst, dworst = float(np.max(np.abs(res))), float(np.max(np.abs(dual)))
    ok = worst <= 1e-5 and 3 <= ratio <= 5 and dworst <= 1e-6 and dt < 30
    report(_line(9, ok, f"transport residual {worst:.2e} <= 1e-5, Richardson ratio {ratio:.3f} in [3, 5], "
                 f"dual defect {dworst:.2e} <= 1e-6", dt, 30))
    assert ok


# ---------------------------------------------------------------- 10


def test_c10_determinism(report, tmp_path):
    t0 = time.perf_counter()
    cfg = {
        "chart": {"phi": CURVED_PHI},
        "lambda": {"kind": "expression", "expr": CURVED_LAMBDA},
        "grid": {"nx": 16, "ny": 16, "ntheta": 16},
        "rays": {"n_positions": 8, "n_angles": 4, "n_jacobi": 4, "n_admissible": 200, "n_transport": 8},
        "inversion": {"n_radial": 3, "n_fourier": 3, "n_positions": 20, "n_angles": 5},
    }
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    commands = ["trace", "jacobi", "transform", "pestov", "admissible", "invert"]
    runs = {"a": 1, "b": 1, "c": 3}
    for tag, threads in runs.items():
        for cmd in commands:
            code = cli_main([cmd, "--config", str(path), "--out", str(tmp_path / tag / cmd),
                             "--threads", str(threads), "--seed", "5"])
            assert code == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    diffs = [str(f) for f in files for tag in ("b", "c")
             if (tmp_path / "a" / f).read_bytes() != (tmp_path / tag / f).read_bytes()]
    dt = time.perf_counter() - t0
    ok = not diffs and len(files) >= 15
    report(_line(10, ok, f"{len(files)} output files byte-identical across reruns and 1 vs 3 threads"
                 + (f"; differing: {diffs}" if diffs else ""), dt, None))
    assert ok
