"""twistray command line: trace, jacobi, transform, pestov, admissible, invert, selftest."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import io
from .admissibility import AdmissibilityOptions, check_admissible, sample_interior
from .config import SHIPPED, ConfigError, RunConfig
from .dynamics import EXITED, TraceError, trace_batch
from .expr import ExprError, parse_scalar_field
from .geometry import EMITTER, GeometryError
from .inversion import (
    InversionError,
    RaySampling,
    annulus_basis,
    assemble,
    kernel_analysis,
    project_form,
    project_scalar,
    reconstruct,
    split_errors,
    write_matrix,
)
from .jacobi import JacobiError, frame_to_vector, oracle_comparison, propagate_frames, sample_oracle_cases
from .jacobi import variation_to_vector, vector_to_frame
from .pestov import GridError, boundary_decomposition, convergence_order, make_grid, pestov_residual
from .transform import (
    IntegrandField,
    broken_transform,
    dual_relation_check,
    emitter_fan,
    sinogram,
    transport_residual,
)

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


class NumericalFailure(RuntimeError):
    """Ray statuses beyond the configured failure budget."""


def _header(cfg: RunConfig, command: str) -> dict:
    return {"command": command, "config_digest": cfg.digest(), "seed": cfg["rays"]["seed"]}


def _out_dir(args, cfg: RunConfig) -> Path:
    d = Path(args.out) if args.out else Path(cfg["output"]["dir"])
    d.mkdir(parents=True, exist_ok=True)
    return d


def _budget(cfg: RunConfig, status: np.ndarray, what: str) -> None:
    bad = int(np.sum(status != EXITED))
    if bad > cfg["rays"]["failure_budget"]:
        counts = {s: int(np.sum(status == s)) for s in sorted(set(status.tolist()))}
        raise NumericalFailure(f"{bad} {what} ray(s) did not exit: {counts}")


# ---------------------------------------------------------------- commands


def cmd_trace(args, cfg: RunConfig) -> int:
    chart, lam, opts = cfg.chart(), cfg.lam(), cfg.trace_options()
    r = cfg["rays"]
    starts, s, psi = emitter_fan(chart, r["n_positions"], r["n_angles"], r["glancing_margin"])
    res = trace_batch(chart, lam, starts, opts, record=True, threads=args.threads)
    out = _out_dir(args, cfg)
    rows = []
    for i, ray in enumerate(res.rays):
        for k, seg in enumerate(ray.segments):
            rows += [(i, k, *p) for p in seg]
    io.write_csv(out / "rays.csv", ["ray_id", "segment_id", "t", "x", "y", "theta"], rows)
    rho_exit = np.where(res.status == EXITED, chart.rho(EMITTER, res.end[:, 0], res.end[:, 1]), np.nan)
    io.write_csv(out / "exits.csv",
                 ["ray_id", "s", "psi", "status", "t_end", "x", "y", "theta", "n_reflections", "rho_exit"],
                 [(i, s[i], psi[i], res.status[i], res.t_end[i], *res.end[i], res.n_reflections[i], rho_exit[i])
                  for i in range(len(res))])
    io.write_svg(out / "rays.svg", [np.vstack([seg[:, 1:3] for seg in ray.segments]) for ray in res.rays],
                 circles=cfg.circles(), bbox=chart.bbox)
    ok = res.status == EXITED
    summary = {
        **_header(cfg, "trace"),
        "n_rays": len(res),
        "status_counts": {st: int(np.sum(res.status == st)) for st in sorted(set(res.status.tolist()))},
        "max_abs_rho_exit": float(np.max(np.abs(rho_exit[ok]))) if np.any(ok) else None,
        "max_reflections": int(res.n_reflections.max()),
        "min_abs_mu": float(np.min(res.min_abs_mu)),
    }
    io.write_json(out / "trace_summary.json", summary)
    print(f"traced {len(res)} rays; max |rho(exit)| = {summary['max_abs_rho_exit']}")
    _budget(cfg, res.status, "traced")
    return EXIT_OK


def cmd_jacobi(args, cfg: RunConfig) -> int:
    chart, lam, opts = cfg.chart(), cfg.lam(), cfg.trace_options()
    rng = np.random.default_rng(cfg["rays"]["seed"])
    P, X, T = sample_oracle_cases(chart, lam, cfg["rays"]["n_jacobi"], rng, opts)
    rel, base = oracle_comparison(chart, lam, P, X, T, opts=opts)
    J0, DJ0 = variation_to_vector(chart, P[:, 0], P[:, 1], P[:, 2], X)
    f0 = vector_to_frame(chart, lam, P[:, 0], P[:, 1], P[:, 2], J0, DJ0)
    res = propagate_frames(chart, lam, P, f0, opts, T, record=True, threads=args.threads)
    rows = []
    for i, ray in enumerate(res.rays):
        for k, (seg, fr) in enumerate(zip(ray.segments, ray.extras)):
            J, DJ = frame_to_vector(chart, lam, seg[:, 1], seg[:, 2], seg[:, 3], fr)
            rows += [(i, *a) for a in np.column_stack([seg[:, 0], fr, J, DJ, np.full(len(seg), k)])]
    out = _out_dir(args, cfg)
    io.write_csv(out / "jacobi.csv", ["case_id", "t", "a", "b", "c", "Jx", "Jy", "DJx", "DJy", "segment_id"],
                 [(int(r[0]), *r[1:9], int(r[9])) for r in rows])
    report = {
        **_header(cfg, "jacobi"),
        "n_cases": len(P),
        "tolerance": 1e-4,
        "max_relative_error": float(np.nanmax(rel)),
        "n_singular": int(np.isnan(rel).sum()),
        "cases": [{"start": P[i], "xi": X[i], "t": T[i], "n_reflections": int(base.n_reflections[i]),
                   "relative_error": rel[i]} for i in range(len(P))],
    }
    report["pass"] = bool(report["max_relative_error"] <= 1e-4)
    io.write_json(out / "jacobi_report.json", report)
    print(f"jacobi oracle: max relative error {report['max_relative_error']:.3e} over {len(P)} cases")
    return EXIT_OK


def cmd_transform(args, cfg: RunConfig) -> int:
    chart, lam, opts = cfg.chart(), cfg.lam(), cfg.trace_options()
    r = cfg["rays"]
    f = IntegrandField(cfg["integrand"]["f0"], cfg["integrand"]["alpha"])
    rows = sinogram(chart, lam, f, r["n_positions"], r["n_angles"], r["glancing_margin"], opts, args.threads)
    out = _out_dir(args, cfg)
    io.write_csv(out / "sinogram.csv", ["s", "psi", "If"], rows)
    rng = np.random.default_rng(r["seed"])
    pts = sample_interior(chart, r["n_transport"], rng, margin=0.02)
    tr = transport_residual(chart, lam, f, pts, 1e-3, opts, args.threads)
    dr = dual_relation_check(chart, lam, f, pts, opts, args.threads)
    report = {
        **_header(cfg, "transform"),
        "integrand": repr(f),
        "n_rays": len(rows),
        "transport_residual_max": float(np.max(np.abs(tr))),
        "dual_relation_defect_max": float(np.max(np.abs(dr))),
    }
    io.write_json(out / "transform_report.json", report)
    print(f"sinogram of {len(rows)} rays; transport residual {report['transport_residual_max']:.3e}")
    return EXIT_OK


def _parse_grids(text: str | None, default: int) -> list[int]:
    if not text:
        return [default]
    try:
        grids = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"--grids must be a comma-separated list of integers: {text!r}") from exc
    if not grids or any(g < 8 for g in grids):
        raise ConfigError("--grids entries must be at least 8")
    return grids


def cmd_pestov(args, cfg: RunConfig) -> int:
    chart, lam = cfg.chart(), cfg.lam()
    grids = _parse_grids(args.grids, cfg["grid"]["nx"])
    explicit = bool(args.grids)
    results = []
    for text in cfg["pestov"]["functions"]:
        u = parse_scalar_field(text)
        per = []
        for n in grids:
            g = make_grid(chart, n, n if explicit else cfg["grid"]["ntheta"])
            rep = pestov_residual(g, lam, u)
            entry = {"n": n, **rep.as_dict()}
            if "R" in g.rings:
                entry["reflector"] = vars(boundary_decomposition(g, lam, u, seed=cfg["rays"]["seed"]))
            per.append(entry)
        orders = [convergence_order(a["relative_residual"], b["relative_residual"], b["n"] / a["n"])
                  for a, b in zip(per, per[1:])]
        results.append({"function": text, "grids": per, "orders": orders})
    all_orders = [o for r in results for o in r["orders"]]
    report = {
        **_header(cfg, "pestov"),
        "lambda": cfg["lambda"],
        "results": results,
        "min_order": min(all_orders) if all_orders else None,
        "order_pass": bool(all_orders) and min(all_orders) >= 1.5,
    }
    out = _out_dir(args, cfg)
    io.write_json(out / "pestov_report.json", report)
    for r in results:
        res = ", ".join(f"{g['n']}: {g['relative_residual']:.2e}" for g in r["grids"])
        print(f"{r['function']}: {res}; orders {['%.2f' % o for o in r['orders']]}")
    return EXIT_OK


def cmd_admissible(args, cfg: RunConfig) -> int:
    chart, lam = cfg.chart(), cfg.lam()
    i = cfg["integrator"]
    opts = AdmissibilityOptions(n_rays=cfg["rays"]["n_admissible"], step=i["step"], max_time=i["max_time"],
                                max_reflections=i["max_reflections"], seed=cfg["rays"]["seed"],
                                threads=args.threads)
    rep = check_admissible(chart, lam, opts)
    out = _out_dir(args, cfg)
    io.write_json(out / "admissibility_report.json", {**_header(cfg, "admissible"), **rep.as_dict()})
    print(f"admissible: {rep.admissible} {rep.conditions}")
    return EXIT_OK


def cmd_invert(args, cfg: RunConfig) -> int:
    chart, lam = cfg.chart(), cfg.lam()
    dom = cfg["chart"]["domain"]
    if dom["type"] != "annulus":
        raise ConfigError("invert needs an annulus domain for its polar basis")
    inv = cfg["inversion"]
    basis = annulus_basis(chart, dom["r_in"], dom["r_out"], inv["n_radial"], inv["n_fourier"])
    opts = cfg.trace_options(step=inv["step"])
    sampling = RaySampling(inv["n_positions"], inv["n_angles"], cfg["rays"]["glancing_margin"])
    system = assemble(chart, lam, basis, sampling, opts, threads=args.threads)
    kr = kernel_analysis(system)
    rng = np.random.default_rng(cfg["rays"]["seed"])
    f0 = parse_scalar_field(cfg["integrand"]["f0"])
    a1, a2 = (parse_scalar_field(a) for a in cfg["integrand"]["alpha"])
    m0 = basis.m0
    truth = np.zeros(basis.n_columns)
    truth[:m0] = project_scalar(chart, basis, f0)
    truth[m0:] = project_form(chart, basis, a1, a2)
    G = system.gauge.vectors
    if G.shape[1]:
        truth += G @ rng.normal(size=G.shape[1])  # the gauge must not be recoverable
    data = system.matrix @ truth
    noise = float(inv["noise"])
    if noise > 0:
        data = data + noise * np.max(np.abs(data)) * rng.normal(size=data.shape)
    rcond = inv["rcond"] if inv["rcond"] is not None else (noise if noise > 0 else None)
    if inv["method"] == "tikhonov":
        rec = reconstruct(system, data, tikhonov=inv["tikhonov"])
    else:
        rec = reconstruct(system, data, rcond=rcond)
    err = split_errors(system, chart, rec.coefficients, truth)
    # data of the unprojected integrand
    raw = broken_transform(chart, lam, IntegrandField(cfg["integrand"]["f0"], cfg["integrand"]["alpha"]),
                           system.starts, opts, args.threads, check_emitter=False)
    rec_raw = reconstruct(system, raw, rcond=rcond) if inv["method"] == "tsvd" else \
        reconstruct(system, raw, tikhonov=inv["tikhonov"])
    err_raw = split_errors(system, chart, rec_raw.coefficients, truth)

    out = _out_dir(args, cfg)
    write_matrix(out / "system.bin", system.matrix)
    io.write_csv(out / "system_rays.csv", ["s", "psi", "x", "y", "theta"],
                 np.column_stack([system.s, system.psi, system.starts]))
    sc = np.full(len(kr.singular_values), np.nan)
    sc[:len(kr.complement_singular_values)] = kr.complement_singular_values
    io.write_csv(out / "singular_values.csv", ["index", "sigma", "sigma_complement"],
                 [(k, kr.singular_values[k], sc[k]) for k in range(len(sc))])
    io.write_csv(out / "reconstruction.csv", ["column", "truth", "recovered"],
                 zip(basis.labels(), truth, rec.coefficients))
    report = {
        **_header(cfg, "invert"),
        "shape": list(system.shape),
        "kernel": kr.as_dict(),
        "gauge_candidates": len(system.gauge.residuals),
        "gauge_kept": system.gauge.kept,
        "gauge_projection_residuals": system.gauge.residuals,
        "method": inv["method"],
        "rank": rec.rank,
        "noise": noise,
        "residual_norm": rec.residual_norm,
        "errors": err,
        "errors_unprojected_data": err_raw,
    }
    io.write_json(out / "inversion_report.json", report)
    print(f"matrix {system.shape}; margin {kr.margin:.3e}; f0 error {err['f0_rel_error']:.3e}; "
          f"alpha error {err['alpha_rel_error']:.3e}")
    return EXIT_OK


def cmd_selftest(args, cfg: RunConfig | None) -> int:
    from .selftest import run_selftest

    checks = run_selftest(seed=args.seed or 0)
    return EXIT_OK if all(c.passed for c in checks) else EXIT_FAIL


COMMANDS = {
    "trace": (cmd_trace, "trace emitter rays; rays.csv, exits.csv, rays.svg"),
    "jacobi": (cmd_jacobi, "Jacobi fields against the finite-difference oracle"),
    "transform": (cmd_transform, "sinogram of the configured integrand"),
    "pestov": (cmd_pestov, "Pestov identity residuals and convergence orders"),
    "admissible": (cmd_admissible, "check the admissibility conditions"),
    "invert": (cmd_invert, "assemble, analyse and invert the finite forward operator"),
    "selftest": (cmd_selftest, "run the built-in pass/fail suite"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="twistray", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        s = sub.add_parser(name, help=help_text)
        s.add_argument("--config", help="JSON config file, or a shipped name: " + ", ".join(SHIPPED))
        s.add_argument("--out", help="output directory (overrides output.dir)")
        s.add_argument("--seed", type=int, help="override rays.seed")
        s.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
        s.add_argument("--grids", help="comma-separated grid sizes for pestov, e.g. 32,64")
    return p


def _load(args) -> RunConfig:
    if args.threads < 1:
        raise ConfigError("--threads must be at least 1")
    if args.config is None:
        cfg = RunConfig.from_dict({}, "<defaults>")
    elif args.config in SHIPPED and not Path(args.config).exists():
        cfg = RunConfig.from_dict(SHIPPED[args.config], args.config)
    else:
        cfg = RunConfig.load(args.config)
    return cfg.with_seed(args.seed)


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    fn = COMMANDS[args.command][0]
    try:
        cfg = None if args.command == "selftest" else _load(args)
        return fn(args, cfg)
    except (ConfigError, ExprError, GeometryError, GridError) as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))
    except (NumericalFailure, TraceError, JacobiError, InversionError, np.linalg.LinAlgError) as exc:
        return _fail(EXIT_NUMERIC, "numerical", str(exc))


if __name__ == "__main__":
    sys.exit(main())
