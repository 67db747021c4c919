"""Strict JSON run configuration and the objects built from it."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .dynamics import TraceOptions
from .expr import ExprError, parse_scalar_field
from .geometry import ConformalChart, GeometryError, circle_function, make_chart
from .lambdafield import LambdaField, constant_lambda, from_expression, magnetic, thermostat


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "chart": {
        "phi": "0",
        "domain": {"type": "annulus", "r_in": 0.5, "r_out": 1.0, "center": [0.0, 0.0]},
    },
    "lambda": {"kind": "expression", "expr": "0"},
    "integrator": {
        "step": 1e-3,
        "rho_tol": 1e-9,
        "tan_eps": 1e-6,
        "event_tol": 1e-12,
        "max_time": 100.0,
        "max_reflections": 64,
    },
    "grid": {"nx": 32, "ny": 32, "ntheta": 32},
    "rays": {
        "n_positions": 16,
        "n_angles": 8,
        "glancing_margin": 0.05,
        "seed": 0,
        "n_jacobi": 20,
        "n_admissible": 2000,
        "n_transport": 50,
        "failure_budget": 0,
    },
    "integrand": {"f0": "exp(-((x - 0.6)^2 + (y - 0.2)^2)/0.05)", "alpha": ["0", "0"]},
    "pestov": {"functions": ["sin(x)*cos(y) + x*sin(theta)"]},
    "inversion": {
        "n_radial": 5,
        "n_fourier": 5,
        "n_positions": 100,
        "n_angles": 20,
        "step": 5e-3,
        "method": "tsvd",
        "rcond": None,
        "tikhonov": None,
        "noise": 0.0,
    },
    "output": {"dir": "out"},
}

_DOMAIN_KEYS = {
    "annulus": {"type", "r_in", "r_out", "center"},
    "disk": {"type", "radius", "center"},
    "custom": {"type", "emitter", "reflector", "bbox", "center"},
}

_POSITIVE = {
    "integrator": ("step", "rho_tol", "tan_eps", "event_tol", "max_time", "max_reflections"),
    "rays": ("n_positions", "n_angles", "glancing_margin", "n_jacobi", "n_admissible", "n_transport"),
    "inversion": ("n_radial", "n_fourier", "n_positions", "n_angles", "step"),
}

_INTS = {
    "integrator": ("max_reflections",),
    "grid": ("nx", "ny", "ntheta"),
    "rays": ("n_positions", "n_angles", "seed", "n_jacobi", "n_admissible", "n_transport", "failure_budget"),
    "inversion": ("n_radial", "n_fourier", "n_positions", "n_angles"),
}


def _reject_constant(name):
    raise ConfigError(f"non-standard JSON constant {name}")


def _no_duplicates(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise ConfigError(f"duplicate key {k!r}")
        out[k] = v
    return out


def loads_strict(text: str) -> dict:
    try:
        data = json.loads(text, parse_constant=_reject_constant, object_pairs_hook=_no_duplicates)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return data


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _merge(base: dict, over: dict, path: str) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}.{k}" if path else k
        if k not in base:
            raise ConfigError(f"unknown key {where!r}")
        if isinstance(base[k], dict) and k not in ("domain", "lambda"):
            if not isinstance(v, dict):
                raise ConfigError(f"{where!r} must be an object")
            out[k] = _merge(base[k], v, where)
        else:
            out[k] = v
    return out


def _check_expr(text, where):
    if not isinstance(text, str):
        raise ConfigError(f"{where!r} must be an expression string")
    try:
        return parse_scalar_field(text)
    except ExprError as exc:
        raise ConfigError(f"{where!r}: {exc}") from exc


def validate(data: dict) -> dict:
    """Merge onto defaults and check every field; returns the full config."""
    cfg = _merge(DEFAULTS, data, "")
    for sec, keys in _INTS.items():
        for k in keys:
            v = cfg[sec][k]
            if not isinstance(v, int) or isinstance(v, bool):
                raise ConfigError(f"{sec}.{k} must be an integer")
    for sec, keys in _POSITIVE.items():
        for k in keys:
            v = cfg[sec][k]
            if not _is_number(v) or not v > 0:
                raise ConfigError(f"{sec}.{k} must be positive")
    for k in ("nx", "ny", "ntheta"):
        if cfg["grid"][k] < 8:
            raise ConfigError(f"grid.{k} must be at least 8")
    if cfg["grid"]["nx"] != cfg["grid"]["ny"]:
        raise ConfigError("grid.nx and grid.ny must be equal (square cells)")
    if cfg["grid"]["ntheta"] % 2:
        raise ConfigError("grid.ntheta must be even")
    if cfg["rays"]["seed"] < 0 or cfg["rays"]["failure_budget"] < 0:
        raise ConfigError("rays.seed and rays.failure_budget must be non-negative")
    if cfg["rays"]["glancing_margin"] >= 1.5:
        raise ConfigError("rays.glancing_margin must be below pi/2")

    dom = cfg["chart"]["domain"]
    if not isinstance(dom, dict) or dom.get("type") not in _DOMAIN_KEYS:
        raise ConfigError(f"chart.domain.type must be one of {sorted(_DOMAIN_KEYS)}")
    extra = set(dom) - _DOMAIN_KEYS[dom["type"]]
    if extra:
        raise ConfigError(f"unknown key 'chart.domain.{sorted(extra)[0]}'")
    dom.setdefault("center", [0.0, 0.0])
    c = dom["center"]
    if not (isinstance(c, list) and len(c) == 2 and all(_is_number(v) for v in c)):
        raise ConfigError("chart.domain.center must be [x, y]")
    if dom["type"] == "annulus":
        for k in ("r_in", "r_out"):
            if not _is_number(dom.get(k)) or not dom[k] > 0:
                raise ConfigError(f"chart.domain.{k} must be positive")
        if dom["r_in"] >= dom["r_out"]:
            raise ConfigError("chart.domain.r_in must be below r_out")
    elif dom["type"] == "disk":
        if not _is_number(dom.get("radius")) or not dom["radius"] > 0:
            raise ConfigError("chart.domain.radius must be positive")
    else:
        _check_expr(dom.get("emitter"), "chart.domain.emitter")
        if dom.get("reflector") is not None:
            _check_expr(dom["reflector"], "chart.domain.reflector")
        bb = dom.get("bbox")
        if not (isinstance(bb, list) and len(bb) == 4 and all(_is_number(v) for v in bb)):
            raise ConfigError("chart.domain.bbox must be [x0, x1, y0, y1]")
    phi = _check_expr(cfg["chart"]["phi"], "chart.phi")
    if phi.depends_on("theta"):
        raise ConfigError("chart.phi must not depend on theta")

    lam = cfg["lambda"]
    kinds = {"expression": {"kind", "expr"}, "magnetic": {"kind", "expr"},
             "constant": {"kind", "value"}, "thermostat": {"kind", "E"}}
    if not isinstance(lam, dict) or lam.get("kind") not in kinds:
        raise ConfigError(f"lambda.kind must be one of {sorted(kinds)}")
    extra = set(lam) - kinds[lam["kind"]]
    if extra:
        raise ConfigError(f"unknown key 'lambda.{sorted(extra)[0]}'")
    if lam["kind"] in ("expression", "magnetic"):
        _check_expr(lam.get("expr"), "lambda.expr")
    elif lam["kind"] == "constant":
        if not _is_number(lam.get("value")):
            raise ConfigError("lambda.value must be a number")
    else:
        E = lam.get("E")
        if not (isinstance(E, list) and len(E) == 2):
            raise ConfigError("lambda.E must be two expressions")
        for i, e in enumerate(E):
            _check_expr(e, f"lambda.E[{i}]")

    _check_expr(cfg["integrand"]["f0"], "integrand.f0")
    al = cfg["integrand"]["alpha"]
    if not (isinstance(al, list) and len(al) == 2):
        raise ConfigError("integrand.alpha must be two expressions")
    for i, a in enumerate(al):
        _check_expr(a, f"integrand.alpha[{i}]")
    fns = cfg["pestov"]["functions"]
    if not (isinstance(fns, list) and fns):
        raise ConfigError("pestov.functions must be a non-empty list")
    for i, f in enumerate(fns):
        _check_expr(f, f"pestov.functions[{i}]")

    inv = cfg["inversion"]
    if inv["method"] not in ("tsvd", "tikhonov"):
        raise ConfigError("inversion.method must be 'tsvd' or 'tikhonov'")
    for k in ("rcond", "tikhonov"):
        if inv[k] is not None and (not _is_number(inv[k]) or not inv[k] > 0):
            raise ConfigError(f"inversion.{k} must be positive or null")
    if inv["method"] == "tikhonov" and inv["tikhonov"] is None:
        raise ConfigError("inversion.tikhonov is required for the tikhonov method")
    if not _is_number(inv["noise"]) or inv["noise"] < 0:
        raise ConfigError("inversion.noise must be non-negative")
    if not isinstance(cfg["output"]["dir"], str) or not cfg["output"]["dir"]:
        raise ConfigError("output.dir must be a non-empty string")
    return cfg


@dataclass
class RunConfig:
    data: dict
    source: str = "<built-in>"

    @classmethod
    def from_dict(cls, data: dict, source: str = "<dict>") -> "RunConfig":
        return cls(validate(data), source)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        return cls(validate(loads_strict(text)), str(path))

    def __getitem__(self, key):
        return self.data[key]

    def digest(self) -> str:
        blob = json.dumps(self.data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_seed(self, seed: int | None) -> "RunConfig":
        if seed is None:
            return self
        if seed < 0:
            raise ConfigError("seed must be non-negative")
        d = copy.deepcopy(self.data)
        d["rays"]["seed"] = int(seed)
        return RunConfig(d, self.source)

    # builders

    def chart(self) -> ConformalChart:
        c = self.data["chart"]
        dom = c["domain"]
        center = tuple(float(v) for v in dom["center"])
        try:
            if dom["type"] == "annulus":
                ri, ro = float(dom["r_in"]), float(dom["r_out"])
                return make_chart(c["phi"], circle_function(center, ro, True), circle_function(center, ri, False),
                                  name="annulus", center=center,
                                  bbox=(center[0] - ro, center[0] + ro, center[1] - ro, center[1] + ro))
            if dom["type"] == "disk":
                r = float(dom["radius"])
                return make_chart(c["phi"], circle_function(center, r, True), None, name="disk", center=center,
                                  bbox=(center[0] - r, center[0] + r, center[1] - r, center[1] + r))
            return make_chart(c["phi"], dom["emitter"], dom.get("reflector"), name="custom",
                              bbox=tuple(float(v) for v in dom["bbox"]), center=center)
        except (GeometryError, ExprError) as exc:
            raise ConfigError(f"chart: {exc}") from exc

    def lam(self, chart: ConformalChart | None = None) -> LambdaField:
        s = self.data["lambda"]
        if s["kind"] == "expression":
            return from_expression(s["expr"])
        if s["kind"] == "magnetic":
            try:
                return magnetic(s["expr"])
            except ValueError as exc:
                raise ConfigError(f"lambda: {exc}") from exc
        if s["kind"] == "constant":
            return constant_lambda(float(s["value"]))
        try:
            return thermostat(chart or self.chart(), s["E"])
        except ValueError as exc:
            raise ConfigError(f"lambda: {exc}") from exc

    def trace_options(self, **over) -> TraceOptions:
        i = self.data["integrator"]
        o = TraceOptions(step=float(i["step"]), max_time=float(i["max_time"]),
                         max_reflections=int(i["max_reflections"]), tan_eps=float(i["tan_eps"]),
                         event_tol=float(i["event_tol"]), rho_tol=float(i["rho_tol"]))
        return o.with_(**over) if over else o

    def circles(self) -> list[tuple[float, float, float]]:
        """Boundary circles for plotting, when the domain is made of circles."""
        dom = self.data["chart"]["domain"]
        cx, cy = dom["center"]
        if dom["type"] == "annulus":
            return [(cx, cy, dom["r_out"]), (cx, cy, dom["r_in"])]
        if dom["type"] == "disk":
            return [(cx, cy, dom["radius"])]
        return []


FLAT_ANNULUS = {
    "chart": {"phi": "0", "domain": {"type": "annulus", "r_in": 0.5, "r_out": 1.0, "center": [0.0, 0.0]}},
    "lambda": {"kind": "expression", "expr": "0"},
    "pestov": {"functions": ["exp(0.5*x)*cos(2*theta + y)", "sin(x)*cos(y) + x*sin(theta)",
                             "(x*sin(theta) - y*cos(theta))^3 + x*y"]},
    "output": {"dir": "out/flat_annulus"},
}

CURVED = {
    "chart": {"phi": "0.15*(x^2 + y^2)",
              "domain": {"type": "annulus", "r_in": 0.5, "r_out": 1.0, "center": [0.0, 0.0]}},
    "lambda": {"kind": "expression", "expr": "0.3 + 0.2*cos(theta) + 0.1*x*sin(2*theta)"},
    "integrand": {"f0": "1 + x*y", "alpha": ["0.3*y", "-0.2*x + 0.1"]},
    "pestov": {"functions": ["exp(0.5*x)*cos(2*theta + y)", "sin(x)*cos(y) + x*sin(theta)",
                             "(x*sin(theta) - y*cos(theta))^3 + x*y"]},
    "output": {"dir": "out/curved"},
}

SHIPPED = {"flat_annulus": FLAT_ANNULUS, "curved": CURVED}


__all__ = ["CURVED", "ConfigError", "DEFAULTS", "FLAT_ANNULUS", "RunConfig", "SHIPPED", "loads_strict", "validate"]
