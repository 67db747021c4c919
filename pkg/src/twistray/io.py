"""Deterministic file writers: CSV, canonical JSON and a minimal SVG overlay."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(dumps(obj))
    return path


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v) for v in r])
    return path


def read_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = [[float(v) for v in row] for row in r]
    return header, np.array(rows, dtype=float).reshape(-1, len(header))


def write_svg(path, polylines, circles=(), outlines=(), bbox=None, size: int = 600, pad: float = 0.05) -> Path:
    """Polylines (arrays of x, y) over boundary circles (cx, cy, r) and closed outlines.

    Output uses a small SVG 1.1 subset with fixed number formatting.
    """
    pts = [np.asarray(p, float)[:, :2] for p in polylines]
    outl = [np.asarray(p, float)[:, :2] for p in outlines]
    if bbox is None:
        xs = [c[0] - c[2] for c in circles] + [c[0] + c[2] for c in circles]
        ys = [c[1] - c[2] for c in circles] + [c[1] + c[2] for c in circles]
        for p in pts + outl:
            if len(p):
                xs += [p[:, 0].min(), p[:, 0].max()]
                ys += [p[:, 1].min(), p[:, 1].max()]
        bbox = (min(xs), max(xs), min(ys), max(ys)) if xs else (-1.0, 1.0, -1.0, 1.0)
    x0, x1, y0, y1 = bbox
    span = max(x1 - x0, y1 - y0) * (1.0 + 2.0 * pad)
    cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
    s = size / span

    def tx(x, y):
        return (x - cx) * s + size / 2, size / 2 - (y - cy) * s

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>',
    ]
    for c in circles:
        px, py = tx(c[0], c[1])
        out.append(f'<circle cx="{px:.3f}" cy="{py:.3f}" r="{c[2] * s:.3f}" fill="none" '
                   f'stroke="black" stroke-width="1.5"/>')
    for p in outl:
        q = " ".join(f"{a:.3f},{b:.3f}" for a, b in (tx(*xy) for xy in p))
        out.append(f'<polygon points="{q}" fill="none" stroke="black" stroke-width="1.5"/>')
    for p in pts:
        q = " ".join(f"{a:.3f},{b:.3f}" for a, b in (tx(*xy) for xy in p))
        out.append(f'<polyline points="{q}" fill="none" stroke="#1f5fa8" stroke-width="0.8"/>')
    out.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(out) + "\n")
    return path


__all__ = ["dumps", "read_csv", "write_csv", "write_json", "write_svg"]
