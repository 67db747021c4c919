"""Finite-basis forward operator for f = f0 + alpha, its gauge kernel and TSVD inversion.

The scalar basis on an annulus r_in <= r <= r_out (polar coordinates about
the chart center) is P_i(s) F_j(psi) with shifted Legendre polynomials in
s = 2 (r - r_in)/(r_out - r_in) - 1 and real Fourier modes in psi. Forms are
alpha = A dr + B dpsi with A and B each in the scalar span, which makes many
exact forms d(rho_E phi_p) exactly representable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import legendre

from .dynamics import EXITED, TraceOptions, trace_batch
from .geometry import EMITTER, ConformalChart
from .lambdafield import LambdaField
from .transform import emitter_fan, integrate_rays


class InversionError(ValueError):
    pass


# ---------------------------------------------------------------- basis


def _fourier(j: int, psi, deriv: bool = False):
    """Real Fourier mode j: 0 -> 1, 2k-1 -> cos k psi, 2k -> sin k psi."""
    if j == 0:
        return np.zeros_like(psi) if deriv else np.ones_like(psi)
    k = (j + 1) // 2
    if j % 2 == 1:
        return -k * np.sin(k * psi) if deriv else np.cos(k * psi)
    return k * np.cos(k * psi) if deriv else np.sin(k * psi)


@dataclass
class BasisSpec:
    center: tuple[float, float]
    r_in: float
    r_out: float
    n_radial: int = 5
    n_fourier: int = 5
    scale: np.ndarray | None = None  # per-column normalization (f0 then A then B)

    @property
    def m0(self) -> int:
        return self.n_radial * self.n_fourier

    @property
    def n_columns(self) -> int:
        return 3 * self.m0

    def index(self):
        return [(i, j) for i in range(self.n_radial) for j in range(self.n_fourier)]

    def labels(self) -> list[str]:
        out = []
        for part in ("f0", "A", "B"):
            out += [f"{part}[P{i}F{j}]" for i, j in self.index()]
        return out

    def polar(self, x, y):
        dx = np.asarray(x, float) - self.center[0]
        dy = np.asarray(y, float) - self.center[1]
        return np.hypot(dx, dy), np.arctan2(dy, dx), dx, dy

    def _s(self, r):
        return 2.0 * (r - self.r_in) / (self.r_out - self.r_in) - 1.0

    def scalar(self, r, psi, deriv_r: bool = False, deriv_psi: bool = False) -> np.ndarray:
        """All scalar basis values, shape (..., m0)."""
        s = self._s(r)
        ds = 2.0 / (self.r_out - self.r_in)
        cols = []
        for i, j in self.index():
            c = np.zeros(i + 1)
            c[i] = 1.0
            if deriv_r:
                rad = legendre.legval(s, legendre.legder(c)) * ds
            else:
                rad = legendre.legval(s, c)
            cols.append(rad * _fourier(j, psi, deriv_psi))
        return np.stack(cols, axis=-1)

    def raw_integrands(self, chart: ConformalChart, x, y, theta) -> np.ndarray:
        """Unscaled column integrands at SM samples, shape (m, 3 m0)."""
        r, psi, dx, dy = self.polar(x, y)
        phi_s = self.scalar(r, psi)
        e = np.exp(-chart.phi(x, y))
        c, s = np.cos(theta), np.sin(theta)
        # dr(v) and dpsi(v) for v = e^{-phi}(cos, sin)
        dr_v = e * (dx * c + dy * s) / r
        dpsi_v = e * (-dy * c + dx * s) / (r * r)
        return np.concatenate([phi_s, phi_s * dr_v[:, None], phi_s * dpsi_v[:, None]], axis=1)

    def integrands(self, chart, x, y, theta) -> np.ndarray:
        m = self.raw_integrands(chart, x, y, theta)
        return m if self.scale is None else m / self.scale


def annulus_basis(chart: ConformalChart, r_in: float, r_out: float, n_radial: int = 5,
                  n_fourier: int = 5) -> BasisSpec:
    center = tuple(chart.meta.get("center", (0.0, 0.0)))
    b = BasisSpec(center, r_in, r_out, n_radial, n_fourier)
    q = PolarQuadrature.build(b)
    b.scale = np.sqrt(q.column_norms2(chart, b))
    return b


# ---------------------------------------------------------------- quadrature on M


@dataclass
class PolarQuadrature:
    r: np.ndarray
    psi: np.ndarray
    w: np.ndarray  # r dr dpsi weights

    @classmethod
    def build(cls, basis: BasisSpec, n_r: int = 24, n_psi: int = 64) -> "PolarQuadrature":
        g, gw = legendre.leggauss(n_r)
        half = 0.5 * (basis.r_out - basis.r_in)
        r = basis.r_in + half * (g + 1.0)
        psi = 2.0 * np.pi * np.arange(n_psi) / n_psi
        R, P = np.meshgrid(r, psi, indexing="ij")
        W = (gw * half * r)[:, None] * np.full(n_psi, 2.0 * np.pi / n_psi)[None, :]
        return cls(R.ravel(), P.ravel(), W.ravel())

    def xy(self, basis: BasisSpec):
        return basis.center[0] + self.r * np.cos(self.psi), basis.center[1] + self.r * np.sin(self.psi)

    def gram(self, chart: ConformalChart, basis: BasisSpec) -> np.ndarray:
        """L2(M) Gram matrix of the (scaled) columns.

        f0 uses e^{2 phi} dx dy; forms use the conformally invariant
        |alpha|^2 dV = (A^2 + B^2 / r^2) dx dy.
        """
        x, y = self.xy(basis)
        S = basis.scalar(self.r, self.psi)
        e2 = np.exp(2.0 * chart.phi(x, y))
        m0 = basis.m0
        G = np.zeros((3 * m0, 3 * m0))
        G[:m0, :m0] = S.T @ (S * (self.w * e2)[:, None])
        G[m0:2 * m0, m0:2 * m0] = S.T @ (S * self.w[:, None])
        G[2 * m0:, 2 * m0:] = S.T @ (S * (self.w / self.r**2)[:, None])
        if basis.scale is not None:
            G = G / np.outer(basis.scale, basis.scale)
        return G

    def column_norms2(self, chart, basis: BasisSpec) -> np.ndarray:
        saved, basis.scale = basis.scale, None
        try:
            return np.diag(self.gram(chart, basis)).copy()
        finally:
            basis.scale = saved


# ---------------------------------------------------------------- gauge


@dataclass
class GaugeBasis:
    vectors: np.ndarray  # (n_columns, n_gauge), coefficient vectors of d(rho_E phi_p)
    residuals: np.ndarray  # projection residual per candidate (relative)
    kept: list[int]  # candidate indices with residual <= tol
    tol: float


def gauge_basis(chart: ConformalChart, basis: BasisSpec, tol: float = 1e-10) -> GaugeBasis:
    """Least-squares coefficients of dh_p, h_p = rho_E phi_p, in the form basis.

    dh = (d_r h) dr + (d_psi h) dpsi, with rho_E evaluated analytically.
    """
    q = PolarQuadrature.build(basis)
    x, y = q.xy(basis)
    S = basis.scalar(q.r, q.psi)
    Sr = basis.scalar(q.r, q.psi, deriv_r=True)
    Sp = basis.scalar(q.r, q.psi, deriv_psi=True)
    rho = chart.boundary_function(EMITTER)
    rv = rho(x, y)
    # derivatives of rho_E along r and psi
    c, s = np.cos(q.psi), np.sin(q.psi)
    rr = rho.dx(x, y) * c + rho.dy(x, y) * s
    rp = (-rho.dx(x, y) * s + rho.dy(x, y) * c) * q.r
    sw = np.sqrt(q.w)
    lhs = S * sw[:, None]
    m0 = basis.m0
    scale = np.ones(3 * m0) if basis.scale is None else basis.scale
    vecs, res = [], []
    for p in range(m0):
        hr = rr * S[:, p] + rv * Sr[:, p]
        hp = rp * S[:, p] + rv * Sp[:, p]
        a, *_ = np.linalg.lstsq(lhs, hr * sw, rcond=None)
        b, *_ = np.linalg.lstsq(lhs, hp * sw, rcond=None)
        err = np.hypot(np.linalg.norm(lhs @ a - hr * sw), np.linalg.norm(lhs @ b - hp * sw))
        ref = max(np.hypot(np.linalg.norm(hr * sw), np.linalg.norm(hp * sw)), 1e-300)
        v = np.concatenate([np.zeros(m0), a, b]) * scale  # into scaled coefficients
        vecs.append(v)
        res.append(err / ref)
    res = np.asarray(res)
    kept = [p for p in range(m0) if res[p] <= tol]
    V = np.array(vecs).T[:, kept]
    return GaugeBasis(V, res, kept, tol)


def complement_basis(gauge: GaugeBasis, n: int) -> np.ndarray:
    """Orthonormal basis of the coefficient-space complement of the gauge span."""
    if gauge.vectors.shape[1] == 0:
        return np.eye(n)
    Q, _ = np.linalg.qr(gauge.vectors)
    U, s, _ = np.linalg.svd(np.eye(n) - Q @ Q.T)
    k = n - gauge.vectors.shape[1]
    return U[:, :k]


# ---------------------------------------------------------------- forward system


@dataclass
class RaySampling:
    n_positions: int = 100
    n_angles: int = 20
    glancing_margin: float = 0.05
    emitter_fraction: float = 1.0  # keep rays whose arclength lies in this leading fraction


@dataclass
class ForwardSystem:
    basis: BasisSpec
    starts: np.ndarray
    s: np.ndarray
    psi: np.ndarray
    matrix: np.ndarray
    gauge: GaugeBasis
    complement: np.ndarray
    labels: list[str] = field(default_factory=list)

    @property
    def shape(self):
        return self.matrix.shape


def assemble(chart: ConformalChart, lam: LambdaField, basis: BasisSpec, sampling: RaySampling | None = None,
             opts: TraceOptions | None = None, threads: int = 1, chunk: int = 256) -> ForwardSystem:
    """Rows I(basis column) along emitter rays of a uniform fan."""
    sampling = sampling or RaySampling()
    frac = sampling.emitter_fraction
    if not 0.0 < frac <= 1.0:
        raise InversionError("emitter_fraction must lie in (0, 1]")
    n_pos = sampling.n_positions if frac == 1.0 else int(np.ceil(sampling.n_positions / frac))
    starts, s, psi = emitter_fan(chart, n_pos, sampling.n_angles, sampling.glancing_margin)
    if frac < 1.0:
        # same ray budget, all of it on the leading arc
        total = chart.boundary_uniform_arclength(EMITTER, 8)[3]
        keep = s < frac * total
        starts, s, psi = starts[keep], s[keep], psi[keep]
    n_cols = basis.n_columns
    if len(starts) < 3 * n_cols:
        raise InversionError(f"too few rays: {len(starts)} < 3 x {n_cols} columns")
    opts = opts or TraceOptions(step=5e-3)
    rows = []
    for a in range(0, len(starts), chunk):
        res = trace_batch(chart, lam, starts[a:a + chunk], opts, record=True, threads=threads)
        if np.any(res.status != EXITED):
            raise InversionError("a sampling ray did not exit")
        rows.append(integrate_rays(chart, res.rays, basis.integrands))
    A = np.vstack(rows)
    if not np.all(np.isfinite(A)):
        raise InversionError("non-finite matrix entries")
    g = gauge_basis(chart, basis)
    return ForwardSystem(basis, starts, s, psi, A, g, complement_basis(g, n_cols), basis.labels())


@dataclass
class KernelReport:
    singular_values: np.ndarray
    complement_singular_values: np.ndarray
    margin: float
    gauge_rayleigh: np.ndarray  # ||A g|| / ||g|| / sigma_max per gauge vector
    n_gauge: int
    gauge_projection_residual_max: float

    def as_dict(self):
        return {
            "singular_values": self.singular_values.tolist(),
            "complement_singular_values": self.complement_singular_values.tolist(),
            "margin": self.margin,
            "gauge_rayleigh_max": float(self.gauge_rayleigh.max()) if len(self.gauge_rayleigh) else 0.0,
            "n_gauge": self.n_gauge,
            "gauge_projection_residual_max": self.gauge_projection_residual_max,
        }


def kernel_analysis(system: ForwardSystem) -> KernelReport:
    A = system.matrix
    sv = np.linalg.svd(A, compute_uv=False)
    smax = sv[0]
    G = system.gauge.vectors
    ray = np.linalg.norm(A @ G, axis=0) / np.linalg.norm(G, axis=0) / smax if G.shape[1] else np.zeros(0)
    sc = np.linalg.svd(A @ system.complement, compute_uv=False)
    kept = system.gauge.residuals[system.gauge.kept]
    return KernelReport(sv, sc, float(sc[-1] / sc[0]), ray, G.shape[1],
                        float(kept.max()) if len(kept) else 0.0)


# ---------------------------------------------------------------- reconstruction


@dataclass
class Reconstruction:
    coefficients: np.ndarray  # scaled coefficients, gauge-free
    rank: int
    residual_norm: float


def reconstruct(system: ForwardSystem, data, rank: int | None = None, rcond: float | None = None,
                tikhonov: float | None = None) -> Reconstruction:
    """Least squares on the gauge complement; truncated SVD by default.

    ``rank`` or ``rcond`` truncate the spectrum; ``tikhonov`` switches to
    damped least squares with that parameter.
    """
    d = np.asarray(data, float)
    B = system.matrix @ system.complement
    U, s, Vt = np.linalg.svd(B, full_matrices=False)
    if tikhonov is not None:
        if tikhonov <= 0:
            raise InversionError("regularization parameter must be positive")
        filt = s / (s * s + tikhonov**2)
        k = len(s)
    else:
        if rank is not None and rank <= 0:
            raise InversionError("rank must be positive")
        if rcond is not None and rcond <= 0:
            raise InversionError("rcond must be positive")
        k = len(s) if rank is None else min(rank, len(s))
        if rcond is not None:
            k = min(k, int(np.sum(s >= rcond * s[0])))
        filt = np.zeros_like(s)
        filt[:k] = 1.0 / s[:k]
    z = Vt.T @ (filt * (U.T @ d))
    c = system.complement @ z
    return Reconstruction(c, k, float(np.linalg.norm(system.matrix @ c - d)))


def gauge_normalize(system: ForwardSystem, c: np.ndarray, gram: np.ndarray) -> np.ndarray:
    """Subtract the L2(M)-best gauge fit from the form part of c."""
    G = system.gauge.vectors
    if G.shape[1] == 0:
        return c.copy()
    M = G.T @ gram @ G
    t = np.linalg.solve(M, G.T @ gram @ c)
    return c - G @ t


def split_errors(system: ForwardSystem, chart: ConformalChart, c_rec, c_true) -> dict:
    """Relative L2(M) errors of f0 and of gauge-normalized alpha."""
    q = PolarQuadrature.build(system.basis)
    gram = q.gram(chart, system.basis)
    m0 = system.basis.m0
    rn = gauge_normalize(system, c_rec, gram)
    tn = gauge_normalize(system, c_true, gram)
    d = rn - tn

    def part_norm(v, sl):
        w = np.zeros_like(v)
        w[sl] = v[sl]
        return float(np.sqrt(max(w @ gram @ w, 0.0)))

    f_sl, a_sl = slice(0, m0), slice(m0, 3 * m0)
    f_ref, a_ref = part_norm(tn, f_sl), part_norm(tn, a_sl)
    total = float(np.hypot(f_ref, a_ref))
    # a vanishing part is measured against the whole truth instead
    f_den = f_ref if f_ref > 1e-12 * total else total
    a_den = a_ref if a_ref > 1e-12 * total else total
    if total == 0.0:
        f_den = a_den = 1.0
    return {
        "f0_rel_error": part_norm(d, f_sl) / f_den,
        "alpha_rel_error": part_norm(d, a_sl) / a_den,
        "f0_norm": f_ref,
        "alpha_norm": a_ref,
    }


def project_scalar(chart: ConformalChart, basis: BasisSpec, fn) -> np.ndarray:
    """L2(M) projection of a scalar function onto the scaled f0 columns."""
    q = PolarQuadrature.build(basis)
    x, y = q.xy(basis)
    S = basis.scalar(q.r, q.psi) / (basis.scale[:basis.m0] if basis.scale is not None else 1.0)
    w = q.w * np.exp(2.0 * chart.phi(x, y))
    M = S.T @ (S * w[:, None])
    return np.linalg.solve(M, S.T @ (w * fn(x, y)))


def project_form(chart: ConformalChart, basis: BasisSpec, a1, a2) -> np.ndarray:
    """L2(M) projection of the Cartesian form a1 dx + a2 dy onto the scaled A, B columns."""
    q = PolarQuadrature.build(basis)
    x, y = q.xy(basis)
    c, s = np.cos(q.psi), np.sin(q.psi)
    v1, v2 = a1(x, y) * np.ones_like(x), a2(x, y) * np.ones_like(x)
    A = v1 * c + v2 * s
    B = q.r * (-v1 * s + v2 * c)
    S = basis.scalar(q.r, q.psi)
    m0 = basis.m0
    scale = np.ones(3 * m0) if basis.scale is None else basis.scale
    out = []
    for vals, wt, sc in ((A, q.w, scale[m0:2 * m0]), (B, q.w / q.r**2, scale[2 * m0:])):
        Ss = S / sc
        M = Ss.T @ (Ss * wt[:, None])
        out.append(np.linalg.solve(M, Ss.T @ (wt * vals)))
    return np.concatenate(out)


def synthetic_truth(chart: ConformalChart, system: ForwardSystem, rng: np.random.Generator,
                    bump=None, alpha_scale: float = 0.3, gauge_scale: float = 1.0) -> np.ndarray:
    """In-span test integrand: projected bump f0, random alpha plus a random gauge."""
    basis = system.basis
    m0 = basis.m0
    bump = bump or (lambda x, y: np.exp(-((x - 0.6) ** 2 + (y - 0.2) ** 2) / 0.05))
    c = np.zeros(basis.n_columns)
    c[:m0] = project_scalar(chart, basis, bump)
    c[m0:] = alpha_scale * rng.normal(size=2 * m0)
    G = system.gauge.vectors
    if G.shape[1]:
        c += gauge_scale * G @ rng.normal(size=G.shape[1])
    return c


def write_matrix(path, A: np.ndarray) -> None:
    """Binary matrix: magic, uint64 rows and cols (little endian), float64 row-major data."""
    A = np.ascontiguousarray(A, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(b"TWRM")
        fh.write(np.array(A.shape, dtype="<u8").tobytes())
        fh.write(A.tobytes())


def read_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != b"TWRM":
            raise InversionError("not a matrix file")
        rows, cols = np.frombuffer(fh.read(16), dtype="<u8")
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != rows * cols:
        raise InversionError("matrix file is truncated")
    return data.reshape(int(rows), int(cols)).copy()


__all__ = [
    "BasisSpec",
    "ForwardSystem",
    "GaugeBasis",
    "InversionError",
    "KernelReport",
    "PolarQuadrature",
    "RaySampling",
    "Reconstruction",
    "annulus_basis",
    "assemble",
    "complement_basis",
    "gauge_basis",
    "gauge_normalize",
    "kernel_analysis",
    "project_form",
    "project_scalar",
    "read_matrix",
    "reconstruct",
    "split_errors",
    "synthetic_truth",
    "write_matrix",
]
