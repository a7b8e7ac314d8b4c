"""Unique continuation from lateral Cauchy data, and its constructive twin.

Pipeline: form the difference pair (y, z) of two solution pairs, measure the
mismatch constants on the unobserved boundary part (M1) and at the time-window
ends (M2), evaluate the decay bound

    B(s) = C s^2 M1 exp(-2 s (mu2 - 1)) + C s^2 M2 exp(-2 s (mu2 - mu1)),

and check that the unweighted window norm of (y, z) on the target subdomain is
dominated by the bound's minimum plus a discretization slack.  Sweeping the
window center over a global horizon glues the per-window conclusions.  The
constructive counterpart reconstructs (y, z) from Cauchy data on the observed
part by minimizing a weighted least-squares functional with conjugate
gradients on the normal equations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .carleman import CarlemanReport, sweep_s
from .errors import ConvergenceError, GridError, TraceError
from .geometry import _FACE_AXIS_SIDE, WeightConfig, build_d, make_weight_config
from .grid import (
    CauchyData,
    Field,
    SpaceTimeGrid,
    dt,
    extract_cauchy,
    gradient,
    laplacian,
)
from .mfg import ManufacturedCase, MFGCoefficients, make_manufactured


# -- difference system ------------------------------------------------------------


@dataclass(eq=False)
class DifferenceSystem:
    """The linear system satisfied by a difference pair, with frozen fields.

    line1(y) = dt y + a1 lap y - (1/2) kappa grad(u + u~) . grad y - h y
    line2(y, z) = dt z - a2 lap z
                  - (2 grad a2 + kappa grad u~) . grad z
                  - (lap a2 + kappa lap u~ + grad kappa . grad u~) z
                  - kappa v lap y - (v grad kappa + kappa grad v) . grad y

    Exact for the difference of two solution pairs when built from both pairs;
    a linearization when all reference fields come from a single solve.
    """

    a1: Field
    a2: Field
    h: Field
    kappa: Field
    gu_sum: tuple[Field, ...]
    v_coef: Field
    grad_v: tuple[Field, ...]
    lap_ut: Field
    grad_ut: tuple[Field, ...]

    def __post_init__(self):
        self.grid: SpaceTimeGrid = self.a1.grid
        self.grad_a2 = gradient(self.a2)
        self.lap_a2 = laplacian(self.a2)
        self.grad_kappa = gradient(self.kappa)
        dim = self.grid.domain.dimension
        self._z_react = (
            self.lap_a2.values
            + self.kappa.values * self.lap_ut.values
            + sum(self.grad_kappa[a].values * self.grad_ut[a].values for a in range(dim))
        )
        self._z_conv = [
            2.0 * self.grad_a2[a].values + self.kappa.values * self.grad_ut[a].values
            for a in range(dim)
        ]
        self._y_conv_line2 = [
            self.v_coef.values * self.grad_kappa[a].values
            + self.kappa.values * self.grad_v[a].values
            for a in range(dim)
        ]

    @classmethod
    def from_pairs(
        cls, coeffs: MFGCoefficients, u: Field, v: Field, u_t: Field, v_t: Field
    ) -> "DifferenceSystem":
        gu = gradient(u)
        gut = gradient(u_t)
        return cls(
            a1=coeffs.a1,
            a2=coeffs.a2,
            h=coeffs.h,
            kappa=coeffs.kappa,
            gu_sum=tuple(Field(u.grid, gu[a].values + gut[a].values) for a in range(len(gu))),
            v_coef=v,
            grad_v=gradient(v),
            lap_ut=laplacian(u_t),
            grad_ut=gut,
        )

    @classmethod
    def linearized(cls, coeffs: MFGCoefficients, u_ref: Field, v_ref: Field) -> "DifferenceSystem":
        gu = gradient(u_ref)
        return cls(
            a1=coeffs.a1,
            a2=coeffs.a2,
            h=coeffs.h,
            kappa=coeffs.kappa,
            gu_sum=tuple(Field(u_ref.grid, 2.0 * c.values) for c in gu),
            v_coef=v_ref,
            grad_v=gradient(v_ref),
            lap_ut=laplacian(u_ref),
            grad_ut=gu,
        )

    # dense evaluation ---------------------------------------------------------

    def lower_order_1(self, y: Field) -> np.ndarray:
        gy = gradient(y)
        dim = self.grid.domain.dimension
        return (
            -0.5 * self.kappa.values * sum(self.gu_sum[a].values * gy[a].values for a in range(dim))
            - self.h.values * y.values
        )

    def lower_order_2(self, z: Field) -> np.ndarray:
        gz = gradient(z)
        dim = self.grid.domain.dimension
        return -sum(self._z_conv[a] * gz[a].values for a in range(dim)) - self._z_react * z.values

    def lower_order_3(self, y: Field) -> np.ndarray:
        gy = gradient(y)
        dim = self.grid.domain.dimension
        return sum(self._y_conv_line2[a] * gy[a].values for a in range(dim))

    def line1(self, y: Field, z: Field | None = None) -> Field:
        vals = dt(y).values + self.a1.values * laplacian(y).values + self.lower_order_1(y)
        return Field(self.grid, vals, "line1")

    def line2(self, y: Field, z: Field) -> Field:
        vals = (
            dt(z).values
            - self.a2.values * laplacian(z).values
            + self.lower_order_2(z)
            - self.kappa.values * self.v_coef.values * laplacian(y).values
            - self.lower_order_3(y)
        )
        return Field(self.grid, vals, "line2")

    # sparse space-time assembly ------------------------------------------------

    def _st_ops(self):
        g = self.grid
        key = ("st-ops",)
        if key not in g._mats:
            nsp = int(np.prod(g.n))
            eye_t = sp.identity(g.nt, format="csr")
            eye_sp = sp.identity(nsp, format="csr")
            if g.domain.dimension == 1:
                lap_sp = g.space_op("d2", 0)
                d1_sp = [g.space_op("d1", 0)]
            else:
                ey = [sp.identity(nk, format="csr") for nk in g.n]
                lap_sp = sp.kron(g.space_op("d2", 0), ey[1]) + sp.kron(ey[0], g.space_op("d2", 1))
                d1_sp = [
                    sp.kron(g.space_op("d1", 0), ey[1], format="csr"),
                    sp.kron(ey[0], g.space_op("d1", 1), format="csr"),
                ]
            g._mats[key] = {
                "Dt": sp.kron(g.time_op(), eye_sp, format="csr"),
                "Lap": sp.kron(eye_t, lap_sp, format="csr"),
                "D": [sp.kron(eye_t, d, format="csr") for d in d1_sp],
                "I": sp.identity(g.nt * nsp, format="csr"),
            }
        return g._mats[key]

    def assemble_blocks(self):
        """Sparse blocks (L1y, L2y, L2z) over flattened space-time nodes."""
        ops = self._st_ops()
        dim = self.grid.domain.dimension

        def dg(values):
            return sp.diags(values.ravel())

        L1y = ops["Dt"] + dg(self.a1.values) @ ops["Lap"] - dg(self.h.values)
        for a in range(dim):
            L1y = L1y - dg(0.5 * self.kappa.values * self.gu_sum[a].values) @ ops["D"][a]

        L2z = ops["Dt"] - dg(self.a2.values) @ ops["Lap"] - dg(self._z_react)
        for a in range(dim):
            L2z = L2z - dg(self._z_conv[a]) @ ops["D"][a]

        L2y = -dg(self.kappa.values * self.v_coef.values) @ ops["Lap"]
        for a in range(dim):
            L2y = L2y - dg(self._y_conv_line2[a]) @ ops["D"][a]
        return L1y.tocsr(), L2y.tocsr(), L2z.tocsr()


@dataclass(eq=False)
class DifferencePair:
    """Difference fields with their system, sources and measured diagnostics."""

    y: Field
    z: Field
    system: DifferenceSystem
    dF: Field
    dG: Field
    residual1: Field
    residual2: Field
    measured_c0: dict = dc_field(default_factory=dict)

    @property
    def grid(self) -> SpaceTimeGrid:
        return self.y.grid

    def residual_rms(self) -> dict[str, float]:
        mask = self.grid.interior_mask
        return {
            "line1": float(np.sqrt(np.mean(self.residual1.values[:, mask] ** 2))),
            "line2": float(np.sqrt(np.mean(self.residual2.values[:, mask] ** 2))),
        }

    def cauchy(self) -> CauchyData:
        return extract_cauchy(self.y, self.z)


def _ratio(numer: np.ndarray, f: Field) -> float:
    grads = gradient(f)
    denom = np.abs(f.values) + np.sqrt(sum(c.values**2 for c in grads))
    mask = denom > 1e-300
    if not np.any(mask):
        return 0.0
    return float(np.max(np.abs(numer[mask]) / denom[mask]))


def _pair_relative_residual(coeffs: MFGCoefficients, u: Field, v: Field, F: Field, G: Field) -> float:
    from .mfg import MFGProblem, solution_residuals

    prob = MFGProblem(coeffs, F, G, u.copy(), v.copy())
    res = solution_residuals(prob, u, v)
    mask = u.grid.interior_mask
    scale = max(
        float(np.sqrt(np.mean(dt(u).values[:, mask] ** 2))),
        float(np.sqrt(np.mean(dt(v).values[:, mask] ** 2))),
        float(np.sqrt(np.mean(F.values[:, mask] ** 2))),
        float(np.sqrt(np.mean(G.values[:, mask] ** 2))),
        1e-300,
    )
    return max(res["line1"], res["line2"]) / scale


def build_difference(
    u: Field,
    v: Field,
    u_t: Field,
    v_t: Field,
    coeffs: MFGCoefficients,
    F: Field | None = None,
    G: Field | None = None,
    F_t: Field | None = None,
    G_t: Field | None = None,
    solution_tol: float | None = 0.05,
) -> DifferencePair:
    """Form (y, z) = (u - u~, v - v~) and evaluate both difference lines.

    When sources are given, both input pairs are checked to solve the system
    within solution_tol (relative interior residual).  The measured
    lower-order ratios are recorded; their maximum is the empirical constant
    dominating the residual bounds.
    """
    grid = u.grid
    zeros = Field.zeros(grid)
    F = F if F is not None else zeros
    G = G if G is not None else zeros
    F_t = F_t if F_t is not None else F
    G_t = G_t if G_t is not None else G

    if solution_tol is not None:
        for tag, (uu, vv, ff, gg) in {
            "first": (u, v, F, G),
            "second": (u_t, v_t, F_t, G_t),
        }.items():
            rel = _pair_relative_residual(coeffs, uu, vv, ff, gg)
            if rel > solution_tol:
                raise GridError(
                    f"{tag} input pair does not solve the system: relative "
                    f"residual {rel:.3e} > {solution_tol:.1e}"
                )

    y = Field(grid, u.values - u_t.values, "y")
    z = Field(grid, v.values - v_t.values, "z")
    system = DifferenceSystem.from_pairs(coeffs, u, v, u_t, v_t)
    dF = Field(grid, F.values - F_t.values, "dF")
    dG = Field(grid, G.values - G_t.values, "dG")
    r1 = Field(grid, system.line1(y).values - dF.values, "res1")
    r2 = Field(grid, system.line2(y, z).values - dG.values, "res2")
    c0 = {
        "R1": _ratio(system.lower_order_1(y), y),
        "R2": _ratio(system.lower_order_2(z), z),
        "R3": _ratio(system.lower_order_3(y), y),
    }
    return DifferencePair(y, z, system, dF, dG, r1, r2, c0)


# -- mismatch constants and decay bound ---------------------------------------------


@dataclass(frozen=True)
class MismatchConstants:
    """Squared mismatch norms: m1 on the unobserved lateral part, m2 at the
    time-window ends."""

    m1: float
    m2: float

    def __post_init__(self):
        if self.m1 < 0 or self.m2 < 0:
            raise GridError("mismatch constants must be non-negative")


def compute_mismatch(pair: DifferencePair) -> MismatchConstants:
    """M1 = sum over k=0,1 of squared L2 norms of the k-th space-time
    gradients of (y, z) on (unobserved part) x I; M2 = squared H1 norms of the
    (y, z) slices at both window ends."""
    g = pair.grid
    m1 = 0.0
    for f in (pair.y, pair.z):
        grads = gradient(f)
        ft = dt(f)
        for face in g.domain.complement_faces():
            idx = (slice(None),) + g.face_index(face)
            integrand = f.values[idx] ** 2 + ft.values[idx] ** 2
            for c in grads:
                integrand = integrand + c.values[idx] ** 2
            m1 += g.integrate_face_time(integrand, face)
    m2 = 0.0
    for f in (pair.y, pair.z):
        grads = gradient(f)
        for j in (0, g.nt - 1):
            integrand = f.values[j] ** 2
            for c in grads:
                integrand = integrand + c.values[j] ** 2
            m2 += g.integrate_space(integrand)
    return MismatchConstants(m1, m2)


@dataclass
class BoundCurve:
    """The decay bound evaluated on a grid of s values."""

    s_values: np.ndarray
    values: np.ndarray

    @property
    def s_star(self) -> float:
        return float(self.s_values[int(np.argmin(self.values))])

    @property
    def min_value(self) -> float:
        return float(np.min(self.values))


def eval_bound(
    m: MismatchConstants, cfg: WeightConfig, c_emp: float, s_grid
) -> BoundCurve:
    """Decay bound C s^2 [M1 e^{-2s(mu2-1)} + M2 e^{-2s(mu2-mu1)}] over s_grid."""
    s = np.atleast_1d(np.asarray(s_grid, dtype=float))
    if s.size == 0:
        raise GridError("empty s grid for the decay bound")
    g1 = cfg.mu2 - 1.0
    g2 = cfg.mu2 - cfg.mu1
    vals = c_emp * s**2 * (m.m1 * np.exp(-2.0 * s * g1) + m.m2 * np.exp(-2.0 * s * g2))
    return BoundCurve(s, vals)


# -- window verification ---------------------------------------------------------


@dataclass
class UCVerdict:
    window_norm: float
    bound_min: float
    s_star: float
    slack: float
    passed: bool
    mismatch: MismatchConstants
    c_emp: float
    curve: BoundCurve

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status}: window_norm={self.window_norm:.6e} <= "
            f"bound_min={self.bound_min:.6e} (at s*={self.s_star:.4g}) "
            f"+ slack={self.slack:.3e}  [M1={self.mismatch.m1:.4e}, "
            f"M2={self.mismatch.m2:.4e}, C_emp={self.c_emp:.4g}]"
        )


def window_norm_sq(pair: DifferencePair, cfg: WeightConfig) -> float:
    """Unweighted squared L2 norm of (y, z) on the target subdomain crossed
    with the shrunken time window."""
    g = pair.grid
    t_sl = g.time_window_slice(cfg.r)
    sp_sl = g.core_slices()
    vals = pair.y.values**2 + pair.z.values**2
    return g.integrate_spacetime(vals, t_sl, sp_sl)


def gamma_trace_relative(pair: DifferencePair) -> float:
    """Sup of the (y, z) Cauchy traces on the observed part, relative to the
    pair's interior scale."""
    data = pair.cauchy()
    sup = max(data.gamma_sup(), data.companion.gamma_sup())
    scale = 0.0
    for f in (pair.y, pair.z):
        scale = max(scale, float(np.max(np.abs(f.values))))
        for c in gradient(f):
            scale = max(scale, float(np.max(np.abs(c.values))))
    if scale == 0.0:
        return 0.0
    return sup / scale


def uc_verify(
    pair: DifferencePair,
    cfg: WeightConfig,
    c_emp: float,
    s_grid,
    slack_coeff: float = 1.0,
    tol_gamma: float = 1e-10,
) -> UCVerdict:
    """Check the window norm against the decay bound plus discretization slack.

    Precondition: the pair's Cauchy data on the observed part vanish to
    relative tolerance tol_gamma.
    """
    rel = gamma_trace_relative(pair)
    if rel > tol_gamma:
        raise TraceError(
            f"observed-part Cauchy data are not zero: relative sup {rel:.3e} "
            f"exceeds tol_gamma={tol_gamma:.1e}"
        )
    g = pair.grid
    m = compute_mismatch(pair)
    curve = eval_bound(m, cfg, c_emp, s_grid)
    wn = window_norm_sq(pair, cfg)
    slack = slack_coeff * (max(g.h) ** 2 + g.tau)
    return UCVerdict(
        window_norm=wn,
        bound_min=curve.min_value,
        s_star=curve.s_star,
        slack=slack,
        passed=wn <= curve.min_value + slack,
        mismatch=m,
        c_emp=c_emp,
        curve=curve,
    )


# -- global-horizon sweep ----------------------------------------------------------


@dataclass
class T0SweepReport:
    t0_values: list[float]
    verdicts: list[UCVerdict]
    windows: list[tuple[float, float]]
    union: tuple[float, float] | None
    target: tuple[float, float]
    covered: bool

    @property
    def all_passed(self) -> bool:
        return all(v.passed for v in self.verdicts)


def sweep_t0(
    make_cell,
    T: float,
    delta: float,
    r: float,
    n_t0: int = 10,
    s_grid=None,
    c_emp: float = 1.0,
    slack_coeff: float = 1.0,
    tol_gamma: float = 1e-10,
) -> T0SweepReport:
    """Apply the window verification on centers spanning (delta, T - delta).

    make_cell(t0) must return (pair, cfg) for the window centered at t0.  The
    union of the shrunken windows is compared against the glued target
    interval ((1-r) delta, T - (1-r) delta).
    """
    if not T > 2 * delta:
        raise GridError(f"global horizon T={T} must exceed 2*delta={2 * delta}")
    if n_t0 < 1:
        raise GridError("n_t0 must be at least 1")
    s_values = np.linspace(1.0, 40.0, 40) if s_grid is None else s_grid
    t0s = (
        [0.5 * T]
        if n_t0 == 1
        else list(np.linspace(delta, T - delta, n_t0))
    )
    verdicts, windows = [], []
    for t0 in t0s:
        pair, cfg = make_cell(t0)
        verdicts.append(uc_verify(pair, cfg, c_emp, s_values, slack_coeff, tol_gamma))
        windows.append(cfg.window)

    union = _merge_intervals(windows)
    target = ((1.0 - r) * delta, T - (1.0 - r) * delta)
    tol = 1e-9 * T
    covered = (
        union is not None
        and union[0] <= target[0] + tol
        and union[1] >= target[1] - tol
    )
    return T0SweepReport(t0s, verdicts, windows, union, target, covered)


def _merge_intervals(windows: list[tuple[float, float]]) -> tuple[float, float] | None:
    """Union of overlapping intervals; None when the union is disconnected."""
    ivs = sorted(windows)
    lo, hi = ivs[0]
    for a, b in ivs[1:]:
        if a > hi + 1e-12:
            return None
        hi = max(hi, b)
    return (lo, hi)


# -- quasi-reversibility reconstruction ---------------------------------------------


@dataclass
class ReconstructionResult:
    y: Field
    z: Field
    j_value: float
    iterations: int
    history: list[float]


def default_rho(s: float) -> float:
    """Data-term penalty matching the s^4 scaling of the estimate's source."""
    return 1e3 * s**4


def qr_reconstruct(
    cauchy: CauchyData,
    dF: Field,
    dG: Field,
    system: DifferenceSystem,
    s: float,
    cfg: WeightConfig,
    rho: float | None = None,
    max_iter: int = 100000,
    tol: float = 1e-8,
) -> ReconstructionResult:
    """Minimize the weighted least-squares functional

        J(y, z) = || (line1(y) - dF) e^{s phi} ||^2
                + || (line2(y, z) - dG) e^{s phi} ||^2
                + rho || Cauchy mismatch on the observed part ||^2

    over all nodal values of (y, z), by conjugate gradients on the normal
    equations.  cauchy must carry the companion (z) traces.
    """
    from .carleman import check_overflow_guard

    g = dF.grid
    check_overflow_guard(s, cfg)
    if cauchy.companion is None:
        raise TraceError("reconstruction needs Cauchy data for both components")
    if rho is None:
        rho = default_rho(s)

    nsp = int(np.prod(g.n))
    N = g.nt * nsp
    L1y, L2y, L2z = system.assemble_blocks()

    # residual rows: interior spatial nodes at all time levels
    int_rows = np.tile(g.interior_mask.ravel(), g.nt)
    lp = g.log_phi_grid(cfg)
    w_carleman = np.exp(s * (np.exp(lp) - cfg.phi_max)).ravel()
    qw = (
        g.time_weights().reshape((-1,) + (1,) * g.domain.dimension)
        * g.space_weights()
    ).ravel()
    w_res = np.sqrt(qw) * w_carleman

    def rows(mat, mask, weights):
        W = sp.diags(weights[mask])
        return W @ mat[mask]

    zero_block = sp.csr_matrix((int(int_rows.sum()), N))
    A_blocks = [
        sp.hstack([rows(L1y, int_rows, w_res), zero_block]),
        sp.hstack([rows(L2y, int_rows, w_res), rows(L2z, int_rows, w_res)]),
    ]
    b_blocks = [
        (w_res * dF.values.ravel())[int_rows],
        (w_res * dG.values.ravel())[int_rows],
    ]

    # data rows: value and one-sided normal derivative on the observed faces
    eye_t = sp.identity(g.nt, format="csr")
    value_op = sp.identity(N, format="csr")
    for face in sorted(g.domain.gamma_faces):
        axis, _ = _FACE_AXIS_SIDE[face]
        if g.domain.dimension == 1:
            normal_sp = g.outward_sign(face) * g.space_op("d1", 0)
        else:
            ey = [sp.identity(nk, format="csr") for nk in g.n]
            d1 = g.space_op("d1", axis)
            normal_sp = g.outward_sign(face) * (
                sp.kron(d1, ey[1], format="csr") if axis == 0 else sp.kron(ey[0], d1, format="csr")
            )
        normal_op = sp.kron(eye_t, normal_sp, format="csr")
        face_mask = np.zeros(g.n, dtype=bool)
        face_mask[g.face_index(face)] = True
        rows_mask = np.tile(face_mask.ravel(), g.nt)
        w_face = np.sqrt(rho * qw)

        for comp, (vals_gamma, dnorm_gamma) in enumerate(
            (
                (cauchy.value_gamma[face], cauchy.dnormal_gamma[face]),
                (cauchy.companion.value_gamma[face], cauchy.companion.dnormal_gamma[face]),
            )
        ):
            blocks = [None, None]
            blocks[comp] = rows(value_op, rows_mask, w_face)
            blocks[1 - comp] = sp.csr_matrix((int(rows_mask.sum()), N))
            A_blocks.append(sp.hstack(blocks))
            b_blocks.append(w_face[rows_mask] * vals_gamma.ravel())

            blocks = [None, None]
            blocks[comp] = rows(normal_op, rows_mask, w_face)
            blocks[1 - comp] = sp.csr_matrix((int(rows_mask.sum()), N))
            A_blocks.append(sp.hstack(blocks))
            b_blocks.append(w_face[rows_mask] * dnorm_gamma.ravel())

    A = sp.vstack(A_blocks).tocsr()
    b = np.concatenate(b_blocks)

    # Column equilibration, then LSQR: the numerically stable realization of
    # conjugate gradients on the normal equations A^T A x = A^T b.
    col_norms = np.sqrt(np.asarray(A.multiply(A).sum(axis=0)).ravel())
    col_norms[col_norms == 0] = 1.0
    A_scaled = (A @ sp.diags(1.0 / col_norms)).tocsr()
    result = spla.lsqr(A_scaled, b, atol=tol, btol=tol, iter_lim=max_iter)
    x_scaled, istop, itn, r1norm = result[0], result[1], result[2], result[3]
    if istop == 7:
        raise ConvergenceError(
            f"normal-equation conjugate gradients (LSQR) did not converge within "
            f"{max_iter} iterations (residual norm {r1norm:.3e})",
            history=[float(r1norm)],
        )
    x = x_scaled / col_norms
    y = Field(g, x[:N].reshape(g.shape), "y_rec")
    z = Field(g, x[N:].reshape(g.shape), "z_rec")
    r = A @ x - b
    return ReconstructionResult(y, z, float(r @ r), int(itn), [float(r1norm)])


def perturb_cauchy(
    data: CauchyData,
    eta: float,
    rng: np.random.Generator,
    scale: float | None = None,
) -> CauchyData:
    """Additive Gaussian noise at level eta * scale on all observed traces.

    scale defaults to the largest observed trace magnitude; pass the
    underlying field scale explicitly when the traces themselves vanish."""
    if scale is None:
        scale = max(data.gamma_sup(), data.companion.gamma_sup() if data.companion else 0.0)
        if scale == 0.0:
            scale = 1.0

    def noisy(arr_dict):
        return {k: arr + eta * scale * rng.standard_normal(arr.shape) for k, arr in arr_dict.items()}

    def one(d: CauchyData) -> CauchyData:
        return CauchyData(
            grid=d.grid,
            value_gamma=noisy(d.value_gamma),
            dnormal_gamma=noisy(d.dnormal_gamma),
            slice_lo=d.slice_lo,
            slice_hi=d.slice_hi,
            slice_lo_grad=d.slice_lo_grad,
            slice_hi_grad=d.slice_hi_grad,
            value_comp=d.value_comp,
            grad_xt_comp=d.grad_xt_comp,
        )

    out = one(data)
    if data.companion is not None:
        out.companion = one(data.companion)
    return out


# -- analytic perturbed-pair experiments -----------------------------------------------


@dataclass(eq=False)
class PerturbationProfile:
    """C^2 ramp along the level sets of d, times a smooth time factor.

    The profile vanishes identically where d >= d_on (in particular on a
    neighborhood of the observed part, so the perturbed pair shares the base
    pair's Cauchy data exactly) and is largest on the unobserved face d = 0.
    """

    amplitude_y: float = 1e-2
    amplitude_z: float = 1e-2
    d_on: float = 0.5
    t_freq: float = 2.0
    t_phase: float = 0.3

    def ramp(self, dvals: np.ndarray) -> np.ndarray:
        xi = np.maximum(0.0, (self.d_on - dvals) / self.d_on)
        return xi**3

    def ramp_d1(self, dvals: np.ndarray) -> np.ndarray:
        xi = np.maximum(0.0, (self.d_on - dvals) / self.d_on)
        return -3.0 * xi**2 / self.d_on

    def ramp_d2(self, dvals: np.ndarray) -> np.ndarray:
        xi = np.maximum(0.0, (self.d_on - dvals) / self.d_on)
        return 6.0 * xi / self.d_on**2

    def tfac(self, t, shift: float = 0.0):
        return 1.0 + 0.5 * np.cos(self.t_freq * t + self.t_phase + shift)

    def tfac_d1(self, t, shift: float = 0.0):
        return -0.5 * self.t_freq * np.sin(self.t_freq * t + self.t_phase + shift)


@dataclass(eq=False)
class PerturbedPairExperiment:
    """Two closed-form solution pairs sharing Cauchy data on the observed part.

    The second pair is the catalogue pair minus an analytic perturbation
    supported away from the observed part; its sources follow by exact
    substitution.  With sources="discrete" the difference sources are the
    discrete images of (y, z) under the difference operator (zero residual by
    construction); with sources="analytic" they are the continuum closed
    forms sampled on the grid (residual O(h^2 + tau^2)).
    """

    case: ManufacturedCase
    profile: PerturbationProfile = dc_field(default_factory=PerturbationProfile)
    epsilon_core: float = 0.25
    t_ref: float | None = None

    @classmethod
    def for_case(cls, case_id: str, **kw) -> "PerturbedPairExperiment":
        return cls(case=make_manufactured(case_id), **kw)

    def fields(self, grid: SpaceTimeGrid) -> tuple[Field, Field]:
        pr = self.profile
        w = pr.ramp(grid.d_values)
        tshape = (-1,) + (1,) * grid.domain.dimension
        gy = pr.tfac(grid.ts).reshape(tshape)
        gz = pr.tfac(grid.ts, shift=1.1).reshape(tshape)
        y = Field(grid, pr.amplitude_y * w[None] * gy, "y")
        z = Field(grid, pr.amplitude_z * w[None] * gz, "z")
        return y, z

    def build_pair(self, grid: SpaceTimeGrid, sources: str = "discrete") -> DifferencePair:
        t_ref = grid.t0 if self.t_ref is None else self.t_ref
        problem, u_star, v_star = self.case.build(grid, t_ref=t_ref)
        y, z = self.fields(grid)
        u_t = Field(grid, u_star.values - y.values, "u~")
        v_t = Field(grid, v_star.values - z.values, "v~")
        system = DifferenceSystem.from_pairs(problem.coeffs, u_star, v_star, u_t, v_t)
        if sources == "discrete":
            dF = system.line1(y).copy("dF")
            dG = system.line2(y, z).copy("dG")
        elif sources == "analytic":
            dF, dG = self.analytic_sources(grid, t_ref)
        else:
            raise GridError(f"sources must be 'discrete' or 'analytic', got {sources!r}")
        r1 = Field(grid, system.line1(y).values - dF.values, "res1")
        r2 = Field(grid, system.line2(y, z).values - dG.values, "res2")
        c0 = {
            "R1": _ratio(system.lower_order_1(y), y),
            "R2": _ratio(system.lower_order_2(z), z),
            "R3": _ratio(system.lower_order_3(y), y),
        }
        return DifferencePair(y, z, system, dF, dG, r1, r2, c0)

    def analytic_sources(self, grid: SpaceTimeGrid, t_ref: float) -> tuple[Field, Field]:
        """Continuum difference sources by exact substitution of the profile.

        Requires constant kappa/h/a1/a2 in the catalogue case and its
        closed-form derivatives.
        """
        case = self.case
        if case.grad_u_fns is None or case.grad_v_fns is None or case.lap_u_fn is None:
            raise GridError(f"case {case.case_id} has no closed-form derivatives")
        pr = self.profile
        g = grid
        dim = g.domain.dimension
        tshape = (-1,) + (1,) * dim
        t = g.ts.reshape(tshape)
        mesh = np.meshgrid(*g.xs, indexing="ij") if dim == 2 else [g.xs[0]]

        a1 = case.a1_fn(t, *mesh, t0=t_ref)
        a2 = case.a2_fn(t, *mesh, t0=t_ref)
        kappa = case.kappa_fn(t, *mesh, t0=t_ref)
        hco = case.h_fn(t, *mesh, t0=t_ref)
        if np.ptp(a2) > 1e-14 or np.ptp(kappa) > 1e-14:
            raise GridError(
                f"analytic sources require spatially constant a2 and kappa; "
                f"case {case.case_id} varies"
            )

        dvals = g.d_values[None]
        slope = np.asarray(g.d.slope)
        w, wp, wpp = pr.ramp(dvals), pr.ramp_d1(dvals), pr.ramp_d2(dvals)
        gy, gyp = pr.tfac(t), pr.tfac_d1(t)
        gz, gzp = pr.tfac(t, 1.1), pr.tfac_d1(t, 1.1)
        slope_sq = float(np.sum(slope**2))

        p = pr.amplitude_y * w * gy
        p_t = pr.amplitude_y * w * gyp
        p_lap = pr.amplitude_y * wpp * slope_sq * gy
        p_grad = [pr.amplitude_y * wp * sl * gy for sl in slope]
        q = pr.amplitude_z * w * gz
        q_t = pr.amplitude_z * w * gzp
        q_lap = pr.amplitude_z * wpp * slope_sq * gz
        q_grad = [pr.amplitude_z * wp * sl * gz for sl in slope]

        gu = [fn(t, *mesh, t0=t_ref) for fn in case.grad_u_fns]
        gv = [fn(t, *mesh, t0=t_ref) for fn in case.grad_v_fns]
        lap_u = case.lap_u_fn(t, *mesh, t0=t_ref)
        vstar = case.v_fn(t, *mesh, t0=t_ref)

        # line 1: dt p + a1 lap p - (kappa/2)(|grad u|^2 - |grad(u-p)|^2) - h p
        cross = sum(2.0 * gu[a] * p_grad[a] - p_grad[a] ** 2 for a in range(dim))
        dF = p_t + a1 * p_lap - 0.5 * kappa * cross - hco * p

        # line 2: dt q - a2 lap q - kappa [v* lap p + grad v* . grad p]
        #         - kappa [q lap(u-p) + grad q . grad(u-p)]
        term_v = vstar * p_lap + sum(gv[a] * p_grad[a] for a in range(dim))
        term_q = q * (lap_u - p_lap) + sum(q_grad[a] * (gu[a] - p_grad[a]) for a in range(dim))
        dG = q_t - a2 * q_lap - kappa * (term_v + term_q)

        shape = grid.shape
        return (
            Field(grid, np.broadcast_to(dF, shape).copy(), "dF"),
            Field(grid, np.broadcast_to(dG, shape).copy(), "dG"),
        )

    def fit_c_emp(
        self,
        grid: SpaceTimeGrid,
        cfg: WeightConfig,
        s_grid,
        workers: int = 1,
    ) -> tuple[float, CarlemanReport]:
        """Empirical constant from a coupled-estimate sweep on this pair."""
        pair = self.build_pair(grid, sources="discrete")
        report = sweep_s(
            "theorem2",
            {"y": pair.y, "z": pair.z, "dF": pair.dF, "dG": pair.dG, "system": pair.system},
            s_grid,
            cfg,
            workers=workers,
        )
        return report.c_emp, report

    def make_cell_factory(self, n, nt, lam=1.0, r_fraction=0.5, delta=0.25):
        """Cell builder for the window-center sweep over a global horizon."""

        def make_cell(t0: float):
            d = build_d(self.case.domain(self.epsilon_core))
            grid = SpaceTimeGrid(d, n, nt, t0, delta)
            cfg = make_weight_config(d, t0, delta, lam=lam, r_fraction=r_fraction)
            pair = self.build_pair(grid, sources="discrete")
            return pair, cfg

        return make_cell
