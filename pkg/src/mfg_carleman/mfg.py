"""Solver for the coupled value/density system on the time window.

The system couples a backward quasilinear equation for the value u with a
forward linear advection-diffusion equation for the density v:

    du/dt + a1 * lap(u) - (1/2) * kappa * |grad u|^2 - h * u = F
    dv/dt - lap(a2 * v) - div(kappa * v * grad u)            = G

u is marched implicitly backward from its terminal slice (the quadratic
gradient term is frozen and refined by an inner fixed-point loop), then v is
marched implicitly forward from its initial slice.  The value equation does
not involve v, so the coupling is one-directional.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import GridError, SolverError
from .geometry import DomainSpec
from .grid import (
    Field,
    SpaceTimeGrid,
    _apply_axis,
    divergence,
    dt,
    grad_norm_sq,
    gradient,
    laplacian,
)


@dataclass(eq=False)
class MFGCoefficients:
    """Coefficient fields; the diffusions must be strictly positive node-wise."""

    a1: Field
    a2: Field
    kappa: Field
    h: Field
    c0_estimate: float | None = None

    def __post_init__(self):
        if np.any(self.a1.values <= 0) or np.any(self.a2.values <= 0):
            raise SolverError("diffusion coefficients must be positive node-wise")

    @property
    def grid(self) -> SpaceTimeGrid:
        return self.a1.grid


@dataclass(eq=False)
class MFGProblem:
    """Sources plus lateral/terminal/initial data.

    u_data supplies the Dirichlet trace of u on the lateral boundary and the
    terminal slice; v_data supplies the lateral trace of v and the initial
    slice.  Storing full fields keeps corner data compatible automatically.
    """

    coeffs: MFGCoefficients
    F: Field
    G: Field
    u_data: Field
    v_data: Field

    @property
    def grid(self) -> SpaceTimeGrid:
        return self.coeffs.grid


def apply_P(k: int, a: Field, f: Field, lower_order=None) -> tuple[Field, float]:
    """Evaluate df/dt + (-1)^k * a * lap(f) + R(f) node-wise.

    lower_order, when given, is called as R(f, grads) -> ndarray and must be
    dominated by |f| + |grad f|; the measured ratio max |R|/(|f|+|grad f|) is
    returned for comparison against an assumed bound.
    """
    if k not in (1, 2):
        raise SolverError(f"k must be 1 or 2, got {k}")
    sign = -1.0 if k == 1 else 1.0
    grads = gradient(f)
    vals = dt(f).values + sign * a.values * laplacian(f).values
    ratio = 0.0
    if lower_order is not None:
        r = np.asarray(lower_order(f, grads), dtype=float)
        denom = np.abs(f.values) + np.sqrt(sum(c.values**2 for c in grads))
        mask = denom > 1e-300
        if np.any(mask):
            ratio = float(np.max(np.abs(r[mask]) / denom[mask]))
        if np.any(~mask & (np.abs(r) > 0)):
            ratio = math.inf
        vals = vals + r
    return Field(f.grid, vals, f"P{k}({f.role})"), ratio


# -- spatial operator assembly ------------------------------------------------


class _SpatialOps:
    """Flattened spatial stencil matrices with boundary rows split off."""

    def __init__(self, grid: SpaceTimeGrid):
        self.grid = grid
        dim = grid.domain.dimension
        eyes = [sp.identity(nk, format="csr") for nk in grid.n]
        if dim == 1:
            self.lap_parts = [grid.space_op("d2", 0)]
            self.d1_parts = [grid.space_op("d1", 0)]
        else:
            self.lap_parts = [
                sp.kron(grid.space_op("d2", 0), eyes[1], format="csr"),
                sp.kron(eyes[0], grid.space_op("d2", 1), format="csr"),
            ]
            self.d1_parts = [
                sp.kron(grid.space_op("d1", 0), eyes[1], format="csr"),
                sp.kron(eyes[0], grid.space_op("d1", 1), format="csr"),
            ]
        self.lap = sum(self.lap_parts[1:], self.lap_parts[0])
        self.nspace = int(np.prod(grid.n))
        interior = grid.interior_mask.ravel()
        self.interior = interior
        self.boundary = ~interior
        self.P_int = sp.diags(interior.astype(float), format="csr")
        self.P_bnd = sp.diags((~interior).astype(float), format="csr")

    def assemble(self, react: np.ndarray, diff: np.ndarray, conv: list[np.ndarray] | None):
        """A = diag(react) + diag(diff) @ lap + sum diag(conv[i]) @ d1[i], with
        identity rows on the boundary."""
        A = sp.diags(react.ravel()) + sp.diags(diff.ravel()) @ self.lap
        if conv is not None:
            for c, D in zip(conv, self.d1_parts):
                A = A + sp.diags(c.ravel()) @ D
        return (self.P_int @ A + self.P_bnd).tocsc()


def _slice_grad_sq(grid: SpaceTimeGrid, slice_vals: np.ndarray) -> np.ndarray:
    out = np.zeros_like(slice_vals)
    for axis in range(grid.domain.dimension):
        out += _apply_axis(grid.space_op("d1", axis), slice_vals, axis) ** 2
    return out


class _FactorCache:
    """Reuse the LU factorization while the assembled matrix is unchanged."""

    def __init__(self):
        self.key = None
        self.solve = None

    def get(self, A: sp.csc_matrix, key_arrays: tuple[np.ndarray, ...]):
        key = tuple(arr.tobytes() for arr in key_arrays)
        if key != self.key:
            try:
                self.solve = spla.factorized(A)
            except RuntimeError as exc:
                raise SolverError(f"singular time-step system: {exc}") from exc
            self.key = key
        return self.solve


def solve_u(problem: MFGProblem, max_inner: int = 30, tol_inner: float = 1e-10) -> Field:
    """Backward implicit march for the value u from its terminal slice.

    The |grad u|^2 term is frozen at the previous iterate and refined by a
    fixed-point loop of at most max_inner sweeps per step; non-convergence
    raises with the last update size attached.
    """
    grid = problem.grid
    ops = _SpatialOps(grid)
    co = problem.coeffs
    tau = grid.tau
    u = np.empty(grid.shape)
    u[-1] = problem.u_data.values[-1]
    cache = _FactorCache()
    inner_used = 0
    bnd = ops.boundary

    for j in range(grid.nt - 2, -1, -1):
        a1j = co.a1.values[j].ravel()
        hj = co.h.values[j].ravel()
        kj = co.kappa.values[j]
        react = 1.0 / tau + hj
        A = ops.assemble(react, -a1j, None)
        solve = cache.get(A, (a1j, hj))
        rhs_base = u[j + 1].ravel() / tau - problem.F.values[j].ravel()
        bvals = problem.u_data.values[j].ravel()

        guess = u[j + 1].copy()
        if not np.any(kj):
            rhs = rhs_base.copy()
            rhs[bnd] = bvals[bnd]
            u[j] = solve(rhs).reshape(grid.n)
            inner_used = max(inner_used, 1)
            continue

        converged = False
        change = math.inf
        for m in range(max_inner):
            gsq = _slice_grad_sq(grid, guess)
            rhs = rhs_base - 0.5 * (kj * gsq).ravel()
            rhs[bnd] = bvals[bnd]
            new = solve(rhs).reshape(grid.n)
            change = float(np.max(np.abs(new - guess)))
            guess = new
            if not np.isfinite(change):
                break
            if change <= tol_inner * (1.0 + float(np.max(np.abs(new)))):
                converged = True
                inner_used = max(inner_used, m + 1)
                break
        if not converged:
            raise SolverError(
                f"inner fixed-point iteration did not converge at time level {j} "
                f"(last update {change:.3e} after {max_inner} sweeps)",
                residual=change,
            )
        u[j] = guess

    out = Field(grid, u, "u").assert_finite("value solution")
    res = _line1_residual(problem, out)
    out.meta["residual_l2"] = _interior_rms(grid, res)
    out.meta["inner_iters_max"] = inner_used
    return out


def solve_v(problem: MFGProblem, u: Field) -> Field:
    """Forward implicit march for the density v given the solved value u.

    lap(a2*v) is expanded by the product rule and div(kappa*v*grad u) into
    convection/reaction terms, all treated implicitly.
    """
    grid = problem.grid
    if u.grid is not grid:
        raise GridError("u must live on the problem grid")
    ops = _SpatialOps(grid)
    co = problem.coeffs
    tau = grid.tau
    dim = grid.domain.dimension

    grad_a2 = gradient(co.a2)
    lap_a2 = laplacian(co.a2)
    grad_k = gradient(co.kappa)
    grad_u = gradient(u)
    lap_u = laplacian(u)

    v = np.empty(grid.shape)
    v[0] = problem.v_data.values[0]
    cache = _FactorCache()
    bnd = ops.boundary

    for j in range(grid.nt - 1):
        jn = j + 1
        a2j = co.a2.values[jn]
        kj = co.kappa.values[jn]
        conv = [
            -(2.0 * grad_a2[ax].values[jn] + kj * grad_u[ax].values[jn]).ravel()
            for ax in range(dim)
        ]
        react_field = (
            lap_a2.values[jn]
            + kj * lap_u.values[jn]
            + sum(grad_k[ax].values[jn] * grad_u[ax].values[jn] for ax in range(dim))
        )
        react = 1.0 / tau - react_field.ravel()
        A = ops.assemble(react, -a2j.ravel(), conv)
        solve = cache.get(A, (react, a2j.ravel(), *conv))
        rhs = v[j].ravel() / tau + problem.G.values[jn].ravel()
        rhs[bnd] = problem.v_data.values[jn].ravel()[bnd]
        v[jn] = solve(rhs).reshape(grid.n)

    out = Field(grid, v, "v").assert_finite("density solution")
    res = _line2_residual(problem, u, out)
    out.meta["residual_l2"] = _interior_rms(grid, res)
    return out


def _line1_residual(problem: MFGProblem, u: Field) -> np.ndarray:
    co = problem.coeffs
    return (
        dt(u).values
        + co.a1.values * laplacian(u).values
        - 0.5 * co.kappa.values * grad_norm_sq(u)
        - co.h.values * u.values
        - problem.F.values
    )


def _line2_residual(problem: MFGProblem, u: Field, v: Field) -> np.ndarray:
    co = problem.coeffs
    a2v = Field(v.grid, co.a2.values * v.values)
    flux = [
        Field(v.grid, co.kappa.values * v.values * c.values) for c in gradient(u)
    ]
    return (
        dt(v).values
        - laplacian(a2v).values
        - divergence(flux).values
        - problem.G.values
    )


def _interior_rms(grid: SpaceTimeGrid, residual: np.ndarray) -> float:
    vals = residual[:, grid.interior_mask]
    return float(np.sqrt(np.mean(vals**2)))


def solution_residuals(problem: MFGProblem, u: Field, v: Field) -> dict[str, float]:
    """Interior RMS residuals of both lines for a candidate solution pair."""
    return {
        "line1": _interior_rms(problem.grid, _line1_residual(problem, u)),
        "line2": _interior_rms(problem.grid, _line2_residual(problem, u, v)),
    }


# -- manufactured catalogue -----------------------------------------------------

PI = math.pi


@dataclass(eq=False)
class ManufacturedCase:
    """Closed-form solution pair with sources from exact substitution.

    grad_u_fns / lap_u_fn / grad_v_fns, when present, are the closed-form
    derivatives of the pair, used by experiments that need analytic
    difference sources.
    """

    case_id: str
    dimension: int
    u_fn: callable
    v_fn: callable
    F_fn: callable
    G_fn: callable
    a1_fn: callable
    a2_fn: callable
    kappa_fn: callable
    h_fn: callable
    gamma_faces: frozenset = dc_field(default_factory=lambda: frozenset({"left"}))
    grad_u_fns: tuple | None = None
    lap_u_fn: callable | None = None
    grad_v_fns: tuple | None = None

    def domain(self, epsilon_core: float = 0.25) -> DomainSpec:
        extents = (1.0,) if self.dimension == 1 else (1.0, 1.0)
        return DomainSpec(self.dimension, extents, self.gamma_faces, epsilon_core)

    def build(
        self,
        grid: SpaceTimeGrid,
        t_ref: float | None = None,
    ) -> tuple[MFGProblem, Field, Field]:
        t0 = grid.t0 if t_ref is None else t_ref

        def on(fn, role=""):
            return Field.from_function(grid, lambda t, *c: fn(t, *c, t0=t0), role)

        u_star = on(self.u_fn, "u*")
        v_star = on(self.v_fn, "v*")
        coeffs = MFGCoefficients(
            a1=on(self.a1_fn, "a1"),
            a2=on(self.a2_fn, "a2"),
            kappa=on(self.kappa_fn, "kappa"),
            h=on(self.h_fn, "h"),
        )
        problem = MFGProblem(
            coeffs=coeffs,
            F=on(self.F_fn, "F"),
            G=on(self.G_fn, "G"),
            u_data=u_star.copy("u_data"),
            v_data=v_star.copy("v_data"),
        )
        return problem, u_star, v_star


def _const(value):
    def fn(t, *coords, t0=0.0):
        return value * np.ones(np.broadcast(t, *coords).shape)

    return fn


# 1D closed forms (sources verified by exact symbolic substitution).
def _u1(t, x, t0=0.0):
    return np.exp(t - t0) * np.sin(PI * x)


def _v1(t, x, t0=0.0):
    return np.exp(-(t - t0)) * np.cos(PI * x / 2)


def _u1x(t, x, t0=0.0):
    return PI * np.exp(t - t0) * np.cos(PI * x)


def _u1lap(t, x, t0=0.0):
    return -(PI**2) * np.exp(t - t0) * np.sin(PI * x)


def _v1x(t, x, t0=0.0):
    return -(PI / 2) * np.exp(-(t - t0)) * np.sin(PI * x / 2)


def _F_linear(t, x, t0=0.0):
    return (1.0 - PI**2) * np.exp(t - t0) * np.sin(PI * x)


def _G_linear(t, x, t0=0.0):
    return (PI**2 / 4 - 1.0) * np.exp(-(t - t0)) * np.cos(PI * x / 2)


def _F_nonlinear(t, x, t0=0.0):
    E = np.exp(t - t0)
    return -(PI**2) * E * np.sin(PI * x) - 0.5 * PI**2 * E**2 * np.cos(PI * x) ** 2


def _G_nonlinear(t, x, t0=0.0):
    Em = np.exp(-(t - t0))
    C2, S2 = np.cos(PI * x / 2), np.sin(PI * x / 2)
    C, S = np.cos(PI * x), np.sin(PI * x)
    return (-1.0 + PI**2 / 4) * Em * C2 + 0.5 * PI**2 * S2 * C + PI**2 * C2 * S


def _a2_varcoef(t, x, t0=0.0):
    return (1.0 + x / 2) * np.ones(np.broadcast(t, x).shape)


def _G_varcoef(t, x, t0=0.0):
    Em = np.exp(-(t - t0))
    C2, S2 = np.cos(PI * x / 2), np.sin(PI * x / 2)
    C, S = np.cos(PI * x), np.sin(PI * x)
    return (
        -Em * C2
        + (1.0 + x / 2) * PI**2 / 4 * Em * C2
        + PI / 2 * Em * S2
        + 0.5 * PI**2 * S2 * C
        + PI**2 * C2 * S
    )


# 2D closed forms.
def _u2(t, x, y, t0=0.0):
    return np.exp(t - t0) * np.sin(PI * x) * np.sin(PI * y)


def _v2(t, x, y, t0=0.0):
    return np.exp(-(t - t0)) * np.cos(PI * x / 2) * np.cos(PI * y / 2)


def _u2x(t, x, y, t0=0.0):
    return PI * np.exp(t - t0) * np.cos(PI * x) * np.sin(PI * y)


def _u2y(t, x, y, t0=0.0):
    return PI * np.exp(t - t0) * np.sin(PI * x) * np.cos(PI * y)


def _u2lap(t, x, y, t0=0.0):
    return -2.0 * PI**2 * np.exp(t - t0) * np.sin(PI * x) * np.sin(PI * y)


def _v2x(t, x, y, t0=0.0):
    return -(PI / 2) * np.exp(-(t - t0)) * np.sin(PI * x / 2) * np.cos(PI * y / 2)


def _v2y(t, x, y, t0=0.0):
    return -(PI / 2) * np.exp(-(t - t0)) * np.cos(PI * x / 2) * np.sin(PI * y / 2)


def _F_2d(t, x, y, t0=0.0):
    E = np.exp(t - t0)
    S, C = np.sin(PI * x), np.cos(PI * x)
    Sy, Cy = np.sin(PI * y), np.cos(PI * y)
    u = E * S * Sy
    return -2.0 * PI**2 * u - 0.5 * PI**2 * E**2 * (C**2 * Sy**2 + S**2 * Cy**2)


def _G_2d(t, x, y, t0=0.0):
    Em = np.exp(-(t - t0))
    S, C = np.sin(PI * x), np.cos(PI * x)
    Sy, Cy = np.sin(PI * y), np.cos(PI * y)
    S2, C2 = np.sin(PI * x / 2), np.cos(PI * x / 2)
    S2y, C2y = np.sin(PI * y / 2), np.cos(PI * y / 2)
    v = Em * C2 * C2y
    return (
        -v
        + 0.5 * PI**2 * v
        + 0.5 * PI**2 * (S2 * C2y * C * Sy + C2 * S2y * S * Cy)
        + 2.0 * PI**2 * C2 * C2y * S * Sy
    )


_CATALOGUE = {
    "zero": ManufacturedCase(
        "zero", 1, _const(0.0), _const(0.0), _const(0.0), _const(0.0),
        _const(1.0), _const(1.0), _const(0.0), _const(0.0),
        grad_u_fns=(_const(0.0),), lap_u_fn=_const(0.0), grad_v_fns=(_const(0.0),),
    ),
    "1d-linear": ManufacturedCase(
        "1d-linear", 1, _u1, _v1, _F_linear, _G_linear,
        _const(1.0), _const(1.0), _const(0.0), _const(0.0),
        grad_u_fns=(_u1x,), lap_u_fn=_u1lap, grad_v_fns=(_v1x,),
    ),
    "1d-nonlinear": ManufacturedCase(
        "1d-nonlinear", 1, _u1, _v1, _F_nonlinear, _G_nonlinear,
        _const(1.0), _const(1.0), _const(1.0), _const(1.0),
        grad_u_fns=(_u1x,), lap_u_fn=_u1lap, grad_v_fns=(_v1x,),
    ),
    "1d-varcoef": ManufacturedCase(
        "1d-varcoef", 1, _u1, _v1, _F_nonlinear, _G_varcoef,
        _const(1.0), _a2_varcoef, _const(1.0), _const(1.0),
        grad_u_fns=(_u1x,), lap_u_fn=_u1lap, grad_v_fns=(_v1x,),
    ),
    "2d-smooth": ManufacturedCase(
        "2d-smooth", 2, _u2, _v2, _F_2d, _G_2d,
        _const(1.0), _const(1.0), _const(1.0), _const(1.0),
        gamma_faces=frozenset({"left", "bottom", "top"}),
        grad_u_fns=(_u2x, _u2y), lap_u_fn=_u2lap, grad_v_fns=(_v2x, _v2y),
    ),
}


def manufactured_ids() -> tuple[str, ...]:
    return tuple(sorted(_CATALOGUE))


def make_manufactured(case_id: str) -> ManufacturedCase:
    """Catalogue lookup; unknown ids raise with the known ids listed."""
    try:
        return _CATALOGUE[case_id]
    except KeyError:
        raise SolverError(
            f"unknown manufactured case {case_id!r}; known: {manufactured_ids()}"
        ) from None
