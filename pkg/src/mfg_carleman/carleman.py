"""Empirical evaluation of the weighted energy estimates.

For a single parabolic operator the estimate compares

    LHS  = int (1/s)(|df/dt|^2 + |lap f|^2) + s|grad f|^2 + s^3|f|^2  w
    RHS  = s^4 int |P_k f|^2 w  +  B(f),        w = exp(2 s phi),

and for the coupled difference system it compares the pair version with
source weight s|dF|^2 + |dG|^2 and boundary term s (B(y) + B(z)).  The
boundary functional B has three summands: an H1 norm on the observed lateral
part scaled by exp(C_B s), a constant-weight integral over the unobserved
lateral part scaled by s^3, and time-end slice integrals scaled by s^2 and
weighted at t0 - delta.

All weighted quantities are stored normalized by exp(-2 s max phi); the
LHS/RHS ratio is normalization-invariant.  "Verification" means the ratio
stays bounded over a sweep of s on a fixed grid, a necessary-condition check
rather than a proof.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import GridError, OverflowGuardError
from .geometry import _FACE_AXIS_SIDE, WeightConfig
from .grid import Field, SpaceTimeGrid, _apply_axis, dt, gradient, laplacian

GUARD_LOG_RANGE = 600.0


def max_usable_s(cfg: WeightConfig) -> float:
    """Largest s keeping the normalized weight within the guard range."""
    spread = cfg.phi_max - cfg.phi_min
    return GUARD_LOG_RANGE / (2.0 * spread)


def check_overflow_guard(s: float, cfg: WeightConfig) -> None:
    s_max = max_usable_s(cfg)
    if s > s_max:
        raise OverflowGuardError(
            f"s={s} exceeds the overflow guard; max usable s for this weight is "
            f"{s_max:.6g}",
            s_max=s_max,
        )


@dataclass(frozen=True)
class BoundaryFunctionalParams:
    """Knobs of the boundary functional B.

    c_b is the free constant inside exp(C_B s) of the first summand (the
    estimate never fixes it; with vanishing observed-part traces the summand
    is zero regardless).  complement_weight selects the verbatim constant
    exp(2s) weight on the unobserved part or the phi-weighted alternative.
    """

    c_b: float = 0.0
    include_gamma: bool = True
    include_complement: bool = True
    include_slices: bool = True
    complement_weight: str = "constant"

    def __post_init__(self):
        if self.c_b < 0:
            raise GridError(f"c_b must be non-negative, got {self.c_b}")
        if self.complement_weight not in ("constant", "phi"):
            raise GridError(f"complement_weight must be 'constant' or 'phi'")


DEFAULT_B_PARAMS = BoundaryFunctionalParams()


@dataclass
class CarlemanRow:
    """One s-point of a sweep; all weighted values share log_normalizer."""

    s: float
    lhs: float
    rhs_source: float
    b1: float
    b2: float
    b3: float
    ratio: float | None
    log_normalizer: float

    @property
    def b_total(self) -> float:
        return self.b1 + self.b2 + self.b3

    @property
    def rhs_total(self) -> float:
        return self.rhs_source + self.b_total


@dataclass
class CarlemanReport:
    """Sweep result with the fitted empirical constant.

    s_lo is the smallest swept s whose ratio reaches within 10% of the global
    maximum; c_emp is the maximum ratio (over s >= s_lo, which equals the
    global maximum by construction).  plateau_ok requires the last-quartile
    ratio maximum not to exceed the earlier maximum by more than 5%.
    """

    estimate: str
    rows: list[CarlemanRow] = dc_field(default_factory=list)

    @property
    def s_grid(self) -> np.ndarray:
        return np.array([r.s for r in self.rows])

    @property
    def ratios(self) -> np.ndarray:
        return np.array([math.nan if r.ratio is None else r.ratio for r in self.rows])

    @property
    def defined(self) -> np.ndarray:
        return np.array([r.ratio is not None for r in self.rows])

    @property
    def c_emp(self) -> float:
        vals = self.ratios[self.defined]
        if vals.size == 0:
            return math.nan
        return float(np.max(vals))

    @property
    def s_lo(self) -> float:
        vals, svals = self.ratios, self.s_grid
        target = 0.9 * self.c_emp
        for s, v, ok in zip(svals, vals, self.defined):
            if ok and v >= target:
                return float(s)
        return math.nan

    @property
    def plateau_ok(self) -> bool:
        vals, ok = self.ratios, self.defined
        n = len(vals)
        if n < 4 or not np.all(ok):
            return bool(np.all(ok))
        q = 3 * n // 4
        head, tail = np.max(vals[:q]), np.max(vals[q:])
        return bool(tail <= 1.05 * head)

    @property
    def all_finite(self) -> bool:
        vals = self.ratios[self.defined]
        return bool(np.all(np.isfinite(vals)))

    @property
    def verdict(self) -> bool:
        return self.all_finite and self.plateau_ok

    def to_csv_lines(self) -> list[str]:
        lines = ["s,lhs,rhs_source,B1,B2,B3,ratio,normalizer"]
        for r in self.rows:
            ratio = math.nan if r.ratio is None else r.ratio
            lines.append(
                ",".join(
                    format(v, ".17g")
                    for v in (r.s, r.lhs, r.rhs_source, r.b1, r.b2, r.b3, ratio, r.log_normalizer)
                )
            )
        return lines


# -- boundary functional --------------------------------------------------------


def _face_trace(values: np.ndarray, grid: SpaceTimeGrid, face: str) -> np.ndarray:
    return values[(slice(None),) + grid.face_index(face)]


def _h1_gamma(f: Field) -> float:
    """Squared H1 norm of the trace on the observed lateral part.

    On a face the norm carries the value, its time derivative and (in 2D) the
    tangential derivative along the face.
    """
    g = f.grid
    total = 0.0
    for face in g.domain.gamma_faces:
        tr = _face_trace(f.values, g, face)
        integrand = tr**2 + _apply_axis(g.time_op(), tr, 0) ** 2
        if g.domain.dimension == 2:
            axis, _ = _FACE_AXIS_SIDE[face]
            tang = g.space_op("d1", 1 - axis)
            integrand = integrand + _apply_axis(tang, tr, 1) ** 2
        total += g.integrate_face_time(integrand, face)
    return total


def eval_B(
    f: Field,
    s: float,
    cfg: WeightConfig,
    params: BoundaryFunctionalParams = DEFAULT_B_PARAMS,
) -> tuple[float, tuple[float, float, float]]:
    """Boundary functional B(f), normalized by exp(-2 s max phi).

    Returns (total, (B1, B2, B3)) with
      B1 = exp(C_B s) * ||f||^2_{H1(Gamma x I)},
      B2 = s^3 * int over (complement) x I of (|f|^2 + |grad_{x,t} f|^2) e^{2s},
      B3 = s^2 * int over the domain of the time-end values and spatial
           gradients weighted by e^{2 s phi(x, t0-delta)}.
    """
    g = f.grid
    g._check_cfg(cfg)
    check_overflow_guard(s, cfg)
    log_norm = 2.0 * s * cfg.phi_max

    b1 = b2 = b3 = 0.0
    if params.include_gamma:
        exponent = params.c_b * s - log_norm
        if exponent > GUARD_LOG_RANGE:
            raise OverflowGuardError(
                f"C_B={params.c_b} with s={s} overflows the normalized first "
                "boundary summand",
                s_max=max_usable_s(cfg),
            )
        b1 = math.exp(exponent) * _h1_gamma(f)

    if params.include_complement and g.domain.complement_faces():
        grads = gradient(f)
        ft = dt(f)
        lp = g.log_phi_grid(cfg)
        for face in g.domain.complement_faces():
            tr = _face_trace(f.values, g, face)
            integrand = tr**2 + _face_trace(ft.values, g, face) ** 2
            for c in grads:
                integrand = integrand + _face_trace(c.values, g, face) ** 2
            if params.complement_weight == "constant":
                w = math.exp(2.0 * s - log_norm)
                b2 += s**3 * w * g.integrate_face_time(integrand, face)
            else:
                w = np.exp(2.0 * s * np.exp(_face_trace(lp, g, face)) - log_norm)
                b2 += s**3 * g.integrate_face_time(integrand * w, face)

    if params.include_slices:
        grads = gradient(f)
        # phi at t0 - delta; by the evenness of phi this also covers t0 + delta.
        phi_slice = np.exp(cfg.lam * (g.d_values - cfg.beta * cfg.delta**2))
        w = np.exp(2.0 * s * phi_slice - log_norm)
        for j in (0, g.nt - 1):
            integrand = f.values[j] ** 2
            for c in grads:
                integrand = integrand + c.values[j] ** 2
            b3 += s**2 * g.integrate_space(integrand * w)

    return b1 + b2 + b3, (b1, b2, b3)


# -- estimate rows ---------------------------------------------------------------


def _weighted_qi(grid: SpaceTimeGrid, values: np.ndarray, s: float, cfg: WeightConfig) -> float:
    lp = grid.log_phi_grid(cfg)
    w = np.exp(2.0 * s * np.exp(lp) - 2.0 * s * cfg.phi_max)
    return grid.integrate_spacetime(values * w)


def eval_lemma1(
    k: int,
    f: Field,
    a: Field,
    s: float,
    cfg: WeightConfig,
    lower_order=None,
    params: BoundaryFunctionalParams = DEFAULT_B_PARAMS,
) -> CarlemanRow:
    """Single-operator estimate row at one value of s."""
    from .mfg import apply_P

    check_overflow_guard(s, cfg)
    g = f.grid
    grads = gradient(f)
    lhs_integrand = (
        (1.0 / s) * (dt(f).values ** 2 + laplacian(f).values ** 2)
        + s * sum(c.values**2 for c in grads)
        + s**3 * f.values**2
    )
    lhs = _weighted_qi(g, lhs_integrand, s, cfg)
    pf, _ = apply_P(k, a, f, lower_order)
    rhs_source = s**4 * _weighted_qi(g, pf.values**2, s, cfg)
    b_total, (b1, b2, b3) = eval_B(f, s, cfg, params)
    rhs = rhs_source + b_total
    ratio = lhs / rhs if rhs > 0 else None
    return CarlemanRow(s, lhs, rhs_source, b1, b2, b3, ratio, 2.0 * s * cfg.phi_max)


def eval_theorem2(
    y: Field,
    z: Field,
    dF: Field,
    dG: Field,
    system,
    s: float,
    cfg: WeightConfig,
    params: BoundaryFunctionalParams = DEFAULT_B_PARAMS,
    residual_tol: float = 1e-6,
) -> CarlemanRow:
    """Coupled-system estimate row at one value of s.

    system must expose line1(y, z) and line2(y, z) evaluating the two lines
    of the difference system; (y, z, dF, dG) must satisfy them discretely.
    The B columns hold the final RHS contributions s*(B_i(y) + B_i(z)).
    """
    check_overflow_guard(s, cfg)
    g = y.grid
    _check_difference_residual(system, y, z, dF, dG, residual_tol)

    grads_y = gradient(y)
    grads_z = gradient(z)
    lhs_integrand = (
        dt(y).values ** 2
        + laplacian(y).values ** 2
        + s**2 * sum(c.values**2 for c in grads_y)
        + s**4 * y.values**2
        + (1.0 / s) * (dt(z).values ** 2 + laplacian(z).values ** 2)
        + s * sum(c.values**2 for c in grads_z)
        + s**3 * z.values**2
    )
    lhs = _weighted_qi(g, lhs_integrand, s, cfg)
    rhs_source = _weighted_qi(g, s * dF.values**2 + dG.values**2, s, cfg)
    _, by = eval_B(y, s, cfg, params)
    _, bz = eval_B(z, s, cfg, params)
    b1, b2, b3 = (s * (a + b) for a, b in zip(by, bz))
    rhs = rhs_source + b1 + b2 + b3
    ratio = lhs / rhs if rhs > 0 else None
    return CarlemanRow(s, lhs, rhs_source, b1, b2, b3, ratio, 2.0 * s * cfg.phi_max)


def _check_difference_residual(system, y, z, dF, dG, tol):
    r1 = system.line1(y, z).values - dF.values
    r2 = system.line2(y, z).values - dG.values
    mask = y.grid.interior_mask
    scale = max(
        float(np.max(np.abs(dF.values))),
        float(np.max(np.abs(dG.values))),
        float(np.max(np.abs(system.line1(y, z).values))),
        float(np.max(np.abs(system.line2(y, z).values))),
        1e-300,
    )
    worst = max(float(np.max(np.abs(r1[:, mask]))), float(np.max(np.abs(r2[:, mask]))))
    if worst > tol * scale:
        raise GridError(
            f"(y, z) do not satisfy the difference system: relative interior "
            f"residual {worst / scale:.3e} exceeds tolerance {tol:.1e}"
        )


# -- sweeps -----------------------------------------------------------------------


def sweep_s(
    estimate: str,
    inputs: dict,
    s_grid,
    cfg: WeightConfig,
    params: BoundaryFunctionalParams = DEFAULT_B_PARAMS,
    workers: int = 1,
) -> CarlemanReport:
    """Evaluate an estimate over a grid of s values.

    estimate is one of 'lemma1-k1', 'lemma1-k2', 'theorem2'; inputs carries
    the per-estimate fields (f, a[, lower_order] or y, z, dF, dG, system).
    Per-s evaluations are independent; workers > 1 runs them in a thread pool
    with a deterministic, index-ordered reduction.
    """
    s_values = [float(s) for s in np.atleast_1d(np.asarray(s_grid, dtype=float))]
    if len(s_values) == 0:
        raise GridError("empty s grid")
    for s in s_values:
        check_overflow_guard(s, cfg)

    if estimate == "lemma1-k1":
        fn = lambda s: eval_lemma1(1, inputs["f"], inputs["a"], s, cfg,
                                   inputs.get("lower_order"), params)
    elif estimate == "lemma1-k2":
        fn = lambda s: eval_lemma1(2, inputs["f"], inputs["a"], s, cfg,
                                   inputs.get("lower_order"), params)
    elif estimate == "theorem2":
        fn = lambda s: eval_theorem2(
            inputs["y"], inputs["z"], inputs["dF"], inputs["dG"], inputs["system"],
            s, cfg, params, inputs.get("residual_tol", 1e-6),
        )
    else:
        raise GridError(
            f"unknown estimate {estimate!r}; valid: lemma1-k1, lemma1-k2, theorem2"
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(fn, s_values))
    else:
        rows = [fn(s) for s in s_values]
    return CarlemanReport(estimate, rows)


# -- helpers for inputs ------------------------------------------------------------


def reverse_time(f: Field) -> Field:
    """The field t -> f(x, 2 t0 - t) on the same (t0-symmetric) grid."""
    return Field(f.grid, f.values[::-1].copy(), f"rev({f.role})")


def bump_field(
    grid: SpaceTimeGrid,
    center: tuple[float, ...] | None = None,
    width: float = 0.3,
    t_width_frac: float = 0.7,
    amplitude: float = 1.0,
) -> Field:
    """Compactly supported C^2 bump, zero on the whole lateral boundary and at
    both time ends, so every boundary summand vanishes identically."""
    dim = grid.domain.dimension
    if center is None:
        center = tuple(0.5 * e for e in grid.domain.extents)

    def cut(xi):
        return np.maximum(0.0, 1.0 - xi**2) ** 3

    tshape = (-1,) + (1,) * dim
    t = grid.ts.reshape(tshape)
    xi_t = (t - grid.t0) / (t_width_frac * grid.delta)
    vals = amplitude * cut(xi_t)
    mesh = np.meshgrid(*grid.xs, indexing="ij") if dim == 2 else [grid.xs[0]]
    for c, m, e in zip(center, mesh, grid.domain.extents):
        w = min(width, 0.999 * min(c, e - c))
        vals = vals * cut((np.asarray(m) - c) / w)
    return Field(grid, np.broadcast_to(vals, grid.shape).copy(), "bump")
