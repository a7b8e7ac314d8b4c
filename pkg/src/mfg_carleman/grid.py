"""Uniform tensor grids on the space-time box, stencils, traces, quadrature.

Spatial stencils are second-order central in the interior with one-sided
second-order closures at the boundary; the time derivative is central in the
interior and first-order one-sided at the two ends.  All stencils exist once
as sparse one-dimensional matrices; field operations and the space-time
operator assembly used by the least-squares reconstruction share them, so the
two code paths are consistent by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.sparse as sp

from .errors import GridError, TraceError
from .geometry import _FACE_AXIS_SIDE, AffineD, DomainSpec, WeightConfig, log_phi

_REL_TOL = 1e-12


def d1_matrix(n: int, h: float) -> sp.csr_matrix:
    """First derivative: central interior, 3-point one-sided ends (order 2)."""
    if n < 3:
        raise GridError(f"first-derivative stencil needs >= 3 nodes, got {n}")
    m = sp.lil_matrix((n, n))
    for i in range(1, n - 1):
        m[i, i - 1] = -0.5 / h
        m[i, i + 1] = 0.5 / h
    m[0, 0], m[0, 1], m[0, 2] = -1.5 / h, 2.0 / h, -0.5 / h
    m[n - 1, n - 1], m[n - 1, n - 2], m[n - 1, n - 3] = 1.5 / h, -2.0 / h, 0.5 / h
    return m.tocsr()


def d2_matrix(n: int, h: float) -> sp.csr_matrix:
    """Second derivative: central interior, 4-point one-sided ends (3-point when n=3)."""
    if n < 3:
        raise GridError(f"second-derivative stencil needs >= 3 nodes, got {n}")
    m = sp.lil_matrix((n, n))
    h2 = h * h
    for i in range(1, n - 1):
        m[i, i - 1] = 1.0 / h2
        m[i, i] = -2.0 / h2
        m[i, i + 1] = 1.0 / h2
    if n >= 4:
        m[0, 0], m[0, 1], m[0, 2], m[0, 3] = 2.0 / h2, -5.0 / h2, 4.0 / h2, -1.0 / h2
        m[n - 1, n - 1], m[n - 1, n - 2] = 2.0 / h2, -5.0 / h2
        m[n - 1, n - 3], m[n - 1, n - 4] = 4.0 / h2, -1.0 / h2
    else:
        for i in (0, n - 1):
            m[i, 0], m[i, 1], m[i, 2] = 1.0 / h2, -2.0 / h2, 1.0 / h2
    return m.tocsr()


def dt_matrix(n: int, tau: float) -> sp.csr_matrix:
    """Time derivative: central interior, 2-point first-order ends."""
    if n < 3:
        raise GridError(f"time-derivative stencil needs >= 3 nodes, got {n}")
    m = sp.lil_matrix((n, n))
    for i in range(1, n - 1):
        m[i, i - 1] = -0.5 / tau
        m[i, i + 1] = 0.5 / tau
    m[0, 0], m[0, 1] = -1.0 / tau, 1.0 / tau
    m[n - 1, n - 1], m[n - 1, n - 2] = 1.0 / tau, -1.0 / tau
    return m.tocsr()


def _trapezoid_weights(n: int, h: float) -> np.ndarray:
    w = np.full(n, h)
    w[0] = w[-1] = 0.5 * h
    return w


def _apply_axis(mat: sp.csr_matrix, values: np.ndarray, axis: int) -> np.ndarray:
    moved = np.moveaxis(values, axis, 0)
    flat = moved.reshape(moved.shape[0], -1)
    out = np.asarray(mat @ flat).reshape(moved.shape)
    return np.moveaxis(out, 0, axis)


class SpaceTimeGrid:
    """Uniform tensor discretization of the space-time box.

    Spatial axes carry n[k] nodes over [0, extents[k]]; the time axis carries
    nt nodes over [t0 - delta, t0 + delta].  Node classification partitions
    spatial nodes into interior, observed-boundary, unobserved-boundary and
    (in 2D) corner nodes.  Instances are immutable after construction.
    """

    def __init__(self, d: AffineD, n: tuple[int, ...], nt: int, t0: float, delta: float):
        spec = d.spec
        if len(n) != spec.dimension:
            raise GridError(f"n={n} does not match dimension {spec.dimension}")
        if any(nk < 3 for nk in n) or nt < 3:
            raise GridError(f"need >= 3 nodes per axis, got n={n}, nt={nt}")
        if delta <= 0:
            raise GridError(f"delta must be positive, got {delta}")
        self.domain = spec
        self.d = d
        self.n = tuple(int(nk) for nk in n)
        self.nt = int(nt)
        self.t0 = float(t0)
        self.delta = float(delta)
        self.xs = tuple(np.linspace(0.0, e, nk) for e, nk in zip(spec.extents, self.n))
        self.ts = np.linspace(t0 - delta, t0 + delta, nt)
        self.h = tuple(ax[1] - ax[0] for ax in self.xs)
        self.tau = self.ts[1] - self.ts[0]
        self.shape = (self.nt, *self.n)

        mesh = np.meshgrid(*self.xs, indexing="ij") if spec.dimension == 2 else [self.xs[0]]
        self.d_values = np.asarray(d(*mesh), dtype=float)

        self._classify()
        self._sw = [_trapezoid_weights(nk, hk) for nk, hk in zip(self.n, self.h)]
        self._tw = _trapezoid_weights(self.nt, self.tau)
        self._mats: dict[tuple, sp.csr_matrix] = {}

    # -- stencil matrices ---------------------------------------------------

    def space_op(self, kind: str, axis: int) -> sp.csr_matrix:
        key = (kind, axis)
        if key not in self._mats:
            builder = d1_matrix if kind == "d1" else d2_matrix
            self._mats[key] = builder(self.n[axis], self.h[axis])
        return self._mats[key]

    def time_op(self) -> sp.csr_matrix:
        if ("dt",) not in self._mats:
            self._mats[("dt",)] = dt_matrix(self.nt, self.tau)
        return self._mats[("dt",)]

    # -- classification -----------------------------------------------------

    def _classify(self):
        dim = self.domain.dimension
        on_face = {}
        for face in self.domain.faces():
            axis, side = _FACE_AXIS_SIDE[face]
            mask = np.zeros(self.n, dtype=bool)
            idx = [slice(None)] * dim
            idx[axis] = -1 if side == 1 else 0
            mask[tuple(idx)] = True
            on_face[face] = mask
        any_face = np.zeros(self.n, dtype=bool)
        face_count = np.zeros(self.n, dtype=int)
        for mask in on_face.values():
            any_face |= mask
            face_count += mask
        self.on_face = on_face
        self.corner_mask = face_count >= 2
        gamma = np.zeros(self.n, dtype=bool)
        for face in self.domain.gamma_faces:
            gamma |= on_face[face]
        comp = np.zeros(self.n, dtype=bool)
        for face in self.domain.complement_faces():
            comp |= on_face[face]
        self.gamma_mask = gamma & ~self.corner_mask
        self.comp_mask = comp & ~self.corner_mask
        self.interior_mask = ~any_face
        counts = (
            self.interior_mask.sum()
            + self.gamma_mask.sum()
            + self.comp_mask.sum()
            + self.corner_mask.sum()
        )
        assert counts == int(np.prod(self.n)), "node classification must partition"

    # -- regions ------------------------------------------------------------

    def time_window_slice(self, r: float) -> slice:
        """Indices of time nodes with |t - t0| <= r*delta."""
        tol = _REL_TOL * self.delta
        inside = np.abs(self.ts - self.t0) <= r * self.delta + tol
        idx = np.nonzero(inside)[0]
        if idx.size == 0:
            raise GridError(f"time window with r={r} contains no grid nodes")
        return slice(int(idx[0]), int(idx[-1]) + 1)

    def core_slices(self, epsilon: float | None = None) -> tuple[slice, ...]:
        """Per-axis slices of the target subdomain {d >= epsilon}."""
        eps = self.domain.epsilon_core if epsilon is None else epsilon
        slope = self.d.slope
        axis = max(range(len(slope)), key=lambda k: abs(slope[k]))
        dvals_axis = self.d.offset + slope[axis] * self.xs[axis]
        tol = _REL_TOL * max(1.0, abs(self.d.d_max))
        inside = dvals_axis >= eps - tol
        idx = np.nonzero(inside)[0]
        if idx.size == 0:
            raise GridError(f"target subdomain at level {eps} contains no grid nodes")
        out = [slice(None)] * self.domain.dimension
        out[axis] = slice(int(idx[0]), int(idx[-1]) + 1)
        return tuple(out)

    def face_index(self, face: str) -> tuple:
        axis, side = _FACE_AXIS_SIDE[face]
        if axis >= self.domain.dimension:
            raise GridError(f"face {face} does not exist in dimension {self.domain.dimension}")
        idx = [slice(None)] * self.domain.dimension
        idx[axis] = -1 if side == 1 else 0
        return tuple(idx)

    def outward_sign(self, face: str) -> float:
        _, side = _FACE_AXIS_SIDE[face]
        return 1.0 if side == 1 else -1.0

    # -- quadrature ---------------------------------------------------------

    def space_weights(self, slices: tuple[slice, ...] | None = None) -> np.ndarray:
        """Tensor trapezoid weights over a (sub-)box of the spatial grid."""
        vecs = []
        for k in range(self.domain.dimension):
            sl = slices[k] if slices is not None else slice(None)
            nk = len(self.xs[k][sl])
            if nk < 2:
                raise GridError("integration sub-box is degenerate along an axis")
            vecs.append(_trapezoid_weights(nk, self.h[k]))
        if self.domain.dimension == 1:
            return vecs[0]
        return np.outer(vecs[0], vecs[1])

    def time_weights(self, t_slice: slice | None = None) -> np.ndarray:
        nk = len(self.ts[t_slice]) if t_slice is not None else self.nt
        if nk < 2:
            raise GridError("integration window is degenerate along the time axis")
        return _trapezoid_weights(nk, self.tau)

    def face_weights(self, face: str) -> np.ndarray | float:
        """dS weights on a closed face; a point in 1D carries unit weight."""
        if self.domain.dimension == 1:
            return 1.0
        axis, _ = _FACE_AXIS_SIDE[face]
        other = 1 - axis
        return _trapezoid_weights(self.n[other], self.h[other])

    def integrate_space(self, values: np.ndarray, slices: tuple[slice, ...] | None = None) -> float:
        sub = values[slices] if slices is not None else values
        return float(np.sum(sub * self.space_weights(slices)))

    def integrate_spacetime(
        self,
        values: np.ndarray,
        t_slice: slice | None = None,
        slices: tuple[slice, ...] | None = None,
    ) -> float:
        sub = values
        if t_slice is not None:
            sub = sub[t_slice]
        if slices is not None:
            sub = sub[(slice(None),) + slices]
        w_t = self.time_weights(t_slice)
        w_x = self.space_weights(slices)
        return float(np.sum(sub * w_t.reshape((-1,) + (1,) * self.domain.dimension) * w_x))

    def integrate_face_time(self, values_on_face: np.ndarray, face: str) -> float:
        """Integral over face x I of values sampled as (nt, face nodes)."""
        w_t = self.time_weights()
        w_f = self.face_weights(face)
        if self.domain.dimension == 1:
            return float(np.sum(values_on_face * w_t))
        return float(np.sum(values_on_face * w_t[:, None] * w_f[None, :]))

    # -- weight field ---------------------------------------------------------

    def log_phi_grid(self, cfg: WeightConfig) -> np.ndarray:
        """log phi at every space-time node, shape (nt, *n)."""
        self._check_cfg(cfg)
        tshape = (-1,) + (1,) * self.domain.dimension
        return np.asarray(
            log_phi(self.d_values[None], self.ts.reshape(tshape), cfg), dtype=float
        )

    def _check_cfg(self, cfg: WeightConfig):
        if not (
            math.isclose(cfg.t0, self.t0, rel_tol=0, abs_tol=1e-12)
            and math.isclose(cfg.delta, self.delta, rel_tol=0, abs_tol=1e-12)
        ):
            raise GridError(
                f"weight config window (t0={cfg.t0}, delta={cfg.delta}) does not match "
                f"grid window (t0={self.t0}, delta={self.delta})"
            )


@dataclass(eq=False)
class Field:
    """Nodal scalar values over a SpaceTimeGrid with a role tag."""

    grid: SpaceTimeGrid
    values: np.ndarray
    role: str = ""
    meta: dict = dc_field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise GridError(
                f"field values shape {self.values.shape} != grid shape {self.grid.shape}"
            )

    @classmethod
    def from_function(cls, grid: SpaceTimeGrid, fn, role: str = "") -> "Field":
        """Sample fn(t, *coords) on the grid (fn broadcasts over arrays)."""
        tshape = (-1,) + (1,) * grid.domain.dimension
        t = grid.ts.reshape(tshape)
        mesh = np.meshgrid(*grid.xs, indexing="ij") if grid.domain.dimension == 2 else [grid.xs[0]]
        vals = np.broadcast_to(np.asarray(fn(t, *mesh), dtype=float), grid.shape)
        return cls(grid, np.array(vals), role)

    @classmethod
    def zeros(cls, grid: SpaceTimeGrid, role: str = "") -> "Field":
        return cls(grid, np.zeros(grid.shape), role)

    @classmethod
    def constant(cls, grid: SpaceTimeGrid, value: float, role: str = "") -> "Field":
        return cls(grid, np.full(grid.shape, float(value)), role)

    def copy(self, role: str | None = None) -> "Field":
        return Field(self.grid, self.values.copy(), self.role if role is None else role)

    def __add__(self, other):
        return Field(self.grid, self.values + _vals(other), self.role)

    def __sub__(self, other):
        return Field(self.grid, self.values - _vals(other), self.role)

    def __mul__(self, other):
        return Field(self.grid, self.values * _vals(other), self.role)

    __rmul__ = __mul__

    def assert_finite(self, what: str = "field") -> "Field":
        if not np.all(np.isfinite(self.values)):
            raise GridError(f"{what} contains non-finite values")
        return self


def _vals(x):
    return x.values if isinstance(x, Field) else x


# -- differential operators ---------------------------------------------------


def gradient(f: Field) -> tuple[Field, ...]:
    """Spatial gradient components, one field per axis."""
    g = f.grid
    out = []
    for axis in range(g.domain.dimension):
        mat = g.space_op("d1", axis)
        vals = _apply_axis(mat, f.values, axis + 1)
        out.append(Field(g, vals, f"d{axis}({f.role})"))
    return tuple(out)


def laplacian(f: Field) -> Field:
    g = f.grid
    acc = np.zeros(g.shape)
    for axis in range(g.domain.dimension):
        acc += _apply_axis(g.space_op("d2", axis), f.values, axis + 1)
    return Field(g, acc, f"lap({f.role})")


def divergence(components: tuple[Field, ...] | list[Field]) -> Field:
    g = components[0].grid
    if len(components) != g.domain.dimension:
        raise GridError(
            f"divergence needs {g.domain.dimension} components, got {len(components)}"
        )
    acc = np.zeros(g.shape)
    for axis, comp in enumerate(components):
        acc += _apply_axis(g.space_op("d1", axis), comp.values, axis + 1)
    return Field(g, acc, "div")


def dt(f: Field) -> Field:
    g = f.grid
    return Field(g, _apply_axis(g.time_op(), f.values, 0), f"dt({f.role})")


def grad_norm_sq(f: Field) -> np.ndarray:
    return sum(c.values**2 for c in gradient(f))


# -- weighted quadrature -------------------------------------------------------

REGIONS = ("QI", "window", "gamma", "complement", "slices")


def weighted_integral(
    f: Field, s: float, cfg: WeightConfig, region: str = "QI"
) -> tuple[float, float]:
    """Integral of f * exp(2*s*phi) over a region, in normalized form.

    Returns (value, log_normalizer): the true integral is
    value * exp(log_normalizer) with log_normalizer = 2*s*max(phi).  Ratios of
    integrals computed at the same s are normalization-invariant.
    """
    g = f.grid
    g._check_cfg(cfg)
    log_norm = 2.0 * s * cfg.phi_max
    lp = g.log_phi_grid(cfg)
    w = np.exp(2.0 * s * np.exp(lp) - log_norm)
    if region == "QI":
        return g.integrate_spacetime(f.values * w), log_norm
    if region == "window":
        t_sl = g.time_window_slice(cfg.r)
        sp_sl = g.core_slices()
        return g.integrate_spacetime(f.values * w, t_sl, sp_sl), log_norm
    if region in ("gamma", "complement"):
        faces = g.domain.gamma_faces if region == "gamma" else g.domain.complement_faces()
        if not faces:
            raise GridError(f"region {region!r} is empty for this domain")
        total = 0.0
        for face in faces:
            idx = (slice(None),) + g.face_index(face)
            total += g.integrate_face_time((f.values * w)[idx], face)
        return total, log_norm
    if region == "slices":
        # Both time-end slices, each weighted at its own time; phi is even
        # about t0 so this equals the weight at t0 - delta.
        total = 0.0
        for j in (0, g.nt - 1):
            total += g.integrate_space(f.values[j] * w[j])
        return total, log_norm
    raise GridError(f"unknown region {region!r}; valid: {REGIONS}")


# -- traces --------------------------------------------------------------------


@dataclass(eq=False)
class CauchyData:
    """Boundary and time-slice traces of a scalar field.

    value/dnormal on the observed faces are the lateral Cauchy data; the
    time-end slices carry values and spatial gradients; the unobserved-face
    traces (value plus full space-time gradient) feed the mismatch constants.
    A companion instance holds the second component of a solution pair.
    """

    grid: SpaceTimeGrid
    value_gamma: dict[str, np.ndarray]
    dnormal_gamma: dict[str, np.ndarray]
    slice_lo: np.ndarray
    slice_hi: np.ndarray
    slice_lo_grad: tuple[np.ndarray, ...]
    slice_hi_grad: tuple[np.ndarray, ...]
    value_comp: dict[str, np.ndarray]
    grad_xt_comp: dict[str, tuple[np.ndarray, ...]]
    companion: "CauchyData | None" = None

    def gamma_sup(self) -> float:
        """Max absolute Cauchy trace over the observed part."""
        vals = [np.max(np.abs(a)) if a.size else 0.0 for a in self.value_gamma.values()]
        vals += [np.max(np.abs(a)) if a.size else 0.0 for a in self.dnormal_gamma.values()]
        return max(vals) if vals else 0.0


def extract_cauchy(f: Field, g: Field | None = None) -> CauchyData:
    """Traces of f (and optionally a companion g) on the grid's boundary parts."""
    gr = f.grid
    grads = gradient(f)
    ft = dt(f)

    value_gamma, dnormal_gamma = {}, {}
    for face in gr.domain.gamma_faces:
        axis, _ = _FACE_AXIS_SIDE[face]
        idx = (slice(None),) + gr.face_index(face)
        value_gamma[face] = f.values[idx].copy()
        dnormal_gamma[face] = gr.outward_sign(face) * grads[axis].values[idx]

    value_comp, grad_xt_comp = {}, {}
    for face in gr.domain.complement_faces():
        idx = (slice(None),) + gr.face_index(face)
        value_comp[face] = f.values[idx].copy()
        comps = [ft.values[idx]] + [c.values[idx] for c in grads]
        grad_xt_comp[face] = tuple(comps)

    data = CauchyData(
        grid=gr,
        value_gamma=value_gamma,
        dnormal_gamma=dnormal_gamma,
        slice_lo=f.values[0].copy(),
        slice_hi=f.values[-1].copy(),
        slice_lo_grad=tuple(c.values[0].copy() for c in grads),
        slice_hi_grad=tuple(c.values[-1].copy() for c in grads),
        value_comp=value_comp,
        grad_xt_comp=grad_xt_comp,
    )
    if g is not None:
        if g.grid is not gr:
            raise TraceError("companion field must live on the same grid")
        data.companion = extract_cauchy(g)
    return data


# -- serialization -------------------------------------------------------------


def save_field_csv(f: Field, path, header_comment: str = "") -> None:
    """Node-ordered CSV dump (time-major) with grid dimensions in the header."""
    dims = " ".join([f"nt={f.grid.nt}"] + [f"n{k+1}={nk}" for k, nk in enumerate(f.grid.n)])
    lines = []
    if header_comment:
        lines.append(f"# {header_comment}")
    lines.append(f"# grid: {dims}")
    lines.append("value")
    lines.extend(format(v, ".17g") for v in f.values.ravel())
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_field_values(path) -> np.ndarray:
    """Read back a flat Field CSV; returns the raw value array and leaves
    reshaping to the caller (the header records the grid dims)."""
    dims = None
    vals = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line.startswith("# grid:"):
                dims = [int(tok.split("=")[1]) for tok in line.split()[2:]]
            elif line and not line.startswith("#") and line != "value":
                vals.append(float(line))
    arr = np.asarray(vals)
    if dims:
        arr = arr.reshape(dims)
    return arr
