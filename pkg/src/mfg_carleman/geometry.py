"""Domains, the auxiliary distance-like function d, and the space-time weight.

The weight is phi(x, t) = exp(lam * (d(x) - beta * (t - t0)^2)) on a box
domain crossed with the time window (t0 - delta, t0 + delta).  d is affine,
positive inside the domain, vanishes on the unobserved boundary part, and has
non-positive outward normal derivative there.  All scalar parameters
(r, beta, mu1, mu2) are selected subject to the two constraints that make the
weight extremes satisfy mu2 > max(1, mu1):

    0 < r < sqrt(d0 / d1)
    (d1 - d0) / (delta^2 - r^2 delta^2) < beta < d0 / (r^2 delta^2)

with d0 the level defining the target subdomain and d1 the maximum of d.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConstraintError, GeometryError

FACES_1D = ("left", "right")
FACES_2D = ("left", "right", "bottom", "top")

# Face -> (axis, side); side 0 = lower end of that axis, 1 = upper end.
_FACE_AXIS_SIDE = {"left": (0, 0), "right": (0, 1), "bottom": (1, 0), "top": (1, 1)}


@dataclass(frozen=True)
class DomainSpec:
    """Box domain with a designated observed subboundary.

    gamma_faces lists the whole faces forming the observed part Gamma; the
    remaining faces form the unobserved part.  epsilon_core is the level eps
    defining the target subdomain {x : d(x) >= eps} on which interior
    smallness is asserted.
    """

    dimension: int
    extents: tuple[float, ...]
    gamma_faces: frozenset[str]
    epsilon_core: float

    def __post_init__(self):
        if self.dimension not in (1, 2):
            raise GeometryError(f"dimension must be 1 or 2, got {self.dimension}")
        if len(self.extents) != self.dimension:
            raise GeometryError(
                f"extents {self.extents} do not match dimension {self.dimension}"
            )
        if any(not (e > 0 and math.isfinite(e)) for e in self.extents):
            raise GeometryError(f"extents must be positive and finite, got {self.extents}")
        faces = self.faces()
        if not self.gamma_faces:
            raise GeometryError("gamma_faces must be non-empty")
        unknown = set(self.gamma_faces) - set(faces)
        if unknown:
            raise GeometryError(f"unknown faces {sorted(unknown)}; valid: {faces}")
        if not self.epsilon_core > 0:
            raise GeometryError(f"epsilon_core must be positive, got {self.epsilon_core}")

    def faces(self) -> tuple[str, ...]:
        return FACES_1D if self.dimension == 1 else FACES_2D

    def complement_faces(self) -> tuple[str, ...]:
        return tuple(f for f in self.faces() if f not in self.gamma_faces)


@dataclass(frozen=True)
class DCheckReport:
    """Discrete verification of the four admissibility conditions for d."""

    positive_inside: bool
    gradient_nonvanishing: bool
    zero_on_complement: bool
    normal_derivative_nonpositive: bool
    n_check: int

    @property
    def passed(self) -> bool:
        return (
            self.positive_inside
            and self.gradient_nonvanishing
            and self.zero_on_complement
            and self.normal_derivative_nonpositive
        )


@dataclass(frozen=True)
class AffineD:
    """Affine auxiliary function d(x) = offset + slope . x with its check report."""

    spec: DomainSpec
    offset: float
    slope: tuple[float, ...]
    check: DCheckReport = field(compare=False)

    def __call__(self, *coords: np.ndarray | float) -> np.ndarray | float:
        if len(coords) != self.spec.dimension:
            raise GeometryError(
                f"expected {self.spec.dimension} coordinate arrays, got {len(coords)}"
            )
        out = self.offset
        for c, s in zip(coords, self.slope):
            out = out + s * np.asarray(c)
        return out

    @property
    def grad_norm(self) -> float:
        return math.hypot(*self.slope)

    @property
    def d_max(self) -> float:
        """Maximum of d over the closed box (attained at a corner)."""
        corners = [(0.0, e) for e in self.spec.extents]
        best = -math.inf
        for idx in np.ndindex(*(2,) * self.spec.dimension):
            val = self.offset + sum(s * corners[k][i] for k, (s, i) in enumerate(zip(self.slope, idx)))
            best = max(best, val)
        return best


def build_d(spec: DomainSpec, n_check: int = 101) -> AffineD:
    """Construct the affine d for a supported domain/Gamma configuration.

    Supported: 1D with Gamma a single endpoint; 2D with the unobserved part a
    single face.  Every other configuration would force an affine d to vanish
    on two non-parallel faces, degenerating its gradient, so it is rejected.
    """
    comp = spec.complement_faces()
    if len(comp) != 1:
        raise GeometryError(
            "no admissible affine d: the unobserved boundary part must be a single "
            f"face, got {comp or '(empty)'} for gamma_faces={sorted(spec.gamma_faces)}"
        )
    axis, side = _FACE_AXIS_SIDE[comp[0]]
    if axis >= spec.dimension:
        raise GeometryError(f"face {comp[0]} does not exist in dimension {spec.dimension}")
    extent = spec.extents[axis]
    slope = [0.0] * spec.dimension
    if side == 1:
        # d = extent - x_axis, vanishing on the upper face.
        offset = extent
        slope[axis] = -1.0
    else:
        offset = 0.0
        slope[axis] = 1.0
    d = AffineD(spec, offset, tuple(slope), _check_d(spec, offset, tuple(slope), n_check))
    if not d.check.passed:
        raise GeometryError(f"no admissible affine d: discrete check failed: {d.check}")
    if not spec.epsilon_core < d.d_max:
        raise GeometryError(
            f"epsilon_core={spec.epsilon_core} must lie strictly below max d={d.d_max}"
        )
    return d


def _check_d(spec: DomainSpec, offset: float, slope: tuple[float, ...], n: int) -> DCheckReport:
    axes = [np.linspace(0.0, e, n) for e in spec.extents]
    if spec.dimension == 1:
        pts = [axes[0][1:-1]]
        dvals = offset + slope[0] * pts[0]
        positive = bool(np.all(dvals > 0))
    else:
        xx, yy = np.meshgrid(axes[0][1:-1], axes[1][1:-1], indexing="ij")
        positive = bool(np.all(offset + slope[0] * xx + slope[1] * yy > 0))

    grad_ok = math.hypot(*slope) > 0

    zero_ok = True
    normal_ok = True
    for face in spec.complement_faces():
        axis, side = _FACE_AXIS_SIDE[face]
        fixed = spec.extents[axis] if side == 1 else 0.0
        if spec.dimension == 1:
            face_vals = np.array([offset + slope[0] * fixed])
        else:
            other = axes[1 - axis]
            face_vals = offset + slope[axis] * fixed + slope[1 - axis] * other
        zero_ok = zero_ok and bool(np.all(np.abs(face_vals) <= 1e-14))
        nu_dot = slope[axis] * (1.0 if side == 1 else -1.0)
        normal_ok = normal_ok and nu_dot <= 1e-14
    return DCheckReport(positive, grad_ok, zero_ok, normal_ok, n)


@dataclass(frozen=True)
class BetaSelection:
    """Chosen exponent beta with its admissible open interval and margins."""

    beta: float
    lower: float
    upper: float

    @property
    def margins(self) -> tuple[float, float]:
        return (self.beta - self.lower, self.upper - self.beta)

    @property
    def strict(self) -> bool:
        return self.lower < self.beta < self.upper


def select_r(d0: float, d1: float, fraction: float = 0.5) -> float:
    """Pick r = fraction * sqrt(d0/d1), strictly inside (0, sqrt(d0/d1))."""
    if not (0 < d0 <= d1):
        raise GeometryError(f"need 0 < d0 <= d1, got d0={d0}, d1={d1}")
    if not (0 < fraction < 1):
        raise GeometryError(f"fraction must lie in (0, 1), got {fraction}")
    return fraction * math.sqrt(d0 / d1)


def beta_interval(d0: float, d1: float, delta: float, r: float) -> tuple[float, float]:
    """Open admissible interval for beta; non-empty whenever r < sqrt(d0/d1)."""
    if not (0 < d0 <= d1):
        raise GeometryError(f"need 0 < d0 <= d1, got d0={d0}, d1={d1}")
    if not delta > 0:
        raise GeometryError(f"delta must be positive, got {delta}")
    if not (0 < r < math.sqrt(d0 / d1)):
        raise ConstraintError(
            f"r={r} violates 0 < r < sqrt(d0/d1)={math.sqrt(d0 / d1):.6g}"
        )
    lower = (d1 - d0) / (delta**2 - r**2 * delta**2)
    upper = d0 / (r**2 * delta**2)
    if not lower < upper:
        raise ConstraintError(f"empty beta interval ({lower}, {upper})")
    return lower, upper


def select_beta(
    d0: float,
    d1: float,
    delta: float,
    r: float,
    beta: float | None = None,
    rule: str = "geometric_mean",
) -> BetaSelection:
    """Choose beta strictly inside the admissible interval.

    With rule="geometric_mean" the pick is sqrt(lower*upper) when lower > 0
    and the midpoint (= upper/2 when lower = 0) otherwise.  An explicit beta
    is validated against the open interval.
    """
    lower, upper = beta_interval(d0, d1, delta, r)
    if beta is not None:
        if not lower < beta < upper:
            raise ConstraintError(
                f"explicit beta={beta} outside the open interval ({lower:.6g}, {upper:.6g})"
            )
        return BetaSelection(beta, lower, upper)
    if rule == "geometric_mean":
        pick = math.sqrt(lower * upper) if lower > 0 else 0.5 * (lower + upper)
    elif rule == "midpoint":
        pick = 0.5 * (lower + upper)
    else:
        raise ConstraintError(f"unknown beta rule {rule!r}")
    return BetaSelection(pick, lower, upper)


@dataclass(frozen=True)
class WeightConfig:
    """Full scalar ledger for the weight phi and its derived extremes.

    d0 is the level of the target subdomain (see DomainSpec.epsilon_core),
    d1 the maximum of d over the closed domain.  mu1/mu2 are the weight
    extremes exp(lam*(d1 - beta*delta^2)) and exp(lam*(d0 - beta*r^2*delta^2));
    validity requires mu2 > max(1, mu1).
    """

    lam: float
    beta: float
    t0: float
    delta: float
    r: float
    d0: float
    d1: float
    mu1: float
    mu2: float
    s: float | None = None

    def __post_init__(self):
        if self.lam <= 0:
            raise ConstraintError(f"lam must be positive, got {self.lam}")
        if self.delta <= 0:
            raise ConstraintError(f"delta must be positive, got {self.delta}")
        lo, hi = beta_interval(self.d0, self.d1, self.delta, self.r)
        if not lo < self.beta < hi:
            raise ConstraintError(
                f"beta={self.beta} outside admissible interval ({lo:.6g}, {hi:.6g})"
            )
        mu1, mu2 = _mu_pair(self.lam, self.beta, self.delta, self.r, self.d0, self.d1)
        if not (math.isclose(mu1, self.mu1, rel_tol=1e-12) and math.isclose(mu2, self.mu2, rel_tol=1e-12)):
            raise ConstraintError("mu1/mu2 inconsistent with (lam, beta, delta, r, d0, d1)")
        if not self.mu2 > max(1.0, self.mu1):
            raise ConstraintError(
                f"mu2={self.mu2} must exceed max(1, mu1={self.mu1}); constraints bypassed"
            )

    @property
    def interval(self) -> tuple[float, float]:
        return (self.t0 - self.delta, self.t0 + self.delta)

    @property
    def window(self) -> tuple[float, float]:
        return (self.t0 - self.r * self.delta, self.t0 + self.r * self.delta)

    @property
    def phi_max(self) -> float:
        """Maximum of phi over the closed space-time box (at d=d1, t=t0)."""
        return math.exp(self.lam * self.d1)

    @property
    def phi_min(self) -> float:
        """Minimum of phi (at d=0, |t-t0|=delta)."""
        return math.exp(self.lam * (0.0 - self.beta * self.delta**2))

    def with_s(self, s: float) -> "WeightConfig":
        return WeightConfig(
            self.lam, self.beta, self.t0, self.delta, self.r, self.d0, self.d1,
            self.mu1, self.mu2, s,
        )


def _mu_pair(lam, beta, delta, r, d0, d1) -> tuple[float, float]:
    mu1 = math.exp(lam * (d1 - beta * delta**2))
    mu2 = math.exp(lam * (d0 - beta * r**2 * delta**2))
    return mu1, mu2


def compute_mu(
    lam: float, beta: float, delta: float, r: float, d0: float, d1: float
) -> tuple[float, float]:
    """Weight extremes (mu1, mu2); raises unless mu2 > max(1, mu1)."""
    beta_interval(d0, d1, delta, r)  # validates r and positivity
    mu1, mu2 = _mu_pair(lam, beta, delta, r, d0, d1)
    if not mu2 > max(1.0, mu1):
        raise ConstraintError(
            f"mu2={mu2:.6g} <= max(1, mu1={mu1:.6g}): beta={beta} bypasses the "
            "admissible interval"
        )
    return mu1, mu2


def make_weight_config(
    d: AffineD,
    t0: float,
    delta: float,
    lam: float = 1.0,
    r_fraction: float = 0.5,
    beta: float | None = None,
    beta_rule: str = "geometric_mean",
) -> WeightConfig:
    """Assemble a validated WeightConfig from a domain's d and time window."""
    d0 = d.spec.epsilon_core
    d1 = d.d_max
    r = select_r(d0, d1, r_fraction)
    sel = select_beta(d0, d1, delta, r, beta=beta, rule=beta_rule)
    mu1, mu2 = compute_mu(lam, sel.beta, delta, r, d0, d1)
    return WeightConfig(lam, sel.beta, t0, delta, r, d0, d1, mu1, mu2)


def log_phi(
    d_values: np.ndarray | float, t: np.ndarray | float, cfg: WeightConfig
) -> np.ndarray | float:
    """log phi = lam * (d(x) - beta*(t-t0)^2); broadcasts over inputs."""
    return cfg.lam * (np.asarray(d_values) - cfg.beta * (np.asarray(t) - cfg.t0) ** 2)


def eval_phi(
    d_values: np.ndarray | float, t: np.ndarray | float, cfg: WeightConfig
) -> tuple[np.ndarray | float, np.ndarray | float]:
    """Weight phi and log phi at points with auxiliary-function values d_values.

    The log is returned alongside so downstream quadrature can form
    exp(2*s*phi - normalizer) without overflowing.
    """
    lp = log_phi(d_values, t, cfg)
    return np.exp(lp), lp
