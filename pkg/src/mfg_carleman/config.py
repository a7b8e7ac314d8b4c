"""Experiment configuration: INI-style blocks, validation, canonical hashing.

A config resolves to one flat, canonical key order so that identical inputs
hash identically; every output CSV echoes the hash, making runs verifiable as
byte-reproducible.
"""

from __future__ import annotations

import configparser
import hashlib
import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .carleman import max_usable_s
from .errors import ConfigError
from .geometry import DomainSpec, build_d, make_weight_config
from .grid import SpaceTimeGrid
from .mfg import make_manufactured, manufactured_ids

_SCHEMA: dict[str, dict[str, str]] = {
    "geometry": {
        "dimension": "1",
        "extents": "1.0",
        "gamma_faces": "left",
        "epsilon_core": "0.25",
        "lambda": "1.0",
        "beta": "",
        "r_fraction": "0.5",
        "t0": "0.5",
        "delta": "0.25",
    },
    "grid": {"n1": "33", "n2": "", "nt": "33"},
    "mfg": {"case_id": "1d-nonlinear", "max_inner": "30", "tol_inner": "1e-10"},
    "carleman": {
        "s_min": "1.0",
        "s_max": "40.0",
        "s_steps": "40",
        "c_b": "0.0",
        "estimate": "lemma1-k1",
        "input": "bump",
    },
    "uc": {
        "epsilon_core": "",
        "r_fraction": "",
        "s_grid": "1:40:40",
        "rho": "auto",
        "tol_gamma": "1e-10",
        "noise_levels": "1e-1,1e-2,1e-3",
        "amplitude": "1e-2",
        "d_on": "0.5",
        "slack_coeff": "1.0",
        "s_rec": "4.0",
        "horizon_t": "1.0",
        "n_t0": "10",
    },
    "run": {"seed": "0", "outdir": "out", "workers": "1"},
}


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(tok) for tok in text.replace(",", " ").split())


def _parse_s_grid(text: str) -> np.ndarray:
    """'lo:hi:steps' or a comma list of values."""
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ConfigError(f"s_grid must be lo:hi:steps or a value list, got {text!r}")
        lo, hi, steps = float(parts[0]), float(parts[1]), int(parts[2])
        if steps < 1 or not lo <= hi:
            raise ConfigError(f"invalid s_grid spec {text!r}")
        return np.linspace(lo, hi, steps)
    vals = _floats(text)
    if not vals:
        raise ConfigError("s_grid is empty")
    return np.asarray(vals)


@dataclass(eq=False)
class ExperimentConfig:
    """Resolved configuration; raw holds the flat string table that is hashed."""

    raw: dict[str, dict[str, str]]

    def get(self, section: str, key: str) -> str:
        return self.raw[section][key]

    def getfloat(self, section: str, key: str) -> float:
        try:
            return float(self.raw[section][key])
        except ValueError as exc:
            raise ConfigError(f"{section}.{key}: not a number: {self.raw[section][key]!r}") from exc

    def getint(self, section: str, key: str) -> int:
        try:
            return int(self.raw[section][key])
        except ValueError as exc:
            raise ConfigError(f"{section}.{key}: not an integer: {self.raw[section][key]!r}") from exc

    # -- resolved pieces ----------------------------------------------------

    def domain(self) -> DomainSpec:
        dim = self.getint("geometry", "dimension")
        extents = _floats(self.get("geometry", "extents"))
        faces = frozenset(
            tok.strip() for tok in self.get("geometry", "gamma_faces").split(",") if tok.strip()
        )
        eps = self.getfloat("geometry", "epsilon_core")
        return DomainSpec(dim, extents, faces, eps)

    def grid_shape(self) -> tuple[tuple[int, ...], int]:
        dim = self.getint("geometry", "dimension")
        n = [self.getint("grid", "n1")]
        if dim == 2:
            if not self.get("grid", "n2"):
                raise ConfigError("grid.n2 is required for 2D geometry")
            n.append(self.getint("grid", "n2"))
        elif self.get("grid", "n2"):
            raise ConfigError("grid.n2 given but geometry.dimension = 1")
        return tuple(n), self.getint("grid", "nt")

    def build_geometry(self):
        d = build_d(self.domain())
        beta_text = self.get("geometry", "beta")
        cfg = make_weight_config(
            d,
            t0=self.getfloat("geometry", "t0"),
            delta=self.getfloat("geometry", "delta"),
            lam=self.getfloat("geometry", "lambda"),
            r_fraction=self.getfloat("geometry", "r_fraction"),
            beta=float(beta_text) if beta_text else None,
        )
        return d, cfg

    def build_grid(self, d) -> SpaceTimeGrid:
        n, nt = self.grid_shape()
        return SpaceTimeGrid(
            d, n, nt, self.getfloat("geometry", "t0"), self.getfloat("geometry", "delta")
        )

    def carleman_s_grid(self) -> np.ndarray:
        lo = self.getfloat("carleman", "s_min")
        hi = self.getfloat("carleman", "s_max")
        steps = self.getint("carleman", "s_steps")
        if steps < 1 or not 0 < lo <= hi:
            raise ConfigError(f"invalid carleman s range ({lo}, {hi}, {steps})")
        return np.linspace(lo, hi, steps)

    def uc_s_grid(self) -> np.ndarray:
        return _parse_s_grid(self.get("uc", "s_grid"))

    def noise_levels(self) -> tuple[float, ...]:
        text = self.get("uc", "noise_levels").strip()
        return _floats(text) if text else ()

    def rho(self, s: float) -> float | None:
        text = self.get("uc", "rho").strip()
        if text == "auto" or not text:
            return None
        return float(text)

    def validate(self) -> None:
        """Cross-block consistency, checked before any run."""
        dom = self.domain()
        d, wcfg = self.build_geometry()
        n, nt = self.grid_shape()
        if any(nk < 3 for nk in n) or nt < 3:
            raise ConfigError(f"grid too small: n={n}, nt={nt}")
        case_id = self.get("mfg", "case_id")
        if case_id not in manufactured_ids():
            raise ConfigError(
                f"mfg.case_id {case_id!r} unknown; known: {manufactured_ids()}"
            )
        case = make_manufactured(case_id)
        if case.dimension != dom.dimension:
            raise ConfigError(
                f"mfg.case_id {case_id!r} is {case.dimension}D but geometry is "
                f"{dom.dimension}D"
            )
        s_guard = max_usable_s(wcfg)
        for name, s_values in (
            ("carleman", self.carleman_s_grid()),
            ("uc", self.uc_s_grid()),
        ):
            smax = float(np.max(s_values))
            if smax > s_guard:
                raise ConfigError(
                    f"{name} s grid reaches {smax}, beyond the overflow guard; "
                    f"max admissible s is {s_guard:.6g}"
                )
        s_rec = self.getfloat("uc", "s_rec")
        if s_rec > s_guard:
            raise ConfigError(
                f"uc.s_rec={s_rec} beyond the overflow guard; max admissible s is "
                f"{s_guard:.6g}"
            )
        est = self.get("carleman", "estimate")
        if est not in ("lemma1-k1", "lemma1-k2", "theorem2"):
            raise ConfigError(f"carleman.estimate {est!r} invalid")
        if self.get("carleman", "input") not in ("bump", "perturbed-pair"):
            raise ConfigError("carleman.input must be 'bump' or 'perturbed-pair'")
        T = self.getfloat("uc", "horizon_t")
        delta = self.getfloat("geometry", "delta")
        if not T > 2 * delta:
            raise ConfigError(f"uc.horizon_t={T} must exceed 2*delta={2 * delta}")
        if self.getint("run", "workers") < 1:
            raise ConfigError("run.workers must be >= 1")
        if not math.isfinite(self.getfloat("uc", "slack_coeff")):
            raise ConfigError("uc.slack_coeff must be finite")

    # -- canonical form -------------------------------------------------------

    def canonical_lines(self) -> list[str]:
        lines = []
        for section in sorted(self.raw):
            for key in sorted(self.raw[section]):
                lines.append(f"{section}.{key}={self.raw[section][key]}")
        return lines

    @property
    def hash(self) -> str:
        text = "\n".join(self.canonical_lines())
        return hashlib.sha256(text.encode()).hexdigest()[:12]


def parse_config(
    path: str | None = None, overrides: list[str] | None = None
) -> ExperimentConfig:
    """Load defaults, then a config file, then key=value overrides.

    Unknown sections or keys are rejected so typos fail loudly.
    """
    raw = {sec: dict(keys) for sec, keys in _SCHEMA.items()}
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")
        for section in parser.sections():
            if section not in raw:
                raise ConfigError(f"unknown config section [{section}]")
            for key, value in parser.items(section):
                if key not in raw[section]:
                    raise ConfigError(f"unknown key {key!r} in section [{section}]")
                raw[section][key] = value.strip()
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must be section.key=value, got {item!r}")
        dotted, value = item.split("=", 1)
        section, key = dotted.split(".", 1)
        if section not in raw or key not in raw[section]:
            raise ConfigError(f"unknown override target {dotted!r}")
        raw[section][key] = value.strip()
    return ExperimentConfig(raw)
