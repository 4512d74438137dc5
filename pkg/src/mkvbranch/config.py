"""Run configuration: a sectioned key = value file, strictly validated.

Unknown sections or keys are rejected by name so that typos fail loudly.
The environment variable ``MKVB_SEED`` overrides the configured seed (used
for CI sweeps over seeds without editing configs).
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field

import numpy as np

from .coefficients import (
    COEFFICIENT_FAMILIES,
    CoefficientSet,
    ConstantCoefficients,
    MeanFieldLogistic,
    PositionCoupled,
)
from .engine import DEFAULT_EXPLOSION_CAP, InitialCondition

__all__ = ["ConfigError", "RunConfig", "load_config", "perturb_death_rate"]


class ConfigError(ValueError):
    """Invalid or unknown configuration content; the message names the key."""


_RUN_KEYS = {"seed", "horizon", "dt", "dimension", "output_dir", "workers",
             "explosion_cap"}
_COEFF_KEYS = {
    "constant": {"family", "drift", "diffusion", "death_rate", "progeny", "gamma_bar"},
    "mean_field_logistic": {"family", "gamma0", "coupling", "gamma_bar", "drift",
                            "diffusion", "progeny"},
    "position_coupled": {"family", "pull", "clip_radius", "diffusion", "death_rate",
                         "progeny", "gamma_bar"},
}
_INITIAL_KEYS = {"kind", "positions", "count_masses", "position"}
_COMMAND_KEYS = {
    "simulate-tree": {"replicas", "export_paths"},
    "solve-mkv": {"replicas", "tol", "max_iter", "window", "mode", "theta",
                  "c_d", "c_w", "fresh_residual"},
    "simulate-n": {"n", "export_paths"},
    "chaos-study": {"n_list", "replicas", "solve_replicas", "solve_tol",
                    "solve_max_iter"},
    "diagnose-martingale": {"replicas", "system", "n"},
    "stability": {"replicas", "eps_ladder", "probes"},
}


def _floats(text: str) -> list[float]:
    try:
        return [float(tok) for tok in text.split()]
    except ValueError as exc:
        raise ConfigError(f"expected space-separated numbers, got {text!r}") from exc


def _bool(text: str, key: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"key '{key}' must be a boolean, got {text!r}")


@dataclass
class RunConfig:
    """Fully resolved configuration for one CLI invocation."""

    seed: int
    horizon: float
    dt: float
    dimension: int
    output_dir: str
    workers: int
    explosion_cap: int
    coefficients: CoefficientSet
    initial: InitialCondition
    command_options: dict = field(default_factory=dict)
    resolved: dict = field(default_factory=dict)

    def describe(self) -> dict:
        return {
            "seed": self.seed,
            "horizon": self.horizon,
            "dt": self.dt,
            "dimension": self.dimension,
            "workers": self.workers,
            "explosion_cap": self.explosion_cap,
            "coefficients": self.coefficients.describe(),
            "initial": self.initial.describe(),
            "command_options": self.command_options,
        }


def _check_keys(section: str, present, allowed) -> None:
    for key in present:
        if key not in allowed:
            raise ConfigError(f"unknown key '{key}' in section [{section}]")


def _parse_coefficients(section, dim: int) -> CoefficientSet:
    family = section.get("family")
    if family is None:
        raise ConfigError("section [coefficients] needs a 'family' key")
    if family not in COEFFICIENT_FAMILIES:
        raise ConfigError(
            f"unknown coefficient family '{family}' "
            f"(choose from {sorted(COEFFICIENT_FAMILIES)})"
        )
    _check_keys("coefficients", section.keys(), _COEFF_KEYS[family])

    def num(key, default=None):
        raw = section.get(key)
        if raw is None:
            if default is None:
                raise ConfigError(f"section [coefficients] needs '{key}' for {family}")
            return default
        return float(raw)

    def coeff_array(key, default):
        raw = section.get(key)
        if raw is None:
            return default
        vals = _floats(raw)
        return vals[0] if len(vals) == 1 else vals

    progeny = tuple(_floats(section.get("progeny", "1.0")))
    if family == "constant":
        return ConstantCoefficients(
            dim=dim, drift=coeff_array("drift", 0.0),
            diffusion=coeff_array("diffusion", 1.0),
            death_rate=num("death_rate", 0.0), progeny=progeny,
            gamma_bar=float(section["gamma_bar"]) if "gamma_bar" in section else None,
        )
    if family == "mean_field_logistic":
        return MeanFieldLogistic(
            dim=dim, gamma0=num("gamma0"), coupling=num("coupling"),
            gamma_bar=num("gamma_bar"), drift=coeff_array("drift", 0.0),
            diffusion=coeff_array("diffusion", 1.0), progeny=progeny,
        )
    return PositionCoupled(
        dim=dim, pull=num("pull"), clip_radius=num("clip_radius", 5.0),
        diffusion=coeff_array("diffusion", 1.0), death_rate=num("death_rate", 0.0),
        progeny=progeny,
        gamma_bar=float(section["gamma_bar"]) if "gamma_bar" in section else None,
    )


def _parse_initial(section, dim: int) -> InitialCondition:
    kind = section.get("kind", "fixed")
    _check_keys("initial", section.keys(), _INITIAL_KEYS)
    if kind == "fixed":
        raw = section.get("positions")
        if raw is None:
            raise ConfigError("fixed initial condition needs 'positions'")
        points = [p for p in (chunk.strip() for chunk in raw.split(";")) if p]
        positions = [_floats(p) for p in points]
        for p in positions:
            if len(p) != dim:
                raise ConfigError(
                    f"initial position {p} has dimension {len(p)}, expected {dim}"
                )
        return InitialCondition.fixed(np.array(positions))
    if kind == "iid":
        masses = _floats(section.get("count_masses", ""))
        law_raw = section.get("position", "").split()
        if not masses or not law_raw:
            raise ConfigError("iid initial condition needs 'count_masses' and 'position'")
        law_kind, *params = law_raw
        if law_kind == "point":
            law = ("point", [float(v) for v in params])
        elif law_kind in ("gauss", "uniform"):
            if len(params) != 2:
                raise ConfigError(f"position law '{law_kind}' needs two parameters")
            law = (law_kind, float(params[0]), float(params[1]))
        else:
            raise ConfigError(f"unknown position law '{law_kind}'")
        return InitialCondition.iid(dim=dim, count_masses=masses, position_law=law)
    raise ConfigError(f"unknown initial-condition kind '{kind}'")


def _parse_command_options(command: str, section) -> dict:
    allowed = _COMMAND_KEYS[command]
    _check_keys(command, section.keys(), allowed)
    out: dict = {}
    for key, raw in section.items():
        if key in ("replicas", "max_iter", "n", "solve_replicas", "solve_max_iter",
                   "probes"):
            out[key] = int(raw)
        elif key in ("tol", "solve_tol", "theta", "c_d", "c_w"):
            out[key] = float(raw)
        elif key in ("export_paths", "fresh_residual"):
            out[key] = _bool(raw, key)
        elif key == "window":
            out[key] = raw.strip()
        elif key == "mode":
            if raw not in ("exact", "approx", "auto"):
                raise ConfigError(f"mode must be exact, approx or auto, got {raw!r}")
            out[key] = raw
        elif key == "system":
            if raw not in ("frozen", "interacting"):
                raise ConfigError(f"system must be frozen or interacting, got {raw!r}")
            out[key] = raw
        elif key in ("n_list", "eps_ladder"):
            vals = _floats(raw)
            out[key] = [int(v) for v in vals] if key == "n_list" else vals
        else:
            out[key] = raw
    return out


def load_config(path: str, command: str) -> RunConfig:
    """Parse and validate the configuration for one subcommand."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file '{path}' not found")
    known_sections = {"run", "coefficients", "initial"} | set(_COMMAND_KEYS)
    for section in parser.sections():
        if section not in known_sections:
            raise ConfigError(f"unknown section [{section}]")
    if "run" not in parser:
        raise ConfigError("missing section [run]")
    run = parser["run"]
    _check_keys("run", run.keys(), _RUN_KEYS)
    try:
        seed = int(os.environ.get("MKVB_SEED", run.get("seed", "0")))
        horizon = float(run.get("horizon", "1.0"))
        dt = float(run.get("dt", "0.015625"))
        dimension = int(run.get("dimension", "1"))
        workers = int(run.get("workers", "1"))
        explosion_cap = int(run.get("explosion_cap", str(DEFAULT_EXPLOSION_CAP)))
    except ValueError as exc:
        raise ConfigError(f"invalid numeric value in [run]: {exc}") from exc
    if horizon <= 0 or dt <= 0:
        raise ConfigError("horizon and dt must be positive")
    if dimension < 1:
        raise ConfigError("dimension must be at least 1")
    if workers < 0:
        raise ConfigError("workers must be >= 0 (0 = auto)")
    if workers == 0:
        workers = os.cpu_count() or 1
    if "coefficients" not in parser:
        raise ConfigError("missing section [coefficients]")
    if "initial" not in parser:
        raise ConfigError("missing section [initial]")
    coeffs = _parse_coefficients(parser["coefficients"], dimension)
    initial = _parse_initial(parser["initial"], dimension)
    options = _parse_command_options(command, parser[command]) if command in parser else {}
    cfg = RunConfig(
        seed=seed, horizon=horizon, dt=dt, dimension=dimension,
        output_dir=run.get("output_dir", "out"), workers=workers,
        explosion_cap=explosion_cap, coefficients=coeffs, initial=initial,
        command_options=options,
    )
    cfg.resolved = cfg.describe()
    return cfg


def perturb_death_rate(coeffs: CoefficientSet, eps: float) -> CoefficientSet:
    """The same family with its death-rate level raised by eps (the cap is
    widened alongside so the perturbed rate stays admissible)."""
    if isinstance(coeffs, ConstantCoefficients):
        p = coeffs.params()
        return ConstantCoefficients(
            dim=coeffs.dim, drift=p["drift"], diffusion=p["diffusion"],
            death_rate=p["death_rate"] + eps, progeny=p["progeny"],
            gamma_bar=max(coeffs.bounds.gamma_bar, p["death_rate"] + eps),
        )
    if isinstance(coeffs, MeanFieldLogistic):
        p = coeffs.params()
        return MeanFieldLogistic(
            dim=coeffs.dim, gamma0=p["gamma0"] + eps, coupling=p["coupling"],
            gamma_bar=coeffs.bounds.gamma_bar, drift=p["drift"],
            diffusion=p["diffusion"], progeny=p["progeny"],
        )
    if isinstance(coeffs, PositionCoupled):
        p = coeffs.params()
        return PositionCoupled(
            dim=coeffs.dim, pull=p["pull"], clip_radius=p["clip_radius"],
            diffusion=p["diffusion"], death_rate=p["death_rate"] + eps,
            progeny=p["progeny"],
            gamma_bar=max(coeffs.bounds.gamma_bar, p["death_rate"] + eps),
        )
    raise ConfigError(f"cannot perturb death rate of family {coeffs.name!r}")
