"""Coefficient sets: drift, diffusion, death rate, and progeny law.

A coefficient set evaluates the four functions at (t, particle path, path
measure).  Progressivity is enforced structurally: evaluators only ever
receive the particle path stopped at t (a read-only view) and the
environment measure stopped at t, so they cannot peek at the future.

Boundedness is asserted at every evaluation: a death rate above the
declared cap, a non-probability progeny vector, or a progeny mean above
the declared cap all raise :class:`CoefficientBoundError` (a misdeclared
coefficient set is a bug in the model, not noise to tolerate).  Lipschitz
constants are declared by the family and spot-checked statistically in the
test suite; they are never proven.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .genealogy import Label
from .paths import TreePath
from .transport import CountingDistribution, EnvironmentMeasure

__all__ = [
    "CoefficientBounds",
    "CoefficientBoundError",
    "CoefficientSet",
    "ParticleView",
    "PathParticleView",
    "offspring_interval_index",
    "eval_all",
    "mean_field_functional",
    "ConstantCoefficients",
    "MeanFieldLogistic",
    "PositionCoupled",
    "COEFFICIENT_FAMILIES",
]

BOUND_SLACK = 1e-9


class CoefficientBoundError(RuntimeError):
    """A coefficient evaluation violated its declared bounds."""


@dataclass(frozen=True)
class CoefficientBounds:
    """Declared caps and Lipschitz data for a coefficient set.

    ``mean_offspring_cap`` bounds the expected offspring count of a single
    branching event; together with ``gamma_bar`` it controls the population
    growth factor exp(gamma_bar * cap * T).
    """

    gamma_bar: float
    mean_offspring_cap: float
    drift_sup: float
    diffusion_sup: float
    lipschitz: float = 0.0
    progeny_lipschitz: tuple[float, ...] = ()

    def __post_init__(self):
        if self.gamma_bar < 0 or self.mean_offspring_cap < 0:
            raise ValueError("bounds must be nonnegative")

    @property
    def progeny_lipschitz_weighted(self) -> float:
        return float(sum(l * c for l, c in enumerate(self.progeny_lipschitz)))


class ParticleView:
    """Read-only view of one particle's path stopped at a given time.

    ``position_at`` delegates to the ancestor line before the particle's
    own birth, so the view is a continuous path on [0, T] that is constant
    from the stop time on.
    """

    __slots__ = ()

    label: Label
    time: float

    @property
    def position(self) -> np.ndarray:
        raise NotImplementedError

    def position_at(self, s: float) -> np.ndarray:
        raise NotImplementedError


class PathParticleView(ParticleView):
    """View backed by a finished tree path."""

    __slots__ = ("_tree", "label", "time")

    def __init__(self, tree: TreePath, label: Label, t: float):
        self._tree = tree
        self.label = label
        self.time = t

    @property
    def position(self) -> np.ndarray:
        return self._tree.position_of(self.label, self.time)

    def position_at(self, s: float) -> np.ndarray:
        return self._tree.position_of(self.label, min(s, self.time))


def offspring_interval_index(u: float, P) -> int:
    """Index of the cumulative interval containing u (inverse CDF)."""
    if not (0.0 <= u < 1.0):
        raise ValueError(f"u must lie in [0, 1), got {u}")
    masses = P.masses if isinstance(P, CountingDistribution) else P
    cum = np.cumsum(masses)
    idx = int(np.searchsorted(cum, u, side="right"))
    return min(idx, len(cum) - 1)  # guard the float-rounding sliver below 1


def _validate_masses(masses) -> np.ndarray:
    masses = np.asarray(masses, dtype=float)
    if len(masses) == 0 or (masses < 0).any() or abs(masses.sum() - 1.0) > 1e-9:
        raise ValueError(f"progeny masses {masses} are not a probability vector")
    return masses


def _check_death_rate(value: float, bounds: CoefficientBounds) -> float:
    if not (0.0 <= value <= bounds.gamma_bar + BOUND_SLACK):
        raise CoefficientBoundError(
            f"death rate {value} outside [0, {bounds.gamma_bar}]"
        )
    return float(value)


def _check_progeny(masses: np.ndarray, bounds: CoefficientBounds) -> np.ndarray:
    masses = np.asarray(masses, dtype=float)
    if (masses < -BOUND_SLACK).any() or abs(masses.sum() - 1.0) > 1e-9:
        raise CoefficientBoundError(f"progeny masses {masses} are not a probability vector")
    mean = float(np.arange(len(masses)) @ masses)
    if mean > bounds.mean_offspring_cap + BOUND_SLACK:
        raise CoefficientBoundError(
            f"progeny mean {mean} exceeds declared cap {bounds.mean_offspring_cap}"
        )
    return masses


class StepCoefficients:
    """Per-step evaluator with environment-dependent quantities cached.

    The engine freezes drift and diffusion at the step start and re-queries
    the death rate / progeny at candidate event times inside the step.
    ``uniform_in_space`` marks evaluators whose drift and diffusion ignore
    the particle view, letting the engine freeze them once per step.
    """

    uniform_in_space = False

    __slots__ = ("_set", "_t0", "_env")

    def __init__(self, cset: "CoefficientSet", t0: float, env: EnvironmentMeasure):
        self._set = cset
        self._t0 = t0
        self._env = env

    def drift(self, view: ParticleView) -> np.ndarray:
        return self._set.drift(self._t0, view, self._env)

    def diffusion(self, view: ParticleView) -> np.ndarray:
        return self._set.diffusion(self._t0, view, self._env)

    def death_rate(self, t: float, view: ParticleView) -> float:
        return _check_death_rate(self._set.death_rate(t, view, self._env), self._set.bounds)

    def progeny(self, t: float, view: ParticleView) -> np.ndarray:
        return _check_progeny(self._set.progeny(t, view, self._env), self._set.bounds)


class CoefficientSet:
    """Base class: implement the four evaluators and declare bounds."""

    name = "custom"
    bounds: CoefficientBounds

    def drift(self, t: float, x: ParticleView, m: EnvironmentMeasure) -> np.ndarray:
        raise NotImplementedError

    def diffusion(self, t: float, x: ParticleView, m: EnvironmentMeasure) -> np.ndarray:
        raise NotImplementedError

    def death_rate(self, t: float, x: ParticleView, m: EnvironmentMeasure) -> float:
        raise NotImplementedError

    def progeny(self, t: float, x: ParticleView, m: EnvironmentMeasure) -> np.ndarray:
        raise NotImplementedError

    def begin_step(self, t0: float, env: EnvironmentMeasure) -> StepCoefficients:
        return StepCoefficients(self, t0, env)

    def batch_eval(self, times, alive, pos, env):
        """Vectorized evaluation over (time, particle) panels, or None.

        Families that can evaluate on dense arrays return a tuple
        (drift (m,n,d), diffusion (m,n,d,d), death (m,n), progeny (m,n,L+1));
        the generic fallback (None) makes diagnostics evaluate per node.
        """
        return None

    def params(self) -> dict:
        return {}

    def describe(self) -> dict:
        b = self.bounds
        return {
            "family": self.name,
            "params": self.params(),
            "gamma_bar": b.gamma_bar,
            "mean_offspring_cap": b.mean_offspring_cap,
            "drift_sup": b.drift_sup,
            "diffusion_sup": b.diffusion_sup,
            "lipschitz": b.lipschitz,
            "progeny_lipschitz": list(b.progeny_lipschitz),
        }


def eval_all(c: CoefficientSet, t: float, x: ParticleView, m: EnvironmentMeasure):
    """All four coefficient evaluations with runtime bound assertions."""
    b = np.asarray(c.drift(t, x, m), dtype=float)
    sigma = np.asarray(c.diffusion(t, x, m), dtype=float)
    gamma = _check_death_rate(c.death_rate(t, x, m), c.bounds)
    masses = _check_progeny(c.progeny(t, x, m), c.bounds)
    return b, sigma, gamma, CountingDistribution(tuple(masses))


def mean_field_functional(f, t: float, m: EnvironmentMeasure) -> float:
    """Average over the measure of the per-snapshot pairing <z(t), f>.

    ``f(label, position)`` should be bounded and Lipschitz in the position
    with a common constant C; the functional is then C-Lipschitz in the
    measure argument for the path-measure distance.
    """
    from .paths import configuration_at

    u = m.clamp(t)
    total = 0.0
    for w, p in zip(m.weights, m.paths):
        total += w * configuration_at(p, u).pairing(f)
    return float(total)


def _as_matrix(value, d: int) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return float(arr) * np.eye(d)
    if arr.ndim == 1:
        if arr.shape != (d,):
            raise ValueError(f"diffusion diagonal must have length {d}")
        return np.diag(arr)
    if arr.shape != (d, d):
        raise ValueError(f"diffusion matrix must be {d}x{d}")
    return arr


def _as_vector(value, d: int) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(d, float(arr))
    if arr.shape != (d,):
        raise ValueError(f"drift vector must have length {d}")
    return arr


def _operator_norm(mat: np.ndarray) -> float:
    return float(np.linalg.norm(mat, ord=2))


class _ConstantStep(StepCoefficients):
    """Step evaluator with all four outputs precomputed."""

    uniform_in_space = True

    __slots__ = ("_b", "_sigma", "_gamma", "_masses")

    def __init__(self, b, sigma, gamma, masses):
        self._b = b
        self._sigma = sigma
        self._gamma = gamma
        self._masses = masses

    def drift(self, view):
        return self._b

    def diffusion(self, view):
        return self._sigma

    def death_rate(self, t, view):
        return self._gamma

    def progeny(self, t, view):
        return self._masses


class ConstantCoefficients(CoefficientSet):
    """Linear branching benchmark: all four coefficients constant."""

    name = "constant"

    def __init__(self, dim: int, drift=0.0, diffusion=1.0, death_rate=0.0,
                 progeny=(1.0,), gamma_bar: float | None = None):
        self.dim = dim
        self._b = _as_vector(drift, dim)
        self._sigma = _as_matrix(diffusion, dim)
        self._gamma = float(death_rate)
        self._masses = _validate_masses(progeny)
        gbar = self._gamma if gamma_bar is None else float(gamma_bar)
        if gbar < self._gamma:
            raise ValueError("gamma_bar must dominate the constant death rate")
        mean = float(np.arange(len(self._masses)) @ self._masses)
        self.bounds = CoefficientBounds(
            gamma_bar=gbar,
            mean_offspring_cap=mean,
            drift_sup=float(np.linalg.norm(self._b)),
            diffusion_sup=_operator_norm(self._sigma),
            lipschitz=0.0,
            progeny_lipschitz=tuple(0.0 for _ in self._masses),
        )

    def params(self):
        return {
            "drift": self._b.tolist(),
            "diffusion": self._sigma.tolist(),
            "death_rate": self._gamma,
            "progeny": self._masses.tolist(),
        }

    def drift(self, t, x, m):
        return self._b

    def diffusion(self, t, x, m):
        return self._sigma

    def death_rate(self, t, x, m):
        return self._gamma

    def progeny(self, t, x, m):
        return self._masses

    def begin_step(self, t0, env):
        return _ConstantStep(self._b, self._sigma, self._gamma, self._masses)

    def batch_eval(self, times, alive, pos, env):
        m, n = alive.shape
        d = self.dim
        L = len(self._masses)
        return (
            np.broadcast_to(self._b, (m, n, d)),
            np.broadcast_to(self._sigma, (m, n, d, d)),
            np.broadcast_to(self._gamma, (m, n)),
            np.broadcast_to(self._masses, (m, n, L)),
        )


class MeanFieldLogistic(CoefficientSet):
    """Crowding model: the death rate grows with the mean population.

    gamma(t, x, m) = clamp(gamma0 * (1 + coupling * mean population of m at t),
    0, gamma_bar).  Drift, diffusion and progeny are constant.
    """

    name = "mean_field_logistic"

    def __init__(self, dim: int, gamma0: float, coupling: float, gamma_bar: float,
                 drift=0.0, diffusion=1.0, progeny=(1.0,)):
        self.dim = dim
        self.gamma0 = float(gamma0)
        self.coupling = float(coupling)
        self._b = _as_vector(drift, dim)
        self._sigma = _as_matrix(diffusion, dim)
        self._masses = _validate_masses(progeny)
        mean = float(np.arange(len(self._masses)) @ self._masses)
        # |gamma(m) - gamma(m')| <= gamma0*|coupling| * W1(m_t, m'_t): the
        # population functional is 1-Lipschitz and the clamp contracts.
        self.bounds = CoefficientBounds(
            gamma_bar=float(gamma_bar),
            mean_offspring_cap=mean,
            drift_sup=float(np.linalg.norm(self._b)),
            diffusion_sup=_operator_norm(self._sigma),
            lipschitz=abs(self.gamma0 * self.coupling),
            progeny_lipschitz=tuple(0.0 for _ in self._masses),
        )

    def params(self):
        return {
            "gamma0": self.gamma0,
            "coupling": self.coupling,
            "drift": self._b.tolist(),
            "diffusion": self._sigma.tolist(),
            "progeny": self._masses.tolist(),
        }

    def _gamma_from_population(self, pop):
        raw = self.gamma0 * (1.0 + self.coupling * pop)
        return np.clip(raw, 0.0, self.bounds.gamma_bar)

    def drift(self, t, x, m):
        return self._b

    def diffusion(self, t, x, m):
        return self._sigma

    def death_rate(self, t, x, m):
        return float(self._gamma_from_population(m.population_mean(t)))

    def progeny(self, t, x, m):
        return self._masses

    def begin_step(self, t0, env):
        gamma = float(self._gamma_from_population(env.population_mean(t0)))
        return _ConstantStep(self._b, self._sigma, gamma, self._masses)

    def batch_eval(self, times, alive, pos, env):
        m, n = alive.shape
        d = self.dim
        gamma = self._gamma_from_population(env.population_mean_curve(times))
        return (
            np.broadcast_to(self._b, (m, n, d)),
            np.broadcast_to(self._sigma, (m, n, d, d)),
            np.broadcast_to(gamma[:, None], (m, n)),
            np.broadcast_to(self._masses, (m, n, len(self._masses))),
        )


def _saturate(dev: np.ndarray, radius: float) -> np.ndarray:
    """Clip a displacement to the ball of the given radius (1-Lipschitz)."""
    norm = np.linalg.norm(dev, axis=-1, keepdims=True)
    scale = np.minimum(1.0, radius / np.where(norm > 0, norm, 1.0))
    return dev * scale


class _PositionStep(StepCoefficients):
    """Step evaluator for the barycenter-attraction family."""

    __slots__ = ("_family", "_bary")

    def __init__(self, family: "PositionCoupled", bary: np.ndarray):
        self._family = family
        self._bary = bary

    def drift(self, view):
        f = self._family
        return -f.pull * _saturate(view.position - self._bary, f.clip_radius)

    def diffusion(self, view):
        return self._family._sigma

    def death_rate(self, t, view):
        return self._family._gamma

    def progeny(self, t, view):
        return self._family._masses


class PositionCoupled(CoefficientSet):
    """Attraction to the mean-field barycenter with a saturated pull.

    b(t, x, m) = -pull * sat(x_t - barycenter of living particles under m at t)
    with the saturation radius bounding the drift.  Death rate, diffusion
    and progeny are constant.
    """

    name = "position_coupled"

    # The barycenter is only heuristically Lipschitz for the path-measure
    # distance; the declared constant carries a safety margin and is
    # spot-checked, not proven.
    BARYCENTER_MARGIN = 3.0

    def __init__(self, dim: int, pull: float, clip_radius: float = 5.0,
                 diffusion=1.0, death_rate=0.0, progeny=(1.0,),
                 gamma_bar: float | None = None):
        self.dim = dim
        self.pull = float(pull)
        self.clip_radius = float(clip_radius)
        self._sigma = _as_matrix(diffusion, dim)
        self._gamma = float(death_rate)
        self._masses = _validate_masses(progeny)
        gbar = self._gamma if gamma_bar is None else float(gamma_bar)
        if gbar < self._gamma:
            raise ValueError("gamma_bar must dominate the constant death rate")
        mean = float(np.arange(len(self._masses)) @ self._masses)
        self.bounds = CoefficientBounds(
            gamma_bar=gbar,
            mean_offspring_cap=mean,
            drift_sup=abs(self.pull) * self.clip_radius,
            diffusion_sup=_operator_norm(self._sigma),
            lipschitz=abs(self.pull) * (1.0 + self.BARYCENTER_MARGIN),
            progeny_lipschitz=tuple(0.0 for _ in self._masses),
        )

    def params(self):
        return {
            "pull": self.pull,
            "clip_radius": self.clip_radius,
            "diffusion": self._sigma.tolist(),
            "death_rate": self._gamma,
            "progeny": self._masses.tolist(),
        }

    def drift(self, t, x, m):
        dev = x.position - m.barycenter(t)
        return -self.pull * _saturate(dev, self.clip_radius)

    def diffusion(self, t, x, m):
        return self._sigma

    def death_rate(self, t, x, m):
        return self._gamma

    def progeny(self, t, x, m):
        return self._masses

    def begin_step(self, t0, env):
        return _PositionStep(self, env.barycenter(t0))

    def batch_eval(self, times, alive, pos, env):
        m, n = alive.shape
        d = self.dim
        bary = env.barycenter_curve(times)  # (m, d)
        drift = -self.pull * _saturate(pos - bary[:, None, :], self.clip_radius)
        return (
            drift,
            np.broadcast_to(self._sigma, (m, n, d, d)),
            np.broadcast_to(self._gamma, (m, n)),
            np.broadcast_to(self._masses, (m, n, len(self._masses))),
        )


COEFFICIENT_FAMILIES = {
    "constant": ConstantCoefficients,
    "mean_field_logistic": MeanFieldLogistic,
    "position_coupled": PositionCoupled,
}
