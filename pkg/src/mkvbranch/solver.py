"""Self-consistent law by fixed-point iteration.

One iteration simulates a batch of replica trees under the frozen current
environment and returns their empirical law.  Replica randomness streams
are reused identically across iterations, so the empirical map is a
deterministic function of the environment: successive distances then
expose the contraction instead of drowning it in Monte Carlo noise, and
once the coefficient evaluations stabilize the iteration converges to an
exact (bit-identical) fixed point of the empirical map.

The admissible window length for a guaranteed contraction factor depends
on stability constants that are not computable from first principles;
``ContractionBudget`` takes them as inputs, with crude defaults derived
from the declared bounds that are labeled non-rigorous wherever reported.

A caution on the ambient geometry: path space under the uniform metric is
complete but not separable, so nothing here (or downstream) should expect
consistent density-based estimators of the law.  The solver works entirely
with finitely supported empirical measures and transport distances.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

from .coefficients import CoefficientSet
from .engine import (
    DEFAULT_EXPLOSION_CAP,
    InitialCondition,
    RandomnessSource,
    SimulationGrid,
    frozen_initial_environment,
    simulate_replicas,
)
from .transport import EnvironmentMeasure, W1Result, pushforward, w1_paths_detail

__all__ = [
    "ContractionBudget",
    "PicardState",
    "contraction_window",
    "picard_step",
    "solve_fixed_point",
    "fresh_residual",
]


@dataclass(frozen=True)
class ContractionBudget:
    """Inputs for the window computation.

    ``c_d`` and ``c_w`` are the stability constants of the one-step
    comparison bound; they exist under the Lipschitz assumptions but are
    not computable in closed form.  ``initial_mean`` is the expected
    initial population, ``growth_exponent`` the product of the death-rate
    cap, the offspring-mean cap, and the horizon.
    """

    c_d: float
    c_w: float
    initial_mean: float
    growth_exponent: float

    def __post_init__(self):
        if min(self.c_d, self.c_w, self.initial_mean) <= 0 or self.growth_exponent < 0:
            raise ValueError("budget entries must be positive")

    @classmethod
    def from_coefficients(cls, coeffs: CoefficientSet, ic: InitialCondition,
                          horizon: float) -> "ContractionBudget":
        """Crude, non-rigorous defaults assembled from the declared bounds:
        treat every Lipschitz channel as contributing once to each constant."""
        b = coeffs.bounds
        L = max(b.lipschitz, 1e-6)
        M = b.mean_offspring_cap
        Mp = b.progeny_lipschitz_weighted
        c_d = b.gamma_bar * M + L * (M + 1) + b.gamma_bar * Mp + 3.0 * L
        c_w = L * (M + 2) + b.gamma_bar * Mp
        return cls(
            c_d=max(c_d, 1e-6),
            c_w=max(c_w, 1e-6),
            initial_mean=ic.mean_population(),
            growth_exponent=b.gamma_bar * M * horizon,
        )


def contraction_window(budget: ContractionBudget, theta: float = 0.9) -> tuple[float, float]:
    """Window length and contraction factor from the budget.

    Solves s + sqrt(s) = theta / (c_d + c_w * A * exp(growth)) for the
    largest admissible window s; the returned factor is < 1 for theta < 1
    and exactly 1 at the boundary theta = 1.
    """
    if not (0.0 < theta <= 1.0):
        raise ValueError("theta must lie in (0, 1]")
    amplification = budget.initial_mean * math.exp(budget.growth_exponent)
    rhs = theta / (budget.c_d + budget.c_w * amplification)
    if rhs <= 0:
        raise ValueError("nonpositive window budget")
    root = (-1.0 + math.sqrt(1.0 + 4.0 * rhs)) / 2.0
    window = root * root
    s = window + root
    kappa = budget.c_w * s / (1.0 - budget.c_d * s) * amplification
    if theta < 1.0 and not (0.0 < kappa < 1.0):
        raise ArithmeticError(f"contraction factor {kappa} escaped (0, 1)")
    return window, kappa


@dataclass
class PicardState:
    """Iteration log of a fixed-point solve."""

    distances: list[float] = field(default_factory=list)
    rows: list[dict] = field(default_factory=list)
    window_edges: list[float] = field(default_factory=list)
    converged: bool = True
    iterations: int = 0
    mode: str = "exact"
    tol: float = 0.0

    def record(self, edge: float, result: W1Result, wall_ms: float) -> None:
        self.iterations += 1
        self.distances.append(result.value)
        self.rows.append({
            "iter": self.iterations,
            "w1_to_prev": result.value,
            "wall_ms": wall_ms,
            "edge": edge,
            "mode": result.mode,
            "support_1": result.support_1,
            "support_2": result.support_2,
            "reg_eps": result.reg_eps,
        })

    def summary(self) -> dict:
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "tol": self.tol,
            "mode": self.mode,
            "window_edges": self.window_edges,
            "final_distance": self.distances[-1] if self.distances else None,
        }


def picard_step(mu: EnvironmentMeasure, replicas: int, ic: InitialCondition,
                coeffs: CoefficientSet, grid: SimulationGrid, rng: RandomnessSource,
                guard_cap: int = DEFAULT_EXPLOSION_CAP, workers: int = 1) -> EnvironmentMeasure:
    """Empirical law of ``replicas`` trees simulated under the frozen
    environment, with replica-indexed streams (identical across calls)."""
    if replicas < 2:
        raise ValueError("need at least two replicas")
    trees = simulate_replicas(ic, coeffs, mu, grid, rng, replicas,
                              guard_cap=guard_cap, workers=workers)
    return EnvironmentMeasure(trees)


def _window_edges(horizon: float, window: float | None) -> list[float]:
    if window is None or window >= horizon:
        return [horizon]
    edges = []
    edge = window
    while edge < horizon - 1e-12:
        edges.append(edge)
        edge += window
    edges.append(horizon)
    return edges


def solve_fixed_point(ic: InitialCondition, coeffs: CoefficientSet, grid: SimulationGrid,
                      rng: RandomnessSource, replicas: int, tol: float,
                      max_iter: int = 12, window: float | None = None,
                      initial: EnvironmentMeasure | None = None,
                      mode: str = "auto", guard_cap: int = DEFAULT_EXPLOSION_CAP,
                      workers: int = 1) -> tuple[EnvironmentMeasure, PicardState]:
    """Iterate the empirical map until successive laws are within ``tol``.

    With a window, convergence is checked on expanding truncations: iterate
    until the truncated distance at the current window edge drops below
    tol, then extend the edge by one window and continue (the simulation
    always runs to the horizon; only the distance is truncated).
    ``max_iter`` applies per window.  On non-convergence the best iterate
    is returned with the state flagged.
    """
    if tol <= 0 and not math.isinf(tol):
        raise ValueError("tol must be positive (or infinite to run one step)")
    mu = initial if initial is not None else frozen_initial_environment(ic, grid, rng, replicas)
    state = PicardState(mode=mode, tol=tol)
    state.window_edges = _window_edges(grid.horizon, window)
    for edge in state.window_edges:
        edge_converged = False
        for _ in range(max_iter):
            start = time.perf_counter()
            mu_next = picard_step(mu, replicas, ic, coeffs, grid, rng,
                                  guard_cap=guard_cap, workers=workers)
            result = w1_paths_detail(pushforward(mu_next, edge), pushforward(mu, edge),
                                     mode=mode)
            state.record(edge, result, (time.perf_counter() - start) * 1e3)
            if state.mode == "auto":
                state.mode = result.mode
            mu = mu_next
            if result.value < tol:
                edge_converged = True
                break
        if not edge_converged:
            state.converged = False
            return mu, state
    return mu, state


def fresh_residual(mu_star: EnvironmentMeasure, ic: InitialCondition,
                   coeffs: CoefficientSet, grid: SimulationGrid, fresh_seed: int,
                   replicas: int, mode: str = "auto",
                   guard_cap: int = DEFAULT_EXPLOSION_CAP, workers: int = 1) -> float:
    """Distance between the fixed point and one fresh-noise application of
    the map to it: the pure Monte Carlo noise floor of the solve."""
    rng = RandomnessSource(master_seed=fresh_seed)
    image = picard_step(mu_star, replicas, ic, coeffs, grid, rng,
                        guard_cap=guard_cap, workers=workers)
    return w1_paths_detail(image, mu_star, mode=mode).value
