"""Simulation core: randomness streams, single trees, interacting systems.

Randomness is label-addressed: every particle owns independent streams for
its Brownian increments, its event clock, and its offspring draw, derived
deterministically from (master seed, replica index, label, purpose).  Two
runs that share a master seed therefore share all noise attached to a given
particle line, which is what couples perturbed runs and successive
fixed-point iterates.

Death times use thinning: candidates arrive at the declared cap rate, and
a candidate at tau fires when an independent uniform mark on [0, cap]
falls below the death rate evaluated at tau.  Positions advance by one
Euler-Maruyama step per grid interval with drift and diffusion frozen at
the interval start; event times become exact sample points, so offspring
start bit-identically at the parent's death position.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np

from .coefficients import CoefficientSet, offspring_interval_index
from .genealogy import Label, ParticleConfiguration
from .paths import ParticleRecord, TreePath
from .transport import CountingDistribution, EnvironmentMeasure, pushforward

__all__ = [
    "RandomnessSource",
    "SimulationGrid",
    "InitialCondition",
    "ExplosionError",
    "simulate_tree",
    "simulate_replicas",
    "simulate_interacting",
    "frozen_initial_environment",
    "DEFAULT_EXPLOSION_CAP",
]

DEFAULT_EXPLOSION_CAP = 1_000_000

_PURPOSE_CODES = {"init": 0, "brownian": 1, "event": 2, "offspring": 3}


class ExplosionError(RuntimeError):
    """Total particle count crossed the configured explosion guard."""

    def __init__(self, replica: int, time: float, count: int, cap: int):
        super().__init__(
            f"population guard tripped: {count} particles ever alive "
            f"(cap {cap}) in replica {replica} at time {time:.6g}"
        )
        self.replica = replica
        self.time = time
        self.count = count
        self.cap = cap


@dataclass(frozen=True)
class RandomnessSource:
    """Deterministic family of independent streams keyed by
    (replica, label, purpose).  The same key always yields the same stream,
    across runs and regardless of worker count."""

    master_seed: int

    def stream(self, replica: int, label: Label, purpose: str) -> np.random.Generator:
        key = (replica, _PURPOSE_CODES[purpose]) + label.word
        seq = np.random.SeedSequence(self.master_seed, spawn_key=key)
        return np.random.Generator(np.random.PCG64(seq))


@dataclass(frozen=True)
class SimulationGrid:
    """Uniform time grid; event times are added per tree during simulation."""

    horizon: float
    dt: float

    def __post_init__(self):
        if self.dt <= 0 or self.horizon <= 0:
            raise ValueError("horizon and step must be positive")
        steps = self.horizon / self.dt
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError(f"horizon {self.horizon} is not a multiple of dt {self.dt}")

    @property
    def steps(self) -> int:
        return round(self.horizon / self.dt)

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.steps + 1)


class InitialCondition:
    """Sampler for the initial population (labels 1..N).

    Either a fixed configuration, or an iid model: a count distribution on
    the positive integers plus a position distribution applied
    independently per particle.
    """

    def __init__(self, dim: int, positions=None, count_masses=None, position_law=None):
        self.dim = dim
        if positions is not None:
            self._fixed = np.atleast_2d(np.asarray(positions, dtype=float))
            if self._fixed.shape[1] != dim:
                raise ValueError(f"positions must have dimension {dim}")
            self._count = None
            self._law = None
        else:
            if count_masses is None or position_law is None:
                raise ValueError("iid initial condition needs count masses and a position law")
            masses = np.asarray(count_masses, dtype=float)
            if masses[0] > 0:
                raise ValueError("initial population must be positive (no mass at count 0)")
            self._count = CountingDistribution(tuple(masses))
            self._law = position_law  # ("point", x) | ("gauss", mean, std) | ("uniform", lo, hi)
            self._fixed = None

    @classmethod
    def fixed(cls, positions) -> "InitialCondition":
        positions = np.atleast_2d(np.asarray(positions, dtype=float))
        return cls(dim=positions.shape[1], positions=positions)

    @classmethod
    def iid(cls, dim: int, count_masses, position_law) -> "InitialCondition":
        return cls(dim=dim, count_masses=count_masses, position_law=position_law)

    def mean_population(self) -> float:
        if self._fixed is not None:
            return float(len(self._fixed))
        return self._count.mean()

    def _draw_positions(self, gen: np.random.Generator, n: int) -> np.ndarray:
        kind = self._law[0]
        if kind == "point":
            return np.tile(np.asarray(self._law[1], dtype=float).reshape(1, self.dim), (n, 1))
        if kind == "gauss":
            mean, std = float(self._law[1]), float(self._law[2])
            return gen.normal(mean, std, size=(n, self.dim))
        if kind == "uniform":
            lo, hi = float(self._law[1]), float(self._law[2])
            return gen.uniform(lo, hi, size=(n, self.dim))
        raise ValueError(f"unknown position law {kind!r}")

    def sample(self, gen: np.random.Generator) -> ParticleConfiguration:
        if self._fixed is not None:
            pos = self._fixed
        else:
            count = offspring_interval_index(float(gen.uniform()), self._count)
            pos = self._draw_positions(gen, count)
        return ParticleConfiguration(
            {Label((i + 1,)): pos[i] for i in range(len(pos))}, dim=self.dim
        )

    def describe(self) -> dict:
        if self._fixed is not None:
            return {"kind": "fixed", "positions": self._fixed.tolist()}
        return {"kind": "iid", "count_masses": list(self._count.masses),
                "position_law": list(self._law)}


class _Live:
    """Mutable per-particle state while its tree is being simulated.

    In scalar mode (d = 1) the position is the float ``xf`` and drift and
    volatility are the floats ``bf``/``sf``; the hot stepping loop then
    avoids per-step array allocation entirely.
    """

    __slots__ = ("label", "parent", "birth", "cur_t", "x", "xf", "xs", "ts",
                 "drift", "sigma", "bf", "sf", "normals", "n_idx", "brownian", "events")

    def __init__(self, label, parent, birth, x, scalar: bool):
        self.label = label
        self.parent = parent
        self.birth = birth
        self.cur_t = birth
        if scalar:
            self.xf = float(x[0]) if isinstance(x, np.ndarray) else float(x)
            self.xs = [self.xf]
        else:
            self.x = np.asarray(x, dtype=float)
            self.xs = [self.x]
        self.ts = [birth]
        self.drift = None
        self.sigma = None
        self.bf = 0.0
        self.sf = 0.0
        self.normals = None
        self.n_idx = 0
        self.brownian = None
        self.events = None

    def position_array(self, scalar: bool) -> np.ndarray:
        return np.array([self.xf]) if scalar else self.x


class _LiveView:
    """Coefficient-facing view of a live particle stopped at a given time."""

    __slots__ = ("_sim", "_p", "time")

    def __init__(self, sim, p, t):
        self._sim = sim
        self._p = p
        self.time = t

    @property
    def label(self):
        return self._p.label

    @property
    def position(self) -> np.ndarray:
        return self._p.position_array(self._sim.scalar)

    def position_at(self, s: float) -> np.ndarray:
        s = min(s, self.time)
        p = self._p
        while s < p.birth:
            up = self._sim.parent_state(p)
            if up is None:
                break
            p = up
        ts = np.asarray(p.ts if isinstance(p, _Live) else p.times)
        xs = np.asarray(p.xs if isinstance(p, _Live) else p.positions)
        xs = xs.reshape(len(ts), -1)
        out = np.empty(xs.shape[1])
        for j in range(xs.shape[1]):
            out[j] = np.interp(s, ts, xs[:, j])
        return out


class _TreeSim:
    """Single-tree simulation state driven step by step from outside."""

    def __init__(self, initial: ParticleConfiguration, coeffs: CoefficientSet,
                 grid: SimulationGrid, rng: RandomnessSource, replica: int,
                 guard_cap: int):
        self.dim = initial.dim
        self.scalar = self.dim == 1
        self.horizon = grid.horizon
        self.coeffs = coeffs
        self.gamma_bar = coeffs.bounds.gamma_bar
        self.rng = rng
        self.replica = replica
        self.guard_cap = guard_cap
        self.block = grid.steps + 8     # Brownian pre-draw block length
        self.alive: dict[tuple, _Live] = {}
        self.finished: list[ParticleRecord] = []
        self._done_by_label: dict[tuple, ParticleRecord] = {}
        self.heap: list = []
        self.total_ever = 0
        self.event_log: list[tuple] = []
        for label, x in initial:
            self._spawn(label, None, 0.0, np.array(x, dtype=float))

    # -- particle bookkeeping ------------------------------------------------

    def parent_state(self, p):
        """Live or finished state of a particle's parent (for views)."""
        if p.parent is None:
            return None
        word = p.parent.word
        live = self.alive.get(word)
        return live if live is not None else self._done_by_label.get(word)

    def _spawn(self, label: Label, parent: Label | None, birth: float, x):
        p = _Live(label, parent, birth, x, self.scalar)
        p.brownian = self.rng.stream(self.replica, label, "brownian")
        p.events = self.rng.stream(self.replica, label, "event")
        self.alive[label.word] = p
        self.total_ever += 1
        if self.total_ever > self.guard_cap:
            raise ExplosionError(self.replica, birth, self.total_ever, self.guard_cap)
        self._schedule_candidate(p, birth)
        return p

    def _schedule_candidate(self, p: _Live, from_time: float):
        if self.gamma_bar <= 0.0:
            return
        tau = from_time + p.events.standard_exponential() / self.gamma_bar
        if tau <= self.horizon:
            heapq.heappush(self.heap, (tau, p.label.word))

    def _advance(self, p: _Live, t_new: float):
        dt = t_new - p.cur_t
        if dt <= 0.0:
            return
        if p.normals is None or p.n_idx >= self.block:
            if self.scalar:
                p.normals = p.brownian.standard_normal(self.block).tolist()
            else:
                p.normals = p.brownian.standard_normal((self.block, self.dim))
            p.n_idx = 0
        xi = p.normals[p.n_idx]
        p.n_idx += 1
        if self.scalar:
            p.xf = p.xf + p.bf * dt + p.sf * math.sqrt(dt) * xi
            p.xs.append(p.xf)
        else:
            p.x = p.x + p.drift * dt + math.sqrt(dt) * (p.sigma @ xi)
            p.xs.append(p.x)
        p.cur_t = t_new
        p.ts.append(t_new)

    def _finish(self, p: _Live, death: float | None, offspring: int | None):
        rec = ParticleRecord(
            label=p.label, parent=p.parent, birth=p.birth, death=death,
            offspring_count=offspring,
            times=np.array(p.ts),
            positions=np.array(p.xs, dtype=float).reshape(len(p.ts), self.dim),
        )
        self.finished.append(rec)
        self._done_by_label[p.label.word] = rec

    # -- stepping ------------------------------------------------------------

    def _freeze_one(self, p: _Live, step, t: float):
        view = _LiveView(self, p, t)
        drift = np.asarray(step.drift(view), dtype=float)
        sigma = np.asarray(step.diffusion(view), dtype=float)
        if self.scalar:
            p.bf = float(drift[0])
            p.sf = float(sigma[0, 0])
        else:
            p.drift = drift
            p.sigma = sigma

    def freeze_coefficients(self, step, t0: float):
        if getattr(step, "uniform_in_space", False):
            drift = np.asarray(step.drift(None), dtype=float)
            sigma = np.asarray(step.diffusion(None), dtype=float)
            if self.scalar:
                bf, sf = float(drift[0]), float(sigma[0, 0])
                for p in self.alive.values():
                    p.bf = bf
                    p.sf = sf
            else:
                for p in self.alive.values():
                    p.drift = drift
                    p.sigma = sigma
        else:
            for p in self.alive.values():
                self._freeze_one(p, step, t0)

    def run_step(self, step, t0: float, t1: float):
        """Process all candidate events in (t0, t1], then advance survivors."""
        heap = self.heap
        while heap and heap[0][0] <= t1:
            tau, word = heapq.heappop(heap)
            p = self.alive.get(word)
            if p is None:
                continue  # defensive: no stale candidates by construction
            z = p.events.uniform(0.0, self.gamma_bar)
            view = _LiveView(self, p, tau)
            # Rate evaluated on the step-start-frozen path (the view clamps
            # to the last recorded sample), consistent with freezing all
            # coefficients at interval starts.  Rejected candidates leave no
            # trace on the trajectory.
            gamma = step.death_rate(tau, view)
            if z <= gamma:
                self._advance(p, tau)
                u = float(self.rng.stream(self.replica, p.label, "offspring").uniform())
                masses = step.progeny(tau, view)
                count = offspring_interval_index(u, masses)
                self.event_log.append((tau, str(p.label), True, count))
                del self.alive[word]
                self._finish(p, death=tau, offspring=count)
                birth_x = p.xf if self.scalar else p.x.copy()
                for i in range(1, count + 1):
                    child = self._spawn(p.label.child(i), p.label, tau,
                                        np.array([birth_x]) if self.scalar else birth_x)
                    self._freeze_one(child, step, tau)
            else:
                self.event_log.append((tau, str(p.label), False, -1))
                self._schedule_candidate(p, tau)
        for p in self.alive.values():
            self._advance(p, t1)

    def finalize(self) -> TreePath:
        for p in self.alive.values():
            self._finish(p, death=None, offspring=None)
        return TreePath(self.finished, horizon=self.horizon, dim=self.dim)


def simulate_tree(ic: InitialCondition, coeffs: CoefficientSet, env: EnvironmentMeasure,
                  grid: SimulationGrid, rng: RandomnessSource, replica: int = 0,
                  guard_cap: int = DEFAULT_EXPLOSION_CAP, with_event_log: bool = False):
    """One branching diffusion under a frozen environment measure.

    The environment is consumed stopped at each step start; candidate death
    times inside a step are thinned against the rate evaluated at the
    candidate time with the particle path advanced to that time.
    """
    if env.horizon < grid.horizon:
        raise ValueError("environment horizon shorter than the simulation horizon")
    initial = ic.sample(rng.stream(replica, Label(()), "init"))
    sim = _TreeSim(initial, coeffs, grid, rng, replica, guard_cap)
    times = grid.times
    for j in range(len(times) - 1):
        t0, t1 = float(times[j]), float(times[j + 1])
        step = coeffs.begin_step(t0, pushforward(env, t0))
        sim.freeze_coefficients(step, t0)
        sim.run_step(step, t0, t1)
    tree = sim.finalize()
    if with_event_log:
        return tree, tuple(sim.event_log)
    return tree


def simulate_replicas(ic, coeffs, env, grid, rng, replicas: int,
                      guard_cap: int = DEFAULT_EXPLOSION_CAP, workers: int = 1,
                      reduce=None) -> list:
    """Independent replicas of ``simulate_tree`` with per-replica streams.

    Results are ordered by replica index and bit-identical regardless of
    ``workers``.  ``reduce`` maps each finished tree to a summary before
    collection (use it to keep memory flat on large Monte Carlo runs).
    """
    def run_one(i: int):
        tree = simulate_tree(ic, coeffs, env, grid, rng, replica=i, guard_cap=guard_cap)
        return reduce(tree) if reduce is not None else tree

    if workers <= 1:
        return [run_one(i) for i in range(replicas)]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_one, range(replicas)))


# ---------------------------------------------------------------------------
# Interacting system
# ---------------------------------------------------------------------------


class _PartialRecordView:
    """Record-shaped view of a live particle (for snapshot configurations)."""

    __slots__ = ("label", "_ts", "_xs", "_dim")

    def __init__(self, p: _Live, dim: int):
        self.label = p.label
        self._ts = np.asarray(p.ts)
        self._xs = np.asarray(p.xs).reshape(len(p.ts), dim)
        self._dim = dim

    def position_at(self, t: float) -> np.ndarray:
        out = np.empty(self._dim)
        for j in range(self._dim):
            out[j] = np.interp(t, self._ts, self._xs[:, j])
        return out


class _PartialPath:
    """Read-only view of a tree under construction, valid for times <= now."""

    __slots__ = ("_sim", "now", "horizon", "dim")

    def __init__(self, sim: _TreeSim, now: float):
        self._sim = sim
        self.now = now
        self.horizon = sim.horizon
        self.dim = sim.dim

    def alive_records(self, t: float):
        t = min(t, self.now)
        out = []
        for rec in self._sim.finished:
            if rec.birth <= t and (rec.death is None or t < rec.death):
                out.append(rec)
        for p in self._sim.alive.values():
            if p.birth <= t:
                out.append(_PartialRecordView(p, self.dim))
        return out


class SnapshotEnvironment:
    """Empirical measure of an interacting system frozen at a step start.

    Implements the slice of the environment-measure interface that
    coefficient families consume (clamp, population mean, barycenter, and
    snapshot pairings); population and barycenter at the freeze time come
    straight from the live simulation state.
    """

    __slots__ = ("_sims", "stop_time", "dim", "horizon", "weights", "_cache")

    def __init__(self, sims: list[_TreeSim], t0: float):
        self._sims = sims
        self.stop_time = t0
        self.dim = sims[0].dim
        self.horizon = sims[0].horizon
        self.weights = np.full(len(sims), 1.0 / len(sims))
        self._cache: dict = {}

    def clamp(self, t: float) -> float:
        return min(t, self.stop_time)

    @property
    def paths(self):
        return tuple(_PartialPath(sim, self.stop_time) for sim in self._sims)

    def __len__(self):
        return len(self._sims)

    def population_mean(self, t: float) -> float:
        u = self.clamp(t)
        if u == self.stop_time:
            return sum(len(sim.alive) for sim in self._sims) / len(self._sims)
        key = ("pop", u)
        if key not in self._cache:
            total = sum(len(path.alive_records(u)) for path in self.paths)
            self._cache[key] = total / len(self._sims)
        return self._cache[key]

    def barycenter(self, t: float) -> np.ndarray:
        u = self.clamp(t)
        if u == self.stop_time:
            acc = np.zeros(self.dim)
            count = 0
            for sim in self._sims:
                for p in sim.alive.values():
                    acc += p.x
                    count += 1
            return acc / count if count else acc
        key = ("bary", u)
        if key not in self._cache:
            acc = np.zeros(self.dim)
            count = 0
            for path in self.paths:
                for rec in path.alive_records(u):
                    acc += rec.position_at(u)
                    count += 1
            self._cache[key] = acc / count if count else acc
        return self._cache[key]


def simulate_interacting(n: int, ic: InitialCondition, coeffs: CoefficientSet,
                         grid: SimulationGrid, rng: RandomnessSource,
                         guard_cap: int = DEFAULT_EXPLOSION_CAP,
                         workers: int = 1) -> list[TreePath]:
    """n trees evolved synchronously, interacting through their empirical
    measure frozen at the start of every grid step.

    Initial configurations are iid draws; tree i uses streams keyed by
    replica index i, so a non-interacting coefficient set reproduces
    ``simulate_tree`` replicas bit-for-bit.
    """
    if n < 1:
        raise ValueError("need at least one tree")
    sims = []
    for i in range(n):
        initial = ic.sample(rng.stream(i, Label(()), "init"))
        sims.append(_TreeSim(initial, coeffs, grid, rng, replica=i, guard_cap=guard_cap))

    times = grid.times

    def tree_step(sim: _TreeSim, step, t0: float, t1: float):
        sim.freeze_coefficients(step, t0)
        sim.run_step(step, t0, t1)

    pool = None
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        pool = ThreadPoolExecutor(max_workers=workers)
    try:
        for j in range(len(times) - 1):
            t0, t1 = float(times[j]), float(times[j + 1])
            snapshot = SnapshotEnvironment(sims, t0)
            step = coeffs.begin_step(t0, snapshot)
            if pool is None:
                for sim in sims:
                    tree_step(sim, step, t0, t1)
            else:
                list(pool.map(lambda sim: tree_step(sim, step, t0, t1), sims))
            total = sum(sim.total_ever for sim in sims)
            if total > guard_cap:
                raise ExplosionError(-1, t1, total, guard_cap)
    finally:
        if pool is not None:
            pool.shutdown()
    return [sim.finalize() for sim in sims]


def frozen_initial_environment(ic: InitialCondition, grid: SimulationGrid,
                               rng: RandomnessSource, replicas: int) -> EnvironmentMeasure:
    """Cheapest admissible environment: initial configurations frozen in
    place over the whole horizon (no motion, no branching).  Uses the same
    per-replica init streams as the simulators, which is what couples it
    to later fixed-point iterates."""
    paths = []
    for i in range(replicas):
        cfg = ic.sample(rng.stream(i, Label(()), "init"))
        records = []
        for label, x in cfg:
            times = np.array([0.0, grid.horizon])
            positions = np.vstack([x, x])
            records.append(ParticleRecord(label=label, parent=None, birth=0.0,
                                          death=None, offspring_count=None,
                                          times=times, positions=positions))
        paths.append(TreePath(records, horizon=grid.horizon, dim=ic.dim))
    return EnvironmentMeasure(paths)
