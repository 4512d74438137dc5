"""Wasserstein-1 distances for the simulation engine.

Two flavors are needed: distances between finitely supported measures on
tree paths (ground metric = uniform path distance), and distances between
probability vectors on the nonnegative integers (offspring counts).

Path-measure distances come in an exact mode (optimal assignment, only for
equal-size uniform supports) and an approximate mode (entropic scaling in
the log domain; the returned value is the cost of the rounded feasible
plan, hence a certified upper bound of the true distance).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from .paths import TreePath, pair_distance_from_samplers, shared_eval_times, stop

__all__ = [
    "EnvironmentMeasure",
    "CountingDistribution",
    "pushforward",
    "w1_paths",
    "w1_paths_detail",
    "W1Result",
    "w1_counting",
    "w1_counting_via_intervals",
    "path_cost_matrix",
    "DEFAULT_EXACT_SUPPORT_LIMIT",
    "DEFAULT_SINKHORN_ITERATIONS",
]

DEFAULT_EXACT_SUPPORT_LIMIT = 512
DEFAULT_SINKHORN_ITERATIONS = 500
WEIGHT_TOLERANCE = 1e-12


class EnvironmentMeasure:
    """Finitely supported probability measure on tree paths.

    Weights default to uniform.  ``stop_time`` marks a measure whose atoms
    are to be read as frozen from that time on; the freeze is applied
    lazily (snapshots clamp their query time) since stopping every support
    path per evaluation would dominate the simulation cost.
    """

    __slots__ = ("paths", "weights", "stop_time", "_curve_cache")

    def __init__(self, paths, weights=None, stop_time: float | None = None):
        self.paths: tuple[TreePath, ...] = tuple(paths)
        if not self.paths:
            raise ValueError("environment measure needs at least one support path")
        horizon = self.paths[0].horizon
        dim = self.paths[0].dim
        for p in self.paths:
            if p.horizon != horizon or p.dim != dim:
                raise ValueError("support paths must share horizon and dimension")
        if weights is None:
            w = np.full(len(self.paths), 1.0 / len(self.paths))
        else:
            w = np.asarray(weights, dtype=float)
            if w.shape != (len(self.paths),):
                raise ValueError("one weight per support path required")
            if (w < 0).any() or abs(w.sum() - 1.0) > WEIGHT_TOLERANCE:
                raise ValueError("weights must be nonnegative and sum to 1")
        w.setflags(write=False)
        self.weights = w
        self.stop_time = stop_time
        self._curve_cache: dict = {}

    @property
    def horizon(self) -> float:
        return self.paths[0].horizon

    @property
    def dim(self) -> int:
        return self.paths[0].dim

    def __len__(self) -> int:
        return len(self.paths)

    def clamp(self, t: float) -> float:
        """Largest time at which this measure still carries information."""
        return t if self.stop_time is None else min(t, self.stop_time)

    def uniform(self) -> bool:
        return bool(np.allclose(self.weights, 1.0 / len(self.paths), atol=1e-15))

    # -- aggregate summaries used by mean-field coefficient families --------

    def population_mean(self, t: float) -> float:
        """Mean number of living particles at t under this measure."""
        u = self.clamp(t)
        key = ("pop", u)
        if key not in self._curve_cache:
            total = 0.0
            for w, p in zip(self.weights, self.paths):
                total += w * float(p.population_curve(np.array([u]))[0])
            self._curve_cache[key] = total
        return self._curve_cache[key]

    def barycenter(self, t: float) -> np.ndarray:
        """Barycenter of all living particles pooled across the support
        (zero vector when no particle is alive)."""
        u = self.clamp(t)
        key = ("bary", u)
        if key not in self._curve_cache:
            acc = np.zeros(self.dim)
            mass = 0.0
            for w, p in zip(self.weights, self.paths):
                for r in p.alive_records(u):
                    acc += w * r.position_at(u)
                    mass += w
            self._curve_cache[key] = acc / mass if mass > 0 else acc
        return self._curve_cache[key]

    def population_mean_curve(self, times: np.ndarray) -> np.ndarray:
        key = ("popcurve", times.tobytes())
        if key not in self._curve_cache:
            clamped = times if self.stop_time is None else np.minimum(times, self.stop_time)
            acc = np.zeros(len(times))
            for w, p in zip(self.weights, self.paths):
                acc += w * p.population_curve(clamped)
            self._curve_cache[key] = acc
        return self._curve_cache[key]

    def barycenter_curve(self, times: np.ndarray) -> np.ndarray:
        key = ("barycurve", times.tobytes())
        if key not in self._curve_cache:
            clamped = times if self.stop_time is None else np.minimum(times, self.stop_time)
            acc = np.zeros((len(times), self.dim))
            mass = np.zeros(len(times))
            for w, p in zip(self.weights, self.paths):
                s = p.sampler()
                alive, _ = s.alive_masks(clamped)
                acc += w * (s.positions_at(clamped) * alive[:, :, None]).sum(axis=1)
                mass += w * alive.sum(axis=1)
            out = np.zeros_like(acc)
            nz = mass > 0
            out[nz] = acc[nz] / mass[nz, None]
            self._curve_cache[key] = out
        return self._curve_cache[key]


def pushforward(m: EnvironmentMeasure, t: float) -> EnvironmentMeasure:
    """The measure of paths frozen at t (lazily stopped view).

    The view shares the parent's summary cache: cached quantities are keyed
    by the clamped query time, so they are valid across stop times.  This
    keeps the per-step cost of mean-field coefficient evaluation flat over
    the many replicas that share one frozen environment.
    """
    if not (0.0 <= t <= m.horizon):
        raise ValueError(f"time {t} outside [0, {m.horizon}]")
    view = EnvironmentMeasure.__new__(EnvironmentMeasure)
    view.paths = m.paths
    view.weights = m.weights
    view.stop_time = t if m.stop_time is None else min(m.stop_time, t)
    view._curve_cache = m._curve_cache
    return view


def materialize(m: EnvironmentMeasure) -> EnvironmentMeasure:
    """Apply a lazy stop for real (support paths physically truncated)."""
    if m.stop_time is None:
        return m
    return EnvironmentMeasure([stop(p, m.stop_time) for p in m.paths], m.weights)


class _CostPanel:
    """Per-path data reused across all pairs of one cost matrix: alive mask,
    count, and exact positions on the common knot set, plus the path's own
    off-grid knots and event times."""

    __slots__ = ("sampler", "alive", "count", "pos", "extras", "events")

    def __init__(self, sampler, common: np.ndarray, cut: float | None):
        self.sampler = sampler
        self.alive = sampler.alive_right(common)
        self.count = self.alive.sum(axis=1)
        # Piecewise-linear interpolation gives exact path values anywhere,
        # so the common set need not be a subset of this path's knots.
        self.pos = sampler.positions_at(common)
        extras = sampler.knots[~np.isin(sampler.knots, common, assume_unique=True)]
        events = sampler.event_times
        if cut is not None:
            extras = extras[extras <= cut]
            events = events[events <= cut]
        self.extras = extras
        self.events = events


def _pair_cost(a: _CostPanel, b: _CostPanel, tail: np.ndarray) -> float:
    sa, sb = a.sampler, b.sampler
    ip, iq = [], []
    for k, i in sa.col.items():
        j = sb.col.get(k)
        if j is not None:
            ip.append(i)
            iq.append(j)
    shared = bool(ip)
    if shared:
        ip = np.array(ip)
        iq = np.array(iq)
        both = a.alive[:, ip] & b.alive[:, iq]
        diff = a.pos[:, ip, :] - b.pos[:, iq, :]
        gaps = np.abs(diff[:, :, 0]) if diff.shape[2] == 1 else np.sqrt((diff * diff).sum(axis=2))
        np.minimum(gaps, 1.0, out=gaps)
        vals = (gaps * both).sum(axis=1) + a.count + b.count - 2 * both.sum(axis=1)
        best = float(vals.max())
    else:
        best = float((a.count + b.count).max())

    # One interpolation pass covers the off-grid sample times (right values)
    # and the branching times (left limits).
    extras = np.concatenate([a.extras, b.extras, tail])
    jumps = np.concatenate([a.events, b.events])
    n_ex = len(extras)
    if n_ex + len(jumps) == 0:
        return best
    times = np.concatenate([extras, jumps])
    if shared:
        diff_e = sa.positions_at(times, cols=ip) - sb.positions_at(times, cols=iq)
        if diff_e.shape[2] == 1:
            g = np.abs(diff_e[:, :, 0])
        else:
            g = np.sqrt((diff_e * diff_e).sum(axis=2))
        np.minimum(g, 1.0, out=g)
    if n_ex:
        ra = sa.alive_right(extras)
        rb = sb.alive_right(extras)
        base = ra.sum(axis=1) + rb.sum(axis=1)
        if shared:
            both_e = ra[:, ip] & rb[:, iq]
            best = max(best, float(((g[:n_ex] * both_e).sum(axis=1)
                                    + base - 2 * both_e.sum(axis=1)).max()))
        else:
            best = max(best, float(base.max()))
    if len(jumps):
        la = sa.alive_left(jumps)
        lb = sb.alive_left(jumps)
        base = la.sum(axis=1) + lb.sum(axis=1)
        if shared:
            both_l = la[:, ip] & lb[:, iq]
            best = max(best, float(((g[n_ex:] * both_l).sum(axis=1)
                                    + base - 2 * both_l.sum(axis=1)).max()))
        else:
            best = max(best, float(base.max()))
    return best


def path_cost_matrix(m1: EnvironmentMeasure, m2: EnvironmentMeasure) -> np.ndarray:
    """Pairwise uniform path distances between the two supports, honoring
    lazy stop times (which must agree when both are set).

    All support paths share the run's uniform grid, so per-path panels on
    the common knot set are built once and each pair only adds its own few
    event times.
    """
    if m1.horizon != m2.horizon or m1.dim != m2.dim:
        raise ValueError("measures must share horizon and dimension")
    if m1.stop_time != m2.stop_time:
        m1, m2 = materialize(m1), materialize(m2)
    cut = m1.stop_time
    samplers1 = [p.sampler() for p in m1.paths]
    samplers2 = [p.sampler() for p in m2.paths]
    # Shared evaluation set: the knots every path has in common, or, when
    # mixed knot densities make that collapse, the densest path's knots
    # (per-pair extras then stay small either way).
    common = samplers1[0].knots
    for s in samplers1[1:] + samplers2:
        common = np.intersect1d(common, s.knots, assume_unique=True)
        if len(common) <= 2:
            break
    densest = max(samplers1 + samplers2, key=lambda s: len(s.knots)).knots
    if len(common) < 0.7 * len(densest):
        common = densest
    if cut is not None:
        common = common[common <= cut]
        tail = np.empty(0) if len(common) and common[-1] == cut else np.array([cut])
    else:
        tail = np.empty(0)
    panels1 = [_CostPanel(s, common, cut) for s in samplers1]
    panels2 = [_CostPanel(s, common, cut) for s in samplers2]
    cost = np.empty((len(panels1), len(panels2)))
    for i, pa in enumerate(panels1):
        for j, pb in enumerate(panels2):
            cost[i, j] = _pair_cost(pa, pb, tail)
    return cost


@dataclass(slots=True)
class W1Result:
    """Outcome of a path-measure distance evaluation."""

    value: float
    mode: str
    support_1: int
    support_2: int
    reg_eps: float | None = None
    sinkhorn_value: float | None = None
    iterations: int | None = None

    def __float__(self) -> float:
        return self.value


def _sinkhorn_upper_bound(cost: np.ndarray, r: np.ndarray, c: np.ndarray,
                          iterations: int) -> tuple[float, float, float]:
    """Log-domain entropic scaling plus rounding of the plan onto the
    transport polytope.  Returns (upper bound, regularized plan cost, eps)."""
    positive = cost[cost > 0]
    if positive.size == 0:
        return 0.0, 0.0, 0.0
    eps = 0.01 * float(np.median(positive))
    log_r = np.log(r)
    log_c = np.log(c)
    f = np.zeros(len(r))
    g = np.zeros(len(c))
    for _ in range(iterations):
        f = eps * (log_r - logsumexp((g[None, :] - cost) / eps, axis=1))
        g = eps * (log_c - logsumexp((f[:, None] - cost) / eps, axis=0))
    plan = np.exp((f[:, None] + g[None, :] - cost) / eps)
    sink_value = float((plan * cost).sum())
    # Round onto the feasible polytope: scale rows then columns below their
    # targets, and fill the residual with a rank-one correction.
    row = plan.sum(axis=1)
    plan = plan * np.minimum(1.0, r / np.where(row > 0, row, 1.0))[:, None]
    col = plan.sum(axis=0)
    plan = plan * np.minimum(1.0, c / np.where(col > 0, col, 1.0))[None, :]
    err_r = r - plan.sum(axis=1)
    err_c = c - plan.sum(axis=0)
    total = err_r.sum()
    if total > 0:
        plan = plan + np.outer(err_r, err_c) / total
    return float((plan * cost).sum()), sink_value, eps


def w1_paths_detail(m1: EnvironmentMeasure, m2: EnvironmentMeasure, mode: str = "auto",
                    exact_support_limit: int = DEFAULT_EXACT_SUPPORT_LIMIT,
                    sinkhorn_iterations: int = DEFAULT_SINKHORN_ITERATIONS,
                    cost: np.ndarray | None = None) -> W1Result:
    """Distance between two path measures with full reporting.

    exact mode: optimal assignment; requires equal support sizes with
    uniform weights.  approx mode: entropic scaling; value is the certified
    upper bound from the rounded plan.  auto picks exact when admissible
    within the support limit.
    """
    if mode not in ("exact", "approx", "auto"):
        raise ValueError(f"unknown mode {mode!r}")
    n1, n2 = len(m1), len(m2)
    exact_ok = n1 == n2 and m1.uniform() and m2.uniform()
    if mode == "exact" and not exact_ok:
        raise ValueError("exact mode needs equal support sizes with uniform weights")
    if mode == "auto":
        mode = "exact" if (exact_ok and max(n1, n2) <= exact_support_limit) else "approx"
    if cost is None:
        cost = path_cost_matrix(m1, m2)
    if mode == "exact":
        rows, cols = linear_sum_assignment(cost)
        value = float(cost[rows, cols].mean())
        return W1Result(value=value, mode="exact", support_1=n1, support_2=n2)
    keep1 = m1.weights > 0
    keep2 = m2.weights > 0
    ub, sink, eps = _sinkhorn_upper_bound(
        cost[np.ix_(keep1, keep2)], m1.weights[keep1], m2.weights[keep2],
        sinkhorn_iterations,
    )
    return W1Result(value=ub, mode="approx", support_1=n1, support_2=n2,
                    reg_eps=eps, sinkhorn_value=sink, iterations=sinkhorn_iterations)


def w1_paths(m1: EnvironmentMeasure, m2: EnvironmentMeasure, mode: str = "auto", **kwargs) -> float:
    """Distance between two path measures (see ``w1_paths_detail``)."""
    return w1_paths_detail(m1, m2, mode=mode, **kwargs).value


# ---------------------------------------------------------------------------
# Distances between offspring-count distributions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CountingDistribution:
    """Probability vector (p_0, ..., p_L) on {0, ..., L}."""

    masses: tuple[float, ...]

    def __post_init__(self):
        m = np.asarray(self.masses, dtype=float)
        if len(m) == 0 or (m < 0).any():
            raise ValueError("masses must be a nonempty nonnegative vector")
        if abs(m.sum() - 1.0) > WEIGHT_TOLERANCE:
            raise ValueError(f"masses sum to {m.sum()!r}, expected 1")
        object.__setattr__(self, "masses", tuple(float(v) for v in m))

    @classmethod
    def point(cls, count: int) -> "CountingDistribution":
        masses = [0.0] * (count + 1)
        masses[count] = 1.0
        return cls(tuple(masses))

    @property
    def support_bound(self) -> int:
        return len(self.masses) - 1

    def mean(self) -> float:
        return float(sum(l * p for l, p in enumerate(self.masses)))

    def cdf(self) -> np.ndarray:
        return np.cumsum(self.masses)


def _padded_cdfs(P: CountingDistribution, Q: CountingDistribution) -> tuple[np.ndarray, np.ndarray]:
    n = max(len(P.masses), len(Q.masses))
    cp = np.zeros(n)
    cq = np.zeros(n)
    cp[: len(P.masses)] = P.cdf()
    cp[len(P.masses):] = cp[len(P.masses) - 1]
    cq[: len(Q.masses)] = Q.cdf()
    cq[len(Q.masses):] = cq[len(Q.masses) - 1]
    return cp, cq


def w1_counting(P: CountingDistribution, Q: CountingDistribution) -> float:
    """Distance via cumulative distribution functions: sum of |F_P - F_Q|."""
    cp, cq = _padded_cdfs(P, Q)
    return float(np.abs(cp - cq).sum())


def w1_counting_via_intervals(P: CountingDistribution, Q: CountingDistribution) -> float:
    """Distance via the quantile overlap form: integrate |l - l'| over the
    overlaps of the two cumulative partitions of [0, 1)."""
    cp, cq = P.cdf(), Q.cdf()
    cuts = np.unique(np.concatenate([[0.0], cp, cq]))
    total = 0.0
    for a, b in zip(cuts, cuts[1:]):
        if b <= a:
            continue
        mid = 0.5 * (a + b)
        l1 = int(np.searchsorted(cp, mid, side="right"))
        l2 = int(np.searchsorted(cq, mid, side="right"))
        total += (b - a) * abs(l1 - l2)
    return total
