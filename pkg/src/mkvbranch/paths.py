"""Tree-valued paths: per-particle life records, snapshots, stopping, metrics.

A simulated tree is stored as a set of particle records.  Each record holds
the particle's lifespan and its sampled trajectory; positions between
samples are piecewise linear, so the uniform distance between two stored
paths is attained on the finite set of sample times plus left limits at
branching times and can be computed exactly.

Snapshot convention at a branching time: the parent is already gone, the
offspring are present (paths are right-continuous with left limits).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .genealogy import Label, ParticleConfiguration

__all__ = [
    "ParticleRecord",
    "TreePath",
    "configuration_at",
    "stop",
    "path_distance",
    "path_distance_t",
    "sup_population",
    "total_ever_alive",
    "write_tree_csv",
    "read_tree_csv",
]


@dataclass(slots=True)
class ParticleRecord:
    """One particle's life: lineage, lifespan, and sampled trajectory.

    ``death`` and ``offspring_count`` are both None exactly when the
    particle is still alive at the horizon.  ``times`` runs from the birth
    time to the death time (or horizon) and ``positions`` is aligned,
    shape (len(times), d).
    """

    label: Label
    parent: Label | None
    birth: float
    death: float | None
    offspring_count: int | None
    times: np.ndarray
    positions: np.ndarray

    def position_at(self, t: float) -> np.ndarray:
        """Piecewise-linear position at t, clamped to the record's span."""
        out = np.empty(self.positions.shape[1])
        for j in range(self.positions.shape[1]):
            out[j] = np.interp(t, self.times, self.positions[:, j])
        return out

    @property
    def alive_at_horizon(self) -> bool:
        return self.death is None


class TreePath:
    """A branching-diffusion sample path over [0, T].

    Attributes:
        records: all particles ever alive, sorted by (birth, label).
        horizon: right endpoint T of the time interval.
        dim: spatial dimension d.
        sample_times: sorted union of all trajectory sample times (always
            includes 0 and T and every birth/death time).
        event_times: sorted branching times (births after 0 and deaths).
    """

    __slots__ = ("records", "horizon", "dim", "sample_times", "event_times", "_by_label",
                 "_lifespans", "_sampler")

    def __init__(self, records, horizon: float, dim: int, validate: bool = True):
        recs = sorted(records, key=lambda r: (r.birth, r.label.word))
        self.records: tuple[ParticleRecord, ...] = tuple(recs)
        self.horizon = float(horizon)
        self.dim = int(dim)
        self._by_label = {r.label: r for r in self.records}
        times = [np.array([0.0, self.horizon])]
        events = []
        for r in self.records:
            times.append(r.times)
            if r.birth > 0.0:
                events.append(r.birth)
            if r.death is not None:
                events.append(r.death)
        self.sample_times = np.unique(np.concatenate(times))
        self.event_times = np.unique(np.array(events)) if events else np.empty(0)
        self._lifespans = None
        self._sampler = None
        if validate:
            self._validate()

    def _validate(self) -> None:
        if len(self._by_label) != len(self.records):
            raise ValueError("duplicate particle labels")
        for r in self.records:
            if r.positions.shape != (len(r.times), self.dim):
                raise ValueError(f"trajectory shape mismatch for {r.label}")
            if len(r.times) == 0 or r.times[0] != r.birth:
                raise ValueError(f"trajectory of {r.label} must start at its birth time")
            end = self.horizon if r.death is None else r.death
            if r.times[-1] != end:
                raise ValueError(f"trajectory of {r.label} must end at death/horizon")
            if (r.death is None) != (r.offspring_count is None):
                raise ValueError(f"{r.label}: offspring count set iff the particle died")
            if r.death is not None and not (r.birth < r.death <= self.horizon):
                raise ValueError(f"{r.label}: death time outside (birth, horizon]")
            if r.parent is None:
                if r.birth != 0.0:
                    raise ValueError(f"{r.label}: initial particles are born at 0")
            else:
                parent_rec = self._by_label.get(r.parent)
                if parent_rec is None:
                    raise ValueError(f"{r.label}: parent record missing")
                if parent_rec.death != r.birth:
                    raise ValueError(f"{r.label}: born at {r.birth}, parent died at {parent_rec.death}")
                last = r.label.word[-1]
                if parent_rec.offspring_count is None or not (1 <= last <= parent_rec.offspring_count):
                    raise ValueError(f"{r.label}: not covered by parent's offspring count")
                if not np.array_equal(r.positions[0], parent_rec.positions[-1]):
                    raise ValueError(f"{r.label}: birth position differs from parent's death position")

    def record(self, label: Label) -> ParticleRecord:
        return self._by_label[label]

    def alive_records(self, t: float):
        """Records alive at t under the right-continuous convention."""
        out = []
        for r in self.records:
            if r.birth <= t and (r.death is None or t < r.death):
                out.append(r)
        return out

    def position_of(self, label: Label, t: float) -> np.ndarray:
        """Position of a particle's line at any t <= its death, delegating
        to the ancestor chain before the particle's own birth."""
        r = self._by_label[label]
        while t < r.birth:
            if r.parent is None:
                break
            r = self._by_label[r.parent]
        return r.position_at(t)

    def lifespans(self) -> tuple[np.ndarray, np.ndarray]:
        """(births, deaths) arrays over records, +inf for survivors; cached."""
        if self._lifespans is None:
            births = np.array([r.birth for r in self.records])
            deaths = np.array([np.inf if r.death is None else r.death for r in self.records])
            self._lifespans = (births, deaths)
        return self._lifespans

    def sampler(self) -> "PathSampler":
        """Cached vectorized position evaluator for all records at once."""
        if self._sampler is None:
            self._sampler = PathSampler(self)
        return self._sampler

    def population_curve(self, times: np.ndarray) -> np.ndarray:
        """Number of particles alive at each query time (right-continuous)."""
        births, deaths = self.lifespans()
        t = np.asarray(times, dtype=float)[:, None]
        return ((births[None, :] <= t) & (t < deaths[None, :])).sum(axis=1)


def configuration_at(p: TreePath, t: float) -> ParticleConfiguration:
    """Population snapshot at t (offspring present at their birth time)."""
    if not (0.0 <= t <= p.horizon):
        raise ValueError(f"time {t} outside [0, {p.horizon}]")
    return ParticleConfiguration(
        [(r.label, r.position_at(t)) for r in p.alive_records(t)], dim=p.dim
    )


def configuration_before(p: TreePath, t: float) -> ParticleConfiguration:
    """Left limit of the population at t > 0: particles dying at t are still
    present, particles born at t are not."""
    if not (0.0 < t <= p.horizon):
        raise ValueError(f"left limit needs a time in (0, {p.horizon}]")
    atoms = []
    for r in p.records:
        death = np.inf if r.death is None else r.death
        if r.birth < t <= death:
            atoms.append((r.label, r.position_at(t)))
    return ParticleConfiguration(atoms, dim=p.dim)


def stop(p: TreePath, t: float) -> TreePath:
    """The path frozen from time t on: later events removed, positions of
    surviving particles held constant, horizon unchanged."""
    if not (0.0 <= t <= p.horizon):
        raise ValueError(f"time {t} outside [0, {p.horizon}]")
    new_records = []
    for r in p.records:
        if r.birth > t:
            continue
        if r.death is not None and r.death <= t:
            new_records.append(r)
            continue
        # Alive at t: truncate and hold the position constant to the horizon.
        keep = r.times <= t
        times = r.times[keep]
        positions = r.positions[keep]
        if times[-1] != t:
            times = np.append(times, t)
            positions = np.vstack([positions, r.position_at(t)[None, :]])
        if times[-1] != p.horizon:
            times = np.append(times, p.horizon)
            positions = np.vstack([positions, positions[-1][None, :]])
        new_records.append(
            ParticleRecord(
                label=r.label, parent=r.parent, birth=r.birth, death=None,
                offspring_count=None, times=times, positions=positions,
            )
        )
    return TreePath(new_records, horizon=p.horizon, dim=p.dim)


def sup_population(p: TreePath) -> int:
    """Largest population size over the whole path."""
    probes = np.concatenate([[0.0], p.event_times])
    return int(p.population_curve(probes).max())


def total_ever_alive(p: TreePath) -> int:
    """Number of particles ever alive (one record per particle)."""
    return len(p.records)


# ---------------------------------------------------------------------------
# Dense evaluation: vectorized positions and alive masks of all records.
# Shared by the uniform metric here, optimal transport, and the generator
# quadrature in diagnostics.
# ---------------------------------------------------------------------------


class PathSampler:
    """Vectorized evaluator: positions of every record at arbitrary times.

    All record trajectories are interpolated once onto the path's own
    sample-time knots; queries then reduce to a searchsorted plus one
    linear blend, with end clamping.  Since stored paths kink only at their
    own sample times, the blend is exact.
    """

    __slots__ = ("knots", "pos", "births", "deaths", "labels", "col", "event_times", "dim")

    def __init__(self, p: TreePath):
        self.knots = p.sample_times
        self.dim = p.dim
        n = len(p.records)
        m = len(self.knots)
        self.pos = np.empty((m, n, p.dim))
        for i, r in enumerate(p.records):
            for j in range(p.dim):
                self.pos[:, i, j] = np.interp(self.knots, r.times, r.positions[:, j])
        self.births, self.deaths = p.lifespans()
        self.labels = tuple(r.label for r in p.records)
        self.col = {r.label.word: i for i, r in enumerate(p.records)}
        self.event_times = p.event_times

    def positions_at(self, times: np.ndarray, cols: np.ndarray | None = None) -> np.ndarray:
        """(len(times), n_records, d) clamped-interpolated positions, or a
        column subset when ``cols`` is given.

        Exact (no blending error) whenever a query time hits a knot.  Query
        times must lie in [0, horizon] (the knots' range), which every
        caller guarantees.
        """
        idx = np.searchsorted(self.knots, times, side="right") - 1
        np.minimum(idx, len(self.knots) - 2, out=idx)
        t0 = self.knots[idx]
        t1 = self.knots[idx + 1]
        w = (times - t0) / (t1 - t0)
        if cols is None:
            lo = self.pos[idx]
            hi = self.pos[idx + 1]
        else:
            lo = self.pos[np.ix_(idx, cols)]
            hi = self.pos[np.ix_(idx + 1, cols)]
        return lo * (1.0 - w)[:, None, None] + hi * w[:, None, None]

    def alive_right(self, times: np.ndarray, cols: np.ndarray | None = None) -> np.ndarray:
        births = self.births if cols is None else self.births[cols]
        deaths = self.deaths if cols is None else self.deaths[cols]
        t = times[:, None]
        return (births[None, :] <= t) & (t < deaths[None, :])

    def alive_left(self, times: np.ndarray, cols: np.ndarray | None = None) -> np.ndarray:
        births = self.births if cols is None else self.births[cols]
        deaths = self.deaths if cols is None else self.deaths[cols]
        t = times[:, None]
        return (births[None, :] < t) & (t <= deaths[None, :])

    def alive_masks(self, times: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(right, left) boolean masks over (times, records)."""
        return self.alive_right(times), self.alive_left(times)


def pair_distance_from_samplers(s1: PathSampler, s2: PathSampler,
                                times: np.ndarray) -> float:
    """Uniform distance given a shared evaluation set that contains both
    paths' knots (up to the truncation point, when truncating)."""
    ip, iq = [], []
    for k, i in s1.col.items():
        j = s2.col.get(k)
        if j is not None:
            ip.append(i)
            iq.append(j)
    r1 = s1.alive_right(times)
    r2 = s2.alive_right(times)
    c1r, c2r = r1.sum(axis=1), r2.sum(axis=1)

    event_times = np.union1d(s1.event_times, s2.event_times)
    if len(event_times) and times[-1] < event_times[-1]:
        event_times = event_times[event_times <= times[-1]]
    event_rows = None
    if len(event_times):
        event_rows = np.searchsorted(times, event_times)
        event_rows = event_rows[event_rows < len(times)]
        event_rows = event_rows[np.isin(times[event_rows], event_times)]
        if not len(event_rows):
            event_rows = None

    if not ip:
        best = float((c1r + c2r).max())
        if event_rows is not None:
            tl = times[event_rows]
            l1 = s1.alive_left(tl)
            l2 = s2.alive_left(tl)
            best = max(best, float((l1.sum(axis=1) + l2.sum(axis=1)).max()))
        return best

    ip_a, iq_a = np.array(ip), np.array(iq)
    pos1 = s1.positions_at(times, cols=ip_a)
    pos2 = s2.positions_at(times, cols=iq_a)
    diff = pos1 - pos2
    if diff.shape[2] == 1:
        gaps = np.abs(diff[:, :, 0])
    else:
        gaps = np.sqrt((diff * diff).sum(axis=2))
    np.minimum(gaps, 1.0, out=gaps)
    both = r1[:, ip_a] & r2[:, iq_a]
    right = (gaps * both).sum(axis=1) + c1r + c2r - 2 * both.sum(axis=1)
    best = float(right.max())
    if event_rows is not None:
        tl = times[event_rows]
        l1 = s1.alive_left(tl)
        l2 = s2.alive_left(tl)
        both_l = l1[:, ip_a] & l2[:, iq_a]
        left = (
            (gaps[event_rows] * both_l).sum(axis=1)
            + l1.sum(axis=1) + l2.sum(axis=1) - 2 * both_l.sum(axis=1)
        )
        best = max(best, float(left.max()))
    return best


def _check_compatible(p1: TreePath, p2: TreePath) -> None:
    if p1.horizon != p2.horizon:
        raise ValueError(f"horizon mismatch: {p1.horizon} vs {p2.horizon}")
    if p1.dim != p2.dim:
        raise ValueError(f"dimension mismatch: {p1.dim} vs {p2.dim}")


def shared_eval_times(knots1: np.ndarray, knots2: np.ndarray, t: float | None) -> np.ndarray:
    times = np.union1d(knots1, knots2)
    if t is None:
        return times
    kept = times[times <= t]  # sample times always contain 0, so nonempty
    if kept[-1] != t:
        kept = np.append(kept, t)
    return kept


def path_distance(p1: TreePath, p2: TreePath) -> float:
    """Uniform distance: largest configuration distance over [0, T]."""
    _check_compatible(p1, p2)
    s1, s2 = p1.sampler(), p2.sampler()
    return pair_distance_from_samplers(s1, s2, shared_eval_times(s1.knots, s2.knots, None))


def path_distance_t(p1: TreePath, p2: TreePath, t: float) -> float:
    """Uniform distance of the paths frozen at t (truncated metric)."""
    _check_compatible(p1, p2)
    if not (0.0 <= t <= p1.horizon):
        raise ValueError(f"time {t} outside [0, {p1.horizon}]")
    s1, s2 = p1.sampler(), p2.sampler()
    return pair_distance_from_samplers(s1, s2, shared_eval_times(s1.knots, s2.knots, t))


# ---------------------------------------------------------------------------
# CSV export / import (two-table schema: life records + trajectories)
# ---------------------------------------------------------------------------


def write_tree_csv(p: TreePath, records_file, traj_file) -> None:
    """Write the two-table representation: records.csv and traj.csv."""
    with open(records_file, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "parent", "birth", "death", "offspring_count"])
        for r in p.records:
            w.writerow([
                str(r.label),
                "" if r.parent is None else str(r.parent),
                repr(r.birth),
                "" if r.death is None else repr(r.death),
                "" if r.offspring_count is None else r.offspring_count,
            ])
    with open(traj_file, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "time"] + [f"x_{j+1}" for j in range(p.dim)])
        for r in p.records:
            for i, t in enumerate(r.times):
                w.writerow([str(r.label), repr(float(t))] + [repr(float(v)) for v in r.positions[i]])


def read_tree_csv(records_file, traj_file, horizon: float, dim: int) -> TreePath:
    """Rebuild a TreePath from the two-table CSV representation."""
    traj: dict[str, list[tuple[float, list[float]]]] = {}
    with open(traj_file, newline="") as fh:
        for row in csv.DictReader(fh):
            traj.setdefault(row["label"], []).append(
                (float(row["time"]), [float(row[f"x_{j+1}"]) for j in range(dim)])
            )
    records = []
    with open(records_file, newline="") as fh:
        for row in csv.DictReader(fh):
            pts = sorted(traj.get(row["label"], []))
            records.append(
                ParticleRecord(
                    label=Label.parse(row["label"]),
                    parent=None if row["parent"] == "" else Label.parse(row["parent"]),
                    birth=float(row["birth"]),
                    death=None if row["death"] == "" else float(row["death"]),
                    offspring_count=None if row["offspring_count"] == "" else int(row["offspring_count"]),
                    times=np.array([t for t, _ in pts]),
                    positions=np.array([x for _, x in pts]).reshape(len(pts), dim),
                )
            )
    return TreePath(records, horizon=horizon, dim=dim)
