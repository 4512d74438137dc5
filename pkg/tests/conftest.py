"""Shared helpers: hand-built tree paths and random configuration pools."""
from __future__ import annotations

import numpy as np
import pytest

from mkvbranch.genealogy import Label, ParticleConfiguration
from mkvbranch.paths import ParticleRecord, TreePath


def constant_record(label, parent, birth, death, offspring, x, grid):
    """Record with a constant position over its lifespan on the given grid."""
    end = grid[-1] if death is None else death
    inner = grid[(grid > birth) & (grid < end)]
    times = np.unique(np.concatenate([[birth], inner, [end]]))
    x = np.atleast_1d(np.asarray(x, dtype=float))
    positions = np.tile(x, (len(times), 1))
    return ParticleRecord(label=label, parent=parent, birth=birth, death=death,
                          offspring_count=offspring, times=times, positions=positions)


def single_particle_path(x0=0.0, horizon=1.0, grid_n=9, dim=1):
    grid = np.linspace(0.0, horizon, grid_n)
    x = np.full(dim, x0, dtype=float)
    rec = constant_record(Label((1,)), None, 0.0, None, None, x, grid)
    return TreePath([rec], horizon=horizon, dim=dim)


def split_path(tau=0.5, n_children=2, x0=0.0, horizon=1.0, grid_n=9, dim=1):
    """Single initial particle that dies at tau leaving n_children copies."""
    grid = np.linspace(0.0, horizon, grid_n)
    x = np.full(dim, x0, dtype=float)
    root = Label((1,))
    recs = [constant_record(root, None, 0.0, tau, n_children, x, grid)]
    for i in range(1, n_children + 1):
        recs.append(constant_record(root.child(i), root, tau, None, None, x, grid))
    return TreePath(recs, horizon=horizon, dim=dim)


def random_tree_path(rng: np.random.Generator, horizon=1.0, grid_n=9, dim=1):
    """Small random genealogy with piecewise-linear random-walk positions."""
    grid = np.linspace(0.0, horizon, grid_n)

    def walk(times, x_start):
        steps = rng.normal(scale=0.3, size=(len(times) - 1, dim))
        return np.vstack([x_start, x_start + np.cumsum(steps, axis=0)])

    records = []

    def grow(label, parent, birth, x_start, depth):
        max_death = horizon
        dies = depth < 2 and rng.random() < 0.6 and birth < 0.8 * horizon
        death = None
        offspring = None
        if dies:
            death = float(rng.uniform(birth + 0.05, max_death - 0.01))
            offspring = int(rng.integers(0, 3))
        end = horizon if death is None else death
        inner = grid[(grid > birth) & (grid < end)]
        times = np.unique(np.concatenate([[birth], inner, [end]]))
        positions = walk(times, x_start)
        records.append(ParticleRecord(label=label, parent=parent, birth=birth,
                                      death=death, offspring_count=offspring,
                                      times=times, positions=positions))
        if dies:
            for i in range(1, offspring + 1):
                grow(label.child(i), label, death, positions[-1].copy(), depth + 1)

    for i in range(1, int(rng.integers(1, 3)) + 1):
        grow(Label((i,)), None, 0.0, rng.normal(size=dim), 0)
    return TreePath(records, horizon=horizon, dim=dim)


def random_antichain_labels(rng: np.random.Generator) -> list[Label]:
    """Random antichain: the current leaf set of a randomly grown label tree."""
    leaves = [Label((i,)) for i in range(1, int(rng.integers(1, 4)) + 1)]
    for _ in range(int(rng.integers(0, 4))):
        idx = int(rng.integers(0, len(leaves)))
        parent = leaves.pop(idx)
        if parent.depth >= 3:
            leaves.append(parent)
            continue
        for i in range(1, int(rng.integers(1, 4)) + 1):
            leaves.append(parent.child(i))
    return leaves


def random_configuration(rng: np.random.Generator, dim=1) -> ParticleConfiguration:
    labels = random_antichain_labels(rng)
    return ParticleConfiguration({k: rng.normal(size=dim) for k in labels}, dim=dim)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
