import itertools

import numpy as np
import pytest

from mkvbranch.paths import path_distance
from mkvbranch.transport import (
    CountingDistribution,
    EnvironmentMeasure,
    path_cost_matrix,
    pushforward,
    w1_counting,
    w1_counting_via_intervals,
    w1_paths,
    w1_paths_detail,
)

from conftest import random_tree_path, single_particle_path


def brute_force_assignment(cost):
    """Independent oracle: minimum over all permutations."""
    n = cost.shape[0]
    best = np.inf
    for perm in itertools.permutations(range(n)):
        best = min(best, sum(cost[i, perm[i]] for i in range(n)) / n)
    return best


def random_counting(rng, max_len=6):
    n = int(rng.integers(1, max_len + 1))
    masses = rng.dirichlet(np.ones(n) * rng.uniform(0.3, 3.0))
    return CountingDistribution(tuple(masses))


def test_environment_measure_validation(rng):
    paths = [random_tree_path(rng) for _ in range(3)]
    m = EnvironmentMeasure(paths)
    assert m.uniform()
    with pytest.raises(ValueError):
        EnvironmentMeasure(paths, weights=[0.5, 0.5, 0.5])
    with pytest.raises(ValueError):
        EnvironmentMeasure(paths, weights=[-0.1, 0.6, 0.5])
    with pytest.raises(ValueError):
        EnvironmentMeasure([])


def test_pushforward_basics(rng):
    m = EnvironmentMeasure([random_tree_path(rng) for _ in range(4)])
    assert w1_paths(pushforward(m, m.horizon), m, mode="exact") == 0.0
    a = pushforward(pushforward(m, 0.7), 0.3)
    b = pushforward(m, 0.3)
    assert w1_paths(a, b, mode="exact") == 0.0
    assert len(pushforward(m, 0.5)) == len(m)


def test_w1_paths_trivial_and_single_atom(rng):
    m = EnvironmentMeasure([random_tree_path(rng) for _ in range(4)])
    assert w1_paths(m, m, mode="exact") == 0.0
    p, q = random_tree_path(rng), random_tree_path(rng)
    m1 = EnvironmentMeasure([p])
    m2 = EnvironmentMeasure([q])
    assert w1_paths(m1, m2, mode="exact") == pytest.approx(path_distance(p, q), abs=1e-12)


def test_w1_paths_matches_brute_force(rng):
    for size in (2, 3, 4, 5, 6):
        m1 = EnvironmentMeasure([random_tree_path(rng) for _ in range(size)])
        m2 = EnvironmentMeasure([random_tree_path(rng) for _ in range(size)])
        cost = path_cost_matrix(m1, m2)
        assert w1_paths(m1, m2, mode="exact") == pytest.approx(
            brute_force_assignment(cost), abs=1e-12
        )


def test_w1_paths_exact_mode_rejects_unequal_supports(rng):
    m1 = EnvironmentMeasure([random_tree_path(rng) for _ in range(2)])
    m2 = EnvironmentMeasure([random_tree_path(rng) for _ in range(3)])
    with pytest.raises(ValueError):
        w1_paths(m1, m2, mode="exact")
    res = w1_paths_detail(m1, m2, mode="approx")
    assert res.mode == "approx"
    assert res.value >= 0.0
    assert res.reg_eps is not None


def test_w1_approx_upper_bounds_exact(rng):
    for _ in range(5):
        m1 = EnvironmentMeasure([random_tree_path(rng) for _ in range(5)])
        m2 = EnvironmentMeasure([random_tree_path(rng) for _ in range(5)])
        exact = w1_paths(m1, m2, mode="exact")
        res = w1_paths_detail(m1, m2, mode="approx")
        assert res.value >= exact - 1e-9
        # entropic smoothing at this scale should stay in the ballpark
        assert res.value <= exact + max(0.5, 0.5 * exact)


def test_w1_pushforward_monotone(rng):
    m1 = EnvironmentMeasure([random_tree_path(rng) for _ in range(5)])
    m2 = EnvironmentMeasure([random_tree_path(rng) for _ in range(5)])
    times = [0.2, 0.5, 0.8, 1.0]
    vals = [w1_paths(pushforward(m1, s), pushforward(m2, s), mode="exact") for s in times]
    assert all(a <= b + 1e-12 for a, b in zip(vals, vals[1:]))


def test_w1_triangle_inequality(rng):
    pools = [EnvironmentMeasure([random_tree_path(rng) for _ in range(4)]) for _ in range(6)]
    for _ in range(30):
        i, j, k = rng.integers(0, len(pools), size=3)
        dij = w1_paths(pools[i], pools[j], mode="exact")
        djk = w1_paths(pools[j], pools[k], mode="exact")
        dik = w1_paths(pools[i], pools[k], mode="exact")
        assert dik <= dij + djk + 1e-9


def test_w1_counting_examples():
    assert w1_counting(CountingDistribution.point(0), CountingDistribution.point(3)) == 3.0
    p = CountingDistribution((0.5, 0.5))
    q = CountingDistribution((0.0, 0.5, 0.5))
    assert w1_counting(p, q) == pytest.approx(1.0, abs=1e-12)
    assert w1_counting(p, p) == 0.0
    assert w1_counting_via_intervals(p, q) == pytest.approx(1.0, abs=1e-12)
    assert w1_counting_via_intervals(p, p) == 0.0


def test_counting_distribution_validation():
    with pytest.raises(ValueError):
        CountingDistribution((0.5, 0.6))
    with pytest.raises(ValueError):
        CountingDistribution((-0.1, 1.1))
    assert CountingDistribution.point(2).mean() == 2.0


def test_interval_form_equals_cdf_form(rng):
    for _ in range(1000):
        p = random_counting(rng)
        q = random_counting(rng)
        cdf = w1_counting(p, q)
        overlap = w1_counting_via_intervals(p, q)
        assert overlap == pytest.approx(cdf, abs=1e-10)
        weighted = sum(
            l * abs((p.masses[l] if l < len(p.masses) else 0.0)
                    - (q.masses[l] if l < len(q.masses) else 0.0))
            for l in range(max(len(p.masses), len(q.masses)))
        )
        assert cdf <= weighted + 1e-10


def test_population_summaries(rng):
    m = EnvironmentMeasure([single_particle_path(x0=1.0), single_particle_path(x0=3.0)])
    assert m.population_mean(0.5) == pytest.approx(1.0)
    assert m.barycenter(0.5)[0] == pytest.approx(2.0)
    curve = m.population_mean_curve(np.array([0.0, 0.5, 1.0]))
    assert np.allclose(curve, 1.0)
    bary = m.barycenter_curve(np.array([0.0, 1.0]))
    assert np.allclose(bary[:, 0], 2.0)
