import numpy as np
import pytest
from scipy import stats

from mkvbranch.coefficients import (
    ConstantCoefficients,
    MeanFieldLogistic,
    PathParticleView,
    PositionCoupled,
    eval_all,
    mean_field_functional,
    offspring_interval_index,
)
from mkvbranch.engine import (
    InitialCondition,
    RandomnessSource,
    SimulationGrid,
    frozen_initial_environment,
    simulate_replicas,
)
from mkvbranch.genealogy import Label
from mkvbranch.paths import ParticleRecord, TreePath
from mkvbranch.transport import EnvironmentMeasure, pushforward, w1_paths

from conftest import single_particle_path


def small_env(seed=4, replicas=6, death_rate=0.9):
    grid = SimulationGrid(horizon=1.0, dt=1.0 / 16)
    ic = InitialCondition.fixed(np.zeros((3, 1)))
    rng = RandomnessSource(master_seed=seed)
    base_env = frozen_initial_environment(ic, grid, rng, replicas=2)
    coeffs = ConstantCoefficients(dim=1, drift=0.0, diffusion=0.6, death_rate=death_rate,
                                  progeny=(0.4, 0.1, 0.5), gamma_bar=death_rate)
    trees = simulate_replicas(ic, coeffs, base_env, grid, rng, replicas=replicas)
    return EnvironmentMeasure(trees), trees


def shift_tree(tree: TreePath, delta: float) -> TreePath:
    records = [
        ParticleRecord(label=r.label, parent=r.parent, birth=r.birth, death=r.death,
                       offspring_count=r.offspring_count, times=r.times.copy(),
                       positions=r.positions + delta)
        for r in tree.records
    ]
    return TreePath(records, horizon=tree.horizon, dim=tree.dim)


def test_interval_sampler_reproduces_distribution(rng):
    for _ in range(3):
        n = int(rng.integers(2, 6))
        raw = rng.dirichlet(np.ones(n)) * 0.9
        masses = raw + 0.1 / n  # keep every expected count comfortably large
        masses = masses / masses.sum()
        draws = rng.uniform(0.0, 1.0, size=100_000)
        counts = np.bincount([offspring_interval_index(float(u), tuple(masses)) for u in draws],
                             minlength=n)
        res = stats.chisquare(counts, 100_000 * masses)
        assert res.pvalue > 1e-3


def test_intervals_partition_unit_interval(rng):
    for _ in range(20):
        n = int(rng.integers(1, 7))
        masses = rng.dirichlet(np.ones(n))
        cum = np.concatenate([[0.0], np.cumsum(masses)])
        for l in range(n):
            assert cum[l + 1] - cum[l] == pytest.approx(masses[l], abs=1e-12)
        for u in rng.uniform(0, 1, size=50):
            l = offspring_interval_index(float(u), tuple(masses))
            assert cum[l] <= u
            assert u < cum[l + 1] or l == n - 1


def test_eval_all_constants():
    env, trees = small_env()
    fam = ConstantCoefficients(dim=1, drift=0.3, diffusion=1.2, death_rate=0.7,
                               progeny=(0.2, 0.8), gamma_bar=0.7)
    view = PathParticleView(trees[0], trees[0].records[0].label, 0.5)
    b, sigma, gamma, P = eval_all(fam, 0.5, view, pushforward(env, 0.5))
    assert np.allclose(b, [0.3])
    assert np.allclose(sigma, [[1.2]])
    assert gamma == 0.7
    assert P.masses == (0.2, 0.8)


def test_mean_field_logistic_death_rate_tracks_population():
    env, trees = small_env()
    fam = MeanFieldLogistic(dim=1, gamma0=0.5, coupling=0.2, gamma_bar=5.0)
    t = 0.5
    stopped = pushforward(env, t)
    pop = stopped.population_mean(t)
    view = PathParticleView(trees[0], trees[0].records[0].label, t)
    _, _, gamma, _ = eval_all(fam, t, view, stopped)
    assert gamma == pytest.approx(0.5 * (1 + 0.2 * pop))


def test_mean_field_functional_trivials():
    env = EnvironmentMeasure([single_particle_path(x0=1.0), single_particle_path(x0=2.0)])
    assert mean_field_functional(lambda k, x: 0.0, 0.5, env) == 0.0
    assert mean_field_functional(lambda k, x: 1.0, 0.5, env) == pytest.approx(1.0)


def test_mean_field_functional_lipschitz_bound(rng):
    C = 0.5

    def f(k, x):
        return C * np.tanh(x[0])

    env1, _ = small_env(seed=21)
    env2, _ = small_env(seed=22)
    for t in (0.25, 0.5, 0.9):
        gap = abs(mean_field_functional(f, t, env1) - mean_field_functional(f, t, env2))
        w1 = w1_paths(pushforward(env1, t), pushforward(env2, t), mode="exact")
        assert gap <= C * w1 + 1e-9


def truncated_sup_gap(view_a, view_b, t, grid):
    gaps = [
        float(np.linalg.norm(view_a.position_at(min(s, t)) - view_b.position_at(min(s, t))))
        for s in grid
    ]
    return min(max(gaps), 1.0)


def test_declared_lipschitz_spot_check(rng):
    env, trees = small_env(seed=31)
    fams = [
        MeanFieldLogistic(dim=1, gamma0=0.5, coupling=0.3, gamma_bar=6.0),
        PositionCoupled(dim=1, pull=0.8, clip_radius=4.0, diffusion=0.5),
    ]
    grid = np.linspace(0, 1, 17)
    for fam in fams:
        L = fam.bounds.lipschitz
        for _ in range(40):
            t = float(rng.uniform(0.1, 1.0))
            tree = trees[int(rng.integers(0, len(trees)))]
            rec = tree.records[int(rng.integers(0, len(tree.records)))]
            delta = float(rng.uniform(-0.3, 0.3))
            shifted = shift_tree(tree, delta)
            va = PathParticleView(tree, rec.label, t)
            vb = PathParticleView(shifted, rec.label, t)
            env_b = EnvironmentMeasure([shift_tree(p, delta * 0.5) for p in env.paths])
            ma, mb = pushforward(env, t), pushforward(env_b, t)
            num = max(
                float(np.linalg.norm(np.asarray(fam.drift(t, va, ma)) - np.asarray(fam.drift(t, vb, mb)))),
                abs(fam.death_rate(t, va, ma) - fam.death_rate(t, vb, mb)),
            )
            denom = truncated_sup_gap(va, vb, t, grid) + w1_paths(ma, mb, mode="exact")
            if denom > 1e-9:
                assert num <= L * denom + 1e-9


def test_progressivity_by_construction():
    # evaluations only see the stopped view: the position reported at any
    # s > t equals the position at t
    env, trees = small_env()
    tree = trees[0]
    rec = tree.records[0]
    t = 0.5
    view = PathParticleView(tree, rec.label, t)
    assert np.array_equal(view.position_at(0.9), view.position_at(t))
    assert np.array_equal(view.position, tree.position_of(rec.label, t))


def test_view_ancestor_delegation():
    env, trees = small_env(seed=41, death_rate=1.5)
    for tree in trees:
        child = next((r for r in tree.records if r.parent is not None), None)
        if child is None:
            continue
        view = PathParticleView(tree, child.label, tree.horizon)
        s = child.birth / 2
        assert np.array_equal(view.position_at(s), tree.position_of(child.parent, s))
        return
    pytest.skip("no branching event in the pool")
