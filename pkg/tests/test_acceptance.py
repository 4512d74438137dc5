"""Acceptance suite: the ten exit criteria at their stated tolerances.

Each test prints one PASS/FAIL line (run with ``pytest -s`` to see them all)
and then asserts.  Budgets are desk scale; the whole module runs in well
under the per-criterion limits on two cores.
"""
import json
import math

import numpy as np
import pytest
from scipy import stats

from mkvbranch.cli import main
from mkvbranch.coefficients import (
    ConstantCoefficients,
    MeanFieldLogistic,
    PositionCoupled,
)
from mkvbranch.diagnostics import (
    BASE_LIBRARY,
    H_LIBRARY,
    PHI_LIBRARY,
    default_battery,
    increment_variance_scaling,
    martingale_increment,
    stability_experiment,
    chaos_study,
)
from mkvbranch.engine import (
    InitialCondition,
    RandomnessSource,
    SimulationGrid,
    frozen_initial_environment,
    simulate_interacting,
    simulate_replicas,
)
from mkvbranch.genealogy import ParticleConfiguration, config_distance
from mkvbranch.paths import path_distance, total_ever_alive
from mkvbranch.solver import ContractionBudget, contraction_window, solve_fixed_point
from mkvbranch.transport import (
    CountingDistribution,
    EnvironmentMeasure,
    w1_counting,
    w1_counting_via_intervals,
)

from conftest import random_configuration, random_tree_path


def report(num: int, ok: bool, detail: str) -> None:
    print(f"\nACCEPTANCE {num:02d}: {'PASS' if ok else 'FAIL'} - {detail}")


# -- 1. metric axioms --------------------------------------------------------


def test_criterion_01_metric_axioms():
    rng = np.random.default_rng(11)
    config_pool = [random_configuration(rng) for _ in range(80)]
    violations = 0
    for e in config_pool:
        if config_distance(e, e) != 0.0:
            violations += 1
    for _ in range(1000):
        i, j, k = rng.integers(0, len(config_pool), size=3)
        a, b, c = config_pool[i], config_pool[j], config_pool[k]
        dab = config_distance(a, b)
        if dab != config_distance(b, a):
            violations += 1
        if a != b and dab <= 0.0:
            violations += 1
        if config_distance(a, c) > dab + config_distance(b, c) + 1e-12:
            violations += 1

    path_pool = [random_tree_path(rng) for _ in range(40)]
    dmat = np.zeros((len(path_pool), len(path_pool)))
    for i in range(len(path_pool)):
        for j in range(i, len(path_pool)):
            dmat[i, j] = dmat[j, i] = path_distance(path_pool[i], path_pool[j])
    for i in range(len(path_pool)):
        if dmat[i, i] != 0.0:
            violations += 1
    for _ in range(1000):
        i, j, k = rng.integers(0, len(path_pool), size=3)
        if dmat[i, k] > dmat[i, j] + dmat[j, k] + 1e-9:
            violations += 1
    ok = violations == 0
    report(1, ok, f"metric axioms, {violations} violations over 2000 triples")
    assert ok


# -- 2. the two forms of the counting distance -------------------------------


def test_criterion_02_counting_distance_identity():
    rng = np.random.default_rng(22)
    worst_gap = 0.0
    bound_violations = 0
    for _ in range(1000):
        p = CountingDistribution(tuple(rng.dirichlet(np.ones(int(rng.integers(1, 7))))))
        q = CountingDistribution(tuple(rng.dirichlet(np.ones(int(rng.integers(1, 7))))))
        cdf = w1_counting(p, q)
        overlap = w1_counting_via_intervals(p, q)
        worst_gap = max(worst_gap, abs(cdf - overlap))
        span = max(len(p.masses), len(q.masses))
        pm = np.zeros(span)
        qm = np.zeros(span)
        pm[:len(p.masses)] = p.masses
        qm[:len(q.masses)] = q.masses
        weighted = float((np.arange(span) * np.abs(pm - qm)).sum())
        if cdf > weighted + 1e-10 or overlap > weighted + 1e-10:
            bound_violations += 1
    ok = worst_gap <= 1e-10 and bound_violations == 0
    report(2, ok, f"counting-distance forms agree (worst gap {worst_gap:.2e}), "
                  f"{bound_violations} bound violations over 1000 pairs")
    assert ok


# -- 3. linear branching closed forms ----------------------------------------


def _closed_form_run(progeny, sign, replicas=10_000):
    n0, gamma0, horizon = 10, 0.5, 1.0
    grid = SimulationGrid(horizon=horizon, dt=1.0 / 256)
    ic = InitialCondition.fixed(np.zeros((n0, 1)))
    rng = RandomnessSource(master_seed=303)
    env = frozen_initial_environment(ic, grid, rng, replicas=2)
    coeffs = ConstantCoefficients(dim=1, drift=0.0, diffusion=0.0, death_rate=gamma0,
                                  progeny=progeny, gamma_bar=1.0)
    probes = np.array([horizon / 4, horizon / 2, horizon])
    pops = np.array(simulate_replicas(ic, coeffs, env, grid, rng, replicas=replicas,
                                      reduce=lambda t: t.population_curve(probes)))
    zs = []
    for j, t in enumerate(probes):
        want = n0 * math.exp(sign * gamma0 * t)
        got = pops[:, j]
        se = got.std(ddof=1) / math.sqrt(len(got))
        zs.append((got.mean() - want) / se)
    return zs


def test_criterion_03_linear_branching_closed_forms():
    death_z = _closed_form_run((1.0,), sign=-1)
    fission_z = _closed_form_run((0.0, 0.0, 1.0), sign=+1)
    worst = max(abs(z) for z in death_z + fission_z)
    ok = worst <= 4.0
    report(3, ok, f"closed-form means at t in {{T/4, T/2, T}}, worst |z| = {worst:.2f} "
                  f"over 10^4 replicas")
    assert ok


# -- 4. total-ever-alive moment bound ----------------------------------------


def test_criterion_04_population_moment_bound():
    n0, horizon, replicas = 5, 1.0, 1000
    grid = SimulationGrid(horizon=horizon, dt=1.0 / 64)
    ic = InitialCondition.fixed(np.zeros((n0, 1)))
    families = [
        ConstantCoefficients(dim=1, drift=0.1, diffusion=0.5, death_rate=0.8,
                             progeny=(0.2, 0.2, 0.6), gamma_bar=0.8),
        MeanFieldLogistic(dim=1, gamma0=0.5, coupling=0.1, gamma_bar=3.0,
                          diffusion=0.5, progeny=(0.3, 0.2, 0.5)),
        PositionCoupled(dim=1, pull=0.5, clip_radius=4.0, diffusion=0.5,
                        death_rate=0.6, progeny=(0.5, 0.0, 0.5)),
    ]
    margins = []
    ok = True
    for coeffs in families:
        rng = RandomnessSource(master_seed=404)
        env = frozen_initial_environment(ic, grid, rng, replicas=8)
        totals = np.array(simulate_replicas(ic, coeffs, env, grid, rng,
                                            replicas=replicas, reduce=total_ever_alive))
        bound = n0 * math.exp(coeffs.bounds.gamma_bar
                              * coeffs.bounds.mean_offspring_cap * horizon)
        limit = bound * (1 + 4 / math.sqrt(replicas))
        margins.append(totals.mean() / limit)
        ok = ok and totals.mean() <= limit
    report(4, ok, "population moment bound for 3 families, mean/limit ratios "
                  + ", ".join(f"{m:.3f}" for m in margins))
    assert ok


# -- 5. thinning exactness ---------------------------------------------------


def test_criterion_05_thinning_exactness():
    gamma0, gamma_bar, horizon, first_k, trees = 2.0, 4.0, 40.0, 40, 2500
    grid = SimulationGrid(horizon=horizon, dt=0.5)
    ic = InitialCondition.fixed([[0.0]])
    rng = RandomnessSource(master_seed=505)
    env = frozen_initial_environment(ic, grid, rng, replicas=1)
    coeffs = ConstantCoefficients(dim=1, drift=0.0, diffusion=0.0, death_rate=gamma0,
                                  progeny=(0.0, 1.0), gamma_bar=gamma_bar)

    def gaps(tree):
        events = np.sort(np.array([r.death for r in tree.records if r.death is not None]))
        return np.diff(np.concatenate([[0.0], events]))[:first_k]

    all_gaps = np.concatenate(simulate_replicas(ic, coeffs, env, grid, rng,
                                                replicas=trees, reduce=gaps))
    res = stats.kstest(all_gaps, "expon", args=(0, 1 / gamma0))
    ok = res.pvalue > 1e-3 and len(all_gaps) >= 100_000
    report(5, ok, f"thinning KS on {len(all_gaps)} inter-event gaps, "
                  f"p = {res.pvalue:.4f}")
    assert ok


# -- 6. contraction of the fixed-point map -----------------------------------


def test_criterion_06_picard_contraction():
    grid = SimulationGrid(horizon=1.0, dt=1.0 / 256)
    ic = InitialCondition.fixed(np.zeros((8, 1)))
    rng = RandomnessSource(master_seed=2025)
    coeffs = MeanFieldLogistic(dim=1, gamma0=0.5, coupling=0.35, gamma_bar=3.0,
                               diffusion=0.8, progeny=(0.3, 0.2, 0.5))
    mu, state = solve_fixed_point(ic, coeffs, grid, rng, replicas=256, tol=1e-6,
                                  max_iter=10, mode="exact")
    d = state.distances
    ratios = [b / a for a, b in zip(d, d[1:]) if a > 0]
    run = best = 0
    for r in ratios:
        run = run + 1 if r < 1.0 else 0
        best = max(best, run)

    # hand-solved window: c_d = c_w = 1, unit mean, zero growth, theta = 1
    budget = ContractionBudget(c_d=1.0, c_w=1.0, initial_mean=1.0, growth_exponent=0.0)
    window, kappa_boundary = contraction_window(budget, theta=1.0)
    hand = ((math.sqrt(3.0) - 1.0) / 2.0) ** 2
    window_ok = abs(window - hand) <= 1e-9
    _, kappa = contraction_window(
        ContractionBudget.from_coefficients(coeffs, ic, grid.horizon)
    )
    ok = best >= 4 and window_ok and 0 < kappa < 1
    report(6, ok, f"{best} consecutive contracting steps "
                  f"(distances {['%.3g' % v for v in d]}), kappa = {kappa:.4f}, "
                  f"window matches quadratic to {abs(window - hand):.1e}")
    assert ok


# -- 7. propagation of chaos -------------------------------------------------


def test_criterion_07_propagation_of_chaos():
    grid = SimulationGrid(horizon=1.0, dt=1.0 / 64)
    ic = InitialCondition.fixed(np.zeros((6, 1)))
    rng = RandomnessSource(master_seed=707)
    coeffs = MeanFieldLogistic(dim=1, gamma0=0.5, coupling=0.2, gamma_bar=3.0,
                               diffusion=0.6, progeny=(0.3, 0.2, 0.5))
    mu, state = solve_fixed_point(ic, coeffs, grid, rng, replicas=256, tol=1e-4,
                                  max_iter=10, mode="exact")
    assert state.converged
    rows = chaos_study([8, 32, 128, 512], mu, ic, coeffs, grid, base_seed=909,
                       replicas=8)
    means = [r["w1_mean"] for r in rows]
    ses = [r["w1_se"] for r in rows]
    inversions = 0
    ok = True
    for i in range(len(means) - 1):
        if means[i + 1] > means[i]:
            joint = math.hypot(ses[i], ses[i + 1])
            if means[i + 1] - means[i] <= joint:
                inversions += 1
            else:
                ok = False
    ok = ok and inversions <= 1
    detail = ", ".join(f"n={r['n']}: {r['w1_mean']:.3f}±{r['w1_se']:.3f}" for r in rows)
    report(7, ok, f"chaos trend nonincreasing ({inversions} tolerated inversion), {detail}")
    assert ok


# -- 8. martingale battery ---------------------------------------------------


def _battery_z_scores(trees, envs, coeffs, battery):
    zs = {}
    for combo in battery:
        env_seq = envs if isinstance(envs, list) else [envs] * len(trees)
        terms = np.array([
            combo["h"](tree, combo["s"])
            * martingale_increment(combo["phi"], combo["label_fn"], combo["s"],
                                   combo["t"], tree, env, coeffs)
            for tree, env in zip(trees, env_seq)
        ])
        se = terms.std(ddof=1) / math.sqrt(len(terms))
        zs[f"{combo['phi'].name}/{combo['label_fn'].name}|{combo['h_name']}"] = (
            terms.mean() / se if se > 0 else 0.0
        )
    return zs


def test_criterion_08_martingale_battery():
    battery = default_battery(1.0)
    # frozen-environment system at 10^4 paths
    grid = SimulationGrid(horizon=1.0, dt=1.0 / 128)
    ic = InitialCondition.fixed(np.zeros((3, 1)))
    rng = RandomnessSource(master_seed=808)
    coeffs = ConstantCoefficients(dim=1, drift=0.1, diffusion=0.8, death_rate=0.8,
                                  progeny=(0.4, 0.1, 0.5), gamma_bar=0.8)
    env = frozen_initial_environment(ic, grid, rng, replicas=16)
    trees = simulate_replicas(ic, coeffs, env, grid, rng, replicas=10_000)
    frozen_z = _battery_z_scores(trees, env, coeffs, battery)
    del trees

    # interacting system, 157 systems of 64 trees = 10048 paths
    grid_n = SimulationGrid(horizon=1.0, dt=1.0 / 64)
    coeffs_n = MeanFieldLogistic(dim=1, gamma0=0.6, coupling=0.1, gamma_bar=3.0,
                                 diffusion=0.7, progeny=(0.4, 0.1, 0.5))
    trees_n = []
    envs_n = []
    for rep in range(157):
        sub = RandomnessSource(master_seed=808_000 + 101 * rep)
        batch = simulate_interacting(64, ic, coeffs_n, grid_n, sub)
        env_batch = EnvironmentMeasure(batch)
        trees_n.extend(batch)
        envs_n.extend([env_batch] * len(batch))
    interacting_z = _battery_z_scores(trees_n, envs_n, coeffs_n, battery)
    del trees_n, envs_n

    # 1/n scaling of the averaged-increment second moment
    scaling = increment_variance_scaling(
        [16, 64, 256], ic, coeffs_n, grid_n, base_seed=818, replicas=24,
        phi=PHI_LIBRARY["tanh"], label_fn=BASE_LIBRARY["one"],
        h=H_LIBRARY["one"], s=0.25, t=1.0,
    )
    scaled = [r["scaled_second_moment"] for r in scaling]
    scaling_ok = max(scaled) <= 3.0 * min(scaled)

    worst_frozen = max(abs(z) for z in frozen_z.values())
    worst_inter = max(abs(z) for z in interacting_z.values())
    ok = worst_frozen <= 4.0 and worst_inter <= 4.0 and scaling_ok
    report(8, ok, f"battery max |z|: frozen {worst_frozen:.2f}, "
                  f"interacting {worst_inter:.2f}; scaled second moments "
                  + ", ".join(f"{v:.4f}" for v in scaled))
    assert worst_frozen <= 4.0, frozen_z
    assert worst_inter <= 4.0, interacting_z
    assert scaling_ok, scaled


# -- 9. stability under coupled perturbations --------------------------------


def test_criterion_09_stability_ladder():
    grid = SimulationGrid(horizon=1.0, dt=1.0 / 64)
    ic = InitialCondition.fixed(np.zeros((2, 1)))
    base = ConstantCoefficients(dim=1, drift=0.0, diffusion=0.3, death_rate=0.5,
                                progeny=(0.5, 0.0, 0.5), gamma_bar=1.0)
    rng = RandomnessSource(master_seed=909)
    zero = stability_experiment(base, base, ic, ic, rng, replicas=1024, grid=grid,
                                probes=64)
    lhs = {}
    for eps in (0.02, 0.04, 0.08):
        bumped = ConstantCoefficients(dim=1, drift=0.0, diffusion=0.3,
                                      death_rate=0.5 + eps,
                                      progeny=(0.5, 0.0, 0.5), gamma_bar=1.0)
        rep = stability_experiment(base, bumped, ic, ic, rng, replicas=1024,
                                   grid=grid, probes=64)
        lhs[eps] = rep.lhs
    r1 = lhs[0.04] / lhs[0.02]
    r2 = lhs[0.08] / lhs[0.04]
    ok = zero.lhs == 0.0 and lhs[0.02] > 0 and r1 <= 4.0 and r2 <= 4.0
    report(9, ok, f"zero-perturbation lhs = {zero.lhs} (bit-exact), ladder "
                  f"lhs = {lhs[0.02]:.4f}/{lhs[0.04]:.4f}/{lhs[0.08]:.4f}, "
                  f"doubling ratios {r1:.2f}, {r2:.2f} (linear within factor 2)")
    assert ok


# -- 10. CLI determinism across worker counts --------------------------------


DETERMINISM_CONFIG = """
[run]
seed = 4242
horizon = 1.0
dt = 0.03125
dimension = 1
output_dir = {out}
workers = {workers}

[coefficients]
family = mean_field_logistic
gamma0 = 0.5
coupling = 0.2
gamma_bar = 3.0
diffusion = 0.6
progeny = 0.35 0.2 0.45

[initial]
kind = fixed
positions = 0.0; 0.1; -0.1; 0.2

[simulate-tree]
replicas = 64

[solve-mkv]
replicas = 24
tol = 1e-9
max_iter = 8
mode = exact

[simulate-n]
n = 12

[diagnose-martingale]
replicas = 128

[stability]
replicas = 48
eps_ladder = 0.04
probes = 16
"""


def test_criterion_10_cli_determinism(tmp_path):
    commands = ("simulate-tree", "solve-mkv", "simulate-n", "diagnose-martingale",
                "stability")
    blobs = {}
    for workers in (1, 4):
        out = tmp_path / f"w{workers}"
        cfg = tmp_path / f"determinism_{workers}.cfg"
        cfg.write_text(DETERMINISM_CONFIG.format(out=out, workers=workers))
        per = {}
        for command in commands:
            assert main([command, "--config", str(cfg),
                         "--output", str(out / command)]) == 0
            for csv_file in sorted((out / command).glob("*.csv")):
                key = f"{command}/{csv_file.name}"
                blob = csv_file.read_bytes()
                if csv_file.name == "iterates.csv":
                    # the wall-clock column is the one permitted difference
                    blob = "\n".join(",".join(line.split(",")[:2])
                                     for line in blob.decode().splitlines()).encode()
                per[key] = blob
        blobs[workers] = per
    mismatched = [k for k in blobs[1] if blobs[1][k] != blobs[4].get(k)]
    ok = blobs[1].keys() == blobs[4].keys() and not mismatched
    report(10, ok, f"{len(blobs[1])} CSVs byte-identical across worker counts 1 and 4"
                   + (f"; mismatches: {mismatched}" if mismatched else ""))
    assert ok
