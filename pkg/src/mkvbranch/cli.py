"""Command-line interface: run orchestration and artifact output.

Every command reads one sectioned config file, writes a manifest plus
command-specific CSV files into the configured output directory, and exits
0 on success, 2 on configuration errors, 3 when a numerical guard trips
(population explosion or a non-converged solve), 4 on a failed selftest.

Reruns with identical config and seed produce byte-identical CSVs at any
worker count; the manifest differs only in its wall-clock field.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config, perturb_death_rate
from .diagnostics import (
    H_LIBRARY,
    chaos_study,
    default_battery,
    martingale_statistic,
    stability_experiment,
)
from .engine import (
    ExplosionError,
    InitialCondition,
    RandomnessSource,
    SimulationGrid,
    frozen_initial_environment,
    simulate_interacting,
    simulate_replicas,
)
from .solver import (
    ContractionBudget,
    contraction_window,
    fresh_residual,
    solve_fixed_point,
)
from .transport import (
    DEFAULT_EXACT_SUPPORT_LIMIT,
    DEFAULT_SINKHORN_ITERATIONS,
    EnvironmentMeasure,
)
from .paths import write_tree_csv

COMMANDS = ("simulate-tree", "solve-mkv", "simulate-n", "chaos-study",
            "diagnose-martingale", "stability", "selftest")

CSV_SCHEMA_VERSION = 1


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def write_manifest(outdir: Path, command: str, cfg: RunConfig, extras: dict,
                   wall_s: float) -> None:
    manifest = {
        "command": command,
        "library_version": __version__,
        "csv_schema_version": CSV_SCHEMA_VERSION,
        "seed": cfg.seed,
        "config": cfg.resolved,
        "transport_thresholds": {
            "exact_support_limit": DEFAULT_EXACT_SUPPORT_LIMIT,
            "sinkhorn_iterations": DEFAULT_SINKHORN_ITERATIONS,
        },
        "wall_clock_s": wall_s,
    }
    manifest.update(extras)
    with open(outdir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _setup(cfg: RunConfig):
    grid = SimulationGrid(horizon=cfg.horizon, dt=cfg.dt)
    rng = RandomnessSource(master_seed=cfg.seed)
    return grid, rng


def _population_rows(trees, grid: SimulationGrid, count_label: int):
    times = grid.times
    pops = np.array([t.population_curve(times) for t in trees])
    mean = pops.mean(axis=0)
    se = pops.std(axis=0, ddof=1) / math.sqrt(len(trees)) if len(trees) > 1 else np.zeros_like(mean)
    return [(float(t), float(m), float(s), count_label)
            for t, m, s in zip(times, mean, se)]


def cmd_simulate_tree(cfg: RunConfig, outdir: Path) -> dict:
    opts = cfg.command_options
    replicas = opts.get("replicas", 100)
    grid, rng = _setup(cfg)
    env = frozen_initial_environment(cfg.initial, grid, rng, replicas=max(2, min(replicas, 64)))
    trees = simulate_replicas(cfg.initial, cfg.coefficients, env, grid, rng,
                              replicas=replicas, guard_cap=cfg.explosion_cap,
                              workers=cfg.workers)
    write_csv(outdir / "population.csv", ["time", "mean_pop", "se_pop", "replicas"],
              _population_rows(trees, grid, replicas))
    if opts.get("export_paths", True):
        write_tree_csv(trees[0], outdir / "records.csv", outdir / "traj.csv")
    final_pops = [len(t.alive_records(grid.horizon)) for t in trees]
    return {"replicas": replicas, "mean_final_population": float(np.mean(final_pops))}


def _resolve_window(cfg: RunConfig, opts: dict):
    raw = opts.get("window", "none")
    if raw in ("none", ""):
        return None, None
    if raw == "auto":
        if "c_d" in opts and "c_w" in opts:
            budget = ContractionBudget(
                c_d=opts["c_d"], c_w=opts["c_w"],
                initial_mean=cfg.initial.mean_population(),
                growth_exponent=cfg.coefficients.bounds.gamma_bar
                * cfg.coefficients.bounds.mean_offspring_cap * cfg.horizon,
            )
            source = "user-supplied stability constants"
        else:
            budget = ContractionBudget.from_coefficients(cfg.coefficients, cfg.initial,
                                                         cfg.horizon)
            source = "crude defaults from declared bounds (non-rigorous)"
        window, kappa = contraction_window(budget, theta=opts.get("theta", 0.9))
        info = {
            "window": window, "kappa": kappa, "theta": opts.get("theta", 0.9),
            "budget": {"c_d": budget.c_d, "c_w": budget.c_w,
                       "initial_mean": budget.initial_mean,
                       "growth_exponent": budget.growth_exponent},
            "budget_source": source,
            "non_rigorous": "c_d" not in opts,
        }
        # the crude worst-case constants can make the window impractically
        # small; floor the marching schedule and record that we did
        floor = cfg.horizon / 32.0
        effective = min(max(window, floor), cfg.horizon)
        if effective != window:
            info["window_floored_to"] = effective
        return effective, info
    try:
        return float(raw), None
    except ValueError as exc:
        raise ConfigError(f"window must be 'none', 'auto' or a number, got {raw!r}") from exc


def cmd_solve_mkv(cfg: RunConfig, outdir: Path) -> dict:
    opts = cfg.command_options
    replicas = opts.get("replicas", 64)
    tol = opts.get("tol", 0.05)
    grid, rng = _setup(cfg)
    window, window_info = _resolve_window(cfg, opts)
    mu, state = solve_fixed_point(
        cfg.initial, cfg.coefficients, grid, rng, replicas=replicas, tol=tol,
        max_iter=opts.get("max_iter", 12), window=window,
        mode=opts.get("mode", "auto"), guard_cap=cfg.explosion_cap,
        workers=cfg.workers,
    )
    write_csv(outdir / "iterates.csv", ["iter", "w1_to_prev", "wall_ms"],
              [(r["iter"], r["w1_to_prev"], r["wall_ms"]) for r in state.rows])
    write_csv(outdir / "distances.csv",
              ["t", "w1", "mode", "support_1", "support_2", "reg_eps"],
              [(r["edge"], r["w1_to_prev"], r["mode"], r["support_1"],
                r["support_2"], r["reg_eps"]) for r in state.rows])
    extras = {"fixed_point": state.summary()}
    if window_info:
        extras["contraction"] = window_info
    if opts.get("fresh_residual", False):
        extras["fresh_residual"] = fresh_residual(
            mu, cfg.initial, cfg.coefficients, grid,
            fresh_seed=cfg.seed + 0x9E3779B9, replicas=replicas,
            mode=state.mode, guard_cap=cfg.explosion_cap, workers=cfg.workers,
        )
    extras["guard"] = {"converged": state.converged}
    return extras


def cmd_simulate_n(cfg: RunConfig, outdir: Path) -> dict:
    opts = cfg.command_options
    n = opts.get("n", 16)
    grid, rng = _setup(cfg)
    trees = simulate_interacting(n, cfg.initial, cfg.coefficients, grid, rng,
                                 guard_cap=cfg.explosion_cap, workers=cfg.workers)
    write_csv(outdir / "population.csv", ["time", "mean_pop", "se_pop", "n"],
              _population_rows(trees, grid, n))
    if opts.get("export_paths", True):
        write_tree_csv(trees[0], outdir / "records.csv", outdir / "traj.csv")
    return {"n": n}


def cmd_chaos_study(cfg: RunConfig, outdir: Path) -> dict:
    opts = cfg.command_options
    n_list = opts.get("n_list", [8, 32, 128])
    replicas = opts.get("replicas", 8)
    solve_replicas = opts.get("solve_replicas", 128)
    grid, rng = _setup(cfg)
    mu, state = solve_fixed_point(
        cfg.initial, cfg.coefficients, grid, rng, replicas=solve_replicas,
        tol=opts.get("solve_tol", 0.05), max_iter=opts.get("solve_max_iter", 10),
        guard_cap=cfg.explosion_cap, workers=cfg.workers,
    )
    if not state.converged:
        raise _GuardFailure("fixed-point solve did not converge", {"fixed_point": state.summary()})
    rows = chaos_study(n_list, mu, cfg.initial, cfg.coefficients, grid,
                       base_seed=cfg.seed, replicas=replicas,
                       guard_cap=cfg.explosion_cap, workers=cfg.workers)
    write_csv(outdir / "chaos.csv", ["n", "w1_mean", "w1_se", "replicas"],
              [(r["n"], r["w1_mean"], r["w1_se"], r["replicas"]) for r in rows])
    return {"fixed_point": state.summary(), "n_list": list(n_list)}


def cmd_diagnose_martingale(cfg: RunConfig, outdir: Path) -> dict:
    opts = cfg.command_options
    replicas = opts.get("replicas", 2000)
    system = opts.get("system", "frozen")
    grid, rng = _setup(cfg)
    battery = default_battery(cfg.horizon)
    for combo in battery:
        combo["phi"].check_derivatives()
        combo["label_fn"].check_derivatives(cfg.dimension)
    if system == "frozen":
        env = frozen_initial_environment(cfg.initial, grid, rng, replicas=min(replicas, 64))
        trees = simulate_replicas(cfg.initial, cfg.coefficients, env, grid, rng,
                                  replicas=replicas, guard_cap=cfg.explosion_cap,
                                  workers=cfg.workers)
        envs = env
    else:
        n = opts.get("n", 16)
        systems = max(1, math.ceil(replicas / n))
        trees = []
        envs = []
        for rep in range(systems):
            sub_rng = RandomnessSource(master_seed=cfg.seed + 104729 * (rep + 1))
            batch = simulate_interacting(n, cfg.initial, cfg.coefficients, grid,
                                         sub_rng, guard_cap=cfg.explosion_cap,
                                         workers=cfg.workers)
            event_env = EnvironmentMeasure(batch)
            trees.extend(batch)
            envs.extend([event_env] * len(batch))
    rows = []
    for combo in battery:
        rep = martingale_statistic(combo["phi"], combo["label_fn"], combo["h"],
                                   combo["s"], combo["t"], trees, envs,
                                   cfg.coefficients)
        phi_id = f"{combo['phi'].name}/{combo['label_fn'].name}"
        rows.append((phi_id, combo["h_name"], combo["s"], combo["t"],
                     rep.value, rep.std_error, rep.z_score))
    write_csv(outdir / "battery.csv",
              ["phi_id", "h_id", "s", "t", "value", "se", "z"], rows)
    return {"system": system, "paths": len(trees),
            "max_abs_z": max(abs(r[6]) for r in rows)}


def cmd_stability(cfg: RunConfig, outdir: Path) -> dict:
    opts = cfg.command_options
    replicas = opts.get("replicas", 256)
    ladder = opts.get("eps_ladder", [0.02, 0.04, 0.08])
    probes = opts.get("probes", 256)
    grid, rng = _setup(cfg)
    rows = []
    for eps in [0.0] + list(ladder):
        perturbed = cfg.coefficients if eps == 0.0 else perturb_death_rate(cfg.coefficients, eps)
        report = stability_experiment(cfg.coefficients, perturbed, cfg.initial,
                                      cfg.initial, rng, replicas=replicas, grid=grid,
                                      probes=probes, guard_cap=cfg.explosion_cap,
                                      workers=cfg.workers)
        rows.append((eps, report.lhs, report.lhs_se, report.term_drift,
                     report.term_diffusion, report.term_death, report.term_progeny,
                     report.term_init))
    write_csv(outdir / "stability.csv",
              ["eps", "lhs", "se", "term_b", "term_sigma", "term_gamma", "term_p",
               "term_init"], rows)
    return {"eps_ladder": [0.0] + list(ladder), "replicas": replicas}


class _GuardFailure(RuntimeError):
    def __init__(self, message: str, extras: dict | None = None):
        super().__init__(message)
        self.extras = extras or {}


def run_selftest(verbose: bool = True) -> list[tuple[str, bool, str]]:
    """Quick built-in checks of the documented identities and conventions."""
    from .genealogy import Label, ParticleConfiguration, concat, config_count, \
        config_distance, is_strict_ancestor, parent
    from .paths import configuration_at, path_distance, stop
    from .transport import (CountingDistribution, pushforward, w1_counting,
                            w1_counting_via_intervals, w1_paths)
    from .coefficients import ConstantCoefficients, eval_all, offspring_interval_index, \
        PathParticleView
    from .diagnostics import BASE_LIBRARY, PHI_LIBRARY, generator, martingale_statistic
    from .solver import picard_step, solve_fixed_point

    results = []

    def check(name, fn):
        try:
            fn()
            results.append((name, True, ""))
        except Exception as exc:  # noqa: BLE001 - report, do not crash
            results.append((name, False, f"{type(exc).__name__}: {exc}"))

    def L(*word):
        return Label(tuple(word))

    def check_concat():
        assert concat(L(), L(3)) == L(3)
        assert concat(L(1, 2), L(1)) == L(1, 2, 1)
        assert concat(L(2), L(1, 1)) == L(2, 1, 1)
    check("label concatenation", check_concat)

    def check_ancestry():
        assert is_strict_ancestor(L(1), L(1, 2))
        assert not is_strict_ancestor(L(1), L(1))
        assert not is_strict_ancestor(L(2), L(1, 2))
    check("strict ancestry", check_ancestry)

    def check_parent():
        assert parent(L(1, 2, 1)) == L(1, 2)
        assert parent(L(7)) == L()
        try:
            parent(L())
        except ValueError:
            return
        raise AssertionError("root parent must fail")
    check("parent of labels", check_parent)

    def check_config_metric():
        e1 = ParticleConfiguration({L(1): [0.0], L(2): [1.0]})
        e2 = ParticleConfiguration({L(1): [0.3], L(2, 1): [1.0]})
        assert abs(config_distance(e1, e2) - 2.3) < 1e-12
        assert config_distance(e1, e1) == 0.0
        assert config_count(e1) == config_distance(e1, ParticleConfiguration.empty(1))
    check("configuration metric", check_config_metric)

    grid = SimulationGrid(horizon=1.0, dt=1.0 / 8)
    ic = InitialCondition.fixed([[0.0], [0.5]])
    rng = RandomnessSource(master_seed=424242)
    env0 = frozen_initial_environment(ic, grid, rng, replicas=4)
    fam = ConstantCoefficients(dim=1, drift=0.1, diffusion=0.4, death_rate=0.8,
                               progeny=(0.5, 0.0, 0.5), gamma_bar=0.8)
    trees = simulate_replicas(ic, fam, env0, grid, rng, replicas=4)

    def check_stop():
        p = trees[0]
        assert path_distance(stop(p, 1.0), p) == 0.0
        q1 = stop(stop(p, 0.75), 0.5)
        q2 = stop(p, 0.5)
        assert path_distance(q1, q2) == 0.0
        configuration_at(p, 0.0)
    check("stopping operator", check_stop)

    def check_pushforward():
        m = EnvironmentMeasure(trees)
        assert w1_paths(pushforward(m, 1.0), m, mode="exact") == 0.0
        assert w1_paths(m, m, mode="exact") == 0.0
    check("pushforward and self-distance", check_pushforward)

    def check_counting():
        assert w1_counting(CountingDistribution.point(0), CountingDistribution.point(3)) == 3.0
        p = CountingDistribution((0.5, 0.5))
        q = CountingDistribution((0.0, 0.5, 0.5))
        assert abs(w1_counting(p, q) - 1.0) < 1e-12
        assert abs(w1_counting_via_intervals(p, q) - w1_counting(p, q)) < 1e-10
    check("counting distances", check_counting)

    def check_intervals():
        P = (0.2, 0.3, 0.5)
        assert offspring_interval_index(0.0, P) == 0
        assert offspring_interval_index(0.6, P) == 2
        assert offspring_interval_index(0.499999, P) == 1
    check("offspring intervals", check_intervals)

    def check_eval_all():
        view = PathParticleView(trees[0], trees[0].records[0].label, 0.5)
        b, sigma, gamma, P = eval_all(fam, 0.5, view, pushforward(EnvironmentMeasure(trees), 0.5))
        assert float(b[0]) == 0.1 and float(sigma[0, 0]) == 0.4 and gamma == 0.8
    check("coefficient evaluation", check_eval_all)

    def check_generator():
        frozen = ConstantCoefficients(dim=1, drift=0.0, diffusion=0.0, death_rate=0.0)
        val = generator(PHI_LIBRARY["identity"], BASE_LIBRARY["one"], 0.5,
                        trees[0], EnvironmentMeasure(trees), frozen)
        assert val == 0.0
    check("generator vanishes for frozen dynamics", check_generator)

    def check_martingale_zero_weight():
        rep = martingale_statistic(PHI_LIBRARY["identity"], BASE_LIBRARY["one"],
                                   lambda p, s: 0.0, 0.0, 1.0, trees,
                                   EnvironmentMeasure(trees), fam)
        assert rep.value == 0.0
    check("zero-weight statistic", check_martingale_zero_weight)

    def check_picard():
        mu, state = solve_fixed_point(ic, fam, grid, rng, replicas=4, tol=1e-12,
                                      mode="exact")
        assert state.converged and state.iterations == 2
        mu2 = picard_step(mu, 4, ic, fam, grid, rng)
        assert w1_paths(mu2, mu, mode="exact") == 0.0
    check("fixed point without interaction", check_picard)

    def check_stability_zero():
        report = stability_experiment(fam, fam, ic, ic, rng, replicas=4, grid=grid,
                                      probes=4)
        assert report.lhs == 0.0
    check("coupled zero perturbation", check_stability_zero)

    if verbose:
        for name, ok, detail in results:
            status = "ok" if ok else "FAIL"
            line = f"selftest {status}: {name}"
            if detail:
                line += f" ({detail})"
            print(line)
    return results


_HANDLERS = {
    "simulate-tree": cmd_simulate_tree,
    "solve-mkv": cmd_solve_mkv,
    "simulate-n": cmd_simulate_n,
    "chaos-study": cmd_chaos_study,
    "diagnose-martingale": cmd_diagnose_martingale,
    "stability": cmd_stability,
}


def _error(kind: str, detail: str) -> None:
    print(f"event=error kind={kind} detail={detail!r}", file=sys.stderr)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mkvb",
        description="Branching-diffusion simulation engine with mean-field interaction",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name != "selftest":
            p.add_argument("--config", required=True, help="path to the run config")
            p.add_argument("--output", default=None, help="override the output directory")
    args = parser.parse_args(argv)

    if args.command == "selftest":
        results = run_selftest()
        failed = [r for r in results if not r[1]]
        if failed:
            _error("selftest", f"{len(failed)} of {len(results)} checks failed")
            return 4
        print(f"selftest passed: {len(results)} checks")
        return 0

    try:
        cfg = load_config(args.config, args.command)
    except ConfigError as exc:
        _error("config", str(exc))
        return 2
    outdir = Path(args.output) if args.output else Path(cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    try:
        extras = _HANDLERS[args.command](cfg, outdir)
    except ConfigError as exc:
        _error("config", str(exc))
        return 2
    except ExplosionError as exc:
        _error("guard", str(exc))
        write_manifest(outdir, args.command, cfg,
                       {"guard": {"explosion": str(exc)}},
                       time.perf_counter() - start)
        return 3
    except _GuardFailure as exc:
        _error("guard", str(exc))
        write_manifest(outdir, args.command, cfg, exc.extras,
                       time.perf_counter() - start)
        return 3
    write_manifest(outdir, args.command, cfg, extras, time.perf_counter() - start)
    guard = extras.get("guard", {})
    if guard.get("converged") is False:
        _error("guard", "fixed-point solve did not converge")
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
