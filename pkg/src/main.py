#!/usr/bin/env python3
"""
Influential Bandit Toolkit - CLI Interface

Simulates bandits whose arm losses move with every pull, runs Influential
LCB and standard LCB against them, measures regret growth, and fits
interaction matrices to logged (arm, loss) histories.
"""

import argparse
import csv
import json
import sys
from functools import partial
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
from pydantic import ValidationError

import config
from benchmark import regret, solve_simplex_qp
from core import Instance, effective_linear_term, load_instance, max_abs_norm
from env import Environment, run_policy, write_trace_csv
from errors import BanditError, ConfigError, NotPsdError
from estimation import (
    FitHyperparams,
    analyze_fits,
    fit_interaction_model,
    ingest_rating_csv,
    load_arm_map,
    probing_estimator,
    simulate_rating_log,
    stationary_baseline,
    summarize_errors,
    write_eigenvalue_rows,
    write_fit_row,
    write_matrix_csv,
    write_rating_csv,
)
from experiments import (
    check_theorem_bound,
    counterexample_instance,
    default_benchmark,
    fit_loglog_slope,
    lcb_exploration_counts,
    linear_regret_instance,
    random_instance,
    regret_scan,
    slope_histogram,
    worker_pool,
)
from logger import logger
from models import (
    CONFIG_TYPES,
    FitConfig,
    HistogramConfig,
    ProbeConfig,
    QpConfig,
    RunCommandConfig,
    RunConfig,
    ScanConfig,
    SynthConfig,
)
from policies import make_policy, parse_policy_spec
from rng import RNG_ALGORITHM, derive_seed


def parse_horizons(text: str) -> List[int]:
    """`start:end:xF` geometric grid or a comma-separated list"""
    text = text.strip()
    if not text:
        raise ConfigError("horizon list is empty")
    if ':' in text:
        try:
            start, end, step = text.split(':')
            if not step.startswith('x'):
                raise ValueError
            start, end, factor = int(start), int(end), float(step[1:])
        except ValueError:
            raise ConfigError(f"invalid horizon grid '{text}' (expected start:end:xF)")
        if start < 1 or factor <= 1 or end < start:
            raise ConfigError(f"invalid horizon grid '{text}'")
        horizons, value = [], float(start)
        while round(value) <= end:
            if not horizons or round(value) > horizons[-1]:
                horizons.append(int(round(value)))
            value *= factor
        return horizons
    try:
        return [int(part) for part in text.split(',') if part.strip()]
    except ValueError:
        raise ConfigError(f"invalid horizon list '{text}'")


def resolve_instance(spec: str, master_seed: int, index: int = 0) -> Tuple[str, Instance]:
    """`prop2`, `prop3`, `random:k=<K>` or a path to an instance JSON file"""
    if spec == 'prop2':
        return 'prop2', counterexample_instance()
    if spec == 'prop3':
        return 'prop3', linear_regret_instance()
    if spec.startswith('random'):
        _, _, arg = spec.partition(':')
        try:
            k = int(arg.split('=', 1)[1]) if arg else 3
        except (IndexError, ValueError):
            raise ConfigError(f"invalid random instance spec '{spec}' (expected random:k=<K>)")
        return f"random{index + 1}", random_instance(k, derive_seed(master_seed, "instance", index))
    path = Path(spec)
    if not path.exists():
        raise ConfigError(f"unknown instance '{spec}' (expected prop2, prop3, random:k=<K> or a JSON file)")
    try:
        return path.stem, load_instance(path)
    except (ValueError, KeyError) as e:
        raise ConfigError(f"invalid instance file {path}: {e}")


def write_json(path: Path, payload: Dict[str, Any]):
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def write_meta(out_dir: Path, cfg: RunConfig):
    write_json(out_dir / "meta.json", {
        "config": cfg.model_dump(mode='json'),
        "master_seed": cfg.seed,
        "rng": RNG_ALGORITHM,
        "version": config.__version__,
    })


def prepare_output(cfg: RunConfig) -> Path:
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_meta(out_dir, cfg)
    return out_dir


# Commands

def cmd_run(cfg: RunCommandConfig) -> int:
    """Single episode: trace.csv and summary.json"""
    instance_id, inst = resolve_instance(cfg.instance, cfg.seed)
    policy = make_policy(cfg.policy, inst.k, seed=derive_seed(cfg.seed, "policy"))
    out_dir = prepare_output(cfg)

    logger.step(1, f"Running {policy.name} on {instance_id} for {cfg.horizon} rounds")
    trace = run_policy(inst, policy, cfg.horizon, derive_seed(cfg.seed, "run"))
    write_trace_csv(trace, out_dir / "trace.csv")

    benchmark = cfg.benchmark
    if benchmark == 'auto':
        benchmark = default_benchmark(inst)
    try:
        run_regret: Optional[float] = regret(inst, trace, benchmark)
    except NotPsdError as e:
        logger.warning(f"No regret reported: {e}")
        run_regret = None

    write_json(out_dir / "summary.json", {
        "instance": instance_id,
        "policy": policy.name,
        "horizon": cfg.horizon,
        "total_expected_loss": float(np.sum(trace.expected_losses)),
        "total_observed_loss": float(np.sum(trace.observed_losses)),
        "benchmark": benchmark,
        "regret": run_regret,
        "counts": [int(c) for c in trace.counts(inst.k).counts],
    })
    logger.success(f"Wrote trace and summary to {out_dir}")
    return 0


def cmd_scan(cfg: ScanConfig) -> int:
    """Seed-averaged regret curves and log-log slopes per policy and instance"""
    for spec in cfg.policies:
        parse_policy_spec(spec)
    if cfg.n_instances > 1 and not cfg.instance.startswith('random'):
        raise ConfigError(f"--n-instances {cfg.n_instances} needs a random:k=K instance, got '{cfg.instance}'")
    instances = [resolve_instance(cfg.instance, cfg.seed, i) for i in range(cfg.n_instances)]
    out_dir = prepare_output(cfg)

    curve_rows, slope_rows, summary = [], [], {"policies": {}}
    with worker_pool(cfg.jobs) as pool:
        for policy_spec in cfg.policies:
            logger.step(1, f"Scanning {policy_spec} over {len(instances)} instance(s), {cfg.n_seeds} seeds each")
            curves = []
            bound_checks = []
            for index, (instance_id, inst) in enumerate(instances):
                seeds = [derive_seed(cfg.seed, "run", index, s) for s in range(cfg.n_seeds)]
                benchmark = None if cfg.benchmark == 'auto' else cfg.benchmark
                curve = regret_scan(inst, policy_spec, cfg.horizons, seeds, instance_id=instance_id,
                                    benchmark=benchmark, pool=pool, master_seed=cfg.seed)
                curves.append(curve)
                for t, mean, err in zip(curve.horizons, curve.regrets, curve.stderr):
                    curve_rows.append([policy_spec, instance_id, t, repr(mean), repr(err), curve.n_seeds])
                if policy_spec.startswith('ilcb'):
                    bound_checks.append(check_theorem_bound(inst, curve))

            mean_regrets = np.mean([c.regrets for c in curves], axis=0)
            entry: Dict[str, Any] = {}
            try:
                fit = fit_loglog_slope(curves[0].model_copy(update={
                    "regrets": [float(v) for v in mean_regrets], "instance_id": "mean"}))
                slope_rows.append([policy_spec, "mean", cfg.seed, repr(fit.slope), repr(fit.intercept),
                                   repr(fit.r_squared), fit.n_points])
                entry.update(slope=fit.slope, r2=fit.r_squared, excluded_points=fit.n_excluded)
                logger.info(f"{policy_spec}: log-log slope {fit.slope:.3f} (r2={fit.r_squared:.3f})")
            except BanditError as e:
                logger.warning(f"{policy_spec}: no slope ({e})")
            if bound_checks:
                violations = sum(c.violations for c in bound_checks)
                advisory = any(c.advisory for c in bound_checks)
                entry["theorem_bound"] = {"checked": sum(c.checked for c in bound_checks),
                                          "violations": violations, "advisory": advisory}
                if violations and not advisory:
                    logger.error(f"{policy_spec}: {violations} horizon(s) exceed the regret guarantee")
            summary["policies"][policy_spec] = entry

    if cfg.instance == 'prop2' and 'lcb' in cfg.policies:
        summary["lcb_exploration"] = [c.model_dump() for c in lcb_exploration_counts(cfg.horizons)]

    with open(out_dir / "regret_curve.csv", 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['policy', 'instance', 'T', 'regret_mean', 'regret_stderr', 'n_seeds'])
        writer.writerows(curve_rows)
    with open(out_dir / "slopes.csv", 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['policy', 'instance', 'seed', 'slope', 'intercept', 'r2', 'n_points'])
        writer.writerows(slope_rows)
    write_json(out_dir / "summary.json", summary)
    logger.success(f"Wrote regret curves to {out_dir}")
    return 0


def cmd_histogram(cfg: HistogramConfig) -> int:
    """Per-instance slope fits over random instances and their histogram"""
    parse_policy_spec(cfg.policy)
    out_dir = prepare_output(cfg)
    logger.step(1, f"Fitting slopes of {cfg.policy} on {cfg.n_instances} random K={cfg.k} instances")
    with worker_pool(cfg.jobs) as pool:
        hist = slope_histogram(cfg.k, cfg.n_instances, cfg.horizons, cfg.policy,
                               master_seed=cfg.seed, bins=cfg.bins, pool=pool)

    with open(out_dir / "slopes.csv", 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['instance', 'seed', 'slope', 'intercept', 'r2', 'n_points'])
        for instance_id, seed, fit in zip(hist.instance_ids, hist.seeds, hist.fits):
            writer.writerow([instance_id, seed, repr(fit.slope), repr(fit.intercept), repr(fit.r_squared),
                             fit.n_points])
    with open(out_dir / "histogram.csv", 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['bin_left', 'bin_right', 'count'])
        for left, right, count in zip(hist.edges[:-1], hist.edges[1:], hist.counts):
            writer.writerow([repr(float(left)), repr(float(right)), int(count)])

    slopes = np.array([f.slope for f in hist.fits])
    write_json(out_dir / "summary.json", {
        "n_instances": len(hist.fits),
        "below_0.5": int(np.sum(slopes < 0.5)),
        "between_0.8_1.3": int(np.sum((slopes >= 0.8) & (slopes <= 1.3))),
    })
    logger.success(f"Wrote {len(hist.fits)} slopes to {out_dir}")
    return 0


def _fit_user(k: int, parametrization: str, hyper: FitHyperparams, norm: str, log):
    return fit_interaction_model(log, k, parametrization, hyper, norm)


def cmd_fit(cfg: FitConfig) -> int:
    """Per-user leave-one-out fits; rows are flushed as each user finishes"""
    arm_names = load_arm_map(cfg.arm_map) if cfg.arm_map else None
    if arm_names and len(arm_names) != cfg.k:
        raise ConfigError(f"arm map lists {len(arm_names)} arms, --k is {cfg.k}")
    logger.step(1, f"Loading ratings from {cfg.ratings}")
    logs = ingest_rating_csv(cfg.ratings, cfg.k, cfg.rating_max, cfg.seed, cfg.min_events, arm_names)
    if not logs:
        raise ConfigError(f"no user in {cfg.ratings} has at least {cfg.min_events} events")
    out_dir = prepare_output(cfg)

    users = list(logs.values())
    baselines = [stationary_baseline(log, cfg.k) for log in users]
    fits = []
    logger.step(2, f"Fitting {cfg.parametrization} model for {len(users)} user(s)")
    with open(out_dir / "fits.csv", 'w', newline='', encoding='utf-8') as fits_file, \
            open(out_dir / "eigenvalues.csv", 'w', newline='', encoding='utf-8') as eig_file:
        fits_writer = csv.writer(fits_file, lineterminator='\n')
        eig_writer = csv.writer(eig_file, lineterminator='\n')
        fits_writer.writerow(['user', 'parametrization', 'train_mse', 'loo_sq_error', 'norm_a'])
        eig_writer.writerow(['user', 'index', 'value'])
        try:
            with worker_pool(cfg.jobs) as pool:
                task = partial(_fit_user, cfg.k, cfg.parametrization, cfg.hyperparams, cfg.norm)
                for done, fit in enumerate(pool.map(task, users), start=1):
                    fits.append(fit)
                    write_fit_row(fits_writer, fit)
                    write_eigenvalue_rows(eig_writer, fit)
                    fits_file.flush()
                    eig_file.flush()
                    logger.progress(done, len(users), f"user {fit.user_id}: held-out error {fit.loo_squared_error:.4g} "
                                    f"(stationary {baselines[done - 1].loo_squared_error:.4g})")
        except KeyboardInterrupt:
            logger.warning(f"Interrupted; {len(fits)} of {len(users)} fits flushed to {out_dir}")
            return 1

    analysis = analyze_fits(fits)
    write_matrix_csv(analysis.a_mean, out_dir / "a_mean.csv", arm_names)
    summary = summarize_errors(fits, baselines)
    write_json(out_dir / "summary.json", summary.model_dump())
    logger.success(f"Held-out MSE: stationary {summary.stationary_mean:.4f} ± {summary.stationary_std:.4f}, "
                   f"{cfg.parametrization} {summary.influential_mean:.4f} ± {summary.influential_std:.4f}")
    return 0


def cmd_probe(cfg: ProbeConfig) -> int:
    """Estimate A with the O(K^2) probe schedule"""
    instance_id, inst = resolve_instance(cfg.instance, cfg.seed)
    out_dir = prepare_output(cfg)
    env = Environment(inst, derive_seed(cfg.seed, "probe"))
    result = probing_estimator(env, inst.k, cfg.budget, cfg.both_orders)
    error = float(np.max(np.abs(result.a_hat.entries - inst.a.entries)))
    write_json(out_dir / "probe.json", {
        "instance": instance_id,
        "a_hat": [[float(v) for v in row] for row in result.a_hat.entries],
        "pulls": result.pulls,
        "pulls_per_k2": result.pulls_per_k2,
        "max_abs_error": error,
        "noise_bound": inst.noise.bound if np.isfinite(inst.noise.bound) else None,
    })
    logger.success(f"Probed {instance_id} with {result.pulls} pulls; max abs error {error:.4g}")
    return 0


def cmd_qp(cfg: QpConfig) -> int:
    """Continuous-relaxation benchmark for one instance and horizon"""
    instance_id, inst = resolve_instance(cfg.instance, cfg.seed)
    out_dir = prepare_output(cfg)
    solution = solve_simplex_qp(effective_linear_term(inst), inst.a, cfg.horizon)
    write_json(out_dir / "qp.json", {
        "instance": instance_id,
        "horizon": cfg.horizon,
        "p_star": [float(v) for v in solution.p_star],
        "value": solution.value,
        "iterations": solution.iterations,
        "duality_gap": solution.duality_gap,
    })
    logger.success(f"L*({cfg.horizon}) = {solution.value!r} after {solution.iterations} iterations")
    return 0


def cmd_synth(cfg: SynthConfig) -> int:
    """Write a synthetic rating corpus generated from an instance"""
    instance_id, inst = resolve_instance(cfg.instance, cfg.seed)
    out_dir = prepare_output(cfg)
    logs = [simulate_rating_log(inst, cfg.n_events, derive_seed(cfg.seed, "user", i), user_id=f"u{i + 1}")
            for i in range(cfg.n_users)]
    write_rating_csv(logs, out_dir / "ratings.csv", cfg.rating_max)
    logger.success(f"Wrote {cfg.n_users} synthetic user(s) from {instance_id} "
                   f"(max|A| = {max_abs_norm(inst.a):.4g}) to {out_dir / 'ratings.csv'}")
    return 0


COMMANDS: Dict[str, Callable[[Any], int]] = {
    'run': cmd_run,
    'scan': cmd_scan,
    'histogram': cmd_histogram,
    'fit': cmd_fit,
    'probe': cmd_probe,
    'qp': cmd_qp,
    'synth': cmd_synth,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, default=config.DEFAULT_SEED, help='Master seed')
    common.add_argument('--jobs', type=int, default=config.DEFAULT_JOBS, help='Worker processes')
    common.add_argument('--out', type=str, default=config.DEFAULT_OUT, help='Output directory')
    common.add_argument('--verbose', action='store_true', help='Enable verbose logging')

    parser = argparse.ArgumentParser(
        description="Simulate, solve and estimate influential bandits",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python src/main.py run --instance prop2 --policy fixed:1 --T 100
  python src/main.py scan --instance prop2 --policies ilcb,lcb --horizons 128:16384:x2
  python src/main.py histogram --k 3 --n-instances 100 --policy ilcb
  python src/main.py fit --ratings ratings.csv --k 20 --parametrization indefinite
  python src/main.py rerun results/meta.json --out rerun/
        """
    )
    sub = parser.add_subparsers(dest='command', required=True)

    run = sub.add_parser('run', parents=[common], help='Run one episode')
    run.add_argument('--instance', required=True, help='prop2, prop3, random:k=<K> or instance JSON')
    run.add_argument('--policy', required=True, help='ilcb, ilcb:B=<float|auto>, lcb, fixed:<arm>, round_robin, uniform')
    run.add_argument('--T', dest='horizon', type=int, required=True, help='Horizon')
    run.add_argument('--benchmark', choices=['auto', 'relaxed', 'exact'], default='auto')

    scan = sub.add_parser('scan', parents=[common], help='Regret-vs-horizon scan')
    scan.add_argument('--instance', required=True)
    scan.add_argument('--policies', required=True, help='Comma-separated policy names')
    scan.add_argument('--horizons', default=config.DEFAULT_HORIZONS, help='start:end:xF or a comma list')
    scan.add_argument('--n-seeds', type=int, default=config.DEFAULT_SEEDS_PER_INSTANCE)
    scan.add_argument('--n-instances', type=int, default=1)
    scan.add_argument('--benchmark', choices=['auto', 'relaxed', 'exact'], default='auto')

    hist = sub.add_parser('histogram', parents=[common], help='Slope histogram over random instances')
    hist.add_argument('--k', type=int, default=3)
    hist.add_argument('--n-instances', type=int, default=100)
    hist.add_argument('--horizons', default=config.DEFAULT_HORIZONS)
    hist.add_argument('--policy', default='ilcb')
    hist.add_argument('--bins', type=int, default=20)

    fit = sub.add_parser('fit', parents=[common], help='Fit interaction matrices to rating logs')
    fit.add_argument('--ratings', required=True, help='CSV with user,timestamp,arms,rating')
    fit.add_argument('--k', type=int, required=True)
    fit.add_argument('--parametrization', choices=['psd', 'indefinite'], default='psd')
    fit.add_argument('--rating-max', type=float, default=config.DEFAULT_RATING_MAX)
    fit.add_argument('--min-events', type=int, default=config.DEFAULT_MIN_EVENTS)
    fit.add_argument('--arm-map', help='Arm names, one per line, in index order')
    fit.add_argument('--norm', choices=['max_abs', 'frobenius', 'spectral'], default='max_abs')
    fit.add_argument('--learning-rate', type=float, default=FitHyperparams().learning_rate)
    fit.add_argument('--momentum', type=float, default=FitHyperparams().momentum)
    fit.add_argument('--max-iterations', type=int, default=FitHyperparams().max_iterations)
    fit.add_argument('--cold-start', action='store_true',
                     help='Start descent from per-arm means instead of the least-squares solution')

    probe = sub.add_parser('probe', parents=[common], help='Estimate A with the probe schedule')
    probe.add_argument('--instance', required=True)
    probe.add_argument('--both-orders', action='store_true')
    probe.add_argument('--budget', type=int)

    qp = sub.add_parser('qp', parents=[common], help='Solve the relaxed benchmark')
    qp.add_argument('--instance', required=True)
    qp.add_argument('--T', dest='horizon', type=int, required=True)

    synth = sub.add_parser('synth', parents=[common], help='Write a synthetic rating corpus')
    synth.add_argument('--instance', required=True)
    synth.add_argument('--n-users', type=int, default=1)
    synth.add_argument('--n-events', type=int, default=config.DEFAULT_MIN_EVENTS)
    synth.add_argument('--rating-max', type=float, default=config.DEFAULT_RATING_MAX)

    rerun = sub.add_parser('rerun', help='Repeat a command from its meta.json')
    rerun.add_argument('meta', help='Path to meta.json')
    rerun.add_argument('--out', help='Write to this directory instead of the recorded one')
    rerun.add_argument('--jobs', type=int, help='Override worker processes')
    rerun.add_argument('--verbose', action='store_true')

    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    """Resolve parsed flags into the command's config model"""
    values = {k: v for k, v in vars(args).items() if k not in ('verbose',) and v is not None}
    command = values['command']
    if command in ('scan', 'histogram'):
        values['horizons'] = parse_horizons(values['horizons'])
    if command == 'scan':
        values['policies'] = [p.strip() for p in values['policies'].split(',') if p.strip()]
    if command == 'fit':
        values['hyperparams'] = FitHyperparams(
            learning_rate=values.pop('learning_rate'),
            momentum=values.pop('momentum'),
            max_iterations=values.pop('max_iterations'),
            warm_start=not values.pop('cold_start'),
            seed=values['seed'],
        )
    return CONFIG_TYPES[command](**values)


def config_from_meta(args: argparse.Namespace) -> RunConfig:
    try:
        with open(args.meta, 'r', encoding='utf-8') as f:
            recorded = json.load(f)["config"]
    except (OSError, KeyError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read {args.meta}: {e}")
    if args.out:
        recorded['out'] = args.out
    if args.jobs:
        recorded['jobs'] = args.jobs
    command = recorded.get('command')
    if command not in CONFIG_TYPES:
        raise ConfigError(f"{args.meta}: unknown command '{command}'")
    return CONFIG_TYPES[command](**recorded)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    if args.verbose:
        logger.set_verbose(True)

    try:
        cfg = config_from_meta(args) if args.command == 'rerun' else config_from_args(args)
        return COMMANDS[cfg.command](cfg)
    except ValidationError as e:
        logger.error(f"Invalid configuration: {e}")
        return 2
    except BanditError as e:
        logger.error(str(e))
        return e.exit_code
    except OSError as e:
        logger.error(f"File error: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
