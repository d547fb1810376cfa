"""
Experiment drivers: instance generators, regret-vs-horizon scans, log-log
slope fits and slope histograms over random instances.
"""

import math
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from functools import partial
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from benchmark import (
    COUNTEREXAMPLE_A,
    COUNTEREXAMPLE_L1,
    LINEAR_REGRET_A,
    LINEAR_REGRET_L1,
    Benchmark,
    benchmark_value,
    exact_optimum,
    theorem_bound,
)
from core import Instance, InteractionMatrix, NoiseModel
from env import run_policy
from errors import ConfigError, DataError
from logger import logger
from policies import make_policy
from rng import derive_seed, make_generator


class RegretCurve(BaseModel):
    """Seed-averaged regret at each horizon"""

    horizons: List[int]
    regrets: List[float]
    stderr: List[float]
    max_run_regrets: List[float]
    n_seeds: int
    policy_name: str
    instance_id: str = ""
    seed: int = 0

    @model_validator(mode='after')
    def check_shape(self):
        if any(b <= a for a, b in zip(self.horizons, self.horizons[1:])):
            raise ValueError("horizons must be strictly increasing")
        n = len(self.horizons)
        if not (len(self.regrets) == len(self.stderr) == len(self.max_run_regrets) == n):
            raise ValueError("curve columns must match the horizons")
        return self


class SlopeFit(BaseModel):
    slope: float
    intercept: float
    r_squared: float
    n_points: int
    n_excluded: int = 0


class SlopeHistogram(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    instance_ids: List[str]
    seeds: List[int]
    fits: List[SlopeFit]
    counts: np.ndarray
    edges: np.ndarray


# Instances

def counterexample_instance() -> Instance:
    """K=2 noiseless instance where standard LCB suffers near-quadratic regret"""
    return Instance(a=InteractionMatrix.certify(COUNTEREXAMPLE_A), initial_losses=COUNTEREXAMPLE_L1)


def linear_regret_instance() -> Instance:
    """K=2 noiseless instance with b = 0 where any first pull of arm 1 costs T/4 + 1/8"""
    return Instance(a=InteractionMatrix.certify(LINEAR_REGRET_A), initial_losses=LINEAR_REGRET_L1)


def random_instance(k: int, seed: int) -> Instance:
    """A = B^T B / max|B^T B| with standard normal B, standard normal l1, unit Gaussian noise"""
    if k < 2:
        raise ConfigError(f"random instances need k >= 2, got {k}")
    rng = make_generator(seed)
    while True:
        b = rng.standard_normal((k, k))
        gram = b.T @ b
        gram = (gram + gram.T) / 2.0
        scale = float(np.max(np.abs(gram)))
        if scale > 0:
            break
        rng = make_generator(derive_seed(seed, "resample"))
    a = InteractionMatrix.certify(gram / scale)
    return Instance(a=a, initial_losses=rng.standard_normal(k), noise=NoiseModel(kind='gaussian', param=1.0))


# Worker pools

class SerialPool:
    """Same `map` interface as an executor, run in-process"""

    def map(self, fn, *iterables):
        return map(fn, *iterables)


@contextmanager
def worker_pool(jobs: int) -> Iterator:
    """Process pool for jobs > 1; results always come back in submission order"""
    if jobs <= 1:
        yield SerialPool()
        return
    with ProcessPoolExecutor(max_workers=jobs) as executor:
        yield executor


# Regret scans

def default_benchmark(inst: Instance) -> Benchmark:
    return 'exact' if exact_optimum(inst, 1) is not None else 'relaxed'


def _run_regrets(inst: Instance, policy_spec: str, horizons: Tuple[int, ...],
                 baselines: Tuple[float, ...], seed: int) -> np.ndarray:
    """
    One run to the largest horizon; regret at each smaller horizon is read
    from the prefix, which equals a fresh run of that length.
    """
    policy = make_policy(policy_spec, inst.k, seed=derive_seed(seed, "policy"))
    trace = run_policy(inst, policy, horizons[-1], seed)
    cumulative = np.cumsum(trace.expected_losses)
    return np.array([cumulative[t - 1] - base for t, base in zip(horizons, baselines)])


def regret_scan(inst: Instance, policy_spec: str, horizons: Sequence[int], seeds: Sequence[int],
                instance_id: str = "", benchmark: Optional[Benchmark] = None,
                pool=None, master_seed: int = 0) -> RegretCurve:
    """Mean regret over seeds at each horizon"""
    horizons = tuple(int(t) for t in horizons)
    if not horizons:
        raise ConfigError("horizon list is empty")
    if any(t < 1 for t in horizons) or any(b <= a for a, b in zip(horizons, horizons[1:])):
        raise ConfigError("horizons must be positive and strictly increasing")
    if not seeds:
        raise ConfigError("need at least one seed")

    benchmark = benchmark or default_benchmark(inst)
    baselines = tuple(benchmark_value(inst, t, benchmark) for t in horizons)
    pool = pool or SerialPool()

    task = partial(_run_regrets, inst, policy_spec, horizons, baselines)
    runs = np.array(list(pool.map(task, list(seeds))))
    n = runs.shape[0]
    stderr = runs.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(len(horizons))

    logger.debug(f"{policy_spec} on {instance_id or 'instance'}: final mean regret {runs[:, -1].mean():.6g}")
    return RegretCurve(
        horizons=list(horizons),
        regrets=[float(v) for v in runs.mean(axis=0)],
        stderr=[float(v) for v in stderr],
        max_run_regrets=[float(v) for v in runs.max(axis=0)],
        n_seeds=n,
        policy_name=policy_spec,
        instance_id=instance_id,
        seed=master_seed,
    )


def fit_power_law(horizons: Sequence[float], regrets: Sequence[float]) -> SlopeFit:
    """Least-squares line through (log T, log regret) over points with positive regret"""
    horizons = np.asarray(horizons, dtype=np.float64)
    regrets = np.asarray(regrets, dtype=np.float64)
    usable = regrets > 0
    n_points = int(usable.sum())
    if n_points < 2:
        raise DataError(f"need at least 2 points with positive regret, got {n_points}")

    x = np.log(horizons[usable])
    y = np.log(regrets[usable])
    slope, intercept = np.polyfit(x, y, 1)
    residual = y - (slope * x + intercept)
    total = float(np.sum((y - y.mean()) ** 2))
    r_squared = 1.0 - float(np.sum(residual ** 2)) / total if total > 0 else 1.0
    return SlopeFit(slope=float(slope), intercept=float(intercept), r_squared=r_squared,
                    n_points=n_points, n_excluded=int(usable.size - n_points))


def fit_loglog_slope(curve: RegretCurve) -> SlopeFit:
    fit = fit_power_law(curve.horizons, curve.regrets)
    if fit.n_excluded:
        logger.info(f"{curve.policy_name}: {fit.n_excluded} non-positive regret point(s) left out of the slope fit")
    return fit


def _instance_slope(k: int, horizons: Tuple[int, ...], policy_spec: str, master_seed: int,
                    index: int) -> Tuple[int, Optional[SlopeFit]]:
    inst = random_instance(k, derive_seed(master_seed, "instance", index))
    run_seed = derive_seed(master_seed, "run", index, 0)
    curve = regret_scan(inst, policy_spec, horizons, [run_seed], instance_id=str(index + 1),
                        benchmark='relaxed')
    try:
        return run_seed, fit_loglog_slope(curve)
    except DataError:
        return run_seed, None


def slope_histogram(k: int, n_instances: int, horizons: Sequence[int], policy_spec: str = 'ilcb',
                    master_seed: int = 0, bins: int = 20, pool=None) -> SlopeHistogram:
    """Per-instance slope fits (one seed each) over random instances, binned"""
    if n_instances < 1:
        raise ConfigError(f"need at least one instance, got {n_instances}")
    pool = pool or SerialPool()
    task = partial(_instance_slope, k, tuple(int(t) for t in horizons), policy_spec, master_seed)
    results = list(pool.map(task, range(n_instances)))

    ids, seeds, fits = [], [], []
    for index, (run_seed, fit) in enumerate(results):
        if fit is None:
            logger.warning(f"instance {index + 1}: fewer than 2 positive regret points, no slope")
            continue
        ids.append(str(index + 1))
        seeds.append(run_seed)
        fits.append(fit)
    if not fits:
        raise DataError("no instance produced a slope")

    slopes = np.array([f.slope for f in fits])
    margin = 1e-6 * max(1.0, float(np.max(np.abs(slopes))))
    counts, edges = np.histogram(slopes, bins=bins, range=(slopes.min() - margin, slopes.max() + margin))
    return SlopeHistogram(instance_ids=ids, seeds=seeds, fits=fits, counts=counts, edges=edges)


# Checks on specific runs

class ExplorationCount(BaseModel):
    horizon: int
    n_arm2: int
    lower_bound: Optional[float] = None


def lcb_exploration_counts(horizons: Sequence[int]) -> List[ExplorationCount]:
    """Pulls of arm 2 by standard LCB on the counterexample, against T / (20 ln T) for T >= 2"""
    inst = counterexample_instance()
    horizons = [int(t) for t in horizons]
    trace = run_policy(inst, make_policy('lcb', inst.k), max(horizons), seed=0)
    on_arm2 = np.cumsum(trace.arms == 1)
    return [
        ExplorationCount(horizon=t, n_arm2=int(on_arm2[t - 1]),
                         lower_bound=t / (20.0 * math.log(t)) if t >= 2 else None)
        for t in horizons
    ]


class BoundCheck(BaseModel):
    checked: int
    violations: int
    advisory: bool


def check_theorem_bound(inst: Instance, curve: RegretCurve) -> BoundCheck:
    """
    Compare the worst run at every horizon with the Influential LCB guarantee.
    The guarantee assumes noise bounded by 1, so unbounded noise makes the check advisory.
    """
    l1_inf = float(np.max(np.abs(inst.initial_losses)))
    violations = sum(
        1 for t, worst in zip(curve.horizons, curve.max_run_regrets)
        if t > 1 and worst > theorem_bound(inst.k, l1_inf, t)
    )
    return BoundCheck(checked=len(curve.horizons), violations=violations, advisory=inst.noise.bound > 1.0)
