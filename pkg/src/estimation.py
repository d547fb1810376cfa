"""
Interaction-matrix estimation from logged pulls.

A log is a time-ordered list of (arm, loss) events. The influential model
predicts event t as l1[arm_t] + (A x_t)[arm_t], where x_t counts the pulls
before t. The fit leaves the last event out, minimizes the training squared
error by gradient descent with momentum, and predicts the held-out loss.
Two parametrizations keep A symmetric: A = B B^T (PSD) and A = M + M^T
(indefinite).
"""

import csv
import math
from collections import defaultdict
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from core import EIG_RELATIVE_TOLERANCE, Instance, InteractionMatrix, max_abs_norm, symmetric_eigenvalues
from errors import ArmIndexError, BudgetError, ConfigError, DataError, DimensionError
from logger import logger
from rng import derive_seed, make_generator

Parametrization = Literal['psd', 'indefinite']
NormKind = Literal['max_abs', 'frobenius', 'spectral']

REQUIRED_COLUMNS = ('user', 'timestamp', 'arms', 'rating')


class RatingLog(BaseModel):
    """One user's time-ordered (arm, loss) history"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    user_id: str
    arms: np.ndarray
    losses: np.ndarray

    @field_validator('arms', mode='before')
    @classmethod
    def as_arms(cls, v):
        array = np.array(v, dtype=np.int64)
        if array.ndim != 1 or (array.size and array.min() < 0):
            raise ValueError("arms must be a vector of non-negative indices")
        return array

    @field_validator('losses', mode='before')
    @classmethod
    def as_losses(cls, v):
        array = np.array(v, dtype=np.float64)
        if array.ndim != 1 or not np.all(np.isfinite(array)):
            raise ValueError("losses must be a finite vector")
        return array

    @model_validator(mode='after')
    def check_lengths(self):
        if self.arms.shape != self.losses.shape:
            raise ValueError("arms and losses must have the same length")
        return self

    def __len__(self) -> int:
        return int(self.arms.shape[0])


class FitHyperparams(BaseModel):
    """Optimizer settings for the interaction-model fit"""

    model_config = ConfigDict(frozen=True)

    learning_rate: float = Field(2e-2, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    max_iterations: int = Field(50_000, ge=1)
    tolerance: float = Field(1e-9, ge=0)
    gradient_tolerance: float = Field(1e-10, ge=0)
    window: int = Field(100, ge=1)
    patience: int = Field(2_000, ge=1)
    init_scale: float = Field(1e-2, ge=0)
    warm_start: bool = True
    seed: int = 0


class FitResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    user_id: str = ""
    l1_hat: np.ndarray
    a_hat: InteractionMatrix
    parametrization: Parametrization
    initial_train_mse: float
    train_mse: float
    loo_prediction: float
    loo_target: float
    loo_squared_error: float
    norm_a: float
    eigenvalues: np.ndarray
    iterations: int
    converged: bool


class StationaryBaseline(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    user_id: str = ""
    means: np.ndarray
    loo_prediction: float
    loo_squared_error: float


# Ingestion

def load_arm_map(path: Union[str, Path]) -> List[str]:
    """Arm names, one per line; line order gives the 0-based index"""
    with open(path, 'r', encoding='utf-8') as f:
        names = [line.strip() for line in f if line.strip()]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate arm names in {path}")
    return names


def _resolve_arm(token: str, k: int, name_index: Optional[Dict[str, int]]) -> int:
    if name_index is not None and token in name_index:
        arm = name_index[token]
    else:
        arm = int(token)
    if not 0 <= arm < k:
        raise ArmIndexError(f"arm {arm} out of range [0, {k})")
    return arm


def ingest_rating_csv(path: Union[str, Path], k: int, rating_max: float = 5.0, seed: int = 0,
                      min_events: int = 4096, arm_names: Optional[Sequence[str]] = None) -> Dict[str, RatingLog]:
    """
    Read a `user,timestamp,arms,rating` file into per-user logs.

    Loss is rating_max - rating. A row listing several candidate arms gets
    one of them uniformly at random from a stream seeded by `seed`. Users with
    fewer than `min_events` rows are dropped.
    """
    name_index = {name: i for i, name in enumerate(arm_names)} if arm_names else None
    rows: Dict[str, List[Tuple[float, int, List[int], float]]] = defaultdict(list)
    skipped = 0

    with open(path, 'r', newline='', encoding='utf-8') as f:
        reader = csv.DictReader(f)
        header = reader.fieldnames or []
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise ConfigError(f"{path}: missing required column(s): {', '.join(missing)}")

        for row in reader:
            try:
                user = row['user'].strip()
                timestamp = float(row['timestamp'])
                tokens = [tok.strip() for tok in row['arms'].split(';') if tok.strip()]
                rating = float(row['rating'])
                if not user or not tokens or not math.isfinite(rating) or not math.isfinite(timestamp):
                    raise ValueError("empty or non-finite field")
                candidates = [_resolve_arm(tok, k, name_index) for tok in tokens]
            except ArmIndexError as e:
                raise ArmIndexError(f"{path}:{reader.line_num}: {e}")
            except (ValueError, TypeError, AttributeError) as e:
                skipped += 1
                logger.warning(f"{path}:{reader.line_num}: skipping malformed row ({e})")
                continue
            rows[user].append((timestamp, reader.line_num, candidates, rating_max - rating))

    rng = make_generator(derive_seed(seed, "ingest"))
    logs: Dict[str, RatingLog] = {}
    for user in sorted(rows):
        events = sorted(rows[user], key=lambda e: (e[0], e[1]))
        arms = []
        for _, _, candidates, _ in events:
            arms.append(candidates[0] if len(candidates) == 1 else candidates[int(rng.integers(len(candidates)))])
        if len(events) < min_events:
            continue
        logs[user] = RatingLog(user_id=user, arms=arms, losses=[e[3] for e in events])

    logger.info(f"Loaded {len(logs)} of {len(rows)} users with at least {min_events} events "
                f"({skipped} malformed rows skipped)")
    return logs


def simulate_rating_log(inst: Instance, n_events: int, seed: int, user_id: str = "sim") -> RatingLog:
    """Pull uniformly random arms in a fresh environment and record observed losses"""
    from env import Environment

    env = Environment(inst, derive_seed(seed, "noise"))
    rng = make_generator(derive_seed(seed, "arms"))
    arms = rng.integers(inst.k, size=n_events)
    losses = [env.step(int(arm)) for arm in arms]
    return RatingLog(user_id=user_id, arms=arms, losses=losses)


def write_rating_csv(logs: Iterable[RatingLog], path: Union[str, Path], rating_max: float = 5.0):
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(REQUIRED_COLUMNS)
        for log in logs:
            for t in range(len(log)):
                writer.writerow([log.user_id, t, int(log.arms[t]), repr(rating_max - float(log.losses[t]))])


# Influential model fit

def prior_counts(arms: np.ndarray, k: int) -> np.ndarray:
    """Row t holds the per-arm pull counts before event t"""
    onehot = np.eye(k)[arms]
    return np.cumsum(onehot, axis=0) - onehot


class InteractionModel:
    """
    Squared-error objective over (l1, factor) on standardized data.

    Counts are divided by the training length and losses are centered and
    divided by their standard deviation; `unscale` maps parameters back.
    Because each event's prediction uses only its arm's row of [l1 | A], the
    objective reduces to per-arm Gram matrices computed once.
    """

    def __init__(self, arms: np.ndarray, losses: np.ndarray, k: int, parametrization: Parametrization):
        if arms.size and (arms.min() < 0 or arms.max() >= k):
            raise ArmIndexError(f"log contains arms outside [0, {k})")
        self.k = k
        self.parametrization = parametrization
        self.n = int(arms.shape[0])
        self.feature_scale = float(max(self.n, 1))
        self.target_shift = float(np.mean(losses))
        spread = float(np.std(losses))
        self.target_scale = spread if spread > 0 else 1.0

        self.arms = arms
        self.features = prior_counts(arms, k) / self.feature_scale
        self.targets = (losses - self.target_shift) / self.target_scale

        design = np.hstack([np.ones((self.n, 1)), self.features])
        self.gram = np.zeros((k, k + 1, k + 1))
        self.moment = np.zeros((k, k + 1))
        for arm in range(k):
            rows = design[arms == arm]
            self.gram[arm] = rows.T @ rows
            self.moment[arm] = rows.T @ self.targets[arms == arm]
        self.target_energy = float(self.targets @ self.targets)

    @property
    def size(self) -> int:
        return self.k + self.k * self.k

    def split(self, theta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return theta[:self.k], theta[self.k:].reshape(self.k, self.k)

    def matrix(self, factor: np.ndarray) -> np.ndarray:
        if self.parametrization == 'psd':
            gram = factor @ factor.T
            return (gram + gram.T) / 2.0
        return factor + factor.T

    def _weights(self, theta: np.ndarray) -> np.ndarray:
        l1, factor = self.split(theta)
        return np.hstack([l1[:, None], self.matrix(factor)])

    def objective(self, theta: np.ndarray) -> float:
        """Mean squared error in standardized units"""
        w = self._weights(theta)
        quad = np.einsum('ij,ijk,ik->', w, self.gram, w)
        # the expanded square can round below zero at an exact fit
        return max(float((quad - 2.0 * np.sum(w * self.moment) + self.target_energy) / self.n), 0.0)

    def gradient(self, theta: np.ndarray) -> np.ndarray:
        _, factor = self.split(theta)
        w = self._weights(theta)
        grad_w = 2.0 * (np.einsum('ijk,ik->ij', self.gram, w) - self.moment) / self.n
        grad_l1 = grad_w[:, 0]
        grad_a = grad_w[:, 1:]
        sym = grad_a + grad_a.T
        grad_factor = sym @ factor if self.parametrization == 'psd' else sym
        return np.concatenate([grad_l1, grad_factor.ravel()])

    def least_squares(self) -> Tuple[np.ndarray, np.ndarray]:
        """
        Exact minimizer of the objective over (l1, symmetric A).

        The model is linear in l1 and the upper triangle of A, so one
        least-squares solve finds it.
        """
        rows, cols = np.triu_indices(self.k)
        own = self.arms[:, None] == rows[None, :]
        mirror = (self.arms[:, None] == cols[None, :]) & (rows != cols)[None, :]
        pair_columns = own * self.features[:, cols] + mirror * self.features[:, rows]
        design = np.hstack([np.eye(self.k)[self.arms], pair_columns])
        solution, *_ = np.linalg.lstsq(design, self.targets, rcond=None)

        a = np.zeros((self.k, self.k))
        a[rows, cols] = solution[self.k:]
        a[cols, rows] = solution[self.k:]
        return solution[:self.k], a

    def warm_theta(self, hyper: FitHyperparams) -> np.ndarray:
        """Least-squares start; for B B^T negative eigenvalues are clipped and empty directions nudged"""
        l1, a = self.least_squares()
        if self.parametrization == 'indefinite':
            return np.concatenate([l1, (a / 2.0).ravel()])

        values, vectors = np.linalg.eigh(a)
        floor = EIG_RELATIVE_TOLERANCE * max(float(np.max(np.abs(values))), 1.0)
        factor = vectors * np.sqrt(np.clip(values, 0.0, None))
        empty = values <= floor
        if np.any(empty):
            rng = make_generator(derive_seed(hyper.seed, "fit-init"))
            factor[:, empty] += hyper.init_scale * rng.standard_normal((self.k, int(empty.sum())))
        return np.concatenate([l1, factor.ravel()])

    def initial_theta(self, hyper: FitHyperparams) -> np.ndarray:
        """l1 at per-arm means; B small random (zero is a stationary point of B B^T), M zero"""
        if hyper.warm_start:
            return self.warm_theta(hyper)
        counts = np.bincount(self.arms, minlength=self.k)
        sums = np.bincount(self.arms, weights=self.targets, minlength=self.k)
        l1 = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
        if self.parametrization == 'psd':
            rng = make_generator(derive_seed(hyper.seed, "fit-init"))
            factor = hyper.init_scale * rng.standard_normal((self.k, self.k))
        else:
            factor = np.zeros((self.k, self.k))
        return np.concatenate([l1, factor.ravel()])

    def unscale(self, theta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(l1, A) in loss units per pull"""
        l1, factor = self.split(theta)
        a = self.matrix(factor) * (self.target_scale / self.feature_scale)
        return l1 * self.target_scale + self.target_shift, a


def _predict(l1: np.ndarray, a: np.ndarray, arm: int, counts: np.ndarray) -> float:
    return float(l1[arm] + a[arm] @ counts)


def _momentum_descent(model: InteractionModel, theta: np.ndarray, hyper: FitHyperparams) -> Tuple[np.ndarray, int, bool]:
    """Heavy-ball descent; returns the best iterate, iterations run and convergence flag"""
    rate = hyper.learning_rate
    velocity = np.zeros_like(theta)
    best_theta = theta.copy()
    best = model.objective(theta)
    start = best
    best_history = [best]
    last_improvement = 0

    for iteration in range(1, hyper.max_iterations + 1):
        gradient = model.gradient(theta)
        if np.linalg.norm(gradient) <= hyper.gradient_tolerance * max(1.0, float(np.linalg.norm(theta))):
            return best_theta, iteration - 1, True
        velocity = hyper.momentum * velocity - rate * gradient
        theta = theta + velocity
        value = model.objective(theta)

        if not math.isfinite(value) or value > 1e6 * (start + 1.0):
            rate /= 2.0
            logger.debug(f"Objective diverged at iteration {iteration}; learning rate halved to {rate:.3g}")
            theta = best_theta.copy()
            velocity = np.zeros_like(theta)
            value = best

        if value < best:
            best = value
            best_theta = theta.copy()
            last_improvement = iteration
        best_history.append(best)

        if iteration >= hyper.window:
            previous = best_history[iteration - hyper.window]
            if previous - best <= hyper.tolerance * previous:
                return best_theta, iteration, True
        if iteration - last_improvement > hyper.patience:
            logger.warning(f"No improvement for {hyper.patience} iterations; returning best iterate")
            return best_theta, iteration, False

    logger.warning(f"Fit stopped at max_iterations={hyper.max_iterations} before converging")
    return best_theta, hyper.max_iterations, False


def fit_interaction_model(log: RatingLog, k: int, parametrization: Parametrization = 'psd',
                          hyperparams: Optional[FitHyperparams] = None,
                          norm: NormKind = 'max_abs') -> FitResult:
    """Fit (l1, A) on all but the last event and predict the last one"""
    hyper = hyperparams or FitHyperparams()
    if len(log) < 2:
        raise DataError(f"user {log.user_id}: need at least 2 events to hold one out, got {len(log)}")

    train_arms, train_losses = log.arms[:-1], log.losses[:-1]
    model = InteractionModel(train_arms, train_losses, k, parametrization)
    theta0 = model.initial_theta(hyper)
    theta, iterations, converged = _momentum_descent(model, theta0, hyper)

    l1_hat, a_entries = model.unscale(theta)
    a_hat = InteractionMatrix.certify(a_entries)
    counts_all = prior_counts(log.arms, k)

    train_counts = counts_all[:-1]
    predictions = l1_hat[train_arms] + np.sum(a_entries[train_arms] * train_counts, axis=1)
    train_mse = float(np.mean((predictions - train_losses) ** 2))
    init_l1, init_a = model.unscale(theta0)
    initial_predictions = init_l1[train_arms] + np.sum(init_a[train_arms] * train_counts, axis=1)
    initial_mse = float(np.mean((initial_predictions - train_losses) ** 2))

    held_arm = int(log.arms[-1])
    prediction = _predict(l1_hat, a_entries, held_arm, counts_all[-1])
    target = float(log.losses[-1])

    logger.debug(f"user {log.user_id} ({parametrization}): train MSE {initial_mse:.6g} -> {train_mse:.6g} "
                 f"in {iterations} iterations")
    return FitResult(
        user_id=log.user_id,
        l1_hat=l1_hat,
        a_hat=a_hat,
        parametrization=parametrization,
        initial_train_mse=initial_mse,
        train_mse=train_mse,
        loo_prediction=prediction,
        loo_target=target,
        loo_squared_error=(prediction - target) ** 2,
        norm_a=matrix_norm(a_hat, norm),
        eigenvalues=symmetric_eigenvalues(a_hat),
        iterations=iterations,
        converged=converged,
    )


def stationary_baseline(log: RatingLog, k: Optional[int] = None) -> StationaryBaseline:
    """Per-arm training means; the held-out prediction is its arm's mean"""
    if len(log) < 2:
        raise DataError(f"user {log.user_id}: need at least 2 events to hold one out")
    k = k or int(log.arms.max()) + 1
    train_arms, train_losses = log.arms[:-1], log.losses[:-1]
    counts = np.bincount(train_arms, minlength=k)
    sums = np.bincount(train_arms, weights=train_losses, minlength=k)
    global_mean = float(np.mean(train_losses))
    means = np.where(counts > 0, sums / np.maximum(counts, 1), global_mean)

    held_arm = int(log.arms[-1])
    if counts[held_arm] == 0:
        logger.warning(f"user {log.user_id}: held-out arm {held_arm + 1} unseen in training; using the global mean")
    prediction = float(means[held_arm])
    return StationaryBaseline(
        user_id=log.user_id,
        means=means,
        loo_prediction=prediction,
        loo_squared_error=(prediction - float(log.losses[-1])) ** 2,
    )


# Probing

def probe_schedule(k: int, both_orders: bool = False) -> List[int]:
    """(j, j) for every arm, then (j, k, j) for every pair j < k (and (k, j, k) if both_orders)"""
    schedule: List[int] = []
    for j in range(k):
        schedule += [j, j]
    for j in range(k):
        for other in range(j + 1, k):
            schedule += [j, other, j]
            if both_orders:
                schedule += [other, j, other]
    return schedule


def estimate_from_probe(observations: Sequence[Tuple[int, float]], k: int,
                        both_orders: bool = False) -> InteractionMatrix:
    """Differences of consecutive observations along `probe_schedule(k)`"""
    expected = probe_schedule(k, both_orders)
    if len(observations) < len(expected):
        raise BudgetError(f"probe needs {len(expected)} observations, got {len(observations)}")
    if [arm for arm, _ in observations[:len(expected)]] != expected:
        raise DataError("observations do not follow the probe schedule")

    losses = [loss for _, loss in observations]
    estimate = np.zeros((k, k))
    pos = 0
    for j in range(k):
        estimate[j, j] = losses[pos + 1] - losses[pos]
        pos += 2
    for j in range(k):
        for other in range(j + 1, k):
            value = losses[pos + 2] - losses[pos] - estimate[j, j]
            pos += 3
            if both_orders:
                mirrored = losses[pos + 2] - losses[pos] - estimate[other, other]
                pos += 3
                value = (value + mirrored) / 2.0
            estimate[j, other] = value
            estimate[other, j] = value
    return InteractionMatrix.certify(estimate)


class ProbeResult(BaseModel):
    a_hat: InteractionMatrix
    pulls: int
    pulls_per_k2: float


def probing_estimator(env, k: int, budget: Optional[int] = None, both_orders: bool = False) -> ProbeResult:
    """Estimate A by pulling the probe schedule in a live environment"""
    if env.k != k:
        raise DimensionError(f"environment has K={env.k}, probe asked for K={k}")
    schedule = probe_schedule(k, both_orders)
    if budget is not None and budget < len(schedule):
        raise BudgetError(f"probe needs {len(schedule)} pulls, budget is {budget}")
    observations = [(arm, env.step(arm)) for arm in schedule]
    estimate = estimate_from_probe(observations, k, both_orders)
    return ProbeResult(a_hat=estimate, pulls=len(schedule), pulls_per_k2=len(schedule) / (k * k))


# Analysis

def matrix_norm(a: InteractionMatrix, kind: NormKind = 'max_abs') -> float:
    if kind == 'max_abs':
        return max_abs_norm(a)
    if kind == 'frobenius':
        return float(np.linalg.norm(a.entries))
    return float(np.max(np.abs(symmetric_eigenvalues(a))))


class FitAnalysis(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    users: List[str]
    norms: List[float]
    eigenvalues: List[Tuple[str, int, float]]
    a_mean: np.ndarray


def analyze_fits(results: Sequence[FitResult]) -> FitAnalysis:
    """Per-user norms, pooled eigenvalues (users x K) and the entrywise mean matrix"""
    if not results:
        raise DataError("no fits to analyze")
    k = results[0].a_hat.k
    if any(r.a_hat.k != k for r in results):
        raise DimensionError("fits have different numbers of arms")
    pool = [(r.user_id, i, float(v)) for r in results for i, v in enumerate(r.eigenvalues)]
    return FitAnalysis(
        users=[r.user_id for r in results],
        norms=[r.norm_a for r in results],
        eigenvalues=pool,
        a_mean=np.mean([r.a_hat.entries for r in results], axis=0),
    )


class ErrorSummary(BaseModel):
    n_users: int
    stationary_mean: float
    stationary_std: float
    influential_mean: float
    influential_std: float
    influential_wins: float


def summarize_errors(fits: Sequence[FitResult], baselines: Sequence[StationaryBaseline]) -> ErrorSummary:
    """Mean and std of held-out squared errors, and the share of users where the fit is no worse"""
    fitted = np.array([f.loo_squared_error for f in fits])
    stationary = np.array([b.loo_squared_error for b in baselines])
    if fitted.shape != stationary.shape or fitted.size == 0:
        raise DataError("need one baseline per fit")
    return ErrorSummary(
        n_users=int(fitted.size),
        stationary_mean=float(stationary.mean()),
        stationary_std=float(stationary.std()),
        influential_mean=float(fitted.mean()),
        influential_std=float(fitted.std()),
        influential_wins=float(np.mean(fitted <= stationary)),
    )


def write_fit_row(writer, fit: FitResult):
    writer.writerow([fit.user_id, fit.parametrization, repr(fit.train_mse),
                     repr(fit.loo_squared_error), repr(fit.norm_a)])


def write_eigenvalue_rows(writer, fit: FitResult):
    for i, value in enumerate(fit.eigenvalues):
        writer.writerow([fit.user_id, i + 1, repr(float(value))])


def write_matrix_csv(matrix: np.ndarray, path: Union[str, Path], arm_names: Optional[Sequence[str]] = None):
    k = matrix.shape[0]
    names = list(arm_names) if arm_names else [f"arm{i + 1}" for i in range(k)]
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(names)
        for row in matrix:
            writer.writerow([repr(float(v)) for v in row])
