"""
Continuous-relaxation benchmark and regret.

L*(t) = min over x in t*simplex of b.x + 1/2 x.A.x is a lower bound on the
expected total loss of any pull sequence of length t. It is computed with
away-step Frank-Wolfe and exact line search; for a convex quadratic the line
search has a closed form and no projection is ever needed.
"""

import math
from typing import List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from core import (
    EpisodeTrace,
    Instance,
    InteractionMatrix,
    effective_linear_term,
    eig_tolerance,
    symmetric_eigenvalues,
)
from errors import ConfigError, ConvergenceError, DimensionError, NotPsdError
from logger import logger

QP_TOLERANCE = 1e-9
QP_MAX_ITERATIONS = 1_000_000

# Arm 1 is optimal and costs T(T+1)/2, yet standard LCB keeps returning to arm 2
COUNTEREXAMPLE_A = ((1.0, 1.0), (1.0, 2.0))
COUNTEREXAMPLE_L1 = (1.0, 1.0)
# b = 0; always pulling arm 2 costs T^2/8, one early pull of arm 1 costs T/4 + 1/8 more
LINEAR_REGRET_A = ((1.0, 0.5), (0.5, 0.25))
LINEAR_REGRET_L1 = (0.5, 0.125)

Benchmark = Literal['relaxed', 'exact']


class SimplexQpSolution(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    p_star: np.ndarray
    value: float
    iterations: int
    duality_gap: float
    objective_history: List[float] = Field(default_factory=list)


def _away_step_frank_wolfe(lin: np.ndarray, quad: np.ndarray, scale: float,
                           tol: float, max_iter: int) -> SimplexQpSolution:
    """Minimize lin.x + 1/2 x.quad.x over {x >= 0, sum x = scale}"""
    k = lin.shape[0]

    def objective(x):
        return float(lin @ x + 0.5 * x @ quad @ x)

    # Start at the best vertex
    start = int(np.argmin(scale * lin + 0.5 * scale * scale * np.diag(quad)))
    x = np.zeros(k)
    x[start] = scale
    value = objective(x)
    history = [value]

    for iteration in range(max_iter + 1):
        grad = lin + quad @ x
        toward = int(np.argmin(grad))
        gap = float(grad @ x - scale * grad[toward])
        if gap <= tol * (1.0 + abs(value)):
            return SimplexQpSolution(
                p_star=x / scale, value=value, iterations=iteration,
                duality_gap=max(gap, 0.0), objective_history=history,
            )
        if iteration == max_iter:
            break

        support = np.flatnonzero(x > 0)
        away = int(support[np.argmax(grad[support])])
        away_gap = float(scale * grad[away] - grad @ x)

        if gap >= away_gap:
            direction = -x.copy()
            direction[toward] += scale
            gamma_max = 1.0
        else:
            direction = x.copy()
            direction[away] -= scale
            weight = x[away] / scale
            gamma_max = weight / (1.0 - weight)

        slope = float(grad @ direction)
        curvature = float(direction @ quad @ direction)
        gamma = gamma_max if curvature <= 0 else min(gamma_max, -slope / curvature)

        x = x + gamma * direction
        if gap < away_gap and gamma == gamma_max:
            x[away] = 0.0
        x = np.maximum(x, 0.0)
        x *= scale / x.sum()

        value = objective(x)
        history.append(value)

    raise ConvergenceError(f"Frank-Wolfe did not reach gap {tol} within {max_iter} iterations (gap={gap:.3e})")


def _check_convex(a: InteractionMatrix):
    if a.psd_certified:
        return
    smallest = float(symmetric_eigenvalues(a)[0])
    if smallest < -eig_tolerance(a):
        raise NotPsdError(
            f"relaxed benchmark needs a PSD interaction matrix (smallest eigenvalue {smallest:.6g})"
        )


def solve_simplex_qp(b, a: InteractionMatrix, t: float, tol: float = QP_TOLERANCE,
                     max_iter: int = QP_MAX_ITERATIONS,
                     parametrization: Literal['probability', 'counts'] = 'probability') -> SimplexQpSolution:
    """
    Minimum of b.x + 1/2 x.A.x over the simplex scaled by t.

    The default solves in probabilities p = x/t (objective t b.p + t^2/2 p.A.p);
    ``parametrization='counts'`` runs the same solver on x directly.
    """
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (a.k,):
        raise DimensionError(f"linear term has shape {b.shape}, matrix has K={a.k}")
    if t < 1:
        raise ConfigError(f"horizon must be at least 1, got {t}")
    _check_convex(a)

    if parametrization == 'probability':
        solution = _away_step_frank_wolfe(t * b, t * t * a.entries, 1.0, tol, max_iter)
    else:
        solution = _away_step_frank_wolfe(b, a.entries, float(t), tol, max_iter)
    logger.debug(f"Simplex QP t={t}: value={solution.value:.12g} in {solution.iterations} iterations")
    return solution


def solve_segment_qp(b, a: InteractionMatrix, t: float) -> SimplexQpSolution:
    """Closed-form minimizer for K=2 over the segment between the two vertices"""
    if a.k != 2:
        raise DimensionError(f"segment solver needs K=2, got K={a.k}")
    lin = t * np.asarray(b, dtype=np.float64)
    quad = t * t * a.entries
    e1 = np.array([1.0, 0.0])
    direction = np.array([-1.0, 1.0])
    slope = float((lin + quad @ e1) @ direction)
    curvature = float(direction @ quad @ direction)

    candidates = [0.0, 1.0]
    if curvature > 0:
        candidates.append(min(1.0, max(0.0, -slope / curvature)))
    best = min(candidates, key=lambda s: float(lin @ (e1 + s * direction)
                                               + 0.5 * (e1 + s * direction) @ quad @ (e1 + s * direction)))
    p = e1 + best * direction
    value = float(lin @ p + 0.5 * p @ quad @ p)
    return SimplexQpSolution(p_star=p, value=value, iterations=0, duality_gap=0.0)


def _matches(inst: Instance, a_rows, l1) -> bool:
    return (inst.k == len(l1)
            and np.array_equal(inst.a.entries, np.array(a_rows))
            and np.array_equal(inst.initial_losses, np.array(l1)))


def exact_optimum(inst: Instance, t: int) -> Optional[float]:
    """Integer optimum where it is known analytically, else None"""
    if _matches(inst, COUNTEREXAMPLE_A, COUNTEREXAMPLE_L1):
        return t * (t + 1) / 2.0
    if _matches(inst, LINEAR_REGRET_A, LINEAR_REGRET_L1):
        return t * t / 8.0
    return None


def benchmark_value(inst: Instance, t: int, benchmark: Benchmark = 'relaxed') -> float:
    if benchmark == 'exact':
        value = exact_optimum(inst, t)
        if value is None:
            raise ConfigError("no analytic optimum is known for this instance; use the relaxed benchmark")
        return value
    return solve_simplex_qp(effective_linear_term(inst), inst.a, t).value


def regret(inst: Instance, trace: EpisodeTrace, benchmark: Benchmark = 'relaxed') -> float:
    """Total expected loss of the trace minus the benchmark at its horizon"""
    return float(np.sum(trace.expected_losses)) - benchmark_value(inst, trace.horizon, benchmark)


def regret_exact_counterexample(trace: EpisodeTrace) -> float:
    """Regret against T(T+1)/2, the optimum of the standard-LCB counterexample"""
    if trace.horizon and int(trace.arms.max()) >= 2:
        raise DimensionError("trace pulls an arm beyond the two arms of the counterexample")
    t = trace.horizon
    return float(np.sum(trace.expected_losses)) - t * (t + 1) / 2.0


def theorem_bound(k: int, l1_inf: float, t: int) -> float:
    """Worst-case regret guarantee of Influential LCB with B=1 and noise bounded by 1"""
    return ((5 * k + 3) / 2.0 + 2.0 * l1_inf) * t + (2 * k + 2.0 * l1_inf + 4) * t * math.log(t)
