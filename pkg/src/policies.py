"""
Arm-selection policies.

All policies share one contract (select / observe / reset) and break ties
by the lowest arm index, which makes every run deterministic given its seed.
"""

import math
from abc import ABC, abstractmethod
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from errors import ArmIndexError, ConfigError
from estimation import estimate_from_probe, probe_schedule
from core import max_abs_norm
from logger import logger
from rng import make_generator


class Policy(ABC):
    """Common contract for every arm-selection strategy"""

    name: str = "policy"

    @abstractmethod
    def select(self, t: int) -> int:
        """Arm to pull in round t (1-based round)"""

    def observe(self, t: int, arm: int, loss: float):
        """Record the loss observed after pulling `arm` in round t"""

    def reset(self):
        """Forget everything learned so far"""


# Influential LCB

class InfluentialLcbState(BaseModel):
    """Rounds since each arm was last observed, and its last observed loss"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    c: np.ndarray
    l_hat: np.ndarray
    scale_b: float = 1.0

    @classmethod
    def fresh(cls, k: int, scale_b: float = 1.0) -> "InfluentialLcbState":
        return cls(c=np.zeros(k, dtype=np.int64), l_hat=np.full(k, -np.inf), scale_b=scale_b)


def influential_lcb_select(state: InfluentialLcbState) -> int:
    """Lowest-index minimizer of l_hat - B c; unobserved arms (-inf) come first"""
    return int(np.argmin(state.l_hat - state.scale_b * state.c))


def influential_lcb_observe(state: InfluentialLcbState, arm: int, loss: float) -> InfluentialLcbState:
    state.c += 1
    state.c[arm] = 1
    state.l_hat[arm] = loss
    return state


class InfluentialLcb(Policy):
    """Pull the arm whose last observation, discounted by B per elapsed round, is lowest"""

    def __init__(self, k: int, scale_b: float = 1.0):
        if scale_b < 0:
            raise ConfigError(f"scale B must be non-negative, got {scale_b}")
        self.k = k
        self.scale_b = scale_b
        self.name = "ilcb" if scale_b == 1.0 else f"ilcb:B={scale_b!r}"
        self.state = InfluentialLcbState.fresh(k, scale_b)

    def select(self, t: int) -> int:
        return influential_lcb_select(self.state)

    def observe(self, t: int, arm: int, loss: float):
        influential_lcb_observe(self.state, arm, loss)

    def reset(self):
        self.state = InfluentialLcbState.fresh(self.k, self.scale_b)


class ProbingInfluentialLcb(InfluentialLcb):
    """
    Influential LCB with an unknown scale: the first rounds follow the probe
    schedule, B is set to the largest estimated |A_ij|, then selection proceeds
    as usual. Observations made while probing still update l_hat and c.
    """

    def __init__(self, k: int):
        super().__init__(k, scale_b=1.0)
        self.name = "ilcb:B=auto"
        self._schedule = probe_schedule(k)
        self._probe_log: List[Tuple[int, float]] = []

    def select(self, t: int) -> int:
        if t <= len(self._schedule):
            return self._schedule[t - 1]
        return influential_lcb_select(self.state)

    def observe(self, t: int, arm: int, loss: float):
        influential_lcb_observe(self.state, arm, loss)
        if t <= len(self._schedule):
            self._probe_log.append((arm, loss))
            if t == len(self._schedule):
                estimate = estimate_from_probe(self._probe_log, self.k)
                self.state.scale_b = max_abs_norm(estimate)
                logger.debug(f"Probe finished after {t} pulls, B set to {self.state.scale_b:.6g}")

    def reset(self):
        self.state = InfluentialLcbState.fresh(self.k, 1.0)
        self._probe_log = []


# Standard LCB

class StandardLcbState(BaseModel):
    """Per-arm loss sums and pull counts"""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    sums: np.ndarray
    n: np.ndarray
    t: int = 1

    @classmethod
    def fresh(cls, k: int) -> "StandardLcbState":
        return cls(sums=np.zeros(k), n=np.zeros(k, dtype=np.int64), t=1)


def standard_lcb_select(state: StandardLcbState) -> int:
    """Lowest-index minimizer of mean - sqrt(2 ln t / n); unpulled arms first, in index order"""
    unpulled = np.flatnonzero(state.n == 0)
    if unpulled.size:
        return int(unpulled[0])
    bonus = np.sqrt(2.0 * math.log(state.t) / state.n)
    return int(np.argmin(state.sums / state.n - bonus))


def standard_lcb_observe(state: StandardLcbState, arm: int, loss: float) -> StandardLcbState:
    state.sums[arm] += loss
    state.n[arm] += 1
    state.t += 1
    return state


class StandardLcb(Policy):
    name = "lcb"

    def __init__(self, k: int):
        self.k = k
        self.state = StandardLcbState.fresh(k)

    def select(self, t: int) -> int:
        self.state.t = t
        return standard_lcb_select(self.state)

    def observe(self, t: int, arm: int, loss: float):
        standard_lcb_observe(self.state, arm, loss)

    def reset(self):
        self.state = StandardLcbState.fresh(self.k)


# Baselines

class FixedArm(Policy):
    def __init__(self, arm: int, k: int):
        if not 0 <= arm < k:
            raise ArmIndexError(f"fixed arm {arm} out of range [0, {k})")
        self.arm = arm
        self.name = f"fixed:{arm + 1}"

    def select(self, t: int) -> int:
        return self.arm


class RoundRobin(Policy):
    name = "round_robin"

    def __init__(self, k: int):
        self.k = k

    def select(self, t: int) -> int:
        return (t - 1) % self.k


class UniformRandom(Policy):
    """Uniformly random arm each round, from its own seeded stream"""

    name = "uniform"

    def __init__(self, k: int, seed: int = 0):
        self.k = k
        self.seed = seed
        self.rng = make_generator(seed)

    def select(self, t: int) -> int:
        return int(self.rng.integers(self.k))

    def reset(self):
        self.rng = make_generator(self.seed)


def fixed_arm_policy(arm: int, k: int) -> Policy:
    return FixedArm(arm, k)


def round_robin_policy(k: int) -> Policy:
    return RoundRobin(k)


def parse_policy_spec(spec: str) -> Tuple[str, Optional[str]]:
    """Split `name[:arg]` and validate the name"""
    name, _, arg = spec.strip().partition(':')
    if name not in ('ilcb', 'lcb', 'fixed', 'round_robin', 'uniform'):
        raise ConfigError(f"unknown policy '{spec}' (expected ilcb, lcb, fixed:<arm>, round_robin, uniform)")
    if name == 'fixed' and not arg:
        raise ConfigError("fixed policy needs an arm: fixed:<arm>")
    if name == 'ilcb' and arg and not arg.startswith('B='):
        raise ConfigError(f"ilcb accepts only B=<float> or B=auto, got '{arg}'")
    if name in ('lcb', 'round_robin', 'uniform') and arg:
        raise ConfigError(f"policy '{name}' takes no argument")
    return name, arg or None


def make_policy(spec: str, k: int, seed: int = 0) -> Policy:
    """
    Build a policy from its command-line name.

    Grammar: ``ilcb``, ``ilcb:B=<float>``, ``ilcb:B=auto``, ``lcb``,
    ``fixed:<arm>`` (1-based arm), ``round_robin``, ``uniform``.
    """
    name, arg = parse_policy_spec(spec)
    if name == 'ilcb':
        if arg is None:
            return InfluentialLcb(k)
        value = arg[len('B='):]
        if value == 'auto':
            return ProbingInfluentialLcb(k)
        try:
            return InfluentialLcb(k, scale_b=float(value))
        except ValueError:
            raise ConfigError(f"invalid B in policy '{spec}'")
    if name == 'lcb':
        return StandardLcb(k)
    if name == 'fixed':
        try:
            arm = int(arg) - 1
        except ValueError:
            raise ConfigError(f"invalid arm in policy '{spec}'")
        if not 0 <= arm < k:
            raise ConfigError(f"policy '{spec}' names arm {arm + 1}, instance has {k} arms")
        return FixedArm(arm, k)
    if name == 'round_robin':
        return RoundRobin(k)
    return UniformRandom(k, seed)
