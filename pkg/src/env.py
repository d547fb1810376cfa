"""
Simulation environment.

Each round the chosen arm's current loss is observed with additive noise,
then the chosen arm's row of A is added to every arm's loss.
"""

import csv
from pathlib import Path
from typing import TYPE_CHECKING, Union

import numpy as np

from core import EpisodeTrace, Instance, PullCounts
from errors import ArmIndexError, ConfigError
from logger import logger
from rng import make_generator

if TYPE_CHECKING:
    from policies import Policy

# Noise is drawn in fixed-size blocks so the draw for round t depends on (seed, t) only
NOISE_BLOCK = 1024


class Environment:
    """Mutable single-run state of an influential bandit"""

    def __init__(self, inst: Instance, seed: int = 0):
        self.inst = inst
        self.seed = int(seed)
        self.rng = make_generator(self.seed)
        self.current_losses = np.array(inst.initial_losses, dtype=np.float64)
        self._counts = np.zeros(inst.k, dtype=np.int64)
        self.t = 1
        self._rows = inst.a.entries
        self._noise_block = np.empty(0)

    @property
    def k(self) -> int:
        return self.inst.k

    @property
    def counts(self) -> PullCounts:
        return PullCounts(counts=self._counts)

    def _noise(self) -> float:
        offset = (self.t - 1) % NOISE_BLOCK
        if offset == 0:
            self._noise_block = self.inst.noise.sample(self.rng, NOISE_BLOCK)
        return float(self._noise_block[offset])

    def expected_loss(self, arm: int) -> float:
        return float(self.current_losses[arm])

    def step(self, arm: int) -> float:
        """Pull an arm; returns the observed (noisy) loss"""
        if not 0 <= arm < self.k:
            raise ArmIndexError(f"arm index {arm} out of range [0, {self.k})")
        observed = self.current_losses[arm] + self._noise()
        self.current_losses += self._rows[arm]
        self._counts[arm] += 1
        self.t += 1
        return float(observed)

    def state_error(self) -> float:
        """Max deviation of the loss vector from l1 + A x"""
        target = self.inst.initial_losses + self._rows @ self._counts
        return float(np.max(np.abs(self.current_losses - target)))


def run_policy(inst: Instance, policy: "Policy", horizon: int, seed: int = 0) -> EpisodeTrace:
    """Drive a fresh environment with a reset policy for `horizon` rounds"""
    if horizon < 1:
        raise ConfigError(f"horizon must be at least 1, got {horizon}")

    env = Environment(inst, seed)
    policy.reset()
    arms = np.empty(horizon, dtype=np.int64)
    observed = np.empty(horizon)
    expected = np.empty(horizon)

    for i in range(horizon):
        t = i + 1
        arm = policy.select(t)
        expected[i] = env.current_losses[arm] if 0 <= arm < env.k else np.nan
        observed[i] = env.step(arm)
        policy.observe(t, arm, observed[i])
        arms[i] = arm

    logger.debug(f"Ran {policy.name} for {horizon} rounds (seed={seed})")
    return EpisodeTrace(arms=arms, observed_losses=observed, expected_losses=expected, seed=seed)


def write_trace_csv(trace: EpisodeTrace, path: Union[str, Path]):
    """Export with 1-based t and arm, floats in shortest round-trip form"""
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['t', 'arm', 'observed', 'expected'])
        for i in range(trace.horizon):
            writer.writerow([
                i + 1,
                int(trace.arms[i]) + 1,
                repr(float(trace.observed_losses[i])),
                repr(float(trace.expected_losses[i])),
            ])
