import numpy as np
import pytest

from core import Instance, InteractionMatrix, replay_expected
from estimation import RatingLog
from experiments import counterexample_instance, linear_regret_instance


@pytest.fixture
def counterexample():
    return counterexample_instance()


@pytest.fixture
def linear_regret():
    return linear_regret_instance()


@pytest.fixture
def zero_instance():
    return Instance(a=InteractionMatrix.certify(np.zeros((2, 2))), initial_losses=[3.0, -1.0])


def phased_arms(k: int, n: int, seed: int, favored: float = 0.8) -> np.ndarray:
    """Arms drawn in k phases, each favoring one arm, so the pull counts are far from collinear"""
    rng = np.random.default_rng(seed)
    arms = np.empty(n, dtype=np.int64)
    for t in range(n):
        phase = min(t * k // n, k - 1)
        probs = np.full(k, (1.0 - favored) / (k - 1))
        probs[phase] = favored
        arms[t] = rng.choice(k, p=probs)
    return arms


def noiseless_log(inst: Instance, arms, user_id: str = "u1") -> RatingLog:
    losses, _ = replay_expected(inst, arms)
    return RatingLog(user_id=user_id, arms=arms, losses=losses)
