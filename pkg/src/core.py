"""
Domain types and closed-form loss algebra.

Pulling arm i adds row A[i] to every arm's expected loss, so after a
sequence of pulls with counts x the loss vector is l1 + A x, and the total
expected loss depends on x only:

    L(x) = b.x + 1/2 x.A.x,   b = l1 - 1/2 diag(A)

Arms are 0-based everywhere in code; 1-based only in user-facing output.
"""

import json
import math
from pathlib import Path
from typing import Literal, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from errors import ArmIndexError, DimensionError
from logger import logger

EIG_RELATIVE_TOLERANCE = 1e-9
JACOBI_MAX_SWEEPS = 100
JACOBI_LARGE_THETA = 1e150
SYMMETRY_TOLERANCE = 1e-12


def _frozen_array(values, dtype) -> np.ndarray:
    array = np.array(values, dtype=dtype, copy=True)
    array.setflags(write=False)
    return array


class InteractionMatrix(BaseModel):
    """Symmetric K x K matrix; pulling arm i adds row i to the loss vector"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    entries: np.ndarray
    psd_certified: bool = False

    @field_validator('entries', mode='before')
    @classmethod
    def as_symmetric_array(cls, v):
        array = np.array(v, dtype=np.float64)
        if array.ndim != 2 or array.shape[0] != array.shape[1] or array.shape[0] < 1:
            raise ValueError(f"interaction matrix must be square and non-empty, got shape {array.shape}")
        if not np.all(np.isfinite(array)):
            raise ValueError("interaction matrix entries must be finite")
        if not np.array_equal(array, array.T):
            raise ValueError("interaction matrix must be exactly symmetric")
        return _frozen_array(array, np.float64)

    @model_validator(mode='after')
    def check_certificate(self):
        if self.psd_certified and not is_psd(self):
            raise ValueError("psd_certified set on a matrix with a negative eigenvalue")
        return self

    @property
    def k(self) -> int:
        return self.entries.shape[0]

    @classmethod
    def certify(cls, entries) -> "InteractionMatrix":
        """Build the matrix and set psd_certified from its eigenvalues"""
        matrix = cls(entries=entries)
        return matrix.model_copy(update={'psd_certified': is_psd(matrix)})

    @classmethod
    def symmetrized(cls, entries) -> "InteractionMatrix":
        """Build from a nearly symmetric array by averaging it with its transpose"""
        array = np.asarray(entries, dtype=np.float64)
        return cls.certify((array + array.T) / 2.0)


class NoiseModel(BaseModel):
    """Distribution of the per-round observation noise"""

    model_config = ConfigDict(frozen=True)

    kind: Literal['none', 'uniform_bounded', 'gaussian'] = 'none'
    param: float = 0.0

    @model_validator(mode='after')
    def check_param(self):
        if self.kind != 'none' and not (self.param > 0 and math.isfinite(self.param)):
            raise ValueError(f"{self.kind} noise needs a positive finite parameter, got {self.param}")
        return self

    @property
    def bound(self) -> float:
        """Largest possible |noise|"""
        if self.kind == 'none':
            return 0.0
        if self.kind == 'uniform_bounded':
            return self.param
        return math.inf

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.kind == 'none':
            return np.zeros(size)
        if self.kind == 'uniform_bounded':
            return rng.uniform(-self.param, self.param, size)
        return rng.normal(0.0, self.param, size)


class Instance(BaseModel):
    """One complete influential bandit environment"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    a: InteractionMatrix
    initial_losses: np.ndarray
    noise: NoiseModel = NoiseModel()

    @field_validator('initial_losses', mode='before')
    @classmethod
    def as_vector(cls, v):
        array = np.array(v, dtype=np.float64)
        if array.ndim != 1 or not np.all(np.isfinite(array)):
            raise ValueError("initial losses must be a finite vector")
        return _frozen_array(array, np.float64)

    @model_validator(mode='after')
    def check_length(self):
        if self.initial_losses.shape[0] != self.a.k:
            raise ValueError(
                f"initial losses have length {self.initial_losses.shape[0]}, matrix has K={self.a.k}"
            )
        return self

    @property
    def k(self) -> int:
        return self.a.k


class PullCounts(BaseModel):
    """How many times each arm was pulled"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    counts: np.ndarray

    @field_validator('counts', mode='before')
    @classmethod
    def as_counts(cls, v):
        array = np.array(v)
        if array.ndim != 1:
            raise ValueError("counts must be a vector")
        if not np.array_equal(array, np.round(array)) or np.any(array < 0):
            raise ValueError("counts must be non-negative integers")
        return _frozen_array(array, np.int64)

    @property
    def horizon(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def from_arms(cls, arms: Sequence[int], k: int) -> "PullCounts":
        return cls(counts=np.bincount(np.asarray(arms, dtype=np.int64), minlength=k))


class EpisodeTrace(BaseModel):
    """Time-ordered record of one run"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    arms: np.ndarray
    observed_losses: np.ndarray
    expected_losses: np.ndarray
    seed: int = 0

    @field_validator('arms', mode='before')
    @classmethod
    def as_arm_vector(cls, v):
        return _frozen_array(v, np.int64)

    @field_validator('observed_losses', 'expected_losses', mode='before')
    @classmethod
    def as_loss_vector(cls, v):
        return _frozen_array(v, np.float64)

    @model_validator(mode='after')
    def check_lengths(self):
        n = self.arms.shape[0]
        if self.observed_losses.shape[0] != n or self.expected_losses.shape[0] != n:
            raise ValueError("arms, observed and expected losses must share one length")
        return self

    @property
    def horizon(self) -> int:
        return int(self.arms.shape[0])

    def counts(self, k: int) -> PullCounts:
        return PullCounts.from_arms(self.arms, k)


def _check_arms(arms: np.ndarray, k: int):
    if arms.size and (arms.min() < 0 or arms.max() >= k):
        bad = int(arms[(arms < 0) | (arms >= k)][0])
        raise ArmIndexError(f"arm index {bad} out of range [0, {k})")


def effective_linear_term(inst: Instance) -> np.ndarray:
    """b = l1 - diag(A)/2"""
    return inst.initial_losses - 0.5 * np.diag(inst.a.entries)


def quadratic_loss(b: np.ndarray, a: np.ndarray, x: np.ndarray) -> float:
    """L(x) = b.x + 1/2 x.A.x for a real vector x"""
    x = np.asarray(x, dtype=np.float64)
    return float(b @ x + 0.5 * x @ a @ x)


def total_loss_closed_form(inst: Instance, x: PullCounts) -> float:
    """Expected cumulative loss of any pull order with counts x"""
    if x.counts.shape[0] != inst.k:
        raise DimensionError(f"counts have length {x.counts.shape[0]}, instance has K={inst.k}")
    return quadratic_loss(effective_linear_term(inst), inst.a.entries, x.counts)


def replay_expected(inst: Instance, arms: Sequence[int]) -> Tuple[np.ndarray, PullCounts]:
    """Noiseless per-step losses of the chosen arms, and the final counts"""
    arm_array = np.asarray(arms, dtype=np.int64)
    _check_arms(arm_array, inst.k)
    losses = np.array(inst.initial_losses, dtype=np.float64)
    rows = inst.a.entries
    expected = np.empty(arm_array.shape[0])
    for t, arm in enumerate(arm_array):
        expected[t] = losses[arm]
        losses += rows[arm]
    return expected, PullCounts.from_arms(arm_array, inst.k)


def max_abs_norm(a: Union[InteractionMatrix, np.ndarray]) -> float:
    entries = a.entries if isinstance(a, InteractionMatrix) else np.asarray(a)
    return float(np.max(np.abs(entries))) if entries.size else 0.0


def eig_tolerance(a: Union[InteractionMatrix, np.ndarray]) -> float:
    return EIG_RELATIVE_TOLERANCE * max_abs_norm(a)


def symmetric_eigenvalues(a: Union[InteractionMatrix, np.ndarray]) -> np.ndarray:
    """All eigenvalues in ascending order, by cyclic Jacobi rotations"""
    m = np.array(a.entries if isinstance(a, InteractionMatrix) else a, dtype=np.float64)
    n = m.shape[0]
    scale = np.linalg.norm(m)
    if scale == 0.0:
        return np.zeros(n)

    for _ in range(JACOBI_MAX_SWEEPS):
        off = np.sqrt(np.sum(m * m) - np.sum(np.diag(m) ** 2))
        if off <= 1e-15 * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = m[p, q]
                if apq == 0.0:
                    continue
                diff = m[q, q] - m[p, p]
                if abs(diff) > JACOBI_LARGE_THETA * abs(apq):
                    # theta squared would overflow; t = 1/(2 theta) to working precision
                    t = apq / diff
                else:
                    theta = diff / (2.0 * apq)
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(1.0 + theta * theta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c

                col_p = m[:, p].copy()
                col_q = m[:, q].copy()
                m[:, p] = c * col_p - s * col_q
                m[:, q] = s * col_p + c * col_q
                row_p = m[p, :].copy()
                row_q = m[q, :].copy()
                m[p, :] = c * row_p - s * row_q
                m[q, :] = s * row_p + c * row_q
                m[p, q] = 0.0
                m[q, p] = 0.0

    return np.sort(np.diag(m))


def is_psd(a: Union[InteractionMatrix, np.ndarray]) -> bool:
    return bool(symmetric_eigenvalues(a)[0] >= -eig_tolerance(a))


# Serialization

def instance_to_dict(inst: Instance) -> dict:
    return {
        "k": inst.k,
        "a": [[float(v) for v in row] for row in inst.a.entries],
        "l1": [float(v) for v in inst.initial_losses],
        "noise": {"kind": inst.noise.kind, "param": float(inst.noise.param)},
    }


def _matrix_from_rows(rows) -> InteractionMatrix:
    """Exact symmetry is required, except that rounding-level asymmetry from text files is averaged away"""
    try:
        array = np.array(rows, dtype=np.float64)
    except (TypeError, ValueError):
        return InteractionMatrix.certify(rows)
    if (array.ndim == 2 and array.shape[0] == array.shape[1] and np.all(np.isfinite(array))
            and not np.array_equal(array, array.T)
            and np.max(np.abs(array - array.T)) <= SYMMETRY_TOLERANCE * max(1.0, max_abs_norm(array))):
        logger.warning("interaction matrix is symmetric only to rounding; using (A + A^T) / 2")
        return InteractionMatrix.symmetrized(array)
    return InteractionMatrix.certify(array)


def instance_from_dict(data: dict) -> Instance:
    a = _matrix_from_rows(data["a"])
    if "k" in data and int(data["k"]) != a.k:
        raise DimensionError(f"declared k={data['k']} but matrix is {a.k}x{a.k}")
    noise = data.get("noise") or {"kind": "none"}
    return Instance(
        a=a,
        initial_losses=data["l1"],
        noise=NoiseModel(kind=noise.get("kind", "none"), param=noise.get("param", 0.0)),
    )


def save_instance(inst: Instance, path: Union[str, Path]):
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(instance_to_dict(inst), f, indent=2)
        f.write("\n")


def load_instance(path: Union[str, Path]) -> Instance:
    with open(path, 'r', encoding='utf-8') as f:
        return instance_from_dict(json.load(f))
