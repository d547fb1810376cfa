"""Resolved command configurations; each one is dumped to meta.json"""

from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator

from estimation import FitHyperparams

BenchmarkChoice = Literal['auto', 'relaxed', 'exact']


class RunConfig(BaseModel):
    """Parameters every command shares"""

    model_config = ConfigDict(extra='forbid', frozen=True)

    command: str
    seed: int = Field(0, ge=0)
    jobs: int = Field(1, ge=1)
    out: str = "results"


class RunCommandConfig(RunConfig):
    command: Literal['run'] = 'run'
    instance: str
    policy: str
    horizon: int = Field(..., ge=1)
    benchmark: BenchmarkChoice = 'auto'


def _check_horizons(v: List[int]) -> List[int]:
    if not v:
        raise ValueError("horizon list is empty")
    if v[0] < 1 or any(b <= a for a, b in zip(v, v[1:])):
        raise ValueError("horizons must be positive and strictly increasing")
    return v


class ScanConfig(RunConfig):
    command: Literal['scan'] = 'scan'
    instance: str
    policies: List[str] = Field(..., min_length=1)
    horizons: List[int]
    n_seeds: int = Field(100, ge=1)
    n_instances: int = Field(1, ge=1)
    benchmark: BenchmarkChoice = 'auto'

    check_horizons = field_validator('horizons')(_check_horizons)


class HistogramConfig(RunConfig):
    command: Literal['histogram'] = 'histogram'
    k: int = Field(3, ge=2)
    n_instances: int = Field(100, ge=1)
    horizons: List[int]
    policy: str = 'ilcb'
    bins: int = Field(20, ge=1)

    check_horizons = field_validator('horizons')(_check_horizons)


class FitConfig(RunConfig):
    command: Literal['fit'] = 'fit'
    ratings: str
    k: int = Field(..., ge=1)
    parametrization: Literal['psd', 'indefinite'] = 'psd'
    rating_max: float = 5.0
    min_events: int = Field(4096, ge=2)
    arm_map: Optional[str] = None
    norm: Literal['max_abs', 'frobenius', 'spectral'] = 'max_abs'
    hyperparams: FitHyperparams = FitHyperparams()


class ProbeConfig(RunConfig):
    command: Literal['probe'] = 'probe'
    instance: str
    both_orders: bool = False
    budget: Optional[int] = Field(None, ge=1)


class QpConfig(RunConfig):
    command: Literal['qp'] = 'qp'
    instance: str
    horizon: int = Field(..., ge=1)


class SynthConfig(RunConfig):
    command: Literal['synth'] = 'synth'
    instance: str
    n_users: int = Field(1, ge=1)
    n_events: int = Field(4096, ge=2)
    rating_max: float = 5.0


CONFIG_TYPES = {
    'run': RunCommandConfig,
    'scan': ScanConfig,
    'histogram': HistogramConfig,
    'fit': FitConfig,
    'probe': ProbeConfig,
    'qp': QpConfig,
    'synth': SynthConfig,
}
