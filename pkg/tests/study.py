"""Simulation-study runs shared between test modules (computed once per session)."""
from __future__ import annotations

from functools import lru_cache

from consensusjm import ChainConfig, ModelSpec
from consensusjm.consensus import METHODS
from consensusjm.report import run_scenarios

SEED = 20240
SPEC = ModelSpec(baseline="weibull")
CONFIG = ChainConfig(n_chains=3, n_iter=1500, n_warmup=500)
AGREEMENT_N = 1000
AGREEMENT_REPLICAS = 10


@lru_cache(maxsize=None)
def agreement_study():
    """n=1000, S in {1, 2, 5}, all three methods, 10 replicas."""
    return tuple(run_scenarios([AGREEMENT_N], [1, 2, 5], METHODS, AGREEMENT_REPLICAS, SPEC, CONFIG,
                               seed=SEED, core_cap=1))


@lru_cache(maxsize=None)
def extra_full_data_fits():
    """Ten more full-data fits at n=1000 (replicas 10-19) for the coverage check."""
    return tuple(run_scenarios([AGREEMENT_N], [1], ["precision"], range(10, 20), SPEC, CONFIG,
                               seed=SEED, core_cap=1))


@lru_cache(maxsize=None)
def weight_study(replicas: int = 5):
    """S=5 at n=500 and n=2500, same dataset seeds."""
    return tuple(run_scenarios([500, 2500], [5], ["precision"], replicas, SPEC, CONFIG,
                               seed=SEED, core_cap=1))
