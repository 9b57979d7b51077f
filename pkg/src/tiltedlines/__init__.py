"""Simulation and verification toolkit for ordered, non-intersecting
Brownian bridge ensembles above a hard wall with per-line area tilts."""

from .core import (
    BoundaryCondition,
    Ensemble,
    TimeGrid,
    TiltSchedule,
    area,
    check_admissible,
    curved_max,
    event_threshold,
    harmonic_u,
    kernel_q,
    min_gap,
    modulus,
    sample_bridge,
    sample_bridges,
    tilt_shift,
)
from .sampler import (
    ChainState,
    Observable,
    RunResult,
    SamplerConfig,
    checkpoint,
    coupled_sweep,
    init_state,
    make_observable,
    resample_block,
    restore,
    run_chain,
    sweep,
    update_endpoints,
)

__version__ = "0.1.0"
