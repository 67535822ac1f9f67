"""Packet schedulers and the name registry used by scenarios."""
from __future__ import annotations

from typing import Mapping, Optional

from ..engine import ConfigurationError
from .base import DrrRing, PacketFifo, Scheduler
from .baselines import (
    BaselineConfig,
    CbqScheduler,
    CodelScheduler,
    CodelState,
    FifoScheduler,
    FqCodelScheduler,
    FqScheduler,
    RedScheduler,
    SjfScheduler,
    StrictPriorityScheduler,
    codel_dequeue_gate,
    red_drop_probability,
)
from .confucius import ConfuciusConfig, ConfuciusScheduler

SCHEDULERS = ("fifo", "fq", "fq_codel", "codel", "red", "sjf", "cbq_1_1", "cbq_1_5", "strict", "confucius")


def make_scheduler(kind: str, buffer_limit: Optional[int] = None,
                   config: Optional[Mapping] = None, seed: int = 0) -> Scheduler:
    """Build a scheduler by its scenario key.

    ``config`` holds Confucius keys for ``confucius`` and baseline keys for
    everything else.
    """
    config = dict(config or {})
    if kind == "confucius":
        return ConfuciusScheduler(buffer_limit, ConfuciusConfig.from_dict(config))
    if kind not in SCHEDULERS:
        raise ConfigurationError(f"unknown scheduler {kind!r}; expected one of {', '.join(SCHEDULERS)}")
    b = BaselineConfig.from_dict(config)
    if kind == "fifo":
        return FifoScheduler(buffer_limit)
    if kind == "fq":
        return FqScheduler(buffer_limit, b.quantum)
    if kind == "fq_codel":
        return FqCodelScheduler(buffer_limit, b.codel_target_ms, b.codel_interval_ms, b.quantum)
    if kind == "codel":
        return CodelScheduler(buffer_limit, b.codel_target_ms, b.codel_interval_ms)
    if kind == "red":
        return RedScheduler(buffer_limit, b.red_min, b.red_max, b.red_p_max, b.red_weight, seed)
    if kind == "sjf":
        return SjfScheduler(buffer_limit, b.sjf_thresholds)
    if kind == "cbq_1_1":
        return CbqScheduler(buffer_limit, (1, 1), b.quantum)
    if kind == "cbq_1_5":
        return CbqScheduler(buffer_limit, (1, 5), b.quantum)
    return StrictPriorityScheduler(buffer_limit)


__all__ = [
    "SCHEDULERS", "make_scheduler", "Scheduler", "PacketFifo", "DrrRing",
    "BaselineConfig", "ConfuciusConfig", "ConfuciusScheduler", "FifoScheduler",
    "FqScheduler", "FqCodelScheduler", "CodelScheduler", "CodelState", "RedScheduler",
    "SjfScheduler", "CbqScheduler", "StrictPriorityScheduler", "codel_dequeue_gate",
    "red_drop_probability",
]
