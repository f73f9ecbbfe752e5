"""Copy / dispatch / compute staging contract, as a schedule over stage latencies.

Batch ``i`` moves through three single-lane stages:

* copy ``i`` (host -> device) starts after copy ``i-1`` and once the compute
  stage has started batch ``i - prefetch`` (bounded staging buffers);
* dispatch ``i`` (embedding lookup + exchange) starts after copy ``i``,
  dispatch ``i-1`` and compute ``i-1``: it must see the sparse rows that
  batch ``i-1``'s update wrote;
* compute ``i`` (forward, backward, update) starts after dispatch ``i`` and
  compute ``i-1``.

This module only computes the timeline; nothing runs concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence


@dataclass
class StageTimes:
    copy: tuple
    dispatch: tuple
    compute: tuple


def pipeline_schedule(copy: Sequence[float], dispatch: Sequence[float], compute: Sequence[float],
                      prefetch: int = 1) -> List[StageTimes]:
    if not len(copy) == len(dispatch) == len(compute):
        raise ValueError("one latency per batch per stage")
    if prefetch < 1:
        raise ValueError("prefetch must be >= 1")
    out: List[StageTimes] = []
    for i in range(len(copy)):
        prev = out[i - 1] if i else None
        c0 = prev.copy[1] if prev else 0.0
        if i - prefetch >= 0:
            c0 = max(c0, out[i - prefetch].compute[0])
        c1 = c0 + copy[i]
        d0 = max(c1, prev.dispatch[1] if prev else 0.0, prev.compute[1] if prev else 0.0)
        d1 = d0 + dispatch[i]
        k0 = max(d1, prev.compute[1] if prev else 0.0)
        out.append(StageTimes((c0, c1), (d0, d1), (k0, k0 + compute[i])))
    return out


def makespan(schedule: Sequence[StageTimes]) -> float:
    return schedule[-1].compute[1] if schedule else 0.0


def serial_time(copy: Sequence[float], dispatch: Sequence[float], compute: Sequence[float]) -> float:
    return float(sum(copy) + sum(dispatch) + sum(compute))
