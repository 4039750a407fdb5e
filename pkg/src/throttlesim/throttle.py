"""Minimum-frequency selection under the TBT/E2E targets, plus switch actuation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from .perfmodel import FrequencyDomain, ModelContractError, PerfModel
from .projection import ProjectionSet, Scoreboard
from .scheduler import SloConfig, SwitchState, check_e2e, check_tbt, compute_plan, mixed_plan


class FrequencyContractError(ModelContractError):
    """Even the maximum frequency misses the targets for an admitted state."""


@dataclass(frozen=True)
class FrequencyDecision:
    target_mhz: float
    bypassed: bool = False
    evaluations: int = 0


FREQUENCY_COLUMNS = ("time", "target_mhz", "effective_mhz", "bypassed")


def slo_met_at(freq: float, proj: ProjectionSet, sb: Scoreboard, model: PerfModel, tp: int,
               slo: SloConfig, now: float, stall: Optional[Callable[[float], float]] = None,
               switch: Optional[SwitchState] = None) -> bool:
    """Both targets hold if the engine is set to ``freq`` now.

    ``stall(freq)`` is the pending prefill time charged to the next iteration.
    With ``switch`` given, a change of frequency only applies after the
    switch latency.
    """
    if proj.n == 0:
        return True

    def plan_at(f):
        return compute_plan(proj, tp, f, model, stall(f) if stall else 0.0)

    plan = plan_at(freq)
    if switch is not None and switch.delay(freq) > 0:
        plan = mixed_plan(plan_at(switch.current_mhz), plan, switch.delay(freq))
    return check_tbt(plan, slo) and check_e2e(plan, sb, now)


def min_slo_frequency(proj: ProjectionSet, sb: Scoreboard, model: PerfModel, tp: int,
                      domain: FrequencyDomain, slo: SloConfig, now: float,
                      stall: Optional[Callable[[float], float]] = None,
                      switch: Optional[SwitchState] = None) -> FrequencyDecision:
    levels = domain.levels()
    _, _, _, _, lost, _ = sb.arrays()
    if lost.any():
        return FrequencyDecision(float(levels[-1]), bypassed=True)
    if proj.n == 0:
        return FrequencyDecision(float(levels[0]))

    evals = 0

    def ok(i: int) -> bool:
        nonlocal evals
        evals += 1
        return slo_met_at(float(levels[i]), proj, sb, model, tp, slo, now, stall, switch)

    if not getattr(model, "monotone_in_freq", False):
        for i in range(levels.size):
            if ok(i):
                return FrequencyDecision(float(levels[i]), evaluations=evals)
        raise FrequencyContractError(f"t={now:.6f}: no frequency meets the targets")

    hi = levels.size - 1
    if not ok(hi):
        # an in-flight switch lands sooner than a fresh request to the maximum
        if switch is not None and switch.pending_mhz is not None:
            i = int(np.searchsorted(levels, switch.pending_mhz))
            if i < levels.size and levels[i] == switch.pending_mhz and ok(i):
                return FrequencyDecision(float(levels[i]), evaluations=evals)
        raise FrequencyContractError(f"t={now:.6f}: maximum frequency misses the targets")
    lo = 0
    while lo < hi:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid + 1
    return FrequencyDecision(float(levels[lo]), evaluations=evals)


class FrequencyActuator:
    """Per-engine frequency state with a fixed switch latency.

    A switch requested at ``t`` takes effect at ``t + latency``; until then the
    old frequency stays in force. A newer request replaces a pending one.
    """

    def __init__(self, initial_mhz: float, latency: float = 0.2):
        if latency < 0:
            raise ValueError("switch latency must be >= 0")
        self.effective = float(initial_mhz)
        self.latency = float(latency)
        self.pending: Optional[float] = None
        self.done_at: Optional[float] = None
        self.version = 0
        self.switches = 0

    def request(self, target: float, now: float) -> Optional[Tuple[float, int]]:
        """Returns ``(completion_time, version)`` when a switch was started."""
        target = float(target)
        if target == self.effective:
            if self.pending is not None:
                self.pending = self.done_at = None
                self.version += 1
            return None
        if target == self.pending:
            return None
        self.version += 1
        if self.latency == 0:
            self.effective = target
            self.pending = self.done_at = None
            self.switches += 1
            return None
        self.pending, self.done_at = target, now + self.latency
        return self.done_at, self.version

    def complete(self, version: int) -> bool:
        if version != self.version or self.pending is None:
            return False
        self.effective = self.pending
        self.pending = self.done_at = None
        self.switches += 1
        return True
