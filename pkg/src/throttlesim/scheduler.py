"""Admission control: KV capacity, average-TBT and per-query deadline checks.

All checks run against the projected batch/KV vectors of the scoreboard with
the candidate virtually appended, using the model at maximum frequency.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Deque, List, Optional

import numpy as np

from .perfmodel import ModelContractError, PerfModel
from .projection import ProjectionSet, Scoreboard, ScoreboardEntry, virtual_project
from .trace import Query


class ScheduleConsistencyError(RuntimeError):
    pass


@dataclass(frozen=True)
class SloConfig:
    tbt_slo: float = 0.200
    e2e_slo: float = 30.2

    def __post_init__(self):
        if self.tbt_slo <= 0 or self.e2e_slo <= 0:
            raise ValueError("SLO targets must be positive")

    def deadline(self, q: Query) -> float:
        return q.arrival_time + self.e2e_slo


@dataclass(frozen=True)
class PrefillModel:
    """Stall added to the next iteration while newly admitted prompts prefill.

    Linear in prompt tokens, inversely proportional to frequency.
    """

    enabled: bool = True
    base_latency: float = 0.175
    reference_prompt: int = 4096
    f_max: float = 1410.0

    def __post_init__(self):
        if self.base_latency < 0 or self.reference_prompt <= 0 or self.f_max <= 0:
            raise ValueError("invalid prefill model")

    def stall(self, prompt_tokens: int, freq: float) -> float:
        if not self.enabled or prompt_tokens <= 0:
            return 0.0
        return self.base_latency * (prompt_tokens / self.reference_prompt) * (self.f_max / freq)


@dataclass(frozen=True)
class ThroughputPlan:
    T: np.ndarray   # IPS per offset
    Tp: np.ndarray  # TBT per offset
    TR: np.ndarray  # seconds from now until offset d completes

    @property
    def n(self) -> int:
        return int(self.T.size)


class Reason(str, Enum):
    KV_CAPACITY = "KvCapacity"
    TBT = "TbtViolation"
    E2E = "E2eViolation"


class Outcome(str, Enum):
    SCHEDULED = "Scheduled"
    SCHEDULED_LOST = "ScheduledLost"
    QUEUED = "Queued"


@dataclass(frozen=True)
class AdmissionDecision:
    outcome: Outcome
    reason: Optional[Reason] = None
    query_id: int = -1
    time: float = 0.0
    max_kv: int = 0
    mean_tbt: float = math.nan
    worst_slack: float = math.nan

    @property
    def admitted(self) -> bool:
        return self.outcome is not Outcome.QUEUED

    def row(self) -> tuple:
        return (self.time, self.query_id, self.outcome.value, self.reason.value if self.reason else "",
                self.max_kv, self.mean_tbt, self.worst_slack)


AUDIT_COLUMNS = ("time", "query_id", "decision", "reason", "max_kv", "mean_tbt", "worst_slack")


def compute_plan(proj: ProjectionSet, tp: int, freq: float, model: PerfModel,
                 lead_stall: float = 0.0) -> ThroughputPlan:
    """``lead_stall`` seconds of pending prefill are charged to the first offset."""
    if proj.n == 0:
        raise ValueError("cannot plan an empty projection")
    T = np.asarray(model.predict_ips(tp, proj.B, proj.KV, freq), dtype=float)
    if T.shape != proj.B.shape:
        T = np.broadcast_to(T, proj.B.shape).astype(float)
    if not np.all(np.isfinite(T)) or (T <= 0).any():
        raise ModelContractError(f"model returned nonpositive IPS (tp={tp}, freq={freq})")
    Tp = 1.0 / T
    if lead_stall:
        Tp[0] += lead_stall
    return ThroughputPlan(T, Tp, np.cumsum(Tp))


@dataclass(frozen=True)
class SwitchState:
    """Frequency in force now and when a requested target would apply.

    Re-requesting the target of an in-flight switch keeps its completion
    time; any other new target waits the full latency.
    """

    current_mhz: float
    latency: float
    pending_mhz: Optional[float] = None
    pending_in: float = 0.0

    def delay(self, freq: float) -> float:
        if freq == self.current_mhz:
            return 0.0
        if freq == self.pending_mhz:
            return self.pending_in
        return self.latency


def mixed_plan(old: ThroughputPlan, new: ThroughputPlan, switch_after: float) -> ThroughputPlan:
    """Plan that runs at the old rate until ``switch_after`` seconds, then at the new one.

    An offset straddling the switch finishes its remaining work fraction at
    the new rate.
    """
    TRo = old.TR
    i = int(np.searchsorted(TRo, switch_after, side="right"))
    if i >= TRo.size:
        return old
    start = TRo[i - 1] if i else 0.0
    done = (switch_after - start) / old.Tp[i]
    TR = TRo.copy()
    TR[i:] = switch_after + (1.0 - done) * new.Tp[i] + (new.TR[i:] - new.TR[i])
    Tp = np.diff(TR, prepend=0.0)
    return ThroughputPlan(1.0 / Tp, Tp, TR)


def check_kv(proj: ProjectionSet, kv_capacity: int) -> bool:
    return proj.n == 0 or int(proj.KV.max()) <= kv_capacity


def check_tbt(plan: ThroughputPlan, slo: SloConfig) -> bool:
    return float(plan.Tp.mean()) <= slo.tbt_slo


def _e2e_slack(plan: ThroughputPlan, k: int, s, r, lost, deadline, now: float):
    """Per-entry slack ``deadline - (now + TR[l])``; NaN for lost entries."""
    l = s + r - k
    live = ~lost
    if live.any():
        ll = l[live]
        if ll.min() < 1 or ll.max() > plan.n:
            raise ScheduleConsistencyError(f"completion offset outside [1, {plan.n}]: {ll.min()}..{ll.max()}")
    slack = np.full(s.shape, np.nan)
    slack[live] = deadline[live] - (plan.TR[l[live] - 1] + now)
    return slack


def check_e2e(plan: ThroughputPlan, sb: Scoreboard, now: float, candidate: Optional[ScoreboardEntry] = None) -> bool:
    """True iff every non-lost entry (plus ``candidate``) finishes strictly before its deadline."""
    _, s, q, r, lost, deadline = sb.arrays()
    if candidate is not None:
        s, r = np.append(s, candidate.s), np.append(r, candidate.pred_gen)
        lost, deadline = np.append(lost, candidate.lost), np.append(deadline, candidate.deadline)
    if s.size == 0:
        return True
    slack = _e2e_slack(plan, sb.k, s, r, lost, deadline, now)
    return bool(np.all(slack[~lost] > 0))


@dataclass
class SchedulerState:
    scoreboard: Scoreboard
    tp: int
    kv_capacity: int
    model: PerfModel
    slo: SloConfig
    f_max: float = 1410.0
    # baseline serving: physical KV check only, no SLO checks
    kv_only: bool = False
    prefill: Optional[PrefillModel] = None
    # frequency in force right now; admission then accounts for the switch delay
    switch: Optional[SwitchState] = None
    # prompt tokens admitted at this boundary whose prefill has not started
    pending_prompt: int = 0
    queue: Deque[Query] = field(default_factory=deque)
    audit: Optional[List[tuple]] = None


def pending_stall(state: SchedulerState, freq: float, extra_prompt: int = 0) -> float:
    if state.prefill is None:
        return 0.0
    return state.prefill.stall(state.pending_prompt + extra_prompt, freq)


def make_entry(q: Query, state: SchedulerState) -> ScoreboardEntry:
    pred = q.predicted_gen_len if q.predicted_gen_len > 0 else q.true_gen_len
    return ScoreboardEntry(q.id, state.scoreboard.k, q.prompt_len, pred, deadline=state.slo.deadline(q))


def try_admit(q: Query, state: SchedulerState, now: float) -> AdmissionDecision:
    sb = state.scoreboard
    cand = make_entry(q, state)
    proj = virtual_project(sb, cand)
    max_kv = int(proj.KV.max()) if proj.n else 0

    def decide(outcome, reason=None, plan=None, slack=None):
        d = AdmissionDecision(
            outcome, reason, q.id, now, max_kv,
            float(plan.Tp.mean()) if plan is not None else math.nan,
            float(np.nanmin(slack)) if slack is not None and np.isfinite(slack).any() else math.nan)
        if state.audit is not None:
            state.audit.append(d.row())
        return d

    if not check_kv(proj, state.kv_capacity):
        return decide(Outcome.QUEUED, Reason.KV_CAPACITY)
    if state.kv_only:
        sb.add(cand)
        state.pending_prompt += q.prompt_len
        return decide(Outcome.SCHEDULED)
    plan = compute_plan(proj, state.tp, state.f_max, state.model,
                        pending_stall(state, state.f_max, q.prompt_len))
    sw = state.switch
    if sw is not None and sw.delay(state.f_max) > 0:
        now_plan = compute_plan(proj, state.tp, sw.current_mhz, state.model,
                                pending_stall(state, sw.current_mhz, q.prompt_len))
        plan = mixed_plan(now_plan, plan, sw.delay(state.f_max))
    if not check_tbt(plan, state.slo):
        return decide(Outcome.QUEUED, Reason.TBT, plan)
    _, s, _, r, lost, deadline = sb.arrays()
    s, r = np.append(s, cand.s), np.append(r, cand.pred_gen)
    lost, deadline = np.append(lost, False), np.append(deadline, cand.deadline)
    slack = _e2e_slack(plan, sb.k, s, r, lost, deadline, now)
    bad = ~lost & ~(slack > 0)
    if not bad.any():
        sb.add(cand)
        state.pending_prompt += q.prompt_len
        return decide(Outcome.SCHEDULED, plan=plan, slack=slack)
    if not bad[:-1].any():
        # only the newcomer misses its own deadline
        cand.lost = True
        sb.add(cand)
        state.pending_prompt += q.prompt_len
        return decide(Outcome.SCHEDULED_LOST, plan=plan, slack=slack[:-1] if s.size > 1 else None)
    return decide(Outcome.QUEUED, Reason.E2E, plan, slack)


def drain_queue(state: SchedulerState, now: float) -> List[AdmissionDecision]:
    """Admit from the queue head while it admits; strict FIFO, head-of-line blocking."""
    decisions = []
    while state.queue:
        d = try_admit(state.queue[0], state, now)
        decisions.append(d)
        if not d.admitted:
            break
        state.queue.popleft()
    return decisions


def submit(q: Query, state: SchedulerState, now: float) -> List[AdmissionDecision]:
    state.queue.append(q)
    return drain_queue(state, now)
