"""Discrete-event, iteration-level serving simulation.

Each engine advances one decode iteration at a time. Admission, frequency
selection and autoscaling decisions happen at event boundaries; energy is
integrated as piecewise-constant power over recorded intervals.
"""

from __future__ import annotations

import heapq
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .autoscaler import Autoscaler, EngineInstance, EngineState, Fleet, ScaleKind
from .perfmodel import (EngineProfile, FrequencyDomain, ModelContractError, PerfModel, PowerModel,
                        check_profiles, engine_power)
from .projection import Scoreboard, advance, on_overrun, project
from .scheduler import (Outcome, PrefillModel, SchedulerState, SloConfig, compute_plan, drain_queue,
                        pending_stall)
from .throttle import (FrequencyActuator, FrequencyContractError, FrequencyDecision, SwitchState,
                       min_slo_frequency)
from .trace import DEFAULT_MAX_TOKENS, Query, fingerprint

log = logging.getLogger(__name__)

# tie-break order for simultaneous events
READY, FREQ_DONE, ARRIVAL, ITER_DONE, TICK = range(5)

ITERATION_COLUMNS = ("t_start", "t_end", "engine", "tp", "iteration", "batch", "kv_blocks",
                     "effective_mhz", "watts", "stall", "switch_at", "switch_mhz")
INTERVAL_COLUMNS = ("engine", "tp", "t0", "t1", "watts", "shadow", "kind")
QUERY_COLUMNS = ("id", "arrival", "prompt_len", "gen_len", "pred_gen_len", "engine", "tp",
                 "scheduled_at", "first_token_at", "completed_at", "lost")


@dataclass(frozen=True)
class SimConfig:
    # None: E2E target taken from the initial engine's profile
    slo: Optional[SloConfig] = None
    # TBT target used when ``slo`` is None
    tbt_slo: float = 0.2
    domain: FrequencyDomain = field(default_factory=FrequencyDomain)
    tokens_per_block: int = 64
    prefill: PrefillModel = field(default_factory=PrefillModel)
    switch_latency: float = 0.2
    autoscale: bool = False
    baseline: bool = False
    throttle: bool = True
    # re-select frequency on admissions only (not on completions)
    throttle_on_admission_only: bool = False
    # run at maximum frequency while requests wait in the queue
    queue_bypass: bool = True
    monitor_window: float = 10.0
    # fixed engine, or the starting engine under autoscaling; None = largest
    engine_tp: Optional[int] = None
    max_tokens: int = DEFAULT_MAX_TOKENS
    seed: int = 0
    record_plans: bool = False
    record_audit: bool = False

    def __post_init__(self):
        if self.switch_latency < 0 or self.monitor_window <= 0 or self.tokens_per_block < 1:
            raise ValueError("invalid simulation config")


@dataclass
class QueryRecord:
    id: int
    arrival: float
    prompt_len: int
    gen_len: int
    pred_gen_len: int
    engine: int = -1
    tp: int = 0
    scheduled_at: float = math.nan
    first_token_at: float = math.nan
    completed_at: float = math.nan
    lost: bool = False

    def row(self) -> tuple:
        return tuple(getattr(self, c) for c in QUERY_COLUMNS)


@dataclass(frozen=True)
class EnergyTotals:
    total: float
    shadow: float
    per_engine: Dict[int, float]


@dataclass
class PlanSnapshot:
    engine: int
    k: int
    time: float
    mhz: float
    TR: np.ndarray
    B: np.ndarray


@dataclass
class RunResult:
    config: dict
    trace_fingerprint: str
    queries: List[QueryRecord]
    iterations: List[tuple]
    intervals: List[tuple]
    frequency: List[tuple]
    engines: List[tuple]
    scale_log: List[tuple]
    audit: List[tuple]
    plans: List[PlanSnapshot]
    totals: dict

    def iteration_array(self, column: str) -> np.ndarray:
        i = ITERATION_COLUMNS.index(column)
        return np.array([r[i] for r in self.iterations])


def integrate_energy(intervals: Sequence[tuple]) -> EnergyTotals:
    """Stepwise integration of ``watts * (t1 - t0)`` over interval rows."""
    total = shadow = 0.0
    per: Dict[int, float] = {}
    last = -math.inf
    for eng, _tp, t0, t1, watts, is_shadow, _kind in intervals:
        if t0 < last:
            raise ValueError(f"interval series not sorted by start time at t={t0}")
        if t1 < t0:
            raise ValueError(f"negative interval [{t0}, {t1}]")
        last = t0
        e = watts * (t1 - t0)
        total += e
        per[eng] = per.get(eng, 0.0) + e
        if is_shadow:
            shadow += e
    return EnergyTotals(total, shadow, per)


@dataclass
class _Active:
    rec: QueryRecord
    s: int
    q_len: int
    true_len: int
    generated: int = 0


@dataclass
class _Iteration:
    j: int
    t0: float
    t_first: float
    t_end: float
    batch: List[_Active]
    prefill: List[_Active]
    kv: int
    mhz: float
    stall: float
    segments: List[tuple]  # (t0, t1, watts)
    switch_mhz: float = math.nan


class _EngineRun:
    def __init__(self, inst: EngineInstance, sched: SchedulerState, act: FrequencyActuator, now: float):
        self.inst = inst
        self.sched = sched
        self.act = act
        self.active: Dict[int, _Active] = {}
        self.prefill: List[_Active] = []
        self.it: Optional[_Iteration] = None
        self.dirty = False
        self.completed = False
        self.idle_since: Optional[float] = now

    def idle(self) -> bool:
        return self.it is None and not self.active and not self.sched.queue


def _phase(t: float, d_old: float, d_new: float, t_sw: Optional[float]) -> float:
    """End of a unit of work starting at ``t`` when the rate changes at ``t_sw``."""
    if d_old <= 0:
        return t
    if t_sw is None or t_sw >= t + d_old:
        return t + d_old
    if t_sw <= t:
        return t + d_new
    return t_sw + (1.0 - (t_sw - t) / d_old) * d_new


class Simulation:
    def __init__(self, cfg: SimConfig, trace: Sequence[Query], model: PerfModel, power: PowerModel,
                 profiles: Sequence[EngineProfile]):
        if not trace:
            raise ValueError("empty trace")
        self.cfg = cfg
        self.fingerprint = fingerprint(trace)
        # the scheduler sees generation lengths clipped to the sequence limit, like the engine
        self.trace = [replace(q, true_gen_len=self._true_len(q)) for q in trace]
        self.model = model
        self.power = power
        self.profiles = check_profiles(profiles)
        by_tp = {p.tp: p for p in self.profiles}
        tp0 = cfg.engine_tp if cfg.engine_tp is not None else self.profiles[-1].tp
        if tp0 not in by_tp:
            raise ValueError(f"no engine profile for tp={tp0}")
        self.initial = by_tp[tp0]
        e2e = self.profiles[-1].e2e_slo if cfg.autoscale else self.initial.e2e_slo
        self.slo = cfg.slo if cfg.slo is not None else SloConfig(tbt_slo=cfg.tbt_slo, e2e_slo=e2e)
        self.f_max = float(cfg.domain.max_mhz)

        self.records = [QueryRecord(q.id, q.arrival_time, q.prompt_len, q.true_gen_len,
                                    q.predicted_gen_len if q.predicted_gen_len > 0 else q.true_gen_len)
                        for q in self.trace]
        self.rec_by_id = {r.id: r for r in self.records}
        if len(self.rec_by_id) != len(self.records):
            raise ValueError("duplicate query ids in trace")
        self.heap: list = []
        self.seq = 0
        self.now = 0.0
        self.last_activity = 0.0
        self.pending_arrivals = len(self.trace)

        self.iterations: List[tuple] = []
        self.intervals: List[tuple] = []
        self.freq_rows: List[tuple] = []
        self.audit: List[tuple] = []
        self.plans: List[PlanSnapshot] = []
        self.tokens = 0
        self.infeasible = 0
        self.evaluations = 0

        self.fleet = Fleet()
        self.runs: Dict[int, _EngineRun] = {}
        self.autoscaler = Autoscaler(self.profiles, cfg.monitor_window) if cfg.autoscale else None

    def _true_len(self, q: Query) -> int:
        return min(q.true_gen_len, max(1, self.cfg.max_tokens - q.prompt_len))

    # -- event plumbing ------------------------------------------------------

    def _push(self, t: float, prio: int, payload) -> None:
        heapq.heappush(self.heap, (t, prio, self.seq, payload))
        self.seq += 1

    def _new_run(self, inst: EngineInstance, now: float) -> _EngineRun:
        cfg = self.cfg
        sched = SchedulerState(Scoreboard(cfg.tokens_per_block), inst.tp, inst.kv_capacity, self.model,
                               self.slo, self.f_max, kv_only=cfg.baseline,
                               prefill=replace(cfg.prefill, f_max=self.f_max),
                               audit=self.audit if cfg.record_audit else None)
        run = _EngineRun(inst, sched, FrequencyActuator(self.f_max, cfg.switch_latency), now)
        self.runs[inst.id] = run
        return run

    def _interval(self, inst: EngineInstance, t0: float, t1: float, watts: float, kind: str) -> None:
        if t1 <= t0:
            if t1 == t0:
                self.intervals.append((inst.id, inst.tp, t0, t1, watts, inst.shadow_from <= t0, kind))
            return
        cut = inst.shadow_from
        if t0 < cut < t1:
            self.intervals.append((inst.id, inst.tp, t0, cut, watts, False, kind))
            self.intervals.append((inst.id, inst.tp, cut, t1, watts, True, kind))
        else:
            self.intervals.append((inst.id, inst.tp, t0, t1, watts, cut <= t0, kind))

    def _idle_watts(self, tp: int) -> float:
        return tp * float(self.power.idle_power)

    def _close_idle(self, run: _EngineRun, now: float) -> None:
        if run.idle_since is not None:
            self._interval(run.inst, run.idle_since, now, self._idle_watts(run.inst.tp), "idle")
            run.idle_since = None

    # -- engine mechanics ----------------------------------------------------

    def _snapshot(self, run: _EngineRun) -> None:
        sb = run.sched.scoreboard
        proj = project(sb)
        mhz = run.act.effective
        if proj.n:
            TR = compute_plan(proj, run.inst.tp, mhz, self.model, pending_stall(run.sched, mhz)).TR
        else:
            TR = np.zeros(0)
        self.plans.append(PlanSnapshot(run.inst.id, sb.k, self.now, mhz, TR, proj.B))

    @staticmethod
    def _switch_state(run: _EngineRun, now: float) -> SwitchState:
        a = run.act
        if a.pending is None:
            return SwitchState(a.effective, a.latency)
        return SwitchState(a.effective, a.latency, a.pending, a.done_at - now)

    def _throttle(self, run: _EngineRun, now: float) -> None:
        cfg = self.cfg
        if cfg.baseline or not cfg.throttle:
            dec = FrequencyDecision(self.f_max)
        elif cfg.queue_bypass and run.sched.queue:
            dec = FrequencyDecision(self.f_max, bypassed=True)
        else:
            sb = run.sched.scoreboard
            try:
                dec = min_slo_frequency(project(sb), sb, self.model, run.inst.tp, cfg.domain, self.slo, now,
                                        lambda f: pending_stall(run.sched, f),
                                        self._switch_state(run, now))
            except FrequencyContractError as exc:
                log.debug("engine %d: %s; running at max", run.inst.id, exc)
                self.infeasible += 1
                dec = FrequencyDecision(self.f_max)
            self.evaluations += dec.evaluations
        started = run.act.request(dec.target_mhz, now)
        if started is not None:
            self._push(started[0], FREQ_DONE, ("freq", run.inst.id, started[1]))
        self.freq_rows.append((now, run.inst.id, dec.target_mhz, run.act.effective, dec.bypassed))

    def _service(self, run: _EngineRun, now: float) -> None:
        """Boundary work: admissions, frequency selection, next iteration."""
        admitted = False
        if run.dirty and run.sched.queue and run.inst.state is not EngineState.DRAINING:
            run.sched.switch = self._switch_state(run, now)
            for d in drain_queue(run.sched, now):
                if not d.admitted:
                    continue
                admitted = True
                rec = self.rec_by_id[d.query_id]
                rec.scheduled_at, rec.engine, rec.tp = now, run.inst.id, run.inst.tp
                rec.lost = d.outcome is Outcome.SCHEDULED_LOST
                a = _Active(rec, run.sched.scoreboard.k, rec.prompt_len, rec.gen_len)
                run.active[rec.id] = a
                run.prefill.append(a)
        run.dirty = False
        completed, run.completed = run.completed, False
        a = run.act
        backlog = (self.cfg.queue_bypass and bool(run.sched.queue)
                   and self.f_max not in (a.effective, a.pending) and not self.cfg.baseline)
        if admitted or backlog or (completed and not self.cfg.throttle_on_admission_only):
            self._throttle(run, now)
        if self.cfg.record_plans and (admitted or completed or backlog):
            self._snapshot(run)
        self._start_iteration(run, now)

    def _ips(self, tp: int, batch: int, kv: int, mhz: float) -> float:
        v = float(np.asarray(self.model.predict_ips(tp, batch, kv, mhz)))
        if not (v > 0 and math.isfinite(v)):
            raise ModelContractError(f"nonpositive IPS {v} at tp={tp} batch={batch} kv={kv} f={mhz}")
        return v

    def _start_iteration(self, run: _EngineRun, now: float) -> None:
        sb = run.sched.scoreboard
        j = sb.k + 1
        batch = [a for a in run.active.values() if j - a.s < a.true_len]
        pre = run.prefill
        if not batch and not pre:
            if run.idle_since is None:
                run.idle_since = now
            return
        self._close_idle(run, now)
        run.prefill = []
        run.sched.pending_prompt = 0
        tp, N = run.inst.tp, sb.N
        kv = sum(-(-(j - a.s + a.q_len) // N) for a in batch)
        b = len(batch)
        pf = run.sched.prefill
        prompt_sum = sum(a.q_len for a in pre)

        def stall(f):
            return pf.stall(prompt_sum, f)

        def decode(f):
            return 1.0 / self._ips(tp, b, kv, f) if b else 0.0

        f0 = run.act.effective
        f1, t_sw = run.act.pending, run.act.done_at
        if f1 is None:
            f1, t_sw = f0, None
        # the whole iteration is one unit of work; the stall share only dates the first token
        t_first = _phase(now, stall(f0), stall(f1), t_sw)
        t_end = _phase(now, stall(f0) + decode(f0), stall(f1) + decode(f1), t_sw)

        w0 = engine_power(self.power, tp, f0, kv)
        if t_sw is not None and t_sw < t_end:
            segments = [(now, t_sw, w0), (t_sw, t_end, engine_power(self.power, tp, f1, kv))]
        else:
            segments = [(now, t_end, w0)]
        run.it = _Iteration(j, now, t_first, t_end, batch, pre, kv, f0, t_first - now, segments,
                            f1 if len(segments) > 1 else math.nan)
        self._push(t_end, ITER_DONE, ("iter", run.inst.id))

    def _on_iteration(self, run: _EngineRun, now: float) -> None:
        it, run.it = run.it, None
        inst = run.inst
        for t0, t1, w in it.segments:
            self._interval(inst, t0, t1, w, "busy")
        t_sw = it.segments[1][0] if len(it.segments) > 1 else math.nan
        self.iterations.append((it.t0, it.t_end, inst.id, inst.tp, it.j, len(it.batch), it.kv, it.mhz,
                                it.segments[0][2], it.stall, t_sw, it.switch_mhz))
        for a in it.prefill:
            a.generated = 1
            a.rec.first_token_at = it.t_first
        for a in it.batch:
            a.generated += 1
        self.tokens += len(it.prefill) + len(it.batch)
        done = [a for a in run.active.values() if a.generated >= a.true_len]
        for a in done:
            a.rec.completed_at = it.t_first if a.true_len == 1 else now
            del run.active[a.rec.id]
        sb = run.sched.scoreboard
        advance(sb, [a.rec.id for a in done])
        for a in run.active.values():
            if a.generated and a.generated >= sb[a.rec.id].pred_gen:
                on_overrun(sb, a.rec.id, self.cfg.max_tokens, a.generated)
        if done:
            run.dirty = run.completed = True
        self._service(run, now)
        if inst.state is EngineState.DRAINING:
            self._advance_fleet(now)

    # -- fleet ---------------------------------------------------------------

    def _advance_fleet(self, now: float) -> None:
        for e in self.fleet.lifecycle_advance(now, lambda e: self.runs[e.id].idle()):
            if e.state is EngineState.RETIRED and e.id in self.runs:
                self._close_idle(self.runs[e.id], now)

    def _spawn_interval(self, inst: EngineInstance, now: float) -> None:
        # warming engines hold their GPUs at idle power and serve nothing
        w = self._idle_watts(inst.tp)
        self.intervals.append((inst.id, inst.tp, inst.spawned_at, now, w, True, "spawn"))

    def _on_ready(self, inst: EngineInstance, now: float) -> None:
        if self.fleet.pending is not inst or inst.state is not EngineState.SPAWNING:
            return
        self._spawn_interval(inst, now)
        old = self.runs[self.fleet.serving.id]
        new = self._new_run(inst, now)
        self._advance_fleet(now)
        # queued (never scheduled) requests follow the new engine
        new.sched.queue.extend(old.sched.queue)
        old.sched.queue.clear()
        self.autoscaler.start_grace(now, inst.tp)
        new.dirty = True
        self._service(new, now)
        self._advance_fleet(now)

    def _all_idle(self) -> bool:
        return all(r.idle() for r in self.runs.values()
                   if r.inst.state is not EngineState.RETIRED)

    def _on_tick(self, now: float) -> None:
        fl = self.fleet
        if self.pending_arrivals == 0 and self._all_idle():
            if fl.pending is not None:
                self._spawn_interval(fl.pending, now)
                fl.cancel_pending(now)
            return
        d = self.autoscaler.tick(now, fl.serving.tp, fl.pending.tp if fl.pending else None)
        if d.kind in (ScaleKind.SPAWN_LARGER, ScaleKind.SPAWN_SMALLER, ScaleKind.CANCEL) and fl.pending:
            self._spawn_interval(fl.pending, now)
            fl.cancel_pending(now)
        if d.kind in (ScaleKind.SPAWN_LARGER, ScaleKind.SPAWN_SMALLER):
            inst = fl.spawn(self.autoscaler.profile(d.tp), now)
            if inst is not None:
                self._push(inst.ready_at, READY, ("ready", inst.id))
        self._push(now + self.cfg.monitor_window, TICK, ("tick",))

    # -- main loop -----------------------------------------------------------

    def run(self) -> RunResult:
        first = self.fleet.start(self.initial, 0.0)
        self._new_run(first, 0.0)
        for q in self.trace:
            self._push(q.arrival_time, ARRIVAL, ("arrival", q))
        if self.autoscaler is not None:
            self.autoscaler.start_grace(0.0, first.tp)
            self._push(self.cfg.monitor_window, TICK, ("tick",))
        while self.heap:
            t, _, _, payload = heapq.heappop(self.heap)
            self.now = t
            try:
                self._dispatch(t, payload)
            except ModelContractError as exc:
                raise ModelContractError(f"t={t:.6f}: {exc}") from exc
        return self._finish()

    def _dispatch(self, t: float, payload) -> None:
        kind = payload[0]
        if kind == "arrival":
            q = payload[1]
            self.pending_arrivals -= 1
            self.last_activity = t
            if self.autoscaler is not None:
                self.autoscaler.monitor.record(t)
            run = self.runs[self.fleet.serving.id]
            run.sched.queue.append(q)
            run.dirty = True
            if run.it is None:
                self._service(run, t)
        elif kind == "iter":
            self.last_activity = t
            self._on_iteration(self.runs[payload[1]], t)
        elif kind == "freq":
            run = self.runs[payload[1]]
            if run.act.complete(payload[2]):
                self.freq_rows.append((t, run.inst.id, run.act.effective, run.act.effective, False))
        elif kind == "ready":
            self.last_activity = t
            self._on_ready(self.fleet.engines[payload[1]], t)
        elif kind == "tick":
            self._on_tick(t)

    def _finish(self) -> RunResult:
        end = self.last_activity
        for run in self.runs.values():
            if run.inst.state is not EngineState.RETIRED and run.idle_since is not None:
                self._interval(run.inst, run.idle_since, max(end, run.idle_since),
                               self._idle_watts(run.inst.tp), "idle")
                run.idle_since = None
        self.intervals.sort(key=lambda r: (r[2], r[0], r[3]))
        energy = integrate_energy(self.intervals)
        unserved = [r.id for r in self.records if math.isnan(r.completed_at)]
        if unserved:
            raise RuntimeError(f"simulation ended with {len(unserved)} unserved queries")
        cfg_echo = asdict(self.cfg)
        cfg_echo["slo"] = asdict(self.slo)
        cfg_echo["initial_tp"] = self.initial.tp
        switches = sum(r.act.switches for r in self.runs.values())
        totals = {
            "energy_j": energy.total,
            "shadow_energy_j": energy.shadow,
            "energy_per_engine_j": {str(k): v for k, v in sorted(energy.per_engine.items())},
            "tokens": self.tokens,
            "end_time": end,
            "iterations": len(self.iterations),
            "frequency_switches": switches,
            "throttle_evaluations": self.evaluations,
            "infeasible_throttle": self.infeasible,
            "engines_spawned": len(self.fleet.engines) - 1,
        }
        return RunResult(cfg_echo, self.fingerprint, self.records, self.iterations, self.intervals,
                         self.freq_rows, self.fleet.timeline,
                         self.autoscaler.log if self.autoscaler else [], self.audit, self.plans, totals)


def run(cfg: SimConfig, trace: Sequence[Query], model: PerfModel, power: PowerModel,
        profiles: Sequence[EngineProfile]) -> RunResult:
    return Simulation(cfg, trace, model, power, profiles).run()


def run_baseline(cfg: SimConfig, trace: Sequence[Query], model: PerfModel, power: PowerModel,
                 profiles: Sequence[EngineProfile]) -> RunResult:
    """Always maximum frequency, KV-capacity queueing only, fixed engine."""
    return run(replace(cfg, baseline=True, autoscale=False), trace, model, power, profiles)
