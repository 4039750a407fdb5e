"""Engine-size selection, grace-period policy and shadow-instance lifecycle."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Deque, List, NamedTuple, Optional, Sequence

from .perfmodel import EngineProfile, check_profiles


class EngineState(str, Enum):
    ACTIVE = "Active"
    SPAWNING = "Spawning"
    TRANSITION = "TransitionServing"
    DRAINING = "Draining"
    RETIRED = "Retired"


class EngineChoice(NamedTuple):
    tp: int
    over_capacity: bool


def required_engine(rps: float, profiles: Sequence[EngineProfile]) -> EngineChoice:
    if not profiles:
        raise ValueError("no engine profiles")
    for p in profiles:
        if p.max_load_rps >= rps:
            return EngineChoice(p.tp, False)
    return EngineChoice(profiles[-1].tp, True)


class LoadMonitor:
    """Arrival-rate estimate over a trailing window ``(now - window, now]``."""

    def __init__(self, window: float = 10.0):
        if window <= 0:
            raise ValueError("monitor window must be > 0")
        self.window = float(window)
        self._times: Deque[float] = deque()

    def record(self, t: float) -> None:
        self._times.append(t)

    def measured_rps(self, now: float) -> float:
        cutoff = now - self.window
        while self._times and self._times[0] <= cutoff:
            self._times.popleft()
        return sum(1 for t in self._times if t <= now) / self.window


@dataclass
class GracePeriod:
    expires_at: float = 0.0

    def active(self, now: float) -> bool:
        return now < self.expires_at

    def renew(self, now: float, duration: float) -> None:
        self.expires_at = max(self.expires_at, now + duration)


class ScaleKind(str, Enum):
    NONE = "None"
    SPAWN_LARGER = "SpawnLarger"
    SPAWN_SMALLER = "SpawnSmaller"
    CANCEL = "CancelSpawn"


@dataclass(frozen=True)
class ScaleDecision:
    kind: ScaleKind = ScaleKind.NONE
    tp: int = 0
    rps: float = 0.0
    over_capacity: bool = False


class Autoscaler:
    def __init__(self, profiles: Sequence[EngineProfile], window: float = 10.0):
        self.profiles = check_profiles(profiles)
        self.monitor = LoadMonitor(window)
        self.grace = GracePeriod()
        self.log: List[tuple] = []

    def profile(self, tp: int) -> EngineProfile:
        for p in self.profiles:
            if p.tp == tp:
                return p
        raise KeyError(f"no profile for tp={tp}")

    def start_grace(self, now: float, tp: int) -> None:
        """Called when an engine starts serving."""
        self.grace.expires_at = now + self.profile(tp).spawn_time

    def tick(self, now: float, serving_tp: int, pending_tp: Optional[int] = None) -> ScaleDecision:
        rps = self.monitor.measured_rps(now)
        need = required_engine(rps, self.profiles)
        kind, tp = ScaleKind.NONE, 0
        if need.tp == serving_tp:
            # load fits the current engine: it keeps its protection against downscale
            self.grace.renew(now, self.profile(serving_tp).spawn_time)
            if pending_tp is not None:
                kind = ScaleKind.CANCEL
        elif need.tp > serving_tp:
            if pending_tp != need.tp:
                kind, tp = ScaleKind.SPAWN_LARGER, need.tp
        elif pending_tp is not None and pending_tp > serving_tp:
            kind = ScaleKind.CANCEL
        elif not self.grace.active(now) and pending_tp != need.tp:
            kind, tp = ScaleKind.SPAWN_SMALLER, need.tp
        d = ScaleDecision(kind, tp, rps, need.over_capacity)
        self.log.append((now, rps, need.tp, serving_tp, kind.value, tp, self.grace.expires_at))
        return d


SCALE_LOG_COLUMNS = ("time", "rps", "required_tp", "serving_tp", "decision", "target_tp", "grace_expires")
ENGINE_COLUMNS = ("time", "engine", "tp", "state")


@dataclass
class EngineInstance:
    id: int
    profile: EngineProfile
    state: EngineState = EngineState.ACTIVE
    spawned_at: float = 0.0
    ready_at: float = 0.0
    retired_at: Optional[float] = None
    # time from which this engine stopped receiving new requests
    shadow_from: float = float("inf")

    @property
    def tp(self) -> int:
        return self.profile.tp

    @property
    def kv_capacity(self) -> int:
        return self.profile.kv_capacity


class Fleet:
    """All engine instances of one run; exactly one receives new requests."""

    def __init__(self):
        self.engines: List[EngineInstance] = []
        self.serving: Optional[EngineInstance] = None
        self.pending: Optional[EngineInstance] = None
        self.timeline: List[tuple] = []

    def _set(self, e: EngineInstance, state: EngineState, now: float) -> None:
        e.state = state
        self.timeline.append((now, e.id, e.tp, state.value))

    def start(self, profile: EngineProfile, now: float = 0.0) -> EngineInstance:
        if self.serving is not None:
            raise RuntimeError("fleet already started")
        e = EngineInstance(len(self.engines), profile, spawned_at=now, ready_at=now)
        self.engines.append(e)
        self.serving = e
        self._set(e, EngineState.ACTIVE, now)
        return e

    def spawn(self, profile: EngineProfile, now: float) -> Optional[EngineInstance]:
        """Start warming up a new engine; same size as the serving one is a no-op."""
        if profile.tp == self.serving.tp:
            return None
        self.cancel_pending(now)
        e = EngineInstance(len(self.engines), profile, spawned_at=now, ready_at=now + profile.spawn_time)
        self.engines.append(e)
        self.pending = e
        self._set(e, EngineState.SPAWNING, now)
        return e

    def cancel_pending(self, now: float) -> Optional[EngineInstance]:
        e, self.pending = self.pending, None
        if e is not None:
            e.retired_at = now
            self._set(e, EngineState.RETIRED, now)
        return e

    def lifecycle_advance(self, now: float, is_idle: Callable[[EngineInstance], bool]) -> List[EngineInstance]:
        """Apply due transitions; returns engines that changed state."""
        changed = []
        p = self.pending
        if p is not None and p.ready_at <= now:
            old = self.serving
            old.shadow_from = now
            self._set(old, EngineState.DRAINING, now)
            self._set(p, EngineState.TRANSITION, now)
            self.serving, self.pending = p, None
            changed += [old, p]
        for e in self.engines:
            if e.state is EngineState.DRAINING and is_idle(e):
                e.retired_at = now
                self._set(e, EngineState.RETIRED, now)
                changed.append(e)
        s = self.serving
        if s.state is EngineState.TRANSITION and not any(e.state is EngineState.DRAINING for e in self.engines):
            self._set(s, EngineState.ACTIVE, now)
            changed.append(s)
        return changed
