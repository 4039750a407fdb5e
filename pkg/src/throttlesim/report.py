"""Run metrics, paired comparisons and file export."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .autoscaler import ENGINE_COLUMNS, SCALE_LOG_COLUMNS, EngineState
from .scheduler import AUDIT_COLUMNS, SloConfig
from .simcore import INTERVAL_COLUMNS, ITERATION_COLUMNS, QUERY_COLUMNS, RunResult

SCHEMA_VERSION = 1
FREQ_EXPORT_COLUMNS = ("time", "engine", "target_mhz", "effective_mhz", "bypassed")
PANEL_COLUMNS = ("time", "rps", "engine_tp", "engine_state", "overlap", "mhz", "watts", "e2e_p99")


class TraceMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class MetricsSummary:
    e2e_p99: float
    tbt_mean: float
    ttft_mean: float
    queue_mean: float
    energy_total: float
    tokens_total: int
    tpj: float
    e2e_violations: int
    lost_count: int
    queries: int
    shadow_energy: float
    e2e_slo: float
    tbt_slo: float
    trace_fingerprint: str

    @property
    def slo_compliant(self) -> bool:
        return self.e2e_p99 <= self.e2e_slo and self.tbt_mean <= self.tbt_slo


@dataclass(frozen=True)
class ComparisonReport:
    energy_reduction_pct: float
    tpj_ratio: float
    e2e_p99_delta: float
    tbt_delta: float
    slo_compliant: bool


def nearest_rank(values, p: float) -> float:
    """Order statistic at rank ``ceil(p/100 * (n - 1))`` (0-based); never interpolates."""
    a = np.asarray(values, dtype=float)
    if a.size == 0:
        raise ValueError("no values")
    return float(np.percentile(a, p, method="higher"))


def _slo_of(run: RunResult) -> SloConfig:
    s = run.config["slo"]
    return SloConfig(tbt_slo=s["tbt_slo"], e2e_slo=s["e2e_slo"])


def aggregate(run: RunResult, slo: Optional[SloConfig] = None) -> MetricsSummary:
    slo = slo or _slo_of(run)
    served = [q for q in run.queries if not math.isnan(q.completed_at)]
    if not served:
        raise ValueError("run served no queries")
    # sort so the result does not depend on record order
    served.sort(key=lambda q: q.id)
    arrival = np.array([q.arrival for q in served])
    done = np.array([q.completed_at for q in served])
    first = np.array([q.first_token_at for q in served])
    sched = np.array([q.scheduled_at for q in served])
    gen = np.array([q.gen_len for q in served])
    e2e = done - arrival
    multi = gen > 1
    gaps = int((gen[multi] - 1).sum())
    tbt = float((done[multi] - first[multi]).sum() / gaps) if gaps else 0.0
    energy = float(run.totals["energy_j"])
    tokens = int(run.totals["tokens"])
    return MetricsSummary(
        e2e_p99=nearest_rank(e2e, 99),
        tbt_mean=tbt,
        ttft_mean=float((first - arrival).mean()),
        queue_mean=float((sched - arrival).mean()),
        energy_total=energy,
        tokens_total=tokens,
        tpj=tokens / energy if energy > 0 else 0.0,
        e2e_violations=int((e2e > slo.e2e_slo).sum()),
        lost_count=int(sum(q.lost for q in served)),
        queries=len(served),
        shadow_energy=float(run.totals["shadow_energy_j"]),
        e2e_slo=slo.e2e_slo,
        tbt_slo=slo.tbt_slo,
        trace_fingerprint=run.trace_fingerprint,
    )


def compare(baseline: MetricsSummary, candidate: MetricsSummary) -> ComparisonReport:
    if baseline.trace_fingerprint != candidate.trace_fingerprint:
        raise TraceMismatchError(
            f"runs used different traces ({baseline.trace_fingerprint} vs {candidate.trace_fingerprint})")
    return ComparisonReport(
        energy_reduction_pct=(1.0 - candidate.energy_total / baseline.energy_total) * 100.0,
        tpj_ratio=candidate.tpj / baseline.tpj,
        e2e_p99_delta=candidate.e2e_p99 - baseline.e2e_p99,
        tbt_delta=candidate.tbt_mean - baseline.tbt_mean,
        slo_compliant=candidate.slo_compliant,
    )


# ---------------------------------------------------------------- timelines

def _binned_integral(t0, t1, values, edges) -> np.ndarray:
    """Integral of the summed step functions ``values[i]`` on ``[t0[i], t1[i])`` over each bin."""
    t0, t1, values = (np.asarray(a, dtype=float) for a in (t0, t1, values))
    if t0.size == 0:
        return np.zeros(len(edges) - 1)
    tt = np.concatenate([t0, t1])
    dd = np.concatenate([values, -values])
    order = np.argsort(tt, kind="stable")
    tt, dd = tt[order], dd[order]
    level = np.cumsum(dd)
    cum = np.concatenate([[0.0], np.cumsum(level[:-1] * np.diff(tt))])
    edges = np.asarray(edges, dtype=float)
    idx = np.searchsorted(tt, edges, side="right") - 1
    at = np.where(idx >= 0, cum[np.clip(idx, 0, None)] + level[np.clip(idx, 0, None)] *
                  (edges - tt[np.clip(idx, 0, None)]), 0.0)
    return np.diff(at)


def panel_timeline(run: RunResult, bin_s: float = 10.0) -> list:
    """Per-bin rows of load, serving engine, frequency, power and tail latency."""
    end = max(run.totals["end_time"], max(q.arrival for q in run.queries))
    nb = max(1, int(math.ceil(end / bin_s)))
    edges = np.arange(nb + 1) * bin_s
    arrivals = np.array([q.arrival for q in run.queries])
    rps = np.histogram(arrivals, bins=edges)[0] / bin_s

    iv = run.intervals
    watts = _binned_integral([r[2] for r in iv], [r[3] for r in iv], [r[4] for r in iv], edges) / bin_s
    it = run.iterations
    t0 = [r[0] for r in it]
    t1 = [r[1] for r in it]
    busy = _binned_integral(t0, t1, np.ones(len(it)), edges)
    mhz_t = _binned_integral(t0, t1, [r[7] for r in it], edges)
    with np.errstate(invalid="ignore", divide="ignore"):
        mhz = np.where(busy > 0, mhz_t / busy, np.nan)

    # serving engine at each bin start, from the state-change log
    serving = (EngineState.ACTIVE.value, EngineState.TRANSITION.value)
    changes = sorted(run.engines, key=lambda r: r[0])
    state = {}
    rows = []
    ci = 0
    done = np.array([q.completed_at for q in run.queries])
    e2e = done - arrivals
    bin_of = np.minimum((done // bin_s).astype(int), nb - 1)
    for b in range(nb):
        t = edges[b]
        while ci < len(changes) and changes[ci][0] <= t:
            _, eid, tp, st = changes[ci]
            state[eid] = (tp, st)
            ci += 1
        live = [(eid, tp, st) for eid, (tp, st) in sorted(state.items()) if st != EngineState.RETIRED.value]
        cur = [x for x in live if x[2] in serving]
        tp, st = (cur[-1][1], cur[-1][2]) if cur else (0, "")
        overlap = int(len(live) > 1)
        sel = e2e[bin_of == b]
        p99 = nearest_rank(sel, 99) if sel.size else math.nan
        rows.append((float(t), float(rps[b]), tp, st, overlap, float(mhz[b]), float(watts[b]), p99))
    return rows


# ---------------------------------------------------------------- export

def _write_csv(path: Path, header: Sequence[str], rows: Iterable[tuple]) -> None:
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc


def read_csv(path) -> list:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def summary_document(run: RunResult, summary: MetricsSummary, extra: Optional[dict] = None) -> dict:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "metrics": asdict(summary),
        "slo_compliant": summary.slo_compliant,
        "totals": run.totals,
        "config": run.config,
        "trace_fingerprint": run.trace_fingerprint,
    }
    if extra:
        doc.update(extra)
    return doc


def write_json(path: Path, doc: dict) -> None:
    try:
        Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc


def export(run: RunResult, summary: MetricsSummary, out_dir, extra: Optional[dict] = None,
           bin_s: float = 10.0) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"{out}: {exc.strerror or exc}") from exc
    write_json(out / "summary.json", summary_document(run, summary, extra))
    _write_csv(out / "queries.csv", QUERY_COLUMNS, (q.row() for q in run.queries))
    _write_csv(out / "iterations.csv", ITERATION_COLUMNS, run.iterations)
    _write_csv(out / "intervals.csv", INTERVAL_COLUMNS, run.intervals)
    _write_csv(out / "frequency.csv", FREQ_EXPORT_COLUMNS, run.frequency)
    _write_csv(out / "engines.csv", ENGINE_COLUMNS, run.engines)
    _write_csv(out / "timeline.csv", PANEL_COLUMNS, panel_timeline(run, bin_s))
    if run.scale_log:
        _write_csv(out / "autoscaler.csv", SCALE_LOG_COLUMNS, run.scale_log)
    if run.audit:
        _write_csv(out / "admissions.csv", AUDIT_COLUMNS, run.audit)
    return out


def load_summary(path) -> MetricsSummary:
    p = Path(path)
    if p.is_dir():
        p = p / "summary.json"
    doc = json.loads(p.read_text())
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"{p}: unsupported schema_version {doc.get('schema_version')!r}")
    names = {f.name for f in fields(MetricsSummary)}
    return MetricsSummary(**{k: v for k, v in doc["metrics"].items() if k in names})
