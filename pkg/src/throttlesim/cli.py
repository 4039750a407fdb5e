"""Command-line entry point.

    throttlesim simulate   --config run.yaml [--baseline] [--no-autoscale] [--no-throttle] [--enforce-slo]
    throttlesim compare    --config run.yaml
    throttlesim sweep      --config run.yaml
    throttlesim calibrate  --config run.yaml
    throttlesim validate-model --config run.yaml [--model grid.csv] [--split 0.9]
    throttlesim gen-trace  --config run.yaml [--input trace.csv] [--scale-peak RPS] [--shape LOW HIGH]

Exit codes: 0 success, 1 configuration or input error, 2 SLO non-compliance
(only with --enforce-slo). Set THROTTLESIM_LOG=DEBUG for verbose logging.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .config import (ConfigError, RunSpec, build_domain, build_models, build_profiles, build_sim_config, build_trace,
                     dump_spec, load_spec)
from .perfmodel import (GridPerfModel, ModelContractError, PerfModel, PowerModel, engine_power, fit_from_dataset,
                        load_dataset, sample_dataset, save_dataset, validate)
from .report import TraceMismatchError, _write_csv, aggregate, compare, export, write_json
from .simcore import run as run_sim
from .trace import TraceError, load_trace, peak_rps, scale_trace, shape_trace, write_trace

log = logging.getLogger("throttlesim")

EXIT_OK, EXIT_CONFIG, EXIT_SLO = 0, 1, 2
LOG_ENV = "THROTTLESIM_LOG"

# (name, baseline, autoscale)
CELLS = (("baseline", True, False), ("autoscale_only", True, True),
         ("throttle_only", False, False), ("combined", False, True))
COMPARISON_COLUMNS = ("cell", "energy_j", "energy_reduction_pct", "tpj", "tpj_ratio", "e2e_p99",
                      "e2e_p99_delta", "tbt_mean", "tbt_delta", "lost", "violations", "slo_compliant")
SWEEP_METRICS = ("tps", "e2e", "tbt", "power", "tpj")


def _prepare_out(spec: RunSpec) -> Path:
    out = Path(spec.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"{out}: {exc.strerror or exc}") from None
    (out / "config.yaml").write_text(dump_spec(spec))
    return out


# ---------------------------------------------------------------- simulate / compare

def cmd_simulate(spec: RunSpec, enforce_slo: bool = False) -> int:
    out = _prepare_out(spec)
    model, power = build_models(spec)
    profiles = build_profiles(spec)
    trace = build_trace(spec)
    res = run_sim(build_sim_config(spec), trace, model, power, profiles)
    summary = aggregate(res)
    export(res, summary, out, extra={"seed": spec.seed})
    print(f"queries={summary.queries} energy={summary.energy_total:.1f}J tpj={summary.tpj:.4f} "
          f"e2e_p99={summary.e2e_p99:.3f}s tbt_mean={summary.tbt_mean * 1e3:.1f}ms "
          f"lost={summary.lost_count} compliant={summary.slo_compliant}")
    if enforce_slo and not summary.slo_compliant:
        print(f"SLO not met: e2e_p99 {summary.e2e_p99:.3f}s (target {summary.e2e_slo}), "
              f"tbt_mean {summary.tbt_mean:.4f}s (target {summary.tbt_slo})", file=sys.stderr)
        return EXIT_SLO
    return EXIT_OK


def run_cells(spec: RunSpec, trace=None, cells=CELLS) -> dict:
    """Runs each (name, baseline, autoscale) cell on the same trace."""
    model, power = build_models(spec)
    profiles = build_profiles(spec)
    trace = build_trace(spec) if trace is None else trace
    base_cfg = build_sim_config(spec)
    out = {}
    for name, baseline, autoscale in cells:
        cfg = replace(base_cfg, baseline=baseline, autoscale=autoscale, throttle=not baseline)
        log.info("running cell %s", name)
        res = run_sim(cfg, trace, model, power, profiles)
        out[name] = (res, aggregate(res))
    return out


def cmd_compare(spec: RunSpec, enforce_slo: bool = False) -> int:
    out = _prepare_out(spec)
    results = run_cells(spec)
    base = results["baseline"][1]
    rows, doc = [], {"seed": spec.seed, "cells": {}}
    for name, (res, summary) in results.items():
        export(res, summary, out / name, extra={"seed": spec.seed, "cell": name})
        rep = compare(base, summary)
        rows.append((name, summary.energy_total, rep.energy_reduction_pct, summary.tpj, rep.tpj_ratio,
                     summary.e2e_p99, rep.e2e_p99_delta, summary.tbt_mean, rep.tbt_delta, summary.lost_count,
                     summary.e2e_violations, rep.slo_compliant))
        doc["cells"][name] = {"summary": asdict(summary), "comparison": asdict(rep)}
    _write_csv(out / "comparison.csv", COMPARISON_COLUMNS, rows)
    write_json(out / "comparison.json", doc)
    for r in rows:
        print(f"{r[0]:>15}: energy {r[1] / 1e3:9.1f} kJ  reduction {r[2]:6.2f}%  tpj x{r[4]:.3f}  "
              f"p99 {r[5]:.2f}s  lost {r[9]}")
    if enforce_slo and not all(r[-1] for r in rows):
        return EXIT_SLO
    return EXIT_OK


# ---------------------------------------------------------------- sweep

def rollout(model: PerfModel, power: PowerModel, tp: int, batch: int, freq: float, prompt: int, gen: int,
            tokens_per_block: int = 64, stall: float = 0.0) -> dict:
    """Closed-form run of ``batch`` identical queries admitted together.

    The prefill stall yields token 1; each later token costs one decode
    iteration whose KV footprint grows by one token per query.
    """
    i = np.arange(1, gen)
    kv = batch * -(-(i + prompt) // tokens_per_block)
    dt = 1.0 / np.asarray(model.predict_ips(tp, batch, kv, freq), dtype=float)
    watts = tp * np.asarray(power.predict_power(freq, kv / tp), dtype=float)
    first_kv = batch * -(-prompt // tokens_per_block)
    e_stall = stall * engine_power(power, tp, freq, first_kv)
    e2e = stall + float(dt.sum())
    energy = e_stall + float((watts * dt).sum())
    tokens = batch * gen
    return {"tps": tokens / e2e, "e2e": e2e, "tbt": float(dt.mean()) if dt.size else 0.0,
            "power": energy / e2e, "tpj": tokens / energy}


def sweep_matrices(model, power, tp: int, batches: Sequence[int], freqs: Sequence[float], prompt: int,
                   gen: int, tokens_per_block: int = 64, stall=None) -> dict:
    """Metric name -> (len(batches), len(freqs)) matrix."""
    mats = {m: np.empty((len(batches), len(freqs))) for m in SWEEP_METRICS}
    for a, b in enumerate(batches):
        for c, f in enumerate(freqs):
            r = rollout(model, power, tp, b, float(f), prompt, gen, tokens_per_block,
                        stall(b * prompt, f) if stall else 0.0)
            for m in SWEEP_METRICS:
                mats[m][a, c] = r[m]
    return mats


def cmd_sweep(spec: RunSpec) -> int:
    out = _prepare_out(spec)
    model, power = build_models(spec)
    sw = spec.sweep
    freqs = build_domain().levels()
    pf = build_sim_config(spec).prefill
    mats = sweep_matrices(model, power, sw.tp, sw.batches, freqs, sw.prompt_tokens, sw.gen_tokens,
                          spec.sim.tokens_per_block, pf.stall if pf.enabled else None)
    header = ["batch"] + [str(int(f)) for f in freqs]
    for m, mat in mats.items():
        _write_csv(out / f"sweep_{m}.csv", header,
                   ([b] + [float(v) for v in row] for b, row in zip(sw.batches, mat)))
    tpj = mats["tpj"]
    best = freqs[np.argmax(tpj, axis=1)]
    write_json(out / "sweep.json", {"seed": spec.seed, "tp": sw.tp, "batches": list(sw.batches),
                                    "freqs_mhz": [float(f) for f in freqs],
                                    "tpj_best_mhz": [float(f) for f in best]})
    print(f"tp={sw.tp}: TPJ-optimal frequency {best.min():.0f}-{best.max():.0f} MHz across batches")
    return EXIT_OK


# ---------------------------------------------------------------- models

def _dataset(spec: RunSpec):
    ds_spec = spec.dataset
    if ds_spec.ips_file:
        try:
            return load_dataset(ds_spec.ips_file, ds_spec.power_file)
        except OSError as exc:
            raise ConfigError(f"{exc.filename}: {exc.strerror}") from None
    model, power = build_models(spec)
    freqs = build_domain().levels()[::max(1, ds_spec.freq_step // int(build_domain().step_mhz))]
    return sample_dataset(model, ds_spec.tps, ds_spec.batches, ds_spec.kvs, freqs, ds_spec.noise, spec.seed, power)


def cmd_calibrate(spec: RunSpec) -> int:
    out = _prepare_out(spec)
    ds = _dataset(spec)
    grid = fit_from_dataset(ds)
    grid.save(out / "model.csv")
    save_dataset(ds, out / "dataset_ips.csv", out / "dataset_power.csv" if ds.power is not None else None)
    m = validate(grid, ds)
    write_json(out / "calibration.json", {"seed": spec.seed, "rows": len(ds), "train_metrics": asdict(m)})
    print(f"fitted {len(ds)} rows -> {out / 'model.csv'} (training R2={m.r2:.4f} MAE={m.mae:.4f})")
    return EXIT_OK


def cmd_validate_model(spec: RunSpec, model_path: Optional[str] = None) -> int:
    out = _prepare_out(spec)
    ds = _dataset(spec)
    if model_path:
        try:
            model = GridPerfModel.load(model_path)
        except OSError as exc:
            raise ConfigError(f"{model_path}: {exc.strerror}") from None
        holdout, n_train = ds, None
    else:
        train, holdout = ds.split(spec.dataset.split, spec.seed)
        model, n_train = fit_from_dataset(train), len(train)
    m = validate(model, holdout)
    write_json(out / "validation.json", {"seed": spec.seed, "split": spec.dataset.split, "train_rows": n_train,
                                         "holdout_rows": len(holdout), "metrics": asdict(m)})
    print(f"R2={m.r2:.6f} MAPE={m.mape:.4f}% MAE={m.mae:.6f} IPS (holdout rows={len(holdout)})")
    return EXIT_OK


# ---------------------------------------------------------------- traces

def cmd_gen_trace(spec: RunSpec, input_path: Optional[str] = None, shape=None) -> int:
    out = _prepare_out(spec)
    t = spec.trace
    if input_path:
        try:
            queries = load_trace(input_path, t.max_tokens)
        except OSError as exc:
            raise ConfigError(f"{input_path}: {exc.strerror}") from None
        if shape is not None:
            queries = shape_trace(queries, shape[0], shape[1], t.bin_seconds)
        if t.scale_peak is not None:
            queries = scale_trace(queries, t.scale_peak, t.bin_seconds)
    else:
        if shape is not None:
            spec = spec.model_copy(update={"trace": t.model_copy(update={"shape": tuple(shape)})})
        queries = build_trace(spec, predictions=False)
    write_trace(queries, out / "trace.csv")
    peak = peak_rps(queries, t.bin_seconds)
    write_json(out / "trace.json", {"seed": spec.seed, "queries": len(queries), "bin_seconds": t.bin_seconds,
                                    "peak_rps": peak, "duration": queries[-1].arrival_time if queries else 0.0})
    print(f"{len(queries)} queries, peak {peak:.3f} RPS over {t.bin_seconds:g}s bins -> {out / 'trace.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML or JSON run specification")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--scale-peak", type=float, metavar="RPS", help="rescale the trace to this peak RPS")
    common.add_argument("--split", type=float, metavar="FRAC", help="train fraction for model fitting")

    p = argparse.ArgumentParser(prog="throttlesim", description="LLM serving energy/SLO simulator")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("simulate", "compare"):
        s = sub.add_parser(name, parents=[common])
        s.add_argument("--enforce-slo", action="store_true", help="exit 2 if the SLO is not met")
        if name == "simulate":
            s.add_argument("--baseline", action="store_true", help="max frequency, KV-only admission")
            s.add_argument("--no-autoscale", action="store_true")
            s.add_argument("--no-throttle", action="store_true")
    sub.add_parser("sweep", parents=[common])
    sub.add_parser("calibrate", parents=[common])
    v = sub.add_parser("validate-model", parents=[common])
    v.add_argument("--model", metavar="PATH", help="evaluate this fitted table on the whole dataset")
    g = sub.add_parser("gen-trace", parents=[common])
    g.add_argument("--input", metavar="PATH", help="rescale an existing trace instead of synthesizing")
    g.add_argument("--shape", type=float, nargs=2, metavar=("LOW", "HIGH"), help="map binned RPS onto [LOW, HIGH]")
    return p


def _overrides(args) -> dict:
    o = {}
    if args.seed is not None:
        o["seed"] = args.seed
    if args.out is not None:
        o["out"] = args.out
    if args.scale_peak is not None:
        o["trace.scale_peak"] = args.scale_peak
    if args.split is not None:
        o["dataset.split"] = args.split
    if getattr(args, "baseline", False):
        o["sim.baseline"] = True
        o["sim.throttle"] = False
    if getattr(args, "no_autoscale", False):
        o["sim.autoscale"] = False
    if getattr(args, "no_throttle", False):
        o["sim.throttle"] = False
    return o


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=os.environ.get(LOG_ENV, "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        spec = load_spec(args.config, _overrides(args))
        cmd = args.command
        if cmd == "simulate":
            return cmd_simulate(spec, args.enforce_slo)
        if cmd == "compare":
            return cmd_compare(spec, args.enforce_slo)
        if cmd == "sweep":
            return cmd_sweep(spec)
        if cmd == "calibrate":
            return cmd_calibrate(spec)
        if cmd == "validate-model":
            return cmd_validate_model(spec, args.model)
        return cmd_gen_trace(spec, args.input, args.shape)
    except (ConfigError, TraceError, TraceMismatchError, ModelContractError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
