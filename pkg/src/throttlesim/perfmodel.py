"""Iteration-throughput (IPS) and power models.

Any object with ``predict_ips(tp, batch, kv, freq)`` and a ``monotone_in_freq``
attribute satisfies the performance-model contract used by the scheduler and
throttle. Two implementations ship here: an analytic surrogate and a
grid-interpolation model fitted from profiling data.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import List, Mapping, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy.interpolate import LinearNDInterpolator, NearestNDInterpolator, RegularGridInterpolator

GRID_FORMAT = "throttlesim-grid"
GRID_VERSION = 1


class ModelContractError(RuntimeError):
    pass


def load_defaults() -> dict:
    with resources.files("throttlesim").joinpath("defaults.json").open() as fh:
        return json.load(fh)


@dataclass(frozen=True)
class FrequencyDomain:
    min_mhz: int = 210
    max_mhz: int = 1410
    step_mhz: int = 15

    def __post_init__(self):
        if self.min_mhz >= self.max_mhz:
            raise ValueError("min_mhz must be below max_mhz")
        if self.step_mhz <= 0 or (self.max_mhz - self.min_mhz) % self.step_mhz:
            raise ValueError("(max - min) must be a positive multiple of step")

    def levels(self) -> np.ndarray:
        return np.arange(self.min_mhz, self.max_mhz + 1, self.step_mhz)

    def __contains__(self, f) -> bool:
        return self.min_mhz <= f <= self.max_mhz and (f - self.min_mhz) % self.step_mhz == 0


@dataclass(frozen=True)
class EngineProfile:
    tp: int
    max_load_rps: float
    e2e_slo: float
    kv_capacity: int
    spawn_time: float = 20.0

    def __post_init__(self):
        if min(self.tp, self.max_load_rps, self.e2e_slo, self.kv_capacity, self.spawn_time) <= 0:
            raise ValueError(f"engine profile fields must be positive: {self}")


def check_profiles(profiles: Sequence[EngineProfile]) -> List[EngineProfile]:
    ordered = sorted(profiles, key=lambda p: p.tp)
    if not ordered:
        raise ValueError("need at least one engine profile")
    tps = [p.tp for p in ordered]
    if len(set(tps)) != len(tps):
        raise ValueError("engine profiles must have distinct tp")
    loads = [p.max_load_rps for p in ordered]
    if any(b <= a for a, b in zip(loads, loads[1:])):
        raise ValueError("max_load_rps must increase strictly with tp")
    return ordered


def default_profiles() -> List[EngineProfile]:
    return check_profiles([EngineProfile(**p) for p in load_defaults()["profiles"]])


class PerfModel(Protocol):
    monotone_in_freq: bool

    def predict_ips(self, tp, batch, kv, freq): ...


class PowerModel(Protocol):
    idle_power: float

    def predict_power(self, freq, kv): ...


@dataclass(frozen=True)
class SurrogateParams:
    amplitude: Mapping[int, float]
    alpha: float = 0.2
    gamma: float = 0.006
    kappa: float = 0.0006
    f_max: float = 1410.0

    def __post_init__(self):
        if not self.amplitude or any(a <= 0 for a in self.amplitude.values()):
            raise ValueError("amplitudes must be positive")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if self.gamma < 0 or self.kappa < 0:
            raise ValueError("gamma and kappa must be >= 0")


class SurrogatePerfModel:
    """IPS = A(tp) * (f/f_max)**alpha / (1 + gamma*batch + kappa*kv).

    TBT (1/IPS) is affine in both batch and kv at fixed frequency.
    """

    monotone_in_freq = True

    def __init__(self, params: SurrogateParams):
        self.params = params
        self._amp = {int(k): float(v) for k, v in params.amplitude.items()}

    def predict_ips(self, tp, batch, kv, freq):
        p = self.params
        try:
            a = self._amp[int(tp)]
        except KeyError:
            raise ModelContractError(f"no surrogate amplitude for tp={tp}") from None
        return a * (np.asarray(freq, dtype=float) / p.f_max) ** p.alpha / (
            1.0 + p.gamma * np.asarray(batch, dtype=float) + p.kappa * np.asarray(kv, dtype=float))


def reference_surrogate(params: Optional[SurrogateParams] = None) -> SurrogatePerfModel:
    if params is None:
        d = load_defaults()["surrogate"]
        params = SurrogateParams(amplitude={int(k): v for k, v in d["amplitude"].items()},
                                 alpha=d["alpha"], gamma=d["gamma"], kappa=d["kappa"], f_max=d["f_max"])
    return SurrogatePerfModel(params)


@dataclass(frozen=True)
class PowerParams:
    idle: float = 100.0
    c1: float = 140.0
    c2: float = 0.1
    f_max: float = 1410.0

    def __post_init__(self):
        if min(self.idle, self.c1, self.c2) < 0:
            raise ValueError("power coefficients must be >= 0")


class ReferencePowerModel:
    """Per-GPU watts: idle + c1*(f/f_max)**3 + c2*(f/f_max)*kv."""

    def __init__(self, params: PowerParams):
        self.params = params
        self.idle_power = params.idle

    def predict_power(self, freq, kv):
        p = self.params
        x = np.asarray(freq, dtype=float) / p.f_max
        return p.idle + p.c1 * x ** 3 + p.c2 * x * np.asarray(kv, dtype=float)


def reference_power(params: Optional[PowerParams] = None) -> ReferencePowerModel:
    if params is None:
        params = PowerParams(**load_defaults()["power"])
    return ReferencePowerModel(params)


def engine_power(power: PowerModel, tp: int, freq, kv) -> float:
    """Whole-engine watts; KV blocks are spread evenly across the tp GPUs."""
    return float(tp * power.predict_power(freq, np.asarray(kv, dtype=float) / tp))


# ---------------------------------------------------------------- datasets

@dataclass
class ProfileDataset:
    """Profiling rows. ``ips`` is an (n, 5) array of tp, batch, kv, freq, ips;
    ``power`` an optional (m, 3) array of freq, kv, watts."""

    ips: np.ndarray
    power: Optional[np.ndarray] = None

    def __post_init__(self):
        self.ips = np.asarray(self.ips, dtype=float).reshape(-1, 5)
        if self.power is not None:
            self.power = np.asarray(self.power, dtype=float).reshape(-1, 3)
        keys = {tuple(r[:4]) for r in self.ips}
        if len(keys) != len(self.ips):
            raise ValueError("duplicate (tp, batch, kv, freq) keys in dataset")
        if self.ips.size and (self.ips[:, 0] < 1).any():
            raise ValueError("tp must be >= 1")
        if self.ips.size and (self.ips[:, 1:4] < 0).any():
            raise ValueError("batch, kv and freq must be >= 0")

    def __len__(self):
        return len(self.ips)

    def split(self, train_frac: float, seed: int = 0) -> Tuple["ProfileDataset", "ProfileDataset"]:
        if not 0 < train_frac < 1:
            raise ValueError("train fraction must lie in (0, 1)")
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(self.ips))
        cut = int(round(train_frac * len(order)))
        return ProfileDataset(self.ips[order[:cut]], self.power), ProfileDataset(self.ips[order[cut:]], self.power)


def save_dataset(ds: ProfileDataset, ips_path, power_path=None) -> None:
    with Path(ips_path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tp", "batch", "kv_blocks", "freq_mhz", "ips"])
        for tp, b, kv, f, ips in ds.ips:
            w.writerow([int(tp), int(b), int(kv), int(f), repr(float(ips))])
    if power_path is not None and ds.power is not None:
        with Path(power_path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["freq_mhz", "kv_blocks", "watts"])
            for f, kv, watts in ds.power:
                w.writerow([int(f), int(kv), repr(float(watts))])


def _read_rows(path, ncols: int) -> np.ndarray:
    rows = []
    header_seen = False
    with Path(path).open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].startswith("#"):
                continue
            try:
                vals = [float(c) for c in row]
            except ValueError:
                # the first data-bearing line may be a column header
                if not header_seen and not rows:
                    header_seen = True
                    continue
                raise ValueError(f"{path}:{lineno}: malformed row {row!r}") from None
            if len(vals) != ncols:
                raise ValueError(f"{path}:{lineno}: expected {ncols} columns, got {len(vals)}")
            rows.append(vals)
    return np.array(rows, dtype=float).reshape(-1, ncols)


def load_dataset(ips_path, power_path=None) -> ProfileDataset:
    power = _read_rows(power_path, 3) if power_path is not None else None
    return ProfileDataset(_read_rows(ips_path, 5), power)


def sample_dataset(model: PerfModel, tps: Sequence[int], batches: Sequence[int], kvs: Sequence[int],
                   freqs: Sequence[int], noise: float = 0.0, seed: int = 0,
                   power: Optional[PowerModel] = None) -> ProfileDataset:
    """Full (batch, kv, freq) grid per tp with multiplicative Gaussian noise."""
    rng = np.random.default_rng(seed)
    tp_g, b_g, kv_g, f_g = np.meshgrid(tps, batches, kvs, freqs, indexing="ij")
    cols = [a.ravel().astype(float) for a in (tp_g, b_g, kv_g, f_g)]
    ips = np.empty_like(cols[0])
    for tp in tps:
        m = cols[0] == tp
        ips[m] = model.predict_ips(tp, cols[1][m], cols[2][m], cols[3][m])
    ips *= 1.0 + noise * rng.standard_normal(ips.size)
    pw = None
    if power is not None:
        f2, kv2 = np.meshgrid(freqs, kvs, indexing="ij")
        watts = power.predict_power(f2.ravel(), kv2.ravel()) * (1.0 + noise * rng.standard_normal(f2.size))
        pw = np.column_stack([f2.ravel(), kv2.ravel(), watts])
    return ProfileDataset(np.column_stack(cols + [ips]), pw)


# ---------------------------------------------------------------- grid model

class GridPerfModel:
    """Piecewise-multilinear interpolation over a (batch, kv, freq) grid per tp.

    Queries outside the profiled hull are clamped to the nearest hull point.
    """

    def __init__(self, tables: Mapping[int, Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]):
        self.tables = {int(tp): tuple(np.asarray(a, dtype=float) for a in t) for tp, t in tables.items()}
        self._interp = {}
        mono = True
        for tp, (b, kv, f, values) in self.tables.items():
            if values.shape != (b.size, kv.size, f.size):
                raise ValueError(f"tp={tp}: value table shape {values.shape} does not match axes")
            if (values <= 0).any():
                raise ModelContractError(f"tp={tp}: table holds nonpositive IPS")
            self._interp[tp] = RegularGridInterpolator((b, kv, f), values, method="linear")
            mono &= bool((np.diff(values, axis=2) >= 0).all())
        self.monotone_in_freq = mono

    def predict_ips(self, tp, batch, kv, freq):
        try:
            b_ax, kv_ax, f_ax, _ = self.tables[int(tp)]
        except KeyError:
            raise ModelContractError(f"no profiling table for tp={tp}") from None
        batch, kv, freq = np.broadcast_arrays(np.asarray(batch, dtype=float), np.asarray(kv, dtype=float),
                                              np.asarray(freq, dtype=float))
        pts = np.stack([np.clip(batch, b_ax[0], b_ax[-1]), np.clip(kv, kv_ax[0], kv_ax[-1]),
                        np.clip(freq, f_ax[0], f_ax[-1])], axis=-1)
        out = self._interp[int(tp)](pts.reshape(-1, 3)).reshape(batch.shape)
        return out if out.ndim else float(out)

    def save(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            fh.write(f"# {GRID_FORMAT} v{GRID_VERSION}\n")
            w = csv.writer(fh)
            w.writerow(["tp", "batch", "kv_blocks", "freq_mhz", "ips"])
            for tp in sorted(self.tables):
                b, kv, f, values = self.tables[tp]
                for i, j, k in np.ndindex(values.shape):
                    w.writerow([tp, repr(float(b[i])), repr(float(kv[j])), repr(float(f[k])),
                                repr(float(values[i, j, k]))])

    @classmethod
    def load(cls, path) -> "GridPerfModel":
        with Path(path).open() as fh:
            header = fh.readline().strip()
        expected = f"# {GRID_FORMAT} v{GRID_VERSION}"
        if header != expected:
            raise ValueError(f"{path}: unsupported model file header {header!r}, expected {expected!r}")
        rows = _read_rows(path, 5)
        tables = {}
        for tp in np.unique(rows[:, 0]):
            sub = rows[rows[:, 0] == tp]
            axes = [np.unique(sub[:, c]) for c in (1, 2, 3)]
            values = np.full(tuple(a.size for a in axes), np.nan)
            idx = [np.searchsorted(a, sub[:, c]) for a, c in zip(axes, (1, 2, 3))]
            values[tuple(idx)] = sub[:, 4]
            if np.isnan(values).any():
                raise ValueError(f"{path}: incomplete grid for tp={int(tp)}")
            tables[int(tp)] = (*axes, values)
        return cls(tables)


def fit_from_dataset(ds: ProfileDataset) -> GridPerfModel:
    """Build a grid model; missing grid cells are filled by scattered linear
    interpolation (nearest value outside the convex hull)."""
    if len(ds) == 0:
        raise ValueError("empty dataset")
    tables = {}
    names = ("batch", "kv", "freq")
    for tp in np.unique(ds.ips[:, 0]):
        sub = ds.ips[ds.ips[:, 0] == tp]
        axes = [np.unique(sub[:, c]) for c in (1, 2, 3)]
        for name, ax in zip(names, axes):
            if ax.size < 2:
                raise ValueError(f"tp={int(tp)}: degenerate axis {name!r} (need >= 2 distinct values)")
        values = np.full(tuple(a.size for a in axes), np.nan)
        idx = tuple(np.searchsorted(a, sub[:, c]) for a, c in zip(axes, (1, 2, 3)))
        values[idx] = sub[:, 4]
        missing = np.isnan(values)
        if missing.any():
            # fill in index space so the axes carry equal weight
            known = np.argwhere(~missing).astype(float)
            holes = np.argwhere(missing).astype(float)
            fill = LinearNDInterpolator(known, values[~missing])(holes)
            bad = np.isnan(fill)
            if bad.any():
                fill[bad] = NearestNDInterpolator(known, values[~missing])(holes[bad])
            values[missing] = fill
        tables[int(tp)] = (*axes, values)
    return GridPerfModel(tables)


class GridPowerModel:
    """Bilinear (freq, kv) power table, clamped at the edges."""

    def __init__(self, freqs, kvs, watts, idle_power: Optional[float] = None):
        self.freqs = np.asarray(freqs, dtype=float)
        self.kvs = np.asarray(kvs, dtype=float)
        self.watts = np.asarray(watts, dtype=float)
        self._interp = RegularGridInterpolator((self.freqs, self.kvs), self.watts)
        self.idle_power = float(self.watts.min() if idle_power is None else idle_power)

    def predict_power(self, freq, kv):
        freq, kv = np.broadcast_arrays(np.asarray(freq, dtype=float), np.asarray(kv, dtype=float))
        pts = np.stack([np.clip(freq, self.freqs[0], self.freqs[-1]), np.clip(kv, self.kvs[0], self.kvs[-1])], -1)
        out = self._interp(pts.reshape(-1, 2)).reshape(freq.shape)
        return out if out.ndim else float(out)


def fit_power(ds: ProfileDataset) -> GridPowerModel:
    if ds.power is None or not len(ds.power):
        raise ValueError("dataset carries no power rows")
    freqs, kvs = np.unique(ds.power[:, 0]), np.unique(ds.power[:, 1])
    watts = np.full((freqs.size, kvs.size), np.nan)
    watts[np.searchsorted(freqs, ds.power[:, 0]), np.searchsorted(kvs, ds.power[:, 1])] = ds.power[:, 2]
    if np.isnan(watts).any():
        raise ValueError("power rows do not form a complete (freq, kv) grid")
    # enforce the monotone contract against measurement noise
    watts = np.maximum.accumulate(np.maximum.accumulate(watts, axis=0), axis=1)
    return GridPowerModel(freqs, kvs, watts)


# ---------------------------------------------------------------- validation

@dataclass(frozen=True)
class ModelMetrics:
    r2: float
    mape: float
    mae: float


def validate(model: PerfModel, holdout: ProfileDataset) -> ModelMetrics:
    if len(holdout) == 0:
        raise ValueError("empty holdout set")
    actual = holdout.ips[:, 4]
    pred = np.empty_like(actual)
    for tp in np.unique(holdout.ips[:, 0]):
        m = holdout.ips[:, 0] == tp
        pred[m] = model.predict_ips(tp, holdout.ips[m, 1], holdout.ips[m, 2], holdout.ips[m, 3])
    err = pred - actual
    ss_tot = float(((actual - actual.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise ValueError("R^2 undefined: holdout targets have zero variance")
    r2 = 1.0 - float((err ** 2).sum()) / ss_tot
    return ModelMetrics(r2=r2, mape=float(np.mean(np.abs(err) / np.abs(actual)) * 100.0),
                        mae=float(np.mean(np.abs(err))))
