"""Load/renewable scenario ensembles: CSV ingestion, a seasonal generator,
netload normalisation and perturbed forecasts."""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.signal import lfilter
from scipy.stats import norm

HOURS_PER_YEAR = 8760
CSV_COLUMNS = ("t", "load_kw", "renewable_kw")
OPTIONAL_COLUMNS = ("wind_kw", "solar_kw")
# Season centres (hour of year): mid-January, mid-April, mid-July, mid-October.
SEASON_CENTRES = np.array([14, 104, 195, 287]) * 24.0


class ScenarioParseError(ValueError):
    """Malformed scenario file; the message names the row and/or column."""


class DegenerateDataError(ValueError):
    """Netload has zero variance and cannot be normalised."""


def derive_rng(root: int, label: str, index: int = 0) -> np.random.Generator:
    """Independent stream for (root seed, purpose label, index)."""
    return np.random.default_rng(np.random.SeedSequence([int(root), zlib.crc32(label.encode()), int(index)]))


@dataclass(frozen=True)
class ScenarioSeries:
    scenario_id: str
    load: np.ndarray
    renewable: np.ndarray
    wind: np.ndarray | None = None
    solar: np.ndarray | None = None

    def __post_init__(self):
        for name in ("load", "renewable", "wind", "solar"):
            v = getattr(self, name)
            if v is None:
                continue
            arr = np.asarray(v, dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
            if arr.ndim != 1:
                raise ValueError(f"{name} must be one-dimensional")
            if np.any(~np.isfinite(arr)) or np.any(arr < 0):
                bad = int(np.flatnonzero(~(arr >= 0))[0])
                raise ValueError(f"{name} has a negative or non-finite value at index {bad}")
        for name in ("renewable", "wind", "solar"):
            v = getattr(self, name)
            if v is not None and len(v) != len(self.load):
                raise ValueError(f"{name} length {len(v)} != load length {len(self.load)}")

    @property
    def T(self) -> int:
        return len(self.load)

    @property
    def netload(self) -> np.ndarray:
        return self.load - self.renewable

    def window(self, start: int, stop: int, scenario_id: str | None = None) -> "ScenarioSeries":
        cut = lambda v: None if v is None else v[start:stop]
        return ScenarioSeries(scenario_id or self.scenario_id, self.load[start:stop],
                              self.renewable[start:stop], cut(self.wind), cut(self.solar))


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float


@dataclass(frozen=True)
class NetloadSeries:
    values: np.ndarray
    stats: NormStats

    def denormalize(self, values=None) -> np.ndarray:
        v = self.values if values is None else np.asarray(values, dtype=float)
        return v * self.stats.std + self.stats.mean


def compute_netload(series: ScenarioSeries, stats: NormStats | None = None) -> NetloadSeries:
    """z-score the raw netload ``L - R``; reuse ``stats`` when given (test time)."""
    raw = series.netload
    if stats is None:
        stats = netload_stats([series])
    return NetloadSeries((raw - stats.mean) / stats.std, stats)


def netload_stats(training: list[ScenarioSeries]) -> NormStats:
    """Pooled mean and standard deviation of raw netload over training scenarios."""
    raw = np.concatenate([s.netload for s in training])
    std = float(np.std(raw))
    if not std > 0.0:
        raise DegenerateDataError("netload has zero variance")
    return NormStats(float(np.mean(raw)), std)


# --------------------------------------------------------------------------- CSV

def load_timeseries(path, T: int | None = None, scenario_id: str | None = None) -> ScenarioSeries:
    """Read ``t,load_kw,renewable_kw[,wind_kw,solar_kw]`` hourly rows."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ScenarioParseError(f"{path}: empty file") from None
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise ScenarioParseError(f"{path}: missing column(s) {', '.join(missing)}")
        cols = [c for c in CSV_COLUMNS + OPTIONAL_COLUMNS if c in header]
        pos = {c: header.index(c) for c in cols}
        data = {c: [] for c in cols}
        for row_no, row in enumerate(reader, start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            for c in cols:
                try:
                    v = float(row[pos[c]])
                except (IndexError, ValueError):
                    raise ScenarioParseError(f"{path}: row {row_no}, column {c}: not a number") from None
                if c != "t" and not (v >= 0.0 and np.isfinite(v)):
                    raise ScenarioParseError(f"{path}: row {row_no}, column {c}: negative or non-finite value {v}")
                data[c].append(v)
    n = len(data["t"])
    if T is not None and n != T:
        raise ScenarioParseError(f"{path}: expected {T} rows, found {n}")
    get = lambda c: np.array(data[c]) if c in data else None
    return ScenarioSeries(scenario_id or path.stem, get("load_kw"), get("renewable_kw"),
                          get("wind_kw"), get("solar_kw"))


def write_timeseries(series: ScenarioSeries, path) -> Path:
    path = Path(path)
    cols = list(CSV_COLUMNS)
    extra = [(c, getattr(series, c[:-3])) for c in OPTIONAL_COLUMNS if getattr(series, c[:-3]) is not None]
    cols += [c for c, _ in extra]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for t in range(series.T):
            row = [str(t), repr(float(series.load[t])), repr(float(series.renewable[t]))]
            row += [repr(float(v[t])) for _, v in extra]
            w.writerow(row)
    return path


# --------------------------------------------------------------------------- generator

@dataclass(frozen=True)
class SyntheticGenConfig:
    """Seasonal load and renewable generator.

    Load is ``load_peak * (base + seasonal*cos(annual) + diurnal*cos(daily))``
    with winter peaking at hour 0 (1 January) and the daily peak at 18:00.
    Renewables use per-season capacity factors (winter, spring, summer,
    autumn) interpolated periodically. ``noise_level`` scales every random
    component (AR(1) noise and per-scenario variation); 0 makes the
    generator deterministic and all scenarios identical.
    """

    seed: int = 0
    horizon: int = HOURS_PER_YEAR
    seasonal_amplitude: float = 0.12
    diurnal_amplitude: float = 0.12
    noise_level: float = 0.1
    base_load: float = 0.5
    ar_coef: float = 0.9
    level_spread: float = 0.05         # std of per-scenario load/wind/solar level factors
    wind_cf: tuple[float, float, float, float] = (0.30, 0.40, 0.42, 0.36)
    solar_cf: tuple[float, float, float, float] = (0.03, 0.18, 0.28, 0.10)
    scarcity_start: int = 0            # 1-based start hour; 0 disables the window
    scarcity_length: int = 0
    scarcity_amplitude: float = 20.0   # kW added to load inside the window
    scarcity_wind_factor: float = 0.3  # wind multiplier inside the window
    scarcity_jitter: int = 48          # max shift (h) of the window per scenario
    wind_capacity: float = 100.0
    solar_capacity: float = 100.0
    load_peak: float = 150.0
    start_hour: int = 0                # hour of year of the first sample

    def __post_init__(self):
        for name in ("seasonal_amplitude", "diurnal_amplitude", "noise_level", "level_spread"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.horizon < 1:
            raise ValueError("horizon must be positive")
        if self.scarcity_length:
            lo, hi = self.scarcity_start, self.scarcity_start + self.scarcity_length - 1
            if lo < 1 or hi > self.horizon:
                raise ValueError("scarcity window must lie inside [1, horizon]")

    @property
    def has_scarcity(self) -> bool:
        return self.scarcity_length > 0


def _seasonal(cf, hours) -> np.ndarray:
    xp = np.concatenate([SEASON_CENTRES - HOURS_PER_YEAR, SEASON_CENTRES, SEASON_CENTRES + HOURS_PER_YEAR])
    fp = np.tile(np.asarray(cf, dtype=float), 3)
    return np.interp(np.mod(hours, HOURS_PER_YEAR), xp, fp)


def _ar1(rng, n, phi, scale) -> np.ndarray:
    innov = rng.standard_normal(n) * scale * np.sqrt(1.0 - phi**2)
    innov[0] = rng.standard_normal() * scale
    return lfilter([1.0], [1.0, -phi], innov)


def scarcity_window(gen: SyntheticGenConfig, index: int) -> tuple[int, int] | None:
    """0-based [start, stop) of the scarcity window for scenario ``index``."""
    if not gen.has_scarcity:
        return None
    start = gen.scarcity_start - 1
    if gen.noise_level > 0 and gen.scarcity_jitter > 0:
        shift = int(derive_rng(gen.seed, "scarcity", index).integers(-gen.scarcity_jitter, gen.scarcity_jitter + 1))
        start = int(np.clip(start + shift, 0, gen.horizon - gen.scarcity_length))
    return start, start + gen.scarcity_length


def synthesize_one(gen: SyntheticGenConfig, index: int) -> ScenarioSeries:
    T = gen.horizon
    k = np.arange(T, dtype=float)
    hoy = k + gen.start_hour
    hod = np.mod(hoy, 24.0)
    annual = np.cos(2.0 * np.pi * hoy / HOURS_PER_YEAR)
    daily = np.cos(2.0 * np.pi * (hod - 18.0) / 24.0)
    daylight = np.clip(np.sin(np.pi * (hod - 6.0) / 12.0), 0.0, None)
    daylight /= 12.0 * (2.0 / np.pi) / 24.0  # unit daily mean

    rng = derive_rng(gen.seed, "scenario", index)
    nz = gen.noise_level
    level = 1.0 + gen.level_spread * rng.standard_normal(3) if nz > 0 else np.ones(3)
    level = np.clip(level, 0.2, None)
    load_noise = _ar1(rng, T, gen.ar_coef, nz) if nz > 0 else np.zeros(T)
    wind_noise = _ar1(rng, T, gen.ar_coef, 3.0 * nz) if nz > 0 else np.zeros(T)
    cloud = _ar1(rng, T, gen.ar_coef, 2.0 * nz) if nz > 0 else np.zeros(T)

    load = gen.load_peak * level[0] * (gen.base_load + gen.seasonal_amplitude * annual
                                       + gen.diurnal_amplitude * daily + load_noise)
    wind_cf = np.clip(_seasonal(gen.wind_cf, hoy) * level[1] * (1.0 + wind_noise), 0.0, 1.0)
    solar_cf = np.clip(_seasonal(gen.solar_cf, hoy) * level[2] * daylight * (1.0 + cloud), 0.0, 1.0)
    wind = gen.wind_capacity * wind_cf
    solar = gen.solar_capacity * solar_cf

    win = scarcity_window(gen, index)
    if win is not None:
        a, b = win
        load[a:b] += gen.scarcity_amplitude
        wind[a:b] *= gen.scarcity_wind_factor
    load = np.clip(load, 0.0, None)
    return ScenarioSeries(f"s{index:03d}", load, wind + solar, wind, solar)


def synthesize_scenarios(gen: SyntheticGenConfig, S: int) -> list[ScenarioSeries]:
    """``S`` scenarios, each from its own stream derived from ``gen.seed``."""
    if S < 1:
        raise ValueError("need S >= 1")
    return [synthesize_one(gen, i) for i in range(S)]


def apply_capacity_fault(series: ScenarioSeries, asset: str, start: int, stop: int,
                         multiplier: float) -> ScenarioSeries:
    """Scale wind or solar output over hours ``[start, stop)``."""
    if asset not in ("wind", "solar"):
        raise ValueError("only wind and solar faults act on the scenario data")
    if series.wind is None or series.solar is None:
        raise ValueError("scenario lacks separate wind/solar columns")
    wind, solar = series.wind.copy(), series.solar.copy()
    target = wind if asset == "wind" else solar
    target[max(start, 0):max(stop, 0)] *= multiplier
    return replace(series, renewable=wind + solar, wind=wind, solar=solar)


# --------------------------------------------------------------------------- forecasts

@dataclass(frozen=True)
class ForecastSeries:
    load: np.ndarray
    renewable: np.ndarray
    mape: float
    start: int = 0

    @property
    def window(self) -> int:
        return len(self.load)


def lognormal_sigma(mape: float) -> float:
    """sigma such that E|exp(sigma z - sigma^2/2) - 1| = mape."""
    if mape == 0:
        return 0.0
    return float(2.0 * norm.ppf((1.0 + mape / 2.0) / 2.0))


def perturb_forecast(truth: ScenarioSeries, mape: float, window: int | None = None,
                     seed: int = 0, start: int = 0) -> ForecastSeries:
    """Multiplicative log-normal forecast errors with mean absolute relative error ``mape``.

    The standard-normal draws depend only on ``seed`` so different MAPE levels
    share the same underlying errors.
    """
    if not 0.0 <= mape < 1.0:
        raise ValueError("mape must lie in [0, 1)")
    window = truth.T - start if window is None else window
    stop = min(start + window, truth.T)
    L, R = truth.load[start:stop], truth.renewable[start:stop]
    if mape == 0:
        return ForecastSeries(L.copy(), R.copy(), 0.0, start)
    sig = lognormal_sigma(mape)
    rng = derive_rng(seed, "forecast", 0)
    z = rng.standard_normal((2, truth.T))[:, start:stop]
    mult = np.exp(sig * z - 0.5 * sig**2)
    return ForecastSeries(np.clip(L * mult[0], 0.0, None), np.clip(R * mult[1], 0.0, None), mape, start)


def realized_mape(forecast, truth) -> float:
    truth = np.asarray(truth, dtype=float)
    mask = truth > 0
    return float(np.mean(np.abs(np.asarray(forecast)[mask] - truth[mask]) / truth[mask]))
