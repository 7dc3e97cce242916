"""Nadaraya-Watson regression of the hindsight LDES state of charge.

The input at hour ``t`` interleaves the last ``W`` (normalised netload, SoC
fraction) pairs. Training scenarios contribute ``xi_{s,t}`` built from their
own netload and hindsight SoC; online queries use realised history.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .scenarios import NormStats, ScenarioSeries, compute_netload, netload_stats

KERNELS = ("gaussian", "epanechnikov", "box")

# (int v^2 K(v) dv, int K(v)^2 dv) of the unit 1-D kernels.
KERNEL_MOMENTS = {
    "gaussian": (1.0, 1.0 / (2.0 * math.sqrt(math.pi))),
    "epanechnikov": (0.2, 0.6),
    "box": (1.0 / 3.0, 0.5),
}

DEFAULT_SIGMA_MULTIPLIERS = tuple(2.0 ** np.arange(-3.0, 3.5, 0.5))


@dataclass(frozen=True)
class KernelHyperParams:
    window: int
    sigma: float
    kernel: str = "gaussian"

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}")

    @property
    def input_dim(self) -> int:
        return 2 * self.window


@dataclass
class RegressionDataset:
    """Training scenarios as (S, T) arrays; SoC as a fraction of capacity."""

    netload: np.ndarray
    soc: np.ndarray
    soc_max: float
    stats: NormStats
    scenario_ids: tuple[str, ...] = ()

    def __post_init__(self):
        self.netload = np.atleast_2d(np.asarray(self.netload, dtype=float))
        self.soc = np.atleast_2d(np.asarray(self.soc, dtype=float))
        if self.netload.shape != self.soc.shape:
            raise ValueError("netload and soc must have the same shape")
        if np.any(self.soc < -1e-9) or np.any(self.soc > 1 + 1e-9):
            raise ValueError("SoC fractions must lie in [0, 1]")
        self.soc = np.clip(self.soc, 0.0, 1.0)

    @property
    def S(self) -> int:
        return self.soc.shape[0]

    @property
    def T(self) -> int:
        return self.soc.shape[1]

    def subset(self, idx) -> "RegressionDataset":
        idx = np.asarray(idx)
        ids = tuple(self.scenario_ids[i] for i in idx) if self.scenario_ids else ()
        return RegressionDataset(self.netload[idx], self.soc[idx], self.soc_max, self.stats, ids)

    def with_tail(self, start: int, netload, soc_frac) -> "RegressionDataset":
        """Copy with hours ``start:`` replaced (used after a fault regeneration)."""
        nl, sc = self.netload.copy(), self.soc.copy()
        nl[:, start:] = netload
        sc[:, start:] = np.clip(soc_frac, 0.0, 1.0)
        return RegressionDataset(nl, sc, self.soc_max, self.stats, self.scenario_ids)


def build_dataset(scenarios: list[ScenarioSeries], soc_paths, soc_max: float,
                  stats: NormStats | None = None) -> RegressionDataset:
    """Pair each scenario's normalised netload with its hindsight SoC path (kg)."""
    stats = stats or netload_stats(scenarios)
    nl = np.stack([compute_netload(s, stats).values for s in scenarios])
    soc = np.stack([np.asarray(p, dtype=float) for p in soc_paths]) / soc_max
    return RegressionDataset(nl, soc, soc_max, stats, tuple(s.scenario_id for s in scenarios))


def build_input_vector(history, t: int, W: int) -> np.ndarray:
    """Input for hour ``t`` (counted from 1) from ``history[k]`` = pair of hour ``k+1``.

    Uses the pairs of hours ``t-W .. t-1``; missing early hours repeat the
    earliest available pair.
    """
    hist = np.asarray(history, dtype=float).reshape(-1, 2)
    if t < 2 or len(hist) == 0:
        raise ValueError("need t >= 2 and a nonempty history")
    avail = hist[: t - 1]
    if len(avail) == 0:
        raise ValueError("history holds no pair before hour t")
    idx = np.arange(t - 1 - W, t - 1)
    return avail[np.clip(idx, 0, None)].ravel()


def scenario_inputs(ds: RegressionDataset, t: int, W: int) -> np.ndarray:
    """``(S, 2W)`` training inputs for 0-based target hour ``t >= 1``."""
    idx = np.clip(np.arange(t - W, t), 0, None)
    pairs = np.stack([ds.netload[:, idx], ds.soc[:, idx]], axis=-1)
    return pairs.reshape(ds.S, 2 * W)


def _kernel_logits(sqdist, params: KernelHyperParams):
    """Return (log-weights up to a constant, raw kernel values)."""
    u = np.asarray(sqdist, dtype=float) / (params.window * params.sigma**2)
    if params.kernel == "gaussian":
        return -u, np.exp(-u)
    if params.kernel == "epanechnikov":
        raw = np.clip(1.0 - u, 0.0, None)
    else:
        raw = (u <= 1.0).astype(float)
    with np.errstate(divide="ignore"):
        return np.log(raw), raw


@dataclass(frozen=True)
class WeightVector:
    weights: np.ndarray
    fallback: bool = False


def compute_weights(xi, inputs, params: KernelHyperParams) -> WeightVector:
    """Normalised kernel weights of query ``xi`` against ``(S, 2W)`` inputs.

    Gaussian weights are computed from shifted exponents so they stay exact
    when every raw kernel value underflows; compact kernels with no support
    fall back to uniform weights (``fallback`` is set in both cases).
    """
    xi = np.asarray(xi, dtype=float)
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    if xi.shape[-1] != params.input_dim or inputs.shape[1] != params.input_dim:
        raise ValueError(f"inputs must have length {params.input_dim}")
    sq = np.sum((inputs - xi) ** 2, axis=1)
    logits, raw = _kernel_logits(sq, params)
    underflow = not np.any(raw > 0)
    if np.all(np.isneginf(logits)):
        return WeightVector(np.full(len(sq), 1.0 / len(sq)), True)
    w = np.exp(logits - np.max(logits))
    w /= w.sum()
    return WeightVector(w, underflow)


def predict_reference(weights, soc_column, soc_max: float = 1.0) -> float:
    """Weighted average of the scenarios' SoC at one hour, scaled by ``soc_max``."""
    w = weights.weights if isinstance(weights, WeightVector) else np.asarray(weights, float)
    col = np.asarray(soc_column, dtype=float)
    val = float(w @ col)
    return float(np.clip(val, col.min(), col.max()) * soc_max)


def average_reference(ds: RegressionDataset, t: int) -> float:
    return predict_reference(np.full(ds.S, 1.0 / ds.S), ds.soc[:, t], ds.soc_max)


# --------------------------------------------------------------------------- training

def _window_sqdist(ds: RegressionDataset, W: int) -> np.ndarray:
    """``(T-1, S, S)`` squared input distances for target hours 1..T-1."""
    nl, sc = ds.netload, ds.soc
    per_hour = (nl[:, None, :] - nl[None, :, :]) ** 2 + (sc[:, None, :] - sc[None, :, :]) ** 2
    per_hour = np.moveaxis(per_hour, -1, 0)  # (T, S, S)
    csum = np.concatenate([np.zeros((1,) + per_hour.shape[1:]), np.cumsum(per_hour, axis=0)])
    t = np.arange(1, ds.T)
    lo = np.clip(t - W, 0, None)
    pad = np.clip(W - t, 0, None).astype(float)
    return csum[t] - csum[lo] + pad[:, None, None] * per_hour[0][None]


def _loo_prepare(sqdist) -> tuple[np.ndarray, np.ndarray]:
    """Mask self-distances; also return each row's nearest-neighbour distance."""
    sq = np.array(sqdist, dtype=float)
    S = sq.shape[-1]
    sq[..., np.arange(S), np.arange(S)] = np.inf
    return sq, np.min(sq, axis=-1, keepdims=True)


def _loo_predictions(prepared, soc_targets, params: KernelHyperParams) -> np.ndarray:
    """Leave-one-scenario-out predictions ``(H, S)`` from :func:`_loo_prepare` output."""
    sq, nearest = prepared
    scale = 1.0 / (params.window * params.sigma**2)
    if params.kernel == "gaussian":
        w = np.exp((sq - nearest) * -scale)
    elif params.kernel == "epanechnikov":
        w = np.clip(1.0 - sq * scale, 0.0, None)
    else:
        w = (sq * scale <= 1.0).astype(float)
    tot = w.sum(axis=-1, keepdims=True)
    S = sq.shape[-1]
    uniform = (1.0 - np.eye(S)) / (S - 1)
    w = np.where(tot > 0, w / np.where(tot > 0, tot, 1.0), uniform)
    return np.einsum("tvs,ts->tv", w, soc_targets)


def loo_mse(ds: RegressionDataset, params: KernelHyperParams, prepared=None) -> float:
    if ds.S < 2:
        raise ValueError("leave-one-out validation needs S >= 2")
    if prepared is None:
        prepared = _loo_prepare(_window_sqdist(ds, params.window))
    targets = ds.soc[:, 1:].T
    pred = _loo_predictions(prepared, targets, params)
    return float(np.mean((pred - targets) ** 2))


@dataclass
class MseReport:
    grid: dict[int, dict[float, float]]
    window: int
    sigma: float
    kernel: str
    lipschitz: float
    residual_var: float
    log_density: float
    sigma_seed: dict[int, float]
    warnings: list[str] = field(default_factory=list)

    @property
    def best_mse(self) -> float:
        return self.grid[self.window][self.sigma]

    def mse_by_window(self) -> dict[int, float]:
        return {w: min(row.values()) for w, row in self.grid.items()}

    def to_json(self) -> dict:
        return {
            "window": self.window, "sigma": self.sigma, "kernel": self.kernel,
            "best_mse": self.best_mse,
            "grid": [{"window": w, "sigma": s, "mse": m}
                     for w, row in self.grid.items() for s, m in row.items()],
            "lipschitz": self.lipschitz, "residual_var": self.residual_var,
            "log_density": self.log_density,
            "sigma_seed": {str(k): v for k, v in self.sigma_seed.items()},
            "warnings": list(self.warnings),
        }


def _sample_pairs(ds: RegressionDataset, W: int, rng, n_hours: int = 64):
    hours = np.unique(rng.integers(1, ds.T, size=min(n_hours, ds.T - 1)))
    xs = np.stack([scenario_inputs(ds, t, W) for t in hours])       # (H, S, 2W)
    ys = ds.soc[:, hours].T                                         # (H, S)
    return xs, ys


def estimate_constants(ds: RegressionDataset, W: int, kernel: str = "gaussian",
                       seed: int = 0) -> tuple[float, float, float, float]:
    """Estimate (Lambda, nu^2, log pi_hat, pilot sigma) for window ``W``.

    Lambda is the 95th percentile of pairwise slopes ``|dh| / |dxi|``
    between scenarios at the same hour; nu^2 the LOO residual variance of a
    pilot fit; pi_hat the mean Gaussian KDE density at the training inputs.
    """
    rng = np.random.default_rng(seed)
    xs, ys = _sample_pairs(ds, W, rng)
    S = ds.S
    iu = np.triu_indices(S, 1)
    dx = np.sqrt(np.sum((xs[:, :, None, :] - xs[:, None, :, :]) ** 2, axis=-1))[:, iu[0], iu[1]]
    dy = np.abs(ys[:, :, None] - ys[:, None, :])[:, iu[0], iu[1]]
    ok = dx > 1e-9
    lam = float(np.quantile(dy[ok] / dx[ok], 0.95)) if np.any(ok) else 0.0
    med = float(np.median(dx[ok])) if np.any(ok) else 1.0
    pilot = max(med / math.sqrt(W), 1e-6)
    params = KernelHyperParams(W, pilot, kernel)
    sq = np.sum((xs[:, :, None, :] - xs[:, None, :, :]) ** 2, axis=-1)
    pred = _loo_predictions(_loo_prepare(sq), ys, params)
    nu2 = float(np.var(pred - ys))
    iota = 2 * W
    hp2 = pilot**2
    logk = -0.5 * iota * math.log(2 * math.pi * hp2) - sq / (2 * hp2)
    logk[:, np.arange(S), np.arange(S)] = -np.inf
    log_pi = float(logsumexp(logsumexp(logk, axis=2) - math.log(S - 1)) - math.log(logk.shape[0] * S))
    return lam, nu2, log_pi, pilot


def closed_form_sigma(W: int, n: int, lipschitz: float, residual_var: float,
                      log_density: float, kernel: str = "gaussian") -> float:
    """Minimiser of the bias/variance expression over sigma (``n`` = sample count)."""
    mu2, rk = KERNEL_MOMENTS[kernel]
    if not (lipschitz > 0 and residual_var > 0):
        return float("nan")
    iota = 2 * W
    log_s = (math.log(iota) + math.log(residual_var) + math.log(rk) - math.log(n)
             - 2 * math.log(lipschitz) - 2 * math.log(mu2) - log_density) / (iota + 4)
    return float(math.exp(log_s))


def mse_components(params: KernelHyperParams, n: int, lipschitz: float, residual_var: float,
                   density: float) -> tuple[float, float]:
    """(bias^2, variance) terms of the kernel-regression MSE expansion."""
    if not (lipschitz > 0 and residual_var > 0 and density > 0):
        raise ValueError("estimates must be positive")
    mu2, rk = KERNEL_MOMENTS[params.kernel]
    bias2 = params.sigma**4 / 4.0 * mu2**2 * lipschitz**2
    var = residual_var * rk / (n * params.sigma**params.input_dim * density)
    return bias2, var


def train(ds: RegressionDataset, windows, sigmas=None, *, kernel: str = "gaussian",
          sigma_multipliers=DEFAULT_SIGMA_MULTIPLIERS, seed: int = 0
          ) -> tuple[KernelHyperParams, MseReport]:
    """Grid-search (W, sigma) by leave-one-scenario-out MSE.

    ``sigmas`` given explicitly are used as-is for every window; otherwise
    each window gets ``seed_sigma * sigma_multipliers`` with the seed from
    :func:`closed_form_sigma`.
    """
    windows = [int(w) for w in windows]
    if ds.S < 2:
        raise ValueError("training needs at least 2 scenarios")
    if not windows or (sigmas is not None and len(sigmas) == 0):
        raise ValueError("candidate lists must be nonempty")
    notes: list[str] = []
    degenerate = bool(np.all(ds.netload == ds.netload[0]) and np.all(ds.soc == ds.soc[0]))
    if degenerate:
        msg = "all training scenarios are identical; choosing the smallest bandwidth"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        notes.append(msg)

    grid: dict[int, dict[float, float]] = {}
    seeds: dict[int, float] = {}
    lam = nu2 = log_pi = float("nan")
    for W in windows:
        if not degenerate:
            lam, nu2, log_pi, pilot = estimate_constants(ds, W, kernel, seed)
            s0 = closed_form_sigma(W, ds.S, lam, nu2, log_pi, kernel)
            seeds[W] = s0 if np.isfinite(s0) and s0 > 0 else pilot
        else:
            seeds[W] = 1.0
        cand = sorted(float(s) for s in sigmas) if sigmas is not None \
            else [float(seeds[W] * m) for m in sigma_multipliers]
        prep = _loo_prepare(_window_sqdist(ds, W))
        grid[W] = {s: loo_mse(ds, KernelHyperParams(W, s, kernel), prep) for s in cand}

    if degenerate:
        W = windows[0]
        best = (W, min(grid[W]))
    else:
        best = min(((w, s) for w in grid for s in grid[w]), key=lambda ws: (grid[ws[0]][ws[1]], ws[0], ws[1]))
    params = KernelHyperParams(best[0], best[1], kernel)
    if not degenerate:
        lam, nu2, log_pi, _ = estimate_constants(ds, params.window, kernel, seed)
    report = MseReport(grid, params.window, params.sigma, kernel, lam, nu2, log_pi, seeds, notes)
    return params, report


# --------------------------------------------------------------------------- online use

@dataclass
class KernelReference:
    """Online SoC reference: dataset + tuned hyperparameters."""

    dataset: RegressionDataset
    params: KernelHyperParams
    underflow_hours: list[int] = field(default_factory=list)

    def weights_at(self, t: int, netload_hist, soc_hist) -> WeightVector:
        """Weights for 0-based hour ``t >= 1`` from realised history (hours < t)."""
        W = self.params.window
        idx = np.clip(np.arange(t - W, t), 0, None)
        xi = np.stack([np.asarray(netload_hist)[idx], np.asarray(soc_hist)[idx]], axis=-1).ravel()
        wv = compute_weights(xi, scenario_inputs(self.dataset, t, W), self.params)
        if wv.fallback:
            self.underflow_hours.append(t)
        return wv

    def predict(self, t: int, netload_hist, soc_hist, target_hour: int | None = None) -> float:
        """Reference (kg) for hour ``target_hour`` (default ``t``) using weights at ``t``."""
        wv = self.weights_at(t, netload_hist, soc_hist)
        th = t if target_hour is None else min(target_hour, self.dataset.T - 1)
        return predict_reference(wv, self.dataset.soc[:, th], self.dataset.soc_max)


def smooth_map_ensemble(S: int, T: int, seed: int = 0, lag: int = 6, noise: float = 0.02,
                        regime_persistence: float = 0.995) -> RegressionDataset:
    """Ensemble whose SoC is a known smooth function of the last ``lag`` netload hours.

    Netload is a regime-switching AR(1) series; the SoC fraction is a logistic
    map of a weighted sum of the trailing ``lag`` netload values plus small
    i.i.d. noise, so windows shorter than ``lag`` miss information and longer
    windows only add input dimensions.
    """
    rng = np.random.default_rng(seed)
    nl = np.zeros((S, T))
    state = rng.integers(0, 2, size=S)
    level = np.where(state, 0.8, -0.8)
    x = rng.standard_normal(S)
    for t in range(T):
        switch = rng.random(S) > regime_persistence
        state = np.where(switch, 1 - state, state)
        level = np.where(state, 0.8, -0.8)
        x = 0.7 * x + math.sqrt(1 - 0.49) * rng.standard_normal(S)
        nl[:, t] = level + 0.6 * x
    nl = (nl - nl.mean()) / nl.std()
    weights = np.linspace(1.0, 2.0, lag)
    weights /= weights.sum()
    soc = np.zeros((S, T))
    for t in range(T):
        idx = np.clip(np.arange(t - lag + 1, t + 1) - 1, 0, None)
        z = nl[:, idx] @ weights
        soc[:, t] = 1.0 / (1.0 + np.exp(-2.0 * z))
    soc = np.clip(0.05 + 0.9 * soc + noise * rng.standard_normal((S, T)), 0.0, 1.0)
    return RegressionDataset(nl, soc, 1.0, NormStats(0.0, 1.0), tuple(f"m{i:03d}" for i in range(S)))
