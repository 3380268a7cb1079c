"""Monte Carlo harness: repeated synthesis, estimation and DoA error metrics."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .baselines import cbf_spectrum, exhaustive_search, music_spectrum, mvdr_spectrum
from .core import NumericalBreakdown, SblProblem, SolverOptions, find_local_peaks, solve_many
from .model import (
    ConfigError,
    Dictionary,
    SceneSpec,
    UncertaintyModel,
    build_dictionary,
    frequency_dictionaries,
    grid_indices,
    synthesize_frequencies,
)

SBL_METHODS = ("sbl", "sbl-a", "sbl-x", "sbl-mc", "sbl-cc")
SPECTRAL_METHODS = ("cbf", "mvdr", "music")
METHODS = SBL_METHODS + SPECTRAL_METHODS + ("exhaustive",)
SWEEP_PARAMETERS = ("snr_dB", "phi_e", "gamma_e", "delta0")

# uncertainty defaults per method name; the user may override either value
_UNCERTAINTY_DEFAULTS = {
    "sbl": (0.0, 0.0),
    "sbl-a": (0.03, 0.0),
    "sbl-x": (0.0, 0.75),
    "sbl-mc": (0.0, 0.0),
    "sbl-cc": (0.0, 0.0),
}
_METHOD_PARAMS = {
    **{m: ("phi_e", "gamma_e", "exponent_b", "epsilon", "max_iterations") for m in SBL_METHODS},
    "cbf": (),
    "mvdr": ("diagonal_load",),
    "music": (),
    "exhaustive": ("budget",),
}


def _unknown_method(name) -> ConfigError:
    return ConfigError("methods", f"unknown method {name!r}; valid methods: {', '.join(METHODS)}")


@dataclass(frozen=True)
class MethodSpec:
    """An estimator name plus its parameters.

    ``label`` defaults to the name and keys the rows of the metrics table.
    """

    name: str
    params: dict = field(default_factory=dict)
    label: Optional[str] = None

    def __post_init__(self):
        name = str(self.name).lower()
        if name not in METHODS:
            raise _unknown_method(self.name)
        params = dict(self.params)
        for key in params:
            if key not in _METHOD_PARAMS[name]:
                allowed = ", ".join(_METHOD_PARAMS[name]) or "none"
                raise ConfigError(f"methods.{name}.{key}", f"unknown parameter; allowed: {allowed}")
        object.__setattr__(self, "name", name)
        object.__setattr__(self, "params", params)
        object.__setattr__(self, "label", self.label or name)
        if name in SBL_METHODS:
            try:
                self.uncertainty()
                self.solver_options(1)
            except ValueError as exc:
                raise ConfigError(f"methods.{name}", str(exc)) from None
        if name == "mvdr" and params.get("diagonal_load", 0) < 0:
            raise ConfigError("methods.mvdr.diagonal_load", "must be >= 0")

    @property
    def is_sbl(self) -> bool:
        return self.name in SBL_METHODS

    @property
    def multi_dictionary(self) -> bool:
        return self.name in ("sbl-mc", "sbl-cc")

    def uncertainty(self, **override) -> UncertaintyModel:
        phi, gam = _UNCERTAINTY_DEFAULTS[self.name]
        values = {"phi_e": self.params.get("phi_e", phi), "gamma_e": self.params.get("gamma_e", gam)}
        values.update(override)
        return UncertaintyModel(**values)

    def solver_options(self, k: int) -> SolverOptions:
        kw = {key: self.params[key] for key in ("exponent_b", "epsilon", "max_iterations")
              if key in self.params}
        return SolverOptions(k_sources=k, **kw)

    def to_dict(self) -> dict:
        out = {"name": self.name, **self.params}
        if self.label != self.name:
            out["label"] = self.label
        return out

    @classmethod
    def from_value(cls, value) -> "MethodSpec":
        if isinstance(value, MethodSpec):
            return value
        if isinstance(value, str):
            return cls(value)
        if isinstance(value, dict):
            if "name" not in value:
                raise ConfigError("methods", "each method needs a 'name'")
            params = {k: v for k, v in value.items() if k not in ("name", "label")}
            return cls(value["name"], params, value.get("label"))
        raise ConfigError("methods", f"cannot interpret {value!r} as a method")


@dataclass(frozen=True)
class ArraySpec:
    """Uniform linear array and angular grid."""

    sensors: int = 20
    spacing_wavelengths: float = 0.5
    grid_start_deg: float = -90.0
    grid_stop_deg: float = 90.0
    grid_step_deg: float = 1.0

    def __post_init__(self):
        if int(self.sensors) != self.sensors or self.sensors < 2:
            raise ConfigError("array.sensors", "must be an integer >= 2")
        if not self.spacing_wavelengths > 0:
            raise ConfigError("array.spacing_wavelengths", "must be > 0")
        if not self.grid_step_deg > 0:
            raise ConfigError("array.grid_step_deg", "must be > 0")
        if not self.grid_stop_deg >= self.grid_start_deg:
            raise ConfigError("array.grid_stop_deg", "must be >= grid_start_deg")

    def dictionary(self) -> Dictionary:
        return build_dictionary(self.grid_start_deg, self.grid_stop_deg, self.grid_step_deg,
                                int(self.sensors), self.spacing_wavelengths)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("sensors", "spacing_wavelengths", "grid_start_deg", "grid_stop_deg", "grid_step_deg")}


@dataclass(frozen=True)
class ExperimentConfig:
    scene: SceneSpec
    methods: tuple[MethodSpec, ...]
    runs: int = 500
    seed: int = 0
    sweep: Optional[tuple[str, tuple[float, ...]]] = None
    delta0: float = 0.0
    array: ArraySpec = ArraySpec()
    batch_size: int = 100
    near_tolerance_deg: float = 2.0

    def __post_init__(self):
        methods = tuple(MethodSpec.from_value(m) for m in self.methods)
        if not methods:
            raise ConfigError("methods", "at least one method is required")
        labels = [m.label for m in methods]
        if len(set(labels)) != len(labels):
            raise ConfigError("methods", "method labels must be unique")
        if int(self.runs) != self.runs or self.runs < 1:
            raise ConfigError("runs", f"must be an integer >= 1, got {self.runs!r}")
        if int(self.seed) != self.seed or self.seed < 0:
            raise ConfigError("seed", "must be a non-negative integer")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ConfigError("batch_size", "must be an integer >= 1")
        if not self.delta0 >= 0:
            raise ConfigError("delta0", "must be >= 0")
        sweep = self.sweep
        if sweep is not None:
            param, values = sweep
            if param not in SWEEP_PARAMETERS:
                raise ConfigError("sweep.parameter", f"must be one of {', '.join(SWEEP_PARAMETERS)}")
            values = tuple(float(v) for v in values)
            if not values or not all(math.isfinite(v) for v in values):
                raise ConfigError("sweep.values", "must be a non-empty list of finite numbers")
            if param != "snr_dB" and min(values) < 0:
                raise ConfigError("sweep.values", f"{param} must be >= 0")
            sweep = (param, values)
        object.__setattr__(self, "methods", methods)
        object.__setattr__(self, "runs", int(self.runs))
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(self, "sweep", sweep)
        if isinstance(self.array, dict):
            object.__setattr__(self, "array", ArraySpec(**self.array))
        grid_indices(self.scene, self.array.dictionary())
        if len(self.scene.sources) >= self.array.sensors:
            raise ConfigError("sources", "need fewer sources than sensors")

    def sweep_points(self) -> list[tuple[Optional[str], Optional[float]]]:
        if self.sweep is None:
            return [(None, None)]
        return [(self.sweep[0], v) for v in self.sweep[1]]

    def to_dict(self) -> dict:
        return {
            "scene": self.scene.to_dict(),
            "array": self.array.to_dict(),
            "methods": [m.to_dict() for m in self.methods],
            "runs": self.runs,
            "seed": self.seed,
            "sweep": None if self.sweep is None else
            {"parameter": self.sweep[0], "values": list(self.sweep[1])},
            "delta0": self.delta0,
            "batch_size": self.batch_size,
            "near_tolerance_deg": self.near_tolerance_deg,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config", "expected a JSON object")
        known = {"scene", "array", "methods", "runs", "seed", "sweep", "delta0",
                 "batch_size", "near_tolerance_deg"}
        for key in d:
            if key not in known:
                raise ConfigError(key, "unknown configuration key")
        if "scene" not in d:
            raise ConfigError("scene", "missing")
        array = d.get("array") or {}
        if not isinstance(array, dict):
            raise ConfigError("array", "expected an object")
        for key in array:
            if key not in ArraySpec.__dataclass_fields__:
                raise ConfigError(f"array.{key}", "unknown array key")
        sweep = d.get("sweep")
        if sweep is not None:
            if not isinstance(sweep, dict) or "parameter" not in sweep or "values" not in sweep:
                raise ConfigError("sweep", "expected {parameter, values}")
            sweep = (sweep["parameter"], tuple(sweep["values"]))
        methods = d.get("methods", ["sbl"])
        if not isinstance(methods, (list, tuple)):
            raise ConfigError("methods", "expected a list")
        for key in ("runs", "seed", "delta0", "batch_size", "near_tolerance_deg"):
            if key in d and (isinstance(d[key], bool) or not isinstance(d[key], (int, float))):
                raise ConfigError(key, f"must be a number, got {d[key]!r}")
        return cls(scene=SceneSpec.from_dict(d["scene"]), methods=tuple(methods),
                   runs=d.get("runs", 500), seed=d.get("seed", 0), sweep=sweep,
                   delta0=float(d.get("delta0", 0.0)), array=ArraySpec(**array),
                   batch_size=d.get("batch_size", 100),
                   near_tolerance_deg=float(d.get("near_tolerance_deg", 2.0)))

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))


@dataclass
class MethodMetrics:
    """Metrics for one (method, sweep value) cell.

    ``weakest_deg`` and ``second_deg`` hold the per-run estimates (NaN for
    failed runs); ``histogram`` counts top-K peaks per grid angle.
    """

    method: str
    sweep_parameter: Optional[str]
    sweep_value: Optional[float]
    runs: int
    failures: int
    short_runs: int
    rmse_weakest_deg: float
    percentile_band: tuple[float, float]
    near_fraction: float
    aliased_mass_fraction: float
    histogram: np.ndarray
    weakest_deg: np.ndarray
    second_deg: np.ndarray

    @property
    def band_width(self) -> float:
        return self.percentile_band[1] - self.percentile_band[0]

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "sweep_parameter": self.sweep_parameter,
            "sweep_value": self.sweep_value,
            "runs": self.runs,
            "failures": self.failures,
            "short_runs": self.short_runs,
            "rmse_weakest_deg": _json_float(self.rmse_weakest_deg),
            "percentile_band": [_json_float(v) for v in self.percentile_band],
            "near_fraction": _json_float(self.near_fraction),
            "aliased_mass_fraction": _json_float(self.aliased_mass_fraction),
            "histogram": self.histogram.tolist(),
        }


def _json_float(v: float):
    return float(v) if math.isfinite(v) else None


@dataclass
class MetricsTable:
    angles: np.ndarray
    rows: list[MethodMetrics]

    def get(self, method: str, sweep_value: Optional[float] = None) -> MethodMetrics:
        for row in self.rows:
            if row.method == method and (sweep_value is None or row.sweep_value == sweep_value):
                return row
        raise KeyError((method, sweep_value))

    def to_dict(self) -> dict:
        return {"angles_deg": self.angles.tolist(), "rows": [r.to_dict() for r in self.rows]}


def rmse_weakest(estimates_deg, truth_deg: float) -> float:
    """Root mean squared error of the weakest-source estimates, in degrees."""
    est = np.asarray(estimates_deg, dtype=float).ravel()
    if est.size == 0:
        raise ValueError("need at least one estimate")
    return float(np.sqrt(np.mean((est - truth_deg) ** 2)))


def percentile_band(samples, lo: float = 1.0, hi: float = 99.0) -> tuple[float, float]:
    """Nearest-rank percentiles (lo, hi) of ``samples``."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    if x.size == 0:
        raise ValueError("percentile_band needs at least one sample")
    if not 0 <= lo < hi <= 100:
        raise ValueError("need 0 <= lo < hi <= 100")

    def rank(p):
        # nearest rank: ceil(p/100 * n), clamped to [1, n]
        return min(max(math.ceil(p / 100.0 * x.size - 1e-9), 1), x.size) - 1

    return float(x[rank(lo)]), float(x[rank(hi)])


def aliased_indices(scene: SceneSpec, dictionary: Dictionary, frequencies: Sequence[float] = None) -> np.ndarray:
    """Grid indices of grating-lobe images of the true sources.

    For every frequency ratio f the element spacing in wavelengths is
    ``d * f``; images sit at sin(theta) = sin(theta_true) + n / (d f) for
    nonzero integers n while inside the visible region. True-source indices
    are excluded.
    """
    freqs = scene.frequencies if frequencies is None else frequencies
    true = set(grid_indices(scene, dictionary).tolist())
    lo, hi = dictionary.angles[0], dictionary.angles[-1]
    out = set()
    for f in freqs:
        d = dictionary.spacing_wavelengths * f
        for theta in scene.angles:
            s = math.sin(math.radians(theta))
            n_max = int(math.floor(2 * d)) + 1
            for n in range(-n_max, n_max + 1):
                if n == 0:
                    continue
                u = s + n / d
                if -1 <= u <= 1:
                    a = math.degrees(math.asin(u))
                    if lo <= a <= hi:
                        idx = dictionary.nearest_index(a)
                        if idx not in true:
                            out.add(idx)
    return np.array(sorted(out), dtype=int)


def _peak_summary(values: np.ndarray, k: int) -> list[int]:
    """Top-k peak indices ordered by decreasing value."""
    peaks = find_local_peaks(values, k)
    return sorted(peaks, key=lambda i: -values[i])


def _sweep_inputs(config: ExperimentConfig, param, value):
    scene, delta0, override = config.scene, config.delta0, {}
    if param == "snr_dB":
        scene = scene.replace(snr_dB=value)
    elif param == "delta0":
        delta0 = value
    elif param in ("phi_e", "gamma_e"):
        override[param] = value
    return scene, delta0, override


def _estimate_batch(method: MethodSpec, dicts, snaps_batch, k, override) -> list:
    """Per-run (peak indices, peak values) or an exception."""
    if method.is_sbl:
        unc = method.uncertainty(**override)
        if method.multi_dictionary:
            problems = [SblProblem.shared(dicts, s, unc) for s in snaps_batch]
        else:
            problems = [SblProblem.single(dicts[0], s[0], unc) for s in snaps_batch]
        results = solve_many(problems, method.solver_options(k),
                             "mc" if method.name == "sbl-mc" else "cc")
        out = []
        for res in results:
            if isinstance(res, Exception):
                out.append(res)
            else:
                out.append((list(res.support), res.gamma[list(res.support)]))
        return out

    out = []
    for snaps in snaps_batch:
        S = snaps[0].sample_covariance
        try:
            if method.name == "exhaustive":
                Y = snaps[0].data
                support = list(exhaustive_search(Y, dicts[0], k, **method.params))
                # least-squares source powers rank the support entries
                X = np.linalg.pinv(dicts[0].matrix[:, support]) @ Y
                power = np.mean(np.abs(X) ** 2, axis=1)
                order = np.argsort(-power, kind="stable")
                out.append(([support[i] for i in order], power[order]))
                continue
            if method.name == "cbf":
                spec = cbf_spectrum(S, dicts[0])
            elif method.name == "mvdr":
                spec = mvdr_spectrum(S, dicts[0], method.params.get("diagonal_load"))
            else:
                spec = music_spectrum(S, dicts[0], k)
            peaks = _peak_summary(spec.values, k)
            out.append((peaks, spec.values[peaks]))
        except (NumericalBreakdown, np.linalg.LinAlgError) as exc:
            out.append(exc)
    return out


def run_experiment(config: ExperimentConfig) -> MetricsTable:
    """Run every method over ``config.runs`` draws at each sweep point.

    Run r draws its data from generators keyed by (seed, r), so every method
    and every sweep value sees the same underlying random numbers.
    """
    base = config.array.dictionary()
    k = len(config.scene.sources)
    angles = base.angles
    rows = []
    for param, value in config.sweep_points():
        scene, delta0, override = _sweep_inputs(config, param, value)
        dicts = frequency_dictionaries(base, scene.frequencies)
        truth_idx = grid_indices(scene, base)
        weakest_truth = scene.angles[scene.weakest]
        order = np.argsort([-p for _, p in scene.sources], kind="stable")
        second_truth = scene.angles[order[1]] if k > 1 else scene.angles[order[0]]
        alias_idx = aliased_indices(scene, base)

        per_method = {m.label: [] for m in config.methods}
        for start in range(0, config.runs, config.batch_size):
            runs = range(start, min(start + config.batch_size, config.runs))
            snaps_batch = [synthesize_frequencies(scene, dicts, config.seed, run=r, delta0=delta0)
                           for r in runs]
            for method in config.methods:
                per_method[method.label].extend(_estimate_batch(method, dicts, snaps_batch, k, override))

        for method in config.methods:
            rows.append(_summarize(method.label, param, value, per_method[method.label], angles, k,
                                   weakest_truth, second_truth, truth_idx, alias_idx,
                                   config.near_tolerance_deg))
    return MetricsTable(angles, rows)


def _summarize(label, param, value, outcomes, angles, k, weakest_truth, second_truth,
               truth_idx, alias_idx, tol) -> MethodMetrics:
    R = len(outcomes)
    hist = np.zeros(angles.size, dtype=int)
    weakest = np.full(R, np.nan)
    second = np.full(R, np.nan)
    failures = short = 0
    for r, outcome in enumerate(outcomes):
        if isinstance(outcome, Exception):
            failures += 1
            continue
        idx, vals = outcome
        if len(idx) == 0:
            failures += 1
            continue
        if len(idx) < k:
            short += 1
        np.add.at(hist, idx, 1)
        by_value = [idx[i] for i in np.argsort(-np.asarray(vals), kind="stable")]
        # the weakest of the top-K peaks, or the worst available one
        weakest[r] = angles[by_value[-1]]
        second[r] = angles[by_value[min(1, len(by_value) - 1)]]
    ok = ~np.isnan(weakest)
    if ok.any():
        rmse = rmse_weakest(weakest[ok], weakest_truth)
        band = percentile_band(second[ok], 1, 99)
        near = float(np.mean(np.abs(second[ok] - second_truth) <= tol + 1e-9))
    else:
        rmse, band, near = math.nan, (math.nan, math.nan), math.nan
    true_mass = hist[truth_idx].sum()
    alias_mass = hist[alias_idx].sum() if alias_idx.size else 0
    alias_frac = alias_mass / true_mass if true_mass else (math.inf if alias_mass else 0.0)
    return MethodMetrics(label, param, value, R, failures, short, rmse, band, near,
                         float(alias_frac), hist, weakest, second)
