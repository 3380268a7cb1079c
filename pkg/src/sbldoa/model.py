"""Array model: dictionaries, scenes and synthetic snapshot generation."""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class ConfigError(ValueError):
    """Invalid configuration value; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class AmplitudeModel(str, enum.Enum):
    CONSTANT_MAGNITUDE_RANDOM_PHASE = "ConstantMagnitudeRandomPhase"
    COMPLEX_GAUSSIAN = "ComplexGaussian"


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


def steering_vector(theta_deg: float, sensors: int, spacing_wavelengths: float) -> np.ndarray:
    """Plane-wave response of a uniform linear array.

    Element ``n`` is ``exp(j 2 pi n (d/lambda) sin(theta))``, so element 0 is 1.
    """
    if sensors < 1:
        raise ValueError("sensors must be >= 1")
    n = np.arange(sensors)
    phase = 2.0 * np.pi * spacing_wavelengths * np.sin(np.deg2rad(theta_deg))
    return np.exp(1j * phase * n)


def steering_matrix(angles_deg: np.ndarray, sensors: int, spacing_wavelengths: float) -> np.ndarray:
    n = np.arange(sensors)[:, None]
    phase = 2.0 * np.pi * spacing_wavelengths * np.sin(np.deg2rad(np.asarray(angles_deg, dtype=float)))
    return np.exp(1j * n * phase[None, :])


@dataclass(frozen=True)
class Dictionary:
    """Sensing matrix (sensors x grid angles) with the grid it was built on."""

    matrix: np.ndarray
    angles: np.ndarray
    spacing_wavelengths: float

    def __post_init__(self):
        matrix = np.array(self.matrix, dtype=complex)
        angles = np.array(self.angles, dtype=float)
        if matrix.ndim != 2 or matrix.shape[1] != angles.size:
            raise ValueError("matrix must be N x M with M == len(angles)")
        if angles.size > 1 and np.any(np.diff(angles) <= 0):
            raise ValueError("angles must be strictly increasing")
        object.__setattr__(self, "matrix", _frozen(matrix))
        object.__setattr__(self, "angles", _frozen(angles))

    @property
    def sensors(self) -> int:
        return self.matrix.shape[0]

    @property
    def size(self) -> int:
        return self.matrix.shape[1]

    def nearest_index(self, angle_deg: float) -> int:
        return int(np.argmin(np.abs(self.angles - angle_deg)))

    def gram(self) -> np.ndarray:
        return self.matrix.conj().T @ self.matrix


def build_dictionary(grid_start_deg: float = -90.0, grid_stop_deg: float = 90.0,
                     grid_step_deg: float = 1.0, sensors: int = 20,
                     spacing_wavelengths: float = 0.5) -> Dictionary:
    if grid_step_deg <= 0:
        raise ValueError("grid_step_deg must be > 0")
    if grid_stop_deg < grid_start_deg:
        raise ValueError("grid_stop_deg must be >= grid_start_deg")
    # small slack so that e.g. (-90, 90, 1) yields 181 points despite rounding
    count = int(math.floor((grid_stop_deg - grid_start_deg) / grid_step_deg + 1e-9)) + 1
    angles = grid_start_deg + grid_step_deg * np.arange(count)
    return Dictionary(steering_matrix(angles, sensors, spacing_wavelengths), angles,
                      float(spacing_wavelengths))


def frequency_dictionaries(base: Dictionary, frequencies: Sequence[float]) -> list[Dictionary]:
    """One dictionary per relative frequency f/f1 on the grid of ``base``.

    The physical spacing is fixed, so d/lambda scales with frequency.
    """
    out = []
    for ratio in frequencies:
        dl = base.spacing_wavelengths * float(ratio)
        out.append(Dictionary(steering_matrix(base.angles, base.sensors, dl), base.angles, dl))
    return out


@dataclass(frozen=True)
class UncertaintyModel:
    """Error statistics: ``phi_e`` for dictionary columns, ``gamma_e`` for weights.

    Both zero gives plain SBL; ``phi_e`` alone is SBL-A, ``gamma_e`` alone SBL-x.
    """

    phi_e: float = 0.0
    gamma_e: float = 0.0

    def __post_init__(self):
        if not (self.phi_e >= 0 and self.gamma_e >= 0):
            raise ValueError("phi_e and gamma_e must be >= 0")


@dataclass(frozen=True)
class SceneSpec:
    sources: tuple[tuple[float, float], ...]
    amplitude_model: AmplitudeModel = AmplitudeModel.CONSTANT_MAGNITUDE_RANDOM_PHASE
    snr_dB: float = 20.0
    snapshots: int = 30
    frequencies: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        sources = tuple((float(a), float(p)) for a, p in self.sources)
        if not sources:
            raise ConfigError("sources", "at least one source is required")
        if int(self.snapshots) != self.snapshots or self.snapshots < 1:
            raise ConfigError("snapshots", f"must be an integer >= 1, got {self.snapshots!r}")
        freqs = tuple(float(f) for f in self.frequencies)
        if not freqs or any(not (f > 0 and math.isfinite(f)) for f in freqs):
            raise ConfigError("frequencies", "must be a non-empty list of positive numbers")
        if math.isnan(float(self.snr_dB)):
            raise ConfigError("snr_dB", "must be a number")
        object.__setattr__(self, "sources", sources)
        object.__setattr__(self, "amplitude_model", AmplitudeModel(self.amplitude_model))
        object.__setattr__(self, "snr_dB", float(self.snr_dB))
        object.__setattr__(self, "snapshots", int(self.snapshots))
        object.__setattr__(self, "frequencies", freqs)

    @property
    def angles(self) -> np.ndarray:
        return np.array([a for a, _ in self.sources])

    @property
    def powers_linear(self) -> np.ndarray:
        return 10.0 ** (np.array([p for _, p in self.sources]) / 10.0)

    @property
    def weakest(self) -> int:
        """Index of the minimum-power source; np.argmin keeps the first on ties."""
        return int(np.argmin([p for _, p in self.sources]))

    @property
    def noise_variance(self) -> float:
        # E||a x_ws||^2 = N P_ws and E||n||^2 = N sigma^2, so N cancels
        return float(self.powers_linear[self.weakest] / 10.0 ** (self.snr_dB / 10.0))

    def replace(self, **changes) -> "SceneSpec":
        d = self.to_dict()
        d.update(changes)
        return SceneSpec.from_dict(d)

    def to_dict(self) -> dict:
        return {
            "sources": [{"angle_deg": a, "power_dB": p} for a, p in self.sources],
            "amplitude_model": self.amplitude_model.value,
            "snr_dB": self.snr_dB,
            "snapshots": self.snapshots,
            "frequencies": list(self.frequencies),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        if "sources" not in d:
            raise ConfigError("sources", "missing")
        sources = []
        for i, s in enumerate(d["sources"]):
            try:
                if isinstance(s, dict):
                    sources.append((float(s["angle_deg"]), float(s["power_dB"])))
                else:
                    a, p = s
                    sources.append((float(a), float(p)))
            except (KeyError, TypeError, ValueError):
                raise ConfigError(f"sources[{i}]", "expected {angle_deg, power_dB}") from None
        model = d.get("amplitude_model", AmplitudeModel.CONSTANT_MAGNITUDE_RANDOM_PHASE.value)
        try:
            model = AmplitudeModel(model)
        except ValueError:
            valid = ", ".join(m.value for m in AmplitudeModel)
            raise ConfigError("amplitude_model", f"unknown {model!r}; valid: {valid}") from None
        for key in ("snr_dB", "snapshots"):
            if key in d and not isinstance(d[key], (int, float)):
                raise ConfigError(key, f"must be a number, got {d[key]!r}")
        freqs = d.get("frequencies", [1.0])
        if not isinstance(freqs, (list, tuple)):
            raise ConfigError("frequencies", "must be a list")
        return cls(sources=tuple(sources), amplitude_model=model,
                   snr_dB=d.get("snr_dB", 20.0), snapshots=d.get("snapshots", 30),
                   frequencies=tuple(freqs))

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class SnapshotSet:
    data: np.ndarray
    sample_covariance: np.ndarray = field(default=None)

    def __post_init__(self):
        data = np.array(self.data, dtype=complex)
        if data.ndim == 1:
            data = data[:, None]
        cov = sample_covariance(data) if self.sample_covariance is None else np.array(
            self.sample_covariance, dtype=complex)
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "sample_covariance", _frozen(cov))

    @property
    def sensors(self) -> int:
        return self.data.shape[0]

    @property
    def snapshots(self) -> int:
        return self.data.shape[1]


def sample_covariance(data: np.ndarray) -> np.ndarray:
    """(1/L) Y Y^H, symmetrised to be exactly Hermitian."""
    Y = np.asarray(data, dtype=complex)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.shape[1] < 1:
        raise ValueError("need at least one snapshot")
    S = (Y @ Y.conj().T) / Y.shape[1]
    return 0.5 * (S + S.conj().T)


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=key)))


# stream tags keep data and perturbation draws disjoint for the same run
_DATA_STREAM = 0
_PERTURBATION_STREAM = 1


def _perturbation_phases(rng: np.random.Generator, delta0: float, shape: tuple[int, int],
                         shared_per_column: bool) -> np.ndarray:
    if shared_per_column:
        delta = rng.uniform(-delta0 / 2, delta0 / 2, size=shape[0])[:, None]
        return np.broadcast_to(delta, shape)
    return rng.uniform(-delta0 / 2, delta0 / 2, size=shape)


def apply_multiplicative_perturbation(dictionary: Dictionary, delta0: float, seed: int,
                                      shared_per_column: bool = True, *, run: int = 0,
                                      frequency_index: int = 0) -> Dictionary:
    """Return ``A o exp(j delta)`` with delta ~ U[-delta0/2, delta0/2].

    With ``shared_per_column`` one phase is drawn per row (sensor) and reused
    across all columns.
    """
    if delta0 < 0:
        raise ValueError("delta0 must be >= 0")
    if delta0 == 0:
        return dictionary
    rng = _rng(seed, run, frequency_index, _PERTURBATION_STREAM)
    delta = _perturbation_phases(rng, delta0, dictionary.matrix.shape, shared_per_column)
    return Dictionary(dictionary.matrix * np.exp(1j * delta), dictionary.angles,
                      dictionary.spacing_wavelengths)


def grid_indices(scene: SceneSpec, dictionary: Dictionary) -> np.ndarray:
    """Snap source angles to the nearest grid point."""
    angles = dictionary.angles
    lo, hi = angles[0], angles[-1]
    step = angles[1] - angles[0] if angles.size > 1 else 0.0
    for a in scene.angles:
        if a < lo - step / 2 or a > hi + step / 2:
            raise ConfigError("sources", f"angle {a} outside grid [{lo}, {hi}]")
    return np.array([dictionary.nearest_index(a) for a in scene.angles], dtype=int)


def _draw_amplitudes(rng: np.random.Generator, model: AmplitudeModel, powers: np.ndarray) -> np.ndarray:
    if model is AmplitudeModel.CONSTANT_MAGNITUDE_RANDOM_PHASE:
        return np.sqrt(powers) * np.exp(2j * np.pi * rng.random(powers.size))
    z = rng.standard_normal(powers.size) + 1j * rng.standard_normal(powers.size)
    return np.sqrt(powers / 2) * z


def synthesize_snapshots(scene: SceneSpec, dictionary: Dictionary, seed: int, *,
                         run: int = 0, frequency_index: int = 0, delta0: float = 0.0,
                         redraw_perturbation: bool = False) -> SnapshotSet:
    """Draw ``scene.snapshots`` array snapshots on ``dictionary``.

    Every snapshot uses its own generator keyed by (seed, run, frequency_index,
    snapshot), so results are reproducible independently of evaluation order.
    A nonzero ``delta0`` generates data through a multiplicatively perturbed
    dictionary, drawn once per run unless ``redraw_perturbation`` is set.
    """
    L = scene.snapshots
    if L < 1:
        raise ConfigError("snapshots", "must be >= 1")
    idx = grid_indices(scene, dictionary)
    powers = scene.powers_linear
    sigma = math.sqrt(scene.noise_variance) if math.isfinite(scene.snr_dB) else 0.0
    N = dictionary.sensors

    A_true = dictionary.matrix[:, idx]
    if delta0 > 0 and not redraw_perturbation:
        A_true = apply_multiplicative_perturbation(dictionary, delta0, seed, run=run,
                                                   frequency_index=frequency_index).matrix[:, idx]

    Y = np.empty((N, L), dtype=complex)
    for l in range(L):
        rng = _rng(seed, run, frequency_index, _DATA_STREAM, l)
        A_l = A_true
        if delta0 > 0 and redraw_perturbation:
            delta = _perturbation_phases(rng, delta0, (N, 1), True)
            A_l = A_true * np.exp(1j * delta)
        x = _draw_amplitudes(rng, scene.amplitude_model, powers)
        noise = rng.standard_normal(N) + 1j * rng.standard_normal(N)
        Y[:, l] = A_l @ x + (sigma / math.sqrt(2)) * noise
    return SnapshotSet(Y)


def synthesize_frequencies(scene: SceneSpec, dictionaries: Iterable[Dictionary], seed: int, *,
                           run: int = 0, delta0: float = 0.0,
                           redraw_perturbation: bool = False) -> list[SnapshotSet]:
    """Independent snapshot sets, one per dictionary, with equal per-source power."""
    return [synthesize_snapshots(scene, d, seed, run=run, frequency_index=f, delta0=delta0,
                                 redraw_perturbation=redraw_perturbation)
            for f, d in enumerate(dictionaries)]
