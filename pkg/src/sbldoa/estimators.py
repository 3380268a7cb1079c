"""scikit-learn style wrappers around the functional API.

A "sample" here is one snapshot matrix Y (sensors x snapshots), or a list of
them for multi-frequency SBL. ``fit`` estimates the spectrum and DoAs of that
data set; ``transform`` returns the spectrum of new data using the fitted
dictionaries and settings.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .baselines import cbf_spectrum, music_spectrum, mvdr_spectrum
from .core import SblProblem, SolverOptions, find_local_peaks, run_sbl_cc, run_sbl_mc
from .model import SnapshotSet, UncertaintyModel, build_dictionary, frequency_dictionaries


def check_snapshots(X, sensors: Optional[int] = None) -> np.ndarray:
    """Validate one snapshot matrix and return it as complex N x L.

    A 1-D input is taken as a single snapshot.
    """
    Y = np.asarray(X)
    if Y.dtype == object:
        raise TypeError("snapshots must be numeric")
    Y = Y.astype(complex, copy=False)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.ndim != 2:
        raise ValueError(f"expected a 2-D sensors x snapshots array, got {Y.ndim}-D")
    if Y.shape[0] < 2 or Y.shape[1] < 1:
        raise ValueError(f"need at least 2 sensors and 1 snapshot, got shape {Y.shape}")
    if not np.all(np.isfinite(Y)):
        raise ValueError("snapshots contain NaN or inf")
    if sensors is not None and Y.shape[0] != sensors:
        raise ValueError(f"expected {sensors} sensors, got {Y.shape[0]}")
    return Y


def check_snapshot_list(X, n_frequencies: Optional[int] = None) -> list[np.ndarray]:
    """A single matrix becomes a one-element list; all entries share N."""
    if isinstance(X, (list, tuple)) and X and np.ndim(X[0]) == 2:
        frames = [check_snapshots(x) for x in X]
    else:
        frames = [check_snapshots(X)]
    N = frames[0].shape[0]
    if any(f.shape[0] != N for f in frames):
        raise ValueError("all frequencies need the same number of sensors")
    if n_frequencies is not None and len(frames) != n_frequencies:
        raise ValueError(f"expected {n_frequencies} snapshot matrices, got {len(frames)}")
    return frames


class _GridMixin:
    def _grid(self, sensors: int, frequencies: Sequence[float]):
        base = build_dictionary(self.grid_start_deg, self.grid_stop_deg, self.grid_step_deg,
                                sensors, self.spacing_wavelengths)
        return frequency_dictionaries(base, frequencies)

    def predict(self, X=None) -> np.ndarray:
        """DoA estimates in degrees, ascending; with X, for that data set."""
        if X is None:
            check_is_fitted(self, "doa_")
            return self.doa_
        spectrum = self.transform(X)
        peaks = find_local_peaks(spectrum, self.n_sources)
        return np.sort(self.angles_[peaks])

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X, y).spectrum_


class SBLEstimator(_GridMixin, TransformerMixin, BaseEstimator):
    """Sparse Bayesian learning DoA estimator.

    Parameters
    ----------
    n_sources : int
        Number of peaks kept for the support and the noise estimate.
    phi_e, gamma_e : float
        Dictionary-column and weight error variances (0 gives plain SBL).
    combine : {"cc", "mc"}
        Multi-frequency fusion: one shared gamma ("cc") or per-frequency
        solves averaged afterwards ("mc"). Irrelevant for one frequency.
    frequencies : sequence of float, optional
        Frequency ratios relative to the design frequency; defaults to one
        entry per snapshot matrix passed to ``fit``, all 1.

    Attributes
    ----------
    gamma_ : ndarray (M,)
    sigma2_ : ndarray (F,)
    support_ : list of int
    doa_ : ndarray, ascending source angles in degrees
    n_iter_ : int
    converged_ : bool
    """

    def __init__(self, n_sources: int = 1, phi_e: float = 0.0, gamma_e: float = 0.0,
                 exponent_b: float = 1.0, epsilon: float = 1e-6, max_iterations: int = 3000,
                 combine: str = "cc", frequencies=None, spacing_wavelengths: float = 0.5,
                 grid_start_deg: float = -90.0, grid_stop_deg: float = 90.0,
                 grid_step_deg: float = 1.0):
        self.n_sources = n_sources
        self.phi_e = phi_e
        self.gamma_e = gamma_e
        self.exponent_b = exponent_b
        self.epsilon = epsilon
        self.max_iterations = max_iterations
        self.combine = combine
        self.frequencies = frequencies
        self.spacing_wavelengths = spacing_wavelengths
        self.grid_start_deg = grid_start_deg
        self.grid_stop_deg = grid_stop_deg
        self.grid_step_deg = grid_step_deg

    def _options(self) -> SolverOptions:
        return SolverOptions(epsilon=self.epsilon, max_iterations=self.max_iterations,
                             exponent_b=self.exponent_b, k_sources=self.n_sources)

    def _solve(self, frames):
        if self.combine not in ("cc", "mc"):
            raise ValueError(f"combine must be 'cc' or 'mc', got {self.combine!r}")
        problem = SblProblem.shared(self.dictionaries_, [SnapshotSet(Y) for Y in frames],
                                    UncertaintyModel(self.phi_e, self.gamma_e))
        solver = run_sbl_mc if self.combine == "mc" else run_sbl_cc
        return solver(problem, self._options())

    def fit(self, X, y=None):
        frames = check_snapshot_list(X)
        freqs = self.frequencies if self.frequencies is not None else [1.0] * len(frames)
        if len(freqs) != len(frames):
            raise ValueError(f"{len(freqs)} frequencies for {len(frames)} snapshot matrices")
        self.dictionaries_ = self._grid(frames[0].shape[0], freqs)
        self.angles_ = self.dictionaries_[0].angles
        self.n_sensors_ = frames[0].shape[0]
        res = self._solve(frames)
        self.result_ = res
        self.gamma_ = res.gamma
        self.spectrum_ = res.gamma
        self.sigma2_ = res.sigma2
        self.support_ = list(res.support)
        self.doa_ = np.sort(self.angles_[self.support_])
        self.n_iter_ = res.iterations
        self.converged_ = res.converged
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "dictionaries_")
        frames = check_snapshot_list(X, len(self.dictionaries_))
        for Y in frames:
            check_snapshots(Y, self.n_sensors_)
        return self._solve(frames).gamma


class BeamformerEstimator(_GridMixin, TransformerMixin, BaseEstimator):
    """CBF, MVDR or MUSIC spectrum with peak picking.

    ``diagonal_load`` only applies to MVDR (None selects 1e-6 Tr(S)/N).
    """

    def __init__(self, method: str = "mvdr", n_sources: int = 1, diagonal_load: Optional[float] = None,
                 spacing_wavelengths: float = 0.5, grid_start_deg: float = -90.0,
                 grid_stop_deg: float = 90.0, grid_step_deg: float = 1.0):
        self.method = method
        self.n_sources = n_sources
        self.diagonal_load = diagonal_load
        self.spacing_wavelengths = spacing_wavelengths
        self.grid_start_deg = grid_start_deg
        self.grid_stop_deg = grid_stop_deg
        self.grid_step_deg = grid_step_deg

    def _spectrum(self, Y: np.ndarray) -> np.ndarray:
        S = SnapshotSet(Y).sample_covariance
        d = self.dictionaries_[0]
        if self.method == "cbf":
            return cbf_spectrum(S, d).values
        if self.method == "mvdr":
            return mvdr_spectrum(S, d, self.diagonal_load).values
        if self.method == "music":
            return music_spectrum(S, d, self.n_sources).values
        raise ValueError(f"method must be 'cbf', 'mvdr' or 'music', got {self.method!r}")

    def fit(self, X, y=None):
        Y = check_snapshots(X)
        self.dictionaries_ = self._grid(Y.shape[0], [1.0])
        self.angles_ = self.dictionaries_[0].angles
        self.n_sensors_ = Y.shape[0]
        self.spectrum_ = self._spectrum(Y)
        self.support_ = find_local_peaks(self.spectrum_, self.n_sources)
        self.doa_ = np.sort(self.angles_[self.support_])
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "dictionaries_")
        return self._spectrum(check_snapshots(X, self.n_sensors_))
