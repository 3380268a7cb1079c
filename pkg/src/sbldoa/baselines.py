"""Classical angular spectra (CBF, MVDR, MUSIC) and exhaustive support search."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import NumericalBreakdown, _projected_power, find_local_peaks
from .model import Dictionary


@dataclass(frozen=True)
class Spectrum:
    values: np.ndarray
    angles: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        angles = np.asarray(self.angles, dtype=float)
        if values.shape != angles.shape:
            raise ValueError("values and angles must have the same length")
        if np.any(values < 0):
            raise ValueError("spectrum values must be >= 0")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "angles", angles)

    def peaks(self, k: int) -> list[int]:
        return find_local_peaks(self.values, k)


def _quadratic_forms(X: np.ndarray, A: np.ndarray) -> np.ndarray:
    return np.einsum("nm,nk,km->m", A.conj(), X, A).real


def cbf_spectrum(sample_cov: np.ndarray, dictionary: Dictionary) -> Spectrum:
    """Conventional beamformer power a_m^H S a_m."""
    S = np.asarray(sample_cov, dtype=complex)
    values = np.maximum(_quadratic_forms(S, dictionary.matrix), 0.0)
    return Spectrum(values, dictionary.angles)


def mvdr_spectrum(sample_cov: np.ndarray, dictionary: Dictionary,
                  diagonal_load: Optional[float] = None) -> Spectrum:
    """Capon spectrum 1 / (a_m^H (S + load I)^-1 a_m).

    The default load is 1e-6 * Tr(S) / N.
    """
    S = np.asarray(sample_cov, dtype=complex)
    N = S.shape[0]
    if diagonal_load is None:
        diagonal_load = 1e-6 * np.trace(S).real / N
    loaded = S + diagonal_load * np.eye(N)
    try:
        chol = np.linalg.cholesky(loaded)
    except np.linalg.LinAlgError:
        raise NumericalBreakdown("loaded sample covariance is singular") from None
    W = np.linalg.solve(chol, dictionary.matrix)
    den = np.einsum("nm,nm->m", W.conj(), W).real
    return Spectrum(1.0 / den, dictionary.angles)


def music_spectrum(sample_cov: np.ndarray, dictionary: Dictionary, k: int) -> Spectrum:
    """MUSIC pseudo-spectrum from the N - k smallest eigenvectors of S."""
    S = np.asarray(sample_cov, dtype=complex)
    N = S.shape[0]
    if not 1 <= k < N:
        raise ValueError(f"k must satisfy 1 <= k < N = {N}")
    w, U = np.linalg.eigh(0.5 * (S + S.conj().T))
    # ascending magnitude, ties broken by index
    order = np.argsort(w, kind="stable")
    Un = U[:, order[: N - k]]
    proj = Un.conj().T @ dictionary.matrix
    den = np.einsum("rm,rm->m", proj.conj(), proj).real
    return Spectrum(1.0 / np.maximum(den, N * np.finfo(float).eps), dictionary.angles)


class SearchBudgetExceeded(RuntimeError):
    """Exhaustive search stopped early; ``partial`` is the best support seen."""

    def __init__(self, evaluated: int, total: int, partial: Optional[tuple[int, ...]]):
        super().__init__(f"evaluated {evaluated} of {total} supports before hitting the budget")
        self.evaluated = evaluated
        self.total = total
        self.partial = partial
        self.complete = False


def support_residual(data: np.ndarray, dictionary: Dictionary, support) -> float:
    """Frobenius norm of Y - A_M A_M^+ Y."""
    Y = np.asarray(data, dtype=complex)
    if Y.ndim == 1:
        Y = Y[:, None]
    support = list(support)
    if not support:
        return float(np.linalg.norm(Y))
    Am = dictionary.matrix[:, support]
    return float(np.linalg.norm(Y - Am @ (np.linalg.pinv(Am) @ Y)))


def exhaustive_search(data: np.ndarray, dictionary: Dictionary, k: int,
                      budget: int = 10 ** 7, force: bool = False,
                      chunk: int = 4096) -> tuple[int, ...]:
    """Size-k support minimising ||Y - A_M A_M^+ Y||_F over all C(M, k) supports.

    Supports are visited in lexicographic order and the first minimiser wins.
    Instances with more than ``budget`` supports are refused unless ``force``;
    with ``force`` the search stops at ``budget`` evaluations and raises
    SearchBudgetExceeded carrying the best partial support.
    """
    Y = np.asarray(data, dtype=complex)
    if Y.ndim == 1:
        Y = Y[:, None]
    N, L = Y.shape
    M = dictionary.size
    if not 0 <= k <= N:
        raise ValueError(f"k must satisfy 0 <= k <= N = {N}")
    if k == 0:
        return ()
    total = math.comb(M, k)
    if total > budget and not force:
        raise SearchBudgetExceeded(0, total, None)
    S = (Y @ Y.conj().T) / L
    combos = itertools.combinations(range(M), k)
    best, best_power, seen = None, -np.inf, 0
    while seen < min(total, budget):
        take = min(chunk, budget - seen)
        block = np.fromiter(itertools.chain.from_iterable(itertools.islice(combos, take)),
                            dtype=int).reshape(-1, k)
        if block.size == 0:
            break
        # minimal residual <=> maximal captured power Tr(P_M S)
        power = _projected_power(S, dictionary.matrix, block)
        i = int(np.argmax(power))
        if power[i] > best_power:
            best, best_power = tuple(int(m) for m in block[i]), power[i]
        seen += len(block)
    if seen < total:
        raise SearchBudgetExceeded(seen, total, best)
    return best
