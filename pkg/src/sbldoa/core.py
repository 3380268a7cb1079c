"""Evidence maximisation for SBL with uncertainty models and multiple dictionaries.

The data covariance for one dictionary, with additive column error
``phi_e * I`` and weight error ``gamma_e``, collapses to::

    Sigma_y = (sigma2 + phi_e * (sum(gamma) + M * gamma_e)) I + A diag(gamma + gamma_e) A^H

All solves go through a Cholesky factor of ``Sigma_y``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import linalg

from .model import Dictionary, SnapshotSet, UncertaintyModel


class NumericalBreakdown(ArithmeticError):
    """Raised when the iteration produces a non-finite or non-PD quantity."""

    def __init__(self, message: str, iteration: Optional[int] = None,
                 dictionary: Optional[int] = None):
        self.iteration = iteration
        self.dictionary = dictionary
        where = []
        if dictionary is not None:
            where.append(f"dictionary {dictionary}")
        if iteration is not None:
            where.append(f"iteration {iteration}")
        super().__init__(message + (f" ({', '.join(where)})" if where else ""))


@dataclass(frozen=True)
class SolverOptions:
    """Fixed-point solver settings.

    ``k_sources`` is the number of peaks used for the noise estimate and for
    the reported support. ``gamma_floor`` zeroes entries that fall below it
    after each update (0 disables pruning).
    """

    epsilon: float = 1e-6
    max_iterations: int = 3000
    exponent_b: float = 1.0
    k_sources: int = 1
    gamma_init: float = 1.0
    sigma2_init: float = 0.1
    gamma_floor: float = 0.0
    estimate_noise: bool = True
    compute_posterior: bool = False

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if int(self.max_iterations) != self.max_iterations or self.max_iterations < 1:
            raise ValueError("max_iterations must be an integer >= 1")
        if not 0 < self.exponent_b <= 1:
            raise ValueError("exponent_b must lie in (0, 1]")
        if int(self.k_sources) != self.k_sources or self.k_sources < 0:
            raise ValueError("k_sources must be an integer >= 0")
        if not self.gamma_init > 0:
            raise ValueError("gamma_init must be > 0")
        if not self.sigma2_init > 0:
            raise ValueError("sigma2_init must be > 0")
        if not self.gamma_floor >= 0:
            raise ValueError("gamma_floor must be >= 0")


@dataclass(frozen=True)
class SblProblem:
    dictionaries: tuple[Dictionary, ...]
    snapshots: tuple[SnapshotSet, ...]
    uncertainty: tuple[UncertaintyModel, ...]

    def __post_init__(self):
        dicts = tuple(self.dictionaries)
        snaps = tuple(self.snapshots)
        unc = tuple(self.uncertainty)
        if not dicts or not (len(dicts) == len(snaps) == len(unc)):
            raise ValueError("dictionaries, snapshots and uncertainty need equal length >= 1")
        M = dicts[0].size
        for f, (d, s) in enumerate(zip(dicts, snaps)):
            if d.size != M:
                raise ValueError(f"dictionary {f} has {d.size} columns, expected {M}")
            if s.sensors != d.sensors:
                raise ValueError(f"snapshot set {f} has {s.sensors} sensors, dictionary has {d.sensors}")
        object.__setattr__(self, "dictionaries", dicts)
        object.__setattr__(self, "snapshots", snaps)
        object.__setattr__(self, "uncertainty", unc)

    @classmethod
    def single(cls, dictionary: Dictionary, snapshots: SnapshotSet,
               uncertainty: UncertaintyModel = UncertaintyModel()) -> "SblProblem":
        return cls((dictionary,), (snapshots,), (uncertainty,))

    @classmethod
    def shared(cls, dictionaries: Sequence[Dictionary], snapshots: Sequence[SnapshotSet],
               uncertainty: UncertaintyModel = UncertaintyModel()) -> "SblProblem":
        return cls(tuple(dictionaries), tuple(snapshots), (uncertainty,) * len(dictionaries))

    @property
    def n_dictionaries(self) -> int:
        return len(self.dictionaries)

    def subproblem(self, f: int) -> "SblProblem":
        return SblProblem((self.dictionaries[f],), (self.snapshots[f],), (self.uncertainty[f],))


@dataclass
class SblResult:
    gamma: np.ndarray
    sigma2: np.ndarray
    iterations: int
    converged: bool
    evidence_trace: np.ndarray
    support: list[int]
    posterior_means: Optional[list[np.ndarray]] = None
    posterior_covariance: Optional[list[np.ndarray]] = None
    per_dictionary: list["SblResult"] = field(default_factory=list)

    def to_dict(self) -> dict:
        out = {
            "gamma": self.gamma.tolist(),
            "sigma2": self.sigma2.tolist(),
            "support": list(map(int, self.support)),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "log_evidence": float(self.evidence_trace[-1]) if len(self.evidence_trace) else None,
        }
        if self.per_dictionary:
            out["per_dictionary"] = [
                {k: r.to_dict()[k] for k in ("sigma2", "support", "iterations", "converged", "log_evidence")}
                for r in self.per_dictionary
            ]
        return out


def _check_gamma(gamma) -> np.ndarray:
    gamma = np.asarray(gamma, dtype=float)
    if np.any(gamma < 0) or not np.all(np.isfinite(gamma)):
        raise ValueError("gamma entries must be finite and >= 0")
    return gamma


def _noise_level(gamma: np.ndarray, uncertainty: UncertaintyModel, sigma2: float) -> float:
    M = gamma.size
    return sigma2 + uncertainty.phi_e * (gamma.sum() + M * uncertainty.gamma_e)


def assemble_noise_covariance(gamma, uncertainty: UncertaintyModel, dictionary: Dictionary,
                              sigma2: float) -> np.ndarray:
    """Covariance of the combined noise term, errors integrated out."""
    gamma = _check_gamma(gamma)
    if not sigma2 > 0:
        raise ValueError("sigma2 must be > 0")
    A = dictionary.matrix
    cov = _noise_level(gamma, uncertainty, sigma2) * np.eye(A.shape[0], dtype=complex)
    if uncertainty.gamma_e:
        cov += uncertainty.gamma_e * (A @ A.conj().T)
    return 0.5 * (cov + cov.conj().T)


def assemble_data_covariance(gamma, uncertainty: UncertaintyModel, dictionary: Dictionary,
                             sigma2: float) -> np.ndarray:
    gamma = _check_gamma(gamma)
    if not sigma2 > 0:
        raise ValueError("sigma2 must be > 0")
    return _data_covariance(gamma, uncertainty, dictionary.matrix, sigma2)


def _data_covariance(gamma, uncertainty, A, sigma2):
    cov = (A * (gamma + uncertainty.gamma_e)) @ A.conj().T
    cov[np.diag_indices_from(cov)] += _noise_level(gamma, uncertainty, sigma2)
    return 0.5 * (cov + cov.conj().T)


def _factor(cov: np.ndarray, iteration=None):
    try:
        return linalg.cho_factor(cov, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise NumericalBreakdown(f"data covariance is not positive definite: {exc}",
                                 iteration) from None


class _ColumnOperator:
    """Batched ``A diag(g) A^H`` and ``a_m^H X a_m`` for one dictionary.

    Uniform-linear-array dictionaries (column m equal to z_m**n with |z_m| = 1)
    make ``A diag(g) A^H`` Toeplitz and reduce ``a_m^H X a_m`` to a transform of
    the 2N-1 diagonal sums of X; anything else goes through dense N^2 x M
    products.
    """

    def __init__(self, A: np.ndarray):
        self.A = A
        N, M = A.shape
        self.N, self.M = N, M
        self.structured = False
        if N >= 2:
            omega = np.angle(A[1])
            powers = np.exp(1j * np.arange(N)[:, None] * omega[None, :])
            self.structured = bool(np.max(np.abs(A - powers)) < 1e-9)
        self.diag = (np.arange(N), np.arange(N))
        n, n2 = np.indices((N, N))
        if self.structured:
            lags = np.arange(-(N - 1), N)
            self.E = np.exp(1j * lags[:, None] * omega[None, :])
            self.AT = np.ascontiguousarray(A.T)
            self._toeplitz = n - n2 + N - 1
            self._lag_slot = (n * (2 * N - 1) + (n2 - n + N - 1)).ravel()
        else:
            self.G = (A.conj()[:, None, :] * A[None, :, :]).reshape(N * N, M)
            self.H = np.ascontiguousarray(self.G.conj().T)

    def covariance(self, g: np.ndarray) -> np.ndarray:
        R = g.shape[0]
        if self.structured:
            t = g @ self.AT
            full = np.concatenate([t[:, :0:-1].conj(), t], axis=1)
            return full[:, self._toeplitz]
        return (g @ self.H).reshape(R, self.N, self.N)

    def quad(self, X: np.ndarray) -> np.ndarray:
        R, N = X.shape[0], self.N
        if self.structured:
            slots = np.zeros((R, N * (2 * N - 1)), dtype=complex)
            slots[:, self._lag_slot] = X.reshape(R, -1)
            lag_sums = slots.reshape(R, N, 2 * N - 1).sum(axis=1)
            return (lag_sums @ self.E).real
        return (X.reshape(R, -1) @ self.G).real


def _trace(X: np.ndarray) -> np.ndarray:
    return np.einsum("rii->r", X).real


def _batch_terms(op: _ColumnOperator, gamma: np.ndarray, sigma2: np.ndarray,
                 unc: UncertaintyModel, S: np.ndarray, L: int):
    """Update numerator/denominator and log-evidence for a batch of runs.

    Returns ``(num, den, evidence, bad)`` where ``bad`` flags runs whose data
    covariance failed to factor; their rows are filled with NaN.
    """
    R, M = gamma.shape
    N = op.N
    level = sigma2 + unc.phi_e * (gamma.sum(axis=1) + M * unc.gamma_e)
    cov = op.covariance(gamma + unc.gamma_e)
    cov[:, op.diag[0], op.diag[1]] += level[:, None]
    bad = np.zeros(R, dtype=bool)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        chol = np.empty_like(cov)
        for r in range(R):
            try:
                chol[r] = np.linalg.cholesky(cov[r])
            except np.linalg.LinAlgError:
                bad[r] = True
                chol[r] = np.eye(N)
    # inverse built from the triangular factor: C = L^-H L^-1
    chol_inv = np.linalg.inv(chol)
    C = chol_inv.conj().transpose(0, 2, 1) @ chol_inv
    Q = C @ S @ C
    den = op.quad(C)
    num = op.quad(Q)
    if unc.phi_e:
        den = den + unc.phi_e * _trace(C)[:, None]
        num = num + unc.phi_e * _trace(Q)[:, None]
    logdet = 2.0 * np.log(np.abs(np.einsum("rii->ri", chol))).sum(axis=1)
    evidence = -L * (logdet + np.einsum("rij,rij->r", C, S.conj()).real)
    if bad.any():
        num[bad] = np.nan
        den[bad] = np.nan
        evidence[bad] = np.nan
    return num, den, evidence, bad


def _projected_power(S: np.ndarray, A: np.ndarray, support: np.ndarray) -> np.ndarray:
    """Tr(P_M S) for each row of ``support`` (G x k), P_M the projector onto span(A_M).

    The projector comes from the eigendecomposition of the k x k Gram matrix,
    dropping directions whose singular value falls below max(N, k) * eps * s_max,
    i.e. the tolerance of a regularised pseudo-inverse. ``S`` is N x N or G x N x N.
    """
    N = A.shape[0]
    k = support.shape[1]
    Am = A[:, support].transpose(1, 0, 2)
    Amh = Am.conj().transpose(0, 2, 1)
    lam, V = np.linalg.eigh(Amh @ Am)
    keep = lam > (max(N, k) * np.finfo(float).eps) ** 2 * lam[:, -1:]
    inv_lam = np.where(keep, 1.0 / np.where(keep, lam, 1.0), 0.0)
    B = Amh @ S @ Am
    return np.einsum("gik,gij,gjk,gk->g", V.conj(), B, V, inv_lam).real


def _batch_noise(S: np.ndarray, A: np.ndarray, support: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Noise estimate per run from padded supports (R x K) and their lengths."""
    R, N, _ = S.shape
    trace = _trace(S)
    residual = trace.copy()
    if np.any(counts >= N):
        raise ValueError(f"support size must be < number of sensors {N}")
    if R == 1 or np.all(counts == counts[0]):
        k = int(counts[0])
        if k:
            residual = trace - _projected_power(S, A, support[:, :k])
    else:
        for k in np.unique(counts):
            if k == 0:
                continue
            rows = np.flatnonzero(counts == k)
            residual[rows] = trace[rows] - _projected_power(S[rows], A, support[rows, :k])
    floor = np.maximum(1e-12 * trace / N, np.finfo(float).tiny)
    return np.maximum(residual / (N - counts), floor)


def _batch_peaks(G: np.ndarray, k: int):
    """Top-k local peaks per row: (R x k index array padded with -1, counts).

    Same rule as find_local_peaks, vectorised over rows: a run of equal values
    is a peak at its first index when both flanks (where present) are lower.
    """
    R, M = G.shape
    if k == 0 or M < 2:
        return np.full((R, k), -1, dtype=int), np.zeros(R, dtype=int)
    starts = np.ones((R, M), dtype=bool)
    starts[:, 1:] = G[:, 1:] != G[:, :-1]
    ends = np.ones((R, M), dtype=bool)
    ends[:, :-1] = starts[:, 1:]
    rise = np.ones((R, M), dtype=bool)
    rise[:, 1:] = G[:, 1:] > G[:, :-1]
    fall = np.ones((R, M), dtype=bool)
    fall[:, :-1] = G[:, :-1] > G[:, 1:]
    run_id = np.cumsum(starts.ravel()) - 1
    fall_of_run = np.zeros(run_id[-1] + 1, dtype=bool)
    fall_of_run[run_id[ends.ravel()]] = fall.ravel()[ends.ravel()]
    mask = starts & rise & fall_of_run[run_id].reshape(R, M)
    mask[starts.sum(axis=1) == 1] = False
    vals = np.where(mask, G, -np.inf)
    order = np.full((R, k), -1, dtype=int)
    top = np.argsort(-vals, axis=1, kind="stable")[:, :k]
    order[:, :top.shape[1]] = top
    counts = np.minimum(mask.sum(axis=1), k)
    order[np.arange(k)[None, :] >= counts[:, None]] = -1
    return order, counts


def _support_list(support: np.ndarray, counts: np.ndarray, r: int) -> list[int]:
    return support[r, :counts[r]].tolist()


def gamma_update_step(gamma_old, data_cov: np.ndarray, sample_cov: np.ndarray,
                      dictionary: Dictionary, uncertainty: UncertaintyModel,
                      b: float = 1.0) -> np.ndarray:
    """One multiplicative fixed-point update.

    ``data_cov`` is Sigma_y evaluated at ``gamma_old``; its inverse is taken
    through a Cholesky factor.
    """
    gamma_old = _check_gamma(gamma_old)
    cf = _factor(np.asarray(data_cov, dtype=complex))
    Si = linalg.cho_solve(cf, np.eye(dictionary.sensors), check_finite=False)
    Si = 0.5 * (Si + Si.conj().T)
    op = _ColumnOperator(dictionary.matrix)
    S = np.asarray(sample_cov, dtype=complex)
    Q = (Si @ S @ Si)[None]
    den = op.quad(Si[None])[0]
    num = op.quad(Q)[0]
    if uncertainty.phi_e:
        den = den + uncertainty.phi_e * np.trace(Si).real
        num = num + uncertainty.phi_e * np.trace(Q[0]).real
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = num / den
    if not np.all(np.isfinite(ratio)):
        raise NumericalBreakdown("non-finite update ratio; data covariance ill-conditioned")
    return gamma_old * np.maximum(ratio, 0.0) ** b


def estimate_noise(sample_cov: np.ndarray, dictionary: Dictionary, support: Sequence[int],
                   k: Optional[int] = None) -> float:
    """Noise variance from the sample covariance projected off span(A[:, support]).

    Result is clamped below at 1e-12 * Tr(S) / N so Sigma_y stays PD.
    """
    S = np.asarray(sample_cov, dtype=complex)
    N = S.shape[0]
    support = [int(m) for m in support]
    if k is None:
        k = len(support)
    if k >= N:
        raise ValueError(f"k = {k} must be < number of sensors {N}")
    if len(support) != k:
        raise ValueError(f"support has {len(support)} indices, expected k = {k}")
    return float(_batch_noise(S[None], dictionary.matrix, np.array([support], dtype=int).reshape(1, k),
                              np.array([k]))[0])


def find_local_peaks(gamma, k: int) -> list[int]:
    """Indices of local maxima of ``gamma``, strongest first, at most ``k``.

    A run of equal values counts as one peak, reported at its first index, when
    every neighbouring value is strictly smaller. An array with no neighbours
    to compare against (constant) has no peaks. Ties sort by ascending index.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    g = np.asarray(gamma, dtype=float)
    if g.size == 0 or k == 0:
        return []
    starts = np.flatnonzero(np.r_[True, g[1:] != g[:-1]])
    if starts.size < 2:
        return []
    vals = g[starts]
    left = np.r_[True, vals[1:] > vals[:-1]]
    right = np.r_[vals[:-1] > vals[1:], True]
    peaks = starts[left & right]
    order = np.argsort(-g[peaks], kind="stable")
    return [int(i) for i in peaks[order[:k]]]


def _shared_setup(problems: Sequence[SblProblem]):
    first = problems[0]
    for p in problems[1:]:
        if p.n_dictionaries != first.n_dictionaries:
            raise ValueError("batched problems must have the same number of dictionaries")
        for a, b in zip(p.dictionaries, first.dictionaries):
            if a is not b and not np.array_equal(a.matrix, b.matrix):
                raise ValueError("batched problems must share dictionaries")
        if p.uncertainty != first.uncertainty:
            raise ValueError("batched problems must share uncertainty models")
    F = first.n_dictionaries
    covs = [np.stack([p.snapshots[f].sample_covariance for p in problems]) for f in range(F)]
    Ls = [np.array([p.snapshots[f].snapshots for p in problems]) for f in range(F)]
    return first, covs, Ls


def _iterate_batch(problems: Sequence[SblProblem], options: SolverOptions) -> list:
    """Shared-gamma fixed-point iteration for many runs at once.

    All problems share dictionaries and uncertainty; only the data differ. One
    dictionary per problem is plain SBL. Returns one SblResult or
    NumericalBreakdown per problem.
    """
    first, covs, Ls = _shared_setup(problems)
    F = first.n_dictionaries
    R = len(problems)
    M = first.dictionaries[0].size
    K = options.k_sources
    N_min = min(d.sensors for d in first.dictionaries)
    if K >= N_min:
        raise ValueError(f"k_sources = {K} must be < number of sensors {N_min}")
    ops = [_ColumnOperator(d.matrix) for d in first.dictionaries]

    gamma = np.full((R, M), float(options.gamma_init))
    sigma2 = np.full((R, F), float(options.sigma2_init))
    traces = np.full((R, options.max_iterations), np.nan)
    iterations = np.zeros(R, dtype=int)
    converged = np.zeros(R, dtype=bool)
    failures: dict[int, NumericalBreakdown] = {}
    active = np.arange(R)
    b = options.exponent_b

    for it in range(1, options.max_iterations + 1):
        if active.size == 0:
            break
        g = gamma[active]
        num, den, evidence, bad = _batch_terms(ops[0], g, sigma2[active, 0], first.uncertainty[0],
                                               covs[0][active], Ls[0][active])
        for f in range(1, F):
            n_f, d_f, e_f, bad_f = _batch_terms(ops[f], g, sigma2[active, f], first.uncertainty[f],
                                                covs[f][active], Ls[f][active])
            num = num + n_f
            den = den + d_f
            evidence = evidence + e_f
            bad = bad | bad_f
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = num / den
        bad |= ~np.isfinite(evidence) | ~np.all(np.isfinite(ratio), axis=1)
        traces[active, it - 1] = evidence
        iterations[active] = it
        if bad.any():
            for r in active[bad]:
                failures[int(r)] = NumericalBreakdown("non-finite evidence or update ratio", it)
            keep = ~bad
            active, g, ratio = active[keep], g[keep], ratio[keep]
            if active.size == 0:
                break
        g_new = g * np.maximum(ratio, 0.0) ** b
        if options.gamma_floor:
            g_new[g_new < options.gamma_floor] = 0.0
        if options.estimate_noise:
            support, counts = _batch_peaks(g_new, K)
            for f in range(F):
                sigma2[active, f] = _batch_noise(covs[f][active], first.dictionaries[f].matrix,
                                                 support, counts)
        norm_old = np.abs(g).sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            change = np.where(norm_old > 0, np.abs(g_new - g).sum(axis=1) / norm_old, 0.0)
        gamma[active] = g_new
        done = change < options.epsilon
        converged[active[done]] = True
        active = active[~done]

    support, counts = _batch_peaks(gamma, K)
    results: list = []
    for r in range(R):
        if r in failures:
            results.append(failures[r])
            continue
        res = SblResult(gamma=gamma[r].copy(), sigma2=sigma2[r].copy(), iterations=int(iterations[r]),
                        converged=bool(converged[r]), evidence_trace=traces[r, :iterations[r]].copy(),
                        support=_support_list(support, counts, r))
        if options.compute_posterior:
            p = problems[r]
            pairs = [posterior(res.gamma, res.sigma2[f], p.dictionaries[f], p.uncertainty[f],
                               p.snapshots[f].data) for f in range(F)]
            res.posterior_means = [m for m, _ in pairs]
            res.posterior_covariance = [c for _, c in pairs]
        results.append(res)
    return results


def _raise_failures(results: list) -> list[SblResult]:
    for r in results:
        if isinstance(r, Exception):
            raise r
    return results


def _combine_mc(per_dictionary: list[SblResult], k: int) -> SblResult:
    if len(per_dictionary) == 1:
        return replace(per_dictionary[0], per_dictionary=list(per_dictionary))
    gamma = np.mean(np.stack([r.gamma for r in per_dictionary]), axis=0)
    length = max(len(r.evidence_trace) for r in per_dictionary)
    padded = [np.pad(r.evidence_trace, (0, length - len(r.evidence_trace)), mode="edge")
              for r in per_dictionary]
    means = [r.posterior_means[0] for r in per_dictionary] if per_dictionary[0].posterior_means else None
    covs = ([r.posterior_covariance[0] for r in per_dictionary]
            if per_dictionary[0].posterior_covariance else None)
    return SblResult(
        gamma=gamma,
        sigma2=np.concatenate([r.sigma2 for r in per_dictionary]),
        iterations=max(r.iterations for r in per_dictionary),
        converged=all(r.converged for r in per_dictionary),
        evidence_trace=np.sum(padded, axis=0),
        support=find_local_peaks(gamma, k),
        posterior_means=means,
        posterior_covariance=covs,
        per_dictionary=list(per_dictionary),
    )


def solve_many(problems: Sequence[SblProblem], options: SolverOptions = SolverOptions(),
               method: str = "cc") -> list:
    """Solve many problems sharing dictionaries and uncertainty in one batch.

    ``method`` is ``"cc"`` (common gamma, covers single-dictionary SBL) or
    ``"mc"`` (per-dictionary gamma averaged after convergence). Failed runs
    come back as NumericalBreakdown instances instead of raising, so a Monte
    Carlo sweep can count them.
    """
    if not problems:
        return []
    if method == "cc":
        return _iterate_batch(problems, options)
    if method != "mc":
        raise ValueError(f"unknown method {method!r}")
    F = problems[0].n_dictionaries
    per_f = [_iterate_batch([p.subproblem(f) for p in problems], options) for f in range(F)]
    out: list = []
    for r in range(len(problems)):
        parts = [per_f[f][r] for f in range(F)]
        failed = [(f, e) for f, e in enumerate(parts) if isinstance(e, Exception)]
        if failed:
            f, e = failed[0]
            out.append(NumericalBreakdown("per-dictionary solve failed", e.iteration, f))
        else:
            out.append(_combine_mc(parts, options.k_sources))
    return out


def run_sbl(problem: SblProblem, options: SolverOptions = SolverOptions()) -> SblResult:
    """Single-dictionary SBL."""
    if problem.n_dictionaries != 1:
        raise ValueError("run_sbl takes exactly one dictionary; use run_sbl_mc or run_sbl_cc")
    return _raise_failures(_iterate_batch([problem], options))[0]


def run_sbl_cc(problem: SblProblem, options: SolverOptions = SolverOptions()) -> SblResult:
    """Common-covariance multi-dictionary SBL: one gamma, dictionary-summed traces."""
    return _raise_failures(_iterate_batch([problem], options))[0]


def run_sbl_mc(problem: SblProblem, options: SolverOptions = SolverOptions()) -> SblResult:
    """Multiple-covariance SBL: solve each dictionary alone, then average gamma.

    ``evidence_trace`` is the sum of the per-dictionary traces, each held at
    its last value once that dictionary has stopped; the individual traces
    live in ``per_dictionary``.
    """
    return _raise_failures(solve_many([problem], options, "mc"))[0]


def posterior(gamma, sigma2: float, dictionary: Dictionary, uncertainty: UncertaintyModel,
              data: np.ndarray):
    """Gaussian posterior of the weights: means (M x L) and covariance (M x M).

    The uncertainty terms enter through Sigma_y only; the mean uses the nominal
    dictionary.
    """
    gamma = _check_gamma(gamma)
    Y = np.asarray(data, dtype=complex)
    if Y.ndim == 1:
        Y = Y[:, None]
    A = dictionary.matrix
    cf = _factor(assemble_data_covariance(gamma, uncertainty, dictionary, sigma2))
    G = gamma[:, None]
    means = G * (A.conj().T @ linalg.cho_solve(cf, Y, check_finite=False))
    GAh = G * A.conj().T
    cov = np.diag(gamma).astype(complex) - GAh @ linalg.cho_solve(cf, GAh.conj().T, check_finite=False)
    return means, 0.5 * (cov + cov.conj().T)


def log_evidence(gamma, sigma2: float, dictionary: Dictionary, uncertainty: UncertaintyModel,
                 snapshots: SnapshotSet) -> float:
    """-L log|Sigma_y| - L Tr(Sigma_y^-1 S_y), constants dropped."""
    gamma = _check_gamma(gamma)
    _factor(assemble_data_covariance(gamma, uncertainty, dictionary, sigma2))
    _, _, evidence, _ = _batch_terms(_ColumnOperator(dictionary.matrix), gamma[None],
                                     np.array([sigma2]), uncertainty,
                                     snapshots.sample_covariance[None], snapshots.snapshots)
    return float(evidence[0])


def evidence_gradient(gamma, sigma2: float, dictionary: Dictionary, uncertainty: UncertaintyModel,
                      snapshots: SnapshotSet) -> np.ndarray:
    """d log_evidence / d gamma_m = L (Tr(Si B_m Si S) - Tr(Si B_m))."""
    gamma = _check_gamma(gamma)
    _factor(assemble_data_covariance(gamma, uncertainty, dictionary, sigma2))
    num, den, _, _ = _batch_terms(_ColumnOperator(dictionary.matrix), gamma[None],
                                  np.array([sigma2]), uncertainty,
                                  snapshots.sample_covariance[None], snapshots.snapshots)
    return snapshots.snapshots * (num[0] - den[0])
