"""Stationary covariance of the linearized dynamics and its empirical estimators.

For the linear system dw = A_alpha w dt + sigma dW the stationary covariance
in the eigenbasis of -A is

    <V e_i, e_j> = sigma^2 C_ij / (lambda_i + lambda_j - 2 alpha),

with C the noise covariance expressed in the same basis. It diverges like
1/(lambda_1 - alpha) as alpha approaches lambda_1 from below.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import TrajectoryRecord
from .errors import DimensionError, DivergenceDomainError, EstimatorError, FitError, TruncationError
from .noise import CovarianceSpec, covariance_in_basis
from .spectral import SpectralBasis

__all__ = [
    "VinfEntries",
    "EwsEstimate",
    "DEFAULT_M_TRUNC",
    "vinf_entry",
    "vinf_matrix",
    "vinf_bilinear",
    "vinf_pointwise",
    "vinf_pointwise_profile",
    "lyapunov_residual",
    "empirical_mode_covariance",
    "empirical_pointwise_variance",
    "ensemble_estimate",
    "scaling_fit",
    "argmax_measurement_point",
    "write_sweep_csv",
]

DEFAULT_M_TRUNC = 30
N_BATCHES = 20


@dataclass(frozen=True)
class VinfEntries:
    matrix: np.ndarray
    alpha: float
    sigma: float
    provenance: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class EwsEstimate:
    value: float
    stderr: float
    kind: str  # "mode-covariance" | "pointwise-variance"
    params: tuple = ()
    n: int = 1

    def __post_init__(self):
        if not self.stderr >= 0:
            raise EstimatorError(f"stderr must be nonnegative, got {self.stderr}")


def _check_modes(basis: SpectralBasis, *js):
    for j in js:
        if not 1 <= j <= basis.m:
            raise TruncationError(f"mode index {j} outside 1..{basis.m}")


def _noise_matrix(basis: SpectralBasis, spec: CovarianceSpec, m: int) -> np.ndarray:
    if m > basis.m:
        raise TruncationError(f"m_trunc={m} exceeds the {basis.m} available modes")
    sub = SpectralBasis(
        basis.lambdas[:m], basis.vectors[:m], basis.lambdas_prime[:m], basis.mu[:m], basis.grid
    )
    return covariance_in_basis(spec, sub, basis.grid)


def vinf_entry(j1: int, j2: int, basis: SpectralBasis, spec: CovarianceSpec, alpha: float, sigma: float) -> float:
    """<V e_j1, e_j2> for the linearized stationary law."""
    _check_modes(basis, j1, j2)
    den = basis.lambdas[j1 - 1] + basis.lambdas[j2 - 1] - 2.0 * alpha
    if not den > 0:
        raise DivergenceDomainError(
            f"alpha={alpha:.6g} >= (lambda_{j1} + lambda_{j2})/2 = {0.5 * (den + 2 * alpha):.6g}"
        )
    C = _noise_matrix(basis, spec, max(j1, j2))
    return float(sigma**2 * C[j1 - 1, j2 - 1] / den)


def vinf_matrix(
    basis: SpectralBasis, spec: CovarianceSpec, alpha: float, sigma: float, m: int = DEFAULT_M_TRUNC
) -> VinfEntries:
    """All entries with j1, j2 <= m."""
    C = _noise_matrix(basis, spec, m)
    lam = basis.lambdas[:m]
    if not alpha < lam[0]:
        raise DivergenceDomainError(f"alpha={alpha:.6g} >= lambda_1={lam[0]:.6g}")
    den = lam[:, None] + lam[None, :] - 2.0 * alpha
    V = sigma**2 * C / den
    V = 0.5 * (V + V.T)
    return VinfEntries(V, float(alpha), float(sigma), {"spec": spec.digest(), "m": m})


def vinf_bilinear(
    f1, f2, basis: SpectralBasis, spec: CovarianceSpec, alpha: float, sigma: float, m_trunc: int = DEFAULT_M_TRUNC
) -> float:
    """<V f1, f2> with both fields expanded in the first m_trunc modes."""
    f1 = np.asarray(f1, dtype=float)
    f2 = np.asarray(f2, dtype=float)
    if f1.shape != (basis.grid.N,) or f2.shape != (basis.grid.N,):
        raise DimensionError("fields must be sampled on the basis grid")
    V = vinf_matrix(basis, spec, alpha, sigma, m_trunc).matrix
    a1 = basis.project(f1)[:m_trunc]
    a2 = basis.project(f2)[:m_trunc]
    return float(a2 @ V @ a1)


def vinf_pointwise_profile(
    basis: SpectralBasis, spec: CovarianceSpec, alpha: float, sigma: float, m_trunc: int = DEFAULT_M_TRUNC
) -> np.ndarray:
    """Pointwise stationary variance at every grid point."""
    V = vinf_matrix(basis, spec, alpha, sigma, m_trunc).matrix
    E = basis.vectors[:m_trunc]
    return np.einsum("in,ij,jn->n", E, V, E)


def vinf_pointwise(
    p: int, basis: SpectralBasis, spec: CovarianceSpec, alpha: float, sigma: float, m_trunc: int = DEFAULT_M_TRUNC
) -> float:
    """Stationary variance of the grid value at 1-based index p."""
    N = basis.grid.N
    if not 1 <= p <= N:
        raise DimensionError(f"grid index {p} outside 1..{N}")
    V = vinf_matrix(basis, spec, alpha, sigma, m_trunc).matrix
    e = basis.vectors[:m_trunc, p - 1]
    return float(e @ V @ e)


def lyapunov_residual(entries: VinfEntries, basis: SpectralBasis, spec: CovarianceSpec) -> float:
    """max |A V + V A + sigma^2 C| on the truncated eigenbasis matrices."""
    m = entries.m
    a = entries.alpha - basis.lambdas[:m]
    C = _noise_matrix(basis, spec, m)
    R = a[:, None] * entries.matrix + entries.matrix * a[None, :] + entries.sigma**2 * C
    return float(np.max(np.abs(R)))


def _batch_stderr(x: np.ndarray, y: np.ndarray, n_batches: int = N_BATCHES) -> float:
    n = x.size
    nb = min(n_batches, n // 2)
    if nb < 2:
        return 0.0
    size = n // nb
    x = x - x[0]
    y = y - y[0]
    vals = []
    for b in range(nb):
        xs = x[b * size:(b + 1) * size]
        ys = y[b * size:(b + 1) * size]
        vals.append(np.mean(xs * ys) - xs.mean() * ys.mean())
    return float(np.std(vals, ddof=1) / math.sqrt(nb))


def _time_cov(x: np.ndarray, y: np.ndarray) -> float:
    # shifting by the first sample leaves the covariance unchanged and keeps
    # a constant series at exactly zero
    x = x - x[0]
    y = y - y[0]
    return float(np.mean(x * y) - x.mean() * y.mean())


def _post(traj: TrajectoryRecord) -> np.ndarray:
    snaps = traj.post_burn_in()
    if snaps.shape[0] < 2:
        raise EstimatorError(f"need at least 2 post-burn-in snapshots, have {snaps.shape[0]}")
    return snaps


def empirical_mode_covariance(traj: TrajectoryRecord, basis: SpectralBasis, k1: int, k2: int) -> EwsEstimate:
    """Time covariance of <u, e_k1> and <u, e_k2> over post-burn-in snapshots.

    The stderr comes from batch means over contiguous blocks of the run.
    """
    _check_modes(basis, k1, k2)
    snaps = _post(traj)
    snaps = snaps - snaps[0]  # shift-invariant; a constant run projects to exact zeros
    dx = basis.grid.dx
    a1 = dx * (snaps @ basis.vectors[k1 - 1])
    a2 = a1 if k1 == k2 else dx * (snaps @ basis.vectors[k2 - 1])
    return EwsEstimate(_time_cov(a1, a2), _batch_stderr(a1, a2), "mode-covariance", (k1, k2), 1)


def empirical_pointwise_variance(traj: TrajectoryRecord, p: int) -> EwsEstimate:
    """Time variance of the grid value at 1-based index p."""
    snaps = _post(traj)
    if not 1 <= p <= snaps.shape[1]:
        raise DimensionError(f"grid index {p} outside 1..{snaps.shape[1]}")
    x = snaps[:, p - 1]
    return EwsEstimate(_time_cov(x, x), _batch_stderr(x, x), "pointwise-variance", (p,), 1)


def ensemble_estimate(estimates) -> EwsEstimate:
    """Mean over independent seeds with stderr = sample std / sqrt(n)."""
    estimates = list(estimates)
    if not estimates:
        raise EstimatorError("empty ensemble")
    vals = np.array([e.value for e in estimates])
    n = vals.size
    se = float(np.std(vals, ddof=1) / math.sqrt(n)) if n > 1 else estimates[0].stderr
    return EwsEstimate(float(vals.mean()), se, estimates[0].kind, estimates[0].params, n)


def scaling_fit(alpha_ladder, values, lam1: float):
    """Least squares of log(value) against log(lambda_1 - alpha).

    Returns ``(slope, intercept, r2)``.
    """
    a = np.asarray(alpha_ladder, dtype=float)
    v = np.asarray(values, dtype=float)
    if a.shape != v.shape or a.size < 2:
        raise FitError("need at least two (alpha, value) pairs of equal length")
    if np.any(~(v > 0)):
        raise FitError("scaling fit needs strictly positive values")
    if np.any(~(a < lam1)):
        raise FitError("every alpha must lie below lambda_1")
    x = np.log(lam1 - a)
    y = np.log(v)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def argmax_measurement_point(basis: SpectralBasis) -> int:
    """1-based grid index maximizing |e_1|.

    Values within 1e-10 (relative) of the maximum count as ties, so the
    symmetric central pair of an even grid resolves to the smaller index.
    """
    a = np.abs(basis.vectors[0])
    return int(np.flatnonzero(a >= a.max() * (1.0 - 1e-10))[0]) + 1


def write_sweep_csv(path, rows) -> Path:
    """rows: iterables of (alpha, analytic, EwsEstimate)."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["alpha", "analytic_value", "empirical_mean", "empirical_stderr", "n_seeds"])
        for alpha, analytic, est in rows:
            w.writerow([repr(float(alpha)), repr(float(analytic)), repr(est.value), repr(est.stderr), est.n])
    return path
