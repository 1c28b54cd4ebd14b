"""First exits of stochastic paths from A^s-norm tubes around the deterministic flow.

The tube of radius h is ``{u : ||u - u_ref(t)||_{A^s} < h}``. Exit times are
detected at snapshot resolution and linearly interpolated between the
bracketing snapshots. Paths that never leave within the horizon carry the
sentinel ``NO_EXIT`` (infinity) and enter moments as the horizon T.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .dynamics import (
    DriftSpec,
    FieldState,
    SimConfig,
    TrajectoryRecord,
    _as_drift,
    integrate_sde,
    lyapunov_functional,
)
from .errors import AlignmentError, DimensionError, ParameterError, ScopeError, StepError, TruncationError
from .noise import CovarianceSpec, RngStream
from .spectral import Grid, Potential, SpectralBasis, solve_spectrum

__all__ = [
    "NO_EXIT",
    "SobolevSpec",
    "ExitExperiment",
    "TailTable",
    "MomentTable",
    "a_s_norm",
    "deterministic_reference",
    "first_exit_time",
    "exit_times_from_deviation",
    "member_exit_times",
    "simulate_exit_times",
    "tail_table",
    "moment_table",
    "exit_tail_sweep",
    "exit_moment_sweep",
    "slow_drift_run",
    "write_tail_csv",
    "write_moment_csv",
]

NO_EXIT = math.inf


@dataclass(frozen=True)
class SobolevSpec:
    s: float = 0.4
    m: int | None = None  # None: every mode in the basis

    def __post_init__(self):
        if not 0 <= self.s <= 1:
            raise ParameterError(f"Sobolev exponent must lie in [0, 1], got {self.s}")
        if self.s >= 0.5:
            warnings.warn(f"s={self.s} >= 1/2 lies outside the range of the exit-tail estimate", stacklevel=2)
        if self.m is not None and self.m < 1:
            raise TruncationError("Sobolev mode count must be >= 1")


def a_s_norm(phi, basis: SpectralBasis, sob: SobolevSpec) -> np.ndarray | float:
    """sqrt(sum_k lambda_k^s <phi, e_k>^2) over the first m modes.

    Accepts one field or a stack of fields (rows).
    """
    m = basis.m if sob.m is None else sob.m
    if m > basis.m:
        raise TruncationError(f"A^s norm needs {m} modes, basis has {basis.m}")
    phi = np.asarray(phi, dtype=float)
    if phi.shape[-1] != basis.grid.N:
        raise DimensionError(f"field length {phi.shape[-1]} != N={basis.grid.N}")
    c = basis.grid.dx * (phi @ basis.vectors[:m].T)
    w = basis.lambdas[:m] ** sob.s
    out = np.sqrt(c**2 @ w)
    return float(out) if np.ndim(out) == 0 else out


def _check_scope(drift: DriftSpec, T: float, lam1: float):
    top = drift.max_on(T)
    if not top < lam1:
        raise ScopeError(f"alpha reaches {top:.6g} >= lambda_1={lam1:.6g} within the horizon T={T:g}")


def deterministic_reference(
    u0: FieldState,
    grid: Grid,
    g: Potential,
    drift,
    cfg: SimConfig,
    basis: SpectralBasis | None = None,
    *,
    monotone_tol: float = 1e-10,
) -> TrajectoryRecord:
    """Noise-free path from u0, restricted to alpha(t) < lambda_1.

    Along the path F_L = ||u||_A^2 / 2 must not increase (relative slack
    ``monotone_tol``); a violation raises StepError. The fitted decay rate
    c1 with F_L(t) ~ exp(-2 c1 t) is stored in ``record.config["diagnostics"]``.
    """
    drift = _as_drift(drift)
    if basis is None:
        basis = solve_spectrum(grid, g, 1)
    _check_scope(drift, cfg.T, float(basis.lambdas[0]))
    det = SimConfig(cfg.dt, cfg.nt, 0.0, cfg.snapshot_stride, cfg.burn_in)
    rec = integrate_sde(u0, grid, g, drift, None, det, None)
    F = np.array([lyapunov_functional(u, grid, g) for u in rec.values])
    slack = monotone_tol * max(F[0], np.finfo(float).tiny)
    if np.any(np.diff(F) > slack):
        i = int(np.flatnonzero(np.diff(F) > slack)[0]) + 1
        raise StepError(f"F_L increased at snapshot {i} of the deterministic reference", step=i)
    pos = F > 0
    c1 = math.nan
    if np.count_nonzero(pos) >= 2:
        slope = np.polyfit(rec.times[pos], np.log(F[pos]), 1)[0]
        c1 = -0.5 * float(slope)
    rec.config["diagnostics"] = {"F_L_initial": float(F[0]), "F_L_final": float(F[-1]), "c1": c1}
    return rec


def exit_times_from_deviation(times: np.ndarray, dev: np.ndarray, h_ladder) -> np.ndarray:
    """First crossing time of ``dev >= h`` for every h, linearly interpolated."""
    h_ladder = np.atleast_1d(np.asarray(h_ladder, dtype=float))
    runmax = np.maximum.accumulate(dev)
    out = np.full(h_ladder.shape, NO_EXIT)
    for j, h in enumerate(h_ladder):
        i = int(np.searchsorted(runmax, h, side="left"))
        if i >= dev.size:
            continue
        if i == 0:
            out[j] = times[0]
            continue
        d0, d1 = dev[i - 1], dev[i]
        frac = (h - d0) / (d1 - d0)
        out[j] = times[i - 1] + frac * (times[i] - times[i - 1])
    return out


def first_exit_time(
    traj: TrajectoryRecord, ref: TrajectoryRecord, h: float, sob: SobolevSpec, basis: SpectralBasis
) -> float:
    """Exit time from the radius-h tube, or NO_EXIT."""
    if traj.times.shape != ref.times.shape or not np.allclose(traj.times, ref.times, rtol=0, atol=1e-9):
        raise AlignmentError("trajectory and reference do not share snapshot times")
    if not h > 0:
        raise ParameterError("tube radius must be positive")
    dev = a_s_norm(traj.values - ref.values, basis, sob)
    return float(exit_times_from_deviation(traj.times, np.atleast_1d(dev), [h])[0])


@dataclass
class ExitExperiment:
    grid: Grid
    g: Potential
    spec: CovarianceSpec
    h_ladder: tuple
    sigma: float = 0.05
    s: float = 0.4
    T: float = 50.0
    dt: float = 0.01
    n_members: int = 200
    drift: DriftSpec | float = 0.0
    stride: int = 1
    m: int | None = None
    u0: np.ndarray | None = None

    def __post_init__(self):
        problems = []
        h = np.asarray(self.h_ladder, dtype=float)
        if h.size == 0:
            problems.append("h ladder is empty")
        elif np.any(~(h > 0)) or np.any(np.diff(h) <= 0):
            problems.append("h ladder must be positive and strictly increasing")
        if np.min(self.g.samples) < 1.0 - 1e-12:
            problems.append(f"exit experiments need g >= 1; min g = {np.min(self.g.samples):.6g}")
        if self.n_members < 1:
            problems.append("ensemble size must be positive")
        if self.sigma < 0:
            problems.append("sigma must be nonnegative")
        if problems:
            raise ParameterError("; ".join(problems))
        self.h_ladder = tuple(float(v) for v in h)
        self.drift = _as_drift(self.drift)
        self.sobolev = SobolevSpec(self.s, self.m)

    @property
    def cfg(self) -> SimConfig:
        return SimConfig.from_horizon(self.T, self.dt, sigma=self.sigma, snapshot_stride=self.stride, burn_in=0)

    @property
    def x_ladder(self) -> np.ndarray:
        """h^2 / (q_* sigma^2), the exponent scale of the tail estimate."""
        with np.errstate(divide="ignore"):
            return np.asarray(self.h_ladder) ** 2 / (self.spec.q_star * self.sigma**2)

    def initial(self) -> FieldState:
        return FieldState(np.zeros(self.grid.N) if self.u0 is None else self.u0, 0.0)

    def basis(self) -> SpectralBasis:
        m = self.grid.N if self.m is None else self.m
        return solve_spectrum(self.grid, self.g, m)

    def reference(self, basis: SpectralBasis | None = None) -> TrajectoryRecord:
        return deterministic_reference(self.initial(), self.grid, self.g, self.drift, self.cfg, basis)


def member_exit_times(exp: ExitExperiment, ref_values: np.ndarray, basis: SpectralBasis, seed: int, index: int):
    """Exit times over the h ladder for ensemble member ``index``."""
    rec = integrate_sde(exp.initial(), exp.grid, exp.g, exp.drift, exp.spec, exp.cfg, RngStream(seed, index))
    dev = a_s_norm(rec.values - ref_values, basis, exp.sobolev)
    return exit_times_from_deviation(rec.times, dev, exp.h_ladder)


def simulate_exit_times(exp: ExitExperiment, seed: int, members=None, basis=None, ref=None) -> np.ndarray:
    """Matrix of exit times, one row per member and one column per h."""
    basis = exp.basis() if basis is None else basis
    _check_scope(exp.drift, exp.T, float(basis.lambdas[0]))
    ref = exp.reference(basis) if ref is None else ref
    members = range(exp.n_members) if members is None else members
    return np.vstack([member_exit_times(exp, ref.values, basis, seed, i) for i in members])


@dataclass
class TailTable:
    rows: list
    slope: float = math.nan
    intercept: float = math.nan
    r2: float = math.nan
    all_censored: bool = False
    note: str = ""


@dataclass
class MomentTable:
    rows: list
    spearman: float = math.nan
    grows: bool = False
    flagged: list = field(default_factory=list)


def tail_table(taus: np.ndarray, exp: ExitExperiment, confidence: float = 0.95) -> TailTable:
    """P(tau < T) per h with Wilson intervals, plus the log P regression."""
    taus = np.atleast_2d(taus)
    n = taus.shape[0]
    x = exp.x_ladder
    rows = []
    for j, h in enumerate(exp.h_ladder):
        k = int(np.count_nonzero(taus[:, j] < exp.T + 1e-12))
        ci = stats.binomtest(k, n).proportion_ci(confidence, method="wilson")
        rows.append({
            "h": h, "n": n, "n_exited": k, "p_hat": k / n,
            "ci_low": float(ci.low), "ci_high": float(ci.high), "x": float(x[j]),
        })
    p = np.array([r["p_hat"] for r in rows])
    if not np.any(p > 0):
        return TailTable(rows, all_censored=True, note="no exits at any h; regression skipped")
    use = p > 0
    if np.count_nonzero(use) < 2:
        return TailTable(rows, note="fewer than two radii with exits; regression skipped")
    xs, ys = x[use], np.log(p[use])
    slope, intercept = np.polyfit(xs, ys, 1)
    resid = ys - (slope * xs + intercept)
    ss = float(np.sum((ys - ys.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss if ss > 0 else 1.0
    return TailTable(rows, float(slope), float(intercept), r2)


def _jackknife(values: np.ndarray) -> float:
    n = values.size
    if n < 2:
        return 0.0
    loo = (values.sum() - values) / (n - 1)
    return float(math.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2)))


def moment_table(taus: np.ndarray, exp: ExitExperiment, k_max: int = 2) -> MomentTable:
    """E[min(tau, T)^k] with jackknife errors and censoring flags."""
    if k_max < 1:
        raise ParameterError("k_max must be >= 1")
    taus = np.atleast_2d(taus)
    capped = np.minimum(taus, exp.T)
    rows, flagged = [], []
    for j, h in enumerate(exp.h_ladder):
        cens = float(np.mean(~(taus[:, j] < exp.T + 1e-12)))
        if cens > 0.5:
            flagged.append(h)
        for k in range(1, k_max + 1):
            v = capped[:, j] ** k
            rows.append({
                "h": h, "k": k, "moment": float(v.mean()), "jackknife_err": _jackknife(v),
                "censored_fraction": cens, "lower_bound": cens > 0.5,
            })
    first = np.array([r["moment"] for r in rows if r["k"] == 1])
    rho = math.nan
    if first.size >= 2 and np.ptp(first) > 0:
        rho = float(stats.spearmanr(exp.x_ladder, np.log(first)).statistic)
    return MomentTable(rows, rho, bool(rho >= 0.9), flagged)


def exit_tail_sweep(exp: ExitExperiment, seed: int) -> TailTable:
    return tail_table(simulate_exit_times(exp, seed), exp)


def exit_moment_sweep(exp: ExitExperiment, k_max: int, seed: int) -> MomentTable:
    return moment_table(simulate_exit_times(exp, seed), exp, k_max)


def slow_drift_run(exp: ExitExperiment, seed: int, index: int = 0):
    """One drifting path measured against the drifting deterministic reference.

    Returns ``(record, reference, exit_times)`` with one exit time per h.
    """
    basis = exp.basis()
    _check_scope(exp.drift, exp.T, float(basis.lambdas[0]))
    ref = exp.reference(basis)
    rec = integrate_sde(exp.initial(), exp.grid, exp.g, exp.drift, exp.spec, exp.cfg, RngStream(seed, index))
    dev = a_s_norm(rec.values - ref.values, basis, exp.sobolev)
    return rec, ref, exit_times_from_deviation(rec.times, dev, exp.h_ladder)


def write_tail_csv(path, table: TailTable) -> Path:
    path = Path(path)
    cols = ["h", "n", "n_exited", "p_hat", "ci_low", "ci_high", "x"]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in table.rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
    return path


def write_moment_csv(path, table: MomentTable) -> Path:
    path = Path(path)
    cols = ["h", "k", "moment", "jackknife_err", "censored_fraction"]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in table.rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
    return path
