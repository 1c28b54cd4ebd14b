"""Finite-time Lyapunov exponents from QR-renormalized tangent bundles.

The k-volume growth of a tangent bundle is tracked by the Gram-Schmidt
scale factors, which is the stable way to accumulate log det of the Gram
matrix. ``L_k(t) = log_volume(t) / t``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .dynamics import DriftSpec, FieldState, SimConfig, integrate_sde, near_zero_initial, raise_for_code
from .errors import DegenerateBundleError, DimensionError, ParameterError
from .noise import CovarianceSpec, RngStream, amplitude_fields
from .spectral import Grid, Potential, SpectralBasis, TridiagonalOperator, build_schrodinger, eigendecompose

__all__ = [
    "TangentBundle",
    "FtleRecord",
    "evolve_tangents",
    "ftle_on_attractor",
    "attractor_burn_in",
    "bound_report",
    "theoretical_bound",
    "scheme_rate",
    "write_ftle_csv",
    "write_ensemble_summary_csv",
]

DEFAULT_RENORM = 10


@dataclass
class TangentBundle:
    vectors: np.ndarray
    log_volume: float = 0.0
    logs: np.ndarray | None = None

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.array(self.vectors, dtype=float))
        if self.logs is None:
            self.logs = np.zeros(self.k)

    @property
    def k(self) -> int:
        return self.vectors.shape[0]

    @classmethod
    def orthonormal(cls, vectors, grid: Grid, weighted: bool = True) -> "TangentBundle":
        """Bundle spanning ``vectors``, orthonormalized without counting the volume."""
        V = np.ascontiguousarray(np.atleast_2d(np.array(vectors, dtype=float)))
        if V.shape[1] != grid.N:
            raise DimensionError(f"tangent length {V.shape[1]} != N={grid.N}")
        w = grid.dx if weighted else 1.0
        with np.errstate(divide="ignore"):
            before = 0.5 * np.log(w * np.sum(V**2, axis=1))
        scratch = np.zeros(V.shape[0])
        code = _kernels.reorthonormalize(V, w, scratch)
        if code < 0:
            # residual after projection relative to the input length
            rel = scratch - before
            bad = np.flatnonzero(~(rel > math.log(1e-10)))
            code = int(bad[0]) if bad.size else -1
        if code >= 0:
            raise DegenerateBundleError(f"initial tangent {code} is linearly dependent")
        return cls(V)


@dataclass
class FtleRecord:
    times: np.ndarray
    L: np.ndarray
    k: int
    alpha: float
    provenance: dict = field(default_factory=dict)

    @property
    def final(self) -> float:
        return float(self.L[-1])


def scheme_rate(lam, alpha: float, dt: float):
    """Per-unit-time log growth of an eigendirection under the semi-implicit step."""
    return -np.log1p((np.asarray(lam) - alpha) * dt) / dt


def theoretical_bound(basis: SpectralBasis, alpha: float, k: int) -> float:
    """Sum over j <= k of (alpha - lambda_j)."""
    if k > basis.m:
        raise ParameterError(f"need {k} eigenvalues, basis has {basis.m}")
    return float(np.sum(alpha - basis.lambdas[:k]))


def evolve_tangents(
    bundle: TangentBundle,
    base: FieldState | None,
    A_alpha: TridiagonalOperator,
    dt: float,
    n_steps: int,
    grid: Grid,
    renorm_every: int = DEFAULT_RENORM,
    *,
    spec: CovarianceSpec | None = None,
    sigma: float = 0.0,
    rng: RngStream | None = None,
    weighted: bool = True,
):
    """Advance the bundle (and the base trajectory) by ``n_steps`` steps.

    ``base=None`` freezes the base at the zero field, leaving the purely
    linear tangent dynamics. Returns ``(bundle, record_times, record_logvol, base)``
    where the record arrays hold the log-volume after each re-orthonormalization.
    """
    if renorm_every < 1:
        raise ParameterError("renorm_every must be >= 1")
    V = np.ascontiguousarray(bundle.vectors.copy())
    if V.shape[1] != grid.N or A_alpha.n != grid.N:
        raise DimensionError("bundle, operator and grid sizes disagree")
    evolve_base = base is not None
    u = np.zeros(grid.N) if base is None else base.values.copy()
    noisy = evolve_base and sigma > 0
    if noisy and (spec is None or rng is None):
        raise ParameterError("a noisy base needs a covariance spec and an RngStream")
    amp = amplitude_fields(spec, grid) if noisy else np.zeros((0, grid.N))
    M = amp.shape[0]
    base_diag = np.ascontiguousarray(A_alpha.diag)
    off = np.ascontiguousarray(A_alpha.off)
    n = grid.N
    inv_den, cprime = np.empty(n), np.empty(n - 1)
    mdiag, moff = np.empty(n), np.empty(n - 1)
    state_alpha = np.array([np.nan])
    logs = bundle.logs.copy()
    nrec = n_steps // renorm_every
    rec_t = np.empty(nrec)
    rec_lv = np.empty(nrec)
    rec_count = np.zeros(1, dtype=np.int64)
    dxw = grid.dx if weighted else 1.0
    step = 0
    while step < n_steps:
        m = min(8192, n_steps - step)
        alphas = np.zeros(m)
        normals = rng.normals(m, M) if noisy else np.zeros((m, 0))
        code = _kernels.tangent_chunk(
            u, V, base_diag, off, alphas, state_alpha, inv_den, cprime, mdiag, moff,
            dt, sigma, normals, amp, evolve_base, renorm_every, step, dxw, logs,
            rec_t, rec_lv, rec_count,
        )
        if code <= -1000:
            raise DegenerateBundleError(f"tangent {-1000 - code} collapsed (scale < 1e-300)")
        raise_for_code(code, "tangent evolution")
        step += m
    out = TangentBundle(V, float(np.sum(logs)), logs)
    base_out = FieldState(u, (0.0 if base is None else base.t) + n_steps * dt)
    return out, rec_t, rec_lv, base_out


def attractor_burn_in(lam1: float, alpha: float) -> float:
    """Burn-in horizon used to approximate the singleton random attractor."""
    return 20.0 / (lam1 - alpha) if alpha < lam1 else 50.0


def ftle_on_attractor(
    grid: Grid,
    g: Potential,
    alpha: float,
    spec: CovarianceSpec | None,
    cfg: SimConfig,
    k: int,
    rng: RngStream | None,
    *,
    renorm_every: int = DEFAULT_RENORM,
    burn_in_time: float | None = None,
    v0=None,
    basis: SpectralBasis | None = None,
) -> FtleRecord:
    """L_k(t) along the trajectory after a burn-in onto the attractor.

    ``cfg.nt`` is the length of the measurement window; the clock is reset to
    zero after burn-in. Initial tangents default to e_1..e_k.
    """
    if basis is None:
        basis = eigendecompose(build_schrodinger(grid, g, 0.0), max(k, 1), grid)
    lam1 = float(basis.lambdas[0])
    if burn_in_time is None:
        burn_in_time = (
            attractor_burn_in(lam1, alpha) if cfg.burn_in is None else cfg.burn_in * cfg.dt
        )
    nb = int(round(burn_in_time / cfg.dt))
    noisy = cfg.sigma > 0
    if noisy:
        u0 = near_zero_initial(spec, grid, cfg.dt, cfg.sigma, rng)
    else:
        u0 = FieldState(np.zeros(grid.N))
    if nb > 0:
        bcfg = SimConfig(cfg.dt, nb, cfg.sigma, snapshot_stride=nb, burn_in=0)
        rec = integrate_sde(u0, grid, g, DriftSpec.constant(alpha), spec if noisy else None, bcfg, rng if noisy else None)
        u0 = FieldState(rec.final, 0.0)
    else:
        u0 = FieldState(u0.values, 0.0)
    V0 = basis.vectors[:k] if v0 is None else v0
    bundle = TangentBundle.orthonormal(V0, grid)
    A = build_schrodinger(grid, g, alpha)
    _, t, lv, _ = evolve_tangents(
        bundle, u0, A, cfg.dt, cfg.nt, grid, renorm_every,
        spec=spec if noisy else None, sigma=cfg.sigma, rng=rng if noisy else None,
    )
    return FtleRecord(
        t,
        lv / t,
        k,
        alpha,
        {
            "seed": None if rng is None else rng.master_seed,
            "stream": None if rng is None else rng.stream_index,
            "burn_in_time": burn_in_time,
            "dt": cfg.dt,
            "sigma": cfg.sigma,
        },
    )


def bound_report(records, basis: SpectralBasis, alpha: float, tol: float = 0.02, t_small: float | None = None) -> dict:
    """Ensemble diagnostics against the pathwise upper bound.

    ``fraction_positive`` uses L at the last record not after ``t_small``
    (the final record when ``t_small`` is None).
    """
    records = list(records)
    if not records:
        raise ParameterError("empty ensemble")
    k = records[0].k
    if any(r.k != k or r.alpha != alpha for r in records):
        raise ParameterError("ensemble is not homogeneous in (k, alpha)")
    bound = theoretical_bound(basis, alpha, k)
    Ls = np.vstack([r.L for r in records])
    violating = Ls > bound + tol
    if t_small is None:
        idx = Ls.shape[1] - 1
    else:
        idx = max(int(np.searchsorted(records[0].times, t_small, side="right")) - 1, 0)
    at = Ls[:, idx]
    return {
        "k": k,
        "alpha": alpha,
        "n": len(records),
        "theoretical_bound": bound,
        "violation_fraction": float(np.mean(np.any(violating, axis=1))),
        "violation_fraction_by_time": violating.mean(axis=0),
        "empirical_max": float(Ls.max()),
        "final_max": float(Ls[:, -1].max()),
        "final_mean": float(Ls[:, -1].mean()),
        "gap_to_bound": float(bound - Ls.max()),
        "fraction_positive": float(np.mean(at > 0)),
        "max_at_t": float(at.max()),
    }


def write_ftle_csv(path, rec: FtleRecord) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", f"L_{rec.k}"])
        for t, v in zip(rec.times, rec.L):
            w.writerow([repr(float(t)), repr(float(v))])
    return path


def write_ensemble_summary_csv(path, reports) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["alpha", "k", "mean", "max", "fraction_positive", "theoretical_bound"])
        for r in reports:
            w.writerow([
                repr(float(r["alpha"])), r["k"], repr(r["final_mean"]), repr(r["final_max"]),
                repr(r["fraction_positive"]), repr(r["theoretical_bound"]),
            ])
    return path
