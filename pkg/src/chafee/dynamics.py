"""Semi-implicit Euler-Maruyama stepping of the heterogeneous Chafee-Infante SPDE.

One step solves ``(I - dt A_alpha) u_next = u - dt u**3 + sigma * dW`` with a
Thomas factorization of the tridiagonal left-hand side. The factorization is
cached and reused while alpha stays constant.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import BlowUpError, DimensionError, ParameterError, StepError
from .noise import CovarianceSpec, RngStream, amplitude_fields
from .spectral import (
    Grid,
    Potential,
    TridiagonalOperator,
    build_laplacian,
    build_schrodinger,
    eigendecompose,
    inner_dx,
    norm_dx,
)

log = logging.getLogger(__name__)

__all__ = [
    "FieldState",
    "DriftSpec",
    "SimConfig",
    "TrajectoryRecord",
    "step_semi_implicit",
    "step_first_variation",
    "integrate_sde",
    "integrate_linear",
    "find_steady_states",
    "synchronization_gap",
    "lyapunov_functional",
    "near_zero_initial",
    "tridiagonal_solve",
]

CHUNK = 4096


@dataclass
class FieldState:
    values: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.values = np.array(self.values, dtype=float)
        if not np.all(np.isfinite(self.values)):
            raise BlowUpError("field state contains non-finite values")


@dataclass(frozen=True)
class DriftSpec:
    """alpha(t) = min(alpha0 + eps*t, alpha_max) for a ramp, alpha0 otherwise."""

    kind: str = "constant"
    alpha0: float = 0.0
    eps: float = 0.0
    alpha_max: float = math.inf

    def __post_init__(self):
        if self.kind not in ("constant", "ramp"):
            raise ParameterError(f"drift kind must be 'constant' or 'ramp', got {self.kind!r}")
        if self.kind == "ramp" and self.eps < 0:
            raise ParameterError("ramp drift rate must be nonnegative")

    @classmethod
    def constant(cls, alpha: float) -> "DriftSpec":
        return cls("constant", float(alpha))

    @property
    def is_constant(self) -> bool:
        return self.kind == "constant" or self.eps == 0.0 or self.alpha0 >= self.alpha_max

    def alpha_at(self, t):
        if self.kind == "constant":
            return np.full_like(np.asarray(t, dtype=float), self.alpha0) if np.ndim(t) else self.alpha0
        return np.minimum(self.alpha0 + self.eps * np.asarray(t, dtype=float), self.alpha_max)

    def max_on(self, T: float) -> float:
        if self.kind == "constant":
            return self.alpha0
        return float(min(self.alpha0 + self.eps * T, self.alpha_max))


def _as_drift(drift) -> DriftSpec:
    return drift if isinstance(drift, DriftSpec) else DriftSpec.constant(float(drift))


@dataclass(frozen=True)
class SimConfig:
    dt: float
    nt: int
    sigma: float = 0.0
    snapshot_stride: int = 1
    burn_in: int | None = None  # steps; None means 10% of nt

    def __post_init__(self):
        if not self.dt > 0:
            raise ParameterError(f"dt must be positive, got {self.dt}")
        if int(self.nt) != self.nt or self.nt < 1:
            raise ParameterError(f"nt must be a positive integer, got {self.nt}")
        if not self.sigma >= 0:
            raise ParameterError(f"sigma must be nonnegative, got {self.sigma}")
        if self.snapshot_stride < 1:
            raise ParameterError("snapshot_stride must be >= 1")
        object.__setattr__(self, "nt", int(self.nt))

    @classmethod
    def from_horizon(cls, T: float, dt: float, **kw) -> "SimConfig":
        return cls(dt=dt, nt=int(round(T / dt)), **kw)

    @property
    def T(self) -> float:
        return self.nt * self.dt

    @property
    def burn_in_steps(self) -> int:
        return self.nt // 10 if self.burn_in is None else int(self.burn_in)


@dataclass
class TrajectoryRecord:
    """Strided snapshots; ``values[s]`` is the field after step ``s * stride``."""

    times: np.ndarray
    values: np.ndarray
    dt: float
    stride: int
    burn_in_steps: int = 0
    seed: int | None = None
    stream: int | None = None
    config: dict = field(default_factory=dict)

    def __len__(self):
        return self.times.size

    @property
    def final(self) -> np.ndarray:
        return self.values[-1]

    def post_burn_in(self) -> np.ndarray:
        """Snapshots taken at or after the burn-in step."""
        first = -(-self.burn_in_steps // self.stride)
        return self.values[first:]

    def norms(self, grid: Grid) -> np.ndarray:
        return np.sqrt(grid.dx * np.sum(self.values**2, axis=1))

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.times).tobytes())
        h.update(np.ascontiguousarray(self.values).tobytes())
        return h.hexdigest()

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t"] + [f"u_{n}" for n in range(1, self.values.shape[1] + 1)])
            for t, row in zip(self.times, self.values):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in row])
        return path

    def to_binary(self, path, spec: CovarianceSpec | None = None) -> tuple[Path, Path]:
        """Raw float64 snapshot matrix plus a JSON sidecar manifest."""
        path = Path(path)
        np.save(path.with_suffix(".npy"), np.column_stack([self.times, self.values]))
        cfg_hash = hashlib.sha256(json.dumps(self.config, sort_keys=True).encode()).hexdigest()
        side = {
            "seed": self.seed,
            "stream": self.stream,
            "config_hash": cfg_hash,
            "spec_hash": spec.digest() if spec is not None else None,
            "dt": self.dt,
            "stride": self.stride,
            "burn_in_steps": self.burn_in_steps,
            "shape": list(self.values.shape),
        }
        meta = path.with_suffix(".json")
        meta.write_text(json.dumps(side, indent=2, sort_keys=True), encoding="utf-8")
        return path.with_suffix(".npy"), meta

    @classmethod
    def from_binary(cls, path) -> "TrajectoryRecord":
        path = Path(path)
        arr = np.load(path.with_suffix(".npy"))
        meta = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
        return cls(
            arr[:, 0].copy(),
            arr[:, 1:].copy(),
            meta["dt"],
            meta["stride"],
            meta["burn_in_steps"],
            meta["seed"],
            meta["stream"],
        )


def tridiagonal_solve(diag, off, rhs) -> np.ndarray:
    """Solve a symmetric tridiagonal system with the Thomas algorithm."""
    diag = np.ascontiguousarray(diag, dtype=float)
    off = np.ascontiguousarray(off, dtype=float)
    rhs = np.ascontiguousarray(rhs, dtype=float)
    n = diag.size
    inv_den = np.empty(n)
    cprime = np.empty(max(n - 1, 1))
    code = _kernels.thomas_factor(diag, off, inv_den, cprime)
    if code >= 0:
        raise StepError(f"singular tridiagonal system (pivot {code})")
    out = np.empty(n)
    _kernels.thomas_solve(off, inv_den, cprime, rhs, out)
    return out


def _implicit_solve(A_alpha: TridiagonalOperator, dt: float, rhs: np.ndarray) -> np.ndarray:
    return tridiagonal_solve(1.0 - dt * A_alpha.diag, -dt * A_alpha.off, rhs)


def step_semi_implicit(
    state: FieldState,
    A_alpha: TridiagonalOperator,
    dt: float,
    noise_inc: np.ndarray | None = None,
    sigma: float = 0.0,
    cubic: bool = True,
) -> FieldState:
    """Single step of the scheme; the cubic is explicit, A_alpha implicit."""
    u = state.values
    if u.size != A_alpha.n:
        raise DimensionError("state and operator sizes differ")
    rhs = u - u**3 * dt if cubic else u.copy()
    if noise_inc is not None and sigma != 0.0:
        rhs = rhs + sigma * np.asarray(noise_inc, dtype=float)
    nxt = _implicit_solve(A_alpha, dt, rhs)
    if not np.all(np.abs(nxt) <= _kernels.BLOWUP_LIMIT):
        raise BlowUpError(f"state blew up at t={state.t + dt:.6g}", step=1)
    return FieldState(nxt, state.t + dt)


def step_first_variation(
    v: FieldState, u: FieldState, A_alpha: TridiagonalOperator, dt: float
) -> FieldState:
    """Tangent step along base state u: (I - dt A_alpha) v_next = v - 3 u^2 v dt."""
    rhs = v.values - 3.0 * u.values**2 * v.values * dt
    nxt = _implicit_solve(A_alpha, dt, rhs)
    if not np.all(np.isfinite(nxt)):
        raise BlowUpError("tangent vector became non-finite", step=1)
    return FieldState(nxt, v.t + dt)


def lyapunov_functional(u, grid: Grid, g: Potential) -> float:
    """F_L(u) = 1/2 <-A u, u>_dx with A = Laplacian - g."""
    A = build_schrodinger(grid, g, 0.0)
    return 0.5 * inner_dx(-A.matvec(u), u, grid)


def near_zero_initial(spec: CovarianceSpec, grid: Grid, dt: float, sigma: float, rng: RngStream) -> FieldState:
    """Zero field plus one noise kick, the replication-run initial condition."""
    from .noise import sample_increment

    return FieldState(sigma * sample_increment(spec, grid, dt, rng), 0.0)


def raise_for_code(code: int, what: str = "integration"):
    """Translate a kernel status code into the matching exception."""
    if code == -1:
        return
    if code >= 0:
        raise BlowUpError(f"{what}: |u| exceeded {_kernels.BLOWUP_LIMIT:g} at step {code}", step=code)
    if code <= -1000:
        raise StepError(f"{what}: tangent {-1000 - code} collapsed")
    raise StepError(f"{what}: singular implicit matrix at row {-2 - code}")


class _Integrator:
    """Shared machinery for the nonlinear, linear and drifting runs."""

    def __init__(self, grid: Grid, g: Potential, spec: CovarianceSpec | None, cfg: SimConfig):
        if g.samples.size != grid.N:
            raise DimensionError(f"potential has {g.samples.size} samples, grid N={grid.N}")
        lap = build_laplacian(grid)
        self.grid = grid
        self.base_diag = np.ascontiguousarray(lap.diag - g.samples)
        self.off = np.ascontiguousarray(lap.off)
        self.cfg = cfg
        n = grid.N
        self.inv_den = np.empty(n)
        self.cprime = np.empty(n - 1)
        self.mdiag = np.empty(n)
        self.moff = np.empty(n - 1)
        self.state_alpha = np.array([np.nan])
        if spec is None or cfg.sigma == 0.0:
            self.M = 0
            self.amp = np.zeros((0, n))
        else:
            self.M = spec.M
            self.amp = amplitude_fields(spec, grid)

    def draw(self, rng: RngStream | None, n: int) -> np.ndarray:
        if self.M == 0 or rng is None:
            return np.zeros((n, 0))
        return rng.normals(n, self.M)

    def check(self, code: int, what: str = "integration"):
        raise_for_code(code, what)

    def run(self, u0: np.ndarray, drift: DriftSpec, rng: RngStream | None, cubic: bool):
        cfg = self.cfg
        u = np.array(u0, dtype=float)
        nsnap = cfg.nt // cfg.snapshot_stride + 1
        snaps = np.empty((nsnap, u.size))
        snaps[0] = u
        step = 0
        while step < cfg.nt:
            n = min(CHUNK, cfg.nt - step)
            alphas = np.ascontiguousarray(
                np.broadcast_to(drift.alpha_at((step + np.arange(n)) * cfg.dt), (n,)), dtype=float
            )
            normals = self.draw(rng, n)
            code = _kernels.sde_chunk(
                u, self.base_diag, self.off, alphas, self.state_alpha, self.inv_den,
                self.cprime, self.mdiag, self.moff, cfg.dt, cfg.sigma, normals, self.amp,
                cubic, cfg.snapshot_stride, step, snaps,
            )
            self.check(code)
            step += n
        times = cfg.dt * cfg.snapshot_stride * np.arange(nsnap)
        return TrajectoryRecord(
            times,
            snaps,
            cfg.dt,
            cfg.snapshot_stride,
            cfg.burn_in_steps,
            None if rng is None else rng.master_seed,
            None if rng is None else rng.stream_index,
            {**asdict(cfg), "drift": asdict(drift), "cubic": cubic},
        )


def integrate_sde(
    u0: FieldState,
    grid: Grid,
    g: Potential,
    drift,
    spec: CovarianceSpec | None,
    cfg: SimConfig,
    rng: RngStream | None = None,
) -> TrajectoryRecord:
    """Integrate the nonlinear SPDE for ``cfg.nt`` steps from ``u0``."""
    drift = _as_drift(drift)
    if cfg.sigma > 0 and (spec is None or rng is None):
        raise ParameterError("noisy runs need both a covariance spec and an RngStream")
    rec = _Integrator(grid, g, spec, cfg).run(u0.values, drift, rng, cubic=True)
    rec.times = rec.times + u0.t
    return rec


def integrate_linear(
    w0: FieldState,
    grid: Grid,
    g: Potential,
    alpha: float,
    spec: CovarianceSpec | None,
    cfg: SimConfig,
    rng: RngStream | None = None,
) -> TrajectoryRecord:
    """Same scheme with the cubic dropped (the linearization at zero)."""
    lam1 = eigendecompose(build_schrodinger(grid, g, 0.0), 1, grid).lambdas[0]
    if alpha >= lam1:
        warnings.warn(
            f"alpha={alpha:.4g} >= lambda_1={lam1:.4g}: the linear system has no stationary law",
            RuntimeWarning,
            stacklevel=2,
        )
    if cfg.sigma > 0 and (spec is None or rng is None):
        raise ParameterError("noisy runs need both a covariance spec and an RngStream")
    rec = _Integrator(grid, g, spec, cfg).run(w0.values, DriftSpec.constant(alpha), rng, cubic=False)
    rec.times = rec.times + w0.t
    return rec


def find_steady_states(
    g: Potential,
    alpha: float,
    grid: Grid,
    *,
    tol: float = 1e-10,
    max_iter: int = 200,
    max_halvings: int = 30,
    report: dict | None = None,
) -> list[np.ndarray]:
    """Damped Newton for A_alpha u - u^3 = 0 from seeds 0 and +-c e_1.

    Returns distinct converged states; seeds that fail are recorded in
    ``report`` (if given) rather than raised. A +-c e_1 seed that falls back
    onto the zero state is retried once from the one-mode amplitude
    sqrt((alpha - lambda_1) / <e_1^4>_dx).
    """
    basis = eigendecompose(build_schrodinger(grid, g, 0.0), min(2, grid.N), grid)
    lam1 = basis.lambdas[0]
    if basis.m > 1 and alpha >= basis.lambdas[1]:
        warnings.warn("alpha beyond lambda_2: only the first branch is searched", RuntimeWarning, stacklevel=2)
    A = build_schrodinger(grid, g, alpha)
    e1 = basis.vectors[0]
    kappa = max(alpha - lam1, 0.0)
    c = max(0.1, math.sqrt(kappa))
    c_mode = math.sqrt(kappa / inner_dx(e1**2, e1**2, grid))
    seeds = {"zero": np.zeros(grid.N), "plus": c * e1, "minus": -c * e1}

    def F(u):
        return A.matvec(u) - u**3

    def newton(u):
        r = F(u)
        rn = norm_dx(r, grid)
        it = 0
        while rn > tol and it < max_iter:
            it += 1
            try:
                du = tridiagonal_solve(A.diag - 3.0 * u**2, A.off, -r)
            except StepError:
                break
            lam = 1.0
            for _ in range(max_halvings + 1):
                trial = u + lam * du
                rt = F(trial)
                rtn = norm_dx(rt, grid)
                if rtn < rn or rtn <= tol:
                    break
                lam *= 0.5
            else:
                break
            u, r, rn = trial, rt, rtn
        return u, rn <= tol, it, rn

    found = []
    for name, u0 in seeds.items():
        u, ok, it, rn = newton(u0.copy())
        reseeded = False
        if name != "zero" and kappa > 0 and (not ok or norm_dx(u, grid) <= 1e-6):
            u, ok, it2, rn = newton(math.copysign(c_mode, u0 @ e1) * e1)
            it += it2
            reseeded = True
        if report is not None:
            report[name] = {"converged": bool(ok), "iterations": it, "residual": rn, "reseeded": reseeded}
        if not ok:
            log.info("Newton seed %s did not converge (residual %.3e)", name, rn)
            continue
        if all(norm_dx(u - v, grid) > 1e-6 for v in found):
            found.append(u)
    return found


def synchronization_gap(
    u0_a: FieldState,
    u0_b: FieldState,
    grid: Grid,
    g: Potential,
    drift,
    spec: CovarianceSpec,
    cfg: SimConfig,
    rng: RngStream,
):
    """Run two initial states on the same noise path.

    Returns ``(times, gap, rec_a, rec_b)`` with gap = ||u_a - u_b||_dx.
    """
    rec_a = integrate_sde(u0_a, grid, g, drift, spec, cfg, rng.replay())
    rec_b = integrate_sde(u0_b, grid, g, drift, spec, cfg, rng.replay())
    gap = np.sqrt(grid.dx * np.sum((rec_a.values - rec_b.values) ** 2, axis=1))
    return rec_a.times, gap, rec_a, rec_b
