"""Truncated Q-Wiener noise with an orthonormal mixture of the first D sine modes."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import DimensionError, ParameterError
from .spectral import Grid, SpectralBasis, sine_modes

__all__ = [
    "CovarianceSpec",
    "ValidationReport",
    "RngStream",
    "validate",
    "random_spec",
    "noise_fields",
    "amplitude_fields",
    "sample_increment",
    "covariance_in_basis",
    "write_covariance_csv",
]

ORTHO_TOL = 1e-10


@dataclass(frozen=True)
class CovarianceSpec:
    """Eigenvalues ``q`` (length M) and a D x D orthonormal ``mix``.

    Noise eigenfield n is sum_k mix[n, k] e'_k for n <= D and e'_n for D < n <= M.
    """

    q: np.ndarray
    mix: np.ndarray
    decay_exponent: float = 0.5

    def __post_init__(self):
        q = np.array(self.q, dtype=float).reshape(-1)
        mix = np.array(self.mix, dtype=float)
        if mix.ndim != 2 or mix.shape[0] != mix.shape[1]:
            raise DimensionError(f"mixing matrix must be square, got shape {mix.shape}")
        if mix.shape[0] > q.size:
            raise ParameterError(f"mixing cutoff D={mix.shape[0]} exceeds M={q.size}")
        q.setflags(write=False)
        mix.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "mix", mix)

    @property
    def M(self) -> int:
        return self.q.size

    @property
    def D(self) -> int:
        return self.mix.shape[0]

    @property
    def q_star(self) -> float:
        return float(np.max(self.q))

    @classmethod
    def identity(cls, M: int, q=None, D: int | None = None) -> "CovarianceSpec":
        D = M if D is None else D
        return cls(np.ones(M) if q is None else q, np.eye(D))

    def to_dict(self) -> dict:
        return {
            "M": self.M,
            "D": self.D,
            "q": [float(v) for v in self.q],
            "mix": [float(v) for v in self.mix.reshape(-1)],
            "decay_exponent": float(self.decay_exponent),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CovarianceSpec":
        """Inverse of ``to_dict``; ``mix`` may also be ``"random:<seed>"``."""
        M = int(d["M"])
        D = int(d.get("D", M))
        mix = d.get("mix")
        q = d.get("q")
        if isinstance(mix, str) and mix.startswith("random:"):
            seed = int(mix.split(":", 1)[1])
            spec = random_spec(M, D, seed)
            if q is not None:
                spec = cls(q, spec.mix, d.get("decay_exponent", 0.5))
            else:
                spec = cls(spec.q, spec.mix, d.get("decay_exponent", 0.5))
            return spec
        if mix is None:
            mix = np.eye(D)
        mix = np.asarray(mix, dtype=float).reshape(D, D)
        q = np.ones(M) if q is None else q
        return cls(q, mix, d.get("decay_exponent", 0.5))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ValidationReport:
    ok: bool
    violations: list = field(default_factory=list)
    decay_sum: float = float("nan")
    note: str = "decay condition checked on the truncated sum only (j <= M)"

    def __bool__(self):
        return self.ok


def validate(spec: CovarianceSpec, L: float = math.pi) -> ValidationReport:
    """Check positivity, orthonormal mixing and the truncated decay sum.

    The decay sum uses the continuum Laplacian eigenvalues (pi j / L)^2.
    """
    violations = []
    if not np.all(np.isfinite(spec.q)) or np.any(spec.q <= 0):
        violations.append("positivity: every q_j must be > 0")
    mix = spec.mix
    err = np.max(np.abs(mix.T @ mix - np.eye(spec.D))) if spec.D else 0.0
    if not err <= ORTHO_TOL:
        violations.append(f"orthonormality: max |O^T O - I| = {err:.3e} > {ORTHO_TOL:g}")
    j = np.arange(1, spec.M + 1)
    lam = (np.pi * j / L) ** 2
    with np.errstate(over="ignore", invalid="ignore"):
        decay = float(np.sum(spec.q * lam**spec.decay_exponent))
    if not math.isfinite(decay):
        violations.append("decay: truncated sum q_j lambda_j'^gamma is not finite")
    return ValidationReport(not violations, violations, decay)


def random_spec(M: int, D: int, seed: int, decay_exponent: float = 0.5) -> CovarianceSpec:
    """Random orthonormal mix and q drawn uniform on (0, 1], rescaled to max 1.

    The mix is the Q factor of a Gaussian matrix (positive R diagonal), with
    rows then signed so that the diagonal of the mix is nonnegative.
    """
    if D > M:
        raise ParameterError(f"mixing cutoff D={D} must not exceed M={M}")
    if D < 1 or M < 1:
        raise ParameterError("M and D must be positive")
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((D, D))
    Qm, R = np.linalg.qr(Z)
    Qm = Qm * np.sign(np.diag(R))
    # row n is noise field b_n, whose sign does not change Q; fix it so O_nn >= 0
    Qm = Qm * np.where(np.diag(Qm) < 0, -1.0, 1.0)[:, None]
    q = 1.0 - rng.random(M)  # uniform on (0, 1]
    q = q / q.max()
    return CovarianceSpec(q, Qm, decay_exponent)


class RngStream:
    """Per-trajectory normal stream keyed by (master_seed, stream_index).

    Draws are sequential, so replaying a stream from the start reproduces
    every increment bit for bit regardless of how draws are batched.
    """

    def __init__(self, master_seed: int, stream_index: int = 0):
        self.master_seed = int(master_seed)
        self.stream_index = int(stream_index)
        ss = np.random.SeedSequence(self.master_seed, spawn_key=(self.stream_index,))
        self._gen = np.random.Generator(np.random.PCG64(ss))
        self.step = 0

    def normals(self, n_steps: int, M: int) -> np.ndarray:
        out = self._gen.standard_normal((n_steps, M))
        self.step += n_steps
        return out

    def replay(self) -> "RngStream":
        """Fresh stream with identical keys, rewound to step 0."""
        return RngStream(self.master_seed, self.stream_index)

    def __repr__(self):
        return f"RngStream(seed={self.master_seed}, index={self.stream_index}, step={self.step})"


def noise_fields(spec: CovarianceSpec, grid: Grid) -> np.ndarray:
    """Sampled noise eigenfields b_n, shape (M, N)."""
    if spec.M > grid.N:
        raise DimensionError(f"M={spec.M} noise modes exceed N={grid.N}")
    e = sine_modes(grid, spec.M)
    b = e.copy()
    D = spec.D
    b[:D] = spec.mix @ e[:D]
    return b


def amplitude_fields(spec: CovarianceSpec, grid: Grid) -> np.ndarray:
    """sqrt(q_n) * b_n, shape (M, N), contiguous for the step kernels."""
    return np.ascontiguousarray(np.sqrt(spec.q)[:, None] * noise_fields(spec, grid))


def sample_increment(spec: CovarianceSpec, grid: Grid, dt: float, rng: RngStream) -> np.ndarray:
    """One Q-Wiener increment over dt (without the sigma factor)."""
    if dt < 0:
        raise ParameterError("dt must be nonnegative")
    w = rng.normals(1, spec.M)[0]
    out = np.empty(grid.N)
    _kernels.noise_increment(w, amplitude_fields(spec, grid), math.sqrt(dt), out)
    return out


def covariance_in_basis(spec: CovarianceSpec, basis: SpectralBasis, grid: Grid) -> np.ndarray:
    """Matrix sum_n q_n <e_i, b_n> <e_j, b_n> over the realized noise fields."""
    b = noise_fields(spec, grid)
    P = grid.dx * (basis.vectors @ b.T)  # (m, M)
    C = (P * spec.q[None, :]) @ P.T
    return 0.5 * (C + C.T)


def write_covariance_csv(path, C: np.ndarray) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j", "value"])
        for i in range(C.shape[0]):
            for j in range(C.shape[1]):
                w.writerow([i + 1, j + 1, repr(float(C[i, j]))])
    return path
