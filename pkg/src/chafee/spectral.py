"""Finite-difference Schrödinger operators on [0, L] with Dirichlet ends.

The grid stores interior points only; boundary values are implicit zeros.
All inner products are the discrete ones, ``dx * sum(v * w)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import eigh_tridiagonal

from .errors import (
    DegenerateInputError,
    DimensionError,
    InvalidGridError,
    NumericalError,
    TruncationError,
)

__all__ = [
    "Grid",
    "Potential",
    "TridiagonalOperator",
    "SpectralBasis",
    "build_laplacian",
    "build_schrodinger",
    "eigendecompose",
    "solve_spectrum",
    "inner_dx",
    "norm_dx",
    "sine_modes",
    "laplacian_eigenvalues",
    "count_sign_changes",
    "asymptotic_gap",
    "write_spectrum_csv",
]


@dataclass(frozen=True)
class Grid:
    L: float
    N: int

    def __post_init__(self):
        if not (self.L > 0 and math.isfinite(self.L)):
            raise InvalidGridError(f"domain length must be positive, got {self.L}")
        if int(self.N) != self.N or self.N < 1:
            raise InvalidGridError(f"interior point count must be a positive integer, got {self.N}")
        object.__setattr__(self, "N", int(self.N))

    @property
    def dx(self) -> float:
        return self.L / (self.N + 1)

    @property
    def x(self) -> np.ndarray:
        return self.dx * np.arange(1, self.N + 1)


@dataclass(frozen=True)
class Potential:
    """Potential samples g(x_n) on a grid plus a descriptor tag."""

    samples: np.ndarray
    descriptor: str = "custom"

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim != 1:
            raise DimensionError("potential samples must be a 1-d array")
        if not np.all(np.isfinite(s)):
            raise DegenerateInputError("potential samples must be finite")
        if np.any(s < 0):
            raise DegenerateInputError(
                f"potential must be nonnegative; min sample is {s.min():.6g}"
            )
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    @classmethod
    def from_descriptor(cls, descriptor: str, grid: Grid) -> "Potential":
        """Sample one of the named potentials.

        Accepted: ``zero``, ``constant:<c>``, ``cos3plus1``, ``linear``,
        ``file:<path>`` (one sample per line, N lines).
        """
        x = grid.x
        d = descriptor.strip()
        if d == "zero":
            s = np.zeros(grid.N)
        elif d.startswith("constant:"):
            s = np.full(grid.N, float(d.split(":", 1)[1]))
        elif d == "cos3plus1":
            s = np.cos(3 * x) + 1.0
        elif d == "cos3plus2":
            s = np.cos(3 * x) + 2.0
        elif d == "linear":
            s = x / grid.L
        elif d.startswith("file:"):
            s = np.loadtxt(d.split(":", 1)[1], dtype=float, ndmin=1)
            if s.size != grid.N:
                raise DimensionError(f"{d}: expected {grid.N} samples, found {s.size}")
        else:
            raise DegenerateInputError(f"unknown potential descriptor {descriptor!r}")
        return cls(s, d)

    def mean(self, grid: Grid) -> float:
        """Discrete average <g, 1>_dx / <1, 1>_dx over the interior points."""
        return float(np.mean(self.samples))


@dataclass(frozen=True)
class TridiagonalOperator:
    """Symmetric tridiagonal matrix (one off-diagonal array serves both sides)."""

    diag: np.ndarray
    off: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.diag, dtype=float)
        o = np.asarray(self.off, dtype=float)
        if o.size != max(d.size - 1, 0):
            raise DimensionError(f"off-diagonal has {o.size} entries, expected {d.size - 1}")
        object.__setattr__(self, "diag", d)
        object.__setattr__(self, "off", o)

    @property
    def n(self) -> int:
        return self.diag.size

    def matvec(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        out = self.diag * v
        out[:-1] += self.off * v[1:]
        out[1:] += self.off * v[:-1]
        return out

    def shifted(self, c: float) -> "TridiagonalOperator":
        return TridiagonalOperator(self.diag + c, self.off.copy())

    def negated(self) -> "TridiagonalOperator":
        return TridiagonalOperator(-self.diag, -self.off)

    def to_dense(self) -> np.ndarray:
        return np.diag(self.diag) + np.diag(self.off, 1) + np.diag(self.off, -1)


@dataclass(frozen=True)
class SpectralBasis:
    """Leading eigenpairs of -A with discretely orthonormal eigenvectors.

    ``vectors`` has shape (m, N); row k-1 holds e_k sampled at the interior points.
    """

    lambdas: np.ndarray
    vectors: np.ndarray
    lambdas_prime: np.ndarray
    mu: np.ndarray
    grid: Grid = field(repr=False)

    @property
    def m(self) -> int:
        return self.lambdas.size

    def project(self, v: np.ndarray) -> np.ndarray:
        """Coefficients <v, e_k>_dx for k = 1..m (works row-wise on 2-d input)."""
        return self.grid.dx * (np.asarray(v, dtype=float) @ self.vectors.T)


def build_laplacian(grid: Grid) -> TridiagonalOperator:
    if grid.N < 2:
        raise InvalidGridError(f"need at least 2 interior points, got N={grid.N}")
    dx2 = grid.dx**2
    return TridiagonalOperator(np.full(grid.N, -2.0 / dx2), np.full(grid.N - 1, 1.0 / dx2))


def build_schrodinger(grid: Grid, g: Potential, alpha: float = 0.0) -> TridiagonalOperator:
    """Discrete A_alpha = Laplacian - diag(g) + alpha I."""
    if g.samples.size != grid.N:
        raise DimensionError(f"potential has {g.samples.size} samples, grid has N={grid.N}")
    lap = build_laplacian(grid)
    return TridiagonalOperator(lap.diag - g.samples + alpha, lap.off)


def laplacian_eigenvalues(grid: Grid, m: int) -> np.ndarray:
    """Exact eigenvalues of the negated difference Laplacian."""
    k = np.arange(1, m + 1)
    return (2.0 / grid.dx**2) * (1.0 - np.cos(k * np.pi / (grid.N + 1)))


def sine_modes(grid: Grid, m: int) -> np.ndarray:
    """Rows sqrt(2/L) sin(pi k x_n / L), k = 1..m; discretely orthonormal for m <= N."""
    k = np.arange(1, m + 1)[:, None]
    return math.sqrt(2.0 / grid.L) * np.sin(np.pi * k * grid.x[None, :] / grid.L)


def eigendecompose(op: TridiagonalOperator, m: int, grid: Grid) -> SpectralBasis:
    """Lowest m eigenpairs of -op.

    ``op`` is the discrete A (not negated); the returned lambdas are the
    eigenvalues of -A in ascending order.
    """
    N = op.n
    if N != grid.N:
        raise DimensionError(f"operator size {N} does not match grid N={grid.N}")
    if m < 1:
        raise TruncationError(f"mode count must be >= 1, got {m}")
    if m > N:
        raise TruncationError(f"requested {m} modes but the grid has only N={N}")
    try:
        lam, vec = eigh_tridiagonal(
            -op.diag, -op.off, select="i", select_range=(0, m - 1), lapack_driver="stemr"
        )
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure path
        idx = None
        for tok in str(exc).split():
            if tok.isdigit():
                idx = int(tok)
                break
        raise NumericalError(f"tridiagonal eigensolver failed: {exc}", index=idx) from exc
    if not np.all(np.isfinite(lam)):
        bad = int(np.flatnonzero(~np.isfinite(lam))[0]) + 1
        raise NumericalError("non-finite eigenvalue", index=bad)

    vec = vec.T / math.sqrt(grid.dx)
    # re-orthonormalize in the dx product; stemr is accurate but not to 1e-12 for clustered pairs
    q, r = np.linalg.qr(vec.T * math.sqrt(grid.dx))
    q = q * np.sign(np.diag(r))
    vec = q.T / math.sqrt(grid.dx)

    sines = sine_modes(grid, m)
    overlap = grid.dx * np.sum(vec * sines, axis=1)
    for k in range(m):
        if abs(overlap[k]) >= 1e-12:
            if overlap[k] < 0:
                vec[k] = -vec[k]
        else:
            nz = np.flatnonzero(np.abs(vec[k]) > 1e-14)
            if nz.size and vec[k, nz[0]] < 0:
                vec[k] = -vec[k]

    kk = np.arange(1, m + 1)
    return SpectralBasis(
        lambdas=lam,
        vectors=vec,
        lambdas_prime=(np.pi * kk / grid.L) ** 2,
        mu=laplacian_eigenvalues(grid, m),
        grid=grid,
    )


def solve_spectrum(grid: Grid, g: Potential, m: int | None = None) -> SpectralBasis:
    """Convenience wrapper: eigenpairs of -(Laplacian - g)."""
    return eigendecompose(build_schrodinger(grid, g, 0.0), grid.N if m is None else m, grid)


def inner_dx(v, w, grid: Grid) -> float:
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    if v.shape != w.shape or v.shape[-1] != grid.N:
        raise DimensionError(f"shape mismatch: {v.shape} vs {w.shape} on N={grid.N}")
    return grid.dx * float(np.dot(v, w))


def norm_dx(v, grid: Grid) -> float:
    return math.sqrt(inner_dx(v, v, grid))


def count_sign_changes(v) -> int:
    """Number of strict sign alternations between consecutive nonzero entries."""
    v = np.asarray(v, dtype=float)
    nz = v[v != 0]
    if nz.size == 0:
        raise DegenerateInputError("sign changes undefined for the zero vector")
    s = np.sign(nz)
    return int(np.count_nonzero(s[1:] != s[:-1]))


def asymptotic_gap(basis: SpectralBasis, g: Potential, k: int, discrete: bool = False) -> float:
    """lambda_k - lambda_k' - mean(g).

    With ``discrete=True`` the reference uses the exact difference-Laplacian
    eigenvalue instead of (pi k / L)^2.
    """
    if not 1 <= k <= basis.m:
        raise TruncationError(f"mode index {k} outside 1..{basis.m}")
    ref = basis.mu[k - 1] if discrete else basis.lambdas_prime[k - 1]
    return float(basis.lambdas[k - 1] - ref - g.mean(basis.grid))


def write_spectrum_csv(path, basis: SpectralBasis, g: Potential) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "lambda_k", "lambda_k_prime", "gap"])
        for k in range(1, basis.m + 1):
            w.writerow(
                [
                    k,
                    repr(float(basis.lambdas[k - 1])),
                    repr(float(basis.lambdas_prime[k - 1])),
                    repr(asymptotic_gap(basis, g, k)),
                ]
            )
    return path
