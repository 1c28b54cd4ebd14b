"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Ensembles run through the same job functions the command line uses.
"""

import hashlib
import math
import os
import time

import numpy as np
import pytest

from chafee import cli
from chafee.config import parse_mapping
from chafee.dynamics import FieldState, SimConfig, find_steady_states, integrate_sde, synchronization_gap
from chafee.errors import ChafeeError
from chafee.ews import ensemble_estimate, scaling_fit, vinf_entry, vinf_pointwise
from chafee.exit_times import ExitExperiment, a_s_norm, moment_table, simulate_exit_times, tail_table
from chafee.ftle import TangentBundle, evolve_tangents
from chafee.noise import RngStream, random_spec
from chafee.spectral import (
    Grid,
    Potential,
    build_schrodinger,
    count_sign_changes,
    laplacian_eigenvalues,
    norm_dx,
    solve_spectrum,
)

pytestmark = pytest.mark.slow

WORKERS = min(4, os.cpu_count() or 1)
TWO_PI = 2 * math.pi


def _jobs(fn, args):
    out = cli.run_jobs(fn, args, WORKERS)
    bad = [r for s, r in out if s != "ok"]
    if bad:
        raise ChafeeError(f"{len(bad)} ensemble members failed: {bad[0]}")
    return [r for _, r in out]


@pytest.mark.criterion(1, "spectrum cos(3x)+1")
def test_spectrum_cos(verdict):
    t0 = time.perf_counter()
    grid = Grid(TWO_PI, 200)
    lam1 = solve_spectrum(grid, Potential.from_descriptor("cos3plus1", grid)).lambdas[0]
    wall = time.perf_counter() - t0
    verdict(abs(lam1 - 1.188) <= 0.005 and wall < 1.0, f"lambda_1={lam1:.6f} (target 1.188 +- 0.005), {wall:.3f} s")


@pytest.mark.criterion(2, "spectrum x/L")
def test_spectrum_linear(verdict):
    t0 = time.perf_counter()
    grid = Grid(TWO_PI, 200)
    lam1 = solve_spectrum(grid, Potential.from_descriptor("linear", grid)).lambdas[0]
    wall = time.perf_counter() - t0
    verdict(abs(lam1 - 0.708) <= 0.005 and wall < 1.0, f"lambda_1={lam1:.6f} (target 0.708 +- 0.005), {wall:.3f} s")


@pytest.mark.criterion(3, "discrete-exact spectra")
def test_discrete_exact(verdict):
    grid = Grid(TWO_PI, 200)
    zero = solve_spectrum(grid, Potential.from_descriptor("zero", grid)).lambdas
    exact = laplacian_eigenvalues(grid, 20)
    k = np.arange(1, 21)
    by_hand = 2.0 / grid.dx**2 * (1 - np.cos(k * np.pi / (grid.N + 1)))
    err0 = max(np.max(np.abs(zero[:20] - exact)), np.max(np.abs(zero[:20] - by_hand)))
    shifted = solve_spectrum(grid, Potential.from_descriptor("constant:1.5", grid)).lambdas
    err_c = np.max(np.abs(shifted - zero - 1.5))
    verdict(err0 <= 1e-10 and err_c <= 1e-10, f"g=0 max err {err0:.2e}, constant shift max err {err_c:.2e}")


@pytest.mark.criterion(4, "root law")
def test_root_law(verdict):
    grid = Grid(TWO_PI, 200)
    bad = []
    for name in ("cos3plus1", "linear"):
        basis = solve_spectrum(grid, Potential.from_descriptor(name, grid), 10)
        bad += [(name, k) for k in range(1, 11) if count_sign_changes(basis.vectors[k - 1]) != k - 1]
    verdict(not bad, "all e_k have k-1 sign changes" if not bad else f"mismatches {bad}")


@pytest.mark.criterion(5, "linear FTLE exactness")
def test_linear_ftle_exact(verdict):
    # dt and horizon of the FTLE ensemble criteria; the base is frozen at zero
    grid = Grid(TWO_PI, 200)
    g = Potential.from_descriptor("cos3plus1", grid)
    basis = solve_spectrum(grid, g, 2)
    alpha, dt, n = basis.lambdas[0] - 0.2, 1e-3, 50_000
    A = build_schrodinger(grid, g, alpha)
    errs = []
    for k in (1, 2):
        bundle = TangentBundle.orthonormal(basis.vectors[:k], grid)
        _, t, lv, _ = evolve_tangents(bundle, None, A, dt, n, grid)
        target = float(np.sum(alpha - basis.lambdas[:k]))
        errs.append(float(np.max(np.abs(lv / t - target))))
    verdict(max(errs) <= 1e-8, f"max |L_k - sum(alpha - lambda_j)|: k=1 {errs[0]:.2e}, k=2 {errs[1]:.2e} (tol 1e-8, dt={dt:g})")


def _ftle_config(offsets, T, seed, **sweep):
    return parse_mapping({
        "command": "ftle-sweep",
        "grid": {"L": TWO_PI, "N": 200},
        "potential": "cos3plus1",
        "noise": {"M": 10, "D": 10, "mix": "random:0"},
        "sim": {"dt": 1e-3, "T": T, "sigma": 0.1},
        "sweep": {"alpha_offsets": offsets, "k": 1, "ensemble": 100, **sweep},
        "seed": seed,
    })


@pytest.mark.criterion(6, "pathwise FTLE upper bound")
def test_ftle_upper_bound(verdict):
    cfg = _ftle_config([0.2, -0.1], 50.0, 6)
    ctx = cli._context(cfg)
    details, ok = [], True
    for a in ctx.alphas:
        recs = _jobs(cli._job_ftle, [(cfg, a, i) for i in range(100)])
        bound = a - ctx.lam1
        n_bad = sum(int(np.any(r.L > bound + 0.02)) for r in recs)
        worst = max(float(r.L.max()) for r in recs)
        ok &= n_bad == 0
        details.append(f"alpha-lambda_1={bound:+.2f}: {n_bad}/100 violate, max L_1 - bound = {worst - bound:+.4f}")
    verdict(ok, "; ".join(details))


@pytest.mark.criterion(7, "FTLE lower-bound realization")
def test_ftle_lower_bound(verdict):
    cfg = _ftle_config([-0.1], 5.0, 7)
    ctx = cli._context(cfg)
    a = ctx.alphas[0]
    recs = _jobs(cli._job_ftle, [(cfg, a, i) for i in range(100)])
    final = np.array([r.final for r in recs])
    target = (a - ctx.lam1) - 0.1
    frac = float(np.mean(final > 0))
    verdict(final.max() >= target and frac > 0, f"max L_1(5)={final.max():.4f} (need >= {target:.4f}), fraction L_1>0 = {frac:.2f}")


def _ews_config(offsets, sigma, seed, **sweep):
    return parse_mapping({
        "command": "ews-sweep",
        "grid": {"L": TWO_PI, "N": 100},
        "potential": "cos3plus1",
        "noise": {"M": 10, "D": 10, "mix": "random:3"},
        "sim": {"dt": 0.05, "T": 5000.0, "sigma": sigma, "stride": 10},
        "sweep": {"alpha_offsets": offsets, "ensemble": 10, "m_trunc": 30, **sweep},
        "seed": seed,
    })


def _ews_ensemble(cfg, a):
    return _jobs(cli._job_ews, [(cfg, a, i) for i in range(cfg.sweep.ensemble)])


@pytest.mark.criterion(8, "EWS analytic vs empirical")
def test_ews_oracle(verdict):
    cfg = _ews_config([0.1], 0.01, 11, modes=[1], points=[50], dynamics="linear")
    ctx = cli._context(cfg)
    a = ctx.alphas[0]
    res = _ews_ensemble(cfg, a)
    mode = ensemble_estimate(m[1] for m, _ in res).value
    point = ensemble_estimate(p[50] for _, p in res).value
    v11 = vinf_entry(1, 1, ctx.basis, ctx.spec, a, 0.01)
    vp = vinf_pointwise(50, ctx.basis, ctx.spec, a, 0.01, 30)
    r1, r2 = abs(mode - v11) / v11, abs(point - vp) / vp
    verdict(r1 <= 0.1 and r2 <= 0.1, f"mode (1,1) rel err {r1:.3f}, pointwise p=50 rel err {r2:.3f} (tol 0.10)")


@pytest.mark.criterion(9, "hyperbolic scaling")
def test_hyperbolic_scaling(verdict):
    offsets = [0.4, 0.2, 0.1, 0.05, 0.025]
    cfg = _ews_config(offsets, 0.01, 9, modes=[1], points=[50], dynamics="linear")
    ctx = cli._context(cfg)
    analytic = [vinf_entry(1, 1, ctx.basis, ctx.spec, a, 0.01) for a in ctx.alphas]
    s_an, _, _ = scaling_fit(ctx.alphas, analytic, ctx.lam1)
    emp = [ensemble_estimate(m[1] for m, _ in _ews_ensemble(cfg, a)).value for a in ctx.alphas]
    s_emp, _, r2 = scaling_fit(ctx.alphas, emp, ctx.lam1)
    verdict(abs(s_an + 1) <= 0.01 and abs(s_emp + 1) <= 0.1,
            f"analytic slope {s_an:.4f} (tol 0.01), empirical slope {s_emp:.4f} (tol 0.1, r2={r2:.3f})")


@pytest.mark.criterion(10, "nonlinear suppression ordering")
def test_nonlinear_suppression(verdict):
    cfg = _ews_config([0.05, 0.02], 0.05, 21, dynamics="nonlinear")
    ctx = cli._context(cfg)
    p = cli._measurement_points(ctx)[0]
    gaps, parts = [], []
    for a in ctx.alphas:
        emp = ensemble_estimate(pts[p] for _, pts in _ews_ensemble(cfg, a)).value
        lin = vinf_pointwise(p, ctx.basis, ctx.spec, a, 0.05, 30)
        gaps.append(lin - emp)
        parts.append(f"lambda_1-alpha={ctx.lam1 - a:.2f}: nonlinear {emp:.4g} vs linear {lin:.4g}")
    ok = all(gp > 0 for gp in gaps) and gaps[1] > gaps[0]
    verdict(ok, f"p={p}; " + "; ".join(parts) + f"; gaps {gaps[0]:.4g} -> {gaps[1]:.4g}")


@pytest.mark.criterion(11, "pitchfork amplitude")
def test_pitchfork(verdict):
    grid = Grid(math.pi, 200)
    zero = Potential.from_descriptor("zero", grid)
    lam = solve_spectrum(grid, zero, 2).lambdas
    ladder = np.linspace(1.05, 1.4, 8)
    counts, amps = [], []
    for a in ladder:
        states = find_steady_states(zero, a, grid)
        counts.append(len(states))
        amps.append(max(norm_dx(u, grid) for u in states))
    slope = np.polyfit(np.log(ladder - lam[0]), np.log(amps), 1)[0]
    inside = all(lam[0] < a < lam[1] for a in ladder)
    verdict(abs(slope - 0.5) <= 0.05 and inside and all(c == 3 for c in counts),
            f"slope {slope:.4f} (0.5 +- 0.05), states per alpha {counts}")


@pytest.mark.criterion(12, "exit-tail scaling")
def test_exit_tail(verdict):
    grid = Grid(TWO_PI, 64)
    g = Potential.from_descriptor("cos3plus2", grid)
    basis = solve_spectrum(grid, g)
    spec = random_spec(10, 10, 3)
    alpha = basis.lambdas[0] - 0.5
    # ladder from a separate pilot ensemble: P(tau < T) = P(max deviation >= h)
    pilot = ExitExperiment(grid, g, spec, (1.0,), sigma=0.05, s=0.4, T=50.0, n_members=200, drift=alpha)
    ref = pilot.reference(basis)
    mx = [
        np.max(a_s_norm(integrate_sde(pilot.initial(), grid, g, pilot.drift, spec, pilot.cfg, RngStream(999, i)).values
                        - ref.values, basis, pilot.sobolev))
        for i in range(200)
    ]
    h = tuple(np.quantile(mx, np.linspace(0.12, 0.93, 8)))
    exp = ExitExperiment(grid, g, spec, h, sigma=0.05, s=0.4, T=50.0, n_members=200, drift=alpha)
    taus = simulate_exit_times(exp, 5, basis=basis, ref=ref)
    tail = tail_table(taus, exp)
    mom = moment_table(taus, exp, 1)
    p = np.array([r["p_hat"] for r in tail.rows])
    m1 = np.array([r["moment"] for r in mom.rows])
    spans = p.min() >= 0.05 and p.max() <= 0.9
    ok = spans and tail.slope < 0 and tail.r2 >= 0.9 and np.all(np.diff(m1) > 0) and mom.spearman >= 0.9
    verdict(ok, f"P in [{p.min():.3f}, {p.max():.3f}], slope {tail.slope:.4g}, r2 {tail.r2:.3f}, "
                f"E[min(tau,T)] increasing={bool(np.all(np.diff(m1) > 0))}, Spearman {mom.spearman:.3f}")


@pytest.mark.criterion(13, "synchronization by noise")
def test_synchronization(verdict):
    grid = Grid(TWO_PI, 200)
    g = Potential.from_descriptor("cos3plus1", grid)
    basis = solve_spectrum(grid, g, 1)
    alpha = basis.lambdas[0] - 0.2
    cfg = SimConfig.from_horizon(100.0, 0.01, sigma=0.05, snapshot_stride=1)
    a = FieldState(np.zeros(grid.N))
    b = FieldState(0.1 * basis.vectors[0])
    _, gap, ra, rb = synchronization_gap(a, b, grid, g, alpha, random_spec(10, 10, 0), cfg, RngStream(13))
    margin = float(np.min(rb.values - ra.values))
    verdict(gap[-1] < 1e-6 and margin >= -1e-10, f"gap(T=100)={gap[-1]:.2e} (< 1e-6), min order margin {margin:.2e} (>= -1e-10)")


_SMALL = {"grid": {"L": TWO_PI, "N": 32}, "noise": {"M": 6, "D": 4, "mix": "random:2"}, "seed": 4}
_COMMANDS = {
    "spectrum": {},
    "steady-states": {"potential": "zero", "grid": {"L": math.pi, "N": 32}, "sweep": {"alpha": [0.5, 1.3]}},
    "simulate": {"sim": {"dt": 0.01, "nt": 200, "sigma": 0.1, "stride": 20}, "sweep": {"alpha": [0.9, 1.3], "ensemble": 3}},
    "ftle-sweep": {"sim": {"dt": 0.01, "nt": 300, "sigma": 0.1}, "sweep": {"alpha": [0.9, 1.3], "ensemble": 3, "burn_in_time": 1.0}},
    "ews-sweep": {"sim": {"dt": 0.05, "nt": 400, "sigma": 0.05, "stride": 2}, "sweep": {"alpha": [0.6, 0.9], "ensemble": 3}},
    "exit-sweep": {"potential": "cos3plus2", "sim": {"dt": 0.01, "T": 5.0, "sigma": 0.05},
                   "sweep": {"alpha": [1.0], "h": [0.02, 0.05], "ensemble": 5}},
    "sync-check": {"sim": {"dt": 0.01, "nt": 300, "sigma": 0.05, "stride": 30}, "sweep": {"alpha": [0.8], "ensemble": 3}},
}


def _csv_digests(root):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.glob("*.csv"))}


@pytest.mark.criterion(14, "determinism and worker invariance")
def test_determinism(verdict, tmp_path):
    bad = []
    for command, over in _COMMANDS.items():
        raw = {**_SMALL, **over, "command": command}
        raw["grid"] = over.get("grid", _SMALL["grid"])
        cfg = parse_mapping(raw)
        digests = []
        for tag, workers in (("w1", 1), ("w1b", 1), ("w2", 2)):
            out = tmp_path / command / tag
            assert cli.run(cfg, out, workers) == cli.EXIT_OK
            digests.append(_csv_digests(out))
        if not digests[0] or any(d != digests[0] for d in digests[1:]):
            bad.append(command)
    verdict(not bad, f"{len(_COMMANDS)} commands byte-identical across reruns and 1 vs 2 workers"
                     if not bad else f"differing outputs for {bad}")
