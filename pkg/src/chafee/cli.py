"""Command-line orchestration: config in, CSV artifacts plus a JSON manifest out.

Ensemble member i always draws from stream index i of the master seed, and
results are gathered by job index, so outputs do not depend on the number
of workers or on completion order.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .config import ExperimentConfig, config_hash, parse_mapping, profile, serialize_config
from .dynamics import (
    DriftSpec,
    FieldState,
    SimConfig,
    find_steady_states,
    integrate_linear,
    integrate_sde,
    lyapunov_functional,
    near_zero_initial,
    synchronization_gap,
)
from .errors import ChafeeError, ConfigError
from .ews import (
    argmax_measurement_point,
    empirical_mode_covariance,
    empirical_pointwise_variance,
    ensemble_estimate,
    vinf_entry,
    vinf_pointwise,
    write_sweep_csv,
)
from .exit_times import ExitExperiment, member_exit_times, moment_table, tail_table, write_moment_csv, write_tail_csv
from .ftle import ftle_on_attractor, theoretical_bound, write_ensemble_summary_csv, bound_report
from .noise import CovarianceSpec, RngStream, random_spec
from .spectral import Grid, Potential, solve_spectrum, write_spectrum_csv

log = logging.getLogger(__name__)

__all__ = ["RunManifest", "run", "emit_plot_data", "main", "EXIT_OK", "EXIT_CONFIG", "EXIT_RUNTIME", "EXIT_PARTIAL"]

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_PARTIAL = 0, 1, 2, 3


# ---------------------------------------------------------------- context

def build_spec(cfg: ExperimentConfig) -> CovarianceSpec:
    nb = cfg.noise
    if isinstance(nb.mix, str) and nb.mix.startswith("random:"):
        base = random_spec(nb.M, nb.D, int(nb.mix.split(":", 1)[1]), nb.decay_exponent)
        return CovarianceSpec(base.q if nb.q is None else nb.q, base.mix, nb.decay_exponent)
    mix = np.eye(nb.D) if nb.mix == "identity" else np.asarray(nb.mix, dtype=float).reshape(nb.D, nb.D)
    return CovarianceSpec(np.ones(nb.M) if nb.q is None else nb.q, mix, nb.decay_exponent)


class Context:
    """Immutable per-config objects, rebuilt once in each worker process."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.grid = Grid(cfg.grid.L, cfg.grid.N)
        self.g = Potential.from_descriptor(cfg.potential, self.grid)
        self.spec = build_spec(cfg)
        sw = cfg.sweep
        if cfg.command == "spectrum":
            m = sw.spectrum_modes or self.grid.N
        else:
            m = max(sw.m_trunc, max(sw.modes), sw.k, 2)
        self.basis = solve_spectrum(self.grid, self.g, min(m, self.grid.N))
        self.lam1 = float(self.basis.lambdas[0])

    @property
    def alphas(self) -> list[float]:
        sw = self.cfg.sweep
        if sw.alpha is not None:
            return [float(a) for a in sw.alpha]
        if sw.alpha_offsets is not None:
            return [self.lam1 - float(o) for o in sw.alpha_offsets]
        return []

    def sim_config(self, **kw) -> SimConfig:
        s = self.cfg.sim
        args = dict(dt=s.dt, nt=s.nt, sigma=s.sigma, snapshot_stride=s.stride, burn_in=s.burn_in)
        args.update(kw)
        return SimConfig(**args)


_CONTEXTS: dict = {}


def _context(cfg: ExperimentConfig) -> Context:
    key = config_hash(cfg)
    if key not in _CONTEXTS:
        _CONTEXTS.clear()
        _CONTEXTS[key] = Context(cfg)
    return _CONTEXTS[key]


# ---------------------------------------------------------------- jobs

def _job_simulate(cfg, alpha, member):
    ctx = _context(cfg)
    rng = RngStream(cfg.seed, member)
    simc = ctx.sim_config()
    u0 = near_zero_initial(ctx.spec, ctx.grid, simc.dt, simc.sigma, rng) if simc.sigma > 0 else FieldState(np.zeros(ctx.grid.N))
    return integrate_sde(u0, ctx.grid, ctx.g, alpha, ctx.spec, simc, rng)


def _job_ftle(cfg, alpha, member):
    ctx = _context(cfg)
    sw = cfg.sweep
    return ftle_on_attractor(
        ctx.grid, ctx.g, alpha, ctx.spec, ctx.sim_config(), sw.k, RngStream(cfg.seed, member),
        renorm_every=sw.renorm_every, burn_in_time=sw.burn_in_time, basis=ctx.basis,
    )


def _measurement_points(ctx: Context) -> list[int]:
    pts = ctx.cfg.sweep.points
    return [argmax_measurement_point(ctx.basis)] if pts is None else [int(p) for p in pts]


def _job_ews(cfg, alpha, member):
    ctx = _context(cfg)
    simc = ctx.sim_config()
    rng = RngStream(cfg.seed, member)
    u0 = FieldState(np.zeros(ctx.grid.N))
    if cfg.sweep.dynamics == "linear":
        rec = integrate_linear(u0, ctx.grid, ctx.g, alpha, ctx.spec, simc, rng)
    else:
        rec = integrate_sde(u0, ctx.grid, ctx.g, alpha, ctx.spec, simc, rng)
    modes = {k: empirical_mode_covariance(rec, ctx.basis, k, k) for k in cfg.sweep.modes}
    points = {p: empirical_pointwise_variance(rec, p) for p in _measurement_points(ctx)}
    return modes, points


def _exit_experiment(ctx: Context) -> ExitExperiment:
    cfg = ctx.cfg
    sw = cfg.sweep
    if sw.drift is not None:
        drift = DriftSpec("ramp", float(sw.drift.get("alpha0", 0.0)), float(sw.drift.get("eps", 0.0)),
                          float(sw.drift.get("alpha_max", math.inf)))
    else:
        drift = DriftSpec.constant(ctx.alphas[0])
    return ExitExperiment(
        ctx.grid, ctx.g, ctx.spec, tuple(sw.h), sigma=cfg.sim.sigma, s=sw.s, T=cfg.sim.T, dt=cfg.sim.dt,
        n_members=sw.ensemble, drift=drift, stride=cfg.sim.stride,
    )


def _job_exit(cfg, member):
    ctx = _context(cfg)
    exp = _exit_experiment(ctx)
    key = ("exit_ref", config_hash(cfg))
    if key not in _CONTEXTS:
        _CONTEXTS[key] = exp.reference(ctx.basis).values
    return member_exit_times(exp, _CONTEXTS[key], ctx.basis, cfg.seed, member)


def _job_sync(cfg, alpha, member):
    ctx = _context(cfg)
    e1 = ctx.basis.vectors[0]
    ua = FieldState(np.zeros(ctx.grid.N))
    ub = FieldState(cfg.sweep.gap * e1)
    times, gap, ra, rb = synchronization_gap(ua, ub, ctx.grid, ctx.g, alpha, ctx.spec, ctx.sim_config(), RngStream(cfg.seed, member))
    margin = np.min(rb.values - ra.values, axis=1)
    return times, gap, margin


def _guarded(args):
    fn, a = args
    try:
        return ("ok", fn(*a))
    except (ChafeeError, FloatingPointError) as exc:
        return ("error", f"{type(exc).__name__}: {exc}")


def run_jobs(fn, arg_list, workers: int) -> list:
    """Evaluate ``fn(*args)`` for each args tuple; results in input order."""
    tasks = [(fn, a) for a in arg_list]
    if workers <= 1 or len(tasks) <= 1:
        return [_guarded(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_guarded, tasks))


# ---------------------------------------------------------------- output

def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_rows(path: Path, header, rows) -> Path:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@dataclass
class RunManifest:
    config_hash: str
    command: str
    master_seed: int
    streams: list
    version: str = __version__
    started: float = 0.0
    finished: float = 0.0
    outputs: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)

    def record(self, path: Path, root: Path):
        self.outputs[str(path.relative_to(root))] = _sha256(path)

    def write(self, root: Path) -> Path:
        doc = {
            "config_hash": self.config_hash,
            "command": self.command,
            "seeds": {"master": self.master_seed, "streams": self.streams},
            "version": self.version,
            "started": self.started,
            "finished": self.finished,
            "wall_seconds": self.finished - self.started,
            "outputs": dict(sorted(self.outputs.items())),
            "failures": self.failures,
        }
        path = root / "manifest.json"
        path.write_text(json.dumps(doc, indent=2), encoding="utf-8")
        return path


def _band(mean, se):
    return mean - 2.0 * se, mean + 2.0 * se


def emit_plot_data(results, kind: str, out: Path) -> list[Path]:
    """Tidy plotting tables with mean and a +-2 stderr band.

    kind ``ftle``: results = {"alphas", "bounds", "records": [[FtleRecord|None] per alpha]}
    kind ``ews``: results = {"alphas", "analytic": {name: [...]}, "estimates": {name: [EwsEstimate]}}
    kind ``simulate``: results = {"records": [(label, TrajectoryRecord, Grid)]}
    """
    out = Path(out)
    written = []
    if kind == "ftle":
        rows = []
        for a, bound, recs in zip(results["alphas"], results["bounds"], results["records"]):
            recs = [r for r in recs if r is not None]
            if not recs:
                continue
            Ls = np.vstack([r.L for r in recs])
            mean = Ls.mean(axis=0)
            se = Ls.std(axis=0, ddof=1) / math.sqrt(len(recs)) if len(recs) > 1 else np.zeros_like(mean)
            lo, hi = _band(mean, se)
            for j, t in enumerate(recs[0].times):
                rows.append((a, t, mean[j], se[j], lo[j], hi[j], bound))
        written.append(write_rows(out / "plot_ftle.csv", ["alpha", "t", "mean", "stderr", "lower", "upper", "theoretical_bound"], rows))
    elif kind == "ews":
        for name, ests in results["estimates"].items():
            rows = []
            for a, an, e in zip(results["alphas"], results["analytic"][name], ests):
                lo, hi = _band(e.value, e.stderr)
                rows.append((a, an, e.value, e.stderr, lo, hi, e.n))
            written.append(write_rows(
                out / f"plot_ews_{name}.csv",
                ["alpha", "analytic_value", "empirical_mean", "empirical_stderr", "lower", "upper", "n_seeds"], rows,
            ))
    elif kind == "simulate":
        for label, rec, grid in results["records"]:
            x = grid.x
            rows = ((t, x[n], rec.values[s, n]) for s, t in enumerate(rec.times) for n in range(grid.N))
            written.append(write_rows(out / f"surface_{label}.csv", ["t", "x", "u"], rows))
    else:
        raise ValueError(f"unknown plot kind {kind!r}")
    return written


# ---------------------------------------------------------------- commands

def _members(cfg):
    return list(range(cfg.sweep.ensemble))


def _cmd_spectrum(ctx, out, man, workers):
    return [write_spectrum_csv(out / "spectrum.csv", ctx.basis, ctx.g)]


def _cmd_steady(ctx, out, man, workers):
    rows, prof = [], []
    x = ctx.grid.x
    for a in ctx.alphas:
        states = find_steady_states(ctx.g, a, ctx.grid)
        states.sort(key=lambda u: (float(ctx.grid.dx * np.sum(u)), float(np.sqrt(ctx.grid.dx * np.sum(u**2)))))
        for i, u in enumerate(states):
            rows.append((a, i, float(np.sqrt(ctx.grid.dx * np.sum(u**2))), lyapunov_functional(u, ctx.grid, ctx.g)))
            prof.extend((a, i, x[n], u[n]) for n in range(ctx.grid.N))
    return [
        write_rows(out / "steady_states.csv", ["alpha", "index", "norm_dx", "lyapunov_functional"], rows),
        write_rows(out / "steady_profiles.csv", ["alpha", "index", "x", "u"], prof),
    ]


def _cmd_simulate(ctx, out, man, workers):
    cfg = ctx.cfg
    args = [(cfg, a, i) for a in ctx.alphas for i in _members(cfg)]
    res = run_jobs(_job_simulate, args, workers)
    written, recs = [], []
    for (_, a, i), (status, r) in zip(args, res):
        ai = ctx.alphas.index(a)
        if status != "ok":
            man.failures.append({"alpha": a, "member": i, "error": r})
            continue
        label = f"a{ai}_m{i}"
        written.append(r.to_csv(out / f"trajectory_{label}.csv"))
        recs.append((label, r, ctx.grid))
    written += emit_plot_data({"records": recs}, "simulate", out)
    return written


def _cmd_ftle(ctx, out, man, workers):
    cfg = ctx.cfg
    members = _members(cfg)
    args = [(cfg, a, i) for a in ctx.alphas for i in members]
    res = iter(run_jobs(_job_ftle, args, workers))
    per_alpha, reports, path_rows, bounds = [], [], [], []
    for a in ctx.alphas:
        recs = []
        for i in members:
            status, r = next(res)
            if status != "ok":
                man.failures.append({"alpha": a, "member": i, "error": r})
                recs.append(None)
                continue
            recs.append(r)
            path_rows.extend((a, i, t, L) for t, L in zip(r.times, r.L))
        per_alpha.append(recs)
        bounds.append(theoretical_bound(ctx.basis, a, cfg.sweep.k))
        ok = [r for r in recs if r is not None]
        if ok:
            reports.append(bound_report(ok, ctx.basis, a))
    written = [
        write_ensemble_summary_csv(out / "ftle_summary.csv", reports),
        write_rows(out / "ftle_paths.csv", ["alpha", "member", "t", f"L_{cfg.sweep.k}"], path_rows),
    ]
    written += emit_plot_data({"alphas": ctx.alphas, "bounds": bounds, "records": per_alpha}, "ftle", out)
    return written


def _cmd_ews(ctx, out, man, workers):
    cfg = ctx.cfg
    sw, simc = cfg.sweep, ctx.sim_config()
    members = _members(cfg)
    points = _measurement_points(ctx)
    args = [(cfg, a, i) for a in ctx.alphas for i in members]
    res = iter(run_jobs(_job_ews, args, workers))
    names = [f"mode_k{k}" for k in sw.modes] + [f"pointwise_p{p}" for p in points]
    analytic = {n: [] for n in names}
    estimates = {n: [] for n in names}
    for a in ctx.alphas:
        per = {n: [] for n in names}
        for i in members:
            status, r = next(res)
            if status != "ok":
                man.failures.append({"alpha": a, "member": i, "error": r})
                continue
            modes, pts = r
            for k in sw.modes:
                per[f"mode_k{k}"].append(modes[k])
            for p in points:
                per[f"pointwise_p{p}"].append(pts[p])
        for k in sw.modes:
            analytic[f"mode_k{k}"].append(vinf_entry(k, k, ctx.basis, ctx.spec, a, simc.sigma))
        for p in points:
            analytic[f"pointwise_p{p}"].append(vinf_pointwise(p, ctx.basis, ctx.spec, a, simc.sigma, sw.m_trunc))
        for n in names:
            if not per[n]:
                raise ChafeeError(f"every member failed at alpha={a}")
            estimates[n].append(ensemble_estimate(per[n]))
    written = []
    for n in names:
        rows = list(zip(ctx.alphas, analytic[n], estimates[n]))
        written.append(write_sweep_csv(out / f"ews_{n}.csv", rows))
    written += emit_plot_data({"alphas": ctx.alphas, "analytic": analytic, "estimates": estimates}, "ews", out)
    return written


def _cmd_exit(ctx, out, man, workers):
    cfg = ctx.cfg
    exp = _exit_experiment(ctx)
    members = _members(cfg)
    res = run_jobs(_job_exit, [(cfg, i) for i in members], workers)
    rows, taus = [], []
    for i, (status, r) in zip(members, res):
        if status != "ok":
            man.failures.append({"member": i, "error": r})
            continue
        taus.append(r)
        rows.extend((i, h, t) for h, t in zip(exp.h_ladder, r))
    if not taus:
        raise ChafeeError("every ensemble member failed")
    taus = np.vstack(taus)
    tail = tail_table(taus, exp)
    mom = moment_table(taus, exp, cfg.sweep.k_max)
    summary = {
        "slope": tail.slope, "intercept": tail.intercept, "r2": tail.r2, "all_censored": tail.all_censored,
        "spearman": mom.spearman, "moments_grow": mom.grows, "censored_h": mom.flagged, "note": tail.note,
    }
    return [
        write_tail_csv(out / "exit_tail.csv", tail),
        write_moment_csv(out / "exit_moments.csv", mom),
        write_rows(out / "exit_times.csv", ["member", "h", "tau"], rows),
        write_rows(out / "exit_fit.csv", list(summary), [[_fmt(v) if not isinstance(v, list) else ";".join(map(_fmt, v)) for v in summary.values()]]),
    ]


def _cmd_sync(ctx, out, man, workers):
    cfg = ctx.cfg
    args = [(cfg, a, i) for a in ctx.alphas for i in _members(cfg)]
    res = run_jobs(_job_sync, args, workers)
    rows = []
    for (_, a, i), (status, r) in zip(args, res):
        if status != "ok":
            man.failures.append({"alpha": a, "member": i, "error": r})
            continue
        times, gap, margin = r
        rows.extend((a, i, t, gp, mg) for t, gp, mg in zip(times, gap, margin))
    return [write_rows(out / "sync.csv", ["alpha", "member", "t", "gap", "order_margin"], rows)]


COMMAND_TABLE = {
    "spectrum": _cmd_spectrum,
    "simulate": _cmd_simulate,
    "steady-states": _cmd_steady,
    "ftle-sweep": _cmd_ftle,
    "ews-sweep": _cmd_ews,
    "exit-sweep": _cmd_exit,
    "sync-check": _cmd_sync,
}


def run(cfg: ExperimentConfig, out: str | Path | None = None, workers: int | None = None) -> int:
    """Execute the configured pipeline; returns the process exit status."""
    out = Path(cfg.output if out is None else out)
    workers = cfg.workers if workers is None else workers
    streams = [] if cfg.command in ("spectrum", "steady-states") else _members(cfg)
    man = RunManifest(config_hash(cfg), cfg.command, cfg.seed, streams, started=time.time())
    out.mkdir(parents=True, exist_ok=True)
    ctx = _context(cfg)
    cfg_path = out / "config.yaml"
    # the echo leaves out run settings so reruns elsewhere reproduce its checksum
    cfg_path.write_text(serialize_config(cfg, run_settings=False), encoding="utf-8")
    written = [cfg_path] + COMMAND_TABLE[cfg.command](ctx, out, man, workers)
    for p in written:
        man.record(p, out)
    man.finished = time.time()
    man.write(out)
    return EXIT_PARTIAL if man.failures else EXIT_OK


def _load_raw(args) -> dict:
    raw = {}
    if args.profile:
        raw = profile(args.profile)
    if args.config:
        text = Path(args.config).read_text(encoding="utf-8")
        try:
            loaded = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{args.config}: not valid YAML: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{args.config}: top level must be a mapping")
        raw = profile(args.profile, loaded) if args.profile else loaded
    raw["command"] = args.command
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.out is not None:
        raw["output"] = args.out
    if args.workers is not None:
        raw["workers"] = args.workers
    return raw


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="chafee", description="Heterogeneous stochastic Chafee-Infante experiments")
    parser.add_argument("command", choices=list(COMMAND_TABLE))
    parser.add_argument("--config", help="YAML experiment file")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int, help="master seed (u64)")
    parser.add_argument("--workers", type=int, help="worker processes")
    parser.add_argument("--profile", choices=["fig1", "fig2", "fig3", "fig4", "fig5"])
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if not args.config and not args.profile:
        print("error: give --config and/or --profile", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = parse_mapping(_load_raw(args))
    except ConfigError as exc:
        for p in exc.problems:
            print(f"config error: {p}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error: cannot read {exc.filename}: {exc.strerror}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        status = run(cfg)
    except OSError as exc:
        print(f"I/O error at {exc.filename}: {exc.strerror}", file=sys.stderr)
        return EXIT_RUNTIME
    except ChafeeError as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if status == EXIT_PARTIAL:
        print("warning: some ensemble members failed; see manifest.json", file=sys.stderr)
    return status


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
