import csv
import hashlib
import json
import math
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import yaml

from chafee import cli
from chafee.cli import EXIT_CONFIG, EXIT_OK, EXIT_PARTIAL, EXIT_RUNTIME, main
from chafee.errors import StepError
from chafee.spectral import Grid, Potential, solve_spectrum

SMALL_SIM = {"grid": {"L": "2pi", "N": 40}, "noise": {"M": 6, "D": 4, "mix": "random:1"}}


def _write(tmp_path, doc, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(doc), encoding="utf-8")
    return p


def _rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


def _run(tmp_path, command, doc, out="out", extra=()):
    cfg = _write(tmp_path, doc, f"{command}.yaml")
    code = main([command, "--config", str(cfg), "--out", str(tmp_path / out), *extra])
    return code, tmp_path / out


def _checksums(root: Path):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.glob("*.csv"))}


def test_spectrum_fig1(tmp_path):
    code, out = _run(tmp_path, "spectrum", {"grid": {"L": "2pi", "N": 200}, "potential": "cos3plus1"})
    assert code == EXIT_OK
    rows = _rows(out / "spectrum.csv")
    assert rows[0] == ["k", "lambda_k", "lambda_k_prime", "gap"]
    assert rows[1][0] == "1"
    assert float(rows[1][1]) == pytest.approx(1.188, abs=0.005)
    assert len(rows) == 201


def test_rerun_reproduces_checksums(tmp_path):
    doc = {**SMALL_SIM, "sim": {"dt": 0.01, "nt": 200, "sigma": 0.1, "stride": 20},
           "sweep": {"alpha": [1.0], "ensemble": 2}, "seed": 3}
    c1, out1 = _run(tmp_path, "simulate", doc, "a")
    c2, out2 = _run(tmp_path, "simulate", doc, "b")
    assert c1 == c2 == EXIT_OK
    assert _checksums(out1) == _checksums(out2)
    m1 = json.loads((out1 / "manifest.json").read_text())
    m2 = json.loads((out2 / "manifest.json").read_text())
    assert m1["outputs"] == m2["outputs"] and m1["config_hash"] == m2["config_hash"]


def test_seed_flag_changes_output(tmp_path):
    doc = {**SMALL_SIM, "sim": {"dt": 0.01, "nt": 100, "sigma": 0.1, "stride": 50}, "sweep": {"alpha": [1.0]}}
    _, a = _run(tmp_path, "simulate", doc, "a", ("--seed", "1"))
    _, b = _run(tmp_path, "simulate", doc, "b", ("--seed", "2"))
    assert _checksums(a)["trajectory_a0_m0.csv"] != _checksums(b)["trajectory_a0_m0.csv"]


def test_simulate_surface_shape(tmp_path):
    doc = {**SMALL_SIM, "sim": {"dt": 0.01, "nt": 100, "sigma": 0.1, "stride": 25}, "sweep": {"alpha": [1.0]}}
    code, out = _run(tmp_path, "simulate", doc)
    assert code == EXIT_OK
    rows = _rows(out / "surface_a0_m0.csv")
    assert rows[0] == ["t", "x", "u"]
    snapshots = 100 // 25 + 1
    assert len(rows) - 1 == 40 * snapshots
    assert len({r[0] for r in rows[1:]}) == snapshots and len({r[1] for r in rows[1:]}) == 40


def test_ews_sweep_shapes_and_analytic_column(tmp_path):
    alphas = [0.5, 0.7, 0.9]
    doc = {**SMALL_SIM, "sim": {"dt": 0.05, "nt": 400, "sigma": 0.05, "stride": 2},
           "sweep": {"alpha": alphas, "modes": [1, 2], "points": [10, 20], "ensemble": 2, "dynamics": "linear"}}
    code, out = _run(tmp_path, "ews-sweep", doc)
    assert code == EXIT_OK
    names = ["mode_k1", "mode_k2", "pointwise_p10", "pointwise_p20"]
    for n in names:
        rows = _rows(out / f"ews_{n}.csv")
        assert len(rows) - 1 == len(alphas)
        plot = _rows(out / f"plot_ews_{n}.csv")
        assert plot[0] == ["alpha", "analytic_value", "empirical_mean", "empirical_stderr", "lower", "upper", "n_seeds"]
        for r in plot[1:]:
            mean, se, lo, hi = map(float, r[2:6])
            assert lo == pytest.approx(mean - 2 * se) and hi == pytest.approx(mean + 2 * se)
    an = [float(r[1]) for r in _rows(out / "plot_ews_mode_k1.csv")[1:]]
    assert np.all(np.diff(an) > 0)


def test_ftle_sweep_bound_column(tmp_path):
    doc = {**SMALL_SIM, "sim": {"dt": 0.01, "nt": 200, "sigma": 0.05},
           "sweep": {"alpha": [0.5, 1.0], "k": 2, "ensemble": 2, "burn_in_time": 1.0}}
    code, out = _run(tmp_path, "ftle-sweep", doc)
    assert code == EXIT_OK
    grid = Grid(2 * math.pi, 40)
    lam = solve_spectrum(grid, Potential.from_descriptor("cos3plus1", grid), 2).lambdas
    rows = _rows(out / "plot_ftle.csv")
    assert rows[0][-1] == "theoretical_bound"
    for r in rows[1:]:
        a = float(r[0])
        assert float(r[-1]) == pytest.approx((a - lam[0]) + (a - lam[1]), abs=1e-12)
    summary = _rows(out / "ftle_summary.csv")
    assert len(summary) == 3


def test_steady_states_and_sync(tmp_path):
    code, out = _run(tmp_path, "steady-states", {"grid": {"L": "pi", "N": 50}, "potential": "zero", "sweep": {"alpha": [0.5, 1.2]}})
    assert code == EXIT_OK
    counts = {}
    for r in _rows(out / "steady_states.csv")[1:]:
        counts[r[0]] = counts.get(r[0], 0) + 1
    assert list(counts.values()) == [1, 3]
    doc = {**SMALL_SIM, "sim": {"dt": 0.01, "nt": 300, "sigma": 0.05, "stride": 50}, "sweep": {"alpha": [0.5], "ensemble": 2}}
    code, out = _run(tmp_path, "sync-check", doc, "sync")
    assert code == EXIT_OK
    rows = _rows(out / "sync.csv")
    assert rows[0] == ["alpha", "member", "t", "gap", "order_margin"]
    assert len(rows) - 1 == 2 * 7


def test_exit_sweep_outputs(tmp_path):
    doc = {"grid": {"L": "2pi", "N": 32}, "potential": "cos3plus2", "noise": {"M": 6, "D": 4, "mix": "random:1"},
           "sim": {"dt": 0.01, "T": 5.0, "sigma": 0.05}, "sweep": {"alpha": [1.0], "h": [0.02, 0.05, 0.1], "ensemble": 8}}
    code, out = _run(tmp_path, "exit-sweep", doc)
    assert code == EXIT_OK
    assert len(_rows(out / "exit_tail.csv")) == 4
    assert len(_rows(out / "exit_moments.csv")) == 1 + 3 * 2
    assert len(_rows(out / "exit_times.csv")) == 1 + 8 * 3


def test_config_error_exit_code(tmp_path, capsys):
    code, _ = _run(tmp_path, "spectrum", {"grid": {"L": 1.0, "bogus": 2}})
    assert code == EXIT_CONFIG
    assert "grid.bogus" in capsys.readouterr().err
    assert main(["spectrum"]) == EXIT_CONFIG


def test_runtime_error_exit_code(tmp_path):
    # alpha above lambda_1 is outside the exit-time scope for every member
    doc = {"grid": {"L": "2pi", "N": 32}, "potential": "cos3plus2", "noise": {"M": 4, "D": 2},
           "sim": {"dt": 0.01, "T": 1.0, "sigma": 0.05}, "sweep": {"alpha": [5.0], "h": [0.1], "ensemble": 2}}
    code, out = _run(tmp_path, "exit-sweep", doc)
    assert code == EXIT_RUNTIME


def test_partial_failure_exit_code(tmp_path, monkeypatch):
    real = cli._job_simulate

    def flaky(cfg, alpha, member):
        if member == 1:
            raise StepError("non-finite state", step=7)
        return real(cfg, alpha, member)

    monkeypatch.setattr(cli, "_job_simulate", flaky)
    doc = {**SMALL_SIM, "sim": {"dt": 0.01, "nt": 50, "sigma": 0.1, "stride": 25}, "sweep": {"alpha": [1.0], "ensemble": 3}}
    code, out = _run(tmp_path, "simulate", doc)
    assert code == EXIT_PARTIAL
    man = json.loads((out / "manifest.json").read_text())
    assert [f["member"] for f in man["failures"]] == [1]
    assert (out / "trajectory_a0_m0.csv").exists() and (out / "trajectory_a0_m2.csv").exists()
    assert not (out / "trajectory_a0_m1.csv").exists()


def test_manifest_lists_every_file(tmp_path):
    doc = {**SMALL_SIM, "sim": {"dt": 0.01, "nt": 100, "sigma": 0.1, "stride": 50}, "sweep": {"alpha": [0.8, 1.0], "ensemble": 2}}
    code, out = _run(tmp_path, "simulate", doc)
    assert code == EXIT_OK
    man = json.loads((out / "manifest.json").read_text())
    on_disk = {p.name for p in out.iterdir()} - {"manifest.json"}
    assert set(man["outputs"]) == on_disk
    for name, digest in man["outputs"].items():
        assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest
    assert man["seeds"] == {"master": 0, "streams": [0, 1]}
    assert man["finished"] >= man["started"]


def test_worker_count_invariance(tmp_path):
    doc = {**SMALL_SIM, "sim": {"dt": 0.01, "nt": 200, "sigma": 0.05}, "sweep": {"alpha": [0.5, 1.0], "ensemble": 3, "burn_in_time": 0.5}}
    _, a = _run(tmp_path, "ftle-sweep", doc, "w1", ("--workers", "1"))
    _, b = _run(tmp_path, "ftle-sweep", doc, "w3", ("--workers", "3"))
    assert _checksums(a) == _checksums(b)


def test_profile_flag_with_override(tmp_path):
    over = {"grid": {"N": 30}, "sim": {"T": 1.0, "nt": 100, "stride": 50}}
    code, out = _run(tmp_path, "simulate", over, extra=("--profile", "fig1"))
    assert code == EXIT_OK
    saved = yaml.safe_load((out / "config.yaml").read_text())
    assert saved["sweep"]["alpha"] == [1.15, 1.25] and saved["grid"]["N"] == 30


def test_module_entry_point(tmp_path):
    cfg = _write(tmp_path, {"grid": {"N": 20}})
    res = subprocess.run([sys.executable, "-m", "chafee", "spectrum", "--config", str(cfg), "--out", str(tmp_path / "o")],
                         capture_output=True, text=True, timeout=300)
    assert res.returncode == 0, res.stderr
    assert (tmp_path / "o" / "spectrum.csv").exists()
