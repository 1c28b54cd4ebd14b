"""Experiment configuration: YAML text in, validated nested dataclasses out.

Every problem found is collected and reported together through ConfigError.
Any two of ``dt``, ``T`` and ``nt`` fix the third; giving all three requires
``|T/dt - nt| <= 0.5``.
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import asdict, dataclass, field, fields

import yaml

from .errors import ConfigError

__all__ = [
    "COMMANDS",
    "PROFILES",
    "GridBlock",
    "NoiseBlock",
    "SimBlock",
    "SweepBlock",
    "ExperimentConfig",
    "parse_config",
    "parse_mapping",
    "serialize_config",
    "config_hash",
    "profile",
]

COMMANDS = ("spectrum", "simulate", "steady-states", "ftle-sweep", "ews-sweep", "exit-sweep", "sync-check")
TWO_PI = 2.0 * math.pi


@dataclass
class GridBlock:
    L: float = TWO_PI
    N: int = 200


@dataclass
class NoiseBlock:
    M: int = 10
    D: int = 10
    q: list | None = None
    mix: str | list = "random:0"
    decay_exponent: float = 0.5


@dataclass
class SimBlock:
    dt: float | None = None
    T: float | None = None
    nt: int | None = None
    sigma: float = 0.0
    stride: int = 1
    burn_in: int | None = None


@dataclass
class SweepBlock:
    alpha: list | None = None
    alpha_offsets: list | None = None  # alpha = lambda_1 - offset
    drift: dict | None = None  # {alpha0, eps, alpha_max}
    h: list | None = None
    k: int = 1
    modes: list = field(default_factory=lambda: [1])
    points: list | None = None  # None: argmax of |e_1|
    m_trunc: int = 30
    ensemble: int = 10
    renorm_every: int = 10
    burn_in_time: float | None = None
    s: float = 0.4
    k_max: int = 2
    dynamics: str = "nonlinear"
    gap: float = 0.1
    spectrum_modes: int | None = None


@dataclass
class ExperimentConfig:
    command: str
    grid: GridBlock = field(default_factory=GridBlock)
    potential: str = "cos3plus1"
    noise: NoiseBlock = field(default_factory=NoiseBlock)
    sim: SimBlock = field(default_factory=SimBlock)
    sweep: SweepBlock = field(default_factory=SweepBlock)
    seed: int = 0
    output: str = "out"
    workers: int = 1

    def to_dict(self) -> dict:
        return asdict(self)


_BLOCKS = {"grid": GridBlock, "noise": NoiseBlock, "sim": SimBlock, "sweep": SweepBlock}


def _length(v, problems, where):
    """Numbers, or strings like 'pi', '2pi', '2*pi'."""
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        return float(v)
    if isinstance(v, str):
        s = v.replace(" ", "").replace("*", "").lower()
        if s.endswith("pi"):
            head = s[:-2]
            try:
                return (float(head) if head else 1.0) * math.pi
            except ValueError:
                pass
        try:
            return float(s)
        except ValueError:
            pass
    problems.append(f"{where}: expected a number, got {v!r}")
    return None


def _build_block(cls, raw, name, problems):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        problems.append(f"{name}: expected a mapping")
        return cls()
    known = {f.name for f in fields(cls)}
    for key in raw:
        if key not in known:
            problems.append(f"unknown key '{name}.{key}'")
    return cls(**{k: v for k, v in raw.items() if k in known})


def _resolve_time(sim: SimBlock, problems):
    given = [x is not None for x in (sim.dt, sim.T, sim.nt)]
    if sum(given) < 2:
        problems.append("sim: give at least two of dt, T, nt")
        return
    if sim.nt is not None and (int(sim.nt) != sim.nt or sim.nt < 1):
        problems.append(f"sim.nt must be a positive integer, got {sim.nt}")
        return
    for key in ("dt", "T"):
        v = getattr(sim, key)
        if v is not None and not (isinstance(v, (int, float)) and v > 0):
            problems.append(f"sim.{key} must be positive, got {v!r}")
            return
    if all(given):
        if abs(sim.T / sim.dt - sim.nt) > 0.5:
            problems.append(
                f"sim: T={sim.T} and dt={sim.dt} give T/dt={sim.T / sim.dt:g}, inconsistent with nt={sim.nt}"
            )
        sim.nt = int(sim.nt)
        return
    if sim.dt is None:
        sim.nt = int(sim.nt)
        sim.dt = float(sim.T) / sim.nt
    elif sim.nt is None:
        sim.nt = int(round(sim.T / sim.dt))
        if sim.nt < 1:
            problems.append("sim: T/dt rounds to zero steps")
    else:
        sim.nt = int(sim.nt)
        sim.T = sim.nt * sim.dt
    if sim.T is None:
        sim.T = sim.nt * sim.dt
    sim.dt = float(sim.dt)
    sim.T = float(sim.T)


def _nonempty_list(v, where, problems):
    if v is None:
        return False
    if not isinstance(v, (list, tuple)) or len(v) == 0:
        problems.append(f"{where} must be a non-empty list")
        return False
    return True


def parse_mapping(raw: dict) -> ExperimentConfig:
    """Validate an already-loaded mapping; raises ConfigError listing every problem."""
    problems = []
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping at top level")
    raw = copy.deepcopy(raw)
    known = {f.name for f in fields(ExperimentConfig)}
    for key in raw:
        if key not in known:
            problems.append(f"unknown key '{key}'")
    command = raw.get("command")
    if command is None:
        problems.append("missing required key 'command'")
    elif command not in COMMANDS:
        problems.append(f"unknown command {command!r}; expected one of {', '.join(COMMANDS)}")
    blocks = {name: _build_block(cls, raw.get(name), name, problems) for name, cls in _BLOCKS.items()}
    grid, noise, sim, sweep = blocks["grid"], blocks["noise"], blocks["sim"], blocks["sweep"]

    L = _length(grid.L, problems, "grid.L")
    if L is not None:
        if L <= 0:
            problems.append(f"grid.L must be positive, got {L}")
        grid.L = L
    if not (isinstance(grid.N, int) and grid.N >= 2):
        problems.append(f"grid.N must be an integer >= 2, got {grid.N!r}")
    if not isinstance(raw.get("potential", "cos3plus1"), str):
        problems.append("potential must be a descriptor string")
    if not (isinstance(noise.M, int) and isinstance(noise.D, int) and 1 <= noise.D <= noise.M):
        problems.append(f"noise: need integers 1 <= D <= M, got M={noise.M!r}, D={noise.D!r}")
    if noise.q is not None and (not isinstance(noise.q, list) or len(noise.q) != noise.M):
        problems.append("noise.q must list exactly M eigenvalues")
    if isinstance(noise.mix, str):
        if noise.mix != "identity" and not noise.mix.startswith("random:"):
            problems.append(f"noise.mix must be 'identity', 'random:<seed>' or a D*D list, got {noise.mix!r}")
    elif not isinstance(noise.mix, list):
        problems.append("noise.mix must be a string or a list")

    needs_time = command not in ("spectrum", "steady-states")
    if needs_time or sum(x is not None for x in (sim.dt, sim.T, sim.nt)) >= 2:
        _resolve_time(sim, problems)
    if not (isinstance(sim.sigma, (int, float)) and sim.sigma >= 0):
        problems.append(f"sim.sigma must be >= 0, got {sim.sigma!r}")
    if not (isinstance(sim.stride, int) and sim.stride >= 1):
        problems.append(f"sim.stride must be a positive integer, got {sim.stride!r}")

    has_alpha = _nonempty_list(sweep.alpha, "sweep.alpha", problems)
    has_off = _nonempty_list(sweep.alpha_offsets, "sweep.alpha_offsets", problems)
    if has_alpha and has_off:
        problems.append("sweep: give either alpha or alpha_offsets, not both")
    if command in ("simulate", "steady-states", "ftle-sweep", "ews-sweep", "sync-check") and not (has_alpha or has_off):
        problems.append(f"{command} needs a non-empty sweep.alpha or sweep.alpha_offsets ladder")
    if command == "exit-sweep":
        if sweep.h is None:
            problems.append("exit-sweep needs a non-empty sweep.h ladder")
        else:
            _nonempty_list(sweep.h, "sweep.h", problems)
        if sweep.drift is None and not (has_alpha or has_off):
            problems.append("exit-sweep needs sweep.alpha, sweep.alpha_offsets or sweep.drift")
        ladder = sweep.alpha if has_alpha else sweep.alpha_offsets if has_off else []
        if len(ladder) > 1 or (ladder and sweep.drift is not None):
            problems.append("exit-sweep takes a single alpha (or one drift), not a ladder")
    if sweep.drift is not None:
        if not isinstance(sweep.drift, dict) or set(sweep.drift) - {"alpha0", "eps", "alpha_max"}:
            problems.append("sweep.drift accepts only alpha0, eps, alpha_max")
    if sweep.dynamics not in ("nonlinear", "linear"):
        problems.append(f"sweep.dynamics must be 'nonlinear' or 'linear', got {sweep.dynamics!r}")
    for key in ("ensemble", "k", "m_trunc", "renorm_every", "k_max"):
        v = getattr(sweep, key)
        if not (isinstance(v, int) and v >= 1):
            problems.append(f"sweep.{key} must be a positive integer, got {v!r}")
    _nonempty_list(sweep.modes, "sweep.modes", problems)
    if sweep.points is not None:
        _nonempty_list(sweep.points, "sweep.points", problems)

    workers = raw.get("workers", 1)
    if not (isinstance(workers, int) and workers >= 1):
        problems.append(f"workers must be a positive integer, got {workers!r}")
    seed = raw.get("seed", 0)
    if not (isinstance(seed, int) and seed >= 0):
        problems.append(f"seed must be a nonnegative integer, got {seed!r}")
    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(
        command=command,
        grid=grid,
        potential=raw.get("potential", "cos3plus1"),
        noise=noise,
        sim=sim,
        sweep=sweep,
        seed=seed,
        output=str(raw.get("output", "out")),
        workers=workers,
    )


def parse_config(text: str) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"not valid YAML: {exc}") from exc
    return parse_mapping(raw if raw is not None else {})


def serialize_config(cfg: ExperimentConfig, run_settings: bool = True) -> str:
    """YAML form; ``run_settings=False`` drops the output dir and worker count."""
    d = cfg.to_dict()
    if not run_settings:
        d.pop("output")
        d.pop("workers")
    return yaml.safe_dump(d, sort_keys=True, default_flow_style=False)


def config_hash(cfg: ExperimentConfig) -> str:
    """Digest of the experiment itself; output dir and worker count are excluded."""
    return hashlib.sha256(serialize_config(cfg, run_settings=False).encode()).hexdigest()


_FIG12 = {
    "grid": {"L": TWO_PI, "N": 200},
    "noise": {"M": 10, "D": 10, "mix": "random:0"},
    "sim": {"T": 10000.0, "nt": 100000, "sigma": 0.05, "stride": 100},
    "sweep": {"ensemble": 1},
}
_FIG345 = {
    "grid": {"L": TWO_PI, "N": 100},
    "noise": {"M": 10, "D": 10, "mix": "random:0"},
    "sim": {"T": 5000.0, "nt": 100000, "sigma": 0.01, "stride": 10},
    "sweep": {
        "alpha_offsets": [0.5, 0.4, 0.3, 0.2, 0.1, 0.05, 0.02],
        "ensemble": 10,
        "m_trunc": 30,
    },
}

PROFILES = {
    "fig1": {**_FIG12, "potential": "cos3plus1", "sweep": {**_FIG12["sweep"], "alpha": [1.15, 1.25]}},
    "fig2": {**_FIG12, "potential": "linear", "sweep": {**_FIG12["sweep"], "alpha": [0.65, 0.75]}},
    "fig3": {**_FIG345, "potential": "cos3plus1", "sweep": {**_FIG345["sweep"], "modes": [1, 2, 3, 4, 5]}},
    "fig4": {**_FIG345, "potential": "cos3plus1", "sweep": {**_FIG345["sweep"], "points": [20, 50, 70]}},
    "fig5": {**_FIG345, "potential": "linear", "sweep": {**_FIG345["sweep"], "points": [20, 50, 70]}},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def profile(name: str, overrides: dict | None = None) -> dict:
    """Raw mapping for a named profile, with ``overrides`` merged on top."""
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; expected one of {', '.join(PROFILES)}")
    return _merge(PROFILES[name], overrides or {})
