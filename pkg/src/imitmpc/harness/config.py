"""Experiment configuration: a flat ``key = value`` text format with typed keys."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace

from ..errors import ConfigError

ALGORITHMS = ("bc", "forward", "forward_switch", "bc_tail")


def _ints(text):
    return tuple(int(v) for v in text.replace(",", " ").split())


def _strs(text):
    return tuple(v for v in text.replace(",", " ").split())


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key: (parser, help)
KEYS = {
    "d": (int, "state dimension"),
    "source": (str, "system matrix: paper-matrix | seeded-random"),
    "system_seed": (int, "seed for seeded-random matrices"),
    "x_bound": (float, "state box half-width"),
    "u_bound": (float, "input box half-width"),
    "init_lower": (float, "lower corner of the initial-state box"),
    "init_upper": (float, "upper corner of the initial-state box"),
    "q": (float, "state weight, Q = q I"),
    "r": (float, "input weight, R = r I"),
    "N": (int, "MPC horizon"),
    "T": (int, "imitation horizon"),
    "eps": (float, "disturbance bound of the robust expert"),
    "expert": (str, "robust | nominal"),
    "terminal": (str, "terminal set: none | polytope | levelset"),
    "schedule": (str, "sample schedule: flat | theory"),
    "ell": (int, "probe trajectories per switch test"),
    "delta": (float, "confidence parameter of the theory probe count"),
    "algorithms": (_strs, "comma-separated subset of " + ", ".join(ALGORITHMS)),
    "budgets": (_ints, "comma-separated demonstration budgets, ascending"),
    "repeats": (int, "independent repeats per budget"),
    "test_states": (int, "test initial states per repeat"),
    "seed": (int, "root seed"),
    "epochs": (int, "training epochs per policy"),
    "learning_rate": (float, "Adam step size"),
    "batch_size": (int, "mini-batch size, 0 for full batch"),
    "hidden": (_ints, "hidden layer widths"),
    "loss": (str, "norm | squared"),
    "warm_start": (_bool, "initialize stage t from stage t-1"),
    "workers": (int, "worker processes for independent cells"),
    "outdir": (str, "output directory"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    d: int = 3
    source: str = "paper-matrix"
    system_seed: int = 0
    x_bound: float = 100.0
    u_bound: float = 10.0
    init_lower: float = 8.0
    init_upper: float = 10.0
    q: float = 1.0
    r: float = 1.0
    N: int = 20
    T: int = 30
    eps: float = 0.1
    expert: str = "robust"
    terminal: str = "none"
    schedule: str = "flat"
    ell: int = 20
    delta: float = 0.1
    algorithms: tuple = ("bc", "forward")
    budgets: tuple = (90, 180, 450, 900)
    repeats: int = 10
    test_states: int = 20
    seed: int = 0
    epochs: int = 500
    learning_rate: float = 1e-3
    batch_size: int = 0
    hidden: tuple = (50, 50, 50)
    loss: str = "norm"
    warm_start: bool = True
    workers: int = 1
    outdir: str = "runs/out"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.d < 2:
            raise ConfigError("d must be at least 2")
        if self.source not in ("paper-matrix", "seeded-random"):
            raise ConfigError(f"unknown source {self.source!r}")
        if self.expert not in ("robust", "nominal"):
            raise ConfigError(f"unknown expert {self.expert!r}")
        if self.terminal not in ("none", "polytope", "levelset"):
            raise ConfigError(f"unknown terminal option {self.terminal!r}")
        if self.schedule not in ("flat", "theory"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.loss not in ("norm", "squared"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        bad = [a for a in self.algorithms if a not in ALGORITHMS]
        if bad or not self.algorithms:
            raise ConfigError(f"unknown or missing algorithms: {bad}")
        if "bc_tail" in self.algorithms and "forward_switch" not in self.algorithms:
            raise ConfigError("bc_tail takes its switch time from forward_switch; list both")
        if not self.budgets or list(self.budgets) != sorted(self.budgets):
            raise ConfigError("budgets must be nonempty and ascending")
        if min(self.budgets) < 2 * self.T and any(a != "bc" for a in self.algorithms):
            raise ConfigError(f"budgets below 2*T = {2 * self.T} leave fewer than 2 labels per stage")
        if min(self.budgets) < self.T:
            raise ConfigError(f"budgets below T = {self.T} leave no full expert trajectory")
        for name in ("N", "T", "repeats", "test_states", "epochs", "ell", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("eps", "q", "r", "learning_rate", "x_bound", "u_bound"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.init_lower > self.init_upper:
            raise ConfigError("init_lower exceeds init_upper")
        if self.batch_size < 0:
            raise ConfigError("batch_size must be nonnegative")

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def updated(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)


def parse_overrides(pairs) -> dict:
    """Parse ``key=value`` strings into typed values; unknown keys raise ``ConfigError``."""
    out = {}
    for where, raw in pairs:
        lineno = where if isinstance(where, str) else f"line {where}"
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{lineno}: duplicate key {key!r}")
        parser = KEYS[key][0]
        try:
            out[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"{lineno}: bad value for {key}: {exc}") from None
    return out


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    values = parse_overrides(enumerate(text.splitlines(), start=1))
    base = base or ExperimentConfig()
    return replace(base, **values)


def load_config(path, overrides=()) -> ExperimentConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    cfg = parse_config(text)
    if overrides:
        cfg = replace(cfg, **parse_overrides(((f"--set #{i + 1}", o) for i, o in enumerate(overrides))))
    return cfg


def keys_help() -> str:
    width = max(len(k) for k in KEYS)
    defaults = ExperimentConfig()
    lines = ["config keys (key = value, '#' starts a comment):"]
    for k, (_, doc) in KEYS.items():
        v = getattr(defaults, k)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"  {k:<{width}}  {doc} [default: {v}]")
    return "\n".join(lines)
