"""Flat ``key = value`` experiment configuration files."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

# regularization weights of the three examples
DEFAULT_ALPHA = {1: 2.5e-4, 2: 2.5e-4, 3: 3.2e-3}


class ConfigError(ValueError):
    """Malformed or out-of-range configuration."""


@dataclass(frozen=True)
class ExperimentConfig:
    example: int = 1
    epsilon: float = 1e-3
    alpha: float = 2.5e-4
    theta: float = 0.7
    n_per_side: int = 8
    dof_budget: int = 20000
    max_levels: int = 15
    uniform_levels: int = 11
    bisections: int = 1
    seed: int = 0
    penalty_support: bool = False
    n_patterns: int = 10
    lam: float = 0.1
    data_dof: int = 160000
    data_theta: float = 0.7
    max_iters: int = 500
    grad_tol: float = 1e-8
    gap_tol: float = 1e-8
    metric: str = "gauss-newton"

    def __post_init__(self):
        checks = [
            (self.example in (1, 2, 3), "example must be 1, 2 or 3"),
            (self.epsilon >= 0, "epsilon must be nonnegative"),
            (self.alpha > 0, "alpha must be positive"),
            (0 < self.theta <= 1, "theta must lie in (0, 1]"),
            (0 < self.data_theta <= 1, "data_theta must lie in (0, 1]"),
            (self.n_per_side >= 8 and self.n_per_side % 8 == 0, "n_per_side must be a positive multiple of 8"),
            (self.dof_budget > 0, "dof_budget must be positive"),
            (self.max_levels >= 1, "max_levels must be at least 1"),
            (self.uniform_levels >= 1, "uniform_levels must be at least 1"),
            (self.bisections >= 1, "bisections must be at least 1"),
            (self.seed >= 0, "seed must be nonnegative"),
            (1 <= self.n_patterns <= 15, "n_patterns must lie in [1, 15]"),
            (0 < self.lam < 1, "lam must lie in (0, 1)"),
            (self.data_dof > 0, "data_dof must be positive"),
            (self.max_iters >= 0, "max_iters must be nonnegative"),
            (self.grad_tol >= 0 and self.gap_tol >= 0, "tolerances must be nonnegative"),
            (self.metric in ("gauss-newton", "newton", "h1"), "metric must be 'gauss-newton', 'newton' or 'h1'"),
            (self.penalty_support is False or self.example == 3, "penalty_support applies to example 3 only"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)

    @property
    def support(self):
        from .synthetic import OMEGA_PRIME
        return OMEGA_PRIME if self.penalty_support else None

    def optimizer_options(self) -> dict:
        return {"max_iters": self.max_iters, "grad_tol": self.grad_tol,
                "gap_tol": self.gap_tol, "metric": self.metric}

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _convert(key: str, raw: str):
    kind = _TYPES[key]
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        if kind == "int":
            value = float(raw)
            if value != int(value):
                raise ValueError(raw)
            return int(value)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind}") from None


def parse_config(text: str) -> ExperimentConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    Keys not given take their defaults, except that ``alpha`` defaults to the
    example's standard weight.
    """
    values = {}
    for number, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {number}: expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"line {number}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {number}: duplicate key {key!r}")
        values[key] = _convert(key, raw)
    if "alpha" not in values:
        values["alpha"] = DEFAULT_ALPHA.get(values.get("example", 1), ExperimentConfig.alpha)
    return ExperimentConfig(**values)


def dump_config(config: ExperimentConfig) -> str:
    lines = []
    for f in fields(config):
        value = getattr(config, f.name)
        text = ("true" if value else "false") if isinstance(value, bool) else repr(value) if isinstance(value, float) else str(value)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)


def shipped_configs() -> list[str]:
    """Names of the configuration files bundled with the package."""
    root = resources.files("afem_eit") / "configs"
    return sorted(p.name for p in root.iterdir() if p.name.endswith(".cfg"))


def shipped_config(name: str) -> ExperimentConfig:
    root = resources.files("afem_eit") / "configs"
    return parse_config((root / name).read_text())
