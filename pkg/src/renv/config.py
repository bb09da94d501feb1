"""Experiment configuration: a YAML file, command defaults and flag overrides."""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass, field

import yaml

from .errors import ConfigError
from .integrate import config_hash

SEED_VARIABLE = "RENV_SEED"
TOP_LEVEL_KEYS = {"seed", "seeds", "workers", "out", "spec", "tolerances", "params"}


@dataclass
class ExperimentConfig:
    command: str
    a: float = 1.0
    r: float = 0.0
    master_seed: int = 0
    seeds: tuple = (0,)
    workers: int = 1
    out: str = "results"
    tolerances: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    deterministic: bool = False

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("the seed matrix must not be empty")
        if any(int(s) < 0 for s in self.seeds) or self.master_seed < 0:
            raise ConfigError("seeds must be non-negative integers")
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        for name, value in self.tolerances.items():
            if not isinstance(value, (int, float)) or not value > 0:
                raise ConfigError(f"tolerance {name!r} must be positive, got {value!r}")

    @property
    def beta(self) -> float:
        return self.r + 0.25

    def content(self) -> dict:
        """Everything that determines the outputs (worker count and paths excluded)."""
        return {
            "command": self.command, "a": self.a, "r": self.r, "master_seed": self.master_seed,
            "seeds": list(self.seeds), "tolerances": self.tolerances, "params": self.params,
        }

    @property
    def hash(self) -> str:
        return config_hash(self.content())


def _spec_parameters(section) -> tuple[float, float]:
    section = dict(section or {})
    unknown = set(section) - {"a", "r", "beta"}
    if unknown:
        raise ConfigError(f"unknown spec keys {sorted(unknown)}")
    if "r" in section and "beta" in section:
        raise ConfigError("give either r or beta, not both (beta = r + 1/4)")
    a = float(section.get("a", 1.0))
    if "beta" in section:
        r = float(section["beta"]) - 0.25
    else:
        r = float(section.get("r", 0.0))
    return a, r


def read_file(path) -> dict:
    try:
        with open(path) as handle:
            data = yaml.safe_load(handle)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("the config file must hold a mapping")
    return data


def build_config(command, defaults, data=None, seed=None, workers=None, out=None, deterministic=False,
                 environ=None) -> ExperimentConfig:
    """Merge command defaults, file contents and overrides into a validated config.

    ``defaults`` holds ``params``, ``tolerances``, ``seeds`` and optionally
    ``spec``; file sections of the same names (and a section named after the
    command) override them key by key. The master seed comes from ``seed``,
    else ``RENV_SEED``, else the file.
    """
    data = dict(data or {})
    environ = os.environ if environ is None else environ
    command_section = data.pop(command, None) or {}
    unknown = set(data) - TOP_LEVEL_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    params = copy.deepcopy(defaults.get("params", {}))
    for source in (data.get("params") or {}, command_section):
        if not isinstance(source, dict):
            raise ConfigError("parameter sections must be mappings")
        extra = set(source) - set(params)
        if extra:
            raise ConfigError(f"unknown parameters for {command}: {sorted(extra)}")
        params.update(source)
    tolerances = dict(defaults.get("tolerances", {}))
    file_tolerances = data.get("tolerances") or {}
    if not isinstance(file_tolerances, dict):
        raise ConfigError("tolerances must be a mapping")
    tolerances.update(file_tolerances)
    spec = dict(defaults.get("spec", {}))
    file_spec = data.get("spec") or {}
    if "r" in file_spec or "beta" in file_spec:
        spec.pop("r", None)
        spec.pop("beta", None)
    spec.update(file_spec)
    a, r = _spec_parameters(spec)
    master = data.get("seed", 0)
    if environ.get(SEED_VARIABLE, "") != "":
        master = environ[SEED_VARIABLE]
    if seed is not None:
        master = seed
    try:
        master = int(master)
        seeds = data.get("seeds", defaults.get("seeds", (0,)))
        if isinstance(seeds, dict):
            seeds = range(int(seeds.get("start", 0)), int(seeds.get("start", 0)) + int(seeds["count"]))
        seeds = tuple(int(s) for s in seeds)
        workers = int(workers if workers is not None else data.get("workers", 1))
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"bad seed or worker setting: {exc}") from exc
    return ExperimentConfig(
        command=command, a=a, r=r, master_seed=master, seeds=seeds, workers=workers,
        out=str(out if out is not None else data.get("out", "results")),
        tolerances=tolerances, params=params, deterministic=deterministic,
    )
