"""Experiment configuration files.

A config is one JSON object::

    {
      "schema_version": 1,
      "algo": {... AlgoConfig fields ...},
      "env": {... EnvSpec fields ...},
      "demos": "path/to/demos.jsonl" | null,
      "n_demos": 25,
      "demo_seed": 1234,
      "eval_episodes": 50,
      "eval_seed": 0,
      "checkpoint_every": 50,
      "out": "runs",
      "seeds": [0, 1, 2]
    }

Every section is optional and falls back to the defaults below.  Unknown
keys anywhere are rejected.  ``algo.seed`` is ignored in favour of ``seeds``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from soil.algos import AlgoConfig
from soil.envs import EnvSpec

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass
class ExperimentConfig:
    algo: AlgoConfig = field(default_factory=AlgoConfig)
    env: EnvSpec = field(default_factory=EnvSpec)
    demos: str | None = None
    n_demos: int = 25
    demo_seed: int = 1234
    eval_episodes: int = 50
    eval_seed: int = 0
    checkpoint_every: int = 50
    out: str = "runs"
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ConfigError("seed list is empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"seed list has duplicates: {list(self.seeds)}")
        if self.n_demos < 1:
            raise ConfigError("n_demos must be >= 1")
        if self.eval_episodes < 1:
            raise ConfigError("eval_episodes must be >= 1")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "algo": self.algo.to_dict(),
            "env": self.env.to_dict(),
            "demos": self.demos,
            "n_demos": self.n_demos,
            "demo_seed": self.demo_seed,
            "eval_episodes": self.eval_episodes,
            "eval_seed": self.eval_seed,
            "checkpoint_every": self.checkpoint_every,
            "out": self.out,
            "seeds": list(self.seeds),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            algo = AlgoConfig.from_dict(d.pop("algo", {}))
            env = EnvSpec.from_dict(d.pop("env", {}))
            return cls(algo=algo, env=env, **d)
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None

    def with_overrides(self, **changes) -> "ExperimentConfig":
        """Copy with top-level fields or ``algo.<name>`` / ``env.<name>`` entries replaced."""
        top, algo, env = {}, {}, {}
        for key, value in changes.items():
            if value is None:
                continue
            if key.startswith("algo."):
                algo[key[5:]] = value
            elif key.startswith("env."):
                env[key[4:]] = value
            else:
                top[key] = value
        try:
            new_algo = AlgoConfig.from_dict({**self.algo.to_dict(), **algo}) if algo else self.algo
            new_env = EnvSpec.from_dict({**self.env.to_dict(), **env}) if env else self.env
            return replace(self, algo=new_algo, env=new_env, **top)
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from None
    return ExperimentConfig.from_dict(data)


def save_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
