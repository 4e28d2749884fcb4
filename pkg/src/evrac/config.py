"""Run configuration: diffable `key = value` sections, strictly validated.

Every CLI flag has a config-file equivalent; flags override the file. The
effective configuration is echoed into every artifact (logs, reports,
checkpoints) so runs are self-describing.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .agent import RacHyper
from .errors import ConfigError
from .reward import RewardNetHyper


@dataclass
class Config:
    # [data]
    events: str | None = None
    stations: str | None = None
    poi: str | None = None

    # [model]
    embed: int = 100
    hidden: int = 100
    layers: int = 2
    critic_hidden: int = 100
    k_actor: int = 5
    k_reward: int = 10

    # [training]
    alpha: float = 0.001
    epsilon: float = 0.5
    gamma: float = 0.99
    horizon: int = 10
    epochs: int = 200
    samples_per_epoch: int = 32
    target_interval: int = 100
    clip_norm: float = 5.0
    seed: int = 0
    finetune_epochs: int = 50
    patience: int = 10
    reward_alpha: float = 0.01
    reward_epochs: int = 200

    # [mode]
    warmup: bool = True
    per_driver: bool = False
    reward_update: str = "supervised"
    regularizer: str = "softmax_ce"
    pg_weight: str = "q"
    jobs: int = 1

    def validate(self) -> "Config":
        if not (0.0 <= self.epsilon <= 1.0):
            raise ConfigError("epsilon must be in [0, 1]")
        if not (0.0 <= self.gamma <= 1.0):
            raise ConfigError("gamma must be in [0, 1]")
        for name in ("alpha", "reward_alpha"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in (
            "embed", "hidden", "layers", "critic_hidden", "k_actor", "k_reward",
            "horizon", "epochs", "samples_per_epoch", "target_interval",
            "finetune_epochs", "reward_epochs", "jobs",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.clip_norm < 0:
            raise ConfigError("clip_norm must be >= 0 (0 disables clipping)")
        if self.patience < 0:
            raise ConfigError("patience must be >= 0")
        if self.reward_update not in ("supervised", "td_coupled"):
            raise ConfigError(f"unknown reward_update {self.reward_update!r}")
        if self.regularizer not in ("softmax_ce", "eta"):
            raise ConfigError(f"unknown regularizer {self.regularizer!r}")
        if self.pg_weight not in ("q", "delta"):
            raise ConfigError(f"unknown pg_weight {self.pg_weight!r}")
        return self

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def rac_hyper(self, epsilon: float | None = None, seed: int | None = None) -> RacHyper:
        return RacHyper(
            alpha=self.alpha,
            epsilon=self.epsilon if epsilon is None else epsilon,
            gamma=self.gamma,
            horizon=self.horizon,
            history=self.k_actor,
            embed=self.embed,
            hidden=self.hidden,
            layers=self.layers,
            critic_hidden=self.critic_hidden,
            epochs=self.epochs,
            samples_per_epoch=self.samples_per_epoch,
            target_interval=self.target_interval,
            clip_norm=self.clip_norm,
            seed=self.seed if seed is None else seed,
            pg_weight=self.pg_weight,
            regularizer=self.regularizer,
            reward_update=self.reward_update,
        )

    def reward_hyper(self, seed: int | None = None) -> RewardNetHyper:
        return RewardNetHyper(
            window=self.k_reward,
            hidden=self.hidden,
            layers=self.layers,
            alpha=self.reward_alpha,
            epochs=self.reward_epochs,
            clip_norm=self.clip_norm,
            seed=self.seed if seed is None else seed,
        )


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


_SCHEMA: dict[tuple[str, str], tuple[str, type]] = {
    ("data", "events"): ("events", str),
    ("data", "stations"): ("stations", str),
    ("data", "poi"): ("poi", str),
    ("model", "embed"): ("embed", int),
    ("model", "hidden"): ("hidden", int),
    ("model", "layers"): ("layers", int),
    ("model", "critic_hidden"): ("critic_hidden", int),
    ("model", "k_actor"): ("k_actor", int),
    ("model", "k_reward"): ("k_reward", int),
    ("training", "alpha"): ("alpha", float),
    ("training", "epsilon"): ("epsilon", float),
    ("training", "gamma"): ("gamma", float),
    ("training", "horizon"): ("horizon", int),
    ("training", "epochs"): ("epochs", int),
    ("training", "samples_per_epoch"): ("samples_per_epoch", int),
    ("training", "target_interval"): ("target_interval", int),
    ("training", "clip_norm"): ("clip_norm", float),
    ("training", "seed"): ("seed", int),
    ("training", "finetune_epochs"): ("finetune_epochs", int),
    ("training", "patience"): ("patience", int),
    ("training", "reward_alpha"): ("reward_alpha", float),
    ("training", "reward_epochs"): ("reward_epochs", int),
    ("mode", "warmup"): ("warmup", _parse_bool),
    ("mode", "per_driver"): ("per_driver", _parse_bool),
    ("mode", "reward_update"): ("reward_update", str),
    ("mode", "regularizer"): ("regularizer", str),
    ("mode", "pg_weight"): ("pg_weight", str),
    ("mode", "jobs"): ("jobs", int),
}


def load_config(path: str | Path) -> Config:
    """Parse and validate a config file; unknown sections or keys are errors."""
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    values: dict[str, object] = {}
    for section in parser.sections():
        for key in parser[section]:
            if (section, key) not in _SCHEMA:
                raise ConfigError(f"{path}: unknown key [{section}] {key}")
            attr, conv = _SCHEMA[(section, key)]
            raw = parser[section][key]
            try:
                values[attr] = conv(raw)
            except ValueError as exc:
                raise ConfigError(f"{path}: bad value for [{section}] {key}: {exc}") from exc
    return Config(**values).validate()


def apply_overrides(config: Config, **overrides) -> Config:
    """Replace fields with CLI-provided values (None means not provided)."""
    changes = {k: v for k, v in overrides.items() if v is not None}
    return dataclasses.replace(config, **changes).validate()
