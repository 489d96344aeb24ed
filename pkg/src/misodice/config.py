"""Run configuration: one YAML file, one key per hyperparameter, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields

import yaml

from .approx import MixerVariant
from .errors import ConfigError
from .pipeline import StageConfigs
from .training import TrainConfig

PROVIDERS = ("rule", "noisy", "http")


@dataclass
class EnvBlock:
    family: str = "team-grid"
    params: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"family": self.family, **self.params}


@dataclass
class DatasetBlock:
    n_expert: int = 200
    n_poor: int = 1000
    horizon: int = 10
    poor_eps: float = 0.8     # mixing weight of the uniform policy in the poor source


@dataclass
class PreferenceBlock:
    provider: str = "rule"
    n_pairs: int = 2000
    flip_prob: float = 0.0
    endpoint: str | None = None
    timeout: float = 10.0


@dataclass
class Phase1Block:
    steps: int = 500
    lambda_v: float = 0.1
    k: int = 200
    lr: float = 0.05
    batch_size: int = 256
    hidden: list = field(default_factory=list)


@dataclass
class Phase2Block:
    alpha: float = 0.05
    gamma: float = 0.99
    mixer: str = "linear"
    disc_steps: int = 2000
    value_steps: int = 8000
    policy_steps: int = 2000
    batch_size: int = 0       # 0: full batch
    lr_disc: float = 0.01
    lr_value: float = 0.02
    lr_policy: float = 0.05
    hidden: list = field(default_factory=list)
    log_every: int = 100


@dataclass
class EvalBlock:
    episodes: int = 32
    seeds: int = 4
    horizon: int | None = None


@dataclass
class RunConfig:
    seed: int = 0
    env: EnvBlock = field(default_factory=EnvBlock)
    dataset: DatasetBlock = field(default_factory=DatasetBlock)
    preference: PreferenceBlock = field(default_factory=PreferenceBlock)
    phase1: Phase1Block = field(default_factory=Phase1Block)
    phase2: Phase2Block = field(default_factory=Phase2Block)
    eval: EvalBlock = field(default_factory=EvalBlock)

    def validate(self) -> "RunConfig":
        _check(isinstance(self.seed, int) and self.seed >= 0, "seed must be a non-negative integer")
        d, p, p1, p2, e = self.dataset, self.preference, self.phase1, self.phase2, self.eval
        _check(d.n_expert >= 1, "dataset.n_expert must be >= 1 (the expert source cannot be empty)")
        _check(d.n_poor >= 0, "dataset.n_poor must be >= 0")
        _check(d.horizon >= 1, "dataset.horizon must be >= 1")
        _check(0.0 <= d.poor_eps <= 1.0, "dataset.poor_eps must lie in [0, 1]")
        _check(p.provider in PROVIDERS, f"preference.provider must be one of {PROVIDERS}")
        _check(p.n_pairs >= 1, "preference.n_pairs must be >= 1")
        _check(0.0 <= p.flip_prob <= 0.5, "preference.flip_prob must lie in [0, 0.5]")
        _check(p.timeout > 0, "preference.timeout must be positive")
        _check(p.provider != "http" or bool(p.endpoint), "preference.endpoint is required for the http provider")
        _check(p1.steps >= 0 and p1.batch_size >= 0 and p1.lr > 0, "phase1 steps/batch_size/lr out of range")
        _check(p1.lambda_v >= 0, "phase1.lambda_v must be >= 0")
        _check(p1.k >= 1, "phase1.k must be >= 1")
        _check(p2.alpha >= 0, "phase2.alpha must be >= 0")
        _check(0.0 <= p2.gamma < 1.0, "phase2.gamma must lie in [0, 1)")
        _check(p2.mixer in {m.value for m in MixerVariant}, "phase2.mixer must be linear, vdn or two-layer")
        _check(min(p2.disc_steps, p2.value_steps, p2.policy_steps, p2.batch_size) >= 0,
               "phase2 step counts and batch size must be >= 0")
        _check(min(p2.lr_disc, p2.lr_value, p2.lr_policy) > 0, "phase2 learning rates must be positive")
        _check(p2.log_every >= 1, "phase2.log_every must be >= 1")
        for name, h in (("phase1.hidden", p1.hidden), ("phase2.hidden", p2.hidden)):
            _check(all(isinstance(x, int) and x >= 1 for x in h), f"{name} must list positive widths")
        _check(e.episodes >= 1 and e.seeds >= 1, "eval.episodes and eval.seeds must be >= 1")
        _check(e.horizon is None or e.horizon >= 1, "eval.horizon must be >= 1")
        return self

    @property
    def eval_horizon(self) -> int:
        return self.eval.horizon or self.dataset.horizon

    def phase1_train(self) -> TrainConfig:
        p = self.phase1
        return TrainConfig(p.steps, p.batch_size, p.lr, tuple(p.hidden), self.seed, self.phase2.log_every)

    def stages(self) -> StageConfigs:
        p = self.phase2

        def make(steps, lr):
            return TrainConfig(steps, p.batch_size, lr, tuple(p.hidden), self.seed, p.log_every)

        return StageConfigs(make(p.disc_steps, p.lr_disc), make(p.value_steps, p.lr_value),
                            make(p.policy_steps, p.lr_policy))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _check(ok: bool, msg: str):
    if not ok:
        raise ConfigError(msg)


_BLOCKS = {"env": EnvBlock, "dataset": DatasetBlock, "preference": PreferenceBlock, "phase1": Phase1Block,
           "phase2": Phase2Block, "eval": EvalBlock}


def _coerce(value, default, key):
    """Match the type of the default; ints are accepted for float fields."""
    if default is None or value is None:
        return value
    if isinstance(default, bool) or isinstance(value, bool):
        if type(value) is not type(default):
            raise ConfigError(f"{key}: expected {type(default).__name__}")
        return value
    if isinstance(default, float) and isinstance(value, (int, float)):
        return float(value)
    if not isinstance(value, type(default)):
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {type(value).__name__}")
    return value


def _block(cls, raw, name):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{name} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(raw) - set(known)
    if cls is EnvBlock:
        # environment parameters are checked by the benchmark builder
        params = {k: raw[k] for k in unknown}
        return EnvBlock(_coerce(raw.get("family", "team-grid"), "", "env.family"), params)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name}: {sorted(unknown)}")
    base = cls()
    return cls(**{k: _coerce(v, getattr(base, k), f"{name}.{k}") for k, v in raw.items()})


def from_dict(raw: dict | None) -> RunConfig:
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    unknown = set(raw) - set(_BLOCKS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    seed = raw.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    cfg = RunConfig(seed, **{k: _block(cls, raw.get(k), k) for k, cls in _BLOCKS.items()})
    return cfg.validate()


def load(path=None) -> RunConfig:
    if path is None:
        return from_dict({})
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    except yaml.YAMLError as err:
        raise ConfigError(f"malformed config {path}: {err}") from err
    return from_dict(raw)


def set_path(cfg: RunConfig, dotted: str, value) -> RunConfig:
    """Apply one override such as ``phase2.alpha``; the result is re-validated."""
    raw = cfg.to_dict()
    env = raw.pop("env")
    raw["env"] = {"family": env["family"], **env["params"]}
    node = raw
    *parents, leaf = dotted.split(".")
    for p in parents:
        node = node[p]
    node[leaf] = value
    return from_dict(raw)


def apply_environment(cfg: RunConfig, environ=None) -> RunConfig:
    """``MISO_SEED`` and ``MISO_HTTP_ENDPOINT`` override the file."""
    environ = os.environ if environ is None else environ
    if "MISO_SEED" in environ:
        try:
            seed = int(environ["MISO_SEED"])
        except ValueError as err:
            raise ConfigError(f"MISO_SEED must be an integer, got {environ['MISO_SEED']!r}") from err
        cfg = set_path(cfg, "seed", seed)
    if environ.get("MISO_HTTP_ENDPOINT"):
        cfg = set_path(cfg, "preference.endpoint", environ["MISO_HTTP_ENDPOINT"])
    return cfg
