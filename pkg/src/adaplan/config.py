"""TOML run configuration.

One file drives the whole pipeline: sections [env], [dataset], [diffusion],
[ensemble], [policy], [eval] plus a top-level master ``seed``.  Unknown keys
are rejected.  Relative paths are resolved against the config file's
directory.  Command-line overrides take the form ``section.key=value``.
"""

from __future__ import annotations

import dataclasses
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import nn
from .dataset import DATASET_TIERS, TierRecipe
from .diffusion import SCHEDULE_KINDS
from .ensemble import LOSS_KINDS, UNCERTAINTY_REDUCTIONS
from .envs import EnvSpec, make_env_spec
from .errors import ConfigError
from .policy import MODES, PolicyConfig


@dataclass(frozen=True)
class DatasetSection:
    tier: str = "medium"
    n_episodes: int = 200
    path: str = "data/dataset.adpd"
    medium_gain: float = 0.4
    medium_sigma: float = 0.3
    replay_gain_start: float = 0.2
    replay_gain_end: float = 0.4
    replay_sigma_start: float = 0.6
    replay_sigma_end: float = 0.3


@dataclass(frozen=True)
class DiffusionSection:
    horizon: int = 32
    n_denoise_steps: int = 50
    schedule: str = "cosine"
    hidden: tuple[int, ...] = (512, 512, 512)
    activation: str = "mish"
    steps: int = 2000
    batch_size: int = 64
    learning_rate: float = 2e-4
    holdout_fraction: float = 0.1
    path: str = "models/diffusion.adpl"


@dataclass(frozen=True)
class EnsembleSection:
    n_members: int = 5
    loss: str = "mse"
    steps: int = 1000
    batch_size: int = 64
    learning_rate: float = 1e-3
    path: str = "models/ensemble.adpl"


@dataclass(frozen=True)
class PolicySection:
    mode: str = "adaptive"
    delta: float = 0.05
    uncertainty_reduction: str = "mean"


@dataclass(frozen=True)
class EvalSection:
    n_seeds: int = 50
    output_dir: str = "reports"
    reference_episodes: int = 200
    deltas: tuple[float, ...] = ()
    members: tuple[int, ...] = ()
    bench_steps: int = 100
    bench_repeats: int = 5


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    env_name: str = "double_integrator_2d"
    env_params: tuple[tuple[str, float], ...] = ()
    dataset: DatasetSection = field(default_factory=DatasetSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    ensemble: EnsembleSection = field(default_factory=EnsembleSection)
    policy: PolicySection = field(default_factory=PolicySection)
    eval: EvalSection = field(default_factory=EvalSection)
    base_dir: str = "."

    def env_spec(self, *, max_steps: int | None = None) -> EnvSpec:
        params = dict(self.env_params)
        if max_steps is not None:
            params["max_steps"] = max_steps
        return make_env_spec(self.env_name, **params)

    def tier_recipe(self) -> TierRecipe:
        d = self.dataset
        return TierRecipe(d.medium_gain, d.medium_sigma, d.replay_gain_start,
                          d.replay_gain_end, d.replay_sigma_start, d.replay_sigma_end)

    def diffusion_train_config(self) -> nn.TrainConfig:
        d = self.diffusion
        return nn.TrainConfig(steps=d.steps, batch_size=d.batch_size,
                              learning_rate=d.learning_rate,
                              holdout_fraction=d.holdout_fraction)

    def ensemble_train_config(self) -> nn.TrainConfig:
        e = self.ensemble
        return nn.TrainConfig(steps=e.steps, batch_size=e.batch_size,
                              learning_rate=e.learning_rate)

    def policy_config(self, *, mode: str | None = None, delta: float | None = None,
                      max_steps: int | None = None) -> PolicyConfig:
        spec_steps = max_steps if max_steps is not None else self.env_spec().max_steps
        return PolicyConfig(
            mode=mode if mode is not None else self.policy.mode,
            delta=delta if delta is not None else self.policy.delta,
            horizon=self.diffusion.horizon,
            n_denoise_steps=self.diffusion.n_denoise_steps,
            max_steps=spec_steps,
            uncertainty_reduction=self.policy.uncertainty_reduction,
        )

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def dataset_path(self) -> Path:
        return self.resolve(self.dataset.path)

    @property
    def diffusion_path(self) -> Path:
        return self.resolve(self.diffusion.path)

    @property
    def ensemble_path(self) -> Path:
        return self.resolve(self.ensemble.path)

    @property
    def output_dir(self) -> Path:
        return self.resolve(self.eval.output_dir)


_SECTIONS = ("env", "dataset", "diffusion", "ensemble", "policy", "eval")

_SECTION_TYPES = {
    "dataset": DatasetSection,
    "diffusion": DiffusionSection,
    "ensemble": EnsembleSection,
    "policy": PolicySection,
    "eval": EvalSection,
}

_TUPLE_FIELDS = {"hidden", "deltas", "members"}


def _build_section(name: str, cls, raw: dict):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in fields:
            raise ConfigError(f"unknown key {name}.{key}")
        f = fields[key]
        if key in _TUPLE_FIELDS:
            if not isinstance(value, list):
                raise ConfigError(f"{name}.{key} must be an array")
            elem = int if key == "members" else (int if key == "hidden" else float)
            try:
                value = tuple(elem(v) for v in value)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"bad element in {name}.{key}: {e}") from e
        elif f.type in ("int",) or isinstance(f.default, int) and not isinstance(f.default, bool):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{name}.{key} must be an integer, got {value!r}")
            value = int(value)
        elif isinstance(f.default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{name}.{key} must be a number, got {value!r}")
            value = float(value)
        elif isinstance(f.default, str):
            if not isinstance(value, str):
                raise ConfigError(f"{name}.{key} must be a string, got {value!r}")
        kwargs[key] = value
    return cls(**kwargs)


def _validate(cfg: RunConfig) -> None:
    cfg.env_spec()  # raises ConfigError on unknown env or bad constant
    if cfg.dataset.tier not in DATASET_TIERS:
        raise ConfigError(f"dataset.tier must be one of {DATASET_TIERS}, got {cfg.dataset.tier!r}")
    if cfg.dataset.n_episodes < 1:
        raise ConfigError("dataset.n_episodes must be >= 1")
    if cfg.diffusion.horizon < 2:
        raise ConfigError("diffusion.horizon must be >= 2")
    if cfg.diffusion.n_denoise_steps < 1:
        raise ConfigError("diffusion.n_denoise_steps must be >= 1")
    if cfg.diffusion.schedule not in SCHEDULE_KINDS:
        raise ConfigError(f"diffusion.schedule must be one of {SCHEDULE_KINDS}")
    if not 0.0 < cfg.diffusion.holdout_fraction < 1.0:
        raise ConfigError("diffusion.holdout_fraction must be in (0, 1)")
    if cfg.ensemble.loss not in LOSS_KINDS:
        raise ConfigError(f"ensemble.loss must be one of {LOSS_KINDS}")
    if cfg.ensemble.n_members < 1:
        raise ConfigError("ensemble.n_members must be >= 1")
    if cfg.policy.mode not in MODES:
        raise ConfigError(f"policy.mode must be one of {MODES}")
    if math.isnan(cfg.policy.delta) or cfg.policy.delta < 0.0:
        raise ConfigError("policy.delta must be >= 0")
    if cfg.policy.uncertainty_reduction not in UNCERTAINTY_REDUCTIONS:
        raise ConfigError(
            f"policy.uncertainty_reduction must be one of {UNCERTAINTY_REDUCTIONS}")
    if cfg.eval.n_seeds < 1:
        raise ConfigError("eval.n_seeds must be >= 1")
    if cfg.eval.reference_episodes < 2:
        raise ConfigError("eval.reference_episodes must be >= 2")
    if cfg.eval.bench_steps < 1 or cfg.eval.bench_repeats < 1:
        raise ConfigError("eval.bench_steps and eval.bench_repeats must be >= 1")
    for d in cfg.eval.deltas:
        if math.isnan(d) or d < 0.0:
            raise ConfigError("eval.deltas entries must be >= 0")
    for m in cfg.eval.members:
        if m < 1:
            raise ConfigError("eval.members entries must be >= 1")
    for step_count in (cfg.dataset.n_episodes, cfg.diffusion.steps, cfg.diffusion.batch_size,
                       cfg.ensemble.steps, cfg.ensemble.batch_size):
        if step_count < 1:
            raise ConfigError("step/batch/episode counts must be >= 1")
    if cfg.diffusion.learning_rate <= 0 or cfg.ensemble.learning_rate <= 0:
        raise ConfigError("learning rates must be > 0")


def build_run_config(raw: dict, base_dir: str | Path = ".") -> RunConfig:
    """Construct and validate a RunConfig from parsed TOML data."""
    allowed_top = {"seed", *_SECTIONS}
    for key in raw:
        if key not in allowed_top:
            raise ConfigError(f"unknown top-level key {key!r}")
    seed = raw.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError(f"seed must be an integer, got {seed!r}")

    env_raw = dict(raw.get("env", {}))
    env_name = env_raw.pop("name", "double_integrator_2d")
    if not isinstance(env_name, str):
        raise ConfigError(f"env.name must be a string, got {env_name!r}")
    env_params = []
    for key, value in env_raw.items():
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"env.{key} must be a number, got {value!r}")
        env_params.append((key, value if key == "max_steps" else float(value)))

    sections = {}
    for name, cls in _SECTION_TYPES.items():
        sub = raw.get(name, {})
        if not isinstance(sub, dict):
            raise ConfigError(f"[{name}] must be a table")
        sections[name] = _build_section(name, cls, sub)

    cfg = RunConfig(
        seed=seed,
        env_name=env_name,
        env_params=tuple(env_params),
        dataset=sections["dataset"],
        diffusion=sections["diffusion"],
        ensemble=sections["ensemble"],
        policy=sections["policy"],
        eval=sections["eval"],
        base_dir=str(base_dir),
    )
    _validate(cfg)
    return cfg


def _parse_override_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text  # bare strings are allowed unquoted


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` (or ``seed=value``) overrides to raw TOML data."""
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in raw.items()}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, _, text = item.partition("=")
        value = _parse_override_value(text.strip())
        parts = key.strip().split(".")
        if len(parts) == 1:
            out[parts[0]] = value
        elif len(parts) == 2:
            section = out.setdefault(parts[0], {})
            if not isinstance(section, dict):
                raise ConfigError(f"cannot set {key!r}: {parts[0]} is not a table")
            section[parts[1]] = value
        else:
            raise ConfigError(f"override key {key!r} has too many dots")
    return out


def load_run_config(path: str | Path, overrides: list[str] | None = None) -> RunConfig:
    """Parse, override, and validate a TOML config file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"invalid TOML in {path}: {e}") from e
    if overrides:
        raw = apply_overrides(raw, overrides)
    return build_run_config(raw, base_dir=path.resolve().parent)
