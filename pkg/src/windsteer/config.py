"""TOML run configuration.

Sections: ``[farm]``, ``[inflow]``, ``[wake]``, ``[turbulence]``,
``[constraint]``, ``[training]``, ``[surrogate]``, ``[evaluation]``, ``[paths]``.
Command-line overrides use dotted keys such as ``constraint.delta_max``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import tomli

from windsteer import ConfigError
from windsteer.env import EnvConfig
from windsteer.isac import TrainConfig
from windsteer.turbwind.farm import FarmLayout, WakeParams
from windsteer.turbwind.turbulence import BoxDims, InflowSpec


@dataclass(frozen=True)
class TurbulenceConfig:
    pool_size: int = 60
    first_id: int = 0
    dims: BoxDims = field(default_factory=BoxDims)

    @property
    def pool_ids(self) -> list:
        return list(range(self.first_id, self.first_id + self.pool_size))


@dataclass(frozen=True)
class SurrogateConfig:
    n_samples: int = 20000
    seed: int = 1
    hidden: int = 64
    epochs: int = 150


@dataclass(frozen=True)
class EvalConfig:
    box_id: int = 61
    duration: float = 3000.0


@dataclass(frozen=True)
class PathsConfig:
    boxes: str = "boxes"
    surrogate: str = "surrogate.bin"
    runs: str = "runs"


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    turbulence: TurbulenceConfig = field(default_factory=TurbulenceConfig)
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self), default=str))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


# section -> key -> (target, attribute); target names the sub-object
_FARM_KEYS = {"n_turbines", "rotor_diameter", "hub_height", "spacing", "rated_power", "cp",
              "rho", "power_exponent", "ct", "positions"}
_ENV_FARM_KEYS = {"dt", "substeps", "spinup", "power_window", "obs_window", "del_window"}
_ENV_TRAIN_KEYS = {"n_env", "reset_interval"}
_DIM_KEYS = {f.name for f in fields(BoxDims)}
SECTIONS = ("farm", "inflow", "wake", "turbulence", "constraint", "training", "surrogate",
            "evaluation", "paths")


def _typed(section, key, value, default):
    path = f"{section}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected a boolean, got {value!r}", path)
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", path)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", path)
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", path)
        return value
    return value


def _merge(obj, section, values: dict, allowed=None):
    names = {f.name for f in fields(obj)}
    if allowed is not None:
        names &= allowed
    kw = {}
    for key, value in values.items():
        if key not in names:
            raise ConfigError(f"unknown key {key!r}", f"{section}.{key}")
        kw[key] = _typed(section, key, value, getattr(obj, key))
    return replace(obj, **kw) if kw else obj


def _delta_max(value):
    if value is None or (isinstance(value, str) and value.lower() in ("none", "unconstrained")):
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"expected a number or \"none\", got {value!r}", "constraint.delta_max")
    return float(value)


def build_config(data: dict) -> RunConfig:
    """Validate a parsed TOML document and build the run configuration."""
    for section, body in data.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]", section)
        if not isinstance(body, dict):
            raise ConfigError(f"[{section}] must be a table", section)
    farm = dict(data.get("farm", {}))
    if "positions" in farm:
        farm["positions"] = tuple(tuple(float(c) for c in p) for p in farm["positions"])
    env_farm = {k: farm.pop(k) for k in list(farm) if k in _ENV_FARM_KEYS}
    layout = _merge(FarmLayout(), "farm", farm, _FARM_KEYS)
    inflow = _merge(InflowSpec(), "inflow", data.get("inflow", {}))
    wake = _merge(WakeParams(), "wake", data.get("wake", {}))

    turb = dict(data.get("turbulence", {}))
    dims = _merge(BoxDims(), "turbulence", {k: turb.pop(k) for k in list(turb) if k in _DIM_KEYS})
    turbulence = _merge(TurbulenceConfig(), "turbulence", turb, {"pool_size", "first_id"})
    turbulence = replace(turbulence, dims=dims)
    if turbulence.pool_size < 1:
        raise ConfigError("pool_size must be at least 1", "turbulence.pool_size")

    constraint = dict(data.get("constraint", {}))
    env_kw = {}
    if "delta_max" in constraint:
        env_kw["delta_max"] = _delta_max(constraint.pop("delta_max"))
    if "alpha" in constraint:
        env_kw["alpha"] = _typed("constraint", "alpha", constraint.pop("alpha"), 1.0)
    for key in constraint:
        raise ConfigError(f"unknown key {key!r}", f"constraint.{key}")
    base_env = EnvConfig()
    for key, value in env_farm.items():
        env_kw[key] = _typed("farm", key, value, getattr(base_env, key))
    training = dict(data.get("training", {}))
    for key in list(training):
        if key in _ENV_TRAIN_KEYS:
            env_kw[key] = _typed("training", key, training.pop(key), getattr(base_env, key))
    if "seed" in training:
        env_kw["seed"] = _typed("training", "seed", training["seed"], 0)
    env = EnvConfig(layout=layout, inflow=inflow, wake=wake, **env_kw)
    train = _merge(TrainConfig(), "training", training)

    surrogate = _merge(SurrogateConfig(), "surrogate", data.get("surrogate", {}))
    if surrogate.n_samples < 10:
        raise ConfigError("n_samples must be at least 10", "surrogate.n_samples")
    evaluation = _merge(EvalConfig(), "evaluation", data.get("evaluation", {}))
    paths = _merge(PathsConfig(), "paths", data.get("paths", {}))
    return RunConfig(env, train, turbulence, surrogate, evaluation, paths)


def parse_override(item: str) -> tuple:
    """``section.key=value`` with the value parsed as a TOML literal when possible."""
    if "=" not in item or "." not in item.split("=", 1)[0]:
        raise ConfigError(f"override must look like section.key=value, got {item!r}", item)
    key, raw = item.split("=", 1)
    try:
        value = tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        value = raw
    return key.strip(), value


def apply_overrides(data: dict, overrides) -> dict:
    out = {k: dict(v) for k, v in data.items()}
    for key, value in overrides:
        section, name = key.split(".", 1)
        out.setdefault(section, {})[name] = value
    return out


def load_config(path=None, overrides=()) -> RunConfig:
    """Read ``path`` (optional), apply dotted overrides, validate."""
    data = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}", "file") from exc
    return build_config(apply_overrides(data, overrides))


def field_label(path: str | None) -> str:
    """``constraint.delta_max`` -> ``[constraint].delta_max``."""
    if not path:
        return "config"
    if "." in path:
        section, key = path.split(".", 1)
        if section in SECTIONS:
            return f"[{section}].{key}"
    return path if path not in SECTIONS else f"[{path}]"


def resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q
