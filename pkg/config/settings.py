import hashlib
import json
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from errors import ConfigError
from losses import LossWeights, MaterialParams
from phantom import PhantomResolution

# Load environment variables from .env file
load_dotenv()

Profile = Literal["full", "desk"]


class CorpusConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    path: str = "runs/corpus"
    n_identities: int = Field(4, ge=1)
    n_expressions: int = Field(6, ge=1)
    resolution: PhantomResolution = Field(default_factory=PhantomResolution)


class FieldConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["grid", "sinusoidal"] = "grid"
    grid_resolution: List[int] = Field(default_factory=lambda: [10, 10, 10])
    grid_mode: Literal["trilinear", "bspline"] = "trilinear"
    n_layers: int = Field(4, ge=2)
    width: int = Field(32, ge=1)
    omega0: float = Field(30.0, gt=0.0)
    d_id: int = Field(8, ge=1)
    d_ex: int = Field(8, ge=1)
    hidden: int = Field(32, ge=1)
    displacement_scale: float = Field(10.0, gt=0.0)
    # field box = canonical skin box scaled by this factor about its centre
    box_scale: float = Field(1.5, gt=1.0)

    @field_validator("grid_resolution")
    @classmethod
    def _three_counts(cls, v):
        if len(v) != 3 or min(v) < 2:
            raise ValueError("grid_resolution needs three counts >= 2")
        return v


class SamplingConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_volume: int = Field(450, ge=1)
    n_bone: int = Field(50, ge=3)
    n_fix: int = Field(100, ge=1)
    n_skin: int = Field(100, ge=1)
    volume_pool: int = Field(4, ge=1)


class LatticeConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    h: float = Field(4.0, gt=0.0)
    h_ladder: List[float] = Field(default_factory=lambda: [6.0, 5.0, 4.0, 3.0])
    quadrature: Literal["gauss8", "center"] = "gauss8"
    tolerance: float = Field(1e-6, gt=0.0)
    max_iterations: int = Field(500, ge=1)


class ScheduleConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    batch_size: int = Field(16, ge=1)
    learning_rate: float = Field(1e-4, gt=0.0)
    epochs: int = Field(200, ge=1)
    decay_after: int = Field(100, ge=0)
    log_every: int = Field(10, ge=1)


class FitConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    steps: int = Field(300, ge=1)
    learning_rate: float = Field(1e-2, gt=0.0)
    patience: int = Field(50, ge=1)
    fit_pose: bool = False


class EffectsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    gravity: Optional[List[float]] = None
    collision: bool = False
    barrier_distance: float = Field(1.0, gt=0.0)
    barrier_stiffness: float = Field(1e-3, gt=0.0)
    paralysis_alpha: float = Field(0.0, ge=0.0, le=1.0)
    # x > this value selects the paralysed half
    paralysis_side: float = 0.0
    jaw_scale: float = Field(1.0, gt=0.0)


class EvalConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    fscore_samples: int = Field(32000, ge=1)
    fscore_threshold: float = Field(1.0, gt=0.0)
    frontal_only: bool = True
    test_expressions: int = Field(2, ge=1)
    ablation_factor: float = Field(5.0, gt=1.0)


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    profile: Profile = "desk"
    seed: int = Field(0, ge=0)
    corpus: CorpusConfig = Field(default_factory=CorpusConfig)
    field: FieldConfig = Field(default_factory=FieldConfig)
    weights: LossWeights = Field(default_factory=LossWeights)
    material: MaterialParams = Field(default_factory=MaterialParams)
    sampling: SamplingConfig = Field(default_factory=SamplingConfig)
    lattice: LatticeConfig = Field(default_factory=LatticeConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    fit: FitConfig = Field(default_factory=FitConfig)
    effects: EffectsConfig = Field(default_factory=EffectsConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)


PROFILES: Dict[str, Dict[str, Any]] = {
    "full": {
        "field": {"kind": "sinusoidal", "n_layers": 5, "width": 128, "d_id": 128, "d_ex": 128, "hidden": 128},
        "sampling": {"n_volume": 45000, "n_bone": 5000, "n_fix": 10000, "n_skin": 10000},
        "schedule": {"batch_size": 16, "learning_rate": 1e-4, "epochs": 200, "decay_after": 100},
        "lattice": {"h": 2.0, "h_ladder": [6.8, 4.5, 3.0, 2.0, 1.3]},
    },
    "desk": {
        "field": {"kind": "grid", "d_id": 8, "d_ex": 8},
        "sampling": {"n_volume": 450, "n_bone": 50, "n_fix": 100, "n_skin": 100},
        "schedule": {"batch_size": 8, "learning_rate": 3e-3, "epochs": 60, "decay_after": 30},
        "lattice": {"h": 4.0, "h_ladder": [6.0, 5.0, 4.0, 3.0]},
        "eval": {"fscore_samples": 8000},
    },
}


def _merge(base: Dict[str, Any], extra: Dict[str, Any]) -> Dict[str, Any]:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _parse_override(item: str):
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value", item)
    key, raw = item.split("=", 1)
    key = key.strip()
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def _set_path(data: Dict[str, Any], key: str, value) -> None:
    node = data
    parts = key.split(".")
    for p in parts[:-1]:
        child = node.setdefault(p, {})
        if not isinstance(child, dict):
            raise ConfigError(f"{p!r} is not a section", key)
        node = child
    node[parts[-1]] = value


def _first_error_key(e: ValidationError) -> str:
    err = e.errors()[0]
    return ".".join(str(p) for p in err.get("loc", ()))


def create_run_config(
    path: Optional[Union[str, Path]] = None,
    profile: str = "",
    overrides: Sequence[str] = (),
    seed: Optional[int] = None,
) -> RunConfig:
    """
    Build a validated RunConfig from a profile, an optional JSON file and
    `key.path=value` overrides, in that order.

    Args:
        path: JSON config file; its `profile` key selects the base profile
        profile: Override the profile from environment (PHYSFACE_PROFILE)
        overrides: `--set` items; values are JSON literals or plain strings
        seed: Override the seed from environment (PHYSFACE_SEED)

    Returns:
        RunConfig with unknown keys rejected
    """
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}", "config") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}", "config") from e
        if not isinstance(data, dict):
            raise ConfigError("config root must be an object", "config")

    chosen = profile or data.get("profile") or os.getenv("PHYSFACE_PROFILE", "desk")
    if chosen not in PROFILES:
        raise ConfigError(f"unknown profile {chosen!r}", "profile")
    merged = _merge(PROFILES[chosen], data)
    merged["profile"] = chosen

    env_seed = os.getenv("PHYSFACE_SEED")
    if env_seed is not None and "seed" not in data:
        try:
            merged["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"PHYSFACE_SEED={env_seed!r} is not an integer", "seed") from None

    for item in overrides:
        key, value = _parse_override(item)
        _set_path(merged, key, value)
    if seed is not None:
        merged["seed"] = seed

    try:
        return RunConfig.model_validate(merged)
    except ValidationError as e:
        key = _first_error_key(e)
        raise ConfigError(f"invalid config at {key!r}: {e.errors()[0]['msg']}", key) from None


def run_root(default: str = "runs") -> Path:
    return Path(os.getenv("PHYSFACE_RUN_ROOT", default))


def config_digest(config: RunConfig) -> str:
    return hashlib.sha256(config.model_dump_json().encode()).hexdigest()
