"""
Run configuration for the end-to-end pipeline.

Configs are YAML files. Loading goes through three gates: YAML parsing,
structural validation against ``run_config.schema.json``, then the pydantic
model (value constraints). Any failure surfaces as ``ConfigInvalid``.
Relative paths are resolved against the config file's directory.
"""

from __future__ import annotations

import json
import logging
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Optional

import jsonschema
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from src.occupancy.errors import ConfigInvalid
from src.occupancy.flow import FlowParams
from src.occupancy.forecast import ForecastParams, Strategy, WarpMode
from src.occupancy.fusion import WeightOrder
from src.occupancy.grid import DEFAULT_NUM_CLASSES, ClassTable

logger = logging.getLogger(__name__)

SCHEMA_PATH = Path(__file__).with_name("run_config.schema.json")


def default_class_set(num_classes: int) -> List[int]:
    """Classes 1..16 for the 18-class table, every non-free class otherwise."""
    if num_classes == DEFAULT_NUM_CLASSES:
        return ClassTable.occ3d().evaluable_ids()
    return ClassTable.generic(num_classes).evaluable_ids()


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    history_path: str = Field(min_length=1)
    gt_path: Optional[str] = Field(default=None, min_length=1)
    second_path: Optional[str] = Field(default=None, min_length=1)
    output_dir: str = Field(default="occ_out", min_length=1)
    horizon: int = Field(default=4, ge=1)
    warp_mode: WarpMode = WarpMode.BACKWARD_NN
    strategy: Strategy = Strategy.COMPOSED
    gate_weight: float = Field(default=0.5, ge=0.0, le=1.0)
    weight_order: WeightOrder = WeightOrder.ASCENDING
    refiner: str = Field(default="identity", pattern="^(identity|affine|file)$")
    refiner_args: Dict[str, Any] = Field(default_factory=dict)
    loss_lambda: float = Field(default=1.0, ge=0.0)
    num_classes: int = Field(default=DEFAULT_NUM_CLASSES, ge=1, le=256)
    class_set: Optional[List[int]] = Field(default=None, min_length=1)
    seed: int = Field(default=42, ge=0, lt=2**64)
    threads: int = Field(default=1, ge=1)
    flow: FlowParams = Field(default_factory=FlowParams)

    def flow_params(self) -> FlowParams:
        """Flow parameters with the run seed applied."""
        return self.flow.model_copy(update={"seed": self.seed})

    def forecast_params(self) -> ForecastParams:
        return ForecastParams(
            horizon=self.horizon,
            warp=self.warp_mode,
            strategy=self.strategy,
            flow=self.flow_params(),
        )

    def resolved_class_set(self) -> List[int]:
        """Explicit class set, or the evaluable ids of the class table."""
        if self.class_set is not None:
            return sorted(set(self.class_set))
        return default_class_set(self.num_classes)

    def resolve_paths(self, base: Path) -> "RunConfig":
        update = {}
        for key in ("history_path", "gt_path", "second_path", "output_dir"):
            value = getattr(self, key)
            if value is not None and not Path(value).is_absolute():
                update[key] = str(base / value)
        return self.model_copy(update=update)


@lru_cache(maxsize=1)
def load_schema() -> Dict[str, Any]:
    with open(SCHEMA_PATH, "r", encoding="utf-8") as f:
        return json.load(f)


def validate_config_dict(data: Any) -> RunConfig:
    """Structural then value validation of an already-parsed config."""
    if not isinstance(data, dict):
        raise ConfigInvalid("config must be a mapping of keys to values")
    try:
        jsonschema.validate(instance=data, schema=load_schema())
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigInvalid(
            f"{where}: {e.message}", {"path": where}
        ) from e
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigInvalid(f"invalid config values: {e}") from e


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except OSError as e:
        raise ConfigInvalid(f"cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigInvalid(f"config {path} is not valid YAML: {e}") from e
    config = validate_config_dict(data).resolve_paths(path.parent)
    logger.info("loaded run config %s", path)
    return config
