"""Declarative pipeline configuration (YAML or JSON) with strict key checking."""
import json
import os
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError as PydanticError, model_validator

from ..errors import SchemaError

ENV_VAR = "MOCAPKIT_CONFIG"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ShotsConfig(_Strict):
    enabled: bool = True
    content_threshold: float = Field(0.4, gt=0)
    flow_threshold: float = Field(20.0, gt=0)  # px/frame; walking at 5 m already moves ~8
    gate_scale: float = Field(0.5, gt=0)
    process_noise: float = Field(1.0, gt=0)
    measurement_noise: float = Field(4.0, gt=0)
    min_length: int = Field(30, ge=1)


class SmoothConfig(_Strict):
    enabled: bool = True
    poly_order: int = Field(2, ge=0)
    w_min: int = Field(2, ge=1)
    w_max: int = Field(8, ge=1)
    boundary: Literal["interp", "mirror"] = "interp"

    @model_validator(mode="after")
    def _window(self):
        if self.w_min > self.w_max or self.poly_order >= 2 * self.w_min + 1:
            raise ValueError("need w_min <= w_max and poly_order < 2 * w_min + 1")
        return self


class FitStageConfig(_Strict):
    enabled: bool = True
    joint: float = Field(1.0, ge=0)
    smooth: float = Field(0.5, ge=0)
    pen: float = Field(1.0, ge=0)
    phy: float = Field(1.0, ge=0)
    method: Literal["gauss_newton", "adaptive"] = "gauss_newton"
    iterations: int = Field(500, ge=1)
    lr: float = Field(1e-2, gt=0)
    tolerance: float = Field(1e-6, ge=0)
    view: int = Field(0, ge=0)


class MultiviewConfig(_Strict):
    enabled: bool = True
    temporal: float = Field(1.0, ge=0)
    bone: float = Field(1.0, ge=0)
    gauge: float = Field(1e4, gt=0)
    iterations: int = Field(100, ge=1)
    confidence_cutoff: float = Field(0.0, ge=0, le=1)
    optimize_cameras: bool = True


class TrajectoryConfig(_Strict):
    enabled: bool = True
    sigma: float = Field(10.0, gt=0)
    data: float = Field(1.0, ge=0)
    smooth: float = Field(100.0, ge=0)
    skate: float = Field(1000.0, ge=0)
    contact: float = Field(1000.0, ge=0)
    iterations: int = Field(100, ge=1)
    contact_height: float = Field(0.08, ge=0)
    contact_speed: float = Field(0.02, ge=0)
    contact_distance: float = Field(0.08, ge=0)
    dba_iterations: int = Field(100, ge=1)
    camera_scale: float = Field(1.0, gt=0)


class CaptionConfig(_Strict):
    enabled: bool = True
    emotion: Optional[str] = None
    stride: int = Field(1, ge=1)


class AugmentConfig(_Strict):
    enabled: bool = False
    lower_body_library: list[str] = []
    face_library: list[str] = []


class PipelineConfig(_Strict):
    input: Optional[str] = None
    output: Optional[str] = None
    report: Optional[str] = None
    seed: int = 0
    shots: ShotsConfig = ShotsConfig()
    smooth: SmoothConfig = SmoothConfig()
    fit: FitStageConfig = FitStageConfig()
    multiview: MultiviewConfig = MultiviewConfig()
    trajectory: TrajectoryConfig = TrajectoryConfig()
    caption: CaptionConfig = CaptionConfig()
    augment: AugmentConfig = AugmentConfig()

    @classmethod
    def all_off(cls, **kw):
        off = {k: {"enabled": False} for k in STAGES}
        off.update(kw)
        return cls.model_validate(off)


STAGES = ("shots", "smooth", "fit", "multiview", "trajectory", "caption", "augment")


def _parse_scalar(text):
    return yaml.safe_load(text)


def apply_overrides(data, overrides):
    """Apply ``a.b=value`` strings (values parsed as YAML scalars) to a nested dict."""
    data = json.loads(json.dumps(data))
    for item in overrides or ():
        if "=" not in item:
            raise SchemaError(f"override '{item}' is not of the form key=value")
        key, value = item.split("=", 1)
        node = data
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise SchemaError(f"override '{item}' descends into a scalar")
        node[parts[-1]] = _parse_scalar(value)
    return data


def load_config(path=None, overrides=(), env=None):
    """Config from ``path`` (or ``$MOCAPKIT_CONFIG``), then ``overrides``; defaults when neither is set."""
    env = os.environ if env is None else env
    path = path or env.get(ENV_VAR)
    data = {}
    if path:
        text = Path(path).read_text()
        data = (json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)) or {}
        if not isinstance(data, dict):
            raise SchemaError(f"config {path} must hold a mapping")
    data = apply_overrides(data, overrides)
    try:
        return PipelineConfig.model_validate(data)
    except PydanticError as exc:
        raise SchemaError(f"invalid config: {exc}") from None


def dump_config(config):
    return yaml.safe_dump(config.model_dump(), sort_keys=True)
