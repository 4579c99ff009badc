"""Pipeline configuration, loaded from JSON.

Every section is optional; unknown keys anywhere are rejected so a typo
fails loudly instead of silently falling back to a default.

Schema (defaults shown)::

    {
      "seed": 0,
      "n_frames": 8,
      "n_objects": 4,
      "workers": 4,
      "projection": {"H": 64, "W": 512, "theta_min_deg": -25.0, "theta_max_deg": 3.0},
      "weather": {"kind": "fog", "severities": [1, 2, 3, 4, 5]},
      "diffusion": {"T": 1000, "S": 10, "beta_start": 1e-4, "beta_end": 0.02},
      "bev": {"extent": [0, 40.96, -20.48, 20.48, -1.5, 1.0], "voxel": [0.32, 0.32, 0.1]},
      "stages": {"restore_image": true, "restore_points": true, "bafam": true},
      "components": {"denoiser": "oracle", "compensator": "oracle", "head2d": "oracle",
                     "caaf": "zero", "b2a": "identity"},
      "eval": {"iou_thresh": 0.5, "mode": "3d", "score_thresh": 0.3, "nms_thresh": 0.5},
      "persist": false
    }

Component values: ``"oracle"`` (test-time maps that know the clean scene),
``"zero"`` / ``"identity"`` (untrained, structure-preserving parameters),
or a path to an AWTF parameter file for the default architecture.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from ..lidar_geom import BevExtent, ProjectionConfig
from ..weather_sim import KINDS

DESK_VOXEL = (0.32, 0.32, 0.1)


@dataclass
class ProjectionSection:
    H: int = 64
    W: int = 512
    theta_min_deg: float = -25.0
    theta_max_deg: float = 3.0

    def build(self):
        return ProjectionConfig(self.H, self.W, math.radians(self.theta_min_deg), math.radians(self.theta_max_deg))


@dataclass
class WeatherSection:
    kind: str = "fog"
    severities: list = field(default_factory=lambda: [1, 2, 3, 4, 5])

    def validate(self):
        if self.kind not in KINDS:
            raise ValueError(f"weather.kind must be one of {KINDS}")
        if not self.severities or any(int(s) != s or not 0 <= s <= 5 for s in self.severities):
            raise ValueError("weather.severities must be integers in 0..5")


@dataclass
class DiffusionSection:
    T: int = 1000
    S: int = 10
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass
class BevSection:
    extent: list = field(default_factory=lambda: list(BevExtent().as_tuple()))
    voxel: list = field(default_factory=lambda: list(DESK_VOXEL))

    def build_extent(self):
        return BevExtent(*self.extent)


@dataclass
class StagesSection:
    restore_image: bool = True
    restore_points: bool = True
    bafam: bool = True


@dataclass
class ComponentsSection:
    denoiser: str = "oracle"
    compensator: str = "oracle"
    head2d: str = "oracle"
    caaf: str = "zero"
    b2a: str = "identity"

    def validate(self):
        allowed = {
            "denoiser": ("oracle", "zero"),
            "compensator": ("oracle", "zero"),
            "head2d": ("oracle",),
            "caaf": ("zero",),
            "b2a": ("identity",),
        }
        for name, keywords in allowed.items():
            value = getattr(self, name)
            if value not in keywords and not Path(value).is_file():
                raise ValueError(f"components.{name}: {value!r} is neither one of {keywords} nor an existing file")


@dataclass
class EvalSection:
    iou_thresh: float = 0.5
    mode: str = "3d"
    score_thresh: float = 0.3
    nms_thresh: float = 0.5


@dataclass
class PipelineConfig:
    seed: int = 0
    n_frames: int = 8
    n_objects: int = 4
    workers: int = 4
    projection: ProjectionSection = field(default_factory=ProjectionSection)
    weather: WeatherSection = field(default_factory=WeatherSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    bev: BevSection = field(default_factory=BevSection)
    stages: StagesSection = field(default_factory=StagesSection)
    components: ComponentsSection = field(default_factory=ComponentsSection)
    eval: EvalSection = field(default_factory=EvalSection)
    persist: bool = False

    def validate(self):
        if self.n_frames < 1 or self.n_objects < 0 or self.workers < 1:
            raise ValueError("n_frames and workers must be >= 1, n_objects >= 0")
        self.projection.build()
        self.weather.validate()
        self.bev.build_extent()
        self.components.validate()
        if self.eval.mode not in ("2d-axis", "bev-rotated", "3d"):
            raise ValueError(f"eval.mode {self.eval.mode!r} unknown")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return _build(cls, data, "config").validate()

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ValueError(f"{where}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ValueError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        default = known[name].default_factory() if callable(known[name].default_factory) else known[name].default
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}")
        else:
            kwargs[name] = value
    return cls(**kwargs)
