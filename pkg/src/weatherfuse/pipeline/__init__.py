"""Data formats, synthetic scenes, configuration and the end-to-end run."""

from .config import PipelineConfig
from .run import run_pipeline
from .synth import Frame, synth_scene

__all__ = ["Frame", "PipelineConfig", "run_pipeline", "synth_scene"]
