"""Orchestration, file formats, configuration and the synthetic scene oracle."""

from .config import PipelineConfig, default_kp
from .scene import SceneBundle, ingest, synth_scene

__all__ = ["PipelineConfig", "default_kp", "SceneBundle", "ingest", "synth_scene"]
