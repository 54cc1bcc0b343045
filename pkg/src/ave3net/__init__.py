"""Streaming audio-visual speech enhancement (AV-E3Net style) on numpy."""

from .model import PRESETS, AVE3Net, ModelConfig, build_model, param_report, preset, toy_config
from .streaming import Session, enhance_offline, enhance_streaming

__all__ = ["PRESETS", "AVE3Net", "ModelConfig", "Session", "build_model", "enhance_offline",
           "enhance_streaming", "param_report", "preset", "toy_config"]
__version__ = "0.1.0"
