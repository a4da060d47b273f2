"""Steering-angle regression from dashcam frames with optical-flow fusion and liquid time-constant heads."""

__version__ = "0.1.0"
