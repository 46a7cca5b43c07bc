"""Differentiable room-impulse-response rendering and inverse fitting.

Given a handful of measured RIRs and a planar room geometry, the toolkit
fits interpretable acoustic parameters (source directivity, source impulse
response, per-surface reflection responses, a residual field) and renders
RIRs, music, binaural audio, and loudness grids at arbitrary listener
positions.
"""

from .dsp import AudioClip, MagnitudeResponse
from .geometry import Room, Surface, load_room, save_room, shoebox_room
from .models import (
    DirectivityMap,
    SceneParams,
    SurfaceResponse,
    load_checkpoint,
    save_checkpoint,
    transfer_surface,
)
from .renderer import HrirBank, RenderConfig, render_grid, render_music, render_rir
from .fit import FitConfig, FitReport, LossConfig, fit, localize_source, spectral_loss
from .tracer import PathRecord, PathSet, trace_paths

__all__ = [
    "AudioClip",
    "DirectivityMap",
    "FitConfig",
    "FitReport",
    "HrirBank",
    "LossConfig",
    "MagnitudeResponse",
    "PathRecord",
    "PathSet",
    "RenderConfig",
    "Room",
    "SceneParams",
    "Surface",
    "SurfaceResponse",
    "fit",
    "load_checkpoint",
    "load_room",
    "localize_source",
    "render_grid",
    "render_music",
    "render_rir",
    "save_checkpoint",
    "save_room",
    "shoebox_room",
    "spectral_loss",
    "trace_paths",
    "transfer_surface",
]

__version__ = "0.1.0"
