"""End-to-end surface: dataset synthesis, file layout, reports, and the CLI."""

from gseal.toolkit.scenes import (
    CameraRig,
    SceneSample,
    SceneSpec,
    input_cameras,
    load_dataset,
    load_rig,
    save_dataset,
    save_rig,
    synth_dataset,
    synth_scene,
)
from gseal.toolkit.reports import format_percent, format_metric, report_assemble

__all__ = [
    "CameraRig",
    "SceneSample",
    "SceneSpec",
    "input_cameras",
    "load_dataset",
    "load_rig",
    "save_dataset",
    "save_rig",
    "synth_dataset",
    "synth_scene",
    "format_percent",
    "format_metric",
    "report_assemble",
]
