"""LiDAR reflectivity calibration toolkit.

Converts raw per-point LiDAR intensity into range- and incidence-
invariant reflectivity, including data-driven estimation of the
near-range attenuation curve from semantically labeled scans, spherical
range-view projection, cross-sensor intensity mapping, and a synthetic
forward-model generator for end-to-end verification.
"""

from .calibration import (
    ClassReflectivity,
    ClassStats,
    EtaParams,
    EtaTable,
    calibrate_scan,
    class_centroids,
    class_gaussians,
    estimate_eta,
    eta_at,
    far_range_samples,
    fit_eta_params,
    gaussian_nll,
)
from .core import (
    LabeledScan,
    NormalField,
    PipelineConfig,
    RawScan,
    ReflectivityScan,
    SensorModel,
    validate_scan,
)
from .crosssensor import CrossSensorMap, apply_cross_map, fit_cross_map
from .geometry import (
    RangeImage,
    angle_of_incidence,
    assemble_channels,
    compute_normals,
    spherical_project,
)
from .synth import Box, GroundTruth, Plane, SceneSpec, forward_intensity, generate_scene

__version__ = "0.1.0"

__all__ = [
    "Box",
    "ClassReflectivity",
    "ClassStats",
    "CrossSensorMap",
    "EtaParams",
    "EtaTable",
    "GroundTruth",
    "LabeledScan",
    "NormalField",
    "Plane",
    "PipelineConfig",
    "RangeImage",
    "RawScan",
    "ReflectivityScan",
    "SceneSpec",
    "SensorModel",
    "angle_of_incidence",
    "apply_cross_map",
    "assemble_channels",
    "calibrate_scan",
    "class_centroids",
    "class_gaussians",
    "compute_normals",
    "estimate_eta",
    "eta_at",
    "far_range_samples",
    "fit_cross_map",
    "fit_eta_params",
    "forward_intensity",
    "gaussian_nll",
    "generate_scene",
    "spherical_project",
    "validate_scan",
]
