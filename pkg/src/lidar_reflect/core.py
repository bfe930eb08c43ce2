"""Shared domain types and scan validation.

All types are immutable after construction and safe to share read-only
across workers. Point coordinates are held as float64 in memory; the
on-disk interchange format is float32 (see lidar_reflect.ingest).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidValue, LengthMismatch

NORMAL_METHODS = ("image_grid", "knn_pca")


def _as_float_array(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidValue(f"{name} must be a 1-D array, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class SensorModel:
    """Spinning LiDAR geometry needed for spherical projection.

    Angles are radians; fov_down is negative below the horizon.
    intensity_max is the raw-unit full scale of the sensor (e.g. 65535
    for a 16-bit sensor) and is carried as context, not applied.
    """

    name: str
    rows: int
    cols: int
    fov_up: float
    fov_down: float
    max_range: float
    intensity_max: float
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))
        if self.rows < 2:
            raise InvalidValue(f"rows must be >= 2, got {self.rows}")
        if self.cols < 4:
            raise InvalidValue(f"cols must be >= 4, got {self.cols}")
        if not self.fov_up > self.fov_down:
            raise InvalidValue(f"fov_up ({self.fov_up}) must exceed fov_down ({self.fov_down})")
        if not self.max_range > 0:
            raise InvalidValue(f"max_range must be > 0, got {self.max_range}")
        if not self.intensity_max > 0:
            raise InvalidValue(f"intensity_max must be > 0, got {self.intensity_max}")


@dataclass(frozen=True)
class PipelineConfig:
    """Tunable parameters of the calibration pipeline.

    near_range_threshold is the range beyond which the near-range
    attenuation factor is taken to be 1. cos_floor guards the divide by
    cos(incidence) near grazing angles, both when selecting samples and
    when calibrating. reflectivity_percentile is carried for downstream
    consumers that normalize calibrated outputs; no operation here
    applies it.
    """

    near_range_threshold: float = 12.0
    cos_floor: float = 0.1
    eta_bin_width: float = 0.25
    min_bin_samples: int = 100
    normal_method: str = "image_grid"
    knn_k: int = 16
    reflectivity_percentile: float = 0.99

    def __post_init__(self):
        if not self.near_range_threshold > 0:
            raise InvalidValue(f"near_range_threshold must be > 0, got {self.near_range_threshold}")
        if not 0 < self.cos_floor < 1:
            raise InvalidValue(f"cos_floor must be in (0, 1), got {self.cos_floor}")
        if not self.eta_bin_width > 0:
            raise InvalidValue(f"eta_bin_width must be > 0, got {self.eta_bin_width}")
        if self.min_bin_samples < 1:
            raise InvalidValue(f"min_bin_samples must be >= 1, got {self.min_bin_samples}")
        if self.normal_method not in NORMAL_METHODS:
            raise InvalidValue(f"normal_method must be one of {NORMAL_METHODS}, got {self.normal_method!r}")
        if self.knn_k < 3:
            raise InvalidValue(f"knn_k must be >= 3, got {self.knn_k}")
        if not 0 < self.reflectivity_percentile <= 1:
            raise InvalidValue(
                f"reflectivity_percentile must be in (0, 1], got {self.reflectivity_percentile}"
            )


@dataclass(frozen=True)
class RawScan:
    """One LiDAR revolution: per-point positions (meters) and raw intensity."""

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    intensity: np.ndarray

    def __post_init__(self):
        for name in ("x", "y", "z", "intensity"):
            object.__setattr__(self, name, _as_float_array(getattr(self, name), name))
        n = len(self.x)
        if not (len(self.y) == len(self.z) == len(self.intensity) == n):
            raise LengthMismatch(
                f"point arrays disagree: x={len(self.x)} y={len(self.y)} "
                f"z={len(self.z)} intensity={len(self.intensity)}"
            )

    @property
    def point_count(self) -> int:
        return len(self.x)

    def ranges(self) -> np.ndarray:
        """Euclidean range of every point. Range is always derived, never stored."""
        return np.sqrt(self.x * self.x + self.y * self.y + self.z * self.z)

    def xyz(self) -> np.ndarray:
        """Points stacked as an (N, 3) array."""
        return np.column_stack([self.x, self.y, self.z])

    def take(self, mask_or_index) -> "RawScan":
        """Sub-scan with the selected points, preserving order."""
        return RawScan(
            self.x[mask_or_index],
            self.y[mask_or_index],
            self.z[mask_or_index],
            self.intensity[mask_or_index],
        )


# Class id 0 is reserved for unlabeled/ignore in every statistic.
IGNORE_CLASS = 0


@dataclass(frozen=True)
class LabeledScan:
    """A scan with a per-point semantic class id (0 = unlabeled/ignore)."""

    scan: RawScan
    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 1:
            raise InvalidValue(f"labels must be 1-D, got shape {labels.shape}")
        object.__setattr__(self, "labels", labels.astype(np.int64, copy=False))
        if len(self.labels) != self.scan.point_count:
            raise LengthMismatch(
                f"labels ({len(self.labels)}) do not match point count ({self.scan.point_count})"
            )
        if self.labels.size and self.labels.min() < 0:
            raise InvalidValue("class identifiers must be non-negative")

    @property
    def point_count(self) -> int:
        return self.scan.point_count

    def take(self, mask_or_index) -> "LabeledScan":
        return LabeledScan(self.scan.take(mask_or_index), self.labels[mask_or_index])


@dataclass(frozen=True)
class ReflectivityScan:
    """A scan whose points carry calibrated reflectivity.

    valid marks points where calibration succeeded; invalid points hold
    reflectivity 0.
    """

    scan: RawScan
    reflectivity: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "reflectivity", _as_float_array(self.reflectivity, "reflectivity"))
        object.__setattr__(self, "valid", np.asarray(self.valid, dtype=bool).reshape(-1))
        n = self.scan.point_count
        if len(self.reflectivity) != n or len(self.valid) != n:
            raise LengthMismatch(
                f"reflectivity ({len(self.reflectivity)}) / valid ({len(self.valid)}) "
                f"do not match point count ({n})"
            )
        if not np.all(np.isfinite(self.reflectivity[self.valid])):
            raise InvalidValue("reflectivity must be finite wherever valid")

    @property
    def point_count(self) -> int:
        return self.scan.point_count


@dataclass(frozen=True)
class NormalField:
    """Per-point surface normals and cosine of the beam incidence angle.

    Normals are unit length and oriented toward the sensor wherever
    valid; cos_incidence lies in [0, 1]. Points where estimation failed
    are marked invalid.
    """

    normals: np.ndarray
    cos_incidence: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        normals = np.asarray(self.normals, dtype=np.float64)
        if normals.ndim != 2 or normals.shape[1] != 3:
            raise InvalidValue(f"normals must be (N, 3), got {normals.shape}")
        object.__setattr__(self, "normals", normals)
        object.__setattr__(self, "cos_incidence", _as_float_array(self.cos_incidence, "cos_incidence"))
        object.__setattr__(self, "valid", np.asarray(self.valid, dtype=bool).reshape(-1))
        n = len(normals)
        if len(self.cos_incidence) != n or len(self.valid) != n:
            raise LengthMismatch("normals, cos_incidence and valid must have equal length")
        if self.valid.any():
            norms = np.linalg.norm(normals[self.valid], axis=1)
            if not np.allclose(norms, 1.0, atol=1e-6):
                raise InvalidValue("normals must be unit length wherever valid")
            cos = self.cos_incidence[self.valid]
            if cos.min() < 0 or cos.max() > 1:
                raise InvalidValue("cos_incidence must lie in [0, 1] wherever valid")


def valid_point_mask(scan: RawScan, sensor: SensorModel) -> np.ndarray:
    """Boolean mask of points that survive validation.

    A point is kept when all three coordinates are finite, its range is
    strictly positive, and its range does not exceed the sensor's
    max_range.
    """
    finite = np.isfinite(scan.x) & np.isfinite(scan.y) & np.isfinite(scan.z)
    r = np.zeros(scan.point_count)
    with np.errstate(invalid="ignore"):
        r[finite] = np.sqrt(
            scan.x[finite] ** 2 + scan.y[finite] ** 2 + scan.z[finite] ** 2
        )
    return finite & (r > 0.0) & (r <= sensor.max_range)


def validate_scan(scan: RawScan, sensor: SensorModel) -> RawScan:
    """Drop points with non-finite coordinates, zero range, or range beyond max_range.

    Surviving points keep their relative order and exact values. An
    empty result is legal. Idempotent.
    """
    mask = valid_point_mask(scan, sensor)
    if mask.all():
        return scan
    return scan.take(mask)
