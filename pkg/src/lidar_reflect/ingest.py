"""File formats: binary scans and labels, YAML configs, tabular text stats.

Scan files are consecutive little-endian float32 quadruplets
(x, y, z, intensity), 16 bytes per point. Label files are little-endian
uint32 per point with the class id in the low 16 bits (the high 16 bits
carry an instance id and are discarded). Eta tables and class statistics
are delimited text with a header row; floats are written with repr so a
round-trip is exact.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import yaml

from .calibration import ClassReflectivity, ClassStats, EtaTable
from .core import PipelineConfig, RawScan, ReflectivityScan, SensorModel
from .errors import (
    FileUnreadable,
    FileUnwritable,
    InvalidValue,
    MalformedLabels,
    MalformedScan,
    MalformedTable,
    MissingField,
)

POINT_RECORD_BYTES = 16
LABEL_RECORD_BYTES = 4


def _read_bytes(path) -> bytes:
    path = Path(path)
    try:
        return path.read_bytes()
    except OSError as exc:
        raise FileUnreadable(f"cannot read {path}: {exc}") from exc


def read_scan(path) -> RawScan:
    """Parse a .bin scan file into a RawScan (float32 storage, float64 in memory)."""
    raw = _read_bytes(path)
    if len(raw) % POINT_RECORD_BYTES != 0:
        raise MalformedScan(
            f"{path}: size {len(raw)} is not a multiple of {POINT_RECORD_BYTES} bytes"
        )
    data = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    return RawScan(data[:, 0], data[:, 1], data[:, 2], data[:, 3])


def write_scan(scan, path) -> None:
    """Write a RawScan or ReflectivityScan as little-endian float32 quadruplets.

    For a ReflectivityScan the intensity slot carries the calibrated
    reflectivity; geometry is written unchanged.
    """
    if isinstance(scan, ReflectivityScan):
        fourth = scan.reflectivity
        base = scan.scan
    else:
        fourth = scan.intensity
        base = scan
    data = np.column_stack([base.x, base.y, base.z, fourth]).astype("<f4")
    try:
        data.tofile(path)
    except OSError as exc:
        raise FileUnwritable(f"cannot write {path}: {exc}") from exc


def read_labels(path) -> np.ndarray:
    """Parse a .label file into per-point class ids (low 16 bits of each uint32)."""
    raw = _read_bytes(path)
    if len(raw) % LABEL_RECORD_BYTES != 0:
        raise MalformedLabels(
            f"{path}: size {len(raw)} is not a multiple of {LABEL_RECORD_BYTES} bytes"
        )
    packed = np.frombuffer(raw, dtype="<u4")
    return (packed & 0xFFFF).astype(np.int64)


def write_labels(labels, path) -> None:
    """Write class ids as little-endian uint32 records (instance id zero)."""
    arr = np.asarray(labels, dtype=np.int64)
    try:
        (arr.astype("<u4") & np.uint32(0xFFFF)).astype("<u4").tofile(path)
    except OSError as exc:
        raise FileUnwritable(f"cannot write {path}: {exc}") from exc


# --- YAML configuration -----------------------------------------------------

_SENSOR_REQUIRED = ("name", "rows", "cols", "fov_up", "fov_down", "max_range", "intensity_max")


def _load_yaml(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FileUnreadable(f"cannot read {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise InvalidValue(f"{path}: not valid YAML: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise InvalidValue(f"{path}: top level must be a mapping")
    return data


def sensor_from_mapping(data: dict, context: str = "sensor config") -> SensorModel:
    """Build a SensorModel from a parsed mapping, checking required fields."""
    for key in _SENSOR_REQUIRED:
        if key not in data:
            raise MissingField(f"{context}: missing field {key!r}")
    try:
        return SensorModel(
            name=str(data["name"]),
            rows=int(data["rows"]),
            cols=int(data["cols"]),
            fov_up=float(data["fov_up"]),
            fov_down=float(data["fov_down"]),
            max_range=float(data["max_range"]),
            intensity_max=float(data["intensity_max"]),
            origin=np.asarray(data.get("origin", (0.0, 0.0, 0.0)), dtype=np.float64),
        )
    except (TypeError, ValueError) as exc:
        raise InvalidValue(f"{context}: {exc}") from exc


def read_sensor_config(path) -> SensorModel:
    """Read a sensor description from a YAML file."""
    return sensor_from_mapping(_load_yaml(path), context=str(path))


_PIPELINE_FIELDS = (
    "near_range_threshold",
    "cos_floor",
    "eta_bin_width",
    "min_bin_samples",
    "normal_method",
    "knn_k",
    "reflectivity_percentile",
)


def pipeline_from_mapping(data: dict, context: str = "pipeline config") -> PipelineConfig:
    """Build a PipelineConfig from a parsed mapping, applying defaults for omitted fields."""
    unknown = set(data) - set(_PIPELINE_FIELDS)
    if unknown:
        raise InvalidValue(f"{context}: unknown fields {sorted(unknown)}")
    kwargs = {}
    for key in _PIPELINE_FIELDS:
        if key in data:
            kwargs[key] = data[key]
    try:
        if "min_bin_samples" in kwargs:
            kwargs["min_bin_samples"] = int(kwargs["min_bin_samples"])
        if "knn_k" in kwargs:
            kwargs["knn_k"] = int(kwargs["knn_k"])
        for key in ("near_range_threshold", "cos_floor", "eta_bin_width", "reflectivity_percentile"):
            if key in kwargs:
                kwargs[key] = float(kwargs[key])
        return PipelineConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise InvalidValue(f"{context}: {exc}") from exc


def read_pipeline_config(path) -> PipelineConfig:
    """Read pipeline parameters from a YAML file; omitted fields take defaults."""
    return pipeline_from_mapping(_load_yaml(path), context=str(path))


# --- eta table --------------------------------------------------------------

ETA_TABLE_HEADER = "bin_center_m,eta,sample_count"


def write_eta_table(table: EtaTable, path) -> None:
    """Persist an EtaTable as delimited text, one row per bin."""
    lines = [f"# near_range_threshold_m={table.near_range_threshold!r}", ETA_TABLE_HEADER]
    for center, eta, count in zip(table.bin_centers, table.eta, table.sample_counts):
        lines.append(f"{float(center)!r},{float(eta)!r},{int(count)}")
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise FileUnwritable(f"cannot write {path}: {exc}") from exc


def read_eta_table(path) -> EtaTable:
    """Read an EtaTable written by write_eta_table."""
    text = _read_bytes(path).decode("utf-8", errors="replace")
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    threshold = None
    rows = []
    header_seen = False
    for ln in lines:
        if ln.startswith("#"):
            body = ln.lstrip("#").strip()
            if body.startswith("near_range_threshold_m="):
                try:
                    threshold = float(body.split("=", 1)[1])
                except ValueError as exc:
                    raise MalformedTable(f"{path}: bad threshold line {ln!r}") from exc
            continue
        if not header_seen:
            if ln != ETA_TABLE_HEADER:
                raise MalformedTable(f"{path}: expected header {ETA_TABLE_HEADER!r}, got {ln!r}")
            header_seen = True
            continue
        parts = ln.split(",")
        if len(parts) != 3:
            raise MalformedTable(f"{path}: expected 3 columns, got {ln!r}")
        try:
            rows.append((float(parts[0]), float(parts[1]), int(parts[2])))
        except ValueError as exc:
            raise MalformedTable(f"{path}: non-numeric cell in {ln!r}") from exc
    if not header_seen:
        raise MalformedTable(f"{path}: missing header row")
    if threshold is None:
        raise MalformedTable(f"{path}: missing near_range_threshold_m line")
    centers = np.array([r[0] for r in rows])
    eta = np.array([r[1] for r in rows])
    counts = np.array([r[2] for r in rows], dtype=np.int64)
    return EtaTable(centers, eta, counts, threshold)


# --- class statistics -------------------------------------------------------

CLASS_STATS_HEADER = "class_id,count,centroid,mean,variance"


def write_class_stats(stats: ClassReflectivity, path) -> None:
    """Persist per-class reflectivity statistics as delimited text."""
    lines = [CLASS_STATS_HEADER]
    for class_id in sorted(stats.classes()):
        s = stats.get(class_id)
        lines.append(f"{class_id},{s.count},{s.centroid!r},{s.mean!r},{s.variance!r}")
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise FileUnwritable(f"cannot write {path}: {exc}") from exc


def read_class_stats(path) -> ClassReflectivity:
    """Read class statistics written by write_class_stats."""
    text = _read_bytes(path).decode("utf-8", errors="replace")
    lines = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines or lines[0] != CLASS_STATS_HEADER:
        raise MalformedTable(f"{path}: expected header {CLASS_STATS_HEADER!r}")
    entries = {}
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 5:
            raise MalformedTable(f"{path}: expected 5 columns, got {ln!r}")
        try:
            class_id = int(parts[0])
            entries[class_id] = ClassStats(
                class_id=class_id,
                count=int(parts[1]),
                centroid=float(parts[2]),
                mean=float(parts[3]),
                variance=float(parts[4]),
            )
        except ValueError as exc:
            raise MalformedTable(f"{path}: non-numeric cell in {ln!r}") from exc
    return ClassReflectivity(entries)


def list_scan_files(directory) -> list[Path]:
    """Sorted .bin files directly inside a directory."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileUnreadable(f"not a directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix == ".bin" and p.is_file())


def matching_label_file(scan_path, labels_dir) -> Path:
    """Label file with the same stem as a scan file."""
    candidate = Path(labels_dir) / (Path(scan_path).stem + ".label")
    if not candidate.is_file():
        raise FileUnreadable(f"no label file for {scan_path}: expected {candidate}")
    return candidate
