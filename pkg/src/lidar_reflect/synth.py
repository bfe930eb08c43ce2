"""Synthetic scene generator with exact ground truth.

Casts one ray per range-image pixel against analytic primitives (infinite
planes and axis-aligned boxes), evaluates the forward intensity model at
each hit, and records the true reflectance, incidence cosine, near-range
factor, and range per point. Noiseless output inverts exactly through
the calibration path, which makes the generator the end-to-end oracle
for the whole pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .calibration import EtaParams, eta_at
from .core import LabeledScan, NormalField, RawScan, SensorModel
from .errors import (
    EmptyScene,
    FileUnreadable,
    FileUnwritable,
    InvalidValue,
    MalformedScan,
    MissingField,
    NonPositiveRange,
)
from .ingest import sensor_from_mapping

_T_EPS = 1e-9


@dataclass(frozen=True)
class Plane:
    """Infinite plane through a point with a unit normal."""

    point: np.ndarray
    normal: np.ndarray
    material: int

    def __post_init__(self):
        object.__setattr__(self, "point", np.asarray(self.point, dtype=np.float64).reshape(3))
        normal = np.asarray(self.normal, dtype=np.float64).reshape(3)
        norm = np.linalg.norm(normal)
        if norm == 0:
            raise InvalidValue("plane normal must be nonzero")
        object.__setattr__(self, "normal", normal / norm)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box between two corners."""

    lo: np.ndarray
    hi: np.ndarray
    material: int

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        if not np.all(hi > lo):
            raise InvalidValue("box hi corner must exceed lo corner on every axis")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)


@dataclass(frozen=True)
class SceneSpec:
    """Everything needed to generate one deterministic synthetic scan."""

    materials: dict
    surfaces: tuple
    emission_power: float
    eta_params: EtaParams
    sensor: SensorModel
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "materials", dict(self.materials))
        object.__setattr__(self, "surfaces", tuple(self.surfaces))
        if not self.surfaces:
            raise InvalidValue("scene needs at least one surface")
        for class_id, rho in self.materials.items():
            if class_id < 1:
                raise InvalidValue(f"material class ids must be >= 1, got {class_id}")
            if not 0 < rho <= 1:
                raise InvalidValue(f"material {class_id}: rho must be in (0, 1], got {rho}")
        for surface in self.surfaces:
            if surface.material not in self.materials:
                raise InvalidValue(f"surface references unknown material {surface.material}")
        if not 0 <= self.noise_sigma < 0.5:
            raise InvalidValue(f"noise_sigma must be in [0, 0.5), got {self.noise_sigma}")
        if not self.emission_power > 0:
            raise InvalidValue("emission_power must be positive")


@dataclass(frozen=True)
class GroundTruth:
    """Per-point truth recorded at generation time."""

    true_rho: np.ndarray
    true_cos_incidence: np.ndarray
    true_eta: np.ndarray
    true_range: np.ndarray

    def __post_init__(self):
        for name in ("true_rho", "true_cos_incidence", "true_eta", "true_range"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n = len(self.true_rho)
        if not all(
            len(getattr(self, name)) == n
            for name in ("true_cos_incidence", "true_eta", "true_range")
        ):
            raise InvalidValue("ground truth arrays must have equal length")

    def __len__(self) -> int:
        return len(self.true_rho)


def forward_intensity(rho, r, cos_alpha, eta_params: EtaParams, emission, noise_sigma=0.0, rng=None):
    """Forward intensity model: eta(R) * emission * rho * cos(alpha) / R^2.

    With noise_sigma > 0 the value is scaled by (1 + e) where e is
    zero-mean Gaussian with the given relative sigma, clipped at three
    sigma; deterministic for a seeded rng.
    """
    r_arr = np.asarray(r, dtype=np.float64)
    if np.any(r_arr <= 0):
        raise NonPositiveRange("range must be strictly positive")
    base = eta_at(eta_params, r_arr) * emission * np.asarray(rho) * np.asarray(cos_alpha) / r_arr**2
    if noise_sigma > 0:
        if rng is None:
            rng = np.random.default_rng(0)
        jitter = rng.normal(0.0, noise_sigma, size=np.shape(base))
        jitter = np.clip(jitter, -3.0 * noise_sigma, 3.0 * noise_sigma)
        base = base * (1.0 + jitter)
    if np.isscalar(r) and np.ndim(base) == 0:
        return float(base)
    return base


def _ray_directions(sensor: SensorModel) -> np.ndarray:
    """Unit direction per (row, col) pixel center, row-major."""
    u = np.arange(sensor.cols)
    v = np.arange(sensor.rows)
    yaw = (0.5 - (u + 0.5) / sensor.cols) * 2.0 * np.pi
    fov = sensor.fov_up - sensor.fov_down
    pitch = sensor.fov_up - (v + 0.5) / sensor.rows * fov
    yaw_grid = np.broadcast_to(yaw[None, :], (sensor.rows, sensor.cols))
    pitch_grid = np.broadcast_to(pitch[:, None], (sensor.rows, sensor.cols))
    cos_p = np.cos(pitch_grid)
    dirs = np.stack(
        [cos_p * np.cos(yaw_grid), cos_p * np.sin(yaw_grid), np.sin(pitch_grid)], axis=-1
    )
    return dirs.reshape(-1, 3)


def _intersect_plane(plane: Plane, origin, dirs):
    denom = dirs @ plane.normal
    numer = float(plane.normal @ (plane.point - origin))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = numer / denom
    t = np.where((np.abs(denom) > 1e-12) & (t > _T_EPS), t, np.inf)
    normals = np.broadcast_to(plane.normal, dirs.shape)
    return t, normals


def _intersect_box(box: Box, origin, dirs):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (box.lo - origin) * inv
        t2 = (box.hi - origin) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    t_near = np.max(tmin, axis=1)
    t_far = np.min(tmax, axis=1)
    hit = (t_near <= t_far) & (t_near > _T_EPS)
    t = np.where(hit, t_near, np.inf)
    entry_axis = np.argmax(tmin, axis=1)
    normals = np.zeros_like(dirs)
    rows = np.arange(len(dirs))
    normals[rows, entry_axis] = -np.sign(dirs[rows, entry_axis])
    return t, normals


def generate_scene(spec: SceneSpec) -> tuple[LabeledScan, GroundTruth]:
    """Cast one ray per sensor pixel and build a labeled scan with ground truth.

    Rays keep the nearest surface hit within max_range; misses produce no
    point. Output order is row-major over the ray grid, so regeneration
    with the same spec is bitwise identical.
    """
    sensor = spec.sensor
    if np.linalg.norm(sensor.origin) != 0.0:
        raise InvalidValue("synthetic scenes require the sensor at the coordinate origin")
    origin = sensor.origin
    dirs = _ray_directions(sensor)
    n_rays = len(dirs)

    best_t = np.full(n_rays, np.inf)
    best_normal = np.zeros((n_rays, 3))
    best_material = np.full(n_rays, -1, dtype=np.int64)
    for surface in spec.surfaces:
        if isinstance(surface, Plane):
            t, normals = _intersect_plane(surface, origin, dirs)
        else:
            t, normals = _intersect_box(surface, origin, dirs)
        closer = t < best_t
        if closer.any():
            best_t = np.where(closer, t, best_t)
            best_normal[closer] = normals[closer]
            best_material[closer] = surface.material

    cos_alpha = np.abs(np.einsum("ij,ij->i", best_normal, dirs))
    hit = (best_t <= sensor.max_range) & np.isfinite(best_t) & (cos_alpha > 1e-9)
    if not hit.any():
        raise EmptyScene("no ray intersects any surface within max_range")

    t = best_t[hit]
    d = dirs[hit]
    points = origin + t[:, None] * d
    materials = best_material[hit]
    cos_alpha = cos_alpha[hit]
    rho = np.array([spec.materials[int(m)] for m in np.unique(materials)])
    rho_per_point = rho[np.searchsorted(np.unique(materials), materials)]

    rng = np.random.default_rng(spec.seed)
    intensity = forward_intensity(
        rho_per_point, t, cos_alpha, spec.eta_params, spec.emission_power,
        spec.noise_sigma, rng,
    )
    scan = RawScan(points[:, 0], points[:, 1], points[:, 2], intensity)
    labeled = LabeledScan(scan, materials)
    truth = GroundTruth(
        true_rho=rho_per_point,
        true_cos_incidence=cos_alpha,
        true_eta=eta_at(spec.eta_params, t),
        true_range=t,
    )
    return labeled, truth


def truth_normal_field(scan: RawScan, truth: GroundTruth, origin=(0.0, 0.0, 0.0)) -> NormalField:
    """NormalField consistent with ground-truth incidence cosines.

    Reconstructs a unit normal per point whose angle against the beam
    direction reproduces true_cos_incidence exactly, for calibrating
    against truth without running a normal estimator.
    """
    if len(truth) != scan.point_count:
        raise InvalidValue("ground truth length does not match scan")
    origin = np.asarray(origin, dtype=np.float64)
    to_sensor = origin[None, :] - scan.xyz()
    dist = np.linalg.norm(to_sensor, axis=1)
    if np.any(dist == 0):
        raise InvalidValue("a point coincides with the origin")
    beam = to_sensor / dist[:, None]
    helper = np.tile(np.array([0.0, 0.0, 1.0]), (len(beam), 1))
    parallel = np.abs(beam @ np.array([0.0, 0.0, 1.0])) > 0.999
    helper[parallel] = np.array([1.0, 0.0, 0.0])
    tangent = helper - beam * np.einsum("ij,ij->i", helper, beam)[:, None]
    tangent = tangent / np.linalg.norm(tangent, axis=1)[:, None]
    cos = np.clip(truth.true_cos_incidence, 0.0, 1.0)
    sin = np.sqrt(1.0 - cos**2)
    normals = cos[:, None] * beam + sin[:, None] * tangent
    return NormalField(normals, cos, np.ones(len(beam), dtype=bool))


# --- persistence ------------------------------------------------------------

GT_RECORD_BYTES = 16  # four little-endian float32 per point


def write_ground_truth(truth: GroundTruth, path) -> None:
    """Write ground truth as little-endian float32 quadruplets (rho, cos, eta, range)."""
    data = np.column_stack(
        [truth.true_rho, truth.true_cos_incidence, truth.true_eta, truth.true_range]
    ).astype("<f4")
    try:
        data.tofile(path)
    except OSError as exc:
        raise FileUnwritable(f"cannot write {path}: {exc}") from exc


def read_ground_truth(path) -> GroundTruth:
    """Read ground truth written by write_ground_truth."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FileUnreadable(f"cannot read {path}: {exc}") from exc
    if len(raw) % GT_RECORD_BYTES != 0:
        raise MalformedScan(f"{path}: size {len(raw)} is not a multiple of {GT_RECORD_BYTES}")
    data = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    return GroundTruth(data[:, 0], data[:, 1], data[:, 2], data[:, 3])


def read_scene_spec(path) -> SceneSpec:
    """Read a SceneSpec from a YAML file.

    Expected keys: materials (list of {class_id, rho}), surfaces (list of
    {type: plane|box, ...}), emission_power, eta ({r_d, d, D, S}), sensor
    (same keys as a sensor config), noise_sigma, seed.
    """
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise FileUnreadable(f"cannot read {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise InvalidValue(f"{path}: not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise InvalidValue(f"{path}: top level must be a mapping")
    for key in ("materials", "surfaces", "emission_power", "eta", "sensor"):
        if key not in data:
            raise MissingField(f"{path}: missing field {key!r}")

    materials = {}
    for entry in data["materials"]:
        if "class_id" not in entry or "rho" not in entry:
            raise MissingField(f"{path}: material entries need class_id and rho")
        materials[int(entry["class_id"])] = float(entry["rho"])

    surfaces = []
    for entry in data["surfaces"]:
        kind = entry.get("type")
        try:
            if kind == "plane":
                surfaces.append(
                    Plane(entry["point"], entry["normal"], int(entry["material"]))
                )
            elif kind == "box":
                surfaces.append(Box(entry["min"], entry["max"], int(entry["material"])))
            else:
                raise InvalidValue(f"{path}: unknown surface type {kind!r}")
        except KeyError as exc:
            raise MissingField(f"{path}: surface missing field {exc}") from exc

    eta_map = data["eta"]
    if "r_d" not in eta_map or "d" not in eta_map:
        raise MissingField(f"{path}: eta needs at least r_d and d")
    eta_params = EtaParams(
        r_d=float(eta_map["r_d"]),
        d=float(eta_map["d"]),
        D=float(eta_map.get("D", 1.0)),
        S=float(eta_map.get("S", 1.0)),
    )
    sensor = sensor_from_mapping(data["sensor"], context=f"{path}: sensor")
    return SceneSpec(
        materials=materials,
        surfaces=tuple(surfaces),
        emission_power=float(data["emission_power"]),
        eta_params=eta_params,
        sensor=sensor,
        noise_sigma=float(data.get("noise_sigma", 0.0)),
        seed=int(data.get("seed", 0)),
    )
