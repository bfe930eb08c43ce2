"""Spherical range-view projection, surface normals, and incidence angles."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import NormalField, PipelineConfig, RawScan, SensorModel
from .errors import (
    DegeneratePoint,
    FileUnwritable,
    InvalidValue,
    MissingChannel,
)

CHANNEL_LAYOUTS = {
    "rxyzi": ("range", "x", "y", "z", "intensity"),
    "rxyzn": ("range", "x", "y", "z", "reflectivity"),
    "rxyzirn": ("range", "x", "y", "z", "intensity", "reflectivity"),
}

# Neighbor rejection thresholds for grid normals: a difference vector is
# unusable when the range gap to the neighbor exceeds both bounds,
# which marks a depth discontinuity rather than a smooth surface.
_JUMP_ABS = 0.5
_JUMP_REL = 0.25
# A pixel is locally planar only if its opposite one-sided tangents are
# nearly collinear on both axes; a bend marks a crease between surfaces
# where any blended tangent would poison the normal.
_STRAIGHT_COS = np.cos(np.radians(5.0))


@dataclass(frozen=True)
class RangeImage:
    """Multi-channel spherical projection of a scan.

    data is rows x cols x len(channels); valid flags pixels that received
    a point; point_index maps each valid pixel back to its source point
    (-1 where empty). Invalid pixels hold 0 in every channel.
    """

    channels: tuple
    data: np.ndarray
    valid: np.ndarray
    point_index: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[2] != len(self.channels):
            raise InvalidValue(f"data shape {data.shape} does not match channels {self.channels}")
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "valid", np.asarray(self.valid, dtype=bool))
        object.__setattr__(self, "point_index", np.asarray(self.point_index, dtype=np.int64))
        if self.valid.shape != data.shape[:2] or self.point_index.shape != data.shape[:2]:
            raise InvalidValue("valid and point_index must match the image shape")

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def channel(self, name: str) -> np.ndarray:
        if name not in self.channels:
            raise MissingChannel(f"image has no channel {name!r} (has {self.channels})")
        return self.data[:, :, self.channels.index(name)]


def _project_indices(scan: RawScan, sensor: SensorModel):
    """Pixel coordinates for every point plus the in-fov mask."""
    r = scan.ranges()
    yaw = np.arctan2(scan.y, scan.x)
    with np.errstate(invalid="ignore"):
        pitch = np.arcsin(np.clip(scan.z / r, -1.0, 1.0))
    fov = sensor.fov_up - sensor.fov_down
    in_fov = (pitch >= sensor.fov_down) & (pitch <= sensor.fov_up)
    u = np.floor((0.5 - yaw / (2.0 * np.pi)) * sensor.cols).astype(np.int64) % sensor.cols
    v = np.floor((1.0 - (pitch - sensor.fov_down) / fov) * sensor.rows).astype(np.int64)
    v = np.clip(v, 0, sensor.rows - 1)
    return u, v, r, in_fov


def spherical_project(scan: RawScan, sensor: SensorModel, extra=None) -> RangeImage:
    """Project a validated scan into a spherical range image.

    Column from yaw (wrapping), row from pitch within [fov_down, fov_up];
    out-of-fov points are dropped. Pixel collisions keep the nearer
    point, ties broken by the lower point index. Channels are range, x,
    y, z, intensity, plus reflectivity when extra is given.
    """
    channels = ("range", "x", "y", "z", "intensity")
    extras = ()
    if extra is not None:
        extra = np.asarray(extra, dtype=np.float64)
        if len(extra) != scan.point_count:
            raise InvalidValue("extra channel length does not match point count")
        channels = channels + ("reflectivity",)
        extras = (extra,)

    u, v, r, in_fov = _project_indices(scan, sensor)
    rows, cols = sensor.rows, sensor.cols
    data = np.zeros((rows, cols, len(channels)))
    valid = np.zeros((rows, cols), dtype=bool)
    point_index = np.full((rows, cols), -1, dtype=np.int64)

    idx = np.flatnonzero(in_fov)
    if idx.size:
        # Write farthest first so the nearest point lands last; among
        # equal ranges the lowest index must win, so it is written last.
        order = np.lexsort((-idx, -r[idx]))
        sel = idx[order]
        uu, vv = u[sel], v[sel]
        stack = [r, scan.x, scan.y, scan.z, scan.intensity, *extras]
        for c, values in enumerate(stack):
            data[vv, uu, c] = values[sel]
        valid[vv, uu] = True
        point_index[vv, uu] = sel
    return RangeImage(channels, data, valid, point_index)


def assemble_channels(image: RangeImage, layout: str) -> np.ndarray:
    """Stack image channels in the order a named layout demands.

    rxyzi and rxyzn yield 5 channels, rxyzirn yields 6. Raises
    MissingChannel when the image lacks a demanded channel.
    """
    if layout not in CHANNEL_LAYOUTS:
        raise InvalidValue(f"unknown layout {layout!r}; choose from {sorted(CHANNEL_LAYOUTS)}")
    names = CHANNEL_LAYOUTS[layout]
    for name in names:
        if name not in image.channels:
            raise MissingChannel(f"layout {layout!r} needs channel {name!r} which the image lacks")
    sel = [image.channels.index(name) for name in names]
    return image.data[:, :, sel].copy()


def angle_of_incidence(point, normal, origin=(0.0, 0.0, 0.0)) -> float:
    """Cosine of the angle between a surface normal and the beam toward the sensor.

    Returns |normal . normalize(origin - point)| clamped to [0, 1].
    """
    point = np.asarray(point, dtype=np.float64)
    normal = np.asarray(normal, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    to_sensor = origin - point
    norm = np.linalg.norm(to_sensor)
    if norm == 0.0:
        raise DegeneratePoint("point coincides with the sensor origin")
    return float(np.clip(abs(np.dot(normal, to_sensor / norm)), 0.0, 1.0))


def _shift(arr, axis, step, wrap):
    """Neighbor view of an image array; wrapped or zero-padded at the border."""
    if wrap:
        return np.roll(arr, -step, axis=axis)
    out = np.zeros_like(arr)
    src = [slice(None)] * arr.ndim
    dst = [slice(None)] * arr.ndim
    if step > 0:
        src[axis] = slice(step, None)
        dst[axis] = slice(None, -step)
    else:
        src[axis] = slice(None, step)
        dst[axis] = slice(-step, None)
    out[tuple(dst)] = arr[tuple(src)]
    return out


def _grid_difference(points, ranges, valid, axis, wrap):
    """Surface tangent along one image axis plus a usability mask.

    Both one-sided difference vectors point along +axis; the returned
    tangent is the flatter usable side. A side is usable when its
    neighbor exists and the range gap stays under the discontinuity
    limit; a pixel whose two usable sides bend against each other sits
    on a crease and is marked unusable outright.
    """
    fwd_pts = _shift(points, axis, 1, wrap)
    bwd_pts = _shift(points, axis, -1, wrap)
    fwd_rng = _shift(ranges, axis, 1, wrap)
    bwd_rng = _shift(ranges, axis, -1, wrap)
    fwd_ok = _shift(valid, axis, 1, wrap)
    bwd_ok = _shift(valid, axis, -1, wrap)

    limit = np.maximum(_JUMP_ABS, _JUMP_REL * ranges)
    fwd_gap = np.abs(fwd_rng - ranges)
    bwd_gap = np.abs(ranges - bwd_rng)
    fwd_use = valid & fwd_ok & (fwd_gap <= limit)
    bwd_use = valid & bwd_ok & (bwd_gap <= limit)

    fwd_diff = fwd_pts - points
    bwd_diff = points - bwd_pts
    prefer_bwd = bwd_use & (~fwd_use | (bwd_gap < fwd_gap))
    primary = np.where(prefer_bwd[..., None], bwd_diff, fwd_diff)
    usable = fwd_use | bwd_use

    # Where both sides are usable they must be nearly collinear.
    both = fwd_use & bwd_use
    fu, fn = _unit(fwd_diff)
    bu, bn = _unit(bwd_diff)
    bend_cos = np.einsum("...i,...i->...", fu, bu)
    straight = ~both | ((fn > 0) & (bn > 0) & (bend_cos >= _STRAIGHT_COS))
    return primary, usable & straight


def _unit(vectors):
    norm = np.linalg.norm(vectors, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = vectors / norm[..., None]
    return unit, norm


def _image_grid_normals(scan: RawScan, sensor: SensorModel) -> NormalField:
    image = spherical_project(scan, sensor)
    pts = np.stack([image.channel("x"), image.channel("y"), image.channel("z")], axis=-1)
    rng = image.channel("range")
    iv = image.valid

    dv_p, dv_s, ok_v, both_v = _grid_difference(pts, rng, iv, axis=0, wrap=False)
    du_p, du_s, ok_u, both_u = _grid_difference(pts, rng, iv, axis=1, wrap=True)

    normal_px, norm = _unit(np.cross(du_p, dv_p))
    ok = iv & ok_v & ok_u & (norm > 1e-12)

    # Planarity check: where an opposite-side tangent exists, the normal
    # it implies must agree with the primary one, which rejects pixels
    # straddling a crease between two surfaces at similar range.
    alt, alt_norm = _unit(np.cross(du_s, dv_s))
    has_alt = (both_u | both_v) & (alt_norm > 1e-12)
    agree = np.abs(np.einsum("...i,...i->...", normal_px, alt)) >= _PLANARITY_COS
    ok &= ~has_alt | agree

    n = scan.point_count
    normals = np.zeros((n, 3))
    valid = np.zeros(n, dtype=bool)
    pix = image.point_index[ok]
    normals[pix] = normal_px[ok]
    valid[pix] = True
    return _finalize_normals(scan, sensor, normals, valid)


def _knn_pca_normals(scan: RawScan, sensor: SensorModel, k: int) -> NormalField:
    from scipy.spatial import cKDTree

    n = scan.point_count
    normals = np.zeros((n, 3))
    valid = np.zeros(n, dtype=bool)
    if n >= 3:
        pts = scan.xyz()
        k_eff = min(k, n)
        tree = cKDTree(pts)
        _, idx = tree.query(pts, k=k_eff)
        neighbors = pts[idx]
        centered = neighbors - neighbors.mean(axis=1, keepdims=True)
        cov = np.einsum("nki,nkj->nij", centered, centered) / k_eff
        _, eigvecs = np.linalg.eigh(cov)
        normals = eigvecs[:, :, 0]
        norms = np.linalg.norm(normals, axis=1)
        valid = np.isfinite(norms) & (norms > 1e-12)
        with np.errstate(invalid="ignore", divide="ignore"):
            normals = normals / norms[:, None]
        normals[~valid] = 0.0
    return _finalize_normals(scan, sensor, normals, valid)


def _finalize_normals(scan, sensor, normals, valid) -> NormalField:
    """Orient normals toward the sensor and compute cos(incidence)."""
    to_sensor = sensor.origin[None, :] - scan.xyz()
    dist = np.linalg.norm(to_sensor, axis=1)
    ok = dist > 0
    valid = valid & ok
    beam = np.zeros_like(to_sensor)
    beam[ok] = to_sensor[ok] / dist[ok, None]
    dots = np.einsum("ij,ij->i", normals, beam)
    flip = valid & (dots < 0)
    normals[flip] = -normals[flip]
    dots[flip] = -dots[flip]
    cos = np.clip(dots, 0.0, 1.0)
    normals[~valid] = 0.0
    cos[~valid] = 0.0
    return NormalField(normals, cos, valid)


def compute_normals(scan: RawScan, sensor: SensorModel, config: PipelineConfig) -> NormalField:
    """Estimate per-point surface normals and the beam incidence cosine.

    image_grid projects to a range image and crosses tangent vectors
    between neighboring pixels (fast, the online default); knn_pca takes
    the smallest covariance eigenvector over each point's k nearest
    neighbors (slower, offline quality). Normals face the sensor; points
    without enough usable neighbors are invalid.
    """
    if config.normal_method == "image_grid":
        return _image_grid_normals(scan, sensor)
    return _knn_pca_normals(scan, sensor, config.knn_k)


# --- export -----------------------------------------------------------------


def channel_scales(image: RangeImage, tensor: np.ndarray, names) -> list[tuple[str, float, float]]:
    """Per-channel (name, min, max) over valid pixels, used for PNG scaling."""
    scales = []
    for c, name in enumerate(names):
        plane = tensor[:, :, c]
        if image.valid.any():
            lo = float(plane[image.valid].min())
            hi = float(plane[image.valid].max())
        else:
            lo = hi = 0.0
        scales.append((name, lo, hi))
    return scales


def export_channel_pngs(image: RangeImage, tensor: np.ndarray, names, out_dir, stem: str):
    """Write one 16-bit grayscale PNG per channel, min-max scaled over valid pixels.

    Returns the per-channel scales recorded in the sidecar; invalid
    pixels render as 0.
    """
    from PIL import Image

    out_dir = Path(out_dir)
    scales = channel_scales(image, tensor, names)
    for c, (name, lo, hi) in enumerate(scales):
        plane = tensor[:, :, c]
        span = hi - lo
        if span > 0:
            scaled = (plane - lo) / span * 65535.0
        else:
            scaled = np.zeros_like(plane)
        scaled = np.where(image.valid, scaled, 0.0)
        img = Image.fromarray(np.round(scaled).astype(np.uint16), mode="I;16")
        try:
            img.save(out_dir / f"{stem}_{name}.png")
        except OSError as exc:
            raise FileUnwritable(f"cannot write PNG for channel {name}: {exc}") from exc
    return scales


def write_tensor(tensor: np.ndarray, scales, path) -> None:
    """Write a rows x cols x C tensor as flat little-endian float32 plus a text sidecar."""
    path = Path(path)
    rows, cols, nchan = tensor.shape
    try:
        tensor.astype("<f4").tofile(path)
    except OSError as exc:
        raise FileUnwritable(f"cannot write {path}: {exc}") from exc
    lines = [
        f"rows: {rows}",
        f"cols: {cols}",
        f"channels: {nchan}",
        "channel_names: " + ",".join(name for name, _, _ in scales),
        "dtype: float32",
        "byte_order: little",
    ]
    for name, lo, hi in scales:
        lines.append(f"scale_{name}: {lo!r} {hi!r}")
    sidecar = path.with_suffix(".meta")
    try:
        sidecar.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise FileUnwritable(f"cannot write {sidecar}: {exc}") from exc


def read_tensor(path) -> tuple[np.ndarray, list[str]]:
    """Read a tensor written by write_tensor; returns (array, channel names)."""
    path = Path(path)
    meta = {}
    for line in path.with_suffix(".meta").read_text().splitlines():
        if ":" in line:
            key, value = line.split(":", 1)
            meta[key.strip()] = value.strip()
    rows, cols, nchan = int(meta["rows"]), int(meta["cols"]), int(meta["channels"])
    names = meta["channel_names"].split(",")
    data = np.fromfile(path, dtype="<f4").reshape(rows, cols, nchan)
    return data, names
