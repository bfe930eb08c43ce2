"""Reflectivity calibration: far-range sampling, near-range factor estimation,
parametric fitting, per-scan calibration, and per-class Gaussian statistics.

The measurement model is

    intensity = eta(range) * emission * rho * cos(incidence) / range**2

where eta(R) is the near-range attenuation caused by receiver defocusing,
rising from ~0 at the sensor to 1 beyond a threshold range. Calibration
inverts the model per point, leaving a value proportional to the surface
reflectance rho. The emission constant is unobservable, so calibrated
values are reported in raw-intensity-derived units and eta is anchored to
a far-range plateau of exactly 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import IGNORE_CLASS, LabeledScan, NormalField, PipelineConfig, RawScan, ReflectivityScan
from .errors import (
    FitDiverged,
    InsufficientData,
    InvalidValue,
    NonPositiveRange,
    NoSamples,
    UnknownClass,
)

# Smallest admissible eta value and variance floor for the NLL metric.
ETA_FLOOR = 1e-6
VARIANCE_FLOOR = 1e-6


@dataclass(frozen=True)
class EtaParams:
    """Parameters of the near-range model eta(R) = 1 - exp(-2 r_d^2 (R+d)^2 / (D^2 S^2)).

    r_d is the detector radius, d the offset between measured range and
    object distance, D the lens diameter and S the focal length. Only the
    lumped coefficient a = 2 r_d^2 / (D^2 S^2) and d are identifiable
    from curve data, so fits report D = S = 1.
    """

    r_d: float
    d: float
    D: float = 1.0
    S: float = 1.0

    def __post_init__(self):
        for name in ("r_d", "d", "D", "S"):
            if not getattr(self, name) > 0:
                raise InvalidValue(f"EtaParams.{name} must be strictly positive")

    @property
    def a(self) -> float:
        """Lumped exponent coefficient, 1/m^2."""
        return 2.0 * self.r_d**2 / (self.D**2 * self.S**2)

    @classmethod
    def from_lumped(cls, a: float, d: float) -> "EtaParams":
        """Build from the identifiable (a, d) pair with unit lens terms."""
        if not a > 0:
            raise InvalidValue(f"lumped coefficient a must be positive, got {a}")
        return cls(r_d=math.sqrt(a / 2.0), d=d, D=1.0, S=1.0)


@dataclass(frozen=True)
class EtaTable:
    """Nonparametric eta(R): per-bin values on strictly increasing bin centers.

    Bins at or beyond near_range_threshold hold exactly 1. Values may
    slightly exceed 1 (up to 1.05) only in intermediate tables; a
    normalized table is <= 1 everywhere.
    """

    bin_centers: np.ndarray
    eta: np.ndarray
    sample_counts: np.ndarray
    near_range_threshold: float

    def __post_init__(self):
        centers = np.asarray(self.bin_centers, dtype=np.float64)
        eta = np.asarray(self.eta, dtype=np.float64)
        counts = np.asarray(self.sample_counts, dtype=np.int64)
        object.__setattr__(self, "bin_centers", centers)
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "sample_counts", counts)
        if not (len(centers) == len(eta) == len(counts)):
            raise InvalidValue("bin_centers, eta and sample_counts must have equal length")
        if len(centers) > 1 and not np.all(np.diff(centers) > 0):
            raise InvalidValue("bin_centers must be strictly increasing")
        if not self.near_range_threshold > 0:
            raise InvalidValue("near_range_threshold must be positive")
        if len(eta):
            if eta.min() <= 0 or eta.max() > 1.05:
                raise InvalidValue("eta values must lie in (0, 1.05]")
            far = centers >= self.near_range_threshold
            if far.any() and not np.allclose(eta[far], 1.0, atol=1e-12):
                raise InvalidValue("bins at or beyond the threshold must hold eta = 1")

    def __len__(self) -> int:
        return len(self.bin_centers)


@dataclass(frozen=True)
class ClassStats:
    """Robust reflectivity statistics of one semantic class."""

    class_id: int
    count: int
    centroid: float
    mean: float
    variance: float

    def __post_init__(self):
        if self.count < 1:
            raise InvalidValue(f"class {self.class_id}: count must be >= 1")
        if self.variance < 0:
            raise InvalidValue(f"class {self.class_id}: variance must be >= 0")
        if not self.centroid > 0:
            raise InvalidValue(f"class {self.class_id}: centroid must be positive")


class ClassReflectivity:
    """Immutable map from class id to ClassStats."""

    def __init__(self, entries: dict[int, ClassStats]):
        self._entries = dict(entries)

    def classes(self) -> list[int]:
        return sorted(self._entries)

    def get(self, class_id: int) -> ClassStats:
        return self._entries[class_id]

    def __contains__(self, class_id: int) -> bool:
        return class_id in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self.classes())

    def __eq__(self, other):
        return isinstance(other, ClassReflectivity) and self._entries == other._entries

    def __repr__(self):
        return f"ClassReflectivity({self._entries!r})"


def _robust_stats(values: np.ndarray) -> tuple[float, float, float, int]:
    """Median centroid plus mean/population-variance after a 3-MAD trim.

    Values farther than three median-absolute-deviations from the median
    are discarded before the mean and variance; the count reports how
    many samples were retained.
    """
    median = float(np.median(values))
    mad = float(np.median(np.abs(values - median)))
    kept = values[np.abs(values - median) <= 3.0 * mad]
    if len(kept) == 0:  # all mass exactly off-median cannot happen, guard anyway
        kept = values
    mean = float(np.mean(kept))
    variance = float(np.var(kept))
    return median, mean, variance, int(len(kept))


def far_range_samples(
    scan: LabeledScan, normals: NormalField, config: PipelineConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Reflectivity samples from points beyond the near-range threshold.

    For each valid labeled point with range above the threshold and
    cos(incidence) at or above the floor, emits intensity * R^2 / cos
    paired with its class id. Returns parallel (class_ids, samples)
    arrays; both may be empty.
    """
    r = scan.scan.ranges()
    mask = (
        normals.valid
        & (r > config.near_range_threshold)
        & (normals.cos_incidence >= config.cos_floor)
        & (scan.labels != IGNORE_CLASS)
    )
    cos = normals.cos_incidence[mask]
    samples = scan.scan.intensity[mask] * r[mask] ** 2 / cos
    return scan.labels[mask], samples


def class_centroids(class_ids: np.ndarray, samples: np.ndarray) -> ClassReflectivity:
    """Per-class robust reflectivity statistics from pooled far-range samples.

    The centroid is the median of each class's samples; mean and
    variance are computed after the 3-MAD trim.
    """
    class_ids = np.asarray(class_ids)
    samples = np.asarray(samples, dtype=np.float64)
    if len(class_ids) != len(samples):
        raise InvalidValue("class_ids and samples must be parallel arrays")
    if len(samples) == 0:
        raise NoSamples("no far-range samples to cluster")
    entries = {}
    for class_id in np.unique(class_ids):
        values = samples[class_ids == class_id]
        centroid, mean, variance, count = _robust_stats(values)
        entries[int(class_id)] = ClassStats(int(class_id), count, centroid, mean, variance)
    return ClassReflectivity(entries)


def _bin_medians(bin_idx: np.ndarray, values: np.ndarray, n_bins: int):
    """Median and count of values per integer bin."""
    medians = np.full(n_bins, np.nan)
    counts = np.zeros(n_bins, dtype=np.int64)
    order = np.argsort(bin_idx, kind="stable")
    sorted_idx = bin_idx[order]
    sorted_val = values[order]
    boundaries = np.flatnonzero(np.diff(sorted_idx)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [len(sorted_idx)]])
    for s, e in zip(starts, ends):
        if s == e:
            continue
        b = sorted_idx[s]
        if 0 <= b < n_bins:
            medians[b] = np.median(sorted_val[s:e])
            counts[b] = e - s
    return medians, counts


def estimate_eta(
    scans,
    normals,
    centroids: ClassReflectivity,
    config: PipelineConfig,
) -> EtaTable:
    """Estimate the near-range table from labeled scans and class centroids.

    Every valid labeled point with cos(incidence) >= cos_floor yields a
    sample intensity * R^2 / (centroid * cos), pooled across classes into
    range bins of eta_bin_width. Bins extend beyond the threshold so a
    far-range plateau is always observed when far data exists. Bins with
    fewer than min_bin_samples are filled by linear interpolation from
    populated neighbors, the table is normalized by its maximum so the
    plateau sits at exactly 1, bins at or beyond the threshold are pinned
    to 1, and everything is clipped to (0, 1].
    """
    width = config.eta_bin_width
    threshold = config.near_range_threshold
    pooled_bins = []
    pooled_vals = []
    for labeled, nf in zip(scans, normals):
        r = labeled.scan.ranges()
        mask = (
            nf.valid
            & (nf.cos_incidence >= config.cos_floor)
            & (labeled.labels != IGNORE_CLASS)
            & (r > 0)
        )
        if not mask.any():
            continue
        labels = labeled.labels[mask]
        known = np.isin(labels, np.array(centroids.classes(), dtype=np.int64))
        if not known.any():
            continue
        labels = labels[known]
        r_sel = r[mask][known]
        cos_sel = nf.cos_incidence[mask][known]
        inten = labeled.scan.intensity[mask][known]
        uniq = np.unique(labels)
        cent = np.array([centroids.get(int(c)).centroid for c in uniq])
        centroid_per_point = cent[np.searchsorted(uniq, labels)]
        eta_samples = inten * r_sel**2 / (centroid_per_point * cos_sel)
        pooled_bins.append((r_sel / width).astype(np.int64))
        pooled_vals.append(eta_samples)

    n_near = int(math.ceil(threshold / width))
    if not pooled_bins:
        raise InsufficientData("no eligible points for eta estimation")
    bin_idx = np.concatenate(pooled_bins)
    values = np.concatenate(pooled_vals)
    n_bins = max(n_near, int(bin_idx.max()) + 1)
    medians, counts = _bin_medians(bin_idx, values, n_bins)

    populated = counts >= config.min_bin_samples
    if not populated.any():
        raise InsufficientData(
            f"no range bin reached min_bin_samples={config.min_bin_samples}"
        )

    centers = (np.arange(n_bins) + 0.5) * width
    eta = np.empty(n_bins)
    eta[populated] = medians[populated]
    if not populated.all():
        eta[~populated] = np.interp(
            centers[~populated], centers[populated], medians[populated]
        )
    plateau = float(np.max(medians[populated]))
    eta = eta / plateau
    eta[centers >= threshold] = 1.0
    eta = np.clip(eta, ETA_FLOOR, 1.0)
    return EtaTable(centers, eta, counts, threshold)


def _eta_model(a: float, d: float, r: np.ndarray) -> np.ndarray:
    return 1.0 - np.exp(-a * (r + d) ** 2)


def _fit_objective(a: float, d: float, r: np.ndarray, eta: np.ndarray, w: np.ndarray) -> float:
    resid = _eta_model(a, d, r) - eta
    return float(np.sum(w * resid * resid))


def fit_eta_params(table: EtaTable) -> EtaParams:
    """Weighted least-squares fit of the parametric near-range model to a table.

    Minimizes sum_b count_b * (model(center_b) - eta_b)^2 over the lumped
    coefficient a and offset d via a coarse log grid followed by
    Gauss-Newton refinement with backtracking, run to a relative
    improvement below 1e-8. Raises FitDiverged when the table shows no
    near-range attenuation (the model has no finite optimum) or the
    refinement cannot hold the grid optimum.
    """
    mask = table.sample_counts > 0
    r = table.bin_centers[mask]
    eta = table.eta[mask]
    w = table.sample_counts[mask].astype(np.float64)
    if len(r) < 4:
        raise InsufficientData(f"need >= 4 populated bins to fit, have {len(r)}")
    if eta.min() > 0.97:
        raise FitDiverged("table has no near-range attenuation; lumped coefficient is unbounded")

    a_grid = np.logspace(-4, 1, 46)
    d_grid = np.linspace(0.05, 8.0, 33)
    best = (np.inf, a_grid[0], d_grid[0])
    for a in a_grid:
        decay = np.exp(-a * np.add.outer(d_grid, r) ** 2)
        resid = (1.0 - decay) - eta[None, :]
        obj = np.sum(w[None, :] * resid * resid, axis=1)
        j = int(np.argmin(obj))
        if obj[j] < best[0]:
            best = (float(obj[j]), float(a), float(d_grid[j]))
    grid_obj, a, d = best

    obj = grid_obj
    for _ in range(200):
        u = np.exp(-a * (r + d) ** 2)
        resid = (1.0 - u) - eta
        # Jacobian of the model w.r.t. (a, d)
        ja = u * (r + d) ** 2
        jd = u * 2.0 * a * (r + d)
        sw = np.sqrt(w)
        J = np.column_stack([sw * ja, sw * jd])
        g = J.T @ (sw * resid)
        H = J.T @ J
        try:
            step = np.linalg.solve(H + 1e-12 * np.eye(2), -g)
        except np.linalg.LinAlgError:
            break
        scale = 1.0
        improved = False
        for _ in range(40):
            a_new = max(a + scale * step[0], 1e-9)
            d_new = min(max(d + scale * step[1], 1e-9), 50.0)
            obj_new = _fit_objective(a_new, d_new, r, eta, w)
            if obj_new < obj:
                improved = True
                break
            scale *= 0.5
        if not improved:
            break
        rel = (obj - obj_new) / max(obj, 1e-300)
        a, d, obj = a_new, d_new, obj_new
        if rel < 1e-8:
            break

    if not np.isfinite(obj) or obj > grid_obj * (1.0 + 1e-12):
        raise FitDiverged("refinement failed to hold the grid optimum")
    if a >= 9.9 and _eta_model(a, d, r).min() > 0.99:
        raise FitDiverged("fit ran to the saturation boundary")
    return EtaParams.from_lumped(a, d)


def eta_at(eta, r):
    """Evaluate the near-range factor at range r (scalar or array).

    Table form: linear interpolation between bin centers, clamped at the
    first and last bins, exactly 1 at or beyond the table's threshold.
    Parametric form: the model evaluated directly.
    """
    r_arr = np.asarray(r, dtype=np.float64)
    if np.any(r_arr <= 0):
        raise NonPositiveRange("range must be strictly positive")
    if isinstance(eta, EtaParams):
        out = 1.0 - np.exp(-eta.a * (r_arr + eta.d) ** 2)
    elif isinstance(eta, EtaTable):
        if len(eta) == 0:
            out = np.ones_like(r_arr)
        else:
            out = np.interp(r_arr, eta.bin_centers, eta.eta)
            out = np.where(r_arr >= eta.near_range_threshold, 1.0, out)
    else:
        raise TypeError(f"expected EtaTable or EtaParams, got {type(eta).__name__}")
    if np.isscalar(r) or np.ndim(r) == 0:
        return float(out)
    return out


def calibrate_scan(
    scan: RawScan, normals: NormalField, eta, config: PipelineConfig
) -> ReflectivityScan:
    """Convert raw intensity into calibrated reflectivity per point.

    reflectivity = intensity * R^2 / (max(cos_incidence, cos_floor) * eta(R))

    Points without a valid normal get reflectivity 0 and valid = False.
    """
    n = scan.point_count
    reflectivity = np.zeros(n)
    valid = normals.valid.copy()
    if valid.any():
        r = scan.ranges()[valid]
        cos = np.maximum(normals.cos_incidence[valid], config.cos_floor)
        reflectivity[valid] = scan.intensity[valid] * r**2 / (cos * eta_at(eta, r))
    return ReflectivityScan(scan, reflectivity, valid)


def class_gaussians(calibrated) -> ClassReflectivity:
    """Per-class Gaussian statistics of calibrated reflectivity.

    Takes (ReflectivityScan, labels) pairs; pools valid points of each
    nonzero class and applies the same robust trim as class_centroids.
    """
    ids = []
    vals = []
    for refl_scan, labels in calibrated:
        labels = np.asarray(labels)
        if len(labels) != refl_scan.point_count:
            raise InvalidValue("labels do not match scan point count")
        mask = refl_scan.valid & (labels != IGNORE_CLASS)
        ids.append(labels[mask])
        vals.append(refl_scan.reflectivity[mask])
    if not ids:
        raise NoSamples("no calibrated scans given")
    ids = np.concatenate(ids)
    vals = np.concatenate(vals)
    if len(vals) == 0:
        raise NoSamples("no valid labeled points")
    return class_centroids(ids, vals)


def gaussian_nll(values, labels, stats: ClassReflectivity) -> float:
    """Gaussian negative log likelihood of values under per-class statistics.

    Sums 0.5 * (log(var_c) + (v - mean_c)^2 / var_c) over points, using
    each point's class c. Class 0 points are skipped; variances are
    floored at 1e-6. Raises UnknownClass for a nonzero label absent from
    the statistics.
    """
    values = np.asarray(values, dtype=np.float64)
    labels = np.asarray(labels)
    if len(values) != len(labels):
        raise InvalidValue("values and labels must be parallel arrays")
    mask = labels != IGNORE_CLASS
    values = values[mask]
    labels = labels[mask]
    if len(values) == 0:
        return 0.0
    present = np.unique(labels)
    missing = [int(c) for c in present if int(c) not in stats]
    if missing:
        raise UnknownClass(f"no statistics for classes {missing}")
    means = np.empty(len(values))
    variances = np.empty(len(values))
    for c in present:
        s = stats.get(int(c))
        sel = labels == c
        means[sel] = s.mean
        variances[sel] = max(s.variance, VARIANCE_FLOOR)
    return float(np.sum(0.5 * (np.log(variances) + (values - means) ** 2 / variances)))
