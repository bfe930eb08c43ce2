"""Cross-sensor intensity mapping via per-range-bin quantile matching.

Different sensors report intensity on different scales and with
range-dependent distortion. A monotone map is fitted per range bin from
pooled labeled intensities of both sensors, with no point correspondence
required, and applied by piecewise-linear interpolation between matched
quantiles.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import IGNORE_CLASS, PipelineConfig, RawScan
from .errors import FileUnreadable, FileUnwritable, InsufficientData, InvalidValue, MalformedTable

DEFAULT_QUANTILES = 33


@dataclass(frozen=True)
class CrossSensorMap:
    """Monotone per-range-bin intensity mapping between two sensors.

    range_bin_edges has B+1 entries for B bins; source_quantiles and
    target_quantiles are B x Q with rows non-decreasing, sampled at
    quantile levels uniform on [0, 1].
    """

    range_bin_edges: np.ndarray
    source_quantiles: np.ndarray
    target_quantiles: np.ndarray
    source_name: str = "source"
    target_name: str = "target"

    def __post_init__(self):
        edges = np.asarray(self.range_bin_edges, dtype=np.float64)
        src = np.asarray(self.source_quantiles, dtype=np.float64)
        tgt = np.asarray(self.target_quantiles, dtype=np.float64)
        object.__setattr__(self, "range_bin_edges", edges)
        object.__setattr__(self, "source_quantiles", src)
        object.__setattr__(self, "target_quantiles", tgt)
        if edges.ndim != 1 or len(edges) < 2 or not np.all(np.diff(edges) > 0):
            raise InvalidValue("range_bin_edges must be increasing with at least two entries")
        n_bins = len(edges) - 1
        if src.shape != tgt.shape or src.ndim != 2 or src.shape[0] != n_bins:
            raise InvalidValue(
                f"quantile arrays must be ({n_bins}, Q); got {src.shape} and {tgt.shape}"
            )
        eps = 1e-9 * (1.0 + np.abs(src).max(initial=0.0) + np.abs(tgt).max(initial=0.0))
        if np.any(np.diff(src, axis=1) < -eps) or np.any(np.diff(tgt, axis=1) < -eps):
            raise InvalidValue("quantile rows must be non-decreasing")

    @property
    def n_bins(self) -> int:
        return len(self.range_bin_edges) - 1

    @property
    def n_quantiles(self) -> int:
        return self.source_quantiles.shape[1]


def _pool_intensities(scans):
    """Intensity and range of every labeled (nonzero class) point, pooled."""
    ranges = []
    intensities = []
    for labeled in scans:
        mask = labeled.labels != IGNORE_CLASS
        ranges.append(labeled.scan.ranges()[mask])
        intensities.append(labeled.scan.intensity[mask])
    if not ranges:
        return np.empty(0), np.empty(0)
    return np.concatenate(ranges), np.concatenate(intensities)


def fit_cross_map(
    source,
    target,
    config: PipelineConfig,
    n_quantiles: int = DEFAULT_QUANTILES,
    source_name: str = "source",
    target_name: str = "target",
) -> CrossSensorMap:
    """Fit a quantile-matching map from pooled labeled intensities.

    Range bins are four eta bin widths wide and span 0 to the maximum
    range shared by both datasets. Bins with fewer than min_bin_samples
    points on either side inherit the nearest populated bin's quantiles.
    """
    src_r, src_i = _pool_intensities(source)
    tgt_r, tgt_i = _pool_intensities(target)
    if len(src_i) == 0 or len(tgt_i) == 0:
        raise InsufficientData("both source and target need labeled points")

    bin_width = 4.0 * config.eta_bin_width
    shared_max = min(src_r.max(), tgt_r.max())
    n_bins = max(1, int(np.ceil(shared_max / bin_width)))
    edges = np.arange(n_bins + 1) * bin_width
    levels = np.linspace(0.0, 1.0, n_quantiles)

    src_q = np.zeros((n_bins, n_quantiles))
    tgt_q = np.zeros((n_bins, n_quantiles))
    populated = np.zeros(n_bins, dtype=bool)
    src_bins = np.clip((src_r / bin_width).astype(np.int64), 0, n_bins - 1)
    tgt_bins = np.clip((tgt_r / bin_width).astype(np.int64), 0, n_bins - 1)
    src_in = src_r < edges[-1]
    tgt_in = tgt_r < edges[-1]
    for b in range(n_bins):
        s_vals = src_i[src_in & (src_bins == b)]
        t_vals = tgt_i[tgt_in & (tgt_bins == b)]
        if len(s_vals) >= config.min_bin_samples and len(t_vals) >= config.min_bin_samples:
            src_q[b] = np.quantile(s_vals, levels)
            tgt_q[b] = np.quantile(t_vals, levels)
            populated[b] = True

    if not populated.any():
        raise InsufficientData("no range bin is populated on both sides")
    pop_idx = np.flatnonzero(populated)
    for b in np.flatnonzero(~populated):
        nearest = pop_idx[np.argmin(np.abs(pop_idx - b))]
        src_q[b] = src_q[nearest]
        tgt_q[b] = tgt_q[nearest]
    return CrossSensorMap(edges, src_q, tgt_q, source_name, target_name)


def apply_cross_map(scan: RawScan, cmap: CrossSensorMap) -> RawScan:
    """Map a scan's intensities into the target sensor's domain.

    Each point's range selects a bin (clamped to the covered span) and
    its intensity moves from the source to the target quantile curve by
    piecewise-linear interpolation, clamped at the extreme quantiles.
    Geometry passes through unchanged.
    """
    r = scan.ranges()
    bin_width = cmap.range_bin_edges[1] - cmap.range_bin_edges[0]
    bins = np.clip((r / bin_width).astype(np.int64), 0, cmap.n_bins - 1)
    mapped = np.empty(scan.point_count)
    for b in np.unique(bins):
        sel = bins == b
        mapped[sel] = np.interp(
            scan.intensity[sel], cmap.source_quantiles[b], cmap.target_quantiles[b]
        )
    return RawScan(scan.x, scan.y, scan.z, mapped)


# --- persistence ------------------------------------------------------------

CROSS_MAP_HEADER = "bin_index,bin_lo_m,bin_hi_m,quantile_level,source_value,target_value"


def write_cross_map(cmap: CrossSensorMap, path) -> None:
    """Persist a map as delimited text, one row per (bin, quantile level)."""
    levels = np.linspace(0.0, 1.0, cmap.n_quantiles)
    lines = [
        f"# source_name={cmap.source_name}",
        f"# target_name={cmap.target_name}",
        CROSS_MAP_HEADER,
    ]
    for b in range(cmap.n_bins):
        lo = cmap.range_bin_edges[b]
        hi = cmap.range_bin_edges[b + 1]
        for q, level in enumerate(levels):
            lines.append(
                f"{b},{float(lo)!r},{float(hi)!r},{float(level)!r},"
                f"{float(cmap.source_quantiles[b, q])!r},{float(cmap.target_quantiles[b, q])!r}"
            )
    try:
        Path(path).write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise FileUnwritable(f"cannot write {path}: {exc}") from exc


def read_cross_map(path) -> CrossSensorMap:
    """Read a map written by write_cross_map."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FileUnreadable(f"cannot read {path}: {exc}") from exc
    source_name = "source"
    target_name = "target"
    rows = []
    header_seen = False
    for ln in text.splitlines():
        ln = ln.strip()
        if not ln:
            continue
        if ln.startswith("#"):
            body = ln.lstrip("#").strip()
            if body.startswith("source_name="):
                source_name = body.split("=", 1)[1]
            elif body.startswith("target_name="):
                target_name = body.split("=", 1)[1]
            continue
        if not header_seen:
            if ln != CROSS_MAP_HEADER:
                raise MalformedTable(f"{path}: expected header {CROSS_MAP_HEADER!r}")
            header_seen = True
            continue
        parts = ln.split(",")
        if len(parts) != 6:
            raise MalformedTable(f"{path}: expected 6 columns, got {ln!r}")
        try:
            rows.append((int(parts[0]), float(parts[1]), float(parts[2]), float(parts[4]), float(parts[5])))
        except ValueError as exc:
            raise MalformedTable(f"{path}: non-numeric cell in {ln!r}") from exc
    if not header_seen or not rows:
        raise MalformedTable(f"{path}: no map rows found")
    n_bins = max(r[0] for r in rows) + 1
    per_bin = [[] for _ in range(n_bins)]
    bounds = {}
    for b, lo, hi, sv, tv in rows:
        per_bin[b].append((sv, tv))
        bounds[b] = (lo, hi)
    counts = {len(v) for v in per_bin}
    if len(counts) != 1:
        raise MalformedTable(f"{path}: bins have differing quantile counts {sorted(counts)}")
    edges = [bounds[0][0]] + [bounds[b][1] for b in range(n_bins)]
    src_q = np.array([[sv for sv, _ in bin_rows] for bin_rows in per_bin])
    tgt_q = np.array([[tv for _, tv in bin_rows] for bin_rows in per_bin])
    return CrossSensorMap(np.array(edges), src_q, tgt_q, source_name, target_name)
