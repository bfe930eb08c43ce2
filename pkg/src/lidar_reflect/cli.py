"""Command-line pipeline: eta estimation, calibration, projection, cross-sensor
mapping, synthetic dataset generation, and a throughput benchmark.

Every command writes a run manifest (manifest.json) into its output
directory; reruns with identical inputs and seed reproduce data outputs
byte for byte regardless of worker count. The exit code is 0 only when
no per-file failure occurred. Set LIDAR_REFLECT_LOG to control logging.
"""

from __future__ import annotations

import argparse
import functools
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import calibration, crosssensor, geometry, ingest, synth
from .calibration import EtaTable
from .core import LabeledScan, ReflectivityScan, valid_point_mask
from .errors import LidarReflectError

log = logging.getLogger("lidar_reflect")


def _identity_eta() -> EtaTable:
    # Empty table: eta_at returns 1 at every range.
    return EtaTable(np.empty(0), np.empty(0), np.empty(0, dtype=np.int64), 1e-9)


class Manifest:
    """Collects run metadata and writes it exactly once."""

    def __init__(self, command: str, args: argparse.Namespace):
        self.data = {
            "command": command,
            "config_paths": {
                key: str(getattr(args, key))
                for key in ("sensor_config", "pipeline_config", "eta", "map", "scene")
                if getattr(args, key, None)
            },
            "input_globs": [
                str(getattr(args, key))
                for key in ("scans", "labels", "scan", "reflectivity", "target_scans", "target_labels")
                if getattr(args, key, None)
            ],
            "output_dir": str(getattr(args, "out", "")),
            "seed": getattr(args, "seed", None),
            "timings_ms": {},
            "failures": [],
            "warnings": [],
        }
        self._written = False

    def time(self, stage: str):
        return _StageTimer(self, stage)

    def add_timing(self, stage: str, ms: float):
        self.data["timings_ms"][stage] = self.data["timings_ms"].get(stage, 0.0) + max(ms, 0.0)

    def fail(self, name: str, message: str):
        log.error("%s: %s", name, message)
        self.data["failures"].append({"input": name, "error": message})

    def warn(self, message: str):
        log.warning("%s", message)
        self.data["warnings"].append(message)

    def write(self, out_dir) -> None:
        assert not self._written, "manifest must be written exactly once"
        self._written = True
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "manifest.json").write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")

    @property
    def exit_code(self) -> int:
        return 1 if self.data["failures"] else 0


class _StageTimer:
    def __init__(self, manifest: Manifest, stage: str):
        self.manifest = manifest
        self.stage = stage

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.manifest.add_timing(self.stage, (time.perf_counter() - self.start) * 1e3)
        return False


def _load_configs(args):
    sensor = ingest.read_sensor_config(args.sensor_config)
    if getattr(args, "pipeline_config", None):
        config = ingest.read_pipeline_config(args.pipeline_config)
    else:
        config = ingest.pipeline_from_mapping({})
    return sensor, config


def _read_labeled(scan_path, labels_dir) -> LabeledScan:
    scan = ingest.read_scan(scan_path)
    labels = ingest.read_labels(ingest.matching_label_file(scan_path, labels_dir))
    try:
        return LabeledScan(scan, labels)
    except LidarReflectError as exc:
        raise type(exc)(f"{scan_path}: {exc}") from exc


# --- estimate-eta -----------------------------------------------------------


def cmd_estimate_eta(args) -> int:
    manifest = Manifest("estimate-eta", args)
    sensor, config = _load_configs(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    scan_files = ingest.list_scan_files(args.scans)
    if not scan_files:
        manifest.warn(f"no scan files in {args.scans}")
        manifest.write(out_dir)
        return manifest.exit_code

    scans = []
    normal_fields = []
    sample_ids = []
    sample_vals = []
    for scan_path in scan_files:
        labeled = _read_labeled(scan_path, args.labels)
        with manifest.time("validate"):
            mask = valid_point_mask(labeled.scan, sensor)
            labeled = labeled.take(mask)
        with manifest.time("normals"):
            nf = geometry.compute_normals(labeled.scan, sensor, config)
        with manifest.time("far_range_samples"):
            ids, vals = calibration.far_range_samples(labeled, nf, config)
        scans.append(labeled)
        normal_fields.append(nf)
        sample_ids.append(ids)
        sample_vals.append(vals)
        log.info("%s: %d valid points, %d far-range samples", scan_path.name, labeled.point_count, len(vals))

    with manifest.time("class_centroids"):
        centroids = calibration.class_centroids(
            np.concatenate(sample_ids), np.concatenate(sample_vals)
        )
    with manifest.time("estimate_eta"):
        table = calibration.estimate_eta(scans, normal_fields, centroids, config)

    ingest.write_eta_table(table, out_dir / "eta_table.csv")
    ingest.write_class_stats(centroids, out_dir / "class_stats.csv")
    manifest.write(out_dir)
    print(f"eta table: {out_dir / 'eta_table.csv'} ({len(table)} bins)")
    print(f"class stats: {out_dir / 'class_stats.csv'} ({len(centroids)} classes)")
    return manifest.exit_code


# --- calibrate --------------------------------------------------------------


def _calibrate_one(task, sensor, config, eta, out_dir):
    """Calibrate one scan file; returns (name, error message or None).

    The output preserves the input's point order and geometry; points
    that fail validation or normal estimation come out with
    reflectivity 0 and are only excluded via the valid mask semantics.
    """
    scan_path = Path(task)
    try:
        scan = ingest.read_scan(scan_path)
        mask = valid_point_mask(scan, sensor)
        sub = scan.take(mask)
        nf = geometry.compute_normals(sub, sensor, config)
        calibrated = calibration.calibrate_scan(sub, nf, eta, config)
        reflectivity = np.zeros(scan.point_count)
        valid = np.zeros(scan.point_count, dtype=bool)
        reflectivity[mask] = calibrated.reflectivity
        valid[mask] = calibrated.valid
        out = ReflectivityScan(scan, reflectivity, valid)
        ingest.write_scan(out, Path(out_dir) / scan_path.name)
        return scan_path.name, None
    except LidarReflectError as exc:
        return scan_path.name, str(exc)


def cmd_calibrate(args) -> int:
    manifest = Manifest("calibrate", args)
    sensor, config = _load_configs(args)
    eta = ingest.read_eta_table(args.eta) if args.eta else _identity_eta()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    scan_files = ingest.list_scan_files(args.scans)
    if not scan_files:
        manifest.warn(f"no scan files in {args.scans}")
    worker = functools.partial(
        _calibrate_one, sensor=sensor, config=config, eta=eta, out_dir=str(out_dir)
    )
    with manifest.time("calibrate"):
        results = _map_tasks(worker, [str(p) for p in scan_files], args.workers)
    done = 0
    for name, error in results:
        if error is None:
            done += 1
        else:
            manifest.fail(name, error)
    manifest.write(out_dir)
    print(f"calibrated {done}/{len(scan_files)} scans -> {out_dir}")
    return manifest.exit_code


# --- project ----------------------------------------------------------------


def cmd_project(args) -> int:
    manifest = Manifest("project", args)
    sensor, _ = _load_configs(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    scan = ingest.read_scan(args.scan)
    reflectivity = None
    if args.reflectivity:
        refl_scan = ingest.read_scan(args.reflectivity)
        if refl_scan.point_count != scan.point_count:
            raise LidarReflectError(
                f"reflectivity file has {refl_scan.point_count} points, scan has {scan.point_count}"
            )
        reflectivity = refl_scan.intensity
    with manifest.time("validate"):
        mask = valid_point_mask(scan, sensor)
        scan = scan.take(mask)
        if reflectivity is not None:
            reflectivity = reflectivity[mask]
    with manifest.time("project"):
        image = geometry.spherical_project(scan, sensor, extra=reflectivity)
        tensor = geometry.assemble_channels(image, args.layout)

    stem = Path(args.scan).stem
    names = geometry.CHANNEL_LAYOUTS[args.layout]
    with manifest.time("export"):
        scales = geometry.export_channel_pngs(image, tensor, names, out_dir, stem)
        geometry.write_tensor(tensor, scales, out_dir / f"{stem}.f32")
    manifest.write(out_dir)
    print(f"wrote {len(names)} PNGs and {stem}.f32 ({args.layout}) -> {out_dir}")
    return manifest.exit_code


# --- cross-sensor -----------------------------------------------------------


def cmd_cross_fit(args) -> int:
    manifest = Manifest("cross-fit", args)
    sensor, config = _load_configs(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    def load_all(scan_dir, label_dir):
        loaded = []
        for scan_path in ingest.list_scan_files(scan_dir):
            labeled = _read_labeled(scan_path, label_dir)
            loaded.append(labeled.take(valid_point_mask(labeled.scan, sensor)))
        return loaded

    with manifest.time("load"):
        source = load_all(args.scans, args.labels)
        target = load_all(args.target_scans, args.target_labels)
    with manifest.time("fit"):
        cmap = crosssensor.fit_cross_map(source, target, config)
    crosssensor.write_cross_map(cmap, out_dir / "cross_map.csv")
    manifest.write(out_dir)
    print(f"cross map: {out_dir / 'cross_map.csv'} ({cmap.n_bins} bins x {cmap.n_quantiles} quantiles)")
    return manifest.exit_code


def _cross_apply_one(task, cmap, out_dir):
    scan_path = Path(task)
    try:
        scan = ingest.read_scan(scan_path)
        mapped = crosssensor.apply_cross_map(scan, cmap)
        ingest.write_scan(mapped, Path(out_dir) / scan_path.name)
        return scan_path.name, None
    except LidarReflectError as exc:
        return scan_path.name, str(exc)


def cmd_cross_apply(args) -> int:
    manifest = Manifest("cross-apply", args)
    cmap = crosssensor.read_cross_map(args.map)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    scan_files = ingest.list_scan_files(args.scans)
    if not scan_files:
        manifest.warn(f"no scan files in {args.scans}")
    worker = functools.partial(_cross_apply_one, cmap=cmap, out_dir=str(out_dir))
    with manifest.time("apply"):
        results = _map_tasks(worker, [str(p) for p in scan_files], args.workers)
    done = 0
    for name, error in results:
        if error is None:
            done += 1
        else:
            manifest.fail(name, error)
    manifest.write(out_dir)
    print(f"mapped {done}/{len(scan_files)} scans -> {out_dir}")
    return manifest.exit_code


# --- synth ------------------------------------------------------------------


def _synth_one(index, spec_path, seed, out_dir):
    try:
        spec = synth.read_scene_spec(spec_path)
        spec = synth.SceneSpec(
            materials=spec.materials,
            surfaces=spec.surfaces,
            emission_power=spec.emission_power,
            eta_params=spec.eta_params,
            sensor=spec.sensor,
            noise_sigma=spec.noise_sigma,
            seed=seed + index,
        )
        labeled, truth = synth.generate_scene(spec)
        stem = f"{index:06d}"
        out = Path(out_dir)
        ingest.write_scan(labeled.scan, out / f"{stem}.bin")
        ingest.write_labels(labeled.labels, out / f"{stem}.label")
        synth.write_ground_truth(truth, out / f"{stem}.gt")
        return stem, None
    except LidarReflectError as exc:
        return f"{index:06d}", str(exc)


def cmd_synth(args) -> int:
    manifest = Manifest("synth", args)
    spec = synth.read_scene_spec(args.scene)  # fail fast on a bad spec
    seed = args.seed if args.seed is not None else spec.seed
    manifest.data["seed"] = seed
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    worker = functools.partial(
        _synth_one, spec_path=str(args.scene), seed=seed, out_dir=str(out_dir)
    )
    with manifest.time("generate"):
        results = _map_tasks(worker, list(range(args.count)), args.workers)
    done = 0
    for name, error in results:
        if error is None:
            done += 1
        else:
            manifest.fail(name, error)
    manifest.write(out_dir)
    print(f"generated {done}/{args.count} scans -> {out_dir}")
    return manifest.exit_code


# --- bench ------------------------------------------------------------------


def cmd_bench(args) -> int:
    manifest = Manifest("bench", args)
    sensor, config = _load_configs(args)
    eta = ingest.read_eta_table(args.eta) if args.eta else _identity_eta()
    if args.scan:
        scan = ingest.read_scan(args.scan)
    elif args.scene:
        labeled, _ = synth.generate_scene(synth.read_scene_spec(args.scene))
        scan = labeled.scan
    else:
        raise LidarReflectError("bench needs --scan or --scene")

    stages = ("validate", "normals", "calibrate", "project")
    samples = {name: [] for name in stages}
    totals = []
    for iteration in range(3 + args.iterations):
        t0 = time.perf_counter()
        mask = valid_point_mask(scan, sensor)
        sub = scan.take(mask)
        t1 = time.perf_counter()
        nf = geometry.compute_normals(sub, sensor, config)
        t2 = time.perf_counter()
        calibrated = calibration.calibrate_scan(sub, nf, eta, config)
        t3 = time.perf_counter()
        geometry.spherical_project(sub, sensor, extra=calibrated.reflectivity)
        t4 = time.perf_counter()
        if iteration < 3:  # warmup
            continue
        for name, dt in zip(stages, (t1 - t0, t2 - t1, t3 - t2, t4 - t3)):
            samples[name].append(dt * 1e3)
        totals.append((t4 - t0) * 1e3)

    report_lines = [f"points: {scan.point_count}", f"iterations: {args.iterations} (after 3 warmup)"]
    for name in stages:
        med = float(np.median(samples[name]))
        p95 = float(np.quantile(samples[name], 0.95))
        manifest.add_timing(f"{name}_median", med)
        manifest.add_timing(f"{name}_p95", p95)
        report_lines.append(f"{name:>10}: median {med:8.3f} ms   p95 {p95:8.3f} ms")
    med_total = float(np.median(totals))
    p95_total = float(np.quantile(totals, 0.95))
    manifest.add_timing("total_median", med_total)
    manifest.add_timing("total_p95", p95_total)
    report_lines.append(f"{'total':>10}: median {med_total:8.3f} ms   p95 {p95_total:8.3f} ms")
    report = "\n".join(report_lines)
    print(report)
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "bench_report.txt").write_text(report + "\n")
        manifest.write(out_dir)
    return 0


# --- plumbing ---------------------------------------------------------------


def _map_tasks(worker, tasks, workers):
    """Run worker over tasks, in-process or via a process pool.

    Outputs depend only on each task's own inputs, so results are
    identical for any worker count.
    """
    if workers is None:
        workers = os.cpu_count() or 1
    if workers <= 1 or len(tasks) <= 1:
        return [worker(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(worker, tasks))


def _add_common(parser, *names):
    if "scans" in names:
        parser.add_argument("--scans", required=True, help="directory of .bin scan files")
    if "labels" in names:
        parser.add_argument("--labels", required=True, help="directory of .label files")
    if "sensor" in names:
        parser.add_argument("--sensor-config", required=True, help="sensor YAML file")
    if "pipeline" in names:
        parser.add_argument("--pipeline-config", default=None, help="pipeline YAML file (defaults applied)")
    if "out" in names:
        parser.add_argument("--out", required=True, help="output directory")
    if "workers" in names:
        parser.add_argument("--workers", type=int, default=None, help="worker processes (default: CPU count)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lidar-reflect",
        description="LiDAR intensity calibration toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate-eta", help="estimate the near-range table from labeled scans")
    _add_common(p, "scans", "labels", "sensor", "pipeline", "out")
    p.set_defaults(func=cmd_estimate_eta)

    p = sub.add_parser("calibrate", help="convert raw scans to reflectivity scans")
    _add_common(p, "scans", "sensor", "pipeline", "out", "workers")
    p.add_argument("--eta", default=None, help="eta table file (default: identity)")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("project", help="spherical projection to PNGs and a flat tensor")
    p.add_argument("--scan", required=True, help="scan .bin file")
    p.add_argument("--reflectivity", default=None, help="matching reflectivity .bin file")
    _add_common(p, "sensor", "out")
    p.add_argument(
        "--layout", choices=sorted(geometry.CHANNEL_LAYOUTS), default="rxyzi",
        help="channel layout for the assembled tensor",
    )
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("cross-fit", help="fit a cross-sensor intensity map")
    _add_common(p, "scans", "labels", "sensor", "pipeline", "out")
    p.add_argument("--target-scans", required=True, help="directory of target sensor scans")
    p.add_argument("--target-labels", required=True, help="directory of target sensor labels")
    p.set_defaults(func=cmd_cross_fit)

    p = sub.add_parser("cross-apply", help="apply a cross-sensor map to scans")
    _add_common(p, "scans", "out", "workers")
    p.add_argument("--map", required=True, help="cross map file from cross-fit")
    p.set_defaults(func=cmd_cross_apply)

    p = sub.add_parser("synth", help="generate a synthetic dataset with ground truth")
    p.add_argument("--scene", required=True, help="scene spec YAML file")
    p.add_argument("--count", type=int, default=1, help="number of scans to generate")
    p.add_argument("--seed", type=int, default=None, help="base seed (default: from the scene spec)")
    _add_common(p, "out", "workers")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bench", help="time the single-scan calibration path")
    p.add_argument("--scan", default=None, help="scan .bin file to benchmark")
    p.add_argument("--scene", default=None, help="scene spec to synthesize a benchmark scan")
    _add_common(p, "sensor", "pipeline")
    p.add_argument("--eta", default=None, help="eta table file (default: identity)")
    p.add_argument("--iterations", type=int, default=10, help="timed iterations after 3 warmup runs")
    p.add_argument("--out", default=None, help="optional directory for the report and manifest")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("LIDAR_REFLECT_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except LidarReflectError as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
