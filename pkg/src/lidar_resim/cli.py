"""Command-line surface: generate, fit, resim, eval, baseline.

Exit codes: 0 success, 2 usage/validation error, 3 data-integrity error,
4 numerical failure during optimization.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import baseline as baseline_mod
from . import formats, metrics, optimize
from .fields import GridField
from .geometry import Aabb, Obb, PoseTrack, estimate_box_transform, \
    obb_from_corners
from .oracle import generate_dataset
from .rendering import SamplingConfig
from .scan import SensorConfig
from .scenegraph import (ComposeConfig, DynamicAsset, SceneGraph,
                         insert_asset, remove_asset, resimulate_scan,
                         set_trajectory)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INTEGRITY = 3
EXIT_NUMERICAL = 4


class CliError(Exception):
    def __init__(self, message, code=EXIT_USAGE):
        super().__init__(message)
        self.code = code


def _load_spec(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read scene spec {path}: {exc}")
    try:
        return formats.parse_scene_spec(doc)
    except formats.SceneSpecError as exc:
        raise CliError(str(exc))


def _parse_floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip() != ""]
    except ValueError as exc:
        raise CliError(f"bad number list {text!r}: {exc}")


def _parse_ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip() != ""]
    except ValueError as exc:
        raise CliError(f"bad index list {text!r}: {exc}")


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    scene, sensor, times, spec_seed, calib, drop_thr = _load_spec(args.spec)
    seed = spec_seed if args.seed is None else args.seed
    os.makedirs(args.out, exist_ok=True)
    scans, boxes = generate_dataset(scene, sensor, times, calib, drop_thr)
    frames = []
    for i, scan in enumerate(scans):
        name = f"frame_{i:04d}.scan"
        formats.save_scan(os.path.join(args.out, name), scan)
        if args.ply:
            formats.write_scan_ply(
                os.path.join(args.out, f"frame_{i:04d}.ply"), scan)
        frames.append((scan.time, name))
    boxes_file = None
    if boxes:
        boxes_file = "boxes.json"
        formats.write_boxes(os.path.join(args.out, boxes_file), boxes)
    formats.write_manifest(os.path.join(args.out, "manifest.json"),
                           sensor, frames, seed, boxes_file)
    print(f"wrote {len(scans)} frames to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def _asset_geometry(boxes, asset_id):
    """Canonical box template plus the world-to-canonical pose track."""
    if asset_id not in boxes:
        raise CliError(f"no boxes for asset {asset_id!r} in dataset")
    frames = boxes[asset_id]
    template = obb_from_corners(frames[0][1])
    canonical_box = Obb.axis_aligned((0, 0, 0), template.half_extents)
    times = []
    poses = []
    for t, corners in frames:
        times.append(t)
        poses.append(estimate_box_transform(corners,
                                            canonical_box.corners()))
    return canonical_box, PoseTrack(np.asarray(times), tuple(poses))


def _select_frames(scans, exclude):
    if not exclude:
        return scans
    drop = set(exclude)
    return [s for i, s in enumerate(scans) if i not in drop]


def cmd_fit(args) -> int:
    sensor, scans, boxes, _ = formats.load_dataset(args.dataset)
    scans = _select_frames(scans, _parse_ints(args.exclude_frames)
                           if args.exclude_frames else ())
    if args.target == "static":
        exclusions = []
        for asset_id in boxes:
            box, track = _asset_geometry(boxes, asset_id)
            exclusions.append((track, box))
        data = optimize.build_static_batch(scans, exclusions)
        pts = np.concatenate([s.points() for s in scans])
        margin = args.bounds_margin
        bounds = Aabb(pts.min(axis=0) - margin, pts.max(axis=0) + margin)
    else:
        box, track = _asset_geometry(boxes, args.target)
        data = optimize.build_dynamic_batch(scans, track, box)
        margin = args.bounds_margin
        h = box.half_extents + margin
        bounds = Aabb(-h, h)

    cell = args.cell_size
    res = np.maximum(np.ceil((bounds.hi - bounds.lo) / cell).astype(int) + 1,
                     2)
    field = GridField(bounds, res, feature_dim=args.feature_dim,
                      hidden_dim=args.hidden_dim, seed=args.seed,
                      dtype=np.float32)
    sampling = SamplingConfig(
        n_uniform=args.n_uniform, n_importance=args.n_importance,
        n_upsample_steps=args.upsample_steps, near=args.near, far=args.far)
    cfg = optimize.TrainConfig(
        iterations=args.iterations, batch_size=args.batch_size,
        lr_start=args.lr_start, lr_end=args.lr_end, seed=args.seed,
        log_every=max(1, args.iterations // 200) if args.iterations else 1)
    try:
        result = optimize.train_field(field, data, cfg, sampling=sampling)
    except optimize.TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    formats.save_checkpoint(args.out, field)
    if args.loss_log:
        formats.write_csv(args.loss_log, result.history_columns(),
                          result.history_rows())
    print(f"fit {args.target}: {len(data)} rays, "
          f"{args.iterations} iterations -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# resim
# ---------------------------------------------------------------------------

def _load_scene_graph(path, dataset_boxes, base_dir):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read scene graph {path}: {exc}")
    if "static" not in doc:
        raise CliError("scene graph needs a 'static' checkpoint entry")

    def resolve(p):
        return p if os.path.isabs(p) else os.path.join(base_dir, p)

    try:
        static = formats.load_checkpoint(resolve(doc["static"]))
        assets = []
        for entry in doc.get("assets", ()):
            field = formats.load_checkpoint(resolve(entry["checkpoint"]))
            if "track" in entry:
                track = formats.parse_track(entry["track"], invert=True)
                box = Obb.axis_aligned((0, 0, 0), entry["box_half_extents"])
            else:
                box, track = _asset_geometry(dataset_boxes, entry["id"])
            assets.append(DynamicAsset(field, box, track, entry["id"]))
    except formats.CheckpointError as exc:
        raise CliError(str(exc), EXIT_INTEGRITY)
    except KeyError as exc:
        raise CliError(f"scene graph entry missing {exc}")
    return SceneGraph(static, tuple(assets))


def _apply_edits(scene, args, base_dir):
    for asset_id in args.remove_asset or ():
        try:
            scene = remove_asset(scene, asset_id)
        except KeyError as exc:
            raise CliError(str(exc))
    for spec in args.insert_asset or ():
        try:
            with open(spec if os.path.isabs(spec)
                      else os.path.join(base_dir, spec)) as fh:
                doc = json.load(fh)
            field = formats.load_checkpoint(
                doc["checkpoint"] if os.path.isabs(doc["checkpoint"])
                else os.path.join(base_dir, doc["checkpoint"]))
            asset = DynamicAsset(
                field, Obb.axis_aligned((0, 0, 0), doc["box_half_extents"]),
                formats.parse_track(doc["track"], invert=True), doc["id"])
        except formats.CheckpointError as exc:
            raise CliError(str(exc), EXIT_INTEGRITY)
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise CliError(f"bad asset file {spec}: {exc}")
        try:
            scene = insert_asset(scene, asset)
        except ValueError as exc:
            raise CliError(str(exc))
    for pair in args.set_track or ():
        if "=" not in pair:
            raise CliError("--set-track expects ID=TRACKFILE")
        asset_id, track_file = pair.split("=", 1)
        try:
            with open(track_file if os.path.isabs(track_file)
                      else os.path.join(base_dir, track_file)) as fh:
                doc = json.load(fh)
            track = formats.parse_track(doc["track"], invert=True)
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise CliError(f"bad track file {track_file}: {exc}")
        try:
            scene = set_trajectory(scene, asset_id, track)
        except KeyError as exc:
            raise CliError(str(exc))
    return scene


def _modified_sensor(sensor, args):
    elev = sensor.elevations
    if args.beam_count:
        elev = np.linspace(elev[0], elev[-1], args.beam_count)
    if args.elevation_offset:
        elev = elev + np.deg2rad(args.elevation_offset)
    track = sensor.track
    if args.shift_sensor:
        shift = np.asarray(args.shift_sensor, np.float64)
        from .geometry import Pose
        poses = tuple(Pose(p.rotation, p.translation + shift)
                      for p in track.poses)
        track = PoseTrack(track.times, poses)
    return SensorConfig(elev, sensor.azimuth_count, track, sensor.max_range)


def cmd_resim(args) -> int:
    sensor, frames_meta, _, boxes_file = formats.load_manifest(args.dataset)
    boxes = (formats.load_boxes(os.path.join(args.dataset, boxes_file))
             if boxes_file else {})
    base_dir = os.path.dirname(os.path.abspath(args.scene))
    scene = _load_scene_graph(args.scene, boxes, base_dir)
    scene = _apply_edits(scene, args, base_dir)
    sensor = _modified_sensor(sensor, args)

    if args.times:
        times = _parse_floats(args.times)
    elif args.frames:
        idx = _parse_ints(args.frames)
        times = [frames_meta[i][0] for i in idx]
    else:
        times = [t for t, _ in frames_meta]

    cfg = ComposeConfig(
        static_sampling=SamplingConfig(
            args.n_uniform, args.n_importance, args.upsample_steps,
            args.near, args.far),
        dynamic_sampling=SamplingConfig(
            args.dyn_n_uniform, args.dyn_n_importance,
            args.dyn_upsample_steps, args.near, args.far),
        seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    frames = []
    for i, t in enumerate(times):
        scan = resimulate_scan(scene, sensor, t, cfg,
                               use_unisim=args.unisim)
        name = f"frame_{i:04d}.scan"
        formats.save_scan(os.path.join(args.out, name), scan)
        if args.ply:
            formats.write_scan_ply(
                os.path.join(args.out, f"frame_{i:04d}.ply"), scan)
        frames.append((t, name))
    formats.write_manifest(os.path.join(args.out, "manifest.json"), sensor,
                           frames, args.seed)
    print(f"re-simulated {len(times)} frames to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    gt_sensor, gt_scans, gt_boxes, _ = formats.load_dataset(args.gt)
    est_sensor, est_frames, _, _ = formats.load_manifest(args.est)
    est_scans = [formats.load_scan(os.path.join(args.est, name), est_sensor)
                 for _, name in est_frames]
    gt_by_time = {round(s.time, 9): s for s in gt_scans}
    pairs = []
    for scan in est_scans:
        key = round(scan.time, 9)
        if key not in gt_by_time:
            raise CliError(f"no ground-truth frame at time {scan.time}")
        pairs.append((gt_by_time[key], scan))

    boxes = gt_boxes
    if args.boxes:
        boxes = formats.load_boxes(args.boxes)
    boxes_per_scan = None
    if boxes:
        boxes_per_scan = []
        for gt, _ in pairs:
            key = gt.time
            obbs = []
            for frames in boxes.values():
                for t, corners in frames:
                    if abs(t - key) < 1e-9:
                        obbs.append(obb_from_corners(corners))
            boxes_per_scan.append(obbs)

    try:
        result = metrics.compute_metrics([p[0] for p in pairs],
                                         [p[1] for p in pairs],
                                         boxes_per_scan)
    except ValueError as exc:
        raise CliError(str(exc))
    formats.write_csv(args.out,
                      ("metric", "value", "unit", "scene_id", "method_id"),
                      result.rows(args.scene_id, args.method_id))
    ecdf_path = os.path.splitext(args.out)[0] + "_ecdf.csv"
    formats.write_csv(ecdf_path, ("error_cm", "cumulative_fraction"),
                      [(float(e), float(f)) for e, f in result.ecdf])
    for name, value, unit, _, _ in result.rows():
        print(f"{name}: {value:.4f} {unit}".rstrip())
    return EXIT_OK


# ---------------------------------------------------------------------------
# baseline
# ---------------------------------------------------------------------------

def cmd_baseline(args) -> int:
    sensor, scans, boxes, seed = formats.load_dataset(args.dataset)
    train = _select_frames(scans, _parse_ints(args.exclude_frames)
                           if args.exclude_frames else ())
    objects = []
    for asset_id in boxes:
        box, track = _asset_geometry(boxes, asset_id)
        objects.append((asset_id, track, box))
    cfg = baseline_mod.SurfelConfig(
        normal_radius=args.normal_radius, voxel_size=args.voxel_size,
        surfel_radius=args.surfel_radius)
    model = baseline_mod.build_surfel_model(train, cfg, objects)

    if args.times:
        times = _parse_floats(args.times)
    elif args.frames:
        idx = _parse_ints(args.frames)
        times = [scans[i].time for i in idx]
    else:
        times = [s.time for s in scans]
    os.makedirs(args.out, exist_ok=True)
    frames = []
    for i, t in enumerate(times):
        scan = model.cast_scan(sensor, t)
        name = f"frame_{i:04d}.scan"
        formats.save_scan(os.path.join(args.out, name), scan)
        frames.append((t, name))
    formats.write_manifest(os.path.join(args.out, "manifest.json"), sensor,
                           frames, seed)
    print(f"surfel baseline wrote {len(times)} frames to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lidar-resim",
        description="LiDAR re-simulation over composable SDF fields")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="scan a scripted scene to disk")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--ply", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("fit", help="fit a field to a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--target", required=True,
                   help="'static' or an asset id from boxes.json")
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=4096)
    p.add_argument("--lr-start", type=float, default=0.005)
    p.add_argument("--lr-end", type=float, default=0.0005)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cell-size", type=float, default=0.25)
    p.add_argument("--bounds-margin", type=float, default=1.0)
    p.add_argument("--feature-dim", type=int, default=8)
    p.add_argument("--hidden-dim", type=int, default=32)
    p.add_argument("--n-uniform", type=int, default=256)
    p.add_argument("--n-importance", type=int, default=256)
    p.add_argument("--upsample-steps", type=int, default=8)
    p.add_argument("--near", type=float, default=0.5)
    p.add_argument("--far", type=float, default=120.0)
    p.add_argument("--exclude-frames", default="")
    p.add_argument("--loss-log", default=None)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("resim", help="re-simulate scans from checkpoints")
    p.add_argument("--dataset", required=True)
    p.add_argument("--scene", required=True,
                   help="scene graph JSON referencing checkpoints")
    p.add_argument("--out", required=True)
    p.add_argument("--times", default=None)
    p.add_argument("--frames", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shift-sensor", type=float, nargs=3, default=None,
                   metavar=("X", "Y", "Z"))
    p.add_argument("--elevation-offset", type=float, default=0.0,
                   help="degrees added to every beam elevation")
    p.add_argument("--beam-count", type=int, default=None)
    p.add_argument("--remove-asset", action="append", default=[])
    p.add_argument("--insert-asset", action="append", default=[])
    p.add_argument("--set-track", action="append", default=[])
    p.add_argument("--unisim", action="store_true",
                   help="joint-rendering ablation composition")
    p.add_argument("--n-uniform", type=int, default=256)
    p.add_argument("--n-importance", type=int, default=256)
    p.add_argument("--upsample-steps", type=int, default=8)
    p.add_argument("--dyn-n-uniform", type=int, default=64)
    p.add_argument("--dyn-n-importance", type=int, default=64)
    p.add_argument("--dyn-upsample-steps", type=int, default=4)
    p.add_argument("--near", type=float, default=0.5)
    p.add_argument("--far", type=float, default=120.0)
    p.add_argument("--ply", action="store_true")
    p.set_defaults(func=cmd_resim)

    p = sub.add_parser("eval", help="compare re-simulated scans to truth")
    p.add_argument("--gt", required=True)
    p.add_argument("--est", required=True)
    p.add_argument("--boxes", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--scene-id", default="")
    p.add_argument("--method-id", default="")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="surfel baseline re-simulation")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--surfel-radius", type=float, default=0.06)
    p.add_argument("--normal-radius", type=float, default=0.20)
    p.add_argument("--voxel-size", type=float, default=0.04)
    p.add_argument("--exclude-frames", default="")
    p.add_argument("--times", default=None)
    p.add_argument("--frames", default=None)
    p.set_defaults(func=cmd_baseline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except formats.CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
