"""Persistent file formats: binary scan containers, field checkpoints,
JSON scene specifications, box tracks, manifests and CSV reports.

Binary layouts are little-endian with f32 bulk arrays; every writer goes
through a temp-file-and-rename so partial files never appear. Checkpoints
carry a trailing CRC32 over the entire payload.
"""

from __future__ import annotations

import csv
import json
import os
import struct
import tempfile
import zlib

import numpy as np
from jsonschema import Draft7Validator

from .fields import AxisBox, GridField, Plane, Sphere
from .geometry import Aabb, Obb, Pose, PoseTrack
from .oracle import (DEFAULT_DROP_THRESHOLD, DEFAULT_INTENSITY_CALIBRATION,
                     MovingObject, ScriptedScene)
from .scan import DROPPED_RANGE, Scan, SensorConfig, beam_grid

__all__ = [
    "CheckpointError",
    "SceneSpecError",
    "load_boxes",
    "load_checkpoint",
    "load_manifest",
    "load_scan",
    "parse_scene_spec",
    "save_checkpoint",
    "save_scan",
    "write_boxes",
    "write_csv",
    "write_manifest",
    "write_scan_ply",
]

SCAN_MAGIC = b"DNFLSCAN"
FIELD_MAGIC = b"DNFLFLD1"
SCAN_VERSION = 1


class CheckpointError(RuntimeError):
    """Raised on checkpoint corruption (bad magic, size or CRC)."""


class SceneSpecError(ValueError):
    """Raised on malformed scene specification documents."""


def _atomic_write(path, data: bytes):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


# ---------------------------------------------------------------------------
# scan files
# ---------------------------------------------------------------------------

def save_scan(path, scan: Scan):
    """Range-image container: header, f32 range/intensity grids, u8 drops."""
    rng = scan.range_grid().astype("<f4")
    if np.any(~np.isfinite(rng)):
        raise ValueError("scan ranges must be finite")
    header = SCAN_MAGIC + struct.pack(
        "<HIId", SCAN_VERSION, scan.n_beams, scan.n_azimuths, scan.time)
    body = (rng.tobytes()
            + scan.intensity_grid().astype("<f4").tobytes()
            + scan.drop_grid().astype(np.uint8).tobytes())
    _atomic_write(path, header + body)


def load_scan_grids(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != SCAN_MAGIC:
        raise CheckpointError(f"{path}: bad scan magic")
    version, nb, na, t = struct.unpack_from("<HIId", raw, 8)
    if version != SCAN_VERSION:
        raise CheckpointError(f"{path}: unsupported scan version {version}")
    off = 8 + struct.calcsize("<HIId")
    cells = nb * na
    expect = off + cells * 9
    if len(raw) != expect:
        raise CheckpointError(f"{path}: truncated scan file")
    rng = np.frombuffer(raw, "<f4", cells, off).reshape(nb, na)
    inten = np.frombuffer(raw, "<f4", cells, off + 4 * cells).reshape(nb, na)
    drop = np.frombuffer(raw, np.uint8, cells, off + 8 * cells).reshape(nb, na)
    return nb, na, t, rng.astype(np.float64), inten.astype(np.float64), \
        drop.astype(bool)


def load_scan(path, sensor: SensorConfig) -> Scan:
    """Rebuild the full scan (ray geometry from the sensor model)."""
    nb, na, t, rng, inten, drop = load_scan_grids(path)
    if nb != sensor.n_beams or na != sensor.azimuth_count:
        raise ValueError(f"{path}: grid {nb}x{na} does not match sensor")
    origins, dirs, beam_idx, az_idx = beam_grid(sensor, t)
    dropped = drop.reshape(-1)
    return Scan.assemble(origins, dirs,
                         np.where(dropped, 0.0, rng.reshape(-1)),
                         inten.reshape(-1), dropped, t, beam_idx, az_idx,
                         nb, na)


def write_scan_ply(path, scan: Scan):
    """Binary little-endian PLY point export of the returned rays."""
    keep = ~scan.dropped
    pts = scan.points().astype("<f4")
    inten = scan.intensities[keep].astype("<f4")
    beam = scan.beam_idx[keep].astype("<i4")
    az = scan.azimuth_idx[keep].astype("<i4")
    drop = np.zeros(keep.sum(), dtype=np.uint8)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {pts.shape[0]}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property float intensity\nproperty int beam\nproperty int azimuth\n"
        "property uchar drop\nend_header\n"
    )
    rec = np.empty(pts.shape[0], dtype=[
        ("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("intensity", "<f4"),
        ("beam", "<i4"), ("azimuth", "<i4"), ("drop", "u1")])
    rec["x"], rec["y"], rec["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
    rec["intensity"] = inten
    rec["beam"] = beam
    rec["azimuth"] = az
    rec["drop"] = drop
    _atomic_write(path, header.encode("ascii") + rec.tobytes())


# ---------------------------------------------------------------------------
# field checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, field: GridField):
    nx, ny, nz = field.resolution
    g = field.feature_dim
    h = field.hidden_dim
    head = FIELD_MAGIC + struct.pack(
        "<6d3IIIQ",
        *field.bounds.lo, *field.bounds.hi, nx, ny, nz, g, h, field.seed)
    arrays = [
        np.asarray(field.sharpness_param, np.float32).reshape(1),
        field.sdf_values.astype("<f4").reshape(-1),
        field.feature_values.astype("<f4").reshape(-1),
        field.w1.astype("<f4").reshape(-1),
        field.b1.astype("<f4").reshape(-1),
        field.w2.astype("<f4").reshape(-1),
        field.b2.astype("<f4").reshape(-1),
    ]
    payload = head + b"".join(a.tobytes() for a in arrays)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    _atomic_write(path, payload + struct.pack("<I", crc))


def load_checkpoint(path) -> GridField:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:8] != FIELD_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic")
    payload, crc_stored = raw[:-4], struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise CheckpointError(f"{path}: CRC mismatch (corrupt checkpoint)")
    vals = struct.unpack_from("<6d3IIIQ", raw, 8)
    lo, hi = np.array(vals[:3]), np.array(vals[3:6])
    nx, ny, nz, g, h = vals[6:11]
    seed = vals[11]
    off = 8 + struct.calcsize("<6d3IIIQ")

    def take(count):
        nonlocal off
        arr = np.frombuffer(raw, "<f4", count, off)
        off += 4 * count
        return arr

    sharp = take(1)[0]
    cells = nx * ny * nz
    sdf = take(cells).reshape(nx, ny, nz)
    feats = take(cells * g).reshape(nx, ny, nz, g)
    w1 = take((g + 16) * h).reshape(g + 16, h)
    b1 = take(h)
    w2 = take(h * 2).reshape(h, 2)
    b2 = take(2)
    if off != len(payload):
        raise CheckpointError(f"{path}: trailing bytes in checkpoint")

    field = GridField(Aabb(lo, hi), (nx, ny, nz), feature_dim=g,
                      hidden_dim=h, seed=int(seed), dtype=np.float32)
    field.sdf_values = sdf.copy()
    field.feature_values = feats.copy()
    field.w1, field.b1 = w1.copy(), b1.copy()
    field.w2, field.b2 = w2.copy(), b2.copy()
    field.sharpness_param = np.array(sharp, np.float32)
    return field


# ---------------------------------------------------------------------------
# scene specification (JSON)
# ---------------------------------------------------------------------------

_VEC3 = {"type": "array", "items": {"type": "number"},
         "minItems": 3, "maxItems": 3}
_QUAT = {"type": "array", "items": {"type": "number"},
         "minItems": 4, "maxItems": 4}
_KEYFRAME = {
    "type": "object",
    "properties": {"time": {"type": "number"}, "position": _VEC3,
                   "quaternion": _QUAT},
    "required": ["time", "position"],
    "additionalProperties": False,
}
_TRACK = {"type": "array", "items": _KEYFRAME, "minItems": 1}
_SHAPE = {
    "type": "object",
    "properties": {
        "type": {"enum": ["sphere", "plane", "box"]},
        "center": _VEC3, "radius": {"type": "number"},
        "normal": _VEC3, "offset": {"type": "number"},
        "half_extents": _VEC3,
        "reflectance": {"type": "number", "minimum": 0, "maximum": 1},
    },
    "required": ["type"],
    "additionalProperties": False,
}
SCENE_SCHEMA = {
    "type": "object",
    "properties": {
        "seed": {"type": "integer"},
        "sensor": {
            "type": "object",
            "properties": {
                "elevations_deg": {"type": "array",
                                   "items": {"type": "number"},
                                   "minItems": 1},
                "azimuth_count": {"type": "integer", "minimum": 1},
                "max_range": {"type": "number", "exclusiveMinimum": 0},
                "track": _TRACK,
            },
            "required": ["elevations_deg", "azimuth_count", "track"],
            "additionalProperties": False,
        },
        "static": {"type": "array", "items": _SHAPE},
        "objects": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {
                    "id": {"type": "string"},
                    "shape": _SHAPE,
                    "box_half_extents": _VEC3,
                    "track": _TRACK,
                },
                "required": ["id", "shape", "box_half_extents", "track"],
                "additionalProperties": False,
            },
        },
        "frame_times": {"type": "array", "items": {"type": "number"},
                        "minItems": 1},
        "intensity_calibration": {"type": "number"},
        "drop_threshold": {"type": "number"},
    },
    "required": ["sensor", "static", "frame_times"],
    "additionalProperties": False,
}
_SCENE_VALIDATOR = Draft7Validator(SCENE_SCHEMA)


def _parse_shape(doc):
    kind = doc["type"]
    rho = doc.get("reflectance", 1.0)
    try:
        if kind == "sphere":
            return Sphere(doc["center"], doc["radius"], rho)
        if kind == "plane":
            return Plane(doc["normal"], doc["offset"], rho)
        return AxisBox(doc["center"], doc["half_extents"], rho)
    except KeyError as exc:
        raise SceneSpecError(f"shape {kind} missing field {exc}") from exc


def _parse_pose(doc) -> Pose:
    quat = doc.get("quaternion", (1.0, 0.0, 0.0, 0.0))
    return Pose(np.asarray(quat, np.float64), doc["position"])


def parse_track(doc, invert: bool = False) -> PoseTrack:
    """Keyframes to a pose track; ``invert`` flips each pose (the on-disk
    convention is object-to-world while assets store world-to-canonical)."""
    times = [kf["time"] for kf in doc]
    poses = []
    for kf in doc:
        pose = _parse_pose(kf)
        poses.append(pose.inverse() if invert else pose)
    return PoseTrack(np.asarray(times, np.float64), tuple(poses))


def track_to_json(track: PoseTrack, invert: bool = False):
    out = []
    for t, pose in zip(track.times, track.poses):
        p = pose.inverse() if invert else pose
        out.append({"time": float(t),
                    "position": [float(v) for v in p.translation],
                    "quaternion": [float(v) for v in p.rotation]})
    return out


def parse_scene_spec(doc):
    """Validate and build (scene, sensor, frame_times, seed, calibration,
    drop_threshold) from a scene specification document."""
    errors = sorted(_SCENE_VALIDATOR.iter_errors(doc), key=str)
    if errors:
        msgs = "; ".join(
            f"{'/'.join(str(p) for p in e.absolute_path) or '<root>'}: "
            f"{e.message}" for e in errors[:5])
        raise SceneSpecError(f"invalid scene spec: {msgs}")
    sensor_doc = doc["sensor"]
    sensor = SensorConfig(
        elevations=np.deg2rad(np.asarray(sensor_doc["elevations_deg"],
                                         np.float64)),
        azimuth_count=int(sensor_doc["azimuth_count"]),
        track=parse_track(sensor_doc["track"]),
        max_range=float(sensor_doc.get("max_range", 120.0)),
    )
    statics = tuple(_parse_shape(s) for s in doc["static"])
    objects = []
    for obj in doc.get("objects", ()):
        shape = _parse_shape(obj["shape"])
        box = Obb.axis_aligned((0.0, 0.0, 0.0), obj["box_half_extents"])
        track = parse_track(obj["track"], invert=True)
        objects.append(MovingObject(shape, track, box, obj["id"]))
    scene = ScriptedScene(statics, tuple(objects))
    return (scene, sensor, [float(t) for t in doc["frame_times"]],
            int(doc.get("seed", 0)),
            float(doc.get("intensity_calibration",
                          DEFAULT_INTENSITY_CALIBRATION)),
            float(doc.get("drop_threshold", DEFAULT_DROP_THRESHOLD)))


# ---------------------------------------------------------------------------
# boxes, manifests, CSV
# ---------------------------------------------------------------------------

def _dump_json(path, doc):
    _atomic_write(path, (json.dumps(doc, indent=2, sort_keys=True) + "\n")
                  .encode("utf-8"))


def write_boxes(path, boxes: dict):
    """``boxes[object_id]`` is a list of (time, 8x3 world corners)."""
    doc = {"objects": [
        {"id": oid,
         "frames": [{"time": float(t),
                     "corners": [[float(v) for v in c] for c in corners]}
                    for t, corners in frames]}
        for oid, frames in sorted(boxes.items())]}
    _dump_json(path, doc)


def load_boxes(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    out = {}
    for obj in doc["objects"]:
        out[obj["id"]] = [
            (float(f["time"]), np.asarray(f["corners"], np.float64))
            for f in obj["frames"]]
    return out


def sensor_to_json(sensor: SensorConfig):
    return {
        "elevations": [float(v) for v in sensor.elevations],
        "azimuth_count": int(sensor.azimuth_count),
        "max_range": float(sensor.max_range),
        "track": track_to_json(sensor.track),
    }


def sensor_from_json(doc) -> SensorConfig:
    return SensorConfig(
        elevations=np.asarray(doc["elevations"], np.float64),
        azimuth_count=int(doc["azimuth_count"]),
        track=parse_track(doc["track"]),
        max_range=float(doc["max_range"]),
    )


def write_manifest(path, sensor: SensorConfig, frames, seed: int,
                   boxes_file: str | None = None):
    """``frames`` is a list of (time, relative scan filename)."""
    doc = {
        "sensor": sensor_to_json(sensor),
        "frames": [{"time": float(t), "file": name} for t, name in frames],
        "seed": int(seed),
    }
    if boxes_file is not None:
        doc["boxes"] = boxes_file
    _dump_json(path, doc)


def load_manifest(directory):
    path = os.path.join(directory, "manifest.json")
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    sensor = sensor_from_json(doc["sensor"])
    frames = [(float(f["time"]), f["file"]) for f in doc["frames"]]
    boxes = doc.get("boxes")
    return sensor, frames, int(doc["seed"]), boxes


def load_dataset(directory):
    """Manifest + every scan + boxes (if present)."""
    sensor, frames, seed, boxes_file = load_manifest(directory)
    scans = [load_scan(os.path.join(directory, name), sensor)
             for _, name in frames]
    boxes = (load_boxes(os.path.join(directory, boxes_file))
             if boxes_file else {})
    return sensor, scans, boxes, seed


def write_csv(path, header, rows):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise
