"""Surfel-splatting baseline: reconstruct disk surfels from training scans
and re-simulate by ray-disk casting.

Static background points build one surfel cloud in the world frame; each
dynamic object's points are accumulated in its canonical frame and the
resulting cloud is posed into the world at query time.  Casting is a
brute-force scan over all disks (the reference behavior any acceleration
must reproduce exactly).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Obb, PoseTrack, interpolate_track
from .scan import Scan, SensorConfig, beam_grid

__all__ = [
    "SurfelCloud",
    "SurfelConfig",
    "SurfelModel",
    "build_surfels",
    "estimate_normals",
    "ray_surfel_cast",
    "reconstruct_surfels",
    "voxel_downsample",
]


@dataclass(frozen=True)
class SurfelConfig:
    normal_radius: float = 0.20
    voxel_size: float = 0.04
    surfel_radius: float = 0.06
    min_neighbors: int = 3


@dataclass
class SurfelCloud:
    centers: np.ndarray     # (N, 3)
    normals: np.ndarray     # (N, 3) unit, oriented toward the sensor
    radii: np.ndarray       # (N,)
    intensities: np.ndarray  # (N,)

    def __post_init__(self):
        if np.any(self.radii <= 0):
            raise ValueError("surfel radii must be positive")

    def __len__(self):
        return int(self.centers.shape[0])

    def transformed(self, rot, translation) -> "SurfelCloud":
        return SurfelCloud(self.centers @ rot.T + translation,
                           self.normals @ rot.T, self.radii, self.intensities)


def estimate_normals(points, sensor_origins, radius: float = 0.20,
                     min_neighbors: int = 3):
    """Per-point plane-fit normals from a radius neighborhood.

    Returns (normals, valid): the normal is the smallest-eigenvalue
    eigenvector of the local covariance, oriented toward the sensor origin
    of the point's source ray; points with fewer than ``min_neighbors``
    neighborhood members are flagged invalid.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    tree = cKDTree(pts)
    neighborhoods = tree.query_ball_point(pts, radius)
    counts = np.array([len(nb) for nb in neighborhoods])
    flat = np.fromiter((j for nb in neighborhoods for j in nb),
                       dtype=np.int64, count=int(counts.sum()))
    owner = np.repeat(np.arange(n), counts)

    p = pts[flat]
    sums = np.stack([np.bincount(owner, p[:, c], minlength=n)
                     for c in range(3)], axis=1)
    safe = np.maximum(counts, 1)
    mean = sums / safe[:, None]
    m2 = np.empty((n, 3, 3))
    for a in range(3):
        for b_ax in range(a, 3):
            acc = np.bincount(owner, p[:, a] * p[:, b_ax], minlength=n)
            m2[:, a, b_ax] = acc
            m2[:, b_ax, a] = acc
    cov = m2 / safe[:, None, None] - mean[:, :, None] * mean[:, None, :]

    valid = counts >= min_neighbors
    cov[~valid] = np.eye(3)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    to_sensor = np.asarray(sensor_origins, dtype=np.float64) - pts
    flip = np.einsum("ij,ij->i", normals, to_sensor) < 0.0
    normals[flip] *= -1.0
    return normals, valid


def voxel_downsample(points, voxel: float = 0.04, attributes: dict = None):
    """One centroid per occupied voxel; attribute arrays are averaged."""
    pts = np.asarray(points, dtype=np.float64)
    keys = np.floor(pts / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True,
                                   return_counts=True)
    m = counts.size
    out = np.stack([np.bincount(inverse, pts[:, c], minlength=m) / counts
                    for c in range(3)], axis=1)
    attrs_out = {}
    for name, arr in (attributes or {}).items():
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 1:
            attrs_out[name] = np.bincount(inverse, arr, minlength=m) / counts
        else:
            attrs_out[name] = np.stack(
                [np.bincount(inverse, arr[:, c], minlength=m) / counts
                 for c in range(arr.shape[1])], axis=1)
    return (out, attrs_out) if attributes is not None else out


def build_surfels(points, normals, radius: float = 0.06,
                  intensities=None, valid=None) -> SurfelCloud:
    """One disk per valid point."""
    pts = np.asarray(points, dtype=np.float64)
    nrm = np.asarray(normals, dtype=np.float64)
    if valid is None:
        valid = np.ones(pts.shape[0], dtype=bool)
    if intensities is None:
        intensities = np.zeros(pts.shape[0])
    pts = pts[valid]
    nrm = nrm[valid]
    nrm = nrm / np.linalg.norm(nrm, axis=1, keepdims=True)
    return SurfelCloud(pts, nrm, np.full(pts.shape[0], float(radius)),
                       np.asarray(intensities, dtype=np.float64)[valid])


def reconstruct_surfels(points, sensor_origins, intensities,
                        cfg: SurfelConfig = SurfelConfig()) -> SurfelCloud:
    """Full pipeline: normals on the raw cloud, voxel downsampling, disks."""
    normals, valid = estimate_normals(points, sensor_origins,
                                      cfg.normal_radius, cfg.min_neighbors)
    pts, attrs = voxel_downsample(
        np.asarray(points)[valid], cfg.voxel_size,
        {"normal": normals[valid],
         "intensity": np.asarray(intensities)[valid]})
    nrm = attrs["normal"]
    lens = np.linalg.norm(nrm, axis=1)
    ok = lens > 1e-9  # opposing normals can cancel inside one voxel
    return build_surfels(pts[ok], nrm[ok] / lens[ok, None],
                         cfg.surfel_radius, attrs["intensity"][ok])


def ray_surfel_cast(origin, direction, cloud: SurfelCloud):
    """Nearest ray-disk hit: (range, intensity) or None."""
    zeta, inten, hit = _cast_batch(np.asarray(origin, np.float64)[None, :],
                                   np.asarray(direction, np.float64)[None, :],
                                   cloud)
    if not hit[0]:
        return None
    return float(zeta[0]), float(inten[0])


def _cast_batch(origins, dirs, cloud: SurfelCloud, chunk: int = 512):
    """Brute-force ray-disk casting, vectorized over (ray chunk x surfels)."""
    n = origins.shape[0]
    best_t = np.full(n, np.inf)
    best_e = np.zeros(n)
    if len(cloud) == 0:
        return best_t, best_e, np.zeros(n, dtype=bool)
    c = cloud.centers
    nrm = cloud.normals
    r2 = cloud.radii**2
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        o = origins[lo:hi]
        d = dirs[lo:hi]
        denom = d @ nrm.T  # (B, S)
        num = np.einsum("sj,sj->s", c, nrm)[None, :] - o @ nrm.T
        with np.errstate(divide="ignore", invalid="ignore"):
            t = num / denom
        t = np.where(np.abs(denom) > 1e-12, t, np.inf)
        t = np.where(t > 1e-9, t, np.inf)
        hitp = o[:, None, :] + t[..., None] * d[:, None, :]
        with np.errstate(invalid="ignore"):
            dist2 = np.sum((hitp - c[None, :, :]) ** 2, axis=-1)
        t = np.where(dist2 <= r2[None, :], t, np.inf)
        j = np.argmin(t, axis=1)
        tj = t[np.arange(hi - lo), j]
        best_t[lo:hi] = tj
        best_e[lo:hi] = np.where(np.isfinite(tj), cloud.intensities[j], 0.0)
    hit = np.isfinite(best_t)
    return best_t, best_e, hit


@dataclass
class SurfelModel:
    """Static cloud plus per-object canonical clouds with their tracks."""

    static: SurfelCloud
    assets: tuple = ()  # (object_id, canonical cloud, track)

    def cast(self, origins, dirs, t: float, max_range: float = np.inf):
        origins = np.asarray(origins, dtype=np.float64)
        dirs = np.asarray(dirs, dtype=np.float64)
        best_t, best_e, _ = _cast_batch(origins, dirs, self.static)
        for _, cloud, track in self.assets:
            pose = interpolate_track(track, t).inverse()  # canonical -> world
            world = cloud.transformed(pose.rotation_matrix(),
                                      pose.translation)
            tt, ee, _ = _cast_batch(origins, dirs, world)
            better = tt < best_t
            best_t = np.where(better, tt, best_t)
            best_e = np.where(better, ee, best_e)
        hit = np.isfinite(best_t) & (best_t <= max_range)
        return np.where(hit, best_t, 0.0), np.where(hit, best_e, 0.0), hit

    def cast_scan(self, sensor: SensorConfig, t: float) -> Scan:
        origins, dirs, beam_idx, az_idx = beam_grid(sensor, t)
        zeta, inten, hit = self.cast(origins, dirs, t, sensor.max_range)
        return Scan.assemble(origins, dirs, zeta, inten, ~hit, t, beam_idx,
                             az_idx, sensor.n_beams, sensor.azimuth_count)


def build_surfel_model(scans, cfg: SurfelConfig = SurfelConfig(),
                       objects=()) -> SurfelModel:
    """Reconstruct a full scene surfel model from training scans.

    ``objects`` holds (object_id, track, canonical_box) triples; their hit
    points are pulled out of the static cloud and accumulated canonically.
    """
    pts_s, org_s, int_s = [], [], []
    per_object = {oid: ([], [], []) for oid, _, _ in objects}
    for scan in scans:
        keep = ~scan.dropped
        pts = scan.origins[keep] + scan.ranges[keep, None] * scan.directions[keep]
        origins = scan.origins[keep]
        inten = scan.intensities[keep]
        assigned = np.zeros(pts.shape[0], dtype=bool)
        for oid, track, box in objects:
            pose = interpolate_track(track, scan.time)
            rot = pose.rotation_matrix()
            pts_c = pts @ rot.T + pose.translation
            inside = box.contains(pts_c, tol=1e-6) & ~assigned
            if np.any(inside):
                acc = per_object[oid]
                acc[0].append(pts_c[inside])
                acc[1].append(origins[inside] @ rot.T + pose.translation)
                acc[2].append(inten[inside])
                assigned |= inside
        pts_s.append(pts[~assigned])
        org_s.append(origins[~assigned])
        int_s.append(inten[~assigned])

    static = reconstruct_surfels(np.concatenate(pts_s), np.concatenate(org_s),
                                 np.concatenate(int_s), cfg)
    assets = []
    for oid, track, _ in objects:
        p, o, e = per_object[oid]
        if not p:
            continue
        cloud = reconstruct_surfels(np.concatenate(p), np.concatenate(o),
                                    np.concatenate(e), cfg)
        assets.append((oid, cloud, track))
    return SurfelModel(static, tuple(assets))
