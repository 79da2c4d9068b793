"""Decomposed dynamic scene: one static field plus rigidly moving assets.

Composition is two-stage: a box intersection test selects candidate fields
per ray, each candidate is rendered independently (dynamic ones in their
canonical frame), and the measurements are merged by a drop test that keeps
the nearest surface among fields claiming a return.  A joint single-pass
renderer is provided as an ablation, along with the scene editing
operations (remove / insert / retrack) the decomposition enables.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import (Obb, Pose, PoseTrack, Ray, interpolate_track,
                       ray_obb_intersect, transform_ray)
from .rendering import SamplingConfig, render_batch, render_ray
from .scan import Scan, SensorConfig, beam_grid

__all__ = [
    "ComposeConfig",
    "ComposedMeasurement",
    "DynamicAsset",
    "SceneGraph",
    "compose_ray",
    "compose_rays_batch",
    "fields_hit",
    "insert_asset",
    "remove_asset",
    "resimulate_scan",
    "set_trajectory",
    "unisim_compose_ray",
]

STATIC_FIELD_ID = "static"


@dataclass(frozen=True)
class DynamicAsset:
    """A canonical-frame field moved through the scene by a pose track.

    ``track`` holds world-to-canonical transforms, so a world ray is rendered
    by transforming it into the canonical frame (ranges are preserved).
    """

    field: object
    canonical_box: Obb
    track: PoseTrack
    asset_id: str

    def __post_init__(self):
        bounds = getattr(self.field, "bounds", None)
        if bounds is not None:
            corners = self.canonical_box.corners()
            if not np.all(bounds.contains(corners)):
                raise ValueError(
                    f"field bounds do not enclose canonical box of "
                    f"asset {self.asset_id!r}")

    def pose_at(self, t: float) -> Pose:
        return interpolate_track(self.track, t)


@dataclass(frozen=True)
class SceneGraph:
    static_field: object
    assets: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "assets", tuple(self.assets))
        ids = [a.asset_id for a in self.assets]
        if len(set(ids)) != len(ids):
            raise ValueError("asset ids must be unique")

    def asset(self, asset_id: str) -> DynamicAsset:
        for a in self.assets:
            if a.asset_id == asset_id:
                return a
        raise KeyError(f"unknown asset id {asset_id!r}")


@dataclass(frozen=True)
class ComposedMeasurement:
    range: float          # m; -1 when dropped
    intensity: float
    dropped: bool
    source_field_id: str  # empty when dropped


@dataclass(frozen=True)
class ComposeConfig:
    static_sampling: SamplingConfig = SamplingConfig.static_default()
    dynamic_sampling: SamplingConfig = SamplingConfig.dynamic_default()
    drop_threshold: float = 0.5
    # Candidates whose weight sum is below this gate carry no surface
    # evidence and are treated as dropped (heads are untrained in empty
    # space, so their drop output there is meaningless).
    low_evidence_gate: bool = True
    min_weight_sum: float = 0.05
    seed: int = 0


def fields_hit(scene: SceneGraph, ray: Ray, t: float,
               static_near: float = 0.5, static_far: float = 120.0):
    """Candidate fields for a ray: the static field plus every asset whose
    canonical box is crossed by the transformed ray."""
    out = [(STATIC_FIELD_ID, static_near, static_far)]
    for asset in scene.assets:
        pose = asset.pose_at(t)
        hit = ray_obb_intersect(transform_ray(pose, ray), asset.canonical_box)
        if hit is not None:
            out.append((asset.asset_id, hit[0], hit[1]))
    return out


def _merge_candidates(candidates, cfg: ComposeConfig) -> ComposedMeasurement:
    """Drop-test merge: all candidates dropped -> dropped; otherwise the
    nearest non-dropped range wins and supplies the intensity."""
    live = []
    for fid, res in candidates:
        declared_drop = res.drop_est > cfg.drop_threshold
        low_evidence = cfg.low_evidence_gate and (
            res.weight_sum < cfg.min_weight_sum)
        if not declared_drop and not low_evidence:
            live.append((res.range_est, res.intensity_est, fid))
    if not live:
        return ComposedMeasurement(-1.0, 0.0, True, "")
    live.sort(key=lambda item: item[0])
    rng, intensity, fid = live[0]
    return ComposedMeasurement(float(rng), float(intensity), False, fid)


def compose_ray(scene: SceneGraph, ray: Ray, t: float,
                cfg: ComposeConfig = ComposeConfig()) -> ComposedMeasurement:
    """Render each candidate field independently and merge by the drop test."""
    sc = cfg.static_sampling
    candidates = []
    for fid, near, far in fields_hit(scene, ray, t, sc.near, sc.far):
        if fid == STATIC_FIELD_ID:
            res = render_ray(scene.static_field, ray, sc, cfg.seed, 0)
        else:
            asset = scene.asset(fid)
            canonical = transform_ray(asset.pose_at(t), ray)
            dyn_cfg = replace(cfg.dynamic_sampling, near=max(near, 1e-6),
                              far=max(far, 2e-6))
            res = render_ray(asset.field, canonical, dyn_cfg, cfg.seed, 0)
        candidates.append((fid, res))
    return _merge_candidates(candidates, cfg)


@dataclass(frozen=True)
class _BatchResult:
    range_est: float
    intensity_est: float
    drop_est: float
    weight_sum: float


def compose_rays_batch(scene: SceneGraph, origins, dirs, t: float,
                       cfg: ComposeConfig, ray_ids=None):
    """Vectorized two-stage composition over a batch of rays.

    Returns arrays (ranges, intensities, dropped, source_ids).
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    n = origins.shape[0]
    if ray_ids is None:
        ray_ids = np.arange(n)

    per_field = []  # (field_id, ray indices, render dict)
    static = render_batch(scene.static_field, origins, dirs,
                          cfg.static_sampling, cfg.seed, ray_ids)
    per_field.append((STATIC_FIELD_ID, np.arange(n), static))

    for asset in scene.assets:
        pose = asset.pose_at(t)
        rot = pose.rotation_matrix()
        o_c = origins @ rot.T + pose.translation
        d_c = dirs @ rot.T
        box = asset.canonical_box
        inv = box.pose.inverse()
        o_b = o_c @ inv.rotation_matrix().T + inv.translation
        d_b = d_c @ inv.rotation_matrix().T
        with np.errstate(divide="ignore", invalid="ignore"):
            rinv = np.where(d_b != 0.0, 1.0 / d_b, np.inf)
        t0 = (-box.half_extents - o_b) * rinv
        t1 = (box.half_extents - o_b) * rinv
        bnear = np.maximum(np.minimum(t0, t1).max(axis=1), 0.0)
        bfar = np.maximum(t0, t1).min(axis=1)
        sel = np.nonzero(bnear <= bfar)[0]
        if sel.size == 0:
            continue
        dyn = render_batch(
            asset.field, o_c[sel], d_c[sel], cfg.dynamic_sampling,
            cfg.seed, np.asarray(ray_ids)[sel],
            near=np.maximum(bnear[sel], 1e-6),
            far=np.maximum(bfar[sel], 2e-6))
        per_field.append((asset.asset_id, sel, dyn))

    best_range = np.full(n, np.inf)
    best_intensity = np.zeros(n)
    best_src = np.full(n, "", dtype=object)
    for fid, sel, res in per_field:
        live = res["drop"] <= cfg.drop_threshold
        if cfg.low_evidence_gate:
            live &= res["weight_sum"] >= cfg.min_weight_sum
        better = live & (res["range"] < best_range[sel])
        idx = sel[better]
        best_range[idx] = res["range"][better]
        best_intensity[idx] = res["intensity"][better]
        best_src[idx] = fid
    dropped = ~np.isfinite(best_range)
    ranges = np.where(dropped, -1.0, best_range)
    return ranges, np.where(dropped, 0.0, best_intensity), dropped, best_src


def unisim_compose_ray(scene: SceneGraph, ray: Ray, t: float, n: int = 512,
                       cfg: ComposeConfig = ComposeConfig()
                       ) -> ComposedMeasurement:
    """Joint-rendering ablation: one uniform sample set over the union of
    candidate intervals, each sample queried against the field whose box
    contains it, one weight pass over the merged samples."""
    from .fields import head_forward, sh_encode
    from .rendering import alpha_from_sdf, sigmoid, weights_from_alphas

    from .rendering import _effective_interval

    sc = cfg.static_sampling
    hits = fields_hit(scene, ray, t, sc.near, sc.far)
    # union of the candidate intervals (static interval clipped as usual)
    s_near, s_far = _effective_interval(
        scene.static_field, ray.origin, ray.direction, sc)
    intervals = [(s_near, s_far)] + [(h[1], max(h[2], h[1] + 1e-6))
                                     for h in hits[1:]]
    near = min(iv[0] for iv in intervals)
    far = max(iv[1] for iv in intervals)
    if far <= near:
        return ComposedMeasurement(-1.0, 0.0, True, "")

    zeta = near + (np.arange(n) + 0.5) * (far - near) / n
    pts = ray.origin + zeta[:, None] * ray.direction

    owner = np.zeros(n, dtype=np.int64)  # 0 = static, i+1 = assets[i]
    hit_ids = {fid for fid, _, _ in hits}
    for i, asset in enumerate(scene.assets):
        if asset.asset_id not in hit_ids:
            continue
        pose = asset.pose_at(t)
        inside = asset.canonical_box.contains(pose.apply_point(pts))
        owner[inside & (owner == 0)] = i + 1

    sdf = np.empty(n)
    e = np.empty(n)
    p_d = np.empty(n)
    phi = np.empty(n)
    for slot in np.unique(owner):
        mask = owner == slot
        if slot == 0:
            fld, q_pts, q_dir = static_field, pts[mask], ray.direction
        else:
            asset = scene.assets[slot - 1]
            pose = asset.pose_at(t)
            fld = asset.field
            q_pts = pose.apply_point(pts[mask])
            q_dir = pose.apply_direction(ray.direction)
        if hasattr(fld, "ray_heads"):
            sdf[mask] = fld.sdf(q_pts)
            e_r, p_r = fld.ray_heads(
                q_pts[0] - zeta[mask][0] * q_dir, q_dir)
            e[mask] = e_r
            p_d[mask] = p_r
        else:
            s_v, geo = fld.query(q_pts)
            sdf[mask] = s_v
            e_v, p_v = head_forward(fld, geo, sh_encode(q_dir))
            e[mask] = e_v
            p_d[mask] = p_v
        phi[mask] = sigmoid(fld.sharpness * sdf[mask])

    alpha = np.zeros(n)
    alpha[:-1] = alpha_from_sdf(phi[:-1], phi[1:])
    weights, _ = weights_from_alphas(alpha)
    wsum = float(weights.sum())
    range_est = float((weights * zeta).sum())
    intensity_est = float((weights * e).sum())
    drop_est = float((weights * p_d).sum())

    dropped = drop_est > cfg.drop_threshold
    if cfg.low_evidence_gate and wsum < cfg.min_weight_sum:
        dropped = True
    if dropped:
        return ComposedMeasurement(-1.0, 0.0, True, "")
    slot = int(owner[int(np.argmax(weights))])
    src = STATIC_FIELD_ID if slot == 0 else scene.assets[slot - 1].asset_id
    return ComposedMeasurement(range_est, intensity_est, False, src)


def resimulate_scan(scene: SceneGraph, sensor: SensorConfig, t: float,
                    cfg: ComposeConfig = ComposeConfig(),
                    use_unisim: bool = False) -> Scan:
    """Compose every beam of the sensor grid at time ``t`` into a scan."""
    origins, dirs, beam_idx, az_idx = beam_grid(sensor, t)
    if use_unisim:
        n = origins.shape[0]
        ranges = np.empty(n)
        intensities = np.empty(n)
        dropped = np.empty(n, dtype=bool)
        for i in range(n):
            m = unisim_compose_ray(scene, Ray(origins[i], dirs[i]), t, cfg=cfg)
            ranges[i], intensities[i], dropped[i] = (
                m.range, m.intensity, m.dropped)
    else:
        ranges, intensities, dropped, _ = compose_rays_batch(
            scene, origins, dirs, t, cfg)
    return Scan.assemble(origins, dirs, np.where(dropped, 0.0, ranges),
                         intensities, dropped, t, beam_idx, az_idx,
                         sensor.n_beams, sensor.azimuth_count)


# ---------------------------------------------------------------------------
# editing
# ---------------------------------------------------------------------------

def remove_asset(scene: SceneGraph, asset_id: str) -> SceneGraph:
    """Scene without the named asset; everything else is shared."""
    scene.asset(asset_id)  # raises on unknown id
    kept = tuple(a for a in scene.assets if a.asset_id != asset_id)
    return replace(scene, assets=kept)


def insert_asset(scene: SceneGraph, asset: DynamicAsset,
                 new_track: PoseTrack | None = None) -> SceneGraph:
    """Add an asset, optionally re-keyed onto a new trajectory."""
    if any(a.asset_id == asset.asset_id for a in scene.assets):
        raise ValueError(f"duplicate asset id {asset.asset_id!r}")
    if new_track is not None:
        asset = replace(asset, track=new_track)
    return replace(scene, assets=scene.assets + (asset,))


def set_trajectory(scene: SceneGraph, asset_id: str,
                   new_track: PoseTrack) -> SceneGraph:
    """Replace an asset's pose track; its canonical field is untouched."""
    asset = scene.asset(asset_id)
    swapped = tuple(
        replace(a, track=new_track) if a is asset else a
        for a in scene.assets)
    return replace(scene, assets=swapped)
