"""Rigid-body poses, rays, boxes and the interpolation/intersection primitives.

Conventions used throughout the package:

* quaternions are stored as ``(w, x, y, z)`` with unit norm,
* a :class:`Pose` maps points from its source frame to its target frame via
  ``p' = R p + t``,
* box corners follow a fixed x-major sign order (see :meth:`Obb.corners`).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Aabb",
    "Obb",
    "Pose",
    "PoseTrack",
    "Ray",
    "estimate_box_transform",
    "interpolate_track",
    "obb_from_corners",
    "ray_aabb_intersect",
    "ray_obb_intersect",
    "slerp_pose",
    "transform_ray",
]

_UNIT_TOL = 1e-9

# Corner sign pattern, x-major: index bits (b2, b1, b0) map to (x, y, z) sign,
# bit set = positive half extent.
CORNER_SIGNS = np.array(
    [[-1, -1, -1], [-1, -1, 1], [-1, 1, -1], [-1, 1, 1],
     [1, -1, -1], [1, -1, 1], [1, 1, -1], [1, 1, 1]],
    dtype=np.float64,
)


def as_vec3(v) -> np.ndarray:
    """Coerce to a finite float64 vector of shape (3,)."""
    a = np.asarray(v, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"vector has non-finite components: {a}")
    return a


# ---------------------------------------------------------------------------
# quaternion helpers
# ---------------------------------------------------------------------------

def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(4)
    n = np.linalg.norm(q)
    if n == 0.0 or not np.isfinite(n):
        raise ValueError("cannot normalize zero/non-finite quaternion")
    return q / n


def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conjugate(q) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = as_vec3(axis)
    n = np.linalg.norm(axis)
    if n == 0.0:
        raise ValueError("rotation axis must be non-zero")
    half = 0.5 * float(angle)
    return np.concatenate([[np.cos(half)], np.sin(half) * axis / n])


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = quat_normalize(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_matrix(m) -> np.ndarray:
    """Shepperd's method; returns a unit quaternion with non-negative w."""
    m = np.asarray(m, dtype=np.float64)
    t = np.trace(m)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s,
             (m[1, 0] - m[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(m)))
        if i == 0:
            s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
            q = np.array(
                [(m[2, 1] - m[1, 2]) / s, 0.25 * s,
                 (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
            )
        elif i == 1:
            s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
            q = np.array(
                [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s,
                 0.25 * s, (m[1, 2] + m[2, 1]) / s]
            )
        else:
            s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
            q = np.array(
                [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
                 (m[1, 2] + m[2, 1]) / s, 0.25 * s]
            )
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def quat_rotation_angle(q) -> float:
    """Rotation angle in [0, pi] encoded by a unit quaternion."""
    w = abs(float(np.clip(q[0], -1.0, 1.0)))
    return 2.0 * float(np.arccos(w))


# ---------------------------------------------------------------------------
# core value types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Pose:
    """Rigid transform ``p' = R p + t`` (an SE(3) element)."""

    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    translation: np.ndarray  # meters

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        t = as_vec3(self.translation)
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise ValueError(f"quaternion norm {np.linalg.norm(q)} is not 1")
        q = quat_normalize(q)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)
        q.setflags(write=False)
        t.setflags(write=False)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @staticmethod
    def from_axis_angle(axis, angle: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        return Pose(quat_from_axis_angle(axis, angle), as_vec3(translation))

    @staticmethod
    def from_matrix(m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return Pose(quat_from_matrix(m[:3, :3]), m[:3, 3])

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.translation
        return m

    def apply_point(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        return p @ self.rotation_matrix().T + self.translation

    def apply_direction(self, d) -> np.ndarray:
        d = np.asarray(d, dtype=np.float64)
        return d @ self.rotation_matrix().T

    def inverse(self) -> "Pose":
        qi = quat_conjugate(self.rotation)
        return Pose(qi, -quat_to_matrix(qi) @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """Returns the transform applying ``other`` first, then ``self``."""
        q = quat_multiply(self.rotation, other.rotation)
        t = self.apply_point(other.translation)
        return Pose(quat_normalize(q), t)


@dataclass(frozen=True)
class Ray:
    """Half-line with unit direction; ranges along it are in meters."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = as_vec3(self.origin)
        d = as_vec3(self.direction)
        if abs(np.linalg.norm(d) - 1.0) > _UNIT_TOL:
            raise ValueError(f"ray direction norm {np.linalg.norm(d)} is not 1")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)
        o.setflags(write=False)
        d.setflags(write=False)

    @staticmethod
    def unit(origin, direction) -> "Ray":
        """Build a ray, normalizing ``direction``."""
        d = as_vec3(direction)
        n = np.linalg.norm(d)
        if n == 0.0:
            raise ValueError("ray direction must be non-zero")
        return Ray(as_vec3(origin), d / n)

    def point_at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned box given by its min/max corners."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = as_vec3(self.lo)
        hi = as_vec3(self.hi)
        if not np.all(hi > lo):
            raise ValueError(f"degenerate bounds lo={lo} hi={hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        lo.setflags(write=False)
        hi.setflags(write=False)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def half_extents(self) -> np.ndarray:
        return 0.5 * (self.hi - self.lo)

    def contains(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return np.all((p >= self.lo) & (p <= self.hi), axis=-1)


@dataclass(frozen=True)
class Obb:
    """Oriented box: ``pose`` maps box-frame coordinates to world."""

    pose: Pose
    half_extents: np.ndarray

    def __post_init__(self):
        h = as_vec3(self.half_extents)
        if not np.all(h > 0):
            raise ValueError(f"half extents must be strictly positive: {h}")
        object.__setattr__(self, "half_extents", h)
        h.setflags(write=False)

    @staticmethod
    def axis_aligned(center, half_extents) -> "Obb":
        return Obb(Pose(np.array([1.0, 0, 0, 0]), as_vec3(center)), half_extents)

    def corners(self) -> np.ndarray:
        """8 world-frame corners in the fixed x-major sign order."""
        local = CORNER_SIGNS * self.half_extents
        return self.pose.apply_point(local)

    def contains(self, points, tol: float = 0.0) -> np.ndarray:
        inv = self.pose.inverse()
        local = inv.apply_point(np.asarray(points, dtype=np.float64))
        return np.all(np.abs(local) <= self.half_extents + tol, axis=-1)


@dataclass(frozen=True)
class PoseTrack:
    """Keyframed poses at strictly increasing timestamps (seconds)."""

    times: np.ndarray
    poses: tuple

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64).reshape(-1)
        poses = tuple(self.poses)
        if t.size == 0:
            raise ValueError("empty pose track")
        if t.size != len(poses):
            raise ValueError("timestamps and poses length mismatch")
        if t.size > 1 and not np.all(np.diff(t) > 0):
            raise ValueError("timestamps strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "poses", poses)
        t.setflags(write=False)

    @staticmethod
    def single(pose: Pose, time: float = 0.0) -> "PoseTrack":
        return PoseTrack(np.array([time]), (pose,))

    def interpolate(self, t: float) -> Pose:
        return interpolate_track(self, t)


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def slerp_quat(q0, q1, u: float) -> np.ndarray:
    """Shortest-arc spherical interpolation between unit quaternions."""
    q0 = quat_normalize(q0)
    q1 = quat_normalize(q1)
    dot = float(np.dot(q0, q1))
    if dot < 0.0:  # double cover: take the shorter arc
        q1 = -q1
        dot = -dot
    dot = min(dot, 1.0)
    if dot > 1.0 - 1e-12:
        # nearly parallel: nlerp avoids 0/0 while staying within tolerance
        return quat_normalize((1.0 - u) * q0 + u * q1)
    theta = np.arccos(dot)
    s = np.sin(theta)
    return quat_normalize(
        (np.sin((1.0 - u) * theta) / s) * q0 + (np.sin(u * theta) / s) * q1
    )


def slerp_pose(p0: Pose, p1: Pose, u: float) -> Pose:
    """SLERP on rotation, linear interpolation on translation."""
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"interpolation parameter {u} outside [0, 1]")
    q = slerp_quat(p0.rotation, p1.rotation, u)
    t = (1.0 - u) * p0.translation + u * p1.translation
    return Pose(q, t)


def interpolate_track(track: PoseTrack, t: float) -> Pose:
    """Pose at time ``t``; clamps to the nearest endpoint outside the range."""
    times = track.times
    if t <= times[0]:
        return track.poses[0]
    if t >= times[-1]:
        return track.poses[-1]
    i = int(np.searchsorted(times, t, side="right")) - 1
    u = (t - times[i]) / (times[i + 1] - times[i])
    return slerp_pose(track.poses[i], track.poses[i + 1], float(u))


def transform_ray(T: Pose, r: Ray) -> Ray:
    """Apply a rigid transform to a ray; ranges along the ray are preserved."""
    o = T.apply_point(r.origin)
    d = T.apply_direction(r.direction)
    return Ray(o, d / np.linalg.norm(d))


def ray_aabb_intersect(origin, direction, lo, hi) -> tuple[float, float] | None:
    """Slab test against an axis-aligned box, clipped to the forward half-line.

    Accepts raw arrays so callers on hot paths can skip Ray construction.
    """
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / direction
        t0 = (np.asarray(lo) - origin) * inv
        t1 = (np.asarray(hi) - origin) * inv
    # parallel-to-slab axes: inside -> (-inf, inf), outside -> miss
    par = direction == 0.0
    if np.any(par):
        out = (origin < lo) | (origin > hi)
        if np.any(par & out):
            return None
        t0 = np.where(par, -np.inf, t0)
        t1 = np.where(par, np.inf, t1)
    near = float(np.max(np.minimum(t0, t1)))
    far = float(np.min(np.maximum(t0, t1)))
    near = max(near, 0.0)
    if near > far:
        return None
    return near, far


def ray_obb_intersect(r: Ray, b: Obb) -> tuple[float, float] | None:
    """Intersection interval of ``r`` with ``b``, or ``None`` on a miss."""
    inv = b.pose.inverse()
    o = inv.apply_point(r.origin)
    d = inv.apply_direction(r.direction)
    return ray_aabb_intersect(o, d, -b.half_extents, b.half_extents)


def estimate_box_transform(corners_t, corners_canonical) -> Pose:
    """Least-squares rigid transform mapping ``corners_t`` onto
    ``corners_canonical`` (Kabsch over the 8 ordered correspondences)."""
    a = np.asarray(corners_t, dtype=np.float64).reshape(8, 3)
    b = np.asarray(corners_canonical, dtype=np.float64).reshape(8, 3)
    ca = a.mean(axis=0)
    cb = b.mean(axis=0)
    h = (a - ca).T @ (b - cb)
    u, s, vt = np.linalg.svd(h)
    if s[-1] < 1e-9 * max(s[0], 1e-30):
        raise ValueError("degenerate corner configuration (rank-deficient)")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return Pose(quat_from_matrix(rot), cb - rot @ ca)


def obb_from_corners(corners) -> Obb:
    """Recover an oriented box from 8 corners in the fixed corner order."""
    c = np.asarray(corners, dtype=np.float64).reshape(8, 3)
    center = c.mean(axis=0)
    # edge vectors along each local axis from the sign pattern
    axes = []
    half = np.empty(3)
    for axis, bit in enumerate((4, 2, 1)):
        pos = c[[i for i in range(8) if i & bit]].mean(axis=0)
        neg = c[[i for i in range(8) if not i & bit]].mean(axis=0)
        v = 0.5 * (pos - neg)
        half[axis] = np.linalg.norm(v)
        if half[axis] <= 0:
            raise ValueError("degenerate box corners")
        axes.append(v / half[axis])
    rot = np.stack(axes, axis=1)
    if abs(np.linalg.det(rot) - 1.0) > 1e-6:
        raise ValueError("corner set is not a rigid box in the fixed order")
    return Obb(Pose(quat_from_matrix(rot), center), half)
