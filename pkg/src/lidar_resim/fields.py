"""Scene field representations.

Two families implement the same query surface:

* analytic primitives (:class:`Sphere`, :class:`Plane`, :class:`AxisBox`,
  :class:`Union`) give exact signed distances and closed-form ray casts, and
  serve as ground-truth oracles;
* :class:`GridField` is the trainable representation: a dense voxel grid of
  signed distances plus feature channels, decoded by small sigmoid heads for
  intensity and ray-drop probability.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import _kernels
from .geometry import Aabb, as_vec3
from .oracle import DEFAULT_INTENSITY_CALIBRATION, intensity_model

__all__ = [
    "AnalyticField",
    "AxisBox",
    "FieldQueryResult",
    "GridField",
    "Plane",
    "Sphere",
    "Union",
    "analytic_heads",
    "head_forward",
    "numerical_gradient",
    "sh_encode",
    "trilinear",
    "trilinear_weights",
]


@dataclass(frozen=True)
class FieldQueryResult:
    """Signed distance plus the per-point geometric feature vector."""

    sdf: float
    geo_feature: np.ndarray


# ---------------------------------------------------------------------------
# analytic primitives
# ---------------------------------------------------------------------------

_HIT_EPS = 1e-9


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float
    reflectance: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "center", as_vec3(self.center))
        if self.radius <= 0:
            raise ValueError("sphere radius must be positive")
        if not 0.0 <= self.reflectance <= 1.0:
            raise ValueError("reflectance outside [0, 1]")

    def sdf(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return np.linalg.norm(p - self.center, axis=-1) - self.radius

    def ray_cast(self, origin, direction):
        oc = np.asarray(origin, dtype=np.float64) - self.center
        d = np.asarray(direction, dtype=np.float64)
        b = float(oc @ d)
        c = float(oc @ oc) - self.radius**2
        disc = b * b - c
        if disc < 0.0:
            return None
        root = np.sqrt(disc)
        t = -b - root
        if t <= _HIT_EPS:
            t = -b + root
        if t <= _HIT_EPS:
            return None
        p = np.asarray(origin) + t * d
        n = (p - self.center) / np.linalg.norm(p - self.center)
        return t, n, self.reflectance


@dataclass(frozen=True)
class Plane:
    """Half-space boundary: sdf(x) = normal . x - offset."""

    normal: np.ndarray
    offset: float
    reflectance: float = 1.0

    def __post_init__(self):
        n = as_vec3(self.normal)
        nn = np.linalg.norm(n)
        if abs(nn - 1.0) > 1e-9:
            raise ValueError("plane normal must be unit length")
        object.__setattr__(self, "normal", n / nn)
        if not 0.0 <= self.reflectance <= 1.0:
            raise ValueError("reflectance outside [0, 1]")

    def sdf(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.normal - self.offset

    def ray_cast(self, origin, direction):
        o = np.asarray(origin, dtype=np.float64)
        d = np.asarray(direction, dtype=np.float64)
        denom = float(d @ self.normal)
        if abs(denom) < 1e-15:
            return None
        t = (self.offset - float(o @ self.normal)) / denom
        if t <= _HIT_EPS:
            return None
        return t, np.array(self.normal), self.reflectance


@dataclass(frozen=True)
class AxisBox:
    center: np.ndarray
    half_extents: np.ndarray
    reflectance: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "center", as_vec3(self.center))
        h = as_vec3(self.half_extents)
        if not np.all(h > 0):
            raise ValueError("box half extents must be strictly positive")
        object.__setattr__(self, "half_extents", h)
        if not 0.0 <= self.reflectance <= 1.0:
            raise ValueError("reflectance outside [0, 1]")

    def sdf(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        q = np.abs(p - self.center) - self.half_extents
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside

    def ray_cast(self, origin, direction):
        o = np.asarray(origin, dtype=np.float64) - self.center
        d = np.asarray(direction, dtype=np.float64)
        with np.errstate(divide="ignore"):
            inv = np.where(d != 0.0, 1.0 / d, np.inf)
        t0 = (-self.half_extents - o) * inv
        t1 = (self.half_extents - o) * inv
        tmin = np.minimum(t0, t1)
        tmax = np.maximum(t0, t1)
        near = float(np.max(tmin))
        far = float(np.min(tmax))
        if near > far or far <= _HIT_EPS:
            return None
        if near > _HIT_EPS:
            t, axis = near, int(np.argmax(tmin))
            sign = -np.sign(d[axis])
        else:  # origin inside: first surface crossing is the exit face
            t, axis = far, int(np.argmin(tmax))
            sign = np.sign(d[axis])
        n = np.zeros(3)
        n[axis] = sign
        return t, n, self.reflectance


@dataclass(frozen=True)
class Union:
    children: tuple

    def __post_init__(self):
        kids = tuple(self.children)
        if not kids:
            raise ValueError("union needs at least one child")
        object.__setattr__(self, "children", kids)

    def sdf(self, points) -> np.ndarray:
        return np.minimum.reduce([c.sdf(points) for c in self.children])

    def ray_cast(self, origin, direction):
        best = None
        for child in self.children:
            hit = child.ray_cast(origin, direction)
            if hit is not None and (best is None or hit[0] < best[0]):
                best = hit
        return best


def analytic_heads(shape, x, d, max_range: float = 120.0,
                   calibration: float = DEFAULT_INTENSITY_CALIBRATION):
    """Intensity / drop outputs for an analytic field, by exact ray casting.

    ``x`` is the cast origin and ``d`` the (unit) ray direction.  Intensity is
    the physical return power at the nearest surface along the ray; the drop
    output is 0 when a surface is hit within ``max_range`` and 1 otherwise.
    """
    hit = shape.ray_cast(x, d)
    if hit is None or hit[0] > max_range:
        return 0.0, 1.0
    zeta, normal, rho = hit
    cos_theta = max(0.0, -float(np.dot(d, normal)))
    return intensity_model(rho, cos_theta, zeta, calibration), 0.0


@dataclass(frozen=True)
class AnalyticField:
    """Adapter making an analytic shape renderable next to grid fields."""

    shape: object
    sharpness: float = 400.0
    max_range: float = 120.0
    calibration: float = DEFAULT_INTENSITY_CALIBRATION
    bounds = None
    feature_dim: int = 0

    def sdf(self, points) -> np.ndarray:
        return self.shape.sdf(points)

    def query(self, points):
        s = self.shape.sdf(points)
        return s, np.zeros(s.shape + (0,))

    def ray_heads(self, origin, direction):
        return analytic_heads(self.shape, origin, direction,
                              self.max_range, self.calibration)

    def ray_heads_batch(self, origins, dirs):
        from .oracle import _cast_shapes_batch

        origins = np.asarray(origins, dtype=np.float64)
        dirs = np.asarray(dirs, dtype=np.float64)
        t, n, rho = _cast_shapes_batch([self.shape], origins, dirs)
        hit = np.isfinite(t) & (t <= self.max_range)
        cos_theta = np.maximum(0.0, -np.einsum("ij,ij->i", dirs, n))
        e = intensity_model(rho, cos_theta, np.where(hit, t, 1.0),
                            self.calibration)
        return np.where(hit, e, 0.0), np.where(hit, 0.0, 1.0)


# ---------------------------------------------------------------------------
# trilinear interpolation
# ---------------------------------------------------------------------------

def trilinear_weights(uvw) -> np.ndarray:
    """Blend weights for the 8 cell corners in x-major bit order.

    Corner index bits (4, 2, 1) select the +side along (x, y, z); weights are
    non-negative and sum to 1.
    """
    f = np.asarray(uvw, dtype=np.float64)
    u, v, w = f[..., 0], f[..., 1], f[..., 2]
    nu, nv, nw = 1.0 - u, 1.0 - v, 1.0 - w
    return np.stack(
        [nu * nv * nw, nu * nv * w, nu * v * nw, nu * v * w,
         u * nv * nw, u * nv * w, u * v * nw, u * v * w],
        axis=-1,
    )


def trilinear(corner_values, uvw):
    """Blend 8 corner values at local coords in [0,1]^3.

    Returns ``(value, weights)``; the weights are reused by backpropagation.
    """
    c = np.asarray(corner_values, dtype=np.float64)
    w = trilinear_weights(uvw)
    return (c * w).sum(axis=-1), w


# ---------------------------------------------------------------------------
# spherical harmonics direction encoding
# ---------------------------------------------------------------------------

_SH_C0 = 0.28209479177387814  # 1 / (2 sqrt(pi))
_SH_C1 = 0.4886025119029199
_SH_C2 = (1.0925484305920792, 1.0925484305920792, 0.31539156525252005,
          1.0925484305920792, 0.5462742152960396)
_SH_C3 = (0.5900435899266435, 2.890611442640554, 0.4570457994644658,
          0.3731763325901154, 0.4570457994644658, 1.445305721320277,
          0.5900435899266435)


def sh_encode(d) -> np.ndarray:
    """First 16 real spherical harmonics (degrees 0..3) of a unit direction.

    Coefficients are ordered lexicographically in (degree, order).
    """
    v = np.asarray(d, dtype=np.float64)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    out = np.empty(v.shape[:-1] + (16,), dtype=np.float64)
    out[..., 0] = _SH_C0
    out[..., 1] = _SH_C1 * y
    out[..., 2] = _SH_C1 * z
    out[..., 3] = _SH_C1 * x
    out[..., 4] = _SH_C2[0] * x * y
    out[..., 5] = _SH_C2[1] * y * z
    out[..., 6] = _SH_C2[2] * (3.0 * zz - 1.0)
    out[..., 7] = _SH_C2[3] * x * z
    out[..., 8] = _SH_C2[4] * (xx - yy)
    out[..., 9] = _SH_C3[0] * y * (3.0 * xx - yy)
    out[..., 10] = _SH_C3[1] * x * y * z
    out[..., 11] = _SH_C3[2] * y * (5.0 * zz - 1.0)
    out[..., 12] = _SH_C3[3] * z * (5.0 * zz - 3.0)
    out[..., 13] = _SH_C3[4] * x * (5.0 * zz - 1.0)
    out[..., 14] = _SH_C3[5] * z * (xx - yy)
    out[..., 15] = _SH_C3[6] * x * (xx - 3.0 * yy)
    return out


# ---------------------------------------------------------------------------
# trainable grid field
# ---------------------------------------------------------------------------

class GridField:
    """Dense trainable voxel field with intensity / ray-drop heads.

    Values live on grid nodes; queries interpolate trilinearly.  Points
    outside the bounds get the distance to the bounds box added to the value
    at the clamped boundary point, so space beyond the trained volume is
    always free.
    """

    def __init__(self, bounds: Aabb, resolution, feature_dim: int = 8,
                 hidden_dim: int = 32, init_sharpness: float = 10.0,
                 seed: int = 0, dtype=np.float64):
        res = tuple(int(n) for n in resolution)
        if len(res) != 3 or any(n < 2 for n in res):
            raise ValueError(f"resolution must be three values >= 2, got {res}")
        self.bounds = bounds
        self.resolution = res
        self.feature_dim = int(feature_dim)
        self.hidden_dim = int(hidden_dim)
        self.dtype = np.dtype(dtype)
        self.seed = int(seed)

        nx, ny, nz = res
        lo, hi = bounds.lo, bounds.hi
        self._cell = (hi - lo) / (np.array(res) - 1.0)

        # geometric init: signed distance to a centered sphere
        axes = [np.linspace(lo[a], hi[a], res[a]) for a in range(3)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        nodes = np.stack([gx, gy, gz], axis=-1)
        r0 = 0.8 * float(np.min(bounds.half_extents))
        dist = np.linalg.norm(nodes - bounds.center, axis=-1) - r0
        self.sdf_values = dist.astype(self.dtype)
        self.feature_values = np.zeros((nx, ny, nz, self.feature_dim), self.dtype)

        rng = np.random.default_rng(seed)
        din = self.feature_dim + 16
        self.w1 = rng.uniform(-0.1, 0.1, (din, self.hidden_dim)).astype(self.dtype)
        self.b1 = np.zeros(self.hidden_dim, self.dtype)
        self.w2 = rng.uniform(-0.1, 0.1, (self.hidden_dim, 2)).astype(self.dtype)
        self.b2 = np.zeros(2, self.dtype)
        self.sharpness_param = np.array(np.log(init_sharpness), self.dtype)

    @property
    def sharpness(self) -> float:
        return float(np.exp(self.sharpness_param))

    def parameters(self) -> dict:
        return {
            "sdf_values": self.sdf_values,
            "feature_values": self.feature_values,
            "w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2,
            "sharpness_param": self.sharpness_param,
        }

    def set_parameters(self, params: dict):
        for name, value in params.items():
            cur = getattr(self, name)
            arr = np.asarray(value, dtype=self.dtype)
            if np.shape(arr) != np.shape(cur):
                raise ValueError(f"parameter {name} shape mismatch")
            setattr(self, name, arr if arr.ndim else np.array(arr, self.dtype))

    # -- interpolation kernel -------------------------------------------------

    def sdf_flat64(self) -> np.ndarray:
        return np.ascontiguousarray(self.sdf_values.reshape(-1),
                                    dtype=np.float64)

    def features_flat64(self) -> np.ndarray:
        return np.ascontiguousarray(
            self.feature_values.reshape(-1, self.feature_dim),
            dtype=np.float64)

    def interp_data(self, points):
        """Corner gather data for ``points``: flat node indices (N, 8),
        trilinear weights (N, 8), and the out-of-bounds distance (N,)."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return _kernels.interp_full(p, self.bounds.lo, self.bounds.hi,
                                    self._cell, self.resolution)

    def sdf(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        out = _kernels.sdf_only(p.reshape(-1, 3), self.bounds.lo,
                                self.bounds.hi, self._cell, self.resolution,
                                self.sdf_flat64())
        return out.reshape(p.shape[:-1])

    def query(self, points):
        """Signed distance and geometric features at ``points``."""
        p = np.asarray(points, dtype=np.float64)
        corners, w, outside = self.interp_data(p)
        sdf = _kernels.gather1(self.sdf_flat64(), corners, w) + outside
        geo = _kernels.gather_feat(self.features_flat64(), corners, w)
        shape = p.shape[:-1]
        return sdf.reshape(shape), geo.reshape(shape + (self.feature_dim,))

    def query_point(self, point) -> FieldQueryResult:
        s, g = self.query(np.asarray(point, dtype=np.float64)[None, :])
        return FieldQueryResult(float(s[0]), g[0])


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------

def _sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def head_forward_full(field: GridField, geo_feature, dir_encoding):
    """Head evaluation keeping intermediates for backpropagation."""
    geo = np.asarray(geo_feature, dtype=np.float64)
    enc = np.asarray(dir_encoding, dtype=np.float64)
    if geo.shape[-1] != field.feature_dim:
        raise ValueError(
            f"geo feature dim {geo.shape[-1]} != field dim {field.feature_dim}")
    if enc.shape[-1] != 16:
        raise ValueError(f"direction encoding dim {enc.shape[-1]} != 16")
    shape = geo.shape[:-1]
    g = field.feature_dim
    x = np.empty(shape + (g + 16,), np.float64)
    x[..., :g] = geo
    x[..., g:] = enc  # broadcasts over leading axes
    x2 = x.reshape(-1, g + 16)
    z1 = x2 @ np.asarray(field.w1, np.float64)
    z1 += np.asarray(field.b1, np.float64)
    h = np.maximum(z1, 0.0)
    z2 = h @ np.asarray(field.w2, np.float64)
    z2 += np.asarray(field.b2, np.float64)
    e = _sigmoid(z2[:, 0]).reshape(shape)
    p_d = _sigmoid(z2[:, 1]).reshape(shape)
    cache = {"x": x2, "z1": z1, "h": h, "e": e, "p_d": p_d}
    return e, p_d, cache


def head_forward(field: GridField, geo_feature, dir_encoding):
    """Intensity and drop probability from the concatenated ray feature."""
    e, p_d, _ = head_forward_full(field, geo_feature, dir_encoding)
    return e, p_d


def numerical_gradient(field, x, eps: float = 1e-3) -> np.ndarray:
    """Central-difference SDF gradient, one +/- probe pair per axis."""
    p = np.asarray(x, dtype=np.float64)
    single = p.ndim == 1
    pts = p.reshape(-1, 3)
    offsets = np.zeros((6, 3))
    offsets[0, 0] = offsets[2, 1] = offsets[4, 2] = eps
    offsets[1, 0] = offsets[3, 1] = offsets[5, 2] = -eps
    probes = pts[:, None, :] + offsets[None, :, :]
    vals = field.sdf(probes.reshape(-1, 3)).reshape(-1, 6)
    grad = np.stack(
        [(vals[:, 0] - vals[:, 1]), (vals[:, 2] - vals[:, 3]),
         (vals[:, 4] - vals[:, 5])], axis=-1) / (2.0 * eps)
    return grad[0] if single else grad.reshape(p.shape)
