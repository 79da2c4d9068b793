"""Volume rendering of a single ray against a single SDF field.

The range/intensity/drop estimate along a ray is an expectation under
per-sample weights derived from the field's signed distance: a sigmoid of the
SDF gives a two-way visibility term, consecutive samples give per-segment
opacities, and a transmittance product accumulates occlusion.  Sampling is
hierarchical: stratified-uniform, then several inverse-CDF refinement rounds
concentrated where the current weights live.

All randomness comes from a counter-based generator keyed by
``(seed, ray_id, stream)`` so results are reproducible under any scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import Ray, ray_aabb_intersect

__all__ = [
    "RayRenderResult",
    "SampleSet",
    "SamplingConfig",
    "alpha_from_sdf",
    "counter_uniforms",
    "hierarchical_sample",
    "render_ray",
    "sample_pdf",
    "segment_power_closed_form",
    "sigmoid",
    "weights_from_alphas",
]


# ---------------------------------------------------------------------------
# counter-based RNG (splitmix64 finalizer)
# ---------------------------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix64(x):
    with np.errstate(over="ignore"):
        z = (np.asarray(x, dtype=np.uint64) + _GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def counter_uniforms(seed: int, ray_ids, stream: int, n: int) -> np.ndarray:
    """Deterministic uniforms in [0, 1): shape (len(ray_ids), n).

    Independent of call order and batch composition: each value depends only
    on (seed, ray_id, stream, column).
    """
    ids = np.atleast_1d(np.asarray(ray_ids)).astype(np.uint64)
    base = _mix64(_mix64(np.uint64(seed)) ^ ids)
    key = _mix64(base ^ _mix64(np.uint64(np.int64(stream))))
    words = _mix64(key[:, None] + np.arange(n, dtype=np.uint64)[None, :] * _GOLDEN)
    return (words >> np.uint64(11)).astype(np.float64) * (2.0**-53)


# ---------------------------------------------------------------------------
# configuration / results
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SamplingConfig:
    """Per-ray sample budget and interval.

    Defaults match the full-budget profile for large static fields; use
    :meth:`dynamic_default` for object-sized fields.
    """

    n_uniform: int = 256
    n_importance: int = 256
    n_upsample_steps: int = 8
    near: float = 0.5
    far: float = 120.0
    normalize: bool = False          # divide estimates by the weight sum
    clip_to_bounds: bool = True      # narrow [near, far] to the field bounds
    dedup_tol: float = 1e-6

    def __post_init__(self):
        if self.near >= self.far:
            raise ValueError("near must be < far")
        if self.n_uniform < 1:
            raise ValueError("need at least one uniform sample")
        if self.n_importance > 0:
            if self.n_upsample_steps < 1:
                raise ValueError("importance sampling needs >= 1 round")
            if self.n_importance % self.n_upsample_steps != 0:
                raise ValueError(
                    "n_importance must be divisible by n_upsample_steps")

    @staticmethod
    def static_default() -> "SamplingConfig":
        return SamplingConfig(256, 256, 8, 0.5, 120.0)

    @staticmethod
    def dynamic_default() -> "SamplingConfig":
        return SamplingConfig(64, 64, 4, 0.5, 120.0)

    def scaled(self, n_uniform: int, n_importance: int,
               n_upsample_steps: int) -> "SamplingConfig":
        return replace(self, n_uniform=n_uniform, n_importance=n_importance,
                       n_upsample_steps=n_upsample_steps)


@dataclass(frozen=True)
class SampleSet:
    """Ordered samples along one ray with their rendering weights."""

    zeta: np.ndarray       # (S,) strictly increasing ranges, m
    positions: np.ndarray  # (S, 3)
    sdf: np.ndarray        # (S,)
    phi: np.ndarray        # (S,) sigmoid(sharpness * sdf)
    alpha: np.ndarray      # (S,) per-segment opacity, last entry 0
    weights: np.ndarray    # (S,)
    trans_sq: np.ndarray   # (S,) two-way transmittance before each segment

    def __post_init__(self):
        if self.zeta.size > 1 and not np.all(np.diff(self.zeta) > 0):
            raise ValueError("sample ranges must be strictly increasing")
        if np.any(self.alpha < 0) or np.any(self.alpha > 0.5 + 1e-12):
            raise ValueError("segment opacity outside [0, 0.5]")
        if np.any(self.weights < 0) or self.weights.sum() > 1.0 + 1e-6:
            raise ValueError("invalid rendering weights")


@dataclass(frozen=True)
class RayRenderResult:
    range_est: float
    intensity_est: float
    drop_est: float
    weight_sum: float
    samples: SampleSet


# ---------------------------------------------------------------------------
# opacity / weights
# ---------------------------------------------------------------------------

def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def alpha_from_sdf(phi_j, phi_j1):
    """Per-segment opacity from consecutive sigmoid-SDF values:
    (phi_j^2 - phi_j1^2) / (2 phi_j^2), clamped at zero.

    Evaluated through the ratio phi_j1/phi_j so tiny sigmoid values do not
    underflow when squared; always <= 0.5 because the two-way visibility
    term squares the sigmoid.
    """
    phi_j = np.asarray(phi_j, dtype=np.float64)
    phi_j1 = np.asarray(phi_j1, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        ratio = np.where(phi_j > 0.0, phi_j1 / np.where(phi_j > 0.0, phi_j, 1.0), 1.0)
        a = 0.5 * (1.0 - ratio * ratio)
    return np.maximum(np.where(np.isfinite(a), a, 0.0), 0.0)


def weights_from_alphas(alphas):
    """Weights and two-way transmittance from per-segment opacities.

    ``trans_sq[j]`` is the product of (1 - 2 alpha) over all earlier
    segments; ``w[j] = 2 alpha[j] * trans_sq[j]``.  Works on (..., S) arrays.
    """
    a = np.asarray(alphas, dtype=np.float64)
    keep = np.maximum(1.0 - 2.0 * a, 0.0)
    t2 = np.cumprod(keep, axis=-1)
    t2 = np.concatenate(
        [np.ones(a.shape[:-1] + (1,)), t2[..., :-1]], axis=-1)
    return 2.0 * a * t2, t2


def segment_power_closed_form(f_a: float, f_b: float, s: float,
                              rho_a: float) -> float:
    """Radiant power returned from a constant-reflectance ray segment.

    Closed form of the two-way transmittance integral for an SDF running
    from ``f_a`` at the segment start to ``f_b`` at its end.
    """
    phi_a = float(sigmoid(np.float64(s * f_a)))
    phi_b = float(sigmoid(np.float64(s * f_b)))
    return float(alpha_from_sdf(phi_a, phi_b)) * rho_a


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def sample_pdf(edges, weights, u):
    """Inverse-CDF draws from a piecewise-constant PDF over ``edges``.

    ``u`` holds quantiles in [0, 1).  Falls back to uniform over the full
    interval when the weights vanish.
    """
    edges = np.asarray(edges, dtype=np.float64)
    w = np.maximum(np.asarray(weights, dtype=np.float64), 0.0)
    u = np.asarray(u, dtype=np.float64)
    total = w.sum()
    if total <= 1e-12:
        return edges[0] + u * (edges[-1] - edges[0])
    cdf = np.concatenate([[0.0], np.cumsum(w / total)])
    cdf[-1] = 1.0
    i = np.clip(np.searchsorted(cdf, u, side="right") - 1, 0, w.size - 1)
    span = cdf[i + 1] - cdf[i]
    frac = np.where(span > 0, (u - cdf[i]) / np.where(span > 0, span, 1.0), 0.0)
    return edges[i] + frac * (edges[i + 1] - edges[i])


def _effective_interval(field, origin, direction, cfg: SamplingConfig):
    """Sampling interval for one ray, optionally clipped to field bounds."""
    near, far = cfg.near, cfg.far
    bounds = getattr(field, "bounds", None)
    if cfg.clip_to_bounds and bounds is not None:
        hit = ray_aabb_intersect(origin, direction, bounds.lo, bounds.hi)
        if hit is not None:
            near = max(near, hit[0])
            far = min(far, hit[1])
            if near >= far:
                near, far = cfg.near, cfg.far
    return near, far


def _stratified(near, far, n, u):
    """One jittered sample per equal sub-interval of [near, far]."""
    width = (far - near) / n
    return near + (np.arange(n) + u) * width


def hierarchical_sample(field, ray: Ray, cfg: SamplingConfig,
                        seed: int = 0, ray_id: int = 0) -> SampleSet:
    """Stratified-uniform plus importance-refined samples along ``ray``."""
    near, far = _effective_interval(field, ray.origin, ray.direction, cfg)
    s = field.sharpness
    u0 = counter_uniforms(seed, [ray_id], 0, cfg.n_uniform)[0]
    zeta = _stratified(near, far, cfg.n_uniform, u0)

    if cfg.n_importance > 0:
        per_round = cfg.n_importance // cfg.n_upsample_steps
        for rnd in range(cfg.n_upsample_steps):
            sdf = field.sdf(ray.origin + zeta[:, None] * ray.direction)
            phi = sigmoid(s * sdf)
            alpha = alpha_from_sdf(phi[:-1], phi[1:])
            w, _ = weights_from_alphas(alpha)
            u = counter_uniforms(seed, [ray_id], 1 + rnd, per_round)[0]
            new = sample_pdf(zeta, w, u)
            zeta = np.sort(np.concatenate([zeta, new]))

    # merge duplicates closer than the tolerance
    if zeta.size > 1:
        keep = np.concatenate([[True], np.diff(zeta) > cfg.dedup_tol])
        zeta = zeta[keep]

    positions = ray.origin + zeta[:, None] * ray.direction
    sdf = field.sdf(positions)
    phi = sigmoid(s * sdf)
    alpha = np.zeros_like(zeta)
    if zeta.size > 1:
        alpha[:-1] = alpha_from_sdf(phi[:-1], phi[1:])
    weights, trans_sq = weights_from_alphas(alpha)
    return SampleSet(zeta, positions, sdf, phi, alpha, weights, trans_sq)


def render_ray(field, ray: Ray, cfg: SamplingConfig,
               seed: int = 0, ray_id: int = 0) -> RayRenderResult:
    """Expected range / intensity / drop probability along one ray."""
    samples = hierarchical_sample(field, ray, cfg, seed, ray_id)
    w = samples.weights
    weight_sum = float(w.sum())
    range_est = float((w * samples.zeta).sum())

    if hasattr(field, "ray_heads"):
        e_ray, p_ray = field.ray_heads(ray.origin, ray.direction)
        intensity_est = weight_sum * float(e_ray)
        drop_est = weight_sum * float(p_ray)
    else:
        from .fields import head_forward, sh_encode

        _, geo = field.query(samples.positions)
        enc = sh_encode(ray.direction)
        e, p_d = head_forward(field, geo, enc)
        intensity_est = float((w * e).sum())
        drop_est = float((w * p_d).sum())

    if cfg.normalize and weight_sum > 1e-12:
        range_est /= weight_sum
        intensity_est /= weight_sum
        drop_est /= weight_sum
    return RayRenderResult(range_est, intensity_est, drop_est, weight_sum,
                           samples)


# ---------------------------------------------------------------------------
# batched path (shared by composition, re-simulation and training)
# ---------------------------------------------------------------------------

def intervals_batch(field, origins, dirs, cfg: SamplingConfig):
    """Vectorized per-ray sampling intervals (bounds clip, forward only)."""
    b = origins.shape[0]
    near = np.full(b, cfg.near)
    far = np.full(b, cfg.far)
    bounds = getattr(field, "bounds", None)
    if cfg.clip_to_bounds and bounds is not None:
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = np.where(dirs != 0.0, 1.0 / dirs, np.inf)
        t0 = (bounds.lo - origins) * inv
        t1 = (bounds.hi - origins) * inv
        lo = np.where(np.isfinite(t0) | np.isfinite(t1),
                      np.minimum(t0, t1), -np.inf)
        hi = np.where(np.isfinite(t0) | np.isfinite(t1),
                      np.maximum(t0, t1), np.inf)
        bnear = np.maximum(lo.max(axis=1), 0.0)
        bfar = hi.min(axis=1)
        ok = bnear <= bfar
        cnear = np.maximum(near, bnear)
        cfar = np.minimum(far, bfar)
        ok &= cnear < cfar
        near = np.where(ok, cnear, near)
        far = np.where(ok, cfar, far)
    return near, far


def sample_batch(field, origins, dirs, cfg: SamplingConfig, seed: int,
                 ray_ids, near=None, far=None) -> np.ndarray:
    """Hierarchically sampled ranges for a batch of rays, shape (B, S).

    Duplicate ranges are kept (they form zero-width segments with zero
    weight), so S is the same for every ray.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    b = origins.shape[0]
    if near is None or far is None:
        near, far = intervals_batch(field, origins, dirs, cfg)
    near = np.asarray(near, dtype=np.float64)
    far = np.asarray(far, dtype=np.float64)
    s = field.sharpness

    u0 = counter_uniforms(seed, ray_ids, 0, cfg.n_uniform)
    width = ((far - near) / cfg.n_uniform)[:, None]
    zeta = near[:, None] + (np.arange(cfg.n_uniform)[None, :] + u0) * width

    if cfg.n_importance > 0:
        per_round = cfg.n_importance // cfg.n_upsample_steps
        for rnd in range(cfg.n_upsample_steps):
            pos = origins[:, None, :] + zeta[..., None] * dirs[:, None, :]
            sdf = field.sdf(pos.reshape(-1, 3)).reshape(zeta.shape)
            phi = sigmoid(s * sdf)
            alpha = alpha_from_sdf(phi[:, :-1], phi[:, 1:])
            w, _ = weights_from_alphas(alpha)
            u = counter_uniforms(seed, ray_ids, 1 + rnd, per_round)
            new = _sample_pdf_batch(zeta, w, u, near, far)
            zeta = np.sort(np.concatenate([zeta, new], axis=1), axis=1)
    return zeta


def _sample_pdf_batch(edges, weights, u, near, far):
    """Row-wise inverse-CDF sampling; rows with no weight fall back to
    uniform over [near, far]."""
    b, m = weights.shape
    total = weights.sum(axis=1)
    degenerate = total <= 1e-12
    safe_total = np.where(degenerate, 1.0, total)
    cdf = np.concatenate(
        [np.zeros((b, 1)), np.cumsum(weights / safe_total[:, None], axis=1)],
        axis=1)
    cdf[:, -1] = 1.0
    # row-wise searchsorted
    i = (cdf[:, None, :-1] <= u[:, :, None]).sum(axis=2) - 1
    i = np.clip(i, 0, m - 1)
    lo = np.take_along_axis(cdf, i, axis=1)
    hi = np.take_along_axis(cdf, i + 1, axis=1)
    span = hi - lo
    frac = np.where(span > 0, (u - lo) / np.where(span > 0, span, 1.0), 0.0)
    e_lo = np.take_along_axis(edges, i, axis=1)
    e_hi = np.take_along_axis(edges, np.minimum(i + 1, edges.shape[1] - 1),
                              axis=1)
    out = e_lo + frac * (e_hi - e_lo)
    if np.any(degenerate):
        uni = near[:, None] + u * (far - near)[:, None]
        out = np.where(degenerate[:, None], uni, out)
    return out


def render_batch(field, origins, dirs, cfg: SamplingConfig, seed: int,
                 ray_ids, near=None, far=None) -> dict:
    """Batch render; returns per-ray estimates plus the sample arrays."""
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    zeta = sample_batch(field, origins, dirs, cfg, seed, ray_ids, near, far)
    s = field.sharpness
    pos = origins[:, None, :] + zeta[..., None] * dirs[:, None, :]

    if hasattr(field, "ray_heads_batch"):
        sdf = field.sdf(pos.reshape(-1, 3)).reshape(zeta.shape)
        e_ray, p_ray = field.ray_heads_batch(origins, dirs)
        e = np.broadcast_to(e_ray[:, None], zeta.shape)
        p_d = np.broadcast_to(p_ray[:, None], zeta.shape)
    else:
        from .fields import head_forward, sh_encode

        sdf, geo = field.query(pos.reshape(-1, 3))
        sdf = sdf.reshape(zeta.shape)
        geo = geo.reshape(zeta.shape + (field.feature_dim,))
        enc = sh_encode(dirs)[:, None, :]
        e, p_d = head_forward(field, geo, np.broadcast_to(
            enc, zeta.shape + (16,)))

    phi = sigmoid(s * sdf)
    alpha = np.zeros_like(zeta)
    alpha[:, :-1] = alpha_from_sdf(phi[:, :-1], phi[:, 1:])
    weights, trans_sq = weights_from_alphas(alpha)

    weight_sum = weights.sum(axis=1)
    range_est = (weights * zeta).sum(axis=1)
    intensity_est = (weights * e).sum(axis=1)
    drop_est = (weights * p_d).sum(axis=1)
    if cfg.normalize:
        safe = np.maximum(weight_sum, 1e-12)
        range_est = range_est / safe
        intensity_est = intensity_est / safe
        drop_est = drop_est / safe
    return {
        "range": range_est, "intensity": intensity_est, "drop": drop_est,
        "weight_sum": weight_sum, "zeta": zeta, "weights": weights,
        "trans_sq": trans_sq, "sdf": sdf, "phi": phi, "alpha": alpha,
    }
