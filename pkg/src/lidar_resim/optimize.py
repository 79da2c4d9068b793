"""Fitting grid fields to scans by gradient descent.

The forward pass renders ray batches exactly like inference does (sample
positions are treated as constants); the backward pass is hand-derived
reverse-mode differentiation through the trilinear interpolation, the
sigmoid-SDF opacities, the transmittance product, the heads and all five
loss terms, with respect to every grid/head parameter and the sharpness
scalar.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import _kernels
from .fields import GridField, head_forward_full, sh_encode
from .geometry import Obb, PoseTrack, interpolate_track
from .rendering import (SamplingConfig, alpha_from_sdf, counter_uniforms,
                        sample_batch, sigmoid, weights_from_alphas)

__all__ = [
    "LossWeights",
    "RayBatch",
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "backward",
    "build_dynamic_batch",
    "build_static_batch",
    "forward",
    "loss_eikonal",
    "loss_intensity",
    "loss_range",
    "loss_raydrop",
    "loss_surface_sdf",
    "lovasz_hinge",
    "total_loss",
    "train_field",
]

BCE_CLAMP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    w_range: float = 3.0
    w_intensity: float = 50.0
    w_drop: float = 0.15
    w_surface: float = 1.0
    w_eikonal: float = 0.3

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int
    batch_size: int = 4096
    lr_start: float = 0.005
    lr_end: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    eikonal_eps: float = 1e-3
    seed: int = 0
    log_every: int = 1

    def __post_init__(self):
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("need lr_start >= lr_end > 0")

    def lr_at(self, iteration: int) -> float:
        if self.iterations <= 1:
            return self.lr_start
        u = iteration / (self.iterations - 1)
        return self.lr_start + (self.lr_end - self.lr_start) * u


@dataclass
class RayBatch:
    """Supervision rays in the target field's frame.

    Dropped rays carry no range/intensity target (sentinel -1).
    """

    origins: np.ndarray
    directions: np.ndarray
    range_gt: np.ndarray
    intensity_gt: np.ndarray
    drop_gt: np.ndarray  # float 0/1
    ray_ids: np.ndarray = None

    def __post_init__(self):
        if not np.all(np.isin(self.drop_gt, (0.0, 1.0))):
            raise ValueError("drop labels must be 0 or 1")
        if self.ray_ids is None:
            self.ray_ids = np.arange(len(self.range_gt), dtype=np.int64)

    def __len__(self):
        return int(self.range_gt.shape[0])

    def select(self, idx) -> "RayBatch":
        return RayBatch(self.origins[idx], self.directions[idx],
                        self.range_gt[idx], self.intensity_gt[idx],
                        self.drop_gt[idx], self.ray_ids[idx])


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, components: dict):
        self.iteration = iteration
        self.components = components
        super().__init__(
            f"non-finite loss at iteration {iteration}: {components}")


# ---------------------------------------------------------------------------
# loss terms
# ---------------------------------------------------------------------------

def loss_range(range_est, range_gt, keep) -> float:
    """Mean absolute range error over the returned rays."""
    if not np.any(keep):
        return 0.0
    return float(np.mean(np.abs(range_est[keep] - range_gt[keep])))


def loss_intensity(intensity_est, intensity_gt, keep) -> float:
    if not np.any(keep):
        return 0.0
    return float(np.mean((intensity_est[keep] - intensity_gt[keep]) ** 2))


def loss_surface_sdf(field, points) -> float:
    """Mean absolute SDF value at observed surface points."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return 0.0
    return float(np.mean(np.abs(field.sdf(pts))))


def loss_eikonal(field, points, eps: float = 1e-3) -> float:
    """Mean squared deviation of the numerical SDF gradient norm from 1."""
    from .fields import numerical_gradient

    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return 0.0
    g = numerical_gradient(field, pts.reshape(-1, 3), eps)
    return float(np.mean((np.linalg.norm(g, axis=-1) - 1.0) ** 2))


def lovasz_hinge(margins, labels) -> float:
    loss, _ = lovasz_hinge_grad(margins, labels)
    return loss


def lovasz_hinge_grad(margins, labels):
    """Binary Lovasz hinge and its gradient w.r.t. the margins.

    Errors are sorted descending and weighted by the discrete derivative of
    the Jaccard index along the sorted ground truth; the sort permutation is
    treated as a constant.
    """
    m = np.asarray(margins, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if m.size == 0 or y.sum() == 0:
        return 0.0, np.zeros_like(m)
    signs = 2.0 * y - 1.0
    errors = np.maximum(1.0 - m * signs, 0.0)
    order = np.argsort(-errors, kind="stable")
    gt_sorted = y[order]
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    grad = np.copy(jaccard)
    grad[1:] = jaccard[1:] - jaccard[:-1]
    loss = float(errors[order] @ grad)
    dmargins = np.zeros_like(m)
    active = errors[order] > 0.0
    dmargins[order] = np.where(active, -signs[order] * grad, 0.0)
    return loss, dmargins


def loss_raydrop(drop_est, drop_gt, clamp: float = BCE_CLAMP):
    """BCE on rendered drop probabilities plus the Lovasz hinge on their
    logits.  Returns (loss, d loss / d drop_est)."""
    p = np.asarray(drop_est, dtype=np.float64)
    y = np.asarray(drop_gt, dtype=np.float64)
    n = p.size
    pc = np.clip(p, clamp, 1.0 - clamp)
    bce = float(np.mean(-(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))))
    inside = (p > clamp) & (p < 1.0 - clamp)
    dp_bce = np.where(inside, (pc - y) / (pc * (1.0 - pc)) / n, 0.0)

    margins = np.log(pc) - np.log1p(-pc)
    ls, dmargins = lovasz_hinge_grad(margins, y)
    dp_ls = np.where(inside, dmargins / (pc * (1.0 - pc)), 0.0)
    return bce + ls, dp_bce + dp_ls


# ---------------------------------------------------------------------------
# differentiable forward pass (sample positions held constant)
# ---------------------------------------------------------------------------

_STENCIL = np.zeros((6, 3))
_STENCIL[0, 0] = _STENCIL[2, 1] = _STENCIL[4, 2] = 1.0
_STENCIL[1, 0] = _STENCIL[3, 1] = _STENCIL[5, 2] = -1.0


def _heads_train_forward(field, geo, enc, dt):
    """Training-path heads: the per-ray direction contribution is computed
    once per ray and broadcast over samples (the samples share a direction),
    so no (rays x samples x features) input is ever materialized."""
    b, s_num, g = geo.shape
    w1 = np.asarray(field.w1, dt)
    b1 = np.asarray(field.b1, dt)
    w2 = np.asarray(field.w2, dt)
    b2 = np.asarray(field.b2, dt)
    geo_flat = np.ascontiguousarray(geo.reshape(-1, g), dt)
    enc_dt = np.ascontiguousarray(enc, dt)
    z1 = geo_flat @ w1[:g]
    z1 += np.repeat(enc_dt @ w1[g:] + b1, s_num, axis=0)
    h = np.maximum(z1, 0.0, out=z1)  # in-place; grad mask recovered as h > 0
    z2 = h @ w2
    z2 += b2
    e = _sigmoid64(z2[:, 0]).reshape(b, s_num)
    p_d = _sigmoid64(z2[:, 1]).reshape(b, s_num)
    return e, p_d, {"geo_flat": geo_flat, "enc": enc_dt, "h": h}


def _heads_train_backward(field, hc, d_e, d_p, e, p_d, dt):
    """Gradients for the split-GEMM head forward."""
    b, s_num = d_e.shape
    g = field.feature_dim
    dz2 = np.empty((b * s_num, 2), dt)
    dz2[:, 0] = (d_e * e * (1.0 - e)).reshape(-1)
    dz2[:, 1] = (d_p * p_d * (1.0 - p_d)).reshape(-1)
    h = hc["h"]
    grad_w2 = h.T @ dz2
    grad_b2 = dz2.sum(0, dtype=np.float64)
    dz1 = dz2 @ np.asarray(field.w2, dt).T
    dz1 *= h > 0.0
    grad_b1 = dz1.sum(0, dtype=np.float64)
    grad_w1 = np.empty((g + 16, field.hidden_dim), np.float64)
    grad_w1[:g] = hc["geo_flat"].T @ dz1
    per_ray = dz1.reshape(b, s_num, -1).sum(axis=1)
    grad_w1[g:] = hc["enc"].T @ per_ray
    d_geo = dz1 @ np.asarray(field.w1, dt)[:g].T
    return (grad_w1, grad_b1, grad_w2.astype(np.float64), grad_b2,
            d_geo.reshape(b, s_num, g))


def _sigmoid64(x):
    out = np.empty(x.shape, np.float64)
    with np.errstate(over="ignore"):
        np.negative(x, out=out)
        np.exp(out, out=out)
        out += 1.0
        np.reciprocal(out, out=out)
    return out


def forward(field: GridField, batch: RayBatch, zeta, weights: LossWeights,
            eikonal_eps: float = 1e-3):
    """Loss evaluation at fixed sample ranges ``zeta`` (B, S).

    Returns (total, components, cache); the cache feeds :func:`backward`.
    """
    b, s_num = zeta.shape
    origins = batch.origins
    dirs = batch.directions
    pos = origins[:, None, :] + zeta[..., None] * dirs[:, None, :]
    flat_pos = pos.reshape(-1, 3)

    idx, w_tri, outside = field.interp_data(flat_pos)
    sdf_flat = field.sdf_flat64()
    f = (_kernels.gather1(sdf_flat, idx, w_tri) + outside).reshape(b, s_num)
    geo = _kernels.gather_feat(field.features_flat64(), idx, w_tri).reshape(
        b, s_num, field.feature_dim)

    dt = np.float64 if field.dtype == np.float64 else np.float32
    enc = sh_encode(dirs)
    e, p_d, head_cache = _heads_train_forward(field, geo, enc, dt)

    s_sharp = float(np.exp(field.sharpness_param))
    phi = sigmoid(s_sharp * f)
    alpha = np.zeros_like(phi)
    alpha[:, :-1] = alpha_from_sdf(phi[:, :-1], phi[:, 1:])
    wts, t2 = weights_from_alphas(alpha)

    range_est = (wts * zeta).sum(-1)
    intensity_est = (wts * e).sum(-1)
    drop_est = (wts * p_d).sum(-1)

    keep = batch.drop_gt == 0.0
    l_range = loss_range(range_est, batch.range_gt, keep)
    l_int = loss_intensity(intensity_est, batch.intensity_gt, keep)
    l_drop, d_drop_est = loss_raydrop(drop_est, batch.drop_gt)

    # surface regularization at the returned rays' endpoints
    surf_pts = (origins[keep]
                + batch.range_gt[keep, None] * dirs[keep]).reshape(-1, 3)
    if surf_pts.size:
        s_idx, s_w, s_out = field.interp_data(surf_pts)
        f_surf = _kernels.gather1(sdf_flat, s_idx, s_w) + s_out
        l_surf = float(np.mean(np.abs(f_surf)))
    else:
        s_idx = s_w = f_surf = None
        l_surf = 0.0

    # eikonal constraint on every sample point (six-probe stencil)
    g = _kernels.eikonal_forward(flat_pos, eikonal_eps, field.bounds.lo,
                                 field.bounds.hi, field._cell,
                                 field.resolution, sdf_flat)
    gnorm = np.sqrt(np.einsum("ij,ij->i", g, g))
    l_eik = float(np.mean((gnorm - 1.0) ** 2))

    total = (weights.w_range * l_range + weights.w_surface * l_surf
             + weights.w_eikonal * l_eik + weights.w_intensity * l_int
             + weights.w_drop * l_drop)
    comps = {
        "range": l_range, "surface": l_surf, "eikonal": l_eik,
        "intensity": l_int, "drop": l_drop, "total": total,
    }
    cache = {
        "zeta": zeta, "pos": pos, "idx": idx, "w_tri": w_tri, "f": f,
        "geo": geo, "enc": enc, "head": head_cache, "e": e, "p_d": p_d,
        "phi": phi, "alpha": alpha, "wts": wts, "t2": t2,
        "range_est": range_est, "intensity_est": intensity_est,
        "drop_est": drop_est, "d_drop_est": d_drop_est, "keep": keep,
        "surf_pts": surf_pts, "s_idx": s_idx, "s_w": s_w, "f_surf": f_surf,
        "g": g, "gnorm": gnorm, "s_sharp": s_sharp,
        "eikonal_eps": eikonal_eps, "flat_pos": flat_pos,
    }
    return total, comps, cache


def total_loss(field: GridField, batch: RayBatch, zeta,
               weights: LossWeights = LossWeights()):
    """Weighted training loss at fixed sample ranges."""
    total, comps, _ = forward(field, batch, zeta, weights)
    return total, comps


def backward(field: GridField, batch: RayBatch, cache,
             weights: LossWeights) -> dict:
    """Gradients of the total loss for every trainable parameter array."""
    b, s_num = cache["zeta"].shape
    keep = cache["keep"]
    n_keep = int(keep.sum())
    ncells = field.sdf_values.size

    grad_sdf = np.zeros(ncells)
    grad_feat = np.zeros((ncells, field.feature_dim))

    # upstream gradients on the per-ray estimates
    d_range = np.zeros(b)
    d_int = np.zeros(b)
    if n_keep:
        d_range[keep] = (weights.w_range / n_keep
                         * np.sign(cache["range_est"][keep]
                                   - batch.range_gt[keep]))
        d_int[keep] = (weights.w_intensity / n_keep * 2.0
                       * (cache["intensity_est"][keep]
                          - batch.intensity_gt[keep]))
    d_drop = weights.w_drop * cache["d_drop_est"]

    zeta = cache["zeta"]
    wts = cache["wts"]
    t2 = cache["t2"]
    alpha = cache["alpha"]
    e = cache["e"]
    p_d = cache["p_d"]

    # d loss / d weight_j
    g_w = (d_range[:, None] * zeta + d_int[:, None] * e
           + d_drop[:, None] * p_d)

    # through the transmittance product: reverse scan over segments
    a_keep = 1.0 - 2.0 * alpha
    d_alpha = np.empty_like(alpha)
    suffix = np.zeros(b)
    for j in range(s_num - 1, -1, -1):
        d_alpha[:, j] = 2.0 * t2[:, j] * (g_w[:, j] - suffix)
        suffix = 2.0 * alpha[:, j] * g_w[:, j] + a_keep[:, j] * suffix

    # through the per-segment opacity into the sigmoid values
    phi = cache["phi"]
    d_phi = np.zeros_like(phi)
    pj = phi[:, :-1]
    pj1 = phi[:, 1:]
    act = (pj * pj - pj1 * pj1 > 0.0) & (pj > 1e-280)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(act, pj1 / np.where(act, pj, 1.0), 0.0)
        da = d_alpha[:, :-1]
        d_phi[:, :-1] += np.where(act, da * ratio * ratio / np.where(act, pj, 1.0), 0.0)
        d_phi[:, 1:] += np.where(act, -da * ratio / np.where(act, pj, 1.0), 0.0)

    # sigmoid of (sharpness * sdf)
    s_sharp = cache["s_sharp"]
    f = cache["f"]
    dsig = phi * (1.0 - phi)
    d_f = d_phi * dsig * s_sharp
    grad_theta_s = float((d_phi * dsig * f).sum() * s_sharp)

    # heads
    hc = cache["head"]
    d_e = d_int[:, None] * wts
    d_p = d_drop[:, None] * wts
    dz2 = np.stack([d_e * e * (1.0 - e), d_p * p_d * (1.0 - p_d)], axis=-1)
    dz2_flat = dz2.reshape(-1, 2)
    h_flat = hc["h"].reshape(-1, field.hidden_dim)
    x_flat = hc["x"].reshape(-1, field.feature_dim + 16)
    grad_w2 = h_flat.T @ dz2_flat
    grad_b2 = dz2_flat.sum(0)
    dh = dz2_flat @ np.asarray(field.w2, np.float64).T
    dz1 = dh * (hc["z1"].reshape(-1, field.hidden_dim) > 0.0)
    grad_w1 = x_flat.T @ dz1
    grad_b1 = dz1.sum(0)
    dx = dz1 @ np.asarray(field.w1, np.float64).T
    d_geo = dx[:, :field.feature_dim].reshape(b, s_num, field.feature_dim)

    # scatter the SDF path into the grid
    idx = cache["idx"]
    w_tri = cache["w_tri"]
    _kernels.scatter1(grad_sdf, idx, w_tri,
                      np.ascontiguousarray(d_f.reshape(-1)))

    # scatter the feature path
    _kernels.scatter_feat(grad_feat, idx, w_tri,
                          np.ascontiguousarray(
                              d_geo.reshape(-1, field.feature_dim)))

    # surface term
    if cache["s_idx"] is not None and n_keep:
        d_fs = (weights.w_surface / cache["f_surf"].size
                * np.sign(cache["f_surf"]))
        _kernels.scatter1(grad_sdf, cache["s_idx"], cache["s_w"], d_fs)

    # eikonal term: re-derive the stencil interpolation data and scatter
    g = cache["g"]
    gnorm = cache["gnorm"]
    npts = g.shape[0]
    safe = np.maximum(gnorm, 1e-12)
    d_g = (weights.w_eikonal * 2.0 * (gnorm - 1.0) / safe / npts)[:, None] * g
    _kernels.eikonal_backward(cache["flat_pos"], cache["eikonal_eps"], d_g,
                              field.bounds.lo, field.bounds.hi, field._cell,
                              field.resolution, grad_sdf)

    return {
        "sdf_values": grad_sdf.reshape(field.sdf_values.shape),
        "feature_values": grad_feat.reshape(field.feature_values.shape),
        "w1": grad_w1, "b1": grad_b1, "w2": grad_w2, "b2": grad_b2,
        "sharpness_param": np.array(grad_theta_s),
    }


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

class _Adam:
    def __init__(self, params: dict, beta1: float, beta2: float, eps: float):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(np.asarray(v), dtype=np.float64)
                  for k, v in params.items()}
        self.v = {k: np.zeros_like(np.asarray(v), dtype=np.float64)
                  for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float) -> dict:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        out = {}
        for k, p in params.items():
            g = np.asarray(grads[k], dtype=np.float64)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            upd = lr * (self.m[k] / b1c) / (np.sqrt(self.v[k] / b2c) + self.eps)
            out[k] = np.asarray(p, dtype=np.float64) - upd
        return out


@dataclass
class TrainResult:
    field: GridField
    history: list  # dict per logged iteration

    def history_columns(self):
        return ("iteration", "loss_range", "loss_surface", "loss_eikonal",
                "loss_intensity", "loss_drop", "loss_total", "lr")

    def history_rows(self):
        for h in self.history:
            yield (h["iteration"], h["range"], h["surface"], h["eikonal"],
                   h["intensity"], h["drop"], h["total"], h["lr"])


def train_field(field: GridField, data: RayBatch, cfg: TrainConfig,
                weights: LossWeights = LossWeights(),
                sampling: SamplingConfig = SamplingConfig.dynamic_default(),
                ) -> TrainResult:
    """Adam descent on the weighted loss; deterministic given the seed."""
    if sampling.normalize:
        raise ValueError("training assumes unnormalized rendering weights")
    if len(data) == 0:
        raise ValueError("empty training set")
    adam = _Adam(field.parameters(), cfg.beta1, cfg.beta2, cfg.adam_eps)
    history = []
    n = len(data)
    for it in range(cfg.iterations):
        u = counter_uniforms(cfg.seed, [it], 7_777_777, cfg.batch_size)[0]
        pick = np.minimum((u * n).astype(np.int64), n - 1)
        batch = data.select(pick)
        it_seed = int(_iter_seed(cfg.seed, it))
        zeta = sample_batch(field, batch.origins, batch.directions, sampling,
                            it_seed, batch.ray_ids)
        total, comps, cache = forward(field, batch, zeta, weights,
                                      cfg.eikonal_eps)
        if not np.isfinite(total):
            raise TrainingDiverged(it, comps)
        grads = backward(field, batch, cache, weights)
        lr = cfg.lr_at(it)
        field.set_parameters(adam.step(field.parameters(), grads, lr))
        if it % cfg.log_every == 0 or it == cfg.iterations - 1:
            history.append({**comps, "iteration": it, "lr": lr})
    return TrainResult(field, history)


def _iter_seed(seed: int, iteration: int) -> int:
    u = counter_uniforms(seed, [iteration], 424242, 1)[0, 0]
    return int(u * (2**63 - 1))


# ---------------------------------------------------------------------------
# batch builders
# ---------------------------------------------------------------------------

def build_static_batch(scans, exclusions=()) -> RayBatch:
    """Training rays for the static field (world frame).

    ``exclusions`` holds (track, canonical_box) pairs of dynamic objects;
    rays whose path up to the hit crosses such a box at their timestamp are
    contaminated by the moving object and are left out.
    """
    origins, dirs, rng, inten, drop = [], [], [], [], []
    for scan in scans:
        keep = np.ones(len(scan), dtype=bool)
        if exclusions:
            t = scan.time
            limit = np.where(scan.dropped, np.inf, scan.ranges)
            for track, box in exclusions:
                pose = interpolate_track(track, t)
                rot = pose.rotation_matrix()
                o_c = scan.origins @ rot.T + pose.translation
                d_c = scan.directions @ rot.T
                hit = _box_interval(o_c, d_c, box)
                crosses = hit[0] <= hit[1]
                keep &= ~(crosses & (hit[0] <= limit + 1e-6))
        origins.append(scan.origins[keep])
        dirs.append(scan.directions[keep])
        rng.append(scan.ranges[keep])
        inten.append(scan.intensities[keep])
        drop.append(scan.dropped[keep].astype(np.float64))
    return RayBatch(np.concatenate(origins), np.concatenate(dirs),
                    np.concatenate(rng), np.concatenate(inten),
                    np.concatenate(drop))


def _box_interval(origins, dirs, box: Obb):
    """Vectorized forward-clipped slab intervals against an oriented box."""
    inv = box.pose.inverse()
    rot = inv.rotation_matrix()
    o = origins @ rot.T + inv.translation
    d = dirs @ rot.T
    with np.errstate(divide="ignore", invalid="ignore"):
        rinv = np.where(d != 0.0, 1.0 / d, np.inf)
    t0 = (-box.half_extents - o) * rinv
    t1 = (box.half_extents - o) * rinv
    lo = np.minimum(t0, t1)
    hi = np.maximum(t0, t1)
    # parallel-outside rays must miss
    par_out = (d == 0.0) & (np.abs(o) > box.half_extents)
    near = np.maximum(np.where(par_out, np.inf, lo).max(axis=1), 0.0)
    far = np.where(par_out, -np.inf, hi).min(axis=1)
    return near, far


def build_dynamic_batch(scans, track: PoseTrack, box: Obb) -> RayBatch:
    """Training rays for one asset, expressed in its canonical frame.

    Includes every ray crossing the box at its timestamp; a ray is labeled
    dropped when the dataset dropped it or its hit lies outside the box
    (near misses supervise the drop head).
    """
    origins, dirs, rng, inten, drop = [], [], [], [], []
    for scan in scans:
        t = scan.time
        pose = interpolate_track(track, t)  # world -> canonical
        rot = pose.rotation_matrix()
        o_c = scan.origins @ rot.T + pose.translation
        d_c = scan.directions @ rot.T
        near, far = _box_interval(o_c, d_c, box)
        sel = near <= far
        if not np.any(sel):
            continue
        o_sel = o_c[sel]
        d_sel = d_c[sel]
        r_sel = scan.ranges[sel]
        e_sel = scan.intensities[sel]
        dropped = scan.dropped[sel].copy()
        hit_pts = o_sel + r_sel[:, None] * d_sel
        outside = ~box.contains(hit_pts, tol=1e-6)
        dropped |= outside
        origins.append(o_sel)
        dirs.append(d_sel)
        rng.append(np.where(dropped, -1.0, r_sel))
        inten.append(np.where(dropped, 0.0, e_sel))
        drop.append(dropped.astype(np.float64))
    if not origins:
        raise ValueError("no rays intersect the asset's box")
    return RayBatch(np.concatenate(origins), np.concatenate(dirs),
                    np.concatenate(rng), np.concatenate(inten),
                    np.concatenate(drop))
