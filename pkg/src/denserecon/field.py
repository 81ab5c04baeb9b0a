"""The mixed scene field: coarse grid base plus learned residuals.

A query blends the coarse TSDF/RGB grid trilinearly, rescales and clamps
the geometry base to the fine truncation band, and adds decoder residuals
conditioned on the base attributes, a one-blob positional encoding, and
multiresolution hash features.  Volume rendering against keyframe rays
supervises the residual parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .datasets import KeyframeStore
from .geometry import Pose
from .nn import HashEncoder, HashEncoderConfig, Mlp, ParamStore, one_blob_encode
from .volume import TsdfVolume

RAY_WEIGHT_FLOOR = 1e-8


class NumericsError(Exception):
    """Non-finite loss detected during optimization."""


@dataclass
class LossWeights:
    photometric: float = 1.0
    geometric: float = 1.0
    tsdf: float = 10.0
    free_space: float = 2.0
    smoothness: float = 1e-6

    def __post_init__(self):
        vals = (self.photometric, self.geometric, self.tsdf, self.free_space,
                self.smoothness)
        if not all(np.isfinite(v) and v >= 0 for v in vals):
            raise ValueError("loss weights must be finite and nonnegative")


def _pack_coarse(vol: TsdfVolume) -> np.ndarray:
    return np.concatenate(
        [vol.tsdf[..., None], vol.rgb, vol.weight[..., None]], axis=-1
    )


def coarse_lookup(packed: np.ndarray, origin: np.ndarray, voxel_size: float,
                  points: Tensor) -> Tensor:
    """Differentiable trilinear lookup of (tsdf, rgb) with default fill.

    ``packed`` stacks [tsdf, r, g, b, weight] per voxel.  Outside the grid
    or where the interpolated weight is zero the result is the default
    state (tsdf 1, rgb 0) with zero point-gradient.
    """
    pts = points.data
    dims = np.array(packed.shape[:3])
    g = (pts - origin) / voxel_size
    inside = np.all((g >= 0.0) & (g <= dims - 1), axis=-1)
    gc = np.clip(g, 0.0, dims - 1)
    i0 = np.minimum(gc.astype(np.int64), dims - 2)
    f = gc - i0

    nx, ny, nz = packed.shape[:3]
    flat = packed.reshape(-1, packed.shape[-1])
    corners = i0[:, None, :] + _CORNERS[None, :, :]  # (N, 8, 3)
    lin = (corners[..., 0] * ny + corners[..., 1]) * nz + corners[..., 2]
    vals = flat[lin]  # (N, 8, 5)

    wx = np.stack([1.0 - f[:, 0], f[:, 0]], axis=1)
    wy = np.stack([1.0 - f[:, 1], f[:, 1]], axis=1)
    wz = np.stack([1.0 - f[:, 2], f[:, 2]], axis=1)
    w = (
        wx[:, _CORNERS[:, 0]] * wy[:, _CORNERS[:, 1]] * wz[:, _CORNERS[:, 2]]
    )  # (N, 8)

    interp = np.einsum("nc,ncv->nv", w, vals)  # (N, 5)
    observed = inside & (interp[:, 4] > 0.0)
    out = np.empty((len(pts), 4))
    out[:, 0] = np.where(observed, interp[:, 0], 1.0)
    out[:, 1:4] = np.where(observed[:, None], interp[:, 1:4], 0.0)

    def backward(grad):
        if not points.requires_grad:
            return
        gmask = grad * observed[:, None]  # (N, 4)
        per_corner = np.einsum("ncv,nv->nc", vals[:, :, :4], gmask)
        gp = np.zeros_like(pts)
        for axis in range(3):
            others = [a for a in range(3) if a != axis]
            w_other = np.ones_like(w)
            for a in others:
                fa = f[:, a]
                wa = np.stack([1.0 - fa, fa], axis=1)
                w_other *= wa[:, _CORNERS[:, a]]
            sign = np.where(_CORNERS[:, axis] == 1, 1.0, -1.0)
            gp[:, axis] = np.sum(per_corner * w_other * sign, axis=1) / voxel_size
        points.accumulate(gp)

    return ad.custom((points,), out, backward), observed


_CORNERS = np.array([[x, y, z] for z in (0, 1) for y in (0, 1) for x in (0, 1)])


@dataclass(frozen=True)
class FieldConfig:
    mode: str = "mixed"  # mixed | implicit | coarse
    tau_c: float = 1.0
    pos_bins: int = 16
    hidden: int = 32
    hidden_layers: int = 2
    hash_cfg: HashEncoderConfig = HashEncoderConfig()
    lr_hash: float = 1e-2
    lr_decoder: float = 1e-3


class MixedField:
    """Coarse grid + residual decoders queried as one continuous field."""

    def __init__(self, coarse: TsdfVolume, bounds_lo, bounds_hi, tr_i: float,
                 cfg: FieldConfig, rng: np.random.Generator):
        if cfg.mode not in ("mixed", "implicit", "coarse"):
            raise ValueError(f"unknown field mode {cfg.mode!r}")
        if coarse.truncation <= tr_i and cfg.mode != "implicit":
            raise ValueError("coarse truncation must exceed the fine truncation")
        self.coarse = coarse
        self.bounds_lo = np.asarray(bounds_lo, dtype=np.float64)
        self.bounds_hi = np.asarray(bounds_hi, dtype=np.float64)
        self.tr_i = float(tr_i)
        self.cfg = cfg
        self.tau_c = float(cfg.tau_c)
        self.outside_bounds_count = 0
        self._packed: np.ndarray | None = None
        self._packed_version = -1

        self.theta = ParamStore()
        if cfg.mode == "coarse":
            self.encoder = None
            self.decoder_geo = None
            self.decoder_rgb = None
            return
        self.encoder = HashEncoder(cfg.hash_cfg, self.theta, rng, lr=cfg.lr_hash)
        in_dim = self.encoder.output_dim + 3 * cfg.pos_bins
        if cfg.mode == "mixed":
            in_dim += 4  # base attributes condition the residual
        sizes = [in_dim] + [cfg.hidden] * cfg.hidden_layers
        self.decoder_geo = Mlp(self.theta, "geo", sizes + [1], rng,
                               head="identity", lr=cfg.lr_decoder)
        rgb_head = "sigmoid" if cfg.mode == "implicit" else "identity"
        self.decoder_rgb = Mlp(self.theta, "rgb", sizes + [3], rng,
                               head=rgb_head, lr=cfg.lr_decoder)

    @property
    def tr_ratio(self) -> float:
        """tr_coarse / tr_fine rescaling applied to the geometry base."""
        return self.coarse.truncation / self.tr_i

    def _packed_coarse(self) -> np.ndarray:
        if self._packed is None or self._packed_version != self.coarse.version:
            self._packed = _pack_coarse(self.coarse)
            self._packed_version = self.coarse.version
        return self._packed

    def normalize(self, points: Tensor) -> Tensor:
        span = self.bounds_hi - self.bounds_lo
        n_outside = int(
            np.sum(
                np.any(
                    (points.data < self.bounds_lo) | (points.data > self.bounds_hi),
                    axis=-1,
                )
            )
        )
        self.outside_bounds_count += n_outside
        scaled = ad.mul(ad.sub(points, self.bounds_lo), 1.0 / span)
        return ad.clamp(scaled, 0.0, 1.0)

    def query(self, points: Tensor, k: float = 1.0):
        """Field attributes at world points.

        Returns (tsdf, rgb, observed_mask): tsdf is the clamped, rescaled
        geometry base plus the learned residual; rgb is the raw color base
        plus its residual, clamped to [0, 1].  ``k`` widens the base clamp
        (gradient amplification; identity when 1).
        """
        base, observed = coarse_lookup(
            self._packed_coarse(), self.coarse.origin, self.coarse.voxel_size, points
        )
        lim = k * self.tau_c
        base_tsdf = base[:, 0]
        base_rgb = base[:, 1:4]
        beta_hat = ad.clamp(ad.mul(base_tsdf, self.tr_ratio), -lim, lim)
        if self.cfg.mode == "coarse":
            return beta_hat, base_rgb, observed

        norm = self.normalize(points)
        feats = [one_blob_encode(norm, self.cfg.pos_bins), self.encoder.encode(norm)]
        if self.cfg.mode == "mixed":
            feats.insert(0, base)
        dec_in = ad.concatenate(feats, axis=1)
        res_geo = self.decoder_geo(dec_in)[:, 0]
        res_rgb = self.decoder_rgb(dec_in)
        if self.cfg.mode == "implicit":
            return res_geo, res_rgb, observed
        tsdf = ad.add(beta_hat, res_geo)
        rgb = ad.clamp(ad.add(base_rgb, res_rgb), 0.0, 1.0)
        return tsdf, rgb, observed

    def query_np(self, points: np.ndarray, k: float = 1.0):
        """Gradient-free convenience wrapper returning numpy arrays."""
        tsdf, rgb, observed = self.query(Tensor(points), k=k)
        return tsdf.data, rgb.data, observed

    def smoothness_loss(self, rng: np.random.Generator, n_samples: int = 1024) -> Tensor:
        """Mean squared feature difference across adjacent hash vertices.

        Draws random (level, vertex) pairs; per vertex the squared feature
        differences to its +x/+y/+z lattice neighbors are summed.
        """
        if self.encoder is None:
            return Tensor(0.0)
        enc = self.encoder
        n_levels = len(enc.resolutions)
        levels = rng.integers(0, n_levels, size=n_samples)
        terms = []
        total = 0
        for lvl in range(n_levels):
            count = int(np.sum(levels == lvl))
            if count == 0:
                continue
            res = enc.resolutions[lvl]
            verts = rng.integers(0, res, size=(count, 3))
            table = enc.tables[lvl]
            base_feat = ad.take(table, enc.corner_indices(verts, lvl)[:, 0])
            for axis in range(3):
                nbr = verts.copy()
                nbr[:, axis] += 1  # stays a valid lattice vertex (<= res)
                nbr_feat = ad.take(table, enc.corner_indices(nbr, lvl)[:, 0])
                terms.append(ad.sum_(ad.square(ad.sub(nbr_feat, base_feat))))
            total += count
        if not terms:
            return Tensor(0.0)
        acc = terms[0]
        for t in terms[1:]:
            acc = ad.add(acc, t)
        return ad.mul(acc, 1.0 / max(total, 1))


def render_weight(tsdf: Tensor) -> Tensor:
    """Rendering weight peaking at the zero crossing: sig(t) * sig(-t)."""
    return ad.mul(ad.sigmoid(tsdf), ad.sigmoid(ad.mul(tsdf, -1.0)))


@dataclass
class RayBatch:
    """Sampled pixels and per-ray sample points with TSDF targets."""

    kf_ids: np.ndarray  # (N,) index into the keyframe list
    pixels: np.ndarray  # (N, 2)
    obs_rgb: np.ndarray  # (N, 3)
    obs_depth: np.ndarray  # (N,)
    dirs_cam: np.ndarray  # (N, 3), z component 1 (z-depth parameterization)
    t_samples: np.ndarray  # (N, R) sampled z-depths d'
    bin_tr: np.ndarray  # (N, R) |d' - d_hat| < tr
    bin_fs: np.ndarray  # (N, R) d_hat - d' > tr
    strata: np.ndarray  # (N, R) 0 = uniform, 1 = near-surface
    target_s: np.ndarray  # (N, R) clamp((d_hat - d') / tr, -1, 1)
    truncation: float

    @property
    def n_rays(self) -> int:
        return len(self.obs_depth)

    @property
    def n_samples(self) -> int:
        return self.t_samples.shape[1]

    def points_cam(self) -> np.ndarray:
        """(N*R, 3) sample positions in each ray's camera frame."""
        return (self.dirs_cam[:, None, :] * self.t_samples[..., None]).reshape(-1, 3)

    def sample_kf_ids(self) -> np.ndarray:
        return np.repeat(self.kf_ids, self.n_samples)


class EmptyBatchError(Exception):
    """No valid pixels available for sampling."""


def sample_batch(store: KeyframeStore, rng: np.random.Generator, n_pixels: int,
                 n_uniform: int, n_near: int, truncation: float,
                 near: float = 0.1) -> RayBatch:
    """Draw pixels uniformly from the bank and sample depths along rays.

    Per ray: ``n_uniform`` stratified samples over [near, d_hat + tr] and
    ``n_near`` Gaussian samples around the observed depth.  Bin membership
    and per-sample TSDF targets come from the observed depth.
    """
    if len(store) == 0:
        raise EmptyBatchError("keyframe store is empty")
    counts = [len(kf.depth) for kf in store.keyframes]
    offsets = np.cumsum([0] + counts)
    total = offsets[-1]
    if total == 0:
        raise EmptyBatchError("keyframe store holds no pixels")

    flat = rng.integers(0, total, size=n_pixels)
    kf_ids = np.searchsorted(offsets, flat, side="right") - 1
    local = flat - offsets[kf_ids]

    pixels = np.empty((n_pixels, 2), dtype=np.int64)
    obs_rgb = np.empty((n_pixels, 3))
    obs_depth = np.empty(n_pixels)
    dirs_cam = np.empty((n_pixels, 3))
    for b, kf_idx in enumerate(kf_ids):
        kf = store.keyframes[kf_idx]
        li = local[b]
        pixels[b] = kf.pixels[li]
        obs_rgb[b] = kf.rgb[li]
        obs_depth[b] = kf.depth[li]
        intr = kf.intrinsics
        dirs_cam[b] = (
            (pixels[b, 0] - intr.cx) / intr.fx,
            (pixels[b, 1] - intr.cy) / intr.fy,
            1.0,
        )
    # the bank only stores valid pixels, but guard anyway
    good = obs_depth > 0
    if not np.all(good):
        raise EmptyBatchError("keyframe bank contains invalid depths")

    tr = truncation
    far = obs_depth + tr
    lo = np.minimum(near, far - 1e-6)
    u = (np.arange(n_uniform) + rng.uniform(size=(n_pixels, n_uniform))) / n_uniform
    t_uniform = lo[:, None] + (far - lo)[:, None] * u
    t_near = obs_depth[:, None] + rng.normal(0.0, tr / 2.0, size=(n_pixels, n_near))
    t_near = np.maximum(t_near, 1e-3)
    t_samples = np.concatenate([t_uniform, t_near], axis=1)
    strata = np.concatenate(
        [np.zeros((n_pixels, n_uniform), int), np.ones((n_pixels, n_near), int)],
        axis=1,
    )

    diff = obs_depth[:, None] - t_samples  # positive in front of the surface
    bin_tr = np.abs(diff) < tr
    bin_fs = diff > tr
    target_s = np.clip(diff / tr, -1.0, 1.0)
    return RayBatch(
        kf_ids=kf_ids,
        pixels=pixels,
        obs_rgb=obs_rgb,
        obs_depth=obs_depth,
        dirs_cam=dirs_cam,
        t_samples=t_samples,
        bin_tr=bin_tr,
        bin_fs=bin_fs,
        strata=strata,
        target_s=target_s,
        truncation=tr,
    )


def world_points_from_poses(batch: RayBatch, poses: list[Pose]) -> Tensor:
    """Constant world-space sample positions for frozen poses."""
    rots = np.stack([p.rotation for p in poses])
    trans = np.stack([p.translation for p in poses])
    ids = batch.sample_kf_ids()
    cam = batch.points_cam()
    world = np.einsum("nij,nj->ni", rots[ids], cam) + trans[ids]
    return Tensor(world)


def world_points_from_tensors(batch: RayBatch, rot: Tensor, trans: Tensor) -> Tensor:
    """Differentiable world-space sample positions (bundle adjustment)."""
    ids = batch.sample_kf_ids()
    cam = Tensor(batch.points_cam())
    rot_sel = ad.take(rot, ids)
    trans_sel = ad.take(trans, ids)
    return ad.apply_rigid(rot_sel, trans_sel, cam)


def render_batch(field: MixedField, batch: RayBatch, points: Tensor, k: float = 1.0):
    """Query the field at the batch samples and composite along rays.

    Returns (rendered rgb, rendered depth, per-sample tsdf/rgb, valid-ray
    mask).  Rays whose weight sum is below the floor are excluded.
    """
    n, r = batch.n_rays, batch.n_samples
    tsdf, rgb, _ = field.query(points, k=k)
    w = render_weight(tsdf)
    w2 = ad.reshape(w, (n, r))
    wsum = ad.sum_(w2, axis=1)  # (N,)
    valid = wsum.data > RAY_WEIGHT_FLOOR

    rgb3 = ad.reshape(rgb, (n, r, 3))
    w3 = ad.reshape(w, (n, r, 1))
    c_num = ad.sum_(ad.mul(rgb3, w3), axis=1)  # (N, 3)
    d_num = ad.sum_(ad.mul(w2, Tensor(batch.t_samples)), axis=1)
    denom = ad.where(valid, wsum, Tensor(np.ones_like(wsum.data)))
    c = ad.div(c_num, ad.reshape(denom, (n, 1)))
    d = ad.div(d_num, denom)
    return c, d, tsdf, rgb, valid


def compute_loss(field: MixedField, batch: RayBatch, poses, weights: LossWeights,
                 k: float = 1.0, rng: np.random.Generator | None = None,
                 include_smoothness: bool = True):
    """Total mapping/BA loss with per-term breakdown.

    ``poses`` is either a list of frozen Pose objects or a (rot, trans)
    tensor pair through which gradients flow into pose parameters.
    """
    if isinstance(poses, tuple):
        points = world_points_from_tensors(batch, *poses)
    else:
        points = world_points_from_poses(batch, poses)

    c, d, tsdf, _, valid = render_batch(field, batch, points, k=k)
    n, r = batch.n_rays, batch.n_samples
    n_valid = int(valid.sum())
    breakdown = {"excluded_rays": n - n_valid}

    if n_valid == 0:
        raise EmptyBatchError("no renderable rays in batch")

    inv_valid = 1.0 / n_valid
    vmask = valid.astype(np.float64)
    c_err = ad.sum_(ad.square(ad.sub(c, Tensor(batch.obs_rgb))), axis=1)
    l_p = ad.mul(ad.sum_(ad.mul(c_err, vmask)), inv_valid)
    d_err = ad.square(ad.sub(d, Tensor(batch.obs_depth)))
    l_g = ad.mul(ad.sum_(ad.mul(d_err, vmask)), inv_valid)

    tsdf2 = ad.reshape(tsdf, (n, r))
    sq_tr = ad.square(ad.sub(Tensor(batch.target_s), tsdf2))
    cnt_tr = batch.bin_tr.sum(axis=1)
    w_tr = np.where(cnt_tr[:, None] > 0, batch.bin_tr / np.maximum(cnt_tr[:, None], 1), 0.0)
    l_tsdf = ad.mul(ad.sum_(ad.mul(sq_tr, w_tr)), 1.0 / n)

    sq_fs = ad.square(ad.sub(tsdf2, 1.0))
    cnt_fs = batch.bin_fs.sum(axis=1)
    w_fs = np.where(cnt_fs[:, None] > 0, batch.bin_fs / np.maximum(cnt_fs[:, None], 1), 0.0)
    l_fs = ad.mul(ad.sum_(ad.mul(sq_fs, w_fs)), 1.0 / n)

    total = ad.add(
        ad.add(ad.mul(l_p, weights.photometric), ad.mul(l_g, weights.geometric)),
        ad.add(ad.mul(l_tsdf, weights.tsdf), ad.mul(l_fs, weights.free_space)),
    )
    if include_smoothness and weights.smoothness > 0 and field.encoder is not None:
        if rng is None:
            raise ValueError("smoothness loss needs an rng for the vertex set")
        l_smo = field.smoothness_loss(rng)
        total = ad.add(total, ad.mul(l_smo, weights.smoothness))
        breakdown["smoothness"] = l_smo.item()

    breakdown.update(
        photometric=l_p.item(),
        geometric=l_g.item(),
        tsdf=l_tsdf.item(),
        free_space=l_fs.item(),
        total=total.item(),
    )
    return total, breakdown


def mapping_step(field: MixedField, store: KeyframeStore, weights: LossWeights,
                 n_iters: int, rng: np.random.Generator, n_pixels: int = 2048,
                 n_uniform: int = 11, n_near: int = 48):
    """Train the residual parameters for ``n_iters`` iterations.

    Poses and the coarse grid stay frozen.  A non-finite loss rolls the
    parameters back to the pre-step snapshot and raises NumericsError.
    """
    if len(store) == 0:
        raise EmptyBatchError("mapping requires at least one keyframe")
    snapshot = field.theta.snapshot()
    trace = []
    poses = store.poses()
    for it in range(n_iters):
        batch = sample_batch(store, rng, n_pixels, n_uniform, n_near, field.tr_i)
        total, breakdown = compute_loss(field, batch, poses, weights, rng=rng)
        if not np.isfinite(total.item()):
            field.theta.restore(snapshot)
            raise NumericsError(f"non-finite mapping loss at iteration {it}")
        field.theta.zero_grad()
        total.backward()
        field.theta.adam_step()
        trace.append(breakdown)
    return trace
