"""Dense TSDF grids: projective fusion, queries, and the moving volume.

Two grids share this type: the global coarse grid that anchors the
residual field, and the finer fixed-extent tracking volume that follows
the camera.  Voxel sample positions are ``origin + index * voxel_size``.
The default (unobserved) state is tsdf 1, rgb 0, weight 0.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .geometry import Intrinsics, Pose, interpolate_trilinear

DEFAULT_WEIGHT_MAX = 128.0

_CORNERS8 = np.array([[x, y, z] for z in (0, 1) for y in (0, 1) for x in (0, 1)])


class TsdfVolume:
    """Axis-aligned voxel grid of (tsdf, rgb, weight)."""

    def __init__(self, origin, voxel_size: float, dims, truncation: float,
                 weight_max: float = DEFAULT_WEIGHT_MAX):
        self.origin = np.array(origin, dtype=np.float64).reshape(3)
        self.voxel_size = float(voxel_size)
        self.dims = tuple(int(d) for d in dims)
        self.truncation = float(truncation)
        self.weight_max = float(weight_max)
        nx, ny, nz = self.dims
        self.tsdf = np.ones((nx, ny, nz), dtype=np.float64)
        self.rgb = np.zeros((nx, ny, nz, 3), dtype=np.float64)
        self.weight = np.zeros((nx, ny, nz), dtype=np.float64)
        self.version = 0  # bumped on every mutation so caches can refresh
        self._centers_cache: np.ndarray | None = None
        self._phi_pack: np.ndarray | None = None
        self._phi_pack_version = -1

    @staticmethod
    def from_bounds(lo, hi, resolution: int, truncation_voxels: float = 4.0,
                    weight_max: float = DEFAULT_WEIGHT_MAX) -> "TsdfVolume":
        """Grid covering [lo, hi] with ``resolution`` voxels on the longest axis."""
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        extent = hi - lo
        voxel = float(extent.max()) / (resolution - 1)
        dims = np.maximum(np.ceil(extent / voxel - 1e-9).astype(int) + 1, 2)
        return TsdfVolume(lo, voxel, dims, truncation_voxels * voxel,
                          weight_max=weight_max)

    @property
    def upper(self) -> np.ndarray:
        return self.origin + (np.array(self.dims) - 1) * self.voxel_size

    def voxel_centers(self) -> np.ndarray:
        """(N, 3) world positions of every voxel sample, cached."""
        if self._centers_cache is None:
            nx, ny, nz = self.dims
            ix, iy, iz = np.meshgrid(
                np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"
            )
            idx = np.stack([ix, iy, iz], axis=-1).reshape(-1, 3)
            self._centers_cache = self.origin + idx * self.voxel_size
        return self._centers_cache

    def world_to_grid(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.origin) / self.voxel_size

    def copy(self) -> "TsdfVolume":
        out = TsdfVolume(self.origin, self.voxel_size, self.dims, self.truncation,
                         weight_max=self.weight_max)
        out.tsdf = self.tsdf.copy()
        out.rgb = self.rgb.copy()
        out.weight = self.weight.copy()
        return out

    # -- queries ---------------------------------------------------------

    def trilerp(self, points: np.ndarray):
        """Trilinear (tsdf, rgb, weight) at world points; outside flagged.

        Outside points get the default state (tsdf 1, rgb 0, weight 0).
        """
        g = self.world_to_grid(points)
        tsdf, inside = interpolate_trilinear(self.tsdf, g, outside_fill=1.0)
        rgb, _ = interpolate_trilinear(self.rgb, g, outside_fill=0.0)
        weight, _ = interpolate_trilinear(self.weight, g, outside_fill=0.0)
        return tsdf, rgb, weight, inside

    def query_phi(self, points: np.ndarray) -> np.ndarray:
        """TSDF lookup with free-space default 1 outside or unobserved."""
        tsdf, _, weight, inside = self.trilerp(points)
        return np.where(inside & (weight > 0.0), tsdf, 1.0)

    def query_phi_observed(self, points: np.ndarray):
        """Like :meth:`query_phi` plus a mask of actually observed lookups."""
        tsdf, _, weight, inside = self.trilerp(points)
        observed = inside & (weight > 0.0)
        return np.where(observed, tsdf, 1.0), observed

    def query_phi_packed(self, points: np.ndarray, strict: bool = False):
        """Single-gather (tsdf, observed) lookup for hot tracking loops.

        With ``strict`` the observed mask demands all 8 interpolation
        corners carry fusion weight, so blended values never mix in the
        free-space default of unobserved neighbors; otherwise it matches
        :meth:`query_phi_observed` to floating-point roundoff.
        """
        if self._phi_pack is None or self._phi_pack_version != self.version:
            self._phi_pack = np.concatenate(
                [self.tsdf[..., None], self.weight[..., None]], axis=-1
            ).reshape(-1, 2)
            self._phi_pack_version = self.version
        dims = np.array(self.dims)
        g = (points - self.origin) / self.voxel_size
        with np.errstate(invalid="ignore"):
            inside = np.all((g >= 0.0) & (g <= dims - 1), axis=-1) & np.all(
                np.isfinite(g), axis=-1
            )
        gc = np.clip(np.nan_to_num(g), 0.0, dims - 1)
        i0 = np.minimum(gc.astype(np.int64), dims - 2)
        f = gc - i0
        nx, ny, nz = self.dims
        corners = i0[:, None, :] + _CORNERS8[None, :, :]
        lin = (corners[..., 0] * ny + corners[..., 1]) * nz + corners[..., 2]
        vals = self._phi_pack[lin]  # (N, 8, 2)
        wx = np.stack([1.0 - f[:, 0], f[:, 0]], axis=1)
        wy = np.stack([1.0 - f[:, 1], f[:, 1]], axis=1)
        wz = np.stack([1.0 - f[:, 2], f[:, 2]], axis=1)
        w = (
            wx[:, _CORNERS8[:, 0]] * wy[:, _CORNERS8[:, 1]] * wz[:, _CORNERS8[:, 2]]
        )
        blend = np.einsum("nc,ncv->nv", w, vals)
        if strict:
            observed = inside & np.all(vals[:, :, 1] > 0.0, axis=1)
        else:
            observed = inside & (blend[:, 1] > 0.0)
        return np.where(observed, blend[:, 0], 1.0), observed

    # -- fusion ------------------------------------------------------------

    def integrate(self, rgb_image: np.ndarray, depth_image: np.ndarray,
                  intrinsics: Intrinsics, pose: Pose) -> None:
        """Projective TSDF fusion of one posed RGB-D frame.

        Per voxel: signed distance = observed depth minus voxel z-depth;
        voxels closer than one truncation behind the surface update the
        running average with unit frame weight.  Depth is sampled
        bilinearly on smooth regions (guarded by a local spread check) to
        avoid sub-pixel staircase bias on obliquely viewed surfaces.
        """
        centers = self.voxel_centers()
        cam = pose.inverse().apply(centers)
        z = cam[:, 2]
        valid = z > 1e-9
        u = np.full(len(cam), -1.0)
        v = np.full(len(cam), -1.0)
        u[valid] = cam[valid, 0] / z[valid] * intrinsics.fx + intrinsics.cx
        v[valid] = cam[valid, 1] / z[valid] * intrinsics.fy + intrinsics.cy
        ui = np.round(u).astype(np.int64)
        vi = np.round(v).astype(np.int64)
        valid &= (ui >= 0) & (ui < intrinsics.width) & (vi >= 0) & (vi < intrinsics.height)

        ui_c = np.clip(ui, 0, intrinsics.width - 1)
        vi_c = np.clip(vi, 0, intrinsics.height - 1)
        depth_obs = depth_image[vi_c, ui_c]
        valid &= depth_obs > 0.0

        # guarded bilinear refinement of the depth lookup
        u0 = np.clip(np.floor(u).astype(np.int64), 0, intrinsics.width - 2)
        v0 = np.clip(np.floor(v).astype(np.int64), 0, intrinsics.height - 2)
        fu = np.clip(u - u0, 0.0, 1.0)
        fv = np.clip(v - v0, 0.0, 1.0)
        d00 = depth_image[v0, u0]
        d10 = depth_image[v0, u0 + 1]
        d01 = depth_image[v0 + 1, u0]
        d11 = depth_image[v0 + 1, u0 + 1]
        four = np.stack([d00, d10, d01, d11])
        smooth = (four > 0).all(axis=0) & (
            four.max(axis=0) - four.min(axis=0) < 0.5 * self.truncation
        )
        bilin = (
            d00 * (1 - fu) * (1 - fv)
            + d10 * fu * (1 - fv)
            + d01 * (1 - fu) * fv
            + d11 * fu * fv
        )
        depth_obs = np.where(smooth, bilin, depth_obs)

        sd = depth_obs - z
        valid &= sd > -self.truncation
        if not np.any(valid):
            return

        idx = np.nonzero(valid)[0]
        obs_tsdf = np.clip(sd[idx] / self.truncation, -1.0, 1.0)
        obs_rgb = rgb_image[vi_c[idx], ui_c[idx]]

        flat_t = self.tsdf.reshape(-1)
        flat_w = self.weight.reshape(-1)
        flat_c = self.rgb.reshape(-1, 3)
        w_old = flat_w[idx]
        w_new = w_old + 1.0
        # with w_old = 0 this overwrites the default state with the observation
        flat_t[idx] = np.where(w_old > 0.0,
                               (flat_t[idx] * w_old + obs_tsdf) / w_new, obs_tsdf)
        flat_c[idx] = np.where((w_old > 0.0)[:, None],
                               (flat_c[idx] * w_old[:, None] + obs_rgb) / w_new[:, None],
                               obs_rgb)
        flat_w[idx] = np.minimum(w_new, self.weight_max)
        self.version += 1

    # -- snapshot ------------------------------------------------------------

    _MAGIC = b"TSDFVOL1"

    def save(self, path) -> None:
        """Self-describing binary dump (header + row-major arrays)."""
        with open(path, "wb") as f:
            f.write(self._MAGIC)
            f.write(struct.pack("<3i", *self.dims))
            f.write(struct.pack("<3d", *self.origin))
            f.write(struct.pack("<dd", self.voxel_size, self.truncation))
            f.write(self.tsdf.astype("<f8").tobytes())
            f.write(self.weight.astype("<f8").tobytes())
            f.write(self.rgb.astype("<f8").tobytes())

    @staticmethod
    def load(path) -> "TsdfVolume":
        with open(path, "rb") as f:
            magic = f.read(8)
            if magic != TsdfVolume._MAGIC:
                raise ValueError(f"not a volume snapshot: {path}")
            dims = struct.unpack("<3i", f.read(12))
            origin = struct.unpack("<3d", f.read(24))
            voxel_size, truncation = struct.unpack("<dd", f.read(16))
            vol = TsdfVolume(origin, voxel_size, dims, truncation)
            n = dims[0] * dims[1] * dims[2]
            vol.tsdf = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(dims).copy()
            vol.weight = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(dims).copy()
            vol.rgb = (
                np.frombuffer(f.read(24 * n), dtype="<f8").reshape(dims + (3,)).copy()
            )
        return vol


@dataclass
class MovingVolumeState:
    """Tracking volume that recenters when the camera strays too far."""

    volume: TsdfVolume
    anchor_pose: Pose
    shift_threshold: float
    shifts: list = field(default_factory=list)

    def maybe_shift(self, new_pose: Pose) -> bool:
        """Recenter per axis once the camera exceeds the threshold.

        The origin moves by a whole number of voxels so the surviving
        region is copied bit-identically; vacated voxels reset to the
        default state.  The anchor snaps to ``new_pose`` after any shift.
        """
        vol = self.volume
        shifted = False
        for axis in range(3):
            d = new_pose.translation[axis] - self.anchor_pose.translation[axis]
            if abs(d) <= self.shift_threshold:
                continue
            steps = int(round(d / vol.voxel_size))
            if steps == 0:
                continue
            self._shift_axis(axis, steps)
            shifted = True
        if shifted:
            self.anchor_pose = new_pose.copy()
        return shifted

    def _shift_axis(self, axis: int, steps: int) -> None:
        vol = self.volume
        n = vol.dims[axis]
        keep = n - abs(steps)
        new_t = np.ones_like(vol.tsdf)
        new_c = np.zeros_like(vol.rgb)
        new_w = np.zeros_like(vol.weight)
        if keep > 0:
            src = [slice(None)] * 3
            dst = [slice(None)] * 3
            if steps > 0:
                src[axis] = slice(steps, n)
                dst[axis] = slice(0, keep)
            else:
                src[axis] = slice(0, keep)
                dst[axis] = slice(-steps, n)
            new_t[tuple(dst)] = vol.tsdf[tuple(src)]
            new_c[tuple(dst)] = vol.rgb[tuple(src)]
            new_w[tuple(dst)] = vol.weight[tuple(src)]
        vol.tsdf, vol.rgb, vol.weight = new_t, new_c, new_w
        vol.origin = vol.origin.copy()
        vol.origin[axis] += steps * vol.voxel_size
        vol.version += 1
        self.shifts.append((axis, steps))


def make_moving_volume(center: Pose, extent, resolution: int,
                       truncation_voxels: float = 2.5,
                       shift_threshold: float | None = None) -> MovingVolumeState:
    """Tracking volume of the given extent centered on the camera."""
    extent = np.asarray(extent, dtype=np.float64)
    voxel = float(extent.max()) / (resolution - 1)
    dims = np.maximum(np.round(extent / voxel).astype(int) + 1, 2)
    origin = center.translation - (dims - 1) * voxel / 2.0
    vol = TsdfVolume(origin, voxel, dims, truncation_voxels * voxel)
    if shift_threshold is None:
        shift_threshold = float(extent.min()) / 4.0
    return MovingVolumeState(vol, center.copy(), shift_threshold)
