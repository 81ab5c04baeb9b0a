"""Analytic test scenes with exact depth rendering and ground-truth SDF.

Scenes are unions of axis-aligned boxes, spheres, and one enclosing room;
rays intersect them in closed form, so every rendered depth has an exact
analytic reference.  The signed distance is positive in free space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Intrinsics, Pose, look_at, pixel_grid


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple
    albedo: tuple

    def sdf(self, p: np.ndarray) -> np.ndarray:
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        center = (lo + hi) / 2
        half = (hi - lo) / 2
        q = np.abs(p - center) - half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    albedo: tuple

    def sdf(self, p: np.ndarray) -> np.ndarray:
        return np.linalg.norm(p - np.asarray(self.center), axis=-1) - self.radius


@dataclass
class SyntheticScene:
    """Hollow room containing solid primitives, with per-face wall albedos."""

    room_lo: tuple
    room_hi: tuple
    wall_albedos: tuple  # 6 albedos: -x, +x, -y, +y, -z, +z
    boxes: list = field(default_factory=list)
    spheres: list = field(default_factory=list)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.room_lo, float), np.asarray(self.room_hi, float)

    def sdf(self, p: np.ndarray) -> np.ndarray:
        """Signed distance to the nearest surface, positive in free space."""
        p = np.asarray(p, dtype=np.float64)
        lo = np.asarray(self.room_lo)
        hi = np.asarray(self.room_hi)
        room = np.minimum((p - lo).min(axis=-1), (hi - p).min(axis=-1))
        d = room
        for b in self.boxes:
            d = np.minimum(d, b.sdf(p))
        for s in self.spheres:
            d = np.minimum(d, s.sdf(p))
        return d


def _ray_box(origins, dirs, lo, hi, from_inside: bool):
    """Slab-method box intersection; returns (t, hit, face_index)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - origins) / dirs
        t2 = (hi - origins) / dirs
    tmin_axis = np.minimum(t1, t2)
    tmax_axis = np.maximum(t1, t2)
    tmin = np.nanmax(tmin_axis, axis=-1)
    tmax = np.nanmin(tmax_axis, axis=-1)
    if from_inside:
        t = tmax
        hit = (tmax > 1e-9) & (tmax >= tmin)
        axis = np.nanargmin(np.where(np.isnan(tmax_axis), np.inf, tmax_axis), axis=-1)
        sign_pos = np.take_along_axis(dirs, axis[..., None], axis=-1)[..., 0] > 0
    else:
        t = tmin
        hit = (tmin > 1e-9) & (tmax >= tmin) & (tmax > 0)
        axis = np.nanargmax(np.where(np.isnan(tmin_axis), -np.inf, tmin_axis), axis=-1)
        sign_pos = np.take_along_axis(dirs, axis[..., None], axis=-1)[..., 0] < 0
    face = axis * 2 + sign_pos.astype(int)
    return t, hit, face


def _ray_sphere(origins, dirs, center, radius):
    oc = origins - center
    a = np.sum(dirs * dirs, axis=-1)
    b = 2.0 * np.sum(dirs * oc, axis=-1)
    c = np.sum(oc * oc, axis=-1) - radius * radius
    disc = b * b - 4 * a * c
    hit = disc > 0
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0 = (-b - sq) / (2 * a)
    t1 = (-b + sq) / (2 * a)
    t = np.where(t0 > 1e-9, t0, t1)
    hit &= t > 1e-9
    return t, hit


def render_depth_rgb(scene: SyntheticScene, pose: Pose, k: Intrinsics):
    """Exact z-depth and flat-shaded albedo images for one camera pose."""
    pix = pixel_grid(k)
    dirs_cam = np.stack(
        [
            (pix[..., 0] - k.cx) / k.fx,
            (pix[..., 1] - k.cy) / k.fy,
            np.ones((k.height, k.width)),
        ],
        axis=-1,
    )
    dirs = dirs_cam @ pose.rotation.T
    origins = np.broadcast_to(pose.translation, dirs.shape)

    lo, hi = scene.bounds()
    best_t, hit, face = _ray_box(origins, dirs, lo, hi, from_inside=True)
    best_t = np.where(hit, best_t, np.inf)
    walls = np.asarray(scene.wall_albedos, dtype=np.float64)
    rgb = walls[face]
    rgb = np.where(hit[..., None], rgb, 0.0)

    for b in scene.boxes:
        t, bh, bface = _ray_box(origins, dirs, np.asarray(b.lo), np.asarray(b.hi),
                                from_inside=False)
        closer = bh & (t < best_t)
        best_t = np.where(closer, t, best_t)
        rgb = np.where(closer[..., None], np.asarray(b.albedo), rgb)

    for s in scene.spheres:
        t, sh = _ray_sphere(origins, dirs, np.asarray(s.center), s.radius)
        closer = sh & (t < best_t)
        best_t = np.where(closer, t, best_t)
        rgb = np.where(closer[..., None], np.asarray(s.albedo), rgb)

    depth = np.where(np.isfinite(best_t), best_t, 0.0)
    return depth, rgb


def render_synthetic(scene: SyntheticScene, pose: Pose, k: Intrinsics,
                     depth_noise: float = 0.0, dropout: float = 0.0,
                     rng: np.random.Generator | None = None):
    """Depth/rgb render with optional Gaussian depth noise and hole dropout."""
    depth, rgb = render_depth_rgb(scene, pose, k)
    if depth_noise > 0.0 or dropout > 0.0:
        if rng is None:
            raise ValueError("noise requested without an rng")
        if depth_noise > 0.0:
            noisy = depth + rng.normal(0.0, depth_noise, size=depth.shape)
            depth = np.where(depth > 0, np.maximum(noisy, 0.0), 0.0)
        if dropout > 0.0:
            holes = rng.uniform(size=depth.shape) < dropout
            depth = np.where(holes, 0.0, depth)
    return depth, rgb


def make_box_room(size=(5.0, 4.0, 3.0)) -> SyntheticScene:
    """Room with furniture along every wall; the standard test scene.

    Each viewing direction sees surfaces of several orientations, so
    depth-only tracking is fully constrained everywhere on the orbit.
    """
    sx, sy, sz = size
    walls = (
        (0.85, 0.55, 0.45),
        (0.45, 0.65, 0.85),
        (0.55, 0.80, 0.55),
        (0.80, 0.75, 0.50),
        (0.60, 0.60, 0.60),
        (0.90, 0.90, 0.85),
    )
    scene = SyntheticScene(room_lo=(0.0, 0.0, 0.0), room_hi=(sx, sy, sz),
                           wall_albedos=walls)
    scene.boxes.append(Box((0.2, 0.2, 0.0), (1.0, 1.2, 1.2), (0.75, 0.30, 0.25)))
    scene.boxes.append(Box((sx - 1.2, sy - 0.8, 0.0), (sx - 0.2, sy - 0.2, 1.4),
                           (0.25, 0.35, 0.75)))
    scene.boxes.append(Box((sx / 2 - 0.4, 0.2, 0.0), (sx / 2 + 0.4, 0.9, 1.0),
                           (0.85, 0.75, 0.25)))
    scene.boxes.append(Box((0.2, sy - 1.0, 0.0), (0.9, sy - 0.2, 1.1),
                           (0.35, 0.65, 0.30)))
    scene.boxes.append(Box((sx - 1.0, 0.2, 0.0), (sx - 0.2, 1.0, 0.9),
                           (0.60, 0.40, 0.70)))
    scene.boxes.append(Box((0.2, sy / 2 - 0.5, 0.0), (0.8, sy / 2 + 0.5, 1.3),
                           (0.70, 0.70, 0.30)))
    scene.boxes.append(Box((sx / 2 - 0.5, sy - 0.7, 0.0), (sx / 2 + 0.5, sy - 0.1, 1.0),
                           (0.45, 0.55, 0.75)))
    # feature sizes stay well above the coarse voxel scale; finer detail
    # is the residual field's job, not the grid's
    scene.spheres.append(Sphere((sx - 1.1, 1.1, 0.55), 0.55, (0.30, 0.70, 0.40)))
    scene.spheres.append(Sphere((1.1, sy - 1.2, 0.5), 0.5, (0.75, 0.55, 0.30)))
    return scene


def make_orbit_trajectory(scene: SyntheticScene, n_frames: int,
                          orbit_radius: float = 0.8,
                          revolutions: float = 1.0) -> list[Pose]:
    """Smooth outward-looking orbit, pitched down so the floor stays in view."""
    lo, hi = scene.bounds()
    center = (lo + hi) / 2.0
    height = 0.62 * (hi[2] - lo[2])
    poses = []
    for i in range(n_frames):
        ang = 2.0 * np.pi * revolutions * i / n_frames
        eye = center.copy()
        eye[0] += orbit_radius * np.cos(ang)
        eye[1] += orbit_radius * np.sin(ang)
        eye[2] = lo[2] + height + 0.1 * np.sin(2.0 * ang)
        target = eye + np.array(
            [2.0 * np.cos(ang), 2.0 * np.sin(ang), -0.85 + 0.1 * np.cos(3.0 * ang)]
        )
        poses.append(look_at(eye, target))
    return poses
