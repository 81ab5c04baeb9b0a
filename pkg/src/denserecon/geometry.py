"""Rigid-body math, pinhole camera model, and trilinear interpolation.

Conventions used across the whole package:

* Image coordinates: ``i`` is the column (x), ``j`` is the row (y),
  origin at the top-left pixel.
* Depth images store z-depth in meters (0 marks an invalid pixel).
* A camera pose maps camera coordinates to world coordinates:
  ``p_world = R @ p_cam + t``.
* The 6-vector tangent of a pose is ``(r_x, r_y, r_z, t_x, t_y, t_z)``:
  an axis-angle rotation vector (radians) and a plain translation (meters).
* Grid sample values live at ``origin + index * voxel_size``.

All math is float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_EPS_ANGLE = 1e-8


def skew(r: np.ndarray) -> np.ndarray:
    """Cross-product matrix of a 3-vector."""
    return np.array(
        [
            [0.0, -r[2], r[1]],
            [r[2], 0.0, -r[0]],
            [-r[1], r[0], 0.0],
        ]
    )


def rotvec_to_matrix(r: np.ndarray) -> np.ndarray:
    """Rodrigues formula: axis-angle vector to rotation matrix."""
    r = np.asarray(r, dtype=np.float64)
    theta2 = float(r @ r)
    theta = np.sqrt(theta2)
    k = skew(r)
    if theta < _EPS_ANGLE:
        # 2nd-order series keeps the round-trip exact at tiny angles
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * k + b * (k @ k)


def rotvecs_to_matrices(r: np.ndarray) -> np.ndarray:
    """Batched Rodrigues: (N, 3) rotation vectors to (N, 3, 3) matrices."""
    r = np.asarray(r, dtype=np.float64)
    n = len(r)
    theta2 = np.sum(r * r, axis=1)
    small = theta2 < 1e-16
    safe2 = np.where(small, 1.0, theta2)
    theta = np.sqrt(safe2)
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(theta) / theta)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(theta)) / safe2)
    k = np.zeros((n, 3, 3))
    k[:, 0, 1], k[:, 0, 2] = -r[:, 2], r[:, 1]
    k[:, 1, 0], k[:, 1, 2] = r[:, 2], -r[:, 0]
    k[:, 2, 0], k[:, 2, 1] = -r[:, 1], r[:, 0]
    return np.eye(3) + a[:, None, None] * k + b[:, None, None] * (k @ k)


def matrix_to_rotvec(rot: np.ndarray) -> np.ndarray:
    """Inverse Rodrigues, valid for angles in [0, pi].

    Uses the antisymmetric part away from pi and the symmetric part near
    pi, where sin(theta) loses precision.
    """
    rot = np.asarray(rot, dtype=np.float64)
    cos_theta = np.clip((np.trace(rot) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    vee = 0.5 * np.array(
        [rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]]
    )
    if theta < _EPS_ANGLE:
        return vee * (1.0 + theta * theta / 6.0)
    if theta < np.pi - 1e-4:
        return vee * (theta / np.sin(theta))
    # Near pi: the symmetric part equals I + (1 - cos) (a a^T - I) exactly,
    # so the axis outer product is recovered without the sin(theta) noise.
    sym = 0.5 * (rot + rot.T)
    outer = (sym - cos_theta * np.eye(3)) / (1.0 - cos_theta)
    k = int(np.argmax(np.diag(outer)))
    axis = outer[:, k] / np.sqrt(max(outer[k, k], _EPS_ANGLE))
    axis = axis / np.linalg.norm(axis)
    sin_theta = min(np.linalg.norm(vee), 1.0)
    theta = np.pi - np.arcsin(sin_theta)
    # Fix the sign so the antisymmetric part agrees (ambiguous at exactly pi)
    if np.dot(axis, vee) < 0.0:
        axis = -axis
    return axis * theta


class Pose:
    """Rigid transform in SE(3), camera-to-world by convention."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation: np.ndarray, translation: np.ndarray):
        self.rotation = np.array(rotation, dtype=np.float64)
        self.translation = np.array(translation, dtype=np.float64).reshape(3)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_tangent(xi: np.ndarray) -> "Pose":
        xi = np.asarray(xi, dtype=np.float64).reshape(6)
        return Pose(rotvec_to_matrix(xi[:3]), xi[3:])

    def tangent(self) -> np.ndarray:
        return np.concatenate([matrix_to_rotvec(self.rotation), self.translation])

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return Pose(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "Pose") -> "Pose":
        """self @ other (apply ``other`` first, then ``self``)."""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or a batch (..., 3)."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def rotation_angle_to(self, other: "Pose") -> float:
        """Geodesic rotation distance in radians."""
        rel = self.rotation.T @ other.rotation
        return float(np.linalg.norm(matrix_to_rotvec(rel)))

    def translation_distance_to(self, other: "Pose") -> float:
        return float(np.linalg.norm(self.translation - other.translation))

    def copy(self) -> "Pose":
        return Pose(self.rotation, self.translation)

    def __repr__(self) -> str:  # pragma: no cover
        return f"Pose(t={self.translation}, r={matrix_to_rotvec(self.rotation)})"


def se3_apply(pose: Pose, point: np.ndarray) -> np.ndarray:
    """R @ point + t."""
    return pose.apply(point)


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera model (no distortion)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 5000.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def scaled(self, factor: float) -> "Intrinsics":
        """Intrinsics for an image resized by ``factor``."""
        return Intrinsics(
            self.fx * factor,
            self.fy * factor,
            self.cx * factor,
            self.cy * factor,
            int(round(self.width * factor)),
            int(round(self.height * factor)),
            self.depth_scale,
        )


def backproject(pixels: np.ndarray, depth: np.ndarray, k: Intrinsics) -> np.ndarray:
    """Pixels (..., 2) as (i, j) plus z-depth (...,) to camera-frame points.

    Callers are responsible for skipping non-positive depths.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    x = (pixels[..., 0] - k.cx) / k.fx * depth
    y = (pixels[..., 1] - k.cy) / k.fy * depth
    return np.stack([x, y, depth], axis=-1)


def project(points_cam: np.ndarray, k: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Camera-frame points (..., 3) to pixels (..., 2) and z-depth (...,).

    Points at or behind the camera plane produce non-finite pixels; callers
    must mask on the returned depth.
    """
    points_cam = np.asarray(points_cam, dtype=np.float64)
    z = points_cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = points_cam[..., 0] / z * k.fx + k.cx
        v = points_cam[..., 1] / z * k.fy + k.cy
    return np.stack([u, v], axis=-1), z


def pixel_grid(k: Intrinsics) -> np.ndarray:
    """(H, W, 2) array of (i, j) pixel coordinates."""
    jj, ii = np.mgrid[0 : k.height, 0 : k.width]
    return np.stack([ii, jj], axis=-1).astype(np.float64)


def interpolate_trilinear(
    values: np.ndarray,
    grid_points: np.ndarray,
    outside_fill: float | np.ndarray = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """8-neighbor trilinear blend on a regular grid.

    ``values`` has shape (nx, ny, nz) or (nx, ny, nz, C); ``grid_points``
    holds index-space coordinates (N, 3).  Points outside
    ``[0, dims - 1]`` on any axis get ``outside_fill`` and a False mask.

    Returns ``(interpolated, inside_mask)``.
    """
    values = np.asarray(values)
    pts = np.asarray(grid_points, dtype=np.float64)
    dims = np.array(values.shape[:3])
    inside = np.all((pts >= 0.0) & (pts <= dims - 1), axis=-1)

    p = np.clip(pts, 0.0, dims - 1)
    i0 = np.minimum(np.floor(p).astype(np.int64), dims - 2)
    i0 = np.maximum(i0, 0)
    f = p - i0

    x0, y0, z0 = i0[..., 0], i0[..., 1], i0[..., 2]
    fx, fy, fz = f[..., 0], f[..., 1], f[..., 2]
    if values.ndim == 4:
        fx, fy, fz = fx[..., None], fy[..., None], fz[..., None]

    c000 = values[x0, y0, z0]
    c100 = values[x0 + 1, y0, z0]
    c010 = values[x0, y0 + 1, z0]
    c110 = values[x0 + 1, y0 + 1, z0]
    c001 = values[x0, y0, z0 + 1]
    c101 = values[x0 + 1, y0, z0 + 1]
    c011 = values[x0, y0 + 1, z0 + 1]
    c111 = values[x0 + 1, y0 + 1, z0 + 1]

    c00 = c000 * (1 - fx) + c100 * fx
    c10 = c010 * (1 - fx) + c110 * fx
    c01 = c001 * (1 - fx) + c101 * fx
    c11 = c011 * (1 - fx) + c111 * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    out = c0 * (1 - fz) + c1 * fz

    if values.ndim == 4:
        out = np.where(inside[..., None], out, outside_fill)
    else:
        out = np.where(inside, out, outside_fill)
    return out, inside


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """Unit quaternion (x, y, z, w) to rotation matrix."""
    x, y, z, w = np.asarray(q, dtype=np.float64)
    n = np.sqrt(x * x + y * y + z * z + w * w)
    x, y, z, w = x / n, y / n, z / n, w / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quaternion(rot: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (x, y, z, w), w >= 0."""
    rot = np.asarray(rot, dtype=np.float64)
    tr = np.trace(rot)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        w = 0.25 * s
        x = (rot[2, 1] - rot[1, 2]) / s
        y = (rot[0, 2] - rot[2, 0]) / s
        z = (rot[1, 0] - rot[0, 1]) / s
    else:
        d = np.diag(rot)
        k = int(np.argmax(d))
        if k == 0:
            s = np.sqrt(1.0 + rot[0, 0] - rot[1, 1] - rot[2, 2]) * 2.0
            x = 0.25 * s
            y = (rot[0, 1] + rot[1, 0]) / s
            z = (rot[0, 2] + rot[2, 0]) / s
            w = (rot[2, 1] - rot[1, 2]) / s
        elif k == 1:
            s = np.sqrt(1.0 + rot[1, 1] - rot[0, 0] - rot[2, 2]) * 2.0
            x = (rot[0, 1] + rot[1, 0]) / s
            y = 0.25 * s
            z = (rot[1, 2] + rot[2, 1]) / s
            w = (rot[0, 2] - rot[2, 0]) / s
        else:
            s = np.sqrt(1.0 + rot[2, 2] - rot[0, 0] - rot[1, 1]) * 2.0
            x = (rot[0, 2] + rot[2, 0]) / s
            y = (rot[1, 2] + rot[2, 1]) / s
            z = 0.25 * s
            w = (rot[1, 0] - rot[0, 1]) / s
    q = np.array([x, y, z, w])
    if q[3] < 0:
        q = -q
    return q / np.linalg.norm(q)


def look_at(eye: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose looking from ``eye`` toward ``target``.

    Camera axes: x right, y down, z forward (z-depth convention).
    """
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward = forward / np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
        nr = np.linalg.norm(right)
    right = right / nr
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward], axis=1)
    return Pose(rot, eye)
