"""Sequence ingestion and the keyframe pixel bank.

Supports the TUM RGB-D directory layout: ``rgb.txt`` / ``depth.txt``
listing ``timestamp path`` pairs, 8-bit color and 16-bit depth PNGs,
and an optional ``groundtruth.txt`` trajectory.  Depth raw units divide
by ``depth_scale`` to get meters; 0 marks invalid.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .geometry import Intrinsics, Pose, quaternion_to_matrix

ASSOCIATION_MAX_DIFF = 0.02  # seconds


class DataError(Exception):
    """Missing or malformed input data."""


@dataclass
class Frame:
    index: int
    timestamp: float
    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) meters, 0 = invalid
    intrinsics: Intrinsics

    def __post_init__(self):
        h, w = self.depth.shape
        if (h, w) != (self.intrinsics.height, self.intrinsics.width):
            raise DataError("depth size does not match intrinsics")
        if self.rgb.shape[:2] != (h, w):
            raise DataError("rgb size does not match depth")
        if np.any(self.depth < 0):
            raise DataError("negative depth")


def _read_file_list(path: str) -> list[tuple[float, str]]:
    if not os.path.isfile(path):
        raise DataError(f"missing {path}")
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            out.append((float(parts[0]), parts[1]))
    out.sort(key=lambda x: x[0])
    return out


def associate(a: list[tuple[float, str]], b: list[tuple[float, str]],
              max_diff: float = ASSOCIATION_MAX_DIFF):
    """Greedy nearest-timestamp matching, the standard TUM scheme."""
    candidates = [
        (abs(ta - tb), ia, ib)
        for ia, (ta, _) in enumerate(a)
        for ib, (tb, _) in enumerate(b)
        if abs(ta - tb) < max_diff
    ]
    candidates.sort()
    used_a: set[int] = set()
    used_b: set[int] = set()
    matches = []
    for _, ia, ib in candidates:
        if ia in used_a or ib in used_b:
            continue
        used_a.add(ia)
        used_b.add(ib)
        matches.append((ia, ib))
    matches.sort()
    return matches


def load_depth_png(path: str, depth_scale: float) -> np.ndarray:
    img = Image.open(path)
    arr = np.array(img)
    if arr.dtype not in (np.uint16, np.int32, np.uint8):
        raise DataError(f"unsupported depth dtype {arr.dtype} in {path}")
    return arr.astype(np.float64) / depth_scale


def load_rgb_png(path: str) -> np.ndarray:
    arr = np.array(Image.open(path).convert("RGB"))
    return arr.astype(np.float64) / 255.0


def load_tum_sequence(root: str, intrinsics: Intrinsics,
                      max_diff: float = ASSOCIATION_MAX_DIFF):
    """Yield timestamp-associated frames from a TUM-layout directory.

    Returns (frames, skipped) where skipped counts unassociated images.
    """
    rgb_list = _read_file_list(os.path.join(root, "rgb.txt"))
    depth_list = _read_file_list(os.path.join(root, "depth.txt"))
    matches = associate(rgb_list, depth_list, max_diff)
    skipped = len(rgb_list) + len(depth_list) - 2 * len(matches)
    frames = []
    for index, (ia, ib) in enumerate(matches):
        t_rgb, rgb_rel = rgb_list[ia]
        _, depth_rel = depth_list[ib]
        rgb = load_rgb_png(os.path.join(root, rgb_rel))
        depth = load_depth_png(os.path.join(root, depth_rel), intrinsics.depth_scale)
        frames.append(Frame(index, t_rgb, rgb, depth, intrinsics))
    return frames, skipped


def load_tum_trajectory(path: str) -> list[tuple[float, Pose]]:
    """Parse 'timestamp tx ty tz qx qy qz qw' lines."""
    if not os.path.isfile(path):
        raise DataError(f"missing {path}")
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(v) for v in line.split()]
            if len(vals) != 8:
                raise DataError(f"bad trajectory line: {line}")
            t, tx, ty, tz, qx, qy, qz, qw = vals
            out.append((t, Pose(quaternion_to_matrix([qx, qy, qz, qw]), [tx, ty, tz])))
    return out


def write_tum_sequence(root: str, frames: list[Frame],
                       poses: list[Pose] | None = None) -> None:
    """Write frames (and optionally ground truth) in TUM layout."""
    os.makedirs(os.path.join(root, "rgb"), exist_ok=True)
    os.makedirs(os.path.join(root, "depth"), exist_ok=True)
    rgb_lines = []
    depth_lines = []
    for fr in frames:
        rgb_rel = f"rgb/{fr.timestamp:.6f}.png"
        depth_rel = f"depth/{fr.timestamp:.6f}.png"
        rgb8 = np.clip(np.round(fr.rgb * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(rgb8).save(os.path.join(root, rgb_rel))
        raw = np.round(fr.depth * fr.intrinsics.depth_scale)
        raw = np.clip(raw, 0, np.iinfo(np.uint16).max).astype(np.uint16)
        Image.fromarray(raw).save(os.path.join(root, depth_rel))
        rgb_lines.append(f"{fr.timestamp:.6f} {rgb_rel}")
        depth_lines.append(f"{fr.timestamp:.6f} {depth_rel}")
    with open(os.path.join(root, "rgb.txt"), "w") as f:
        f.write("# timestamp filename\n" + "\n".join(rgb_lines) + "\n")
    with open(os.path.join(root, "depth.txt"), "w") as f:
        f.write("# timestamp filename\n" + "\n".join(depth_lines) + "\n")
    if poses is not None:
        from .trajectory import write_trajectory

        write_trajectory(
            os.path.join(root, "groundtruth.txt"),
            [(fr.timestamp, p) for fr, p in zip(frames, poses)],
        )


@dataclass
class Keyframe:
    frame_index: int
    timestamp: float
    pose: Pose  # mutable: refreshed by bundle adjustment
    pixels: np.ndarray  # (M, 2) int (i, j)
    rgb: np.ndarray  # (M, 3)
    depth: np.ndarray  # (M,)
    intrinsics: Intrinsics


@dataclass
class KeyframeStore:
    """Downsampled pixel bank feeding mapping and bundle adjustment."""

    retention_fraction: float = 0.05
    keyframes: list[Keyframe] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.keyframes)

    def total_pixels(self) -> int:
        return sum(len(kf.depth) for kf in self.keyframes)

    def insert(self, frame: Frame, pose: Pose, rng: np.random.Generator,
               fraction: float | None = None) -> Keyframe:
        """Retain a uniform random subset of the frame's valid pixels."""
        if fraction is None:
            fraction = self.retention_fraction
        valid_j, valid_i = np.nonzero(frame.depth > 0)
        n_valid = len(valid_i)
        if n_valid == 0:
            raise DataError(f"frame {frame.index} has no valid depth")
        n_keep = max(1, int(round(fraction * n_valid)))
        sel = rng.choice(n_valid, size=min(n_keep, n_valid), replace=False)
        pix = np.stack([valid_i[sel], valid_j[sel]], axis=1)
        kf = Keyframe(
            frame_index=frame.index,
            timestamp=frame.timestamp,
            pose=pose.copy(),
            pixels=pix,
            rgb=frame.rgb[pix[:, 1], pix[:, 0]].copy(),
            depth=frame.depth[pix[:, 1], pix[:, 0]].copy(),
            intrinsics=frame.intrinsics,
        )
        self.keyframes.append(kf)
        return kf

    def poses(self) -> list[Pose]:
        return [kf.pose for kf in self.keyframes]

    def set_poses(self, poses: list[Pose]) -> None:
        if len(poses) != len(self.keyframes):
            raise ValueError("pose count mismatch")
        for kf, p in zip(self.keyframes, poses):
            kf.pose = p.copy()


def maybe_insert_keyframe(store: KeyframeStore, frame: Frame, pose: Pose,
                          every_k: int, rng: np.random.Generator,
                          fraction: float | None = None) -> bool:
    """Cadence-based keyframe policy: every K-th frame joins the bank."""
    if frame.index % every_k != 0:
        return False
    store.insert(frame, pose, rng, fraction)
    return True
