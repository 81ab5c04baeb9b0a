"""Evaluation metrics: trajectory ATE, mesh accuracy/completion, depth-L1.

Trajectory error follows the standard protocol: closed-form rigid
alignment of the estimated positions onto ground truth, then the RMS of
the residual translation norms.  Mesh metrics sample both surfaces
uniformly by area and measure nearest-neighbor distances both ways.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose


@dataclass
class TrajectoryMetrics:
    ate_rmse: float  # meters
    per_frame_errors: np.ndarray  # meters
    alignment: Pose
    scale: float = 1.0

    @property
    def ate_rmse_cm(self) -> float:
        return self.ate_rmse * 100.0


def horn_align(source: np.ndarray, target: np.ndarray,
               with_scale: bool = False) -> tuple[Pose, float]:
    """Closed-form rigid (optionally similarity) alignment source -> target."""
    src_mean = source.mean(axis=0)
    tgt_mean = target.mean(axis=0)
    src_c = source - src_mean
    tgt_c = target - tgt_mean
    w = src_c.T @ tgt_c
    u, _, vt = np.linalg.svd(w)
    s = np.eye(3)
    if np.linalg.det(u @ vt) < 0:
        s[2, 2] = -1.0
    rot = vt.T @ s @ u.T
    if with_scale:
        denom = float((src_c * src_c).sum())
        scale = float(np.trace(np.diag(np.linalg.svd(w)[1]) @ s)) / denom
    else:
        scale = 1.0
    trans = tgt_mean - scale * rot @ src_mean
    return Pose(rot, trans), scale


def ate_rmse(estimated: list[Pose], ground_truth: list[Pose],
             with_scale: bool = False) -> TrajectoryMetrics:
    """Absolute trajectory error after closed-form alignment.

    Requires at least 3 associated pose pairs.
    """
    if len(estimated) != len(ground_truth):
        raise ValueError("trajectory lengths differ")
    if len(estimated) < 3:
        raise ValueError("need at least 3 pose pairs")
    est = np.stack([p.translation for p in estimated])
    gt = np.stack([p.translation for p in ground_truth])
    align, scale = horn_align(est, gt, with_scale)
    moved = scale * (est @ align.rotation.T) + align.translation
    errors = np.linalg.norm(moved - gt, axis=1)
    return TrajectoryMetrics(
        ate_rmse=float(np.sqrt(np.mean(errors**2))),
        per_frame_errors=errors,
        alignment=align,
        scale=scale,
    )


@dataclass
class MeshMetrics:
    accuracy: float  # meters, recon -> gt
    completion: float  # meters, gt -> recon
    completion_ratio: float  # percent at threshold
    f1: float  # percent
    threshold: float

    def as_dict(self) -> dict:
        return {
            "accuracy_cm": self.accuracy * 100.0,
            "completion_cm": self.completion * 100.0,
            "completion_ratio_pct": self.completion_ratio,
            "f1_pct": self.f1,
            "threshold_cm": self.threshold * 100.0,
        }


def sample_mesh_surface(vertices: np.ndarray, faces: np.ndarray, count: int,
                        rng: np.random.Generator) -> np.ndarray:
    """Uniform-by-area point sampling of a triangle mesh."""
    v0 = vertices[faces[:, 0]]
    v1 = vertices[faces[:, 1]]
    v2 = vertices[faces[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has no area")
    probs = areas / total
    tri = rng.choice(len(faces), size=count, p=probs)
    r1 = np.sqrt(rng.uniform(size=count))
    r2 = rng.uniform(size=count)
    a = 1.0 - r1
    b = r1 * (1.0 - r2)
    c = r1 * r2
    return (
        a[:, None] * v0[tri] + b[:, None] * v1[tri] + c[:, None] * v2[tri]
    )


def mesh_metrics(recon_vertices: np.ndarray, recon_faces: np.ndarray,
                 gt_vertices: np.ndarray, gt_faces: np.ndarray,
                 threshold: float = 0.05, n_samples: int = 100_000,
                 rng: np.random.Generator | None = None) -> MeshMetrics:
    """Accuracy / completion / completion-ratio / F1 between two meshes.

    Empty reconstruction yields the degenerate result (infinite
    distances, zero ratio) rather than an error.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if len(gt_faces) == 0:
        raise ValueError("ground-truth mesh is empty")
    gt_pts = sample_mesh_surface(gt_vertices, gt_faces, n_samples, rng)
    if len(recon_faces) == 0:
        return MeshMetrics(np.inf, np.inf, 0.0, 0.0, threshold)
    recon_pts = sample_mesh_surface(recon_vertices, recon_faces, n_samples, rng)

    d_recon_to_gt = cKDTree(gt_pts).query(recon_pts)[0]
    d_gt_to_recon = cKDTree(recon_pts).query(gt_pts)[0]
    precision = float(np.mean(d_recon_to_gt < threshold)) * 100.0
    recall = float(np.mean(d_gt_to_recon < threshold)) * 100.0
    f1 = 0.0
    if precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    return MeshMetrics(
        accuracy=float(d_recon_to_gt.mean()),
        completion=float(d_gt_to_recon.mean()),
        completion_ratio=recall,
        f1=f1,
        threshold=threshold,
    )


def depth_l1(render_fn, frames, poses: list[Pose], stride: int = 10) -> float:
    """Mean absolute rendered-vs-observed depth over valid pixels.

    ``render_fn(pose, frame)`` must return a depth image; pixels with
    missing observed depth are excluded.  Every ``stride``-th frame is
    evaluated.
    """
    total = 0.0
    count = 0
    for i in range(0, len(frames), stride):
        rendered = render_fn(poses[i], frames[i])
        observed = frames[i].depth
        valid = observed > 0
        if not np.any(valid):
            continue
        total += float(np.abs(rendered[valid] - observed[valid]).sum())
        count += int(valid.sum())
    if count == 0:
        return 0.0
    return total / count


def psnr(rendered: np.ndarray, observed: np.ndarray, peak: float = 1.0) -> float:
    """PSNR on 8-bit-quantized images (peak 1.0 before quantization)."""
    q_r = np.round(np.clip(rendered, 0, peak) * 255.0) / 255.0
    q_o = np.round(np.clip(observed, 0, peak) * 255.0) / 255.0
    mse = float(np.mean((q_r - q_o) ** 2))
    if mse == 0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))
