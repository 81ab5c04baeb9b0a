"""Front-end camera tracking by randomized pose search.

Each frame's depth pixels are back-projected and scored against the
moving TSDF volume: the cost is the mean squared point-to-surface
distance (TSDF value scaled to meters).  A pre-sampled swarm of 6-DoF
offsets, rescaled anisotropically between iterations, proposes candidate
poses around the current best; the best candidate is kept only when it
improves, so the tracked cost never increases.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Intrinsics, Pose, backproject, pixel_grid, rotvecs_to_matrices
from .volume import TsdfVolume

MIN_VALID_PIXELS = 100


class TrackingUnreliable(Exception):
    """Too little valid depth to track against the volume."""


@dataclass
class Pst:
    """Pre-sampled particle swarm template with per-axis scales."""

    particles: np.ndarray  # (N, 6) offsets in the unit ball, symmetric
    scales: np.ndarray  # (6,) radians / meters
    contract: float = 0.6  # applied to all axes after a stalled iteration
    expand: float = 1.15  # applied to axes the winning offset leaned on
    refine: float = 0.9  # applied to the axes it barely used
    scale_min: float = 1e-5
    scale_max: float = 0.05

    def __post_init__(self):
        if np.any(self.scales <= 0):
            raise ValueError("scales must be positive")


def make_pst(rng: np.random.Generator, n_particles: int = 1024,
             rot_scale: float = 0.02, trans_scale: float = 0.02) -> Pst:
    """Symmetric unit-ball sample set: each offset appears with its negation."""
    half = n_particles // 2
    raw = rng.normal(size=(half, 6))
    radii = rng.uniform(size=(half, 1)) ** (1.0 / 6.0)
    raw *= radii / np.linalg.norm(raw, axis=1, keepdims=True)
    particles = np.concatenate([raw, -raw], axis=0)
    scales = np.array([rot_scale] * 3 + [trans_scale] * 3)
    return Pst(particles=particles, scales=scales)


@dataclass
class TrackResult:
    pose: Pose
    final_cost: float
    iterations_used: int
    inlier_fraction: float
    cost_trace: list = field(default_factory=list)


def _valid_pixel_arrays(depth: np.ndarray, k: Intrinsics):
    pix = pixel_grid(k).reshape(-1, 2)
    d = depth.reshape(-1)
    valid = d > 0
    return pix[valid], d[valid]


def frame_cost(pose: Pose, depth: np.ndarray, k: Intrinsics, volume: TsdfVolume,
               max_pixels: int = 5000,
               rng: np.random.Generator | None = None) -> tuple[float, float]:
    """Mean squared point-to-surface distance (m^2) and inlier fraction.

    Pixels whose back-projection lands outside the volume or in
    unobserved space contribute the free-space default and count as
    outliers.
    """
    pix, d = _valid_pixel_arrays(depth, k)
    if len(d) < MIN_VALID_PIXELS:
        raise TrackingUnreliable(f"only {len(d)} valid depth pixels")
    if len(d) > max_pixels:
        if rng is None:
            rng = np.random.default_rng(0)
        sel = rng.choice(len(d), size=max_pixels, replace=False)
        pix, d = pix[sel], d[sel]
    pts = pose.apply(backproject(pix, d, k))
    phi, observed = volume.query_phi_observed(pts)
    dist = phi * volume.truncation
    return float(np.mean(dist * dist)), float(np.mean(observed))


def _candidate_costs(base: Pose, offsets: np.ndarray, points_cam: np.ndarray,
                     volume: TsdfVolume,
                     weights: np.ndarray | None = None) -> np.ndarray:
    """Costs of base∘exp(offset) for every offset, evaluated in one sweep.

    Ranking uses only pixels observed at the current best pose (mask
    frozen across the candidate set); pixels a candidate pushes out of
    the observed region inherit the incumbent's residual, so there is
    neither a free-space cliff nor a reward for shedding coverage.  This
    keeps the objective anchored to model-covered geometry instead of
    rewarding poses that maximize overlap with the mapped region.
    """
    base_world = points_cam @ base.rotation.T + base.translation
    phi0, observed = volume.query_phi_packed(base_world, strict=True)
    if observed.sum() >= MIN_VALID_PIXELS // 2:
        points_cam = points_cam[observed]
        phi0 = phi0[observed]
        if weights is not None:
            weights = weights[observed]
    rots = rotvecs_to_matrices(offsets[:, :3])
    # camera-frame perturbation: R = R_b R_d, t = R_b t_d + t_b
    full_r = base.rotation @ rots
    full_t = offsets[:, 3:] @ base.rotation.T + base.translation
    world = np.einsum("kij,mj->kmi", full_r, points_cam) + full_t[:, None, :]
    phi, obs = volume.query_phi_packed(world.reshape(-1, 3), strict=True)
    phi = phi.reshape(len(offsets), -1)
    obs = obs.reshape(len(offsets), -1)
    phi = np.where(obs, phi, phi0[None, :])
    dist = phi * volume.truncation
    sq = dist * dist
    if weights is None:
        return np.mean(sq, axis=1)
    return (sq @ weights) / weights.sum()


def incidence_weights(depth: np.ndarray, scale: float = 0.01) -> np.ndarray:
    """Downweight obliquely viewed pixels via the local depth gradient.

    Grazing surfaces alias in the coarse TSDF (their truncation band is
    thinner than a voxel), leaving lattice-anchored residual patterns
    that would otherwise drag the pose optimum sideways.
    """
    gy, gx = np.gradient(depth)
    g = np.hypot(gx, gy)
    return 1.0 / (1.0 + (g / scale) ** 2)


def track_frame(initial: Pose, depth: np.ndarray, k: Intrinsics,
                volume: TsdfVolume, pst: Pst, n_iterations: int,
                rng: np.random.Generator, n_pixels: int = 5000) -> TrackResult:
    """Best-candidate randomized descent from the initial guess.

    Never returns a pose worse than the initial guess: the running best
    is only replaced by candidates that beat it on the same pixel subset.
    Scales contract on axes the winning offset barely used and expand
    everywhere after a stalled iteration.
    """
    pix_flat = pixel_grid(k).reshape(-1, 2)
    d_flat = depth.reshape(-1)
    w_flat = incidence_weights(depth).reshape(-1)
    valid = d_flat > 0
    if int(valid.sum()) < MIN_VALID_PIXELS:
        raise TrackingUnreliable(f"only {int(valid.sum())} valid depth pixels")

    # one pixel subset per frame: candidate races stay noise-free and the
    # best-so-far cost is exactly monotone
    idx_valid = np.nonzero(valid)[0]
    if len(idx_valid) > n_pixels:
        idx_valid = rng.choice(idx_valid, size=n_pixels, replace=False)
    points_cam = backproject(pix_flat[idx_valid], d_flat[idx_valid], k)
    weights = w_flat[idx_valid]

    scales = pst.scales.copy()
    best = initial.copy()
    zero = np.zeros((1, 6))
    best_cost = float(_candidate_costs(best, zero, points_cam, volume, weights)[0])
    trace = [best_cost]

    for _ in range(n_iterations):
        offsets = pst.particles * scales
        all_offsets = np.concatenate([zero, offsets], axis=0)
        costs = _candidate_costs(best, all_offsets, points_cam, volume, weights)
        winner = int(np.argmin(costs))
        if winner > 0 and costs[winner] < costs[0]:
            w = pst.particles[winner - 1]
            best = best.compose(Pose.from_tangent(offsets[winner - 1]))
            best_cost = min(best_cost, float(costs[winner]))
            # success: widen productive axes, tighten the idle ones
            used = np.abs(w) >= 0.3
            scales[used] *= pst.expand
            scales[~used] *= pst.refine
        else:
            # stall: focus the swarm near the current best
            scales *= pst.contract
        scales = np.clip(scales, pst.scale_min, pst.scale_max)
        trace.append(best_cost)

    _, inliers = frame_cost(best, depth, k, volume, max_pixels=n_pixels, rng=rng)
    return TrackResult(
        pose=best,
        final_cost=best_cost,
        iterations_used=n_iterations,
        inlier_fraction=inliers,
        cost_trace=trace,
    )
