"""Back-end pose refinement against the frozen mixed field.

A single MLP maps (normalized keyframe index, initial pose tangent) to a
6-parameter pose correction; training backpropagates the rendering losses
through the pose chain into the MLP only.  Widening the geometry-base
clamp (factor k > 1) amplifies gradients near the reconstructed surface,
which is applied here and nowhere else.  A traditional variant optimizes
independent per-keyframe corrections as the ablation baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .datasets import KeyframeStore
from .field import (
    EmptyBatchError,
    LossWeights,
    MixedField,
    NumericsError,
    compute_loss,
    sample_batch,
)
from .geometry import Pose
from .nn import Mlp, ParamStore


@dataclass
class BaConfig:
    iterations: int = 5  # per round
    amplification: float = 2.0  # k; 1 disables gradient amplification
    mode: str = "rba"  # rba | tba
    compose: str = "exp"  # exp | additive
    n_pixels: int = 2048
    n_uniform: int = 11
    n_near: int = 48
    lr: float = 1e-3
    output_gain: float = 0.05
    random_kick: float = 0.0  # translation kick per round (RA baseline)

    def __post_init__(self):
        if self.amplification < 1.0:
            raise ValueError("amplification factor must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.mode not in ("rba", "tba"):
            raise ValueError(f"unknown BA mode {self.mode!r}")
        if self.compose not in ("exp", "additive"):
            raise ValueError(f"unknown compose mode {self.compose!r}")


def normalized_index(i: int, count: int) -> float:
    """Keyframe ordinal mapped to [-1, 1]."""
    if count <= 1:
        return 0.0
    return -1.0 + 2.0 * i / (count - 1)


class BaMlp:
    """Residual-pose network: (N(i), initial tangent) -> 6-vector."""

    def __init__(self, rng: np.random.Generator, cfg: BaConfig,
                 hidden: int = 64, layers: int = 3):
        self.cfg = cfg
        self.store = ParamStore()
        sizes = [7] + [hidden] * layers + [6]
        self.net = Mlp(self.store, "pose", sizes, rng, head="identity",
                       lr=cfg.lr, output_gain=cfg.output_gain)

    def residuals(self, initial: list[Pose]) -> Tensor:
        """(Nk, 6) pose corrections for the whole keyframe set."""
        count = len(initial)
        inputs = np.empty((count, 7))
        for i, pose in enumerate(initial):
            inputs[i, 0] = normalized_index(i, count)
            inputs[i, 1:] = pose.tangent()
        return self.net(Tensor(inputs))

    def residual_one(self, index: int, count: int, initial: Pose) -> np.ndarray:
        inp = np.empty((1, 7))
        inp[0, 0] = normalized_index(index, count)
        inp[0, 1:] = initial.tangent()
        return self.net(Tensor(inp)).data[0]


def compose_pose_tensors(residual: Tensor, initial: list[Pose], compose: str):
    """Apply 6-vector corrections to initial poses, differentiably.

    ``exp`` left-composes the exponential of the correction; ``additive``
    adds in tangent space and re-exponentiates.
    """
    rot0 = np.stack([p.rotation for p in initial])
    t0 = np.stack([p.translation for p in initial])
    if compose == "additive":
        xi0 = np.stack([p.tangent() for p in initial])
        xi = ad.add(residual, xi0)
        rot = ad.rotvec_to_matrix_batch(xi[:, :3])
        trans = xi[:, 3:]
        return rot, trans
    delta_rot = ad.rotvec_to_matrix_batch(residual[:, :3])
    rot = ad.matmul(delta_rot, Tensor(rot0))
    spun = ad.matmul(delta_rot, Tensor(t0[:, :, None]))
    trans = ad.add(ad.reshape(spun, (-1, 3)), residual[:, 3:])
    return rot, trans


def refined_pose(mlp: BaMlp, index: int, count: int, initial: Pose) -> Pose:
    """Current refinement of one keyframe pose (no gradients)."""
    if not 0 <= index < count:
        raise IndexError("keyframe index out of range")
    res = mlp.residual_one(index, count, initial)
    if np.all(res == 0.0):
        return initial.copy()
    return _apply_residual_np(res, initial, mlp.cfg.compose)


def _apply_residual_np(res: np.ndarray, pose: Pose, compose: str) -> Pose:
    if compose == "additive":
        return Pose.from_tangent(pose.tangent() + res)
    return Pose.from_tangent(res).compose(pose)


def _poses_from_tensors(rot: Tensor, trans: Tensor) -> list[Pose]:
    return [Pose(rot.data[i], trans.data[i]) for i in range(rot.data.shape[0])]


class TraditionalBa:
    """Independent per-keyframe 6-vector corrections (ablation baseline)."""

    def __init__(self, n_keyframes: int, cfg: BaConfig):
        self.cfg = cfg
        self.store = ParamStore()
        self.delta = self.store.add("tba/delta", np.zeros((n_keyframes, 6)),
                                    lr=cfg.lr)

    def pose_tensors(self, initial: list[Pose]):
        return compose_pose_tensors(self.delta, initial, self.cfg.compose)


def _run_round(optimizer_store: ParamStore, pose_tensor_fn, field: MixedField,
               store: KeyframeStore, cfg: BaConfig, weights: LossWeights,
               rng: np.random.Generator):
    """Shared BA loop: sample, render, backprop into pose parameters only."""
    initial = store.poses()
    snapshot = optimizer_store.snapshot()
    trace = []
    for it in range(cfg.iterations):
        rot, trans = pose_tensor_fn(initial)
        batch = sample_batch(store, rng, cfg.n_pixels, cfg.n_uniform, cfg.n_near,
                             field.tr_i)
        total, breakdown = compute_loss(
            field, batch, (rot, trans), weights, k=cfg.amplification,
            include_smoothness=False,
        )
        if not np.isfinite(total.item()):
            optimizer_store.restore(snapshot)
            raise NumericsError(f"non-finite BA loss at iteration {it}")
        optimizer_store.zero_grad()
        total.backward()
        before = {k: t.data.copy() for k, t in optimizer_store.params.items()}
        optimizer_store.adam_step()
        delta = float(
            np.mean(
                [np.abs(t.data - before[k]).max()
                 for k, t in optimizer_store.params.items()]
            )
        )
        breakdown["mean_param_delta"] = delta
        trace.append(breakdown)
    rot, trans = pose_tensor_fn(initial)
    refined = _poses_from_tensors(rot, trans)
    mean_shift = float(
        np.mean([p.translation_distance_to(q) for p, q in zip(initial, refined)])
    ) if initial else 0.0
    return refined, trace, mean_shift


def ba_round(mlp: BaMlp, field: MixedField, store: KeyframeStore, cfg: BaConfig,
             weights: LossWeights, rng: np.random.Generator):
    """One residual-BA round; keyframe poses are overwritten at the end."""
    if cfg.random_kick > 0.0 and len(store) > 0:
        _kick_poses(store, cfg.random_kick, rng)
    if cfg.iterations == 0 or len(store) == 0:
        return []

    def pose_fn(initial):
        return compose_pose_tensors(mlp.residuals(initial), initial, cfg.compose)

    refined, trace, mean_shift = _run_round(
        mlp.store, pose_fn, field, store, cfg, weights, rng
    )
    store.set_poses(refined)
    for row in trace:
        row["mean_pose_shift"] = mean_shift
    return trace


def traditional_ba_round(field: MixedField, store: KeyframeStore, cfg: BaConfig,
                         weights: LossWeights, rng: np.random.Generator):
    """One round of per-keyframe direct pose optimization.

    Corrections start from zero each round (poses fold in between rounds),
    keeping each keyframe's optimization independent.
    """
    if cfg.random_kick > 0.0 and len(store) > 0:
        _kick_poses(store, cfg.random_kick, rng)
    if cfg.iterations == 0 or len(store) == 0:
        return []
    tba = TraditionalBa(len(store), cfg)
    refined, trace, mean_shift = _run_round(
        tba.store, tba.pose_tensors, field, store, cfg, weights, rng
    )
    store.set_poses(refined)
    for row in trace:
        row["mean_pose_shift"] = mean_shift
    return trace


def _kick_poses(store: KeyframeStore, distance: float, rng: np.random.Generator):
    """Randomized-direction amplification baseline: shove every pose."""
    for kf in store.keyframes:
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        kf.pose = Pose(kf.pose.rotation, kf.pose.translation + distance * direction)
