import numpy as np
import pytest

from denserecon.geometry import Intrinsics, Pose, look_at
from denserecon.synthetic import make_box_room, render_depth_rgb
from denserecon.volume import MovingVolumeState, TsdfVolume, make_moving_volume

K = Intrinsics(fx=80.0, fy=80.0, cx=40.0, cy=30.0, width=80, height=60)


def wall_frame(distance=2.0):
    """Frontal wall: constant depth image, mid-gray color."""
    depth = np.full((K.height, K.width), distance)
    rgb = np.full((K.height, K.width, 3), 0.5)
    return rgb, depth


def make_volume():
    # 1 m cube in front of the camera, wall at z = 2
    return TsdfVolume(origin=(-0.5, -0.5, 1.5), voxel_size=0.05, dims=(21, 21, 21),
                      truncation=0.15)


def test_default_state():
    vol = make_volume()
    assert np.all(vol.tsdf == 1.0)
    assert np.all(vol.weight == 0.0)
    assert np.all(vol.rgb == 0.0)


def test_integrate_zero_crossing_and_clamp():
    vol = make_volume()
    rgb, depth = wall_frame(2.0)
    vol.integrate(rgb, depth, K, Pose.identity())
    # voxel exactly on the wall -> tsdf 0
    g = vol.world_to_grid([[0.0, 0.0, 2.0]])[0].astype(int)
    assert vol.tsdf[tuple(g)] == pytest.approx(0.0, abs=1e-12)
    # voxel one full truncation in front -> +1
    g = vol.world_to_grid([[0.0, 0.0, 2.0 - vol.truncation]])[0]
    g = np.round(g).astype(int)
    assert vol.tsdf[tuple(g)] == pytest.approx(1.0)
    # behind the wall deeper than truncation stays untouched (weight 0)
    g = vol.world_to_grid([[0.0, 0.0, 2.0 + 2 * vol.truncation]])[0]
    g = np.round(g).astype(int)
    assert vol.weight[tuple(g)] == 0.0
    assert vol.tsdf[tuple(g)] == 1.0


def test_two_frame_running_average():
    vol = make_volume()
    rgb, _ = wall_frame()
    # contributions +0.2 then +0.6 at the same voxel via shifted walls
    d1 = np.full((K.height, K.width), 2.0 + 0.2 * vol.truncation)
    d2 = np.full((K.height, K.width), 2.0 + 0.6 * vol.truncation)
    vol.integrate(rgb, d1, K, Pose.identity())
    probe = [[0.0, 0.0, 2.0]]
    g = tuple(vol.world_to_grid(probe)[0].astype(int))
    assert vol.tsdf[g] == pytest.approx(0.2)
    vol.integrate(rgb, d2, K, Pose.identity())
    assert vol.tsdf[g] == pytest.approx(0.4)
    assert vol.weight[g] == 2.0


def test_fusion_idempotent_on_repeat():
    vol = make_volume()
    rgb, depth = wall_frame(2.0)
    vol.integrate(rgb, depth, K, Pose.identity())
    before = vol.tsdf.copy()
    vol.integrate(rgb, depth, K, Pose.identity())
    assert np.abs(vol.tsdf - before).max() < 1e-7


def test_fusion_order_independent_for_equal_weights():
    scene = make_box_room()
    poses = [
        look_at([2.0, 2.0, 1.5], [4.0, 2.0, 1.5]),
        look_at([2.2, 2.0, 1.5], [4.0, 2.4, 1.5]),
        look_at([2.4, 1.8, 1.4], [4.0, 1.6, 1.6]),
    ]
    frames = [render_depth_rgb(scene, p, K) for p in poses]

    vol_a = TsdfVolume((1.0, 0.5, 0.2), 0.08, (40, 40, 32), 0.2)
    vol_b = TsdfVolume((1.0, 0.5, 0.2), 0.08, (40, 40, 32), 0.2)
    for (d, c), p in zip(frames, poses):
        vol_a.integrate(c, d, K, p)
    for (d, c), p in zip(frames[::-1], poses[::-1]):
        vol_b.integrate(c, d, K, p)
    assert np.abs(vol_a.tsdf - vol_b.tsdf).max() < 1e-6
    assert np.array_equal(vol_a.weight, vol_b.weight)


def test_query_phi_defaults_and_cross_check():
    vol = make_volume()
    rgb, depth = wall_frame(2.0)
    vol.integrate(rgb, depth, K, Pose.identity())

    # far outside -> 1
    assert vol.query_phi([[50.0, 0.0, 0.0]])[0] == 1.0
    # at the fused surface -> ~0
    assert abs(vol.query_phi([[0.0, 0.0, 2.0]])[0]) < 1e-9

    rng = np.random.default_rng(0)
    pts = rng.uniform([-0.45, -0.45, 1.55], [0.45, 0.45, 2.35], size=(1000, 3))
    phi = vol.query_phi(pts)
    tsdf, _, weight, inside = vol.trilerp(pts)
    sel = inside & (weight > 0)
    assert np.array_equal(phi[sel], tsdf[sel])
    assert np.all(phi[~sel] == 1.0)


def test_snapshot_round_trip(tmp_path):
    vol = make_volume()
    rgb, depth = wall_frame(2.0)
    vol.integrate(rgb, depth, K, Pose.identity())
    path = tmp_path / "vol.bin"
    vol.save(path)
    back = TsdfVolume.load(path)
    assert back.dims == vol.dims
    assert np.array_equal(back.tsdf, vol.tsdf)
    assert np.array_equal(back.rgb, vol.rgb)
    assert np.array_equal(back.weight, vol.weight)
    assert back.voxel_size == vol.voxel_size
    assert back.truncation == vol.truncation


# -- moving volume -------------------------------------------------------


def fill_random(vol: TsdfVolume, seed=1):
    rng = np.random.default_rng(seed)
    vol.tsdf = rng.uniform(-1, 1, vol.tsdf.shape)
    vol.rgb = rng.uniform(0, 1, vol.rgb.shape)
    vol.weight = rng.uniform(0, 5, vol.weight.shape)


def make_state():
    state = make_moving_volume(Pose.identity(), extent=(2.0, 2.0, 2.0), resolution=21,
                               shift_threshold=0.5)
    fill_random(state.volume)
    return state


def pose_at(x, y=0.0, z=0.0):
    return Pose(np.eye(3), [x, y, z])


def test_no_shift_below_threshold():
    state = make_state()
    before_t = state.volume.tsdf.copy()
    before_origin = state.volume.origin.copy()
    moved = state.maybe_shift(pose_at(0.25, 0.25, 0.25))
    assert not moved
    assert np.array_equal(state.volume.tsdf, before_t)
    assert np.array_equal(state.volume.origin, before_origin)


def test_shift_x_preserves_overlap_and_vacates():
    state = make_state()
    vol = state.volume
    before = vol.tsdf.copy()
    before_w = vol.weight.copy()
    d = 0.75  # 1.5 * threshold
    steps = int(round(d / vol.voxel_size))
    moved = state.maybe_shift(pose_at(d))
    assert moved
    # overlap copied bit-identically
    assert np.array_equal(vol.tsdf[: 21 - steps], before[steps:])
    assert np.array_equal(vol.weight[: 21 - steps], before_w[steps:])
    # vacated slab has the default state
    assert np.all(vol.tsdf[21 - steps :] == 1.0)
    assert np.all(vol.weight[21 - steps :] == 0.0)
    assert np.all(vol.rgb[21 - steps :] == 0.0)
    # anchor snapped to the new pose
    assert state.anchor_pose.translation[0] == d


def test_world_positions_preserved_after_shift():
    # values at surviving world positions are identical before/after
    state = make_state()
    vol = state.volume
    before = vol.copy()
    state.maybe_shift(pose_at(0.75, 0.0, 0.0))
    # sample on the surviving lattice
    for idx in [(0, 3, 4), (2, 10, 10), (4, 20, 0)]:
        world = vol.origin + np.array(idx) * vol.voxel_size
        old_idx = np.round((world - before.origin) / before.voxel_size).astype(int)
        if np.all(old_idx >= 0) and np.all(old_idx < 21):
            assert vol.tsdf[idx] == before.tsdf[tuple(old_idx)]


def test_shift_replay_returns_home():
    state = make_state()
    vol = state.volume
    original = vol.copy()
    steps = int(round(0.75 / vol.voxel_size))
    state.maybe_shift(pose_at(0.75))
    state.maybe_shift(pose_at(0.0))
    assert np.allclose(vol.origin, original.origin)
    # voxels never vacated keep their values exactly
    assert np.array_equal(vol.tsdf[steps:], original.tsdf[steps:])
    assert np.array_equal(vol.rgb[steps:], original.rgb[steps:])
    # once-vacated voxels are default
    assert np.all(vol.tsdf[:steps] == 1.0)
    assert np.all(vol.weight[:steps] == 0.0)


def test_multi_axis_shift():
    state = make_state()
    vol = state.volume
    before = vol.copy()
    state.maybe_shift(pose_at(0.75, -0.75, 0.0))
    sx = int(round(0.75 / vol.voxel_size))
    assert np.array_equal(
        vol.tsdf[: 21 - sx, sx:, :], before.tsdf[sx:, : 21 - sx, :]
    )
    assert np.all(vol.tsdf[21 - sx :, :, :] == 1.0)
    assert np.all(vol.tsdf[:, :sx, :] == 1.0)
