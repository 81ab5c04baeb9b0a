import numpy as np
import pytest

from denserecon.geometry import Intrinsics, Pose, backproject, pixel_grid
from denserecon.synthetic import (
    Box,
    Sphere,
    SyntheticScene,
    make_box_room,
    make_orbit_trajectory,
    render_depth_rgb,
    render_synthetic,
)

K = Intrinsics(fx=100.0, fy=100.0, cx=60.0, cy=45.0, width=120, height=90)


def plain_room():
    return SyntheticScene(
        room_lo=(0.0, 0.0, 0.0),
        room_hi=(4.0, 4.0, 3.0),
        wall_albedos=tuple((i / 10, i / 10, i / 10) for i in range(1, 7)),
    )


def test_frontal_wall_depth():
    scene = plain_room()
    # camera at x=2 looking along +x: wall at x=4 is 2 m ahead
    pose = Pose(
        np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]]).T,
        [2.0, 2.0, 1.5],
    )
    # build a pose whose forward (+z cam) is +x world
    from denserecon.geometry import look_at

    pose = look_at([2.0, 2.0, 1.5], [4.0, 2.0, 1.5])
    depth, rgb = render_depth_rgb(scene, pose, K)
    # principal-point ray is exactly frontal
    assert depth[K.height // 2, K.width // 2] == pytest.approx(2.0, abs=1e-12)
    # z-depth is constant across the frontal wall
    assert np.abs(depth - 2.0).max() < 1e-9


def test_sphere_min_depth():
    scene = plain_room()
    scene.spheres.append(Sphere((2.0, 2.0, 1.5), 0.5, (1.0, 0.0, 0.0)))
    from denserecon.geometry import look_at

    pose = look_at([0.5, 2.0, 1.5], [2.0, 2.0, 1.5])
    depth, rgb = render_depth_rgb(scene, pose, K)
    center_depth = depth[K.height // 2, K.width // 2]
    assert center_depth == pytest.approx(1.5 - 0.5, abs=1e-12)
    assert np.allclose(rgb[K.height // 2, K.width // 2], [1.0, 0.0, 0.0])


def test_rendered_depth_is_sdf_root():
    scene = make_box_room()
    poses = make_orbit_trajectory(scene, 8)
    rng = np.random.default_rng(0)
    for pose in poses[:3]:
        depth, _ = render_depth_rgb(scene, pose, K)
        pix = pixel_grid(K).reshape(-1, 2)
        sel = rng.choice(len(pix), size=50, replace=False)
        d = depth.reshape(-1)[sel]
        pts_cam = backproject(pix[sel], d, K)
        pts = pose.apply(pts_cam)
        sdf_at_hit = scene.sdf(pts)
        assert np.abs(sdf_at_hit).max() < 1e-6
        # no earlier surface crossing: sdf positive strictly before the hit
        for frac in (0.25, 0.5, 0.9):
            inner = pose.apply(backproject(pix[sel], d * frac, K))
            assert scene.sdf(inner).min() > 0


def test_depth_noise_and_dropout():
    scene = make_box_room()
    pose = make_orbit_trajectory(scene, 4)[0]
    rng = np.random.default_rng(1)
    depth, _ = render_synthetic(scene, pose, K, depth_noise=0.01, dropout=0.1, rng=rng)
    clean, _ = render_depth_rgb(scene, pose, K)
    holes = depth == 0.0
    assert 0.05 < holes.mean() < 0.2
    diff = np.abs(depth[~holes] - clean[~holes])
    assert diff.max() < 0.1
    assert diff.mean() > 1e-4


def test_noise_requires_rng():
    scene = make_box_room()
    pose = make_orbit_trajectory(scene, 4)[0]
    with pytest.raises(ValueError):
        render_synthetic(scene, pose, K, depth_noise=0.01)


def test_sdf_signs():
    scene = make_box_room()
    # room center is free space
    assert scene.sdf(np.array([2.5, 2.0, 1.5])) > 0
    # outside the room is negative
    assert scene.sdf(np.array([-1.0, 2.0, 1.5])) < 0
    # inside a furniture box is negative
    b = scene.boxes[0]
    inside = (np.asarray(b.lo) + np.asarray(b.hi)) / 2
    assert scene.sdf(inside) < 0


def test_box_sdf_exact_values():
    b = Box((0.0, 0.0, 0.0), (2.0, 2.0, 2.0), (1, 1, 1))
    assert b.sdf(np.array([3.0, 1.0, 1.0])) == pytest.approx(1.0)
    assert b.sdf(np.array([1.0, 1.0, 1.0])) == pytest.approx(-1.0)
    assert b.sdf(np.array([3.0, 3.0, 1.0])) == pytest.approx(np.sqrt(2.0))


def test_orbit_trajectory_is_smooth():
    scene = make_box_room()
    poses = make_orbit_trajectory(scene, 60)
    steps = [
        poses[i].translation_distance_to(poses[i + 1]) for i in range(len(poses) - 1)
    ]
    assert max(steps) < 0.12
    angles = [poses[i].rotation_angle_to(poses[i + 1]) for i in range(len(poses) - 1)]
    assert max(angles) < 0.15
