import numpy as np
import pytest

from denserecon.datasets import (
    DataError,
    Frame,
    KeyframeStore,
    associate,
    load_tum_sequence,
    load_tum_trajectory,
    maybe_insert_keyframe,
    write_tum_sequence,
)
from denserecon.geometry import Intrinsics, Pose, look_at
from denserecon.synthetic import make_box_room, make_orbit_trajectory, render_depth_rgb

# depth_scale 4096 keeps raw/scale binary-exact for representable depths
K = Intrinsics(fx=60.0, fy=60.0, cx=32.0, cy=24.0, width=64, height=48,
               depth_scale=4096.0)


def make_frames(n=4, quantize=True):
    """Frames whose pixel values survive PNG quantization exactly."""
    rng = np.random.default_rng(0)
    frames = []
    for i in range(n):
        rgb = rng.integers(0, 256, size=(K.height, K.width, 3)) / 255.0
        raw = rng.integers(0, 4096 * 4, size=(K.height, K.width))
        raw[rng.uniform(size=raw.shape) < 0.05] = 0
        depth = raw / K.depth_scale
        frames.append(Frame(i, 10.0 + i * 0.05, rgb, depth, K))
    return frames


def test_depth_unit_conversion(tmp_path):
    frames = [make_frames(1)[0]]
    frames[0].depth[:] = 5000.0 / 4096.0  # raw 5000
    write_tum_sequence(str(tmp_path), frames)
    loaded, skipped = load_tum_sequence(str(tmp_path), K)
    assert skipped == 0
    assert np.all(loaded[0].depth == 5000.0 / 4096.0)


def test_round_trip_bit_identical(tmp_path):
    frames = make_frames(4)
    poses = [Pose.identity() for _ in frames]
    write_tum_sequence(str(tmp_path), frames, poses)
    loaded, skipped = load_tum_sequence(str(tmp_path), K)
    assert skipped == 0
    assert len(loaded) == 4
    for orig, back in zip(frames, loaded):
        assert np.array_equal(orig.depth, back.depth)
        assert np.array_equal(orig.rgb, back.rgb)
        assert back.timestamp == pytest.approx(orig.timestamp, abs=1e-6)


def test_association_thresholds():
    a = [(0.0, "a0"), (1.0, "a1"), (2.0, "a2")]
    b = [(0.005, "b0"), (1.05, "b1"), (2.004, "b2")]
    matches = associate(a, b, max_diff=0.02)
    # 5 ms apart -> associated; 50 ms apart -> skipped
    assert (0, 0) in matches
    assert (2, 2) in matches
    assert all(ia != 1 for ia, _ in matches)


def test_association_is_greedy_nearest():
    a = [(0.0, "a0"), (0.010, "a1")]
    b = [(0.008, "b0")]
    matches = associate(a, b, max_diff=0.02)
    assert matches == [(1, 0)]


def test_missing_files_raise(tmp_path):
    with pytest.raises(DataError):
        load_tum_sequence(str(tmp_path), K)


def test_trajectory_ground_truth_round_trip(tmp_path):
    frames = make_frames(3)
    rng = np.random.default_rng(1)
    poses = [
        look_at(rng.uniform(1, 3, 3), rng.uniform(1, 3, 3) + [1, 0, 0])
        for _ in frames
    ]
    write_tum_sequence(str(tmp_path), frames, poses)
    gt = load_tum_trajectory(str(tmp_path / "groundtruth.txt"))
    assert len(gt) == 3
    for (t, p), orig in zip(gt, poses):
        assert np.abs(p.translation - orig.translation).max() < 1e-7
        assert p.rotation_angle_to(orig) < 1e-7


def test_keyframe_cadence():
    store = KeyframeStore()
    rng = np.random.default_rng(2)
    scene_frames = make_frames(10)
    for fr in scene_frames:
        maybe_insert_keyframe(store, fr, Pose.identity(), every_k=5, rng=rng)
    assert [kf.frame_index for kf in store.keyframes] == [0, 5]


def test_keyframe_retention_fraction():
    K_vga = Intrinsics(fx=525.0, fy=525.0, cx=319.5, cy=239.5, width=640, height=480)
    rng = np.random.default_rng(3)
    depth = np.ones((480, 640))
    rgb = np.zeros((480, 640, 3))
    frame = Frame(0, 0.0, rgb, depth, K_vga)
    store = KeyframeStore(retention_fraction=0.05)
    kf = store.insert(frame, Pose.identity(), rng)
    expected = 0.05 * 640 * 480
    assert abs(len(kf.depth) - expected) <= 0.01 * expected


def test_keyframe_full_retention():
    rng = np.random.default_rng(4)
    frame = make_frames(1)[0]
    store = KeyframeStore()
    kf = store.insert(frame, Pose.identity(), rng, fraction=1.0)
    assert len(kf.depth) == int((frame.depth > 0).sum())
    # retained values match the frame at the recorded coordinates
    i, j = kf.pixels[:, 0], kf.pixels[:, 1]
    assert np.array_equal(kf.depth, frame.depth[j, i])
    assert np.array_equal(kf.rgb, frame.rgb[j, i])


def test_keyframe_all_invalid_raises():
    frame = make_frames(1)[0]
    frame.depth[:] = 0.0
    store = KeyframeStore()
    with pytest.raises(DataError):
        store.insert(frame, Pose.identity(), np.random.default_rng(5))


def test_loader_deterministic(tmp_path):
    scene = make_box_room()
    pose = make_orbit_trajectory(scene, 3)[0]
    depth, rgb = render_depth_rgb(scene, pose, K)
    frames = [Frame(0, 1.0, rgb, np.round(depth * 4096) / 4096, K)]
    write_tum_sequence(str(tmp_path), frames)
    a, _ = load_tum_sequence(str(tmp_path), K)
    b, _ = load_tum_sequence(str(tmp_path), K)
    assert np.array_equal(a[0].depth, b[0].depth)
    assert np.array_equal(a[0].rgb, b[0].rgb)
