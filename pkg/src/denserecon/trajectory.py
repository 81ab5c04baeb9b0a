"""TUM-format trajectory text I/O."""

from __future__ import annotations

from .geometry import Pose, matrix_to_quaternion


def write_trajectory(path: str, stamped_poses: list[tuple[float, Pose]]) -> None:
    """Write 'timestamp tx ty tz qx qy qz qw' lines, 9 significant digits."""
    try:
        with open(path, "w") as f:
            f.write("# timestamp tx ty tz qx qy qz qw\n")
            for t, pose in stamped_poses:
                q = matrix_to_quaternion(pose.rotation)
                tx, ty, tz = pose.translation
                f.write(
                    f"{t:.6f} {tx:.9g} {ty:.9g} {tz:.9g} "
                    f"{q[0]:.9g} {q[1]:.9g} {q[2]:.9g} {q[3]:.9g}\n"
                )
    except OSError as e:
        raise OSError(f"failed writing trajectory {path}: {e}") from e
