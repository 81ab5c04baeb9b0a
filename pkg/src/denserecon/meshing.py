"""Mesh extraction from the mixed field and PLY export.

Marching cubes runs over field TSDF values sampled on a dense grid
(finer than the coarse grid so residual detail survives); triangles in
space never observed by any depth frame are culled, and vertex colors
come from the field's RGB output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from skimage import measure


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int
    colors: np.ndarray | None = None  # (V, 3) in [0, 1]

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0


def empty_mesh() -> TriangleMesh:
    return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64),
                        np.zeros((0, 3)))


def extract_mesh(field, resolution: int, bounds_lo=None, bounds_hi=None,
                 observation_mask=None, batch: int = 65536) -> TriangleMesh:
    """Marching cubes over the field's TSDF on a dense grid.

    ``observation_mask`` is an optional ``(volume-like)`` object with
    ``origin``, ``voxel_size`` and a boolean ``mask`` array; triangles
    whose centroid falls in an unobserved cell are dropped.  A field
    with no zero crossing yields an empty mesh.
    """
    lo = np.asarray(bounds_lo if bounds_lo is not None else field.bounds_lo, float)
    hi = np.asarray(bounds_hi if bounds_hi is not None else field.bounds_hi, float)
    extent = hi - lo
    step = float(extent.max()) / (resolution - 1)
    dims = np.maximum((np.ceil(extent / step - 1e-9)).astype(int) + 1, 2)

    xs = lo[0] + np.arange(dims[0]) * step
    ys = lo[1] + np.arange(dims[1]) * step
    zs = lo[2] + np.arange(dims[2]) * step
    grid = np.empty(tuple(dims))
    pts_yz = np.stack(np.meshgrid(ys, zs, indexing="ij"), axis=-1).reshape(-1, 2)
    for ix, x in enumerate(xs):
        pts = np.concatenate(
            [np.full((len(pts_yz), 1), x), pts_yz], axis=1
        )
        vals = np.empty(len(pts))
        for start in range(0, len(pts), batch):
            chunk = pts[start : start + batch]
            tsdf, _, _ = field.query_np(chunk)
            vals[start : start + len(chunk)] = tsdf
        grid[ix] = vals.reshape(dims[1], dims[2])

    if grid.min() >= 0.0 or grid.max() <= 0.0:
        return empty_mesh()
    verts, faces, _, _ = measure.marching_cubes(grid, level=0.0, spacing=(step,) * 3)
    verts = verts + lo

    if observation_mask is not None:
        centroids = verts[faces].mean(axis=1)
        keep = observation_mask.observed(centroids)
        faces = faces[keep]
        used = np.unique(faces)
        remap = np.full(len(verts), -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        verts = verts[used]
        faces = remap[faces]
        if len(faces) == 0:
            return empty_mesh()

    colors = np.empty((len(verts), 3))
    for start in range(0, len(verts), batch):
        chunk = verts[start : start + batch]
        _, rgb, _ = field.query_np(chunk)
        colors[start : start + len(chunk)] = rgb
    return TriangleMesh(verts, faces.astype(np.int64), np.clip(colors, 0, 1))


@dataclass
class ObservationMask:
    """Boolean occupancy of observed space on a voxel grid."""

    origin: np.ndarray
    voxel_size: float
    mask: np.ndarray  # (nx, ny, nz) bool

    @staticmethod
    def from_volume(volume) -> "ObservationMask":
        return ObservationMask(volume.origin.copy(), volume.voxel_size,
                               volume.weight > 0.0)

    def observed(self, points: np.ndarray) -> np.ndarray:
        g = np.round((points - self.origin) / self.voxel_size).astype(np.int64)
        dims = np.array(self.mask.shape)
        inside = np.all((g >= 0) & (g < dims), axis=-1)
        gc = np.clip(g, 0, dims - 1)
        out = self.mask[gc[:, 0], gc[:, 1], gc[:, 2]]
        return out & inside


def export_ply(mesh: TriangleMesh, path) -> None:
    """Binary little-endian PLY with double positions and uchar colors."""
    n_v = len(mesh.vertices)
    n_f = len(mesh.faces)
    has_color = mesh.colors is not None and len(mesh.colors) == n_v
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {n_v}",
              "property double x", "property double y", "property double z"]
    if has_color:
        header += ["property uchar red", "property uchar green",
                   "property uchar blue"]
    header += [f"element face {n_f}", "property list uchar int vertex_indices",
               "end_header"]
    try:
        with open(path, "wb") as f:
            f.write(("\n".join(header) + "\n").encode("ascii"))
            if has_color:
                colors8 = np.clip(np.round(mesh.colors * 255.0), 0, 255).astype(np.uint8)
                vtype = np.dtype([("xyz", "<f8", 3), ("rgb", "u1", 3)])
                rec = np.empty(n_v, dtype=vtype)
                rec["xyz"] = mesh.vertices
                rec["rgb"] = colors8
            else:
                vtype = np.dtype([("xyz", "<f8", 3)])
                rec = np.empty(n_v, dtype=vtype)
                rec["xyz"] = mesh.vertices
            f.write(rec.tobytes())
            ftype = np.dtype([("n", "u1"), ("idx", "<i4", 3)])
            frec = np.empty(n_f, dtype=ftype)
            frec["n"] = 3
            frec["idx"] = mesh.faces
            f.write(frec.tobytes())
    except OSError as e:
        raise OSError(f"failed writing mesh {path}: {e}") from e


def load_ply(path) -> TriangleMesh:
    """Read meshes written by :func:`export_ply`."""
    with open(path, "rb") as f:
        line = f.readline().strip()
        if line != b"ply":
            raise ValueError(f"not a PLY file: {path}")
        n_v = n_f = 0
        has_color = False
        while True:
            line = f.readline().strip().decode("ascii")
            if line == "end_header":
                break
            parts = line.split()
            if parts[:2] == ["element", "vertex"]:
                n_v = int(parts[2])
            elif parts[:2] == ["element", "face"]:
                n_f = int(parts[2])
            elif parts[:3] == ["property", "uchar", "red"]:
                has_color = True
        if has_color:
            vtype = np.dtype([("xyz", "<f8", 3), ("rgb", "u1", 3)])
        else:
            vtype = np.dtype([("xyz", "<f8", 3)])
        rec = np.frombuffer(f.read(vtype.itemsize * n_v), dtype=vtype)
        ftype = np.dtype([("n", "u1"), ("idx", "<i4", 3)])
        frec = np.frombuffer(f.read(ftype.itemsize * n_f), dtype=ftype)
    colors = rec["rgb"].astype(np.float64) / 255.0 if has_color else None
    return TriangleMesh(
        vertices=rec["xyz"].astype(np.float64).copy(),
        faces=frec["idx"].astype(np.int64).copy(),
        colors=colors,
    )


def sdf_to_mesh(sdf_fn, lo, hi, resolution: int) -> TriangleMesh:
    """Marching cubes over an analytic signed-distance function.

    Used to build ground-truth meshes for synthetic scenes.
    """
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    extent = hi - lo
    step = float(extent.max()) / (resolution - 1)
    dims = np.maximum((np.ceil(extent / step - 1e-9)).astype(int) + 1, 2)
    xs, ys, zs = (lo[i] + np.arange(dims[i]) * step for i in range(3))
    pts = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1)
    grid = sdf_fn(pts.reshape(-1, 3)).reshape(tuple(dims))
    if grid.min() >= 0.0 or grid.max() <= 0.0:
        return empty_mesh()
    verts, faces, _, _ = measure.marching_cubes(grid, level=0.0, spacing=(step,) * 3)
    return TriangleMesh(verts + lo, faces.astype(np.int64), None)
