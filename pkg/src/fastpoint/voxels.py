"""Dense voxelization of a cropped point cloud.

Stored per-point feature is (dx, dy, dz from voxel center, reflectance).
Overflowing voxels keep a seeded uniform random subset so runs replay
exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .kitti import PointCloud

_DUMP_MAGIC = b"FPVX"
_DUMP_VERSION = 1


class PointOutOfRange(ValueError):
    """A point fell outside the voxel range (precondition violation)."""


@dataclass(frozen=True)
class VoxelSpec:
    axis_range: tuple    # ((x0,x1), (y0,y1), (z0,z1)) meters
    voxel_size: tuple    # (v_l, v_w, v_h) meters
    max_points_per_voxel: int

    def __post_init__(self):
        if self.max_points_per_voxel < 1:
            raise ValueError("max_points_per_voxel must be >= 1")
        for (lo, hi), v in zip(self.axis_range, self.voxel_size):
            n = (hi - lo) / v
            if abs(n - round(n)) > 1e-6:
                raise ValueError(f"extent {hi - lo} not divisible by voxel size {v}")

    @property
    def dims(self) -> tuple:
        return tuple(int(round((hi - lo) / v))
                     for (lo, hi), v in zip(self.axis_range, self.voxel_size))

    @property
    def mins(self) -> np.ndarray:
        return np.array([r[0] for r in self.axis_range])

    def voxel_center(self, idx) -> np.ndarray:
        return self.mins + (np.asarray(idx) + 0.5) * np.asarray(self.voxel_size)


@dataclass
class VoxelGrid:
    spec: VoxelSpec
    # voxel index -> stored (n, 4) offsets-from-center + reflectance
    points_by_voxel: dict
    # pre-capping point count per occupied voxel
    counts: dict

    @property
    def dims(self) -> tuple:
        return self.spec.dims

    def stored_count(self, idx) -> int:
        pts = self.points_by_voxel.get(tuple(idx))
        return 0 if pts is None else len(pts)


def voxelize(pc: PointCloud, spec: VoxelSpec, seed: int) -> VoxelGrid:
    """Bucket points into voxels; cap each voxel at max_points_per_voxel."""
    dims = np.array(spec.dims)
    pts = pc.points
    idx = np.floor((pts[:, :3] - spec.mins) / np.asarray(spec.voxel_size)).astype(np.int64)
    if len(pts) and (np.any(idx < 0) or np.any(idx >= dims)):
        bad = np.where(np.any((idx < 0) | (idx >= dims), axis=1))[0][0]
        raise PointOutOfRange(f"point {pts[bad, :3]} outside voxel range")

    order = {}
    for i, key in enumerate(map(tuple, idx)):
        order.setdefault(key, []).append(i)

    rng = np.random.default_rng(seed)
    points_by_voxel, counts = {}, {}
    cap = spec.max_points_per_voxel
    # iterate in sorted voxel order, and sample overflowing voxels from their
    # points in coordinate-sorted order, so the result is input-order independent
    for key in sorted(order):
        rows = order[key]
        counts[key] = len(rows)
        sel = pts[rows]
        if len(rows) > cap:
            sel = sel[np.lexsort(sel.T)]
            sel = sel[np.sort(rng.choice(len(sel), size=cap, replace=False))]
        center = spec.voxel_center(key)
        stored = sel.copy()
        stored[:, :3] = sel[:, :3] - center
        points_by_voxel[key] = stored
    return VoxelGrid(spec, points_by_voxel, counts)


def to_dense(grid: VoxelGrid) -> np.ndarray:
    """(n_x, n_y, n_z, max_points, 4) array; empty slots zero."""
    nx, ny, nz = grid.dims
    cap = grid.spec.max_points_per_voxel
    dense = np.zeros((nx, ny, nz, cap, 4))
    for key, pts in grid.points_by_voxel.items():
        dense[key][: len(pts)] = pts
    return dense


def slot_counts(grid: VoxelGrid) -> np.ndarray:
    """(n_x, n_y, n_z) stored-point count per voxel."""
    out = np.zeros(grid.dims, dtype=np.int64)
    for key, pts in grid.points_by_voxel.items():
        out[key] = len(pts)
    return out


def from_dense(dense: np.ndarray, counts: np.ndarray, spec: VoxelSpec) -> VoxelGrid:
    """Re-sparsify a dense tensor (inverse of to_dense given counts)."""
    points_by_voxel, pre = {}, {}
    for key in zip(*np.nonzero(counts)):
        n = int(counts[key])
        points_by_voxel[key] = dense[key][:n].copy()
        pre[key] = n
    return VoxelGrid(spec, points_by_voxel, pre)


# ------------------------------------------------------------- binary dump
# Header: magic, version, dims (3 x u32), range (6 x f64), voxel size
# (3 x f64), cap (u32), record count (u64). Records: index (3 x u32),
# n (u32), then n * 4 f64 point values.
def dump_grid(path, grid: VoxelGrid) -> None:
    spec = grid.spec
    with open(path, "wb") as f:
        f.write(_DUMP_MAGIC)
        f.write(struct.pack("<I", _DUMP_VERSION))
        f.write(struct.pack("<3I", *grid.dims))
        flat_range = [v for pair in spec.axis_range for v in pair]
        f.write(struct.pack("<6d", *flat_range))
        f.write(struct.pack("<3d", *spec.voxel_size))
        f.write(struct.pack("<I", spec.max_points_per_voxel))
        f.write(struct.pack("<Q", len(grid.points_by_voxel)))
        for key in sorted(grid.points_by_voxel):
            pts = grid.points_by_voxel[key]
            f.write(struct.pack("<3I", *key))
            f.write(struct.pack("<I", len(pts)))
            f.write(pts.astype("<f8").tobytes())


def load_grid(path) -> VoxelGrid:
    raw = Path(path).read_bytes()
    if raw[:4] != _DUMP_MAGIC:
        raise ValueError("not a voxel grid dump")
    off = 4
    (version,) = struct.unpack_from("<I", raw, off); off += 4
    if version != _DUMP_VERSION:
        raise ValueError(f"unsupported dump version {version}")
    dims = struct.unpack_from("<3I", raw, off); off += 12
    rng_vals = struct.unpack_from("<6d", raw, off); off += 48
    vsize = struct.unpack_from("<3d", raw, off); off += 24
    (cap,) = struct.unpack_from("<I", raw, off); off += 4
    (n_rec,) = struct.unpack_from("<Q", raw, off); off += 8
    spec = VoxelSpec(tuple((rng_vals[2 * i], rng_vals[2 * i + 1]) for i in range(3)),
                     tuple(vsize), cap)
    assert spec.dims == dims
    points_by_voxel, counts = {}, {}
    for _ in range(n_rec):
        key = struct.unpack_from("<3I", raw, off); off += 12
        (n,) = struct.unpack_from("<I", raw, off); off += 4
        pts = np.frombuffer(raw, dtype="<f8", count=n * 4, offset=off).reshape(n, 4)
        off += n * 32
        points_by_voxel[key] = pts.copy()
        counts[key] = n
    return VoxelGrid(spec, points_by_voxel, counts)
