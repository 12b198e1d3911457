"""Seeded synthetic scenes: car-like cuboid shells plus clutter, used as a
desk-scale stand-in for real drives."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import geometry
from .geometry import Box3D
from .kitti import PointCloud


@dataclass(frozen=True)
class SceneSpec:
    axis_range: tuple = ((0.0, 25.6), (-12.8, 12.8), (-3.0, 1.0))
    n_objects: tuple = (1, 3)               # inclusive range per scene
    length_range: tuple = (3.4, 4.4)
    width_range: tuple = (1.5, 1.9)
    height_range: tuple = (1.4, 1.7)
    ground_z: float = -1.6
    surface_points: tuple = (120, 200)      # per object
    clutter_points: int = 300
    min_points: int = 40                    # every gt keeps at least this many


def _sample_shell(rng, box: Box3D, n: int) -> np.ndarray:
    """Points on the four side faces and roof of a cuboid, in world frame."""
    faces = rng.integers(0, 5, n)
    u = rng.uniform(-0.5, 0.5, n)
    v = rng.uniform(-0.5, 0.5, n)
    x = np.empty(n)
    y = np.empty(n)
    z = np.empty(n)
    for f in range(5):
        m = faces == f
        if f == 0:      # front
            x[m], y[m], z[m] = box.l / 2, u[m] * box.w, v[m] * box.h
        elif f == 1:    # rear
            x[m], y[m], z[m] = -box.l / 2, u[m] * box.w, v[m] * box.h
        elif f == 2:    # left
            x[m], y[m], z[m] = u[m] * box.l, box.w / 2, v[m] * box.h
        elif f == 3:    # right
            x[m], y[m], z[m] = u[m] * box.l, -box.w / 2, v[m] * box.h
        else:           # roof
            x[m], y[m], z[m] = u[m] * box.l, v[m] * box.w, box.h / 2
    # shrink slightly so shell points stay strictly interior
    local = np.column_stack([x, y, z]) * 0.999
    world = geometry.uncanonize_points(box, local)
    refl = rng.uniform(0.2, 0.9, n)
    return np.column_stack([world, refl])


def generate_scene(spec: SceneSpec, seed: int) -> tuple:
    """Returns (PointCloud, [Box3D]) fully determined by the seed."""
    rng = np.random.default_rng(seed)
    (x0, x1), (y0, y1), (z0, z1) = spec.axis_range
    n_obj = int(rng.integers(spec.n_objects[0], spec.n_objects[1] + 1))
    boxes = []
    attempts = 0
    while len(boxes) < n_obj and attempts < 100:
        attempts += 1
        l = rng.uniform(*spec.length_range)
        w = rng.uniform(*spec.width_range)
        h = rng.uniform(*spec.height_range)
        margin = math.hypot(l, w) / 2
        cx = rng.uniform(x0 + margin, x1 - margin)
        cy = rng.uniform(y0 + margin, y1 - margin)
        theta = rng.uniform(-math.pi, math.pi)
        cand = Box3D(cx, cy, spec.ground_z + h / 2, l, w, h, theta)
        if any(geometry.iou_bev(cand.bev(), b.bev()) > 0 for b in boxes):
            continue
        boxes.append(cand)

    chunks = []
    for b in boxes:
        n = int(rng.integers(*spec.surface_points))
        chunks.append(_sample_shell(rng, b, max(n, spec.min_points)))
    # ground-plane clutter away from the objects
    n_cl = spec.clutter_points
    cl = np.column_stack([
        rng.uniform(x0, x1, n_cl),
        rng.uniform(y0, y1, n_cl),
        np.full(n_cl, spec.ground_z) + rng.uniform(0.0, 0.05, n_cl),
        rng.uniform(0.05, 0.3, n_cl),
    ])
    keep = np.ones(n_cl, dtype=bool)
    for b in boxes:
        keep &= ~geometry.points_in_box(cl, b, margin=0.2)
    chunks.append(cl[keep])
    pts = np.vstack(chunks) if chunks else np.zeros((0, 4))
    return PointCloud(pts), boxes


def generate_dataset(spec: SceneSpec, n_scenes: int, seed: int) -> list:
    """List of (frame_id, PointCloud, [Box3D]) with per-frame derived seeds."""
    return [(f"{i:06d}",) + generate_scene(spec, seed * 100003 + i)
            for i in range(n_scenes)]
