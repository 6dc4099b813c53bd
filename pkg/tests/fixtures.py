"""Synthetic scenes shared by the test modules."""

from __future__ import annotations

import numpy as np

from gsplan.scene import GaussianCloud, View

HALF = 1.0  # hollow box spans [-HALF, HALF]^3
WALL_SPACING = 0.1
WALL_SIGMA = 0.045
WALL_THICKNESS = 0.01


def intrinsics(size=64, focal=None):
    focal = focal if focal is not None else 0.9 * size
    return dict(fx=focal, fy=focal, cx=size / 2, cy=size / 2, width=size, height=size)


def random_cloud(rng, n, spread=1.0, scale=(0.03, 0.15), opacity=(0.1, 1.0), center=(0, 0, 4)):
    means = rng.uniform(-spread, spread, (n, 3)) + np.asarray(center, float)
    return GaussianCloud.from_arrays(
        means,
        rng.uniform(*scale, (n, 3)),
        rng.normal(size=(n, 4)),
        rng.uniform(*opacity, n),
        rng.uniform(0, 1, (n, 3)),
    )


def _axis_frame(axis):
    n = np.zeros(3)
    n[abs(axis) - 1] = np.sign(axis)
    t1 = np.roll(np.abs(n), 1)
    t2 = np.cross(n, t1)
    return n, t1, t2


def hollow_box(n_filler=40, seed=0, size=128):
    """Closed shell of flat opaque Gaussians around occluded filler Gaussians.

    Returns (cloud, cameras, wall_mask). Three cameras face every side of the
    box from outside, so the filler is hidden from all of them.
    """
    rng = np.random.default_rng(seed)
    ticks = np.arange(-HALF + WALL_SPACING / 2, HALF, WALL_SPACING)
    means, scales = [], []
    for axis in (1, -1, 2, -2, 3, -3):
        n, t1, t2 = _axis_frame(axis)
        for a in ticks:
            for b in ticks:
                means.append(HALF * n + a * t1 + b * t2)
                s = np.full(3, WALL_SIGMA)
                s[abs(axis) - 1] = WALL_THICKNESS
                scales.append(s)
    n_wall = len(means)
    filler = rng.uniform(-0.5, 0.5, (n_filler, 3))
    means = np.vstack([np.array(means), filler])
    scales = np.vstack([np.array(scales), np.full((n_filler, 3), 0.05)])
    opac = np.concatenate([np.full(n_wall, 0.99), np.full(n_filler, 0.9)])
    colors = rng.uniform(0.2, 0.9, (len(means), 3))
    cloud = GaussianCloud.from_arrays(means, scales, None, opac, colors)

    cameras = []
    for axis in (1, -1, 2, -2, 3, -3):
        n, t1, _ = _axis_frame(axis)
        up = (0, 0, 1) if abs(axis) != 3 else (0, 1, 0)
        for k, off in enumerate((0.0, 1.0, -1.0)):
            eye = 4.0 * n + off * t1
            cameras.append(View.look_at_pose(eye, (0, 0, 0), up=up, id=f"cam{axis:+d}_{k}",
                                             **intrinsics(size, focal=0.95 * size)))
    wall = np.zeros(len(means), dtype=bool)
    wall[:n_wall] = True
    return cloud, cameras, wall


def toy_scene(seed=0, n=20, size=48):
    """Small cluster of Gaussians watched by four cameras on a ring."""
    rng = np.random.default_rng(seed)
    cloud = random_cloud(rng, n, spread=0.5, scale=(0.05, 0.15), opacity=(0.6, 1.0), center=(0, 0, 0))
    cameras = []
    for k in range(4):
        ang = 2 * np.pi * k / 4 + 0.3
        eye = np.array([2.5 * np.cos(ang), 2.5 * np.sin(ang), 0.4])
        cameras.append(View.look_at_pose(eye, (0, 0, 0), id=f"cam{k}", **intrinsics(size)))
    return cloud, cameras
