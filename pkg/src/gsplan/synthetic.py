"""Synthetic scenes for demos, benchmarks and end-to-end runs."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .imageio import write_png
from .rasterizer import render
from .scene import GaussianCloud, View, save_cameras, save_gaussian_ply


def ring_cameras(n: int, radius: float, height: float, size: int, target=(0.0, 0.0, 0.0),
                 focal_scale: float = 0.9) -> list:
    """``n`` training cameras on a horizontal ring, all looking at ``target``."""
    f = focal_scale * size
    cams = []
    for k in range(n):
        ang = 2 * np.pi * k / n
        eye = np.array([radius * np.cos(ang), radius * np.sin(ang), height])
        cams.append(View.look_at_pose(eye, target, fx=f, fy=f, cx=size / 2, cy=size / 2,
                                      width=size, height=size, id=f"train_{k:03d}"))
    return cams


def blob_scene(n_gaussians: int, seed: int = 0, extent: float = 1.0) -> GaussianCloud:
    """Gaussians on a few noisy spherical shells, like a scanned object with some clutter."""
    rng = np.random.default_rng(seed)
    n_shell = int(0.8 * n_gaussians)
    dirs = rng.normal(size=(n_shell, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = extent * rng.choice([0.35, 0.6, 0.8], n_shell) * (1 + 0.02 * rng.normal(size=n_shell))
    shell = dirs * radii[:, None]
    clutter = rng.uniform(-extent, extent, (n_gaussians - n_shell, 3))
    means = np.vstack([shell, clutter])
    # smaller splats when there are more of them, so density stays comparable
    base = extent * 0.12 / max(1.0, (n_gaussians / 500) ** (1 / 2))
    scales = base * rng.uniform(0.5, 1.5, (n_gaussians, 3))
    colors = 0.5 + 0.4 * np.sin(means * 3 + rng.uniform(0, 6, 3))
    return GaussianCloud.from_arrays(means, scales, rng.normal(size=(n_gaussians, 4)),
                                     rng.uniform(0.5, 1.0, n_gaussians), np.clip(colors, 0, 1))


def write_scene(directory, cloud: GaussianCloud, views: Sequence[View], config: dict | None = None) -> Path:
    """Write ``point_cloud.ply``, rendered training images, ``cameras.json`` and a config.

    Returns the config path.
    """
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    save_gaussian_ply(cloud, directory / "point_cloud.ply")
    names = []
    for v in views:
        name = f"images/{v.id}.png"
        write_png(directory / name, render(cloud, v).rgb)
        names.append(name)
    save_cameras(views, directory / "cameras.json", names)
    doc = {"ply": "point_cloud.ply", "cameras": "cameras.json", "out_dir": "out"}
    doc.update(config or {})
    path = directory / "config.json"
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path
