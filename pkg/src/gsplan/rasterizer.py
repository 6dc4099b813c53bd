"""Tile-based software splatting.

Gaussians are projected with the usual EWA approximation, sorted once by
camera depth (ties by index) and alpha-composited front to back per pixel.
The same pass records, for every Gaussian, the transmittance in front of it at
its center pixel and its peak compositing weight T * alpha over all pixels.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np
from numba import njit, prange

from .scene import Gaussian, GaussianCloud, View, quat_to_rotmat

NEAR = 0.01
COV_FLOOR = 0.3
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_STOP = 1e-4
MAHALANOBIS_CUTOFF = 9.0  # squared 3-sigma
TILE_SIZE = 16
EPS_VIS = 0.05


def _configure_threads() -> None:
    # the bundled TBB is too old for numba; avoid probing it
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
    value = os.environ.get("GSPLAN_THREADS")
    if value:
        numba.set_num_threads(max(1, min(int(value), numba.config.NUMBA_NUM_THREADS)))


_configure_threads()


@dataclass(frozen=True)
class GaussianProjection:
    gaussian_index: int
    center_px: np.ndarray
    cov2d: np.ndarray
    depth: float
    radius_px: int


@dataclass(frozen=True)
class ProjectedCloud:
    """Projections of the Gaussians that survived culling, in index order."""

    index: np.ndarray  # (K,) original Gaussian indices, ascending
    center: np.ndarray  # (K, 2) pixel coordinates
    cov2d: np.ndarray  # (K, 2, 2)
    conic: np.ndarray  # (K, 3) inverse covariance (a, b, c)
    depth: np.ndarray  # (K,)
    radius: np.ndarray  # (K,) int

    def __len__(self):
        return len(self.index)


@dataclass(frozen=True)
class RenderOutput:
    rgb: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W) expected depth, 0 where nothing was hit
    alpha: np.ndarray  # (H, W)


@dataclass(frozen=True)
class VisibilityRecord:
    scores: np.ndarray  # (N,) peak T * alpha
    transmittance: np.ndarray  # (N,) T in front of the Gaussian at its center pixel
    in_view: np.ndarray  # (N,) bool, center pixel inside the image and not culled

    def visible(self, eps_vis: float = EPS_VIS) -> np.ndarray:
        return np.flatnonzero(self.scores >= eps_vis)


def project_cloud(cloud: GaussianCloud, view: View, near: float = NEAR) -> ProjectedCloud:
    n = len(cloud)
    if n == 0:
        return ProjectedCloud(
            np.zeros(0, np.int64), np.zeros((0, 2)), np.zeros((0, 2, 2)),
            np.zeros((0, 3)), np.zeros(0), np.zeros(0, np.int64),
        )
    W = view.rotation
    p_cam = cloud.means @ W.T + view.translation
    z = p_cam[:, 2]
    keep = np.flatnonzero(z > near)
    p_cam, z = p_cam[keep], z[keep]
    x, y = p_cam[:, 0], p_cam[:, 1]

    R = quat_to_rotmat(cloud.rotations[keep])
    M = R * cloud.scales[keep][:, None, :]  # R diag(s)
    J = np.zeros((len(keep), 2, 3))
    J[:, 0, 0] = view.fx / z
    J[:, 0, 2] = -view.fx * x / (z * z)
    J[:, 1, 1] = view.fy / z
    J[:, 1, 2] = -view.fy * y / (z * z)
    T = J @ W @ M  # J W R diag(s)
    cov = T @ np.swapaxes(T, 1, 2)
    cov[:, 0, 0] += COV_FLOOR
    cov[:, 1, 1] += COV_FLOOR

    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    det = a * c - b * b
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(0.1, mid * mid - det))
    radius = np.ceil(3.0 * np.sqrt(lam)).astype(np.int64)
    u = view.fx * x / z + view.cx
    v = view.fy * y / z + view.cy

    on_screen = (
        (u + radius >= 0) & (u - radius <= view.width - 1)
        & (v + radius >= 0) & (v - radius <= view.height - 1)
    )
    sel = np.flatnonzero(on_screen)
    conic = np.stack([c, -b, a], axis=1) / det[:, None]
    return ProjectedCloud(
        index=keep[sel],
        center=np.stack([u, v], axis=1)[sel],
        cov2d=cov[sel],
        conic=conic[sel],
        depth=z[sel],
        radius=radius[sel],
    )


def project_gaussian(g: Gaussian, view: View, index: int = 0, near: float = NEAR) -> Optional[GaussianProjection]:
    """Projection of a single Gaussian, or None when it is culled."""
    single = GaussianCloud.from_arrays(g.mean, g.scale, g.rotation, g.opacity, g.color)
    proj = project_cloud(single, view, near)
    if len(proj) == 0:
        return None
    return GaussianProjection(index, proj.center[0], proj.cov2d[0], float(proj.depth[0]), int(proj.radius[0]))


@njit(cache=True)
def _bin_tiles(x0, x1, y0, y1, n_tx, n_ty):
    n_tiles = n_tx * n_ty
    counts = np.zeros(n_tiles + 1, np.int64)
    for g in range(x0.shape[0]):
        for ty in range(y0[g], y1[g] + 1):
            for tx in range(x0[g], x1[g] + 1):
                counts[ty * n_tx + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    pairs = np.empty(offsets[-1], np.int64)
    # g runs in depth order, so every tile list comes out depth sorted
    for g in range(x0.shape[0]):
        for ty in range(y0[g], y1[g] + 1):
            for tx in range(x0[g], x1[g] + 1):
                t = ty * n_tx + tx
                pairs[fill[t]] = g
                fill[t] += 1
    return offsets, pairs


@njit(parallel=True, cache=True)
def _composite(tile, width, height, n_tx, n_tiles, offsets, pairs,
               u, v, conic, opacity, color, depth, cpx, cpy,
               rgb, depth_img, alpha_img, pair_score, pair_T,
               alpha_min, alpha_max, t_stop, cutoff):
    for t in prange(n_tiles):
        tx0 = (t % n_tx) * tile
        ty0 = (t // n_tx) * tile
        start = offsets[t]
        stop = offsets[t + 1]
        final_T = np.ones((tile, tile))
        for ly in range(tile):
            py = ty0 + ly
            if py >= height:
                break
            for lx in range(tile):
                px = tx0 + lx
                if px >= width:
                    break
                T = 1.0
                r = 0.0
                gcol = 0.0
                bcol = 0.0
                d = 0.0
                for p in range(start, stop):
                    g = pairs[p]
                    if cpx[g] == px and cpy[g] == py:
                        pair_T[p] = T
                    dx = px - u[g]
                    dy = py - v[g]
                    m2 = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                    if m2 > cutoff:
                        continue
                    a = min(alpha_max, opacity[g] * math.exp(-0.5 * m2))
                    if a < alpha_min:
                        continue
                    w = T * a
                    r += w * color[g, 0]
                    gcol += w * color[g, 1]
                    bcol += w * color[g, 2]
                    d += w * depth[g]
                    if w > pair_score[p]:
                        pair_score[p] = w
                    T = T * (1.0 - a)
                    if T < t_stop:
                        break
                final_T[ly, lx] = T
                rgb[py, px, 0] = r
                rgb[py, px, 1] = gcol
                rgb[py, px, 2] = bcol
                depth_img[py, px] = d
                alpha_img[py, px] = 1.0 - T
        # Gaussians never reached because the pixel saturated first
        for p in range(start, stop):
            g = pairs[p]
            lx = cpx[g] - tx0
            ly = cpy[g] - ty0
            if 0 <= lx < tile and 0 <= ly < tile and pair_T[p] < 0.0:
                pair_T[p] = final_T[ly, lx]


def rasterize(cloud: GaussianCloud, view: View, tile_size: int = TILE_SIZE):
    """Render ``view`` and collect per-Gaussian visibility in a single pass."""
    H, W, N = view.height, view.width, len(cloud)
    rgb = np.zeros((H, W, 3))
    depth_img = np.zeros((H, W))
    alpha_img = np.zeros((H, W))
    scores = np.zeros(N)
    trans = np.ones(N)
    in_view = np.zeros(N, dtype=bool)

    proj = project_cloud(cloud, view)
    if len(proj):
        order = np.argsort(proj.depth, kind="stable")
        idx = proj.index[order]
        u = np.ascontiguousarray(proj.center[order, 0])
        v = np.ascontiguousarray(proj.center[order, 1])
        rad = proj.radius[order]
        cpx = np.floor(u + 0.5).astype(np.int64)
        cpy = np.floor(v + 0.5).astype(np.int64)
        inside = (cpx >= 0) & (cpx < W) & (cpy >= 0) & (cpy < H)
        cpx[~inside] = -1
        cpy[~inside] = -1

        n_tx = (W + tile_size - 1) // tile_size
        n_ty = (H + tile_size - 1) // tile_size
        x0 = np.clip(np.floor((u - rad) / tile_size), 0, n_tx - 1).astype(np.int64)
        x1 = np.clip(np.floor((u + rad) / tile_size), 0, n_tx - 1).astype(np.int64)
        y0 = np.clip(np.floor((v - rad) / tile_size), 0, n_ty - 1).astype(np.int64)
        y1 = np.clip(np.floor((v + rad) / tile_size), 0, n_ty - 1).astype(np.int64)
        offsets, pairs = _bin_tiles(x0, x1, y0, y1, n_tx, n_ty)
        pair_score = np.zeros(len(pairs))
        pair_T = np.full(len(pairs), -1.0)
        _composite(
            tile_size, W, H, n_tx, n_tx * n_ty, offsets, pairs,
            u, v, np.ascontiguousarray(proj.conic[order]),
            np.ascontiguousarray(cloud.opacities[idx]),
            np.ascontiguousarray(cloud.colors[idx]),
            np.ascontiguousarray(proj.depth[order]),
            cpx, cpy, rgb, depth_img, alpha_img, pair_score, pair_T,
            ALPHA_MIN, ALPHA_MAX, T_STOP, MAHALANOBIS_CUTOFF,
        )
        gids = idx[pairs]
        np.maximum.at(scores, gids, pair_score)
        hit = pair_T >= 0.0
        trans[gids[hit]] = pair_T[hit]
        in_view[idx[inside]] = True

    covered = alpha_img > 0
    depth_img[covered] /= alpha_img[covered]
    return RenderOutput(rgb, depth_img, alpha_img), VisibilityRecord(scores, trans, in_view)


def render(cloud: GaussianCloud, view: View, tile_size: int = TILE_SIZE) -> RenderOutput:
    return rasterize(cloud, view, tile_size)[0]


def per_gaussian_visibility(cloud: GaussianCloud, view: View, tile_size: int = TILE_SIZE) -> VisibilityRecord:
    return rasterize(cloud, view, tile_size)[1]


def visible_set(cloud: GaussianCloud, view: View, eps_vis: float = EPS_VIS) -> np.ndarray:
    """Sorted indices of Gaussians whose peak compositing weight reaches ``eps_vis``."""
    if not 0 < eps_vis < 1:
        raise ValueError("eps_vis must lie in (0, 1)")
    return per_gaussian_visibility(cloud, view).visible(eps_vis)
