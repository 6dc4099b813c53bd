"""Occupancy grid built from training-view transmittance, plus free-space queries."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, PreconditionError
from .rasterizer import per_gaussian_visibility
from .scene import AABB, GaussianCloud, View

GRID_MAGIC = b"OGRD"
GRID_VERSION = 1
SOLID_OPACITY = 0.5
TOP_K_VIEWS = 3


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    bbox: AABB
    resolution: int
    cells: np.ndarray  # (S, S, S) bool indexed [ix, iy, iz]; True = occupied

    def __post_init__(self):
        S = self.resolution
        if self.cells.shape != (S, S, S):
            raise PreconditionError(f"cells must have shape {(S, S, S)}")
        if np.any(self.voxel_size <= 0):
            raise PreconditionError("voxel size must be positive")
        self.cells.setflags(write=False)

    @classmethod
    def empty(cls, bbox: AABB, resolution: int) -> "OccupancyGrid":
        return cls(bbox, resolution, np.zeros((resolution,) * 3, dtype=bool))

    @property
    def voxel_size(self) -> np.ndarray:
        return self.bbox.size / self.resolution

    @property
    def occupied_count(self) -> int:
        return int(self.cells.sum())

    def cell_index(self, points) -> np.ndarray:
        """Integer cell coordinates of points (points on the max face go to the last cell)."""
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        ijk = np.floor((p - self.bbox.min) / self.voxel_size).astype(np.int64)
        return np.clip(ijk, 0, self.resolution - 1)

    def cell_center(self, ijk) -> np.ndarray:
        return self.bbox.min + (np.asarray(ijk, dtype=np.float64) + 0.5) * self.voxel_size

    def to_bytes(self) -> bytes:
        S = self.resolution
        header = GRID_MAGIC + struct.pack("<II", GRID_VERSION, S)
        header += struct.pack("<6d", *self.bbox.min, *self.bbox.max)
        # x fastest: flat index = x + S * (y + S * z)
        flat = self.cells.transpose(2, 1, 0).ravel()
        return header + np.packbits(flat, bitorder="little").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "OccupancyGrid":
        if data[:4] != GRID_MAGIC:
            raise FormatError("not an occupancy grid file")
        version, S = struct.unpack_from("<II", data, 4)
        if version != GRID_VERSION:
            raise FormatError(f"unsupported grid version {version}")
        box = struct.unpack_from("<6d", data, 12)
        nbytes = (S**3 + 7) // 8
        payload = np.frombuffer(data, dtype=np.uint8, count=nbytes, offset=60)
        flat = np.unpackbits(payload, bitorder="little")[: S**3].astype(bool)
        cells = flat.reshape(S, S, S).transpose(2, 1, 0).copy()
        return cls(AABB(box[:3], box[3:]), S, cells)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "OccupancyGrid":
        return cls.from_bytes(Path(path).read_bytes())


def estimate_gaussian_visibility(cloud: GaussianCloud, training_views: Sequence[View], top_k: int = TOP_K_VIEWS) -> np.ndarray:
    """Mean of each Gaussian's ``top_k`` highest center-pixel transmittances.

    Views in which a Gaussian's center pixel falls outside the image (or which
    cull it) contribute nothing; Gaussians never seen get visibility 0.
    """
    if not training_views:
        raise PreconditionError("need at least one training view")
    n = len(cloud)
    # missing observations sort to the bottom as -inf
    samples = np.full((len(training_views), n), -np.inf)
    for i, view in enumerate(training_views):
        rec = per_gaussian_visibility(cloud, view)
        samples[i, rec.in_view] = rec.transmittance[rec.in_view]
    samples = -np.sort(-samples, axis=0)[:top_k]
    seen = np.isfinite(samples)
    total = np.where(seen, samples, 0.0).sum(axis=0)
    count = seen.sum(axis=0)
    return np.divide(total, count, out=np.zeros(n), where=count > 0)


def build_occupancy_grid(
    cloud: GaussianCloud,
    visibility: np.ndarray,
    bbox: AABB,
    S: int = 64,
    tau: float = 0.5,
) -> OccupancyGrid:
    """Mark the cell holding each solid, poorly visible Gaussian mean as occupied."""
    if S < 2:
        raise PreconditionError("grid resolution must be at least 2")
    if not 0 < tau < 1:
        raise PreconditionError("tau must lie in (0, 1)")
    cells = np.zeros((S, S, S), dtype=bool)
    if len(cloud):
        means = cloud.means
        inside = np.all((means >= bbox.min) & (means <= bbox.max), axis=1)
        hidden = (cloud.opacities >= SOLID_OPACITY) & (np.asarray(visibility) < tau) & inside
        ijk = OccupancyGrid.empty(bbox, S).cell_index(means[hidden])
        cells[ijk[:, 0], ijk[:, 1], ijk[:, 2]] = True
    return OccupancyGrid(bbox, S, cells)


def is_free(grid: OccupancyGrid, p) -> bool:
    if not grid.bbox.contains(p):
        return False
    i, j, k = grid.cell_index(p)[0]
    return not grid.cells[i, j, k]


def min_dist_to_matter(cloud: GaussianCloud, p, opacity_min: float = SOLID_OPACITY) -> float:
    """Distance from ``p`` to the nearest solid Gaussian, less its largest axis, floored at 0."""
    solid = cloud.opacities >= opacity_min
    if not solid.any():
        return float("inf")
    d = np.linalg.norm(cloud.means[solid] - np.asarray(p, dtype=np.float64), axis=1)
    d -= cloud.scales[solid].max(axis=1)
    return float(max(0.0, d.min()))
