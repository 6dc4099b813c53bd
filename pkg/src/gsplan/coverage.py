"""Direction-coverage bookkeeping and view information gain.

The coverage map holds one bit per (Gaussian, viewing-direction bin). A view
observes pair (j, k) when Gaussian j is in its visible set and k is the bin of
the direction from the Gaussian towards the camera. Information gain is the
number of pairs a view would newly set.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, PreconditionError
from .rasterizer import EPS_VIS, visible_set
from .scene import GaussianCloud, View

MAP_MAGIC = b"CMAP"
_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.int64)


@dataclass(frozen=True)
class DirectionBinning:
    """Equiangular azimuth x elevation partition of the unit sphere."""

    n_azimuth: int = 8
    n_elevation: int = 4

    @property
    def n_directions(self) -> int:
        return self.n_azimuth * self.n_elevation

    def bins(self, gaussian_means: np.ndarray, camera_center) -> np.ndarray:
        """Bin of the Gaussian-to-camera direction for each row of ``gaussian_means``."""
        d = np.asarray(camera_center, dtype=np.float64) - np.atleast_2d(gaussian_means)
        norm = np.linalg.norm(d, axis=1)
        if np.any(norm == 0):
            raise PreconditionError("camera center coincides with a Gaussian mean")
        u = d / norm[:, None]
        az = np.floor(self.n_azimuth * (np.arctan2(u[:, 1], u[:, 0]) + math.pi) / (2 * math.pi))
        az = np.mod(az, self.n_azimuth).astype(np.int64)
        el = np.floor(self.n_elevation * (np.arcsin(np.clip(u[:, 2], -1, 1)) + math.pi / 2) / math.pi)
        el = np.clip(el, 0, self.n_elevation - 1).astype(np.int64)
        return az * self.n_elevation + el


def direction_bin(binning: DirectionBinning, gaussian_mean, camera_center) -> int:
    return int(binning.bins(np.asarray(gaussian_mean, dtype=np.float64)[None], camera_center)[0])


class CoverageMap:
    """Bit matrix of shape (n_gaussians, n_directions), rows packed little-endian."""

    def __init__(self, n_gaussians: int, n_directions: int = 32):
        if n_gaussians < 0 or n_directions < 1:
            raise PreconditionError("invalid coverage map dimensions")
        self.n_gaussians = n_gaussians
        self.n_directions = n_directions
        self.bits = np.zeros((n_gaussians, (n_directions + 7) // 8), dtype=np.uint8)

    def copy(self) -> "CoverageMap":
        other = CoverageMap(self.n_gaussians, self.n_directions)
        other.bits[:] = self.bits
        return other

    def popcount(self) -> int:
        return int(_POPCOUNT[self.bits].sum())

    def to_dense(self) -> np.ndarray:
        return np.unpackbits(self.bits, axis=1, bitorder="little", count=self.n_directions).astype(bool)

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> "CoverageMap":
        dense = np.asarray(dense, dtype=bool)
        cmap = cls(dense.shape[0], dense.shape[1])
        cmap.bits[:] = np.packbits(dense, axis=1, bitorder="little")
        return cmap

    def __eq__(self, other):
        return (
            isinstance(other, CoverageMap)
            and self.n_directions == other.n_directions
            and np.array_equal(self.bits, other.bits)
        )

    def test(self, rows: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        return ((self.bits[rows, dirs >> 3] >> (dirs & 7)) & 1).astype(bool)

    def set(self, rows: np.ndarray, dirs: np.ndarray) -> None:
        # rows are unique per call, so fancy-index |= cannot drop updates
        self.bits[rows, dirs >> 3] |= (1 << (dirs & 7)).astype(np.uint8)

    def to_bytes(self) -> bytes:
        flat = np.packbits(self.to_dense().ravel(), bitorder="little")
        return MAP_MAGIC + struct.pack("<QI", self.n_gaussians, self.n_directions) + flat.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "CoverageMap":
        if data[:4] != MAP_MAGIC:
            raise FormatError("not a coverage map dump")
        n, d = struct.unpack_from("<QI", data, 4)
        payload = np.frombuffer(data, dtype=np.uint8, offset=16)
        dense = np.unpackbits(payload, bitorder="little", count=n * d).reshape(n, d)
        return cls.from_dense(dense)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())


def observed_pairs(cloud: GaussianCloud, view: View, binning: DirectionBinning, eps_vis: float = EPS_VIS):
    """(Gaussian indices, direction bins) that ``view`` observes."""
    vis = visible_set(cloud, view, eps_vis)
    return vis, binning.bins(cloud.means[vis], view.center)


def _check(cmap: CoverageMap, cloud: GaussianCloud, binning: DirectionBinning) -> None:
    if cmap.n_gaussians != len(cloud) or cmap.n_directions != binning.n_directions:
        raise PreconditionError(
            f"coverage map is {cmap.n_gaussians}x{cmap.n_directions}, "
            f"scene needs {len(cloud)}x{binning.n_directions}"
        )


def pair_gain(cmap: CoverageMap, rows: np.ndarray, dirs: np.ndarray) -> int:
    return int(np.count_nonzero(~cmap.test(rows, dirs)))


def info_gain(cmap: CoverageMap, cloud: GaussianCloud, candidate: View,
              binning: DirectionBinning = DirectionBinning(), eps_vis: float = EPS_VIS) -> int:
    """Number of coverage bits ``candidate`` would newly set. Does not modify the map."""
    _check(cmap, cloud, binning)
    return pair_gain(cmap, *observed_pairs(cloud, candidate, binning, eps_vis))


def apply_pairs(cmap: CoverageMap, rows: np.ndarray, dirs: np.ndarray) -> int:
    gain = pair_gain(cmap, rows, dirs)
    cmap.set(rows, dirs)
    return gain


def apply_view(cmap: CoverageMap, cloud: GaussianCloud, view: View,
               binning: DirectionBinning = DirectionBinning(), eps_vis: float = EPS_VIS) -> int:
    """Set the bits observed by ``view`` in place and return how many were new."""
    _check(cmap, cloud, binning)
    return apply_pairs(cmap, *observed_pairs(cloud, view, binning, eps_vis))


def init_coverage(cloud: GaussianCloud, training_views: Sequence[View],
                  binning: DirectionBinning = DirectionBinning(), eps_vis: float = EPS_VIS) -> CoverageMap:
    cmap = CoverageMap(len(cloud), binning.n_directions)
    for view in training_views:
        apply_view(cmap, cloud, view, binning, eps_vis)
    return cmap
