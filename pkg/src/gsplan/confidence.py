"""Image- and pixel-level confidences and the fine-tuning losses they weight."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional, Protocol, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import correlate1d

from .errors import PreconditionError
from .imageio import read_pfm
from .scene import View

log = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03
C1, C2 = K1**2, K2**2  # dynamic range 1.0
PATCH = 8
PYRAMID_LEVELS = 3
_BINOMIAL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


@dataclass(frozen=True)
class ConfidenceReport:
    view_id: str
    ref_view_id: str
    g_iou: float
    u_img: float
    u_pixel: Optional[np.ndarray] = None


class LossBreakdown(NamedTuple):
    total: float
    l1: float
    d_ssim: float


class PerceptualDistanceProvider(Protocol):
    def __call__(self, rendered: np.ndarray, enhanced: np.ndarray, frame: Optional[tuple] = None) -> np.ndarray:
        """Low-resolution, non-negative distance map between two images."""


def _as_hwc(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img[..., None] if img.ndim == 2 else img


def _same_shape(a, b) -> None:
    if np.shape(a) != np.shape(b):
        raise PreconditionError(f"image shapes differ: {np.shape(a)} vs {np.shape(b)}")


def nearest_training_view(v: View, training_views: Sequence[View]) -> View:
    if not training_views:
        raise PreconditionError("no training views to compare against")
    c = v.center
    key = lambda iv: (float(np.linalg.norm(iv[1].center - c)), iv[1].id, iv[0])
    return min(enumerate(training_views), key=key)[1]


def g_iou(vis_v, vis_ref) -> float:
    """Share of the reference view's visible Gaussians that the virtual view also sees."""
    ref = np.unique(np.asarray(list(vis_ref) if isinstance(vis_ref, set) else vis_ref, dtype=np.int64))
    if ref.size == 0:
        log.warning("reference view sees no Gaussians; overlap defined as 0")
        return 0.0
    v = np.unique(np.asarray(list(vis_v) if isinstance(vis_v, set) else vis_v, dtype=np.int64))
    return np.intersect1d(v, ref, assume_unique=True).size / ref.size


def image_confidence(g: float) -> float:
    if not 0.0 <= g <= 1.0:
        raise PreconditionError(f"visible-set overlap must lie in [0, 1], got {g}")
    return 1.0 - g


def _gaussian_window() -> np.ndarray:
    x = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    w = np.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    return w / w.sum()


def _filter_valid(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Separable correlation of (H, W, C) with ``w`` keeping only full windows."""
    x = sliding_window_view(x, len(w), axis=0) @ w
    return sliding_window_view(x, len(w), axis=1) @ w


def ssim_map(a, b) -> np.ndarray:
    a, b = _as_hwc(a), _as_hwc(b)
    _same_shape(a, b)
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise PreconditionError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    w = _gaussian_window()
    mu_a, mu_b = _filter_valid(a, w), _filter_valid(b, w)
    var_a = _filter_valid(a * a, w) - mu_a**2
    var_b = _filter_valid(b * b, w) - mu_b**2
    cov = _filter_valid(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a**2 + mu_b**2 + C1) * (var_a + var_b + C2)
    return num / den


def d_ssim(a, b) -> float:
    """(1 - mean SSIM) / 2 over the fully covered interior, channels averaged."""
    return float((1.0 - ssim_map(a, b).mean()) / 2.0)


def training_loss(i_t, i_v) -> LossBreakdown:
    _same_shape(i_t, i_v)
    l1 = float(np.abs(np.asarray(i_t, float) - np.asarray(i_v, float)).mean())
    ds = d_ssim(i_t, i_v)
    return LossBreakdown(l1 + ds, l1, ds)


def virtual_loss(i_g, i_v, u_img: float, u_pixel) -> LossBreakdown:
    """Confidence-weighted loss: u_img * (mean(|i_g - i_v| * u_pixel) + D-SSIM)."""
    _same_shape(i_g, i_v)
    if not 0.0 <= u_img <= 1.0:
        raise PreconditionError(f"u_img must lie in [0, 1], got {u_img}")
    g, v = _as_hwc(i_g), _as_hwc(i_v)
    u = np.asarray(u_pixel, dtype=np.float64)
    if u.shape != g.shape[:2]:
        raise PreconditionError(f"u_pixel shape {u.shape} does not match image {g.shape[:2]}")
    l1 = float((np.abs(g - v) * u[..., None]).mean())
    ds = d_ssim(g, v)
    return LossBreakdown(u_img * (l1 + ds), l1, ds)


def upsample_bilinear(m: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a 2D map with half-pixel-centred sampling and edge clamping."""
    m = np.asarray(m, dtype=np.float64)

    def axis_weights(n_out, n_in):
        src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, wy = axis_weights(height, m.shape[0])
    x0, x1, wx = axis_weights(width, m.shape[1])
    rows = m[y0] * (1 - wy)[:, None] + m[y1] * wy[:, None]
    return rows[:, x0] * (1 - wx) + rows[:, x1] * wx


def pixel_confidence(rendered, enhanced, provider: "PerceptualDistanceProvider", frame=None) -> np.ndarray:
    """Upsampled perceptual distance map, scaled so its maximum is 1."""
    _same_shape(rendered, enhanced)
    h, w = np.shape(rendered)[:2]
    dist = np.asarray(provider(rendered, enhanced, frame=frame), dtype=np.float64)
    if dist.ndim != 2 or dist.shape[0] > h or dist.shape[1] > w:
        raise PreconditionError(f"distance map of shape {dist.shape} exceeds image size {(h, w)}")
    if not np.all(np.isfinite(dist)) or dist.min() < 0:
        raise PreconditionError("distance map must be finite and non-negative")
    up = upsample_bilinear(dist, h, w)
    peak = up.max()
    if peak <= 0:
        return np.zeros((h, w))
    return np.clip(up / peak, 0.0, 1.0)


def gaussian_pyramid(img: np.ndarray, levels: int = PYRAMID_LEVELS) -> list:
    """Binomial-blurred, 2x decimated pyramid (reflect borders)."""
    out = [img]
    for _ in range(levels - 1):
        blurred = correlate1d(out[-1], _BINOMIAL, axis=0, mode="reflect")
        blurred = correlate1d(blurred, _BINOMIAL, axis=1, mode="reflect")
        out.append(blurred[::2, ::2])
    return out


def patch_dissimilarity(a: np.ndarray, b: np.ndarray, patch: int = PATCH) -> np.ndarray:
    """(1 - SSIM) / 2 over non-overlapping patches; edge patches may be partial."""
    h, w = a.shape[:2]
    ph, pw = math.ceil(h / patch), math.ceil(w / patch)
    out = np.empty((ph, pw))
    for i in range(ph):
        for j in range(pw):
            pa = a[i * patch:(i + 1) * patch, j * patch:(j + 1) * patch].reshape(-1, a.shape[2])
            pb = b[i * patch:(i + 1) * patch, j * patch:(j + 1) * patch].reshape(-1, b.shape[2])
            ma, mb = pa.mean(0), pb.mean(0)
            da, db = pa - ma, pb - mb
            # same expression for all three moments so identical patches give exactly 1
            va, vb, cov = (da * da).mean(0), (db * db).mean(0), (da * db).mean(0)
            s = ((2 * ma * mb + C1) * (2 * cov + C2)) / ((ma**2 + mb**2 + C1) * (va + vb + C2))
            out[i, j] = (1.0 - s.mean()) / 2.0
    return out


def reduce_to(m: np.ndarray, shape) -> np.ndarray:
    """Average cells of ``m`` into a coarser grid, each fine cell going to one coarse cell."""
    A, B = shape
    ri = np.arange(m.shape[0]) * A // m.shape[0]
    ci = np.arange(m.shape[1]) * B // m.shape[1]
    total = np.zeros(shape)
    count = np.zeros(shape)
    np.add.at(total, (ri[:, None], ci[None, :]), m)
    np.add.at(count, (ri[:, None], ci[None, :]), 1.0)
    return total / count


def builtin_perceptual_proxy(a, b) -> np.ndarray:
    """SSIM-pyramid stand-in for a learned perceptual distance map."""
    a, b = _as_hwc(a), _as_hwc(b)
    _same_shape(a, b)
    if min(a.shape[:2]) < 16:
        raise PreconditionError("perceptual proxy needs images of at least 16x16")
    maps = [patch_dissimilarity(la, lb) for la, lb in zip(gaussian_pyramid(a), gaussian_pyramid(b))]
    coarse = maps[-1].shape
    return np.mean([reduce_to(m, coarse) for m in maps], axis=0)


class SSIMPyramidProvider:
    def __call__(self, rendered, enhanced, frame=None) -> np.ndarray:
        return builtin_perceptual_proxy(rendered, enhanced)


class FileProvider:
    """Reads precomputed maps named ``pdist_{trajectory:02}_{step:03}.pfm``."""

    def __init__(self, directory):
        self.directory = Path(directory)

    def path_for(self, frame) -> Path:
        t, s = frame
        return self.directory / f"pdist_{t:02d}_{s:03d}.pfm"

    def __call__(self, rendered, enhanced, frame=None) -> np.ndarray:
        if frame is None:
            raise PreconditionError("file provider needs a (trajectory, step) frame key")
        m = read_pfm(self.path_for(frame))
        return m if m.ndim == 2 else m.mean(axis=2)
