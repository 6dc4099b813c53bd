"""Scene types: Gaussians, cameras, bounding boxes, and their loaders."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import jsonschema
import numpy as np
from plyfile import PlyData, PlyElement

from .errors import DataError, FormatError, PreconditionError
from .imageio import read_image

log = logging.getLogger(__name__)

SH_C0 = 0.28209479177387814
MIN_BOX_EDGE = 1e-3

PLY_PROPERTIES = (
    "x", "y", "z",
    "f_dc_0", "f_dc_1", "f_dc_2",
    "opacity",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) quaternions in (w, x, y, z) order."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


@dataclass(frozen=True)
class Gaussian:
    mean: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    color: np.ndarray


@dataclass(frozen=True, eq=False)
class GaussianCloud:
    """Activated Gaussian parameters stored as parallel arrays.

    Row ``j`` of every array belongs to Gaussian ``j``; indices are stable for
    the lifetime of a run.
    """

    means: np.ndarray  # (N, 3)
    scales: np.ndarray  # (N, 3), > 0
    rotations: np.ndarray  # (N, 4) unit quaternions, w first
    opacities: np.ndarray  # (N,)
    colors: np.ndarray  # (N, 3) in [0, 1]

    def __post_init__(self):
        n = len(self.means)
        for name in ("means", "scales", "rotations", "opacities", "colors"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
            if len(arr) != n:
                raise PreconditionError(f"{name} has {len(arr)} rows, expected {n}")
        if n and np.any(self.scales <= 0):
            raise PreconditionError("scales must be positive")
        if n and np.any(np.abs(np.linalg.norm(self.rotations, axis=1) - 1) > 1e-6):
            raise PreconditionError("rotations must be unit quaternions")
        if n and (self.opacities.min() < 0 or self.opacities.max() > 1):
            raise PreconditionError("opacities must lie in [0, 1]")

    @classmethod
    def from_arrays(cls, means, scales, rotations=None, opacities=None, colors=None):
        """Build a cloud, filling identity rotations / opaque white defaults."""
        means = np.atleast_2d(np.asarray(means, dtype=np.float64)).reshape(-1, 3)
        n = len(means)
        scales = np.broadcast_to(np.asarray(scales, dtype=np.float64), (n, 3))
        if rotations is None:
            rotations = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        rotations = np.asarray(rotations, dtype=np.float64).reshape(-1, 4)
        if n:
            rotations = rotations / np.linalg.norm(rotations, axis=1, keepdims=True)
        if opacities is None:
            opacities = np.ones(n)
        opacities = np.broadcast_to(np.asarray(opacities, dtype=np.float64), (n,))
        if colors is None:
            colors = np.ones((n, 3))
        colors = np.broadcast_to(np.asarray(colors, dtype=np.float64), (n, 3))
        return cls(means, scales, rotations, opacities, colors)

    @classmethod
    def empty(cls) -> "GaussianCloud":
        return cls.from_arrays(np.zeros((0, 3)), np.ones((0, 3)))

    def __len__(self) -> int:
        return len(self.means)

    @property
    def count(self) -> int:
        return len(self.means)

    def __getitem__(self, j: int) -> Gaussian:
        return Gaussian(
            self.means[j], self.scales[j], self.rotations[j],
            float(self.opacities[j]), self.colors[j],
        )

    def covariances(self) -> np.ndarray:
        """World-space covariances R diag(s^2) R^T, shape (N, 3, 3)."""
        R = quat_to_rotmat(self.rotations) if len(self) else np.zeros((0, 3, 3))
        return np.einsum("nij,nj,nkj->nik", R, self.scales**2, R)


@dataclass(frozen=True, eq=False)
class View:
    """Pinhole camera with a world-to-camera pose (OpenCV axes: x right, y down, z forward)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    kind: str = "training"
    id: str = ""
    image: Optional[np.ndarray] = None
    image_path: Optional[str] = None
    look_at: Optional[np.ndarray] = None

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if self.look_at is not None:
            la = np.array(self.look_at, dtype=np.float64).reshape(3)
            la.setflags(write=False)
            object.__setattr__(self, "look_at", la)
        if self.width <= 0 or self.height <= 0:
            raise PreconditionError("image size must be positive")
        if self.fx <= 0 or self.fy <= 0:
            raise PreconditionError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise PreconditionError("principal point must lie inside the image")
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-6 or abs(np.linalg.det(R) - 1) > 1e-6:
            raise PreconditionError("rotation must be orthonormal with det +1")

    @classmethod
    def look_at_pose(cls, eye, target, up=(0.0, 0.0, 1.0), **intrinsics) -> "View":
        """Camera at ``eye`` aimed at ``target`` with no roll relative to ``up``."""
        R = look_rotation(np.asarray(target, float) - np.asarray(eye, float), up)
        t = -R @ np.asarray(eye, float)
        return cls(rotation=R, translation=t, **intrinsics)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def right(self) -> np.ndarray:
        return self.rotation[0]

    @property
    def down(self) -> np.ndarray:
        return self.rotation[1]

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[2]

    def with_pose(self, rotation, center, **changes) -> "View":
        R = np.asarray(rotation, dtype=np.float64)
        return replace(self, rotation=R, translation=-R @ np.asarray(center, float), **changes)

    def scaled(self, max_side: Optional[int]) -> "View":
        """Same pose with intrinsics rescaled so the longer side is ``max_side``."""
        if max_side is None or max(self.width, self.height) == max_side:
            return self
        s = max_side / max(self.width, self.height)
        w = max(1, int(round(self.width * s)))
        h = max(1, int(round(self.height * s)))
        sx, sy = w / self.width, h / self.height
        return replace(
            self, width=w, height=h,
            fx=self.fx * sx, fy=self.fy * sy,
            cx=(self.cx + 0.5) * sx - 0.5, cy=(self.cy + 0.5) * sy - 0.5,
            image=None,
        )

    def to_json(self) -> dict:
        return {
            "rotation": [float(v) for v in self.rotation.ravel()],
            "translation": [float(v) for v in self.translation],
            "fx": float(self.fx), "fy": float(self.fy),
            "cx": float(self.cx), "cy": float(self.cy),
            "width": int(self.width), "height": int(self.height),
        }


def look_rotation(forward, up) -> np.ndarray:
    """World-to-camera rotation whose optical axis is ``forward`` and whose
    right axis is horizontal with respect to ``up``."""
    f = np.asarray(forward, dtype=np.float64)
    f = f / np.linalg.norm(f)
    r = np.cross(f, np.asarray(up, dtype=np.float64))
    nr = np.linalg.norm(r)
    if nr < 1e-9:
        raise PreconditionError("optical axis is parallel to the up vector")
    r /= nr
    d = np.cross(f, r)
    return np.stack([r, d, f])


@dataclass(frozen=True)
class AABB:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max, dtype=np.float64).reshape(3)
        if np.any(lo > hi):
            raise PreconditionError("AABB min must not exceed max")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def size(self) -> np.ndarray:
        return self.max - self.min

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.size))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    def contains(self, p) -> bool:
        p = np.asarray(p, dtype=np.float64)
        return bool(np.all(p >= self.min) and np.all(p <= self.max))

    def contains_box(self, other: "AABB") -> bool:
        return bool(np.all(self.min <= other.min) and np.all(self.max >= other.max))


def load_gaussian_ply(path) -> GaussianCloud:
    """Read a standard Gaussian-splatting checkpoint PLY and apply the parameter activations."""
    path = Path(path)
    ply = PlyData.read(str(path))
    if "vertex" not in ply:
        raise FormatError(f"{path}: no vertex element")
    vertex = ply["vertex"]
    names = {p.name for p in vertex.properties}
    for name in PLY_PROPERTIES:
        if name not in names:
            raise FormatError(f"{path}: missing vertex property '{name}'")

    def col(*keys):
        return np.stack([np.asarray(vertex[k], dtype=np.float64) for k in keys], axis=1)

    means = col("x", "y", "z")
    f_dc = col("f_dc_0", "f_dc_1", "f_dc_2")
    raw_opacity = np.asarray(vertex["opacity"], dtype=np.float64)
    raw_scale = col("scale_0", "scale_1", "scale_2")
    quats = col("rot_0", "rot_1", "rot_2", "rot_3")

    raw = np.concatenate([means, f_dc, raw_opacity[:, None], raw_scale, quats], axis=1)
    bad = ~np.isfinite(raw).all(axis=1)
    if bad.any():
        raise DataError(f"{path}: non-finite value at vertex {int(np.argmax(bad))}")
    qn = np.linalg.norm(quats, axis=1)
    if np.any(qn == 0):
        raise DataError(f"{path}: zero quaternion at vertex {int(np.argmax(qn == 0))}")

    return GaussianCloud(
        means=means,
        scales=np.exp(raw_scale),
        rotations=quats / qn[:, None],
        opacities=sigmoid(raw_opacity),
        colors=np.clip(0.5 + SH_C0 * f_dc, 0.0, 1.0),
    )


CAMERAS_SCHEMA = {
    "type": "array",
    "items": {
        "type": "object",
        "required": ["id", "width", "height", "fx", "fy", "cx", "cy", "rotation", "translation"],
        "properties": {
            "id": {"type": "string"},
            "width": {"type": "integer", "minimum": 1},
            "height": {"type": "integer", "minimum": 1},
            "fx": {"type": "number", "exclusiveMinimum": 0},
            "fy": {"type": "number", "exclusiveMinimum": 0},
            "cx": {"type": "number"},
            "cy": {"type": "number"},
            "rotation": {"type": "array", "items": {"type": "number"}, "minItems": 9, "maxItems": 9},
            "translation": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
            "image": {"type": ["string", "null"]},
        },
    },
}


def validate_json(doc, schema, source) -> None:
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as exc:
        pointer = "/" + "/".join(str(p) for p in exc.absolute_path)
        raise FormatError(f"{source}: schema violation at {pointer}: {exc.message}") from exc


def load_cameras(path) -> list[View]:
    """Training views from a ``cameras.json`` file, images loaded when listed."""
    path = Path(path)
    with open(path) as f:
        doc = json.load(f)
    validate_json(doc, CAMERAS_SCHEMA, path)
    views = []
    for i, entry in enumerate(doc):
        image = image_path = None
        if entry.get("image"):
            image_path = str((path.parent / entry["image"]).resolve())
            image = read_image(image_path)
        try:
            views.append(View(
                fx=entry["fx"], fy=entry["fy"], cx=entry["cx"], cy=entry["cy"],
                width=entry["width"], height=entry["height"],
                rotation=np.reshape(entry["rotation"], (3, 3)),
                translation=entry["translation"],
                kind="training", id=entry["id"],
                image=image, image_path=image_path,
            ))
        except PreconditionError as exc:
            raise FormatError(f"{path}: schema violation at /{i}: {exc}") from exc
    return views


def compute_scene_bbox(
    cloud: GaussianCloud,
    views: Sequence[View],
    lo_pct: float = 0.01,
    hi_pct: float = 0.99,
    margin: float = 0.05,
) -> AABB:
    """Percentile box of Gaussian means united with camera centers, plus a margin."""
    if len(cloud) == 0:
        raise PreconditionError("cannot bound an empty cloud")
    if not (0 <= lo_pct < hi_pct <= 1):
        raise PreconditionError("need 0 <= lo_pct < hi_pct <= 1")
    lo = np.quantile(cloud.means, lo_pct, axis=0)
    hi = np.quantile(cloud.means, hi_pct, axis=0)
    if views:
        centers = np.array([v.center for v in views])
        lo = np.minimum(lo, centers.min(axis=0))
        hi = np.maximum(hi, centers.max(axis=0))
    pad = margin * float(np.linalg.norm(hi - lo))
    lo, hi = lo - pad, hi + pad
    # degenerate edges are widened symmetrically so voxels keep a positive size
    short = (hi - lo) < MIN_BOX_EDGE
    mid = 0.5 * (lo + hi)
    lo = np.where(short, mid - MIN_BOX_EDGE / 2, lo)
    hi = np.where(short, mid + MIN_BOX_EDGE / 2, hi)
    return AABB(lo, hi)


def save_gaussian_ply(cloud: GaussianCloud, path, binary: bool = True) -> None:
    """Write ``cloud`` in the Gaussian-splatting vertex layout (raw, pre-activation values)."""
    eps = 1e-6
    op = np.clip(cloud.opacities, eps, 1 - eps)
    raw = {
        "x": cloud.means[:, 0], "y": cloud.means[:, 1], "z": cloud.means[:, 2],
        "f_dc_0": (cloud.colors[:, 0] - 0.5) / SH_C0,
        "f_dc_1": (cloud.colors[:, 1] - 0.5) / SH_C0,
        "f_dc_2": (cloud.colors[:, 2] - 0.5) / SH_C0,
        "opacity": np.log(op / (1 - op)),
        "scale_0": np.log(cloud.scales[:, 0]),
        "scale_1": np.log(cloud.scales[:, 1]),
        "scale_2": np.log(cloud.scales[:, 2]),
        "rot_0": cloud.rotations[:, 0], "rot_1": cloud.rotations[:, 1],
        "rot_2": cloud.rotations[:, 2], "rot_3": cloud.rotations[:, 3],
    }
    data = np.empty(len(cloud), dtype=[(k, "<f4") for k in PLY_PROPERTIES])
    for k in PLY_PROPERTIES:
        data[k] = raw[k]
    PlyData([PlyElement.describe(data, "vertex")], text=not binary).write(str(path))


def save_cameras(views: Sequence[View], path, image_names: Optional[Sequence[Optional[str]]] = None) -> None:
    entries = []
    for i, v in enumerate(views):
        entry = {"id": v.id or f"view{i:03d}", **v.to_json()}
        entry = {k: entry[k] for k in ("id", "width", "height", "fx", "fy", "cx", "cy", "rotation", "translation")}
        if image_names is not None and image_names[i] is not None:
            entry["image"] = image_names[i]
        entries.append(entry)
    Path(path).write_text(json.dumps(entries, indent=2) + "\n")
