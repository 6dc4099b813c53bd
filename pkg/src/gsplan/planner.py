"""Virtual trajectory search.

Each trajectory starts at a training camera and grows greedily: the current
camera is expanded by the 14 motion primitives, infeasible candidates are
dropped, and the candidate with the largest information gain is taken. The
runners-up go into a priority queue shared by all trajectories; when a
trajectory dead-ends, the queue is popped with lazy re-evaluation of the
stale scores (gains only shrink as the shared coverage map fills, so a stale
score is an upper bound).
"""

from __future__ import annotations

import heapq
import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np

from .coverage import CoverageMap, DirectionBinning, apply_pairs, init_coverage, pair_gain
from .errors import PlanningError, PreconditionError
from .occupancy import (
    OccupancyGrid,
    build_occupancy_grid,
    estimate_gaussian_visibility,
    is_free,
    min_dist_to_matter,
)
from .rasterizer import EPS_VIS, rasterize
from .scene import AABB, GaussianCloud, View, compute_scene_bbox, look_rotation

log = logging.getLogger(__name__)

# keep the optical axis away from the up direction so the camera can be leveled
MAX_ABS_PITCH_COS = 0.999


class MotionPrimitive(Enum):
    MOVE_RIGHT = "move_right"
    MOVE_LEFT = "move_left"
    MOVE_UP = "move_up"
    MOVE_DOWN = "move_down"
    MOVE_FORWARD = "move_forward"
    MOVE_BACKWARD = "move_backward"
    YAW_POS = "yaw_pos"
    YAW_NEG = "yaw_neg"
    PITCH_POS = "pitch_pos"
    PITCH_NEG = "pitch_neg"
    ORBIT_YAW_POS = "orbit_yaw_pos"
    ORBIT_YAW_NEG = "orbit_yaw_neg"
    ORBIT_PITCH_POS = "orbit_pitch_pos"
    ORBIT_PITCH_NEG = "orbit_pitch_neg"

    @property
    def order(self) -> int:
        return _ORDER[self]


PRIMITIVES = tuple(MotionPrimitive)
_ORDER = {p: i for i, p in enumerate(PRIMITIVES)}


@dataclass
class PlannerConfig:
    n_trajectories: int = 20
    length: int = 16
    top_k: int = 3
    translation_step: float = 0.025  # fraction of the bbox diagonal
    rotation_step: float = math.radians(15.0)
    eps_vis: float = EPS_VIS
    proximity_radius: float = 0.01  # fraction of the bbox diagonal
    rng_seed: int = 0
    score_resolution: Optional[int] = None  # longer image side used when scoring candidates
    n_azimuth: int = 8
    n_elevation: int = 4

    def __post_init__(self):
        if self.n_trajectories < 1 or self.length < 1 or self.top_k < 1:
            raise PreconditionError("n_trajectories, length and top_k must be >= 1")
        if self.translation_step <= 0 or self.rotation_step <= 0:
            raise PreconditionError("primitive steps must be positive")

    @property
    def binning(self) -> DirectionBinning:
        return DirectionBinning(self.n_azimuth, self.n_elevation)


@dataclass(frozen=True)
class PlannerState:
    view: View
    look_at: np.ndarray
    trajectory_id: int = 0
    step_index: int = 0

    @property
    def center(self) -> np.ndarray:
        return self.view.center


@dataclass
class Trajectory:
    id: int
    seed_view_id: str
    views: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    realized_gains: list = field(default_factory=list)
    parents: list = field(default_factory=list)  # id of the view each step was expanded from
    diagnostics: list = field(default_factory=list)

    def __len__(self):
        return len(self.views)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "seed_view_id": self.seed_view_id,
            "views": [
                {
                    "id": v.id,
                    **v.to_json(),
                    "look_at": [float(x) for x in v.look_at],
                    "action": a.value,
                    "parent": parent,
                    "realized_gain": int(g),
                }
                for v, a, g, parent in zip(self.views, self.actions, self.realized_gains, self.parents)
            ],
            "diagnostics": list(self.diagnostics),
        }


@dataclass(eq=False)
class PlanningScene:
    cloud: GaussianCloud
    training_views: list
    bbox: AABB
    grid: OccupancyGrid
    up: np.ndarray


def estimate_up(views: Sequence[View]) -> np.ndarray:
    """World up as the mean camera up vector; +z when that is undefined."""
    up = -np.sum([v.down for v in views], axis=0) if views else np.zeros(3)
    n = np.linalg.norm(up)
    return up / n if n > 1e-9 else np.array([0.0, 0.0, 1.0])


def prepare_scene(cloud: GaussianCloud, training_views: Sequence[View], resolution: int = 64,
                  tau: float = 0.5, lo_pct: float = 0.01, hi_pct: float = 0.99,
                  margin: float = 0.05) -> PlanningScene:
    bbox = compute_scene_bbox(cloud, training_views, lo_pct, hi_pct, margin)
    visibility = estimate_gaussian_visibility(cloud, training_views)
    grid = build_occupancy_grid(cloud, visibility, bbox, resolution, tau)
    return PlanningScene(cloud, list(training_views), bbox, grid, estimate_up(training_views))


def _rotate(v, axis, angle) -> np.ndarray:
    """Rodrigues rotation of ``v`` about unit ``axis``."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    c, s = math.cos(angle), math.sin(angle)
    return v * c + np.cross(axis, v) * s + axis * np.dot(axis, v) * (1 - c)


def _aim(forward, up) -> np.ndarray:
    f = forward / np.linalg.norm(forward)
    if abs(np.dot(f, up)) > MAX_ABS_PITCH_COS:
        raise PreconditionError("optical axis too close to the up direction")
    return look_rotation(f, up)


def apply_primitive(state: PlannerState, p: MotionPrimitive, translation_step: float,
                    rotation_step: float, up=(0.0, 0.0, 1.0)) -> PlannerState:
    view = state.view
    up = np.asarray(up, dtype=np.float64)
    C, L, R = view.center, state.look_at, view.rotation
    dist = float(np.linalg.norm(L - C))

    if p in (MotionPrimitive.MOVE_RIGHT, MotionPrimitive.MOVE_LEFT,
             MotionPrimitive.MOVE_UP, MotionPrimitive.MOVE_DOWN,
             MotionPrimitive.MOVE_FORWARD, MotionPrimitive.MOVE_BACKWARD):
        axis = {
            MotionPrimitive.MOVE_RIGHT: view.right,
            MotionPrimitive.MOVE_LEFT: -view.right,
            MotionPrimitive.MOVE_UP: -view.down,
            MotionPrimitive.MOVE_DOWN: view.down,
            MotionPrimitive.MOVE_FORWARD: view.forward,
            MotionPrimitive.MOVE_BACKWARD: -view.forward,
        }[p]
        delta = translation_step * axis
        if p in (MotionPrimitive.MOVE_FORWARD, MotionPrimitive.MOVE_BACKWARD):
            L = L + delta
        new_R, new_C = R, C + delta
    elif p in (MotionPrimitive.YAW_POS, MotionPrimitive.YAW_NEG,
               MotionPrimitive.PITCH_POS, MotionPrimitive.PITCH_NEG):
        sign = 1.0 if p in (MotionPrimitive.YAW_POS, MotionPrimitive.PITCH_POS) else -1.0
        axis = up if p in (MotionPrimitive.YAW_POS, MotionPrimitive.YAW_NEG) else view.right
        f = _rotate(view.forward, axis, sign * rotation_step)
        new_R, new_C = _aim(f, up), C
        L = C + dist * new_R[2]
    else:
        if dist < 1e-12:
            raise PreconditionError("cannot orbit: camera sits on its look-at point")
        sign = 1.0 if p in (MotionPrimitive.ORBIT_YAW_POS, MotionPrimitive.ORBIT_PITCH_POS) else -1.0
        axis = up if p in (MotionPrimitive.ORBIT_YAW_POS, MotionPrimitive.ORBIT_YAW_NEG) else view.right
        new_C = L + _rotate(C - L, axis, sign * rotation_step)
        new_R = _aim(L - new_C, up)

    new_view = view.with_pose(new_R, new_C, kind="virtual", look_at=L, image=None, image_path=None)
    return replace(state, view=new_view, look_at=np.asarray(L, dtype=np.float64))


def expand(state: PlannerState, scene: PlanningScene, config: PlannerConfig):
    """All primitives that apply cleanly to ``state``, in enum order."""
    diag = scene.bbox.diagonal
    out = []
    for p in PRIMITIVES:
        try:
            out.append((p, apply_primitive(state, p, config.translation_step * diag,
                                           config.rotation_step, scene.up)))
        except PreconditionError:
            continue
    return out


def is_valid_position(center, scene: PlanningScene, config: PlannerConfig) -> bool:
    return (
        scene.bbox.contains(center)
        and is_free(scene.grid, center)
        and min_dist_to_matter(scene.cloud, center) >= config.proximity_radius * scene.bbox.diagonal
    )


def filter_candidates(cands, scene: PlanningScene, config: PlannerConfig) -> list:
    """Keep candidates (states, or (primitive, state) pairs) at feasible camera centers."""
    keep = []
    for c in cands:
        state = c[1] if isinstance(c, tuple) else c
        if is_valid_position(state.center, scene, config):
            keep.append(c)
    return keep


def observe(scene: PlanningScene, view: View, config: PlannerConfig):
    """Visible Gaussians of ``view`` (at scoring resolution) and their direction bins."""
    _, rec = rasterize(scene.cloud, view.scaled(config.score_resolution))
    vis = rec.visible(config.eps_vis)
    return vis, config.binning.bins(scene.cloud.means[vis], view.center)


def select_seed_views(training_views: Sequence[View], n: int, cloud: Optional[GaussianCloud] = None,
                      bbox: Optional[AABB] = None, score_resolution: Optional[int] = None) -> list:
    """Farthest-point sample of training cameras, starting nearest the centroid."""
    if n < 1:
        raise PreconditionError("need n >= 1")
    if not training_views:
        raise PreconditionError("need at least one training view")
    centers = np.array([v.center for v in training_views])
    first = int(np.argmin(np.linalg.norm(centers - centers.mean(axis=0), axis=1)))
    chosen = [first]
    nearest = np.linalg.norm(centers - centers[first], axis=1)
    while len(chosen) < min(n, len(training_views)):
        nearest[chosen] = -1.0
        nxt = int(np.argmax(nearest))
        chosen.append(nxt)
        nearest = np.minimum(nearest, np.linalg.norm(centers - centers[nxt], axis=1))

    fallback = 0.25 * (bbox.diagonal if bbox is not None else 1.0)
    seeds = []
    for i in chosen:
        view = training_views[i]
        dist = _expected_depth(cloud, view, score_resolution) if cloud is not None else None
        look_at = view.center + (dist or fallback) * view.forward
        seeds.append(PlannerState(replace(view, look_at=look_at), look_at))
    return seeds


def _expected_depth(cloud: GaussianCloud, view: View, score_resolution) -> Optional[float]:
    """Median rendered depth over the central half of the image, if mostly covered."""
    out, _ = rasterize(cloud, view.scaled(score_resolution))
    h, w = out.alpha.shape
    win = (slice(h // 4, h - h // 4), slice(w // 4, w - w // 4))
    alpha, depth = out.alpha[win], out.depth[win]
    ok = alpha > 0.5
    if not ok.any():
        return None
    return float(np.median(depth[ok]))


class CandidateQueue:
    """Max-priority queue of banked candidates; FIFO among equal scores."""

    def __init__(self):
        self._heap = []
        self._seq = itertools.count()

    def __len__(self):
        return len(self._heap)

    def push(self, score: int, item) -> None:
        heapq.heappush(self._heap, (-score, next(self._seq), item))

    def peek_score(self) -> int:
        return -self._heap[0][0]

    def items(self) -> list:
        return [entry[2] for entry in sorted(self._heap)]

    def pop_lazy(self, rescore: Callable):
        """Pop the candidate whose fresh score is maximal.

        ``rescore(item)`` returns ``(score, payload)``. Stale scores never
        underestimate, so an item whose fresh score still beats the next stale
        score is the true maximum.
        """
        while self._heap:
            _, _, item = heapq.heappop(self._heap)
            score, payload = rescore(item)
            if not self._heap or score >= self.peek_score():
                return item, score, payload
            self.push(score, item)
        return None


@dataclass(frozen=True)
class QueuedCandidate:
    state: PlannerState
    action: MotionPrimitive
    parent: str


def grow_trajectory(seed: PlannerState, coverage: CoverageMap, scene: PlanningScene,
                    config: PlannerConfig, queue: CandidateQueue,
                    observer: Optional[Callable] = None) -> Trajectory:
    tid = seed.trajectory_id
    traj = Trajectory(tid, seed.view.id)
    if not is_valid_position(seed.center, scene, config):
        msg = f"seed view {seed.view.id!r} is not in valid free space"
        log.warning("trajectory %d: %s", tid, msg)
        traj.diagnostics.append(msg)
        return traj

    def accept(state, action, parent, pairs):
        step = len(traj)
        vid = f"tr{tid:02d}_{step:03d}"
        view = replace(state.view, id=vid, kind="virtual")
        gain = apply_pairs(coverage, *pairs)
        traj.views.append(view)
        traj.actions.append(action)
        traj.realized_gains.append(gain)
        traj.parents.append(parent)
        return PlannerState(view, state.look_at, tid, step)

    def rescore(qc):
        pairs = observe(scene, qc.state.view, config)
        return pair_gain(coverage, *pairs), pairs

    current, current_id = seed, seed.view.id
    while len(traj) < config.length:
        valid = filter_candidates(expand(current, scene, config), scene, config)
        if valid:
            scored = []
            for p, state in valid:
                pairs = observe(scene, state.view, config)
                scored.append((pair_gain(coverage, *pairs), p, state, pairs))
            scored.sort(key=lambda s: (-s[0], s[1].order))
            gain, p, state, pairs = scored[0]
            if observer is not None:
                observer({
                    "kind": "expand", "trajectory": tid, "parent": current,
                    "action": p, "gain": gain, "coverage": coverage.copy(),
                    "siblings": [(s[1], s[0]) for s in scored],
                })
            for sg, sp, ss, _ in scored[1:config.top_k]:
                queue.push(sg, QueuedCandidate(ss, sp, current_id))
            current = accept(state, p, current_id, pairs)
        else:
            popped = queue.pop_lazy(rescore)
            if popped is None:
                traj.diagnostics.append(f"search exhausted after {len(traj)} views")
                break
            qc, gain, pairs = popped
            if observer is not None:
                observer({
                    "kind": "pop", "trajectory": tid, "action": qc.action, "gain": gain,
                    "state": qc.state, "coverage": coverage.copy(), "queue": queue.items(),
                })
            current = accept(qc.state, qc.action, qc.parent, pairs)
        current_id = current.view.id
    return traj


@dataclass
class PlanResult:
    trajectories: list
    coverage: CoverageMap
    popcount_initial: int
    popcount_final: int


def plan(scene: PlanningScene, config: PlannerConfig, observer: Optional[Callable] = None) -> PlanResult:
    """Grow ``n_trajectories`` trajectories in seed order against one shared coverage map."""
    coverage = init_coverage(scene.cloud, [v.scaled(config.score_resolution) for v in scene.training_views],
                             config.binning, config.eps_vis)
    initial = coverage.popcount()
    seeds = select_seed_views(scene.training_views, config.n_trajectories, scene.cloud,
                              scene.bbox, config.score_resolution)
    if not any(is_valid_position(s.center, scene, config) for s in seeds):
        raise PlanningError("no training camera lies in valid free space; cannot seed trajectories")
    queue = CandidateQueue()
    trajectories = []
    for n in range(config.n_trajectories):
        # fewer training views than trajectories: reuse seeds in sampling order
        seed = replace(seeds[n % len(seeds)], trajectory_id=n)
        trajectories.append(grow_trajectory(seed, coverage, scene, config, queue, observer))
        log.info("trajectory %d: %d views, gain %d", n, len(trajectories[-1]),
                 sum(trajectories[-1].realized_gains))
    return PlanResult(trajectories, coverage, initial, coverage.popcount())


def view_from_json(entry: dict, kind: str = "virtual") -> View:
    return View(
        fx=entry["fx"], fy=entry["fy"], cx=entry["cx"], cy=entry["cy"],
        width=entry["width"], height=entry["height"],
        rotation=np.reshape(entry["rotation"], (3, 3)), translation=entry["translation"],
        kind=kind, id=entry.get("id", ""), look_at=entry.get("look_at"),
    )
