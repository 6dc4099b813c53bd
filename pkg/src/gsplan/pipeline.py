"""Pipeline stages: plan, render, enhance, confidence, export-manifest.

Every stage reads its inputs from the output directory written by the stage
before it, so the stages can be run one at a time from the command line.
"""

from __future__ import annotations

import json
import logging
import shlex
import shutil
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .confidence import (
    FileProvider,
    SSIMPyramidProvider,
    g_iou,
    image_confidence,
    nearest_training_view,
    pixel_confidence,
)
from .errors import PipelineError, PreconditionError
from .imageio import read_image, read_pfm, write_pfm, write_png
from .planner import PRIMITIVES, PlannerConfig, plan, prepare_scene, view_from_json
from .rasterizer import rasterize
from .scene import load_cameras, load_gaussian_ply, validate_json

log = logging.getLogger(__name__)

FINETUNE_ITERATIONS = 15000
DENSIFY_UNTIL = 9000


@dataclass
class PipelineConfig:
    ply: str = "point_cloud.ply"
    cameras: str = "cameras.json"
    out_dir: str = "out"
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    occupancy_resolution: int = 64
    tau: float = 0.5
    bbox_lo_pct: float = 0.01
    bbox_hi_pct: float = 0.99
    bbox_margin: float = 0.05
    enhancer: Optional[str] = None  # command template with {in_dir} {out_dir} {ref_image}
    render_resolution: Optional[int] = None  # longer side of rendered frames
    perceptual_maps: Optional[str] = None  # directory of pdist_*.pfm; built-in proxy when unset

    def __post_init__(self):
        if isinstance(self.planner, dict):
            self.planner = PlannerConfig(**self.planner)
        if self.occupancy_resolution < 2:
            raise PreconditionError("occupancy_resolution must be >= 2")
        if not 0 < self.tau < 1:
            raise PreconditionError("tau must lie in (0, 1)")
        if not 0 <= self.bbox_lo_pct < self.bbox_hi_pct <= 1:
            raise PreconditionError("bbox percentiles must satisfy 0 <= lo < hi <= 1")

    @classmethod
    def from_file(cls, path, **overrides) -> "PipelineConfig":
        path = Path(path)
        doc = json.loads(path.read_text())
        planner = dict(doc.pop("planner", {}))
        for key in ("rng_seed", "n_trajectories", "length", "score_resolution"):
            if overrides.get(key) is not None:
                planner[key] = overrides.pop(key)
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise PreconditionError(f"{path}: unknown config keys {sorted(unknown)}")
        # paths in the file are relative to the file; command-line paths to the cwd
        for name in ("ply", "cameras", "out_dir", "perceptual_maps"):
            value = doc.get(name, cls.__dataclass_fields__[name].default)
            if value is not None and not Path(value).is_absolute():
                doc[name] = str(path.parent / value)
        doc.update({k: v for k, v in overrides.items() if v is not None})
        return cls(planner=PlannerConfig(**planner), **doc)

    @property
    def out(self) -> Path:
        return Path(self.out_dir)

    def hyperparameters(self) -> dict:
        p = self.planner
        return {
            "n_trajectories": p.n_trajectories,
            "trajectory_length": p.length,
            "top_k": p.top_k,
            "n_primitives": len(PRIMITIVES),
            "n_directions": p.binning.n_directions,
            "occupancy_resolution": self.occupancy_resolution,
            "tau": self.tau,
            "eps_vis": p.eps_vis,
            "translation_step": p.translation_step,
            "rotation_step": p.rotation_step,
            "proximity_radius": p.proximity_radius,
            "rng_seed": p.rng_seed,
        }


def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n")


def _read_json(path: Path, what: str):
    if not path.exists():
        raise PipelineError(f"missing {what}: {path}")
    return json.loads(path.read_text())


def _require(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"input not found: {p}")
    return p


def load_inputs(cfg: PipelineConfig):
    cloud = load_gaussian_ply(_require(cfg.ply))
    views = load_cameras(_require(cfg.cameras))
    return cloud, views


def frame_name(trajectory: int, step: int) -> str:
    return f"frame_{trajectory:02d}_{step:03d}"


def cmd_plan(cfg: PipelineConfig) -> dict:
    cloud, views = load_inputs(cfg)
    scene = prepare_scene(cloud, views, cfg.occupancy_resolution, cfg.tau,
                          cfg.bbox_lo_pct, cfg.bbox_hi_pct, cfg.bbox_margin)
    result = plan(scene, cfg.planner)
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    scene.grid.save(out / "grid.ogrd")
    result.coverage.save(out / "coverage.cmap")
    _write_json(out / "trajectories.json", [t.to_json() for t in result.trajectories])
    stats = {
        "popcount_initial": result.popcount_initial,
        "popcount_final": result.popcount_final,
        "total_gain": sum(sum(t.realized_gains) for t in result.trajectories),
        "trajectory_gains": [sum(t.realized_gains) for t in result.trajectories],
        "trajectory_lengths": [len(t) for t in result.trajectories],
        "occupied_cells": scene.grid.occupied_count,
        "n_gaussians": len(cloud),
        "n_training_views": len(views),
        "bbox": {"min": scene.bbox.min.tolist(), "max": scene.bbox.max.tolist()},
        "hyperparameters": cfg.hyperparameters(),
    }
    _write_json(out / "stats.json", stats)
    return stats


def load_trajectories(cfg: PipelineConfig) -> list:
    return _read_json(cfg.out / "trajectories.json", "trajectories")


def cmd_render(cfg: PipelineConfig) -> list:
    cloud = load_gaussian_ply(_require(cfg.ply))
    frames_dir = cfg.out / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    index = []
    for traj in load_trajectories(cfg):
        for step, entry in enumerate(traj["views"]):
            view = view_from_json(entry).scaled(cfg.render_resolution)
            rgb = rasterize(cloud, view)[0].rgb
            name = frame_name(traj["id"], step)
            write_png(frames_dir / f"{name}.png", rgb)
            write_pfm(frames_dir / f"{name}.pfm", rgb)
            index.append({
                "trajectory": traj["id"], "step": step, "view_id": entry["id"],
                "png": f"frames/{name}.png", "pfm": f"frames/{name}.pfm",
                "width": view.width, "height": view.height,
            })
    _write_json(frames_dir / "index.json", index)
    return index


def _load_index(cfg: PipelineConfig) -> list:
    return _read_json(cfg.out / "frames" / "index.json", "frame index (run render first)")


def cmd_enhance(cfg: PipelineConfig) -> list:
    """Produce the enhanced frames: plain copies in identity mode, else via the external command."""
    out = cfg.out
    index = _load_index(cfg)
    enhanced = out / "enhanced"
    enhanced.mkdir(parents=True, exist_ok=True)
    by_traj: dict = {}
    for f in index:
        by_traj.setdefault(f["trajectory"], []).append(f)

    if cfg.enhancer is None:
        for f in index:
            for key in ("png", "pfm"):
                shutil.copyfile(out / f[key], enhanced / Path(f[key]).name)
        return [f"enhanced/{Path(f['png']).name}" for f in index]

    training = load_cameras(_require(cfg.cameras))
    trajectories = {t["id"]: t for t in load_trajectories(cfg)}
    work = out / "enhance_work"
    for tid, frames in sorted(by_traj.items()):
        in_dir, out_dir = work / f"{tid:02d}" / "in", work / f"{tid:02d}" / "out"
        shutil.rmtree(work / f"{tid:02d}", ignore_errors=True)
        in_dir.mkdir(parents=True)
        out_dir.mkdir(parents=True)
        for f in frames:
            shutil.copyfile(out / f["png"], in_dir / Path(f["png"]).name)
        first = view_from_json(trajectories[tid]["views"][0])
        ref = nearest_training_view(first, training).image_path or ""
        cmd = cfg.enhancer.format(in_dir=shlex.quote(str(in_dir)), out_dir=shlex.quote(str(out_dir)),
                                  ref_image=shlex.quote(ref))
        proc = subprocess.run(cmd, shell=True, capture_output=True, text=True)
        if proc.returncode != 0:
            raise PipelineError(f"enhancer failed on trajectory {tid} (exit {proc.returncode}): "
                                f"{proc.stderr.strip()}")
        for f in frames:
            name = Path(f["png"]).name
            produced = out_dir / name
            if not produced.exists():
                raise PipelineError(f"enhancer produced no {name} for trajectory {tid}")
            img = read_image(produced)
            if img.shape[:2] != (f["height"], f["width"]):
                raise PipelineError(f"enhancer output {name} for trajectory {tid} has size "
                                    f"{img.shape[1]}x{img.shape[0]}, expected {f['width']}x{f['height']}")
            shutil.copyfile(produced, enhanced / name)
            (enhanced / Path(f["pfm"]).name).unlink(missing_ok=True)
    return [f"enhanced/{Path(f['png']).name}" for f in index]


def _frame_pair(out: Path, frame: dict):
    """Rendered and enhanced images; float PFMs when the enhancer kept them, else PNGs."""
    png, pfm = Path(frame["png"]).name, Path(frame["pfm"]).name
    enhanced_pfm = out / "enhanced" / pfm
    if enhanced_pfm.exists():
        return read_pfm(out / frame["pfm"]), read_pfm(enhanced_pfm)
    return read_image(out / frame["png"]), read_image(out / "enhanced" / png)


def cmd_confidence(cfg: PipelineConfig) -> list:
    out = cfg.out
    index = _load_index(cfg)
    missing = [f["png"] for f in index if not (out / f["png"]).exists()]
    missing += [f"enhanced/{Path(f['png']).name}" for f in index
                if not (out / "enhanced" / Path(f["png"]).name).exists()]
    if missing:
        raise PipelineError("missing frames: " + ", ".join(missing))

    cloud, training = load_inputs(cfg)
    eps = cfg.planner.eps_vis
    views = {v["id"]: view_from_json(v) for t in load_trajectories(cfg) for v in t["views"]}
    ref_visible: dict = {}
    provider = FileProvider(cfg.perceptual_maps) if cfg.perceptual_maps else SSIMPyramidProvider()
    reports = []
    for f in index:
        view = views[f["view_id"]].scaled(cfg.render_resolution)
        ref = nearest_training_view(view, training)
        if ref.id not in ref_visible:
            ref_visible[ref.id] = rasterize(cloud, ref)[1].visible(eps)
        vis = rasterize(cloud, view)[1].visible(eps)
        g = g_iou(vis, ref_visible[ref.id])
        rendered, enhanced = _frame_pair(out, f)
        u_pixel = pixel_confidence(rendered, enhanced, provider, frame=(f["trajectory"], f["step"]))
        upix_name = f"frames/upixel_{f['trajectory']:02d}_{f['step']:03d}.pfm"
        write_pfm(out / upix_name, u_pixel)
        reports.append({
            "view_id": f["view_id"], "trajectory": f["trajectory"], "step": f["step"],
            "ref_view_id": ref.id, "g_iou": g, "u_img": image_confidence(g),
            "u_pixel": upix_name,
        })
    _write_json(out / "confidences.json", reports)
    return reports


MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["hyperparameters", "entries"],
    "properties": {
        "hyperparameters": {
            "type": "object",
            "required": ["iterations", "densify_until_iter"],
        },
        "entries": {
            "type": "array",
            "items": {
                "oneOf": [
                    {
                        "type": "object",
                        "required": ["loss_kind", "id", "image", "view"],
                        "properties": {
                            "loss_kind": {"const": "training"},
                            "image": {"type": "string"},
                            "view": {"type": "object"},
                        },
                    },
                    {
                        "type": "object",
                        "required": ["loss_kind", "id", "rendered", "enhanced", "view", "u_img", "u_pixel"],
                        "properties": {
                            "loss_kind": {"const": "virtual"},
                            "rendered": {"type": "string"},
                            "enhanced": {"type": "string"},
                            "u_pixel": {"type": "string"},
                            "u_img": {"type": "number", "minimum": 0, "maximum": 1},
                            "view": {"type": "object"},
                        },
                    },
                ]
            },
        },
    },
}


def build_manifest(cfg: PipelineConfig) -> dict:
    out = cfg.out
    training = load_cameras(_require(cfg.cameras))
    confidences = {c["view_id"]: c for c in _read_json(out / "confidences.json", "confidences")}
    views = {v["id"]: v for t in load_trajectories(cfg) for v in t["views"]}
    entries = []
    for v in training:
        if v.image_path is None:
            raise PipelineError(f"training view {v.id!r} has no image for the manifest")
        entries.append({"loss_kind": "training", "id": v.id, "image": v.image_path, "view": v.to_json()})
    for f in _load_index(cfg):
        c = confidences.get(f["view_id"])
        if c is None:
            raise PipelineError(f"no confidence for view {f['view_id']} (run confidence first)")
        view = view_from_json(views[f["view_id"]]).scaled(cfg.render_resolution)
        enhanced = f"enhanced/{Path(f['png']).name}"
        if (out / "enhanced" / Path(f["pfm"]).name).exists():
            rendered, enhanced = f["pfm"], f"enhanced/{Path(f['pfm']).name}"
        else:
            rendered = f["png"]
        entries.append({
            "loss_kind": "virtual", "id": f["view_id"],
            "rendered": rendered, "enhanced": enhanced,
            "view": view.to_json(), "u_img": c["u_img"], "u_pixel": c["u_pixel"],
            "ref_view_id": c["ref_view_id"], "g_iou": c["g_iou"],
        })
    return {
        "hyperparameters": {
            "iterations": FINETUNE_ITERATIONS,
            "densify_until_iter": DENSIFY_UNTIL,
            **cfg.hyperparameters(),
        },
        "entries": entries,
    }


def manifest_files(manifest: dict, root: Path) -> list:
    """Every file path a manifest references, resolved against ``root``."""
    paths = []
    for e in manifest["entries"]:
        keys = ("image",) if e["loss_kind"] == "training" else ("rendered", "enhanced", "u_pixel")
        paths += [root / e[k] for k in keys]
    return paths


def cmd_export_manifest(cfg: PipelineConfig) -> dict:
    manifest = build_manifest(cfg)
    validate_json(manifest, MANIFEST_SCHEMA, "finetune manifest")
    missing = [str(p) for p in manifest_files(manifest, cfg.out) if not p.exists()]
    if missing:
        raise PipelineError("manifest references missing files: " + ", ".join(missing))
    _write_json(cfg.out / "finetune_manifest.json", manifest)
    return manifest


COMMANDS = {
    "plan": cmd_plan,
    "render": cmd_render,
    "enhance": cmd_enhance,
    "confidence": cmd_confidence,
    "export-manifest": cmd_export_manifest,
}
