"""Time rendering and planning on a large synthetic scene.

    python scripts/benchmark.py --gaussians 100000 --trajectories 4 --length 8
"""

import argparse
import json
import os
import time

from gsplan.planner import PlannerConfig, plan, prepare_scene
from gsplan.rasterizer import render
from gsplan.synthetic import blob_scene, ring_cameras


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--gaussians", type=int, default=100_000)
    ap.add_argument("--cameras", type=int, default=24)
    ap.add_argument("--image-size", type=int, default=512)
    ap.add_argument("--score-resolution", type=int, default=256)
    ap.add_argument("--trajectories", type=int, default=4)
    ap.add_argument("--length", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cloud = blob_scene(args.gaussians, args.seed)
    cams = ring_cameras(args.cameras, 3.0, 0.8, args.image_size)
    render(cloud, cams[0])  # compile kernels

    t = time.perf_counter()
    for cam in cams[:3]:
        render(cloud, cam)
    render_s = (time.perf_counter() - t) / 3

    t = time.perf_counter()
    scene = prepare_scene(cloud, cams)
    prep_s = time.perf_counter() - t

    cfg = PlannerConfig(n_trajectories=args.trajectories, length=args.length,
                        score_resolution=args.score_resolution, rng_seed=args.seed)
    t = time.perf_counter()
    result = plan(scene, cfg)
    plan_s = time.perf_counter() - t

    print(json.dumps({
        "gaussians": args.gaussians,
        "cpus": os.cpu_count(),
        "render_seconds_per_frame": round(render_s, 3),
        "scene_preparation_seconds": round(prep_s, 2),
        "planning_seconds": round(plan_s, 2),
        "views_planned": sum(len(tr) for tr in result.trajectories),
        "total_gain": result.popcount_final - result.popcount_initial,
    }, indent=2))


if __name__ == "__main__":
    main()
