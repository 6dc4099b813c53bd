import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gsplan.coverage import CoverageMap, info_gain
from gsplan.errors import PlanningError, PreconditionError
from gsplan.occupancy import OccupancyGrid, is_free, min_dist_to_matter
from gsplan.planner import (
    PRIMITIVES,
    CandidateQueue,
    MotionPrimitive as P,
    PlannerConfig,
    PlannerState,
    PlanningScene,
    apply_primitive,
    expand,
    filter_candidates,
    grow_trajectory,
    plan,
    prepare_scene,
    select_seed_views,
)
from gsplan.scene import AABB, GaussianCloud, View

from fixtures import hollow_box, intrinsics, toy_scene

UP = np.array([0.0, 0.0, 1.0])
INVERSES = [(P.MOVE_RIGHT, P.MOVE_LEFT), (P.MOVE_UP, P.MOVE_DOWN), (P.MOVE_FORWARD, P.MOVE_BACKWARD),
            (P.YAW_POS, P.YAW_NEG), (P.PITCH_POS, P.PITCH_NEG),
            (P.ORBIT_YAW_POS, P.ORBIT_YAW_NEG), (P.ORBIT_PITCH_POS, P.ORBIT_PITCH_NEG)]


def state_at(eye, target=(0, 0, 0)):
    view = View.look_at_pose(eye, target, up=UP, kind="virtual", **intrinsics(32))
    return PlannerState(view, np.asarray(target, float))


def open_scene(cloud=None, half=5.0):
    cloud = cloud if cloud is not None else GaussianCloud.from_arrays([[0, 0, 0]], 0.05)
    bbox = AABB([-half] * 3, [half] * 3)
    return PlanningScene(cloud, [], bbox, OccupancyGrid.empty(bbox, 8), UP)


@pytest.fixture(scope="module")
def toy():
    cloud, cams = toy_scene()
    return prepare_scene(cloud, cams), cams


def test_fourteen_primitives():
    assert len(PRIMITIVES) == 14 == len({p.value for p in PRIMITIVES})
    assert [p.order for p in PRIMITIVES] == list(range(14))


@pytest.mark.parametrize("pair", INVERSES)
def test_inverse_primitives_restore_pose(pair):
    s0 = state_at([3.0, -1.0, 0.7])
    a, b = pair
    for first, second in (pair, (b, a)):
        s2 = apply_primitive(apply_primitive(s0, first, 0.3, 0.2, UP), second, 0.3, 0.2, UP)
        np.testing.assert_allclose(s2.center, s0.center, atol=1e-9)
        np.testing.assert_allclose(s2.view.rotation, s0.view.rotation, atol=1e-9)
        np.testing.assert_allclose(s2.look_at, s0.look_at, atol=1e-9)


@given(st.floats(-np.pi, np.pi), st.floats(-1.0, 1.0), st.floats(0.01, 0.5))
def test_orbit_preserves_distance(az, el, angle):
    eye = 3.0 * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    s0 = state_at(eye)
    for p in (P.ORBIT_YAW_POS, P.ORBIT_YAW_NEG, P.ORBIT_PITCH_POS, P.ORBIT_PITCH_NEG):
        try:
            s1 = apply_primitive(s0, p, 0.1, angle, UP)
        except PreconditionError:
            continue  # re-aiming would look straight up or down
        assert abs(np.linalg.norm(s1.center - s1.look_at) - 3.0) < 1e-9
        np.testing.assert_allclose(s1.view.forward, (s1.look_at - s1.center) / 3.0, atol=1e-9)


def test_translate_right_with_identity_pose():
    s0 = PlannerState(View(**intrinsics(32)), np.array([0.0, 0.0, 2.0]))
    s1 = apply_primitive(s0, P.MOVE_RIGHT, 0.125, 0.1, [0, -1, 0])
    np.testing.assert_allclose(s1.center, [0.125, 0, 0], atol=1e-15)
    np.testing.assert_array_equal(s1.view.rotation, np.eye(3))
    np.testing.assert_array_equal(s1.look_at, s0.look_at)  # sideways moves keep the look-at


def test_forward_moves_look_at_in_lockstep():
    s0 = state_at([3.0, 0, 0])
    s1 = apply_primitive(s0, P.MOVE_FORWARD, 0.5, 0.1, UP)
    np.testing.assert_allclose(s1.look_at, [-0.5, 0, 0], atol=1e-12)


def test_in_place_rotation_keeps_centre_and_look_distance():
    s0 = state_at([3.0, 1.0, 0.5])
    d0 = np.linalg.norm(s0.look_at - s0.center)
    for p in (P.YAW_POS, P.PITCH_NEG):
        s1 = apply_primitive(s0, p, 0.1, 0.3, UP)
        np.testing.assert_allclose(s1.center, s0.center, atol=1e-12)
        assert np.linalg.norm(s1.look_at - s1.center) == pytest.approx(d0, abs=1e-12)


def test_orbit_at_look_at_is_rejected():
    s0 = state_at([3.0, 0, 0])
    s0 = PlannerState(s0.view, s0.center.copy())
    with pytest.raises(PreconditionError):
        apply_primitive(s0, P.ORBIT_YAW_POS, 0.1, 0.2, UP)


def test_seed_nearest_centroid():
    views = [View.look_at_pose(e, [0, 0, 5], id=f"v{i}", **intrinsics(16))
             for i, e in enumerate([[3, 0, 0], [0.2, 0.1, 0], [-3, 0, 0]])]
    (seed,) = select_seed_views(views, 1)
    assert seed.view.id == "v1"


def test_seed_farthest_point_on_square():
    corners = [[1, 1, 0], [-1, 1, 0], [-1, -1, 0], [1, -1, 0]]
    views = [View.look_at_pose(c, [0, 0, 5], id=f"c{i}", **intrinsics(16)) for i, c in enumerate(corners)]
    got = [s.view.id for s in select_seed_views(views, 2)]
    # exhaustive farthest-point reference
    pts = np.array(corners, float)
    d_cent = np.linalg.norm(pts - pts.mean(0), axis=1)
    first = min(range(4), key=lambda i: (d_cent[i], i))
    second = max((i for i in range(4) if i != first), key=lambda i: (np.linalg.norm(pts[i] - pts[first]), -i))
    assert got == [f"c{first}", f"c{second}"]
    assert np.linalg.norm(pts[first] + pts[second]) < 1e-12  # diagonal corners


def test_seeds_exhaust_views():
    views = [View.look_at_pose([3 * np.cos(a), 3 * np.sin(a), 0], [0, 0, 0], id=f"v{i}", **intrinsics(16))
             for i, a in enumerate(np.linspace(0, 6, 5))]
    seeds = select_seed_views(views, 9)
    assert sorted(s.view.id for s in seeds) == sorted(v.id for v in views)


def test_seed_look_at_uses_rendered_depth():
    cloud = GaussianCloud.from_arrays([[0, 0, 0]], 0.5)
    view = View.look_at_pose([3, 0, 0], [0, 0, 0], **intrinsics(32))
    (seed,) = select_seed_views([view], 1, cloud)
    # splat depth is the depth of the Gaussian's mean
    assert np.linalg.norm(seed.look_at - view.center) == pytest.approx(3.0)
    away = View.look_at_pose([3, 0, 0], [6, 0, 0], **intrinsics(32))
    (seed,) = select_seed_views([away], 1, cloud, AABB([0] * 3, [4, 0, 3]))
    assert np.linalg.norm(seed.look_at - away.center) == pytest.approx(0.25 * 5.0)


def test_seed_requirements():
    with pytest.raises(PreconditionError):
        select_seed_views([], 1)


def test_filter_removes_outside_and_keeps_open_space():
    scene = open_scene(GaussianCloud.from_arrays([[4.5, 4.5, 4.5]], 0.01))
    cfg = PlannerConfig()
    s0 = state_at([0.0, 1.0, 0.3])
    cands = expand(s0, scene, cfg)
    assert len(cands) == 14
    assert len(filter_candidates(cands, scene, cfg)) == 14
    outside = state_at([9.0, 0, 0])
    assert filter_candidates([outside], scene, cfg) == []


def test_filter_removes_occupied_cells():
    cloud, cams, wall = hollow_box()
    scene = prepare_scene(cloud, cams)
    cfg = PlannerConfig()
    inside = [state_at(m + [0, 0, 0.0], m + [1.0, 0, 0]) for m in cloud.means[~wall][:5]]
    assert filter_candidates(inside, scene, cfg) == []


def test_filter_removes_candidates_near_matter():
    scene = open_scene(GaussianCloud.from_arrays([[1.0, 0, 0]], 0.05))
    close = state_at([1.1, 0, 0], [3, 0, 0])
    assert filter_candidates([close], scene, PlannerConfig()) == []


def test_saturated_scene_grows_by_tie_break():
    scene = open_scene()
    cmap = CoverageMap.from_dense(np.ones((1, 32), dtype=bool))
    cfg = PlannerConfig(length=6)
    traj = grow_trajectory(state_at([-2.0, 0, 0.3]), cmap, scene, cfg, CandidateQueue())
    assert len(traj) == 6
    assert traj.realized_gains == [0] * 6
    assert traj.actions == [P.MOVE_RIGHT] * 6


def test_corridor_only_moves_forward():
    # thin box along +x: every sideways, vertical and orbit move leaves it, and
    # with no information left forward wins the remaining ties (backward, rotations)
    bbox = AABB([-0.01, -0.05, -0.05], [10.0, 0.05, 0.05])
    cloud = GaussianCloud.from_arrays([[9.0, 0, 0]], 0.01)
    scene = PlanningScene(cloud, [], bbox, OccupancyGrid.empty(bbox, 8), UP)
    cmap = CoverageMap.from_dense(np.ones((1, 32), dtype=bool))
    cfg = PlannerConfig(length=8)
    seed = state_at([0.1, 0, 0], [5.0, 0, 0])
    valid = {p for p, _ in filter_candidates(expand(seed, scene, cfg), scene, cfg)}
    assert valid == {P.MOVE_FORWARD, P.YAW_POS, P.YAW_NEG, P.PITCH_POS, P.PITCH_NEG}
    traj = grow_trajectory(seed, cmap, scene, cfg, CandidateQueue())
    assert traj.actions == [P.MOVE_FORWARD] * 8
    step = cfg.translation_step * bbox.diagonal
    np.testing.assert_allclose(traj.views[-1].center, [0.1 + 8 * step, 0, 0], atol=1e-9)


def test_invalid_seed_gives_empty_trajectory():
    scene = open_scene()
    traj = grow_trajectory(state_at([9.0, 0, 0]), CoverageMap(1), scene, PlannerConfig(), CandidateQueue())
    assert len(traj) == 0 and traj.diagnostics


def test_dead_end_pops_banked_candidates(toy, monkeypatch):
    # in-place rotations keep a valid centre, so real dead ends are rare; force one
    import gsplan.planner as planner

    scene, _ = toy
    cfg = PlannerConfig(length=6)
    seed = select_seed_views(scene.training_views, 1, scene.cloud, scene.bbox)[0]
    real_expand = planner.expand
    monkeypatch.setattr(planner, "expand", lambda st, *a: real_expand(st, *a) if st is seed else [])
    events = []
    cmap = CoverageMap(len(scene.cloud))
    traj = grow_trajectory(seed, cmap, scene, cfg, CandidateQueue(), observer=events.append)
    # best child advances, ranks two and three are banked and then popped
    assert [e["kind"] for e in events] == ["expand", "pop", "pop"]
    assert len(traj) == 3 and traj.parents == [seed.view.id] * 3
    ranked = events[0]["siblings"]
    assert traj.actions[0] == ranked[0][0]
    assert set(traj.actions[1:]) == {ranked[1][0], ranked[2][0]}
    assert "exhausted" in traj.diagnostics[0]


def test_candidate_queue_lazy_pop():
    q = CandidateQueue()
    q.push(10, "a")
    q.push(8, "b")
    fresh = {"a": 3, "b": 7}
    item, score, _ = q.pop_lazy(lambda it: (fresh[it], None))
    assert (item, score) == ("b", 7)
    assert q.items() == ["a"]
    assert q.pop_lazy(lambda it: (fresh[it], None))[0] == "a"
    assert q.pop_lazy(lambda it: (0, None)) is None


def test_single_short_trajectory(toy):
    scene, _ = toy
    result = plan(scene, PlannerConfig(n_trajectories=1, length=1))
    assert len(result.trajectories) == 1 and len(result.trajectories[0]) == 1


def test_plan_is_deterministic_and_telescopes(toy):
    scene, _ = toy
    cfg = PlannerConfig(n_trajectories=3, length=5)
    a, b = plan(scene, cfg), plan(scene, cfg)
    ja = json.dumps([t.to_json() for t in a.trajectories])
    assert ja == json.dumps([t.to_json() for t in b.trajectories])
    total = sum(sum(t.realized_gains) for t in a.trajectories)
    assert total == a.popcount_final - a.popcount_initial == a.coverage.popcount() - a.popcount_initial


def test_greedy_choice_is_optimal(toy):
    scene, _ = toy
    cfg = PlannerConfig(n_trajectories=3, length=6)
    events = []
    result = plan(scene, cfg, observer=events.append)
    assert events
    for ev in events:
        if ev["kind"] == "expand":
            valid = filter_candidates(expand(ev["parent"], scene, cfg), scene, cfg)
            gains = {p: info_gain(ev["coverage"], scene.cloud, s.view, cfg.binning, cfg.eps_vis) for p, s in valid}
            best = max(gains.values())
            assert ev["gain"] == gains[ev["action"]] == best
            assert ev["action"] == min((p for p, g in gains.items() if g == best), key=lambda p: p.order)
        else:
            g = info_gain(ev["coverage"], scene.cloud, ev["state"].view, cfg.binning, cfg.eps_vis)
            assert g == ev["gain"]
            for other in ev["queue"]:
                assert g >= info_gain(ev["coverage"], scene.cloud, other.state.view, cfg.binning, cfg.eps_vis)
    for traj in result.trajectories:
        for v in traj.views:
            assert v.kind == "virtual"


def test_consecutive_views_differ_by_one_primitive(toy):
    scene, _ = toy
    cfg = PlannerConfig(n_trajectories=2, length=5)
    result = plan(scene, cfg)
    seeds = {s.view.id: s for s in select_seed_views(scene.training_views, 2, scene.cloud, scene.bbox)}
    for traj in result.trajectories:
        by_id = {v.id: v for v in traj.views}
        for view, action, parent in zip(traj.views, traj.actions, traj.parents):
            prev = seeds[parent] if parent in seeds else PlannerState(by_id[parent], by_id[parent].look_at)
            nxt = apply_primitive(prev, action, cfg.translation_step * scene.bbox.diagonal,
                                  cfg.rotation_step, scene.up)
            np.testing.assert_allclose(nxt.center, view.center, atol=1e-9)


def test_emitted_views_respect_constraints(toy):
    scene, _ = toy
    cfg = PlannerConfig(n_trajectories=3, length=6)
    for traj in plan(scene, cfg).trajectories:
        for v in traj.views:
            assert scene.bbox.contains(v.center)
            assert is_free(scene.grid, v.center)
            assert min_dist_to_matter(scene.cloud, v.center) >= cfg.proximity_radius * scene.bbox.diagonal


def test_no_valid_seed_is_an_error():
    cloud = GaussianCloud.from_arrays([[0, 0, 0]], 0.05)
    cam = View.look_at_pose([0.0, 0.0, 0.001], [1, 0, 0], **intrinsics(16))
    bbox = AABB([-1] * 3, [1] * 3)
    scene = PlanningScene(cloud, [cam], bbox, OccupancyGrid.empty(bbox, 4), UP)
    with pytest.raises(PlanningError):
        plan(scene, PlannerConfig(n_trajectories=1, length=2))


def test_config_validation():
    with pytest.raises(PreconditionError):
        PlannerConfig(length=0)
    cfg = PlannerConfig()
    assert (cfg.n_trajectories, cfg.top_k, cfg.binning.n_directions) == (20, 3, 32)
    assert cfg.rotation_step == pytest.approx(math.radians(15))
