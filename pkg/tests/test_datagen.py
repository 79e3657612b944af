from __future__ import annotations

import json
import math

import numpy as np
import pytest

from t2sg.datagen import (
    FORMAT_VERSION,
    DatasetError,
    DatasetVersionError,
    ScenarioSpec,
    decode_record,
    encode_record,
    generate_scene,
    heading_change,
    make_sample,
    perturb_detections,
    read_dataset,
    scenario_specs,
    scene_hash,
    turn_category,
    write_dataset,
)
from t2sg.scene import gt_connectivity, validate


def _heading(points: np.ndarray, at_end: bool) -> np.ndarray:
    d = points[-1] - points[-2] if at_end else points[1] - points[0]
    return d[:2]


def test_spec_validation():
    with pytest.raises(ValueError):
        ScenarioSpec(kind="roundabout")
    with pytest.raises(ValueError):
        ScenarioSpec(kind="multiway", arms=7)
    with pytest.raises(ValueError):
        ScenarioSpec(noise_sigma=-0.1)
    with pytest.raises(ValueError):
        ScenarioSpec(bev_extent=((5, 5), (0, 1)))


def test_turn_category_thresholds():
    assert turn_category(0.0) == "go_straight"
    assert turn_category(10.0) == "go_straight"
    assert turn_category(18.0) == "slight_left"
    assert turn_category(-18.0) == "slight_right"
    assert turn_category(90.0) == "turn_left"
    assert turn_category(-90.0) == "turn_right"
    assert turn_category(179.0) == "u_turn"
    assert heading_change(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == pytest.approx(90.0)


def test_straight_two_segments():
    g = generate_scene(ScenarioSpec(kind="straight", segments=2, seed=4))
    assert len(g.lanes) == 2
    assert g.edges == frozenset({(0, 1)})
    assert [ln.category for ln in g.lanes] == ["lane", "go_straight"]


def test_smallest_crossroad_enumeration():
    g = generate_scene(ScenarioSpec(kind="crossroad", seed=12))
    preds = {j: i for i, j in g.edges}
    succs = {i: j for i, j in g.edges}
    connectors = [k for k in range(len(g.lanes)) if k in preds and k in succs]
    assert len(connectors) == 12
    assert len(g.lanes) == 20
    counts = {}
    for k in connectors:
        a = _heading(g.lanes[preds[k]].centerline.points, at_end=True)
        b = _heading(g.lanes[succs[k]].centerline.points, at_end=False)
        expected = turn_category(heading_change(a, b))
        assert g.lanes[k].category == expected
        counts[expected] = counts.get(expected, 0) + 1
    # every incoming arm reaches the other three arms: one left, one straight, one right
    assert counts == {"turn_left": 4, "go_straight": 4, "turn_right": 4}


@pytest.mark.parametrize("kind", ["straight", "t_junction", "crossroad", "multiway"])
def test_generated_scenes_are_valid_and_self_consistent(kind):
    for seed in range(5):
        g = generate_scene(ScenarioSpec(kind=kind, seed=seed, lanes_per_arm=1 + seed % 2))
        assert validate(g) == []
        assert gt_connectivity(g.lanes) == g.edges


def test_same_seed_same_bytes():
    a = encode_record(make_sample(ScenarioSpec(kind="t_junction", seed=99)))
    b = encode_record(make_sample(ScenarioSpec(kind="t_junction", seed=99)))
    c = encode_record(make_sample(ScenarioSpec(kind="t_junction", seed=100)))
    assert a == b
    assert a != c


def test_noise_free_detection_is_ground_truth():
    spec = ScenarioSpec(kind="crossroad", noise_sigma=0.0, distractor_count=0, seed=3)
    s = make_sample(spec)
    assert s.assignment == tuple(range(len(s.scene.lanes)))
    for c, ln in zip(s.pred_centerlines, s.scene.lanes):
        assert np.array_equal(c.points, ln.centerline.points)


def test_noise_displacement_matches_half_normal_mean():
    sigma = 0.2
    disp = []
    seed = 0
    while sum(d.size for d in disp) < 30000:
        spec = ScenarioSpec(kind="crossroad", noise_sigma=sigma, distractor_count=0, seed=seed)
        s = make_sample(spec)
        for c, ln in zip(s.pred_centerlines, s.scene.lanes):
            disp.append(np.abs(c.points - ln.centerline.points).ravel())
        seed += 1
    mean = np.concatenate(disp).mean()
    assert mean == pytest.approx(sigma * math.sqrt(2 / math.pi), rel=0.05)


def test_distractors_are_background_inside_extent():
    spec = ScenarioSpec(kind="t_junction", distractor_count=5, seed=8)
    s = make_sample(spec)
    assert s.assignment.count(-1) == 5
    assert s.n_queries == len(s.scene.lanes) + 5
    gt_slots = [a for a in s.assignment if a >= 0]
    assert gt_slots == sorted(gt_slots)
    for c, a in zip(s.pred_centerlines, s.assignment):
        if a < 0:
            assert np.all(np.abs(c.points[:, :2]) <= 30.0)


def test_query_features_shape_and_determinism():
    s = make_sample(ScenarioSpec(kind="straight", seed=1, feature_dim=24))
    q = s.queries
    assert q.shape == (s.n_queries, 24)
    assert np.array_equal(q, make_sample(ScenarioSpec(kind="straight", seed=1, feature_dim=24)).queries)


def test_traffic_elements_cover_signal_categories():
    s = make_sample(ScenarioSpec(kind="crossroad", seed=5, n_lights=2))
    signs = {e.category for e in s.traffic_elements if not e.is_light}
    assert signs == {ln.category for ln in s.scene.lanes} - {"lane"}
    assert sum(e.is_light for e in s.traffic_elements) == 2


def test_ramp_exercises_z():
    g = generate_scene(ScenarioSpec(kind="straight", seed=2, ramp_slope=0.05))
    z = np.concatenate([ln.centerline.points[:, 2] for ln in g.lanes])
    assert np.ptp(z) > 0.1
    flat = generate_scene(ScenarioSpec(kind="straight", seed=2))
    assert all(np.all(ln.centerline.points[:, 2] == 0) for ln in flat.lanes)


def test_dataset_round_trip(tmp_path):
    samples = [make_sample(s) for s in scenario_specs(6, 3, ScenarioSpec(), ("straight", "t_junction", "multiway"))]
    path = tmp_path / "d.jsonl"
    write_dataset(samples, path, {"note": "x"})
    back = read_dataset(path)
    assert back == samples
    for a, b in zip(samples, back):
        for ca, cb in zip(a.pred_centerlines, b.pred_centerlines):
            assert np.array_equal(ca.points, cb.points)
    header = json.loads(path.read_text().splitlines()[0])
    assert header == {"format_version": FORMAT_VERSION, "config": {"note": "x"}}


def test_record_fields():
    rec = json.loads(encode_record(make_sample(ScenarioSpec(kind="straight", seed=0))))
    assert {"scene_id", "lanes", "edges", "detections", "traffic_elements"} <= set(rec)
    assert {"centerlines", "assignment", "feature_seed"} <= set(rec["detections"])


def test_truncated_line_names_line(tmp_path):
    samples = [make_sample(s) for s in scenario_specs(3, 0, ScenarioSpec())]
    path = tmp_path / "d.jsonl"
    write_dataset(samples, path)
    lines = path.read_text().splitlines()
    lines[2] = lines[2][: len(lines[2]) // 2]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetError) as err:
        read_dataset(path)
    assert err.value.line == 3


def test_missing_field_named():
    rec = json.loads(encode_record(make_sample(ScenarioSpec(kind="straight", seed=0))))
    del rec["detections"]["assignment"]
    with pytest.raises(DatasetError) as err:
        decode_record(json.dumps(rec), line=7)
    assert err.value.field == "detections.assignment"
    assert "line 7" in str(err.value)


def test_version_mismatch(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text(json.dumps({"format_version": 2}) + "\n")
    with pytest.raises(DatasetVersionError):
        read_dataset(path)


def test_scenario_specs_cycle_kinds_and_distinct_scenes():
    specs = scenario_specs(30, 11, ScenarioSpec())
    assert [s.kind for s in specs[:3]] == ["straight", "t_junction", "crossroad"]
    hashes = {scene_hash(generate_scene(s)) for s in specs}
    assert len(hashes) == 30


def test_perturb_is_separate_from_layout():
    spec = ScenarioSpec(kind="crossroad", seed=21)
    g = generate_scene(spec)
    s = perturb_detections(g, spec)
    assert s.scene is g
