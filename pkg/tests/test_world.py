import csv

import numpy as np
import pytest

from trajmoe.vocab import Trajectory, TrajectoryVocabulary, sample_trajectories
from trajmoe.world import (
    FAMILIES,
    METRIC_NAMES,
    T_CAM,
    D_CAM,
    MetricVector,
    Obstacle,
    Scenario,
    aggregate_array,
    family_histogram,
    generate_scenario,
    generate_scenarios,
    label_array,
    label_vocabulary,
    oracle_scores,
    project_onto_polyline,
    read_scenarios,
    scene_features,
    write_metric_report,
    write_scenarios,
)


def _straight(obstacles=(), goal=20.0):
    return Scenario((0.0, 0.0, 0.0), 5.0, [[-10.0, 0.0], [100.0, 0.0]], 3.0, list(obstacles), goal)


def _along_centre(step=2.5, lateral=0.0):
    xy = np.column_stack([step * np.arange(1, 9), np.full(8, lateral)])
    return Trajectory.from_waypoints(xy)


class TestGeneration:
    def test_deterministic(self):
        assert generate_scenario(0).to_dict() == generate_scenario(0).to_dict()
        assert generate_scenario(0).to_dict() != generate_scenario(1).to_dict()

    def test_family_frequencies(self):
        histogram = family_histogram(generate_scenario(seed) for seed in range(1000))
        assert sorted(histogram) == sorted(FAMILIES)
        for family in FAMILIES:
            assert 0.28 <= histogram[family] / 1000 <= 0.39

    def test_ego_inside_corridor(self):
        for scenario in generate_scenarios(0, 200):
            distance, _ = project_onto_polyline(scenario.ego[:2], scenario.center)
            assert distance[0] <= scenario.half_width
            assert scenario.goal_arclength >= 5.0
            assert all(o.radius > 0 for o in scenario.obstacles)
            assert len(scenario.obstacles) <= 4

    def test_invalid_scenarios(self):
        with pytest.raises(ValueError):
            Scenario((0.0, 5.0, 0.0), 5.0, [[-10.0, 0.0], [100.0, 0.0]], 3.0, [], 20.0)
        with pytest.raises(ValueError):
            _straight(goal=0.0)
        with pytest.raises(ValueError):
            Obstacle(0.0, 0.0, 0.0)


class TestOracle:
    def test_centre_line_without_obstacles(self):
        metrics = oracle_scores(_along_centre(), _straight())
        assert (metrics.nc, metrics.dac, metrics.hc, metrics.ttc) == (1.0, 1.0, 1.0, 1.0)
        assert abs(metrics.ep - 1.0) < 1e-12
        assert abs(metrics.aggregate - 1.0) < 1e-12

    def test_collision_is_a_hard_gate(self):
        # the fourth waypoint reaches x=10 at t=2.0
        scenario = _straight([Obstacle(10.0, 0.0, 1.0)])
        metrics = oracle_scores(_along_centre(), scenario)
        assert metrics.nc == 0.0
        assert metrics.ttc == 0.0
        assert metrics.aggregate == 0.0

    def test_moving_obstacle_checked_at_matching_time(self):
        # sits on the path at t=0 and has left it when the ego reaches x=10 at t=2.0
        scenario = _straight([Obstacle(10.0, 0.0, 0.5, vy=5.0)])
        assert oracle_scores(_along_centre(), scenario).nc == 1.0

    def test_half_goal_progress(self):
        metrics = oracle_scores(_along_centre(), _straight(goal=40.0))
        assert abs(metrics.ep - 0.5) < 1e-12

    def test_leaving_corridor(self):
        metrics = oracle_scores(_along_centre(lateral=3.5), _straight())
        assert metrics.dac == 0.0
        assert metrics.aggregate == 0.0

    def test_heading_comfort(self):
        xy = np.column_stack([2.5 * np.arange(1, 9), np.zeros(8)])
        headings = np.zeros(8)
        headings[4] = 0.15
        metrics = oracle_scores(Trajectory(np.column_stack([xy, headings])), _straight())
        assert abs(metrics.hc - 0.5) < 1e-12

    def test_horizon_mismatch(self):
        with pytest.raises(ValueError):
            oracle_scores(Trajectory.from_waypoints([[1.0, 0.0], [2.0, 0.0]]), _straight())

    def test_metric_vector_range(self):
        with pytest.raises(ValueError):
            MetricVector(1.0, 1.0, 1.5, 1.0, 1.0)
        metrics = MetricVector(1.0, 1.0, 0.5, 1.0, 0.0)
        assert metrics.aggregate == 0.5 * 0.5 + 0.3
        assert list(metrics.as_dict()) == METRIC_NAMES + ["aggregate"]


class TestOracleProperties:
    def setup_method(self):
        self.vocabulary = TrajectoryVocabulary(sample_trajectories(1, 100))
        self.scenarios = generate_scenarios(500, 100)

    def test_sub_scores_in_unit_interval(self):
        for scenario in self.scenarios:
            labels = label_array(self.vocabulary, scenario)
            assert labels.shape == (100, 5)
            assert ((labels >= 0) & (labels <= 1)).all()
            aggregates = aggregate_array(labels)
            assert ((aggregates >= 0) & (aggregates <= 1)).all()
            gated = (labels[:, 0] == 0) | (labels[:, 1] == 0)
            assert (aggregates[gated] == 0).all()

    def test_rigid_transform_invariance(self):
        random_state = np.random.RandomState(0)
        for scenario in self.scenarios[:20]:
            x, y = random_state.uniform(-50, 50, size=2)
            heading = random_state.uniform(-np.pi, np.pi)
            moved = scenario.transformed(x, y, heading)
            for anchor in self.vocabulary.anchors[:10]:
                world = scenario.to_world(anchor)
                before = oracle_scores(world, scenario).as_array()
                after = oracle_scores(world.transformed(x, y, heading), moved).as_array()
                assert np.allclose(before, after, rtol=0, atol=1e-9)


class TestLabelVocabulary:
    def test_order_aligned(self):
        vocabulary = TrajectoryVocabulary(sample_trajectories(2, 12))
        scenario = generate_scenario(3)
        labels = label_vocabulary(vocabulary, scenario)
        assert len(labels) == 12
        for anchor, metrics in zip(vocabulary.anchors, labels):
            expected = oracle_scores(scenario.to_world(anchor), scenario).as_array()
            assert np.allclose(metrics.as_array(), expected, rtol=0, atol=1e-12)

    def test_centre_prefix_has_maximal_progress(self):
        anchors = [_along_centre(), _along_centre(step=1.5), _along_centre(step=2.0, lateral=1.0)]
        anchors.append(Trajectory.from_waypoints(np.column_stack([np.arange(1.0, 9.0), 0.1 * np.arange(1.0, 9.0) ** 2])))
        vocabulary = TrajectoryVocabulary(anchors)
        labels = label_vocabulary(vocabulary, _straight(goal=20.0))
        assert labels[0].ep == max(m.ep for m in labels)

    def test_blocked_corridor(self):
        vocabulary = TrajectoryVocabulary(sample_trajectories(2, 50))
        scenario = _straight([Obstacle(0.0, 0.0, 100.0)])
        assert all(m.aggregate == 0.0 for m in label_vocabulary(vocabulary, scenario))


class TestSceneFeatures:
    def test_fixed_budget(self):
        for scenario in generate_scenarios(0, 30):
            tokens = scene_features(scenario)
            assert tokens.shape == (T_CAM, D_CAM)
            assert tokens[0, 0] == 1.0
            assert (tokens[1:4, 1] == 1.0).all()
            assert (tokens[4 + len(scenario.obstacles) :, 11] == 1.0).all()

    def test_obstacle_free_tokens_are_padding(self):
        tokens = scene_features(_straight())
        padding = np.zeros((12, D_CAM))
        padding[:, 11] = 1.0
        assert np.array_equal(tokens[4:], padding)

    def test_ego_frame(self):
        tokens = scene_features(_straight([Obstacle(10.0, 2.0, 1.0, vx=5.0)]))
        assert np.allclose(tokens[1, 3:8], [0.5, 0.0, 1.0, 0.0, 0.75], atol=1e-12)
        assert np.allclose(tokens[4, [3, 4, 8, 9, 10]], [0.5, 0.1, 0.5, 0.0, 0.25], atol=1e-12)

    def test_deterministic(self):
        assert np.array_equal(scene_features(generate_scenario(5)), scene_features(generate_scenario(5)))

    def test_too_many_obstacles(self):
        obstacles = [Obstacle(20.0 + i, 0.0, 0.5) for i in range(13)]
        with pytest.raises(ValueError):
            scene_features(_straight(obstacles))


class TestFiles:
    def test_scenario_round_trip(self, tmp_path):
        scenarios = generate_scenarios(0, 5)
        path = tmp_path / "data.jsonl"
        write_scenarios(path, scenarios)
        loaded = read_scenarios(path)
        assert [s.to_dict() for s in loaded] == [s.to_dict() for s in scenarios]
        assert len(path.read_text().splitlines()) == 5

    def test_schema_version(self, tmp_path):
        path = tmp_path / "data.jsonl"
        path.write_text('{"v": 2}\n')
        with pytest.raises(ValueError):
            read_scenarios(path)

    def test_metric_report(self, tmp_path):
        vocabulary = TrajectoryVocabulary(sample_trajectories(2, 4))
        path = tmp_path / "metrics.csv"
        write_metric_report(path, generate_scenarios(0, 3), vocabulary)
        with open(path) as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 12
        assert list(rows[0]) == ["scenario", "anchor"] + METRIC_NAMES + ["aggregate"]
        assert [r["anchor"] for r in rows[:4]] == ["0", "1", "2", "3"]
