import numpy as np
import pytest

from trajmoe.vocab import (
    KinematicParams,
    Trajectory,
    TrajectoryVocabulary,
    _KMeans,
    build_vocabulary,
    check_kinematic_bound,
    nearest_anchor,
    rollout,
    sample_trajectories,
    wrap_angle,
)


def _line(y, horizon=8, step=2.0):
    xy = np.column_stack([step * np.arange(1, horizon + 1), np.full(horizon, float(y))])
    return Trajectory.from_waypoints(xy)


class TestTrajectory:
    def test_headings_wrapped(self):
        assert wrap_angle(np.pi) == np.pi
        assert wrap_angle(-np.pi) == np.pi
        assert abs(wrap_angle(3 * np.pi / 2) + np.pi / 2) < 1e-12
        trajectory = Trajectory([[0.0, 0.0, -np.pi], [1.0, 0.0, 7.0]])
        assert (trajectory.headings > -np.pi).all()
        assert (trajectory.headings <= np.pi).all()

    def test_bad_shape(self):
        with pytest.raises(ValueError):
            Trajectory(np.zeros((8, 2)))

    def test_headings_follow_waypoints(self):
        trajectory = Trajectory.from_waypoints([[1.0, 0.0], [1.0, 1.0], [1.0, 1.0]])
        assert np.allclose(trajectory.headings, [0.0, np.pi / 2, np.pi / 2], rtol=0, atol=1e-12)

    def test_rigid_transform(self):
        trajectory = _line(0.0).transformed(1.0, 2.0, np.pi / 2)
        assert np.allclose(trajectory.xy[0], [1.0, 4.0], atol=1e-12)
        assert np.allclose(trajectory.headings, np.pi / 2, atol=1e-12)


class TestSampling:
    def setup_method(self):
        self.params = KinematicParams()

    def test_replayable(self):
        first = sample_trajectories(1, 3)
        second = sample_trajectories(1, 3)
        assert len(first) == 3
        assert all(t.horizon == 8 for t in first)
        assert first == second

    def test_straight_rollout(self):
        trajectory = rollout(4.0, 0.0, 0.0, 0.0, self.params)
        steps = np.diff(np.vstack([[0.0, 0.0], trajectory.xy]), axis=0)
        assert np.allclose(steps[:, 0], 4.0 * 0.5, atol=1e-12)
        assert (steps[:, 1] == 0).all()
        assert (trajectory.headings == 0).all()

    def test_kinematic_bound(self):
        trajectories = sample_trajectories(7, 10000, self.params)
        assert len(trajectories) == 10000
        assert all(check_kinematic_bound(t, self.params) for t in trajectories)

    def test_invalid_speed_limit(self):
        with pytest.raises(ValueError):
            KinematicParams(v_max=0.0)
        with pytest.raises(ValueError):
            sample_trajectories(0, -1)


class TestBuildVocabulary:
    def setup_method(self):
        self.trajs = sample_trajectories(3, 200)

    def test_two_distinct_inputs(self):
        a, b = _line(0.0), _line(3.0)
        vocabulary = build_vocabulary([a, b, a], 2, 10, seed=0)
        assert set(vocabulary.anchors) == {a, b}
        assert vocabulary.source["inertia"] == 0.0

    def test_single_anchor_is_mean(self):
        vocabulary = build_vocabulary(self.trajs, 1, 5, seed=0)
        mean = np.mean([t.xy for t in self.trajs], axis=0)
        assert np.allclose(vocabulary[0].xy, mean, rtol=0, atol=1e-12)
        with pytest.raises(ValueError):
            vocabulary.check_usable()

    def test_errors(self):
        a, b = _line(0.0), _line(3.0)
        with pytest.raises(ValueError):
            build_vocabulary([a, b, a], 3, 10, seed=0)
        with pytest.raises(ValueError):
            build_vocabulary([a, b], 2, 0, seed=0)
        with pytest.raises(ValueError):
            build_vocabulary([a, _line(0.0, horizon=6)], 1, 1, seed=0)

    def test_inertia_non_increasing(self):
        points = np.stack([t.flat() for t in self.trajs])
        run = _KMeans(points, 8, 50, np.random.RandomState(1)).run()
        history = run.inertia_history
        assert all(later <= earlier * (1 + 1e-12) + 1e-12 for earlier, later in zip(history, history[1:]))

    def test_anchors_are_cluster_means(self):
        points = np.stack([t.flat() for t in self.trajs])
        run = _KMeans(points, 8, 300, np.random.RandomState(2)).run()
        assert run.iterations < 300
        for j in range(8):
            members = points[run.labels == j]
            assert np.allclose(run.centroids[j], members.mean(axis=0), rtol=0, atol=1e-9)

    def test_deterministic(self):
        first = build_vocabulary(self.trajs, 8, 30, seed=5)
        second = build_vocabulary(self.trajs, 8, 30, seed=5)
        assert first.anchors == second.anchors
        assert first.source == second.source

    def test_close_to_multi_restart_oracle(self):
        vocabulary = build_vocabulary(self.trajs, 8, 100, seed=0)
        assert vocabulary.source["restarts"] == 10
        oracle = min(
            build_vocabulary(self.trajs, 8, 100, seed=seed, restarts=1).source["inertia"] for seed in range(20)
        )
        assert vocabulary.source["inertia"] <= 1.05 * oracle

    def test_recorded_inertia_matches_anchors(self):
        vocabulary = build_vocabulary(self.trajs, 8, 30, seed=5)
        anchors = np.stack([a.flat() for a in vocabulary.anchors])
        points = np.stack([t.flat() for t in self.trajs])
        distances = ((points[:, None, :] - anchors[None, :, :]) ** 2).sum(axis=2)
        assert abs(distances.min(axis=1).sum() - vocabulary.source["inertia"]) <= 1e-9 * vocabulary.source["inertia"]


class TestVocabularyFile:
    def setup_method(self):
        self.vocabulary = build_vocabulary(sample_trajectories(0, 100), 6, 20, seed=1)

    def test_round_trip(self, tmp_path):
        path = tmp_path / "vocab.json"
        self.vocabulary.save(path)
        loaded = TrajectoryVocabulary.load(path)
        assert loaded.anchors == self.vocabulary.anchors
        assert loaded.source == self.vocabulary.source
        assert loaded.horizon == 8
        assert loaded.dt == 0.5

    def test_missing_field(self):
        with pytest.raises(KeyError):
            TrajectoryVocabulary.from_json('{"horizon": 8, "dt": 0.5, "k": 2}')

    def test_single_anchor_file_rejected(self):
        text = TrajectoryVocabulary([_line(0.0)]).to_json()
        with pytest.raises(ValueError):
            TrajectoryVocabulary.from_json(text)

    def test_duplicate_anchors_rejected(self):
        with pytest.raises(ValueError):
            TrajectoryVocabulary([_line(0.0), _line(0.0)])


class TestNearestAnchor:
    def setup_method(self):
        self.vocabulary = TrajectoryVocabulary([_line(y) for y in [10.0, 0.0, 20.0, 30.0, 2.0]])

    def test_exact_match(self):
        assert nearest_anchor(_line(30.0), self.vocabulary) == 3

    def test_tie_goes_to_lowest_index(self):
        assert nearest_anchor(_line(1.0), self.vocabulary) == 1

    def test_horizon_mismatch(self):
        with pytest.raises(ValueError):
            nearest_anchor(_line(0.0, horizon=6), self.vocabulary)

    def test_matches_linear_scan(self):
        vocabulary = build_vocabulary(sample_trajectories(4, 100), 8, 20, seed=4)
        for trajectory in sample_trajectories(5, 50):
            distances = [float(((a.xy - trajectory.xy) ** 2).sum()) for a in vocabulary.anchors]
            assert nearest_anchor(trajectory, vocabulary) == distances.index(min(distances))

    def test_exported_from_package(self):
        import trajmoe

        assert trajmoe.nearest_anchor is nearest_anchor
