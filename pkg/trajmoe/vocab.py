"""Trajectory vocabulary: sampled ego-frame trajectories clustered into anchors.
"""
import json
import logging
from math import pi

import numpy as np

from trajmoe.checks import check_horizon, check_kinematics, check_seed

logger = logging.getLogger(__name__)


def wrap_angle(angle):
    """Wraps angles into (-pi, pi]."""
    wrapped = np.mod(np.asarray(angle, dtype=np.float64) + pi, 2 * pi) - pi
    return np.where(wrapped <= -pi, wrapped + 2 * pi, wrapped)


def headings_from_waypoints(xy, start=(0.0, 0.0), start_heading=0.0):
    """Heading of each waypoint, taken from the segment that reaches it.

    A zero-length segment keeps the previous heading.
    """
    xy = np.asarray(xy, dtype=np.float64)
    previous = np.vstack([np.asarray(start, dtype=np.float64)[None, :], xy[:-1]])
    delta = xy - previous
    headings = np.empty(len(xy))
    current = start_heading
    for i, (dx, dy) in enumerate(delta):
        if dx * dx + dy * dy > 1e-18:
            current = np.arctan2(dy, dx)
        headings[i] = current
    return wrap_angle(headings)


class Trajectory:
    """Fixed-horizon sequence of planar poses.

    Args:
        poses (array_like): T x 3 array of (x [m], y [m], heading [rad]).
        dt (float, optional): Time between waypoints in seconds. Defaults to 0.5.
    """

    def __init__(self, poses, dt: float = 0.5):
        poses = np.array(poses, dtype=np.float64)
        if poses.ndim != 2 or poses.shape[1] != 3 or len(poses) == 0:
            raise ValueError("Poses must be a non-empty T x 3 array, got %s." % (poses.shape,))
        poses[:, 2] = wrap_angle(poses[:, 2])
        poses.setflags(write=False)
        self.poses = poses
        self.dt = dt

    @classmethod
    def from_waypoints(cls, xy, dt: float = 0.5, start=(0.0, 0.0), start_heading=0.0):
        """Builds a trajectory whose headings follow consecutive waypoints."""
        xy = np.asarray(xy, dtype=np.float64)
        headings = headings_from_waypoints(xy, start, start_heading)
        return cls(np.column_stack([xy, headings]), dt)

    @property
    def horizon(self):
        return len(self.poses)

    @property
    def xy(self):
        return self.poses[:, :2]

    @property
    def headings(self):
        return self.poses[:, 2]

    def flat(self):
        """Flattened (x, y) waypoints, the clustering space."""
        return self.xy.reshape(-1)

    def transformed(self, x: float, y: float, heading: float):
        """Rigid transform: rotate by ``heading`` then translate by (x, y)."""
        c, s = np.cos(heading), np.sin(heading)
        rotated = self.xy @ np.array([[c, s], [-s, c]])
        return Trajectory(
            np.column_stack([rotated + np.array([x, y]), self.headings + heading]), self.dt
        )

    def __eq__(self, other):
        return (
            isinstance(other, Trajectory)
            and self.poses.shape == other.poses.shape
            and bool(np.array_equal(self.poses, other.poses))
        )

    def __hash__(self):
        return hash(self.poses.tobytes())

    def __repr__(self):
        return "Trajectory(horizon=%s, end=(%.2f, %.2f))" % (
            self.horizon,
            self.poses[-1, 0],
            self.poses[-1, 1],
        )


class KinematicParams:
    """Bounds of the seeded bicycle-model sampler.

    Args:
        v_max (float, optional): Maximum speed in m/s. Defaults to 15.
        dt (float, optional): Step in seconds. Defaults to 0.5.
        horizon (int, optional): Number of waypoints. Defaults to 8.
        speed_range (tuple, optional): Initial speed bounds. Defaults to (0, 12).
        accel_range (tuple, optional): Acceleration bounds in m/s^2.
            Defaults to (-3, 2).
        curvature_max (float, optional): Initial |curvature| bound in 1/m.
            Defaults to 0.15.
        curvature_rate_max (float, optional): |curvature rate| bound in 1/(m s).
            Defaults to 0.04.
    """

    def __init__(
        self,
        v_max: float = 15.0,
        dt: float = 0.5,
        horizon: int = 8,
        speed_range=(0.0, 12.0),
        accel_range=(-3.0, 2.0),
        curvature_max: float = 0.15,
        curvature_rate_max: float = 0.04,
    ):
        check_kinematics(v_max=v_max, dt=dt, horizon=horizon)
        self.v_max = v_max
        self.dt = dt
        self.horizon = horizon
        self.speed_range = speed_range
        self.accel_range = accel_range
        self.curvature_max = curvature_max
        self.curvature_rate_max = curvature_rate_max


def rollout(speed, accel, curvature, curvature_rate, params: KinematicParams):
    """Bicycle-model rollout from the ego origin (heading 0).

    Speed is clamped into [0, v_max]; the pose update uses the speed and
    curvature at the start of each step.
    """
    x = y = heading = 0.0
    v, kappa = float(speed), float(curvature)
    poses = []
    for _ in range(params.horizon):
        v = min(max(v, 0.0), params.v_max)
        x += v * np.cos(heading) * params.dt
        y += v * np.sin(heading) * params.dt
        heading += v * kappa * params.dt
        poses.append((x, y, heading))
        v += accel * params.dt
        kappa += curvature_rate * params.dt
    return Trajectory(poses, params.dt)


def check_kinematic_bound(trajectory: Trajectory, params: KinematicParams):
    """True if consecutive waypoints (origin included) are at most v_max*dt apart."""
    xy = np.vstack([np.zeros((1, 2)), trajectory.xy])
    steps = np.linalg.norm(np.diff(xy, axis=0), axis=1)
    return bool((steps <= params.v_max * params.dt * (1 + 1e-12)).all())


def sample_trajectories(seed, count: int, kinematic_params: KinematicParams = None):
    """Seeded bicycle-model trajectories with random speed and curvature profiles.

    Args:
        seed (int or RandomState): Seed.
        count (int): Number of trajectories.
        kinematic_params (KinematicParams, optional): Sampler bounds.

    Returns:
        list: Trajectories, each passing the kinematic sanity bound.
    """
    params = kinematic_params if kinematic_params is not None else KinematicParams()
    check_kinematics(v_max=params.v_max, dt=params.dt, horizon=params.horizon)
    if not isinstance(count, int) or count < 0:
        raise ValueError("Count must be a non-negative integer, got %s." % count)
    random_state = check_seed(seed)
    trajectories = []
    for _ in range(count):
        speed = random_state.uniform(*params.speed_range)
        accel = random_state.uniform(*params.accel_range)
        curvature = random_state.uniform(-params.curvature_max, params.curvature_max)
        rate = random_state.uniform(-params.curvature_rate_max, params.curvature_rate_max)
        trajectory = rollout(speed, accel, curvature, rate, params)
        if not check_kinematic_bound(trajectory, params):
            raise ValueError("Sampled trajectory violates the kinematic bound.")
        trajectories.append(trajectory)
    logger.debug("sampled %s trajectories", count)
    return trajectories


class TrajectoryVocabulary:
    """K anchor trajectories plus provenance.

    Args:
        anchors (list): Trajectories sharing one horizon.
        source (dict, optional): Generation metadata (seed, sample count,
            k-means iterations, final inertia). Defaults to empty.
    """

    def __init__(self, anchors, source: dict = None):
        if len(anchors) < 1:
            raise ValueError("A vocabulary needs at least one anchor.")
        horizon = anchors[0].horizon
        for anchor in anchors:
            check_horizon(horizon, anchor.horizon, "anchor")
        if len(set(anchors)) != len(anchors):
            raise ValueError("Vocabulary anchors must be distinct.")
        self.anchors = list(anchors)
        self.source = dict(source or {})

    @property
    def k(self):
        return len(self.anchors)

    @property
    def horizon(self):
        return self.anchors[0].horizon

    @property
    def dt(self):
        return self.anchors[0].dt

    def __len__(self):
        return len(self.anchors)

    def check_usable(self):
        """A vocabulary planned over needs K >= 2 anchors."""
        if self.k < 2:
            raise ValueError("A vocabulary needs K >= 2 anchors, got %s." % self.k)

    def __getitem__(self, index):
        return self.anchors[index]

    def stacked(self):
        """K x T x 3 array of anchor poses."""
        return np.stack([a.poses for a in self.anchors])

    def to_json(self):
        return json.dumps(
            {
                "horizon": self.horizon,
                "dt": self.dt,
                "k": self.k,
                "anchors": [a.poses.tolist() for a in self.anchors],
                "source": self.source,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text):
        payload = json.loads(text)
        for key in ["horizon", "dt", "k", "anchors"]:
            if key not in payload:
                raise KeyError("Vocabulary file requires field %s." % key)
        anchors = [Trajectory(poses, payload["dt"]) for poses in payload["anchors"]]
        if len(anchors) != payload["k"]:
            raise ValueError("Vocabulary declares k=%s but stores %s anchors." % (payload["k"], len(anchors)))
        for anchor in anchors:
            check_horizon(payload["horizon"], anchor.horizon, "anchor")
        vocabulary = cls(anchors, payload.get("source"))
        vocabulary.check_usable()
        return vocabulary

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_json())
            f.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_json(f.read())


class _KMeans:
    """Lloyd's k-means with seeded k-means++ initialisation.

    Args:
        points (ndarray): n x d data.
        k (int): Number of clusters.
        iters (int): Maximum iterations.
        random_state (RandomState): Seeded generator.
    """

    def __init__(self, points, k, iters, random_state):
        self.points = points
        self.k = k
        self.iters = iters
        self.random_state = random_state
        self.centroids = None
        self.labels = None
        self.inertia_history = []
        self.iterations = 0

    def _squared_distances(self, centroids):
        d = (
            (self.points ** 2).sum(axis=1)[:, None]
            - 2.0 * self.points @ centroids.T
            + (centroids ** 2).sum(axis=1)[None, :]
        )
        return np.maximum(d, 0.0)

    def _init_plusplus(self):
        n = len(self.points)
        centroids = np.empty((self.k, self.points.shape[1]))
        centroids[0] = self.points[self.random_state.randint(n)]
        closest = self._squared_distances(centroids[:1])[:, 0]
        for i in range(1, self.k):
            total = closest.sum()
            probs = closest / total
            index = self.random_state.choice(n, p=probs)
            centroids[i] = self.points[index]
            closest = np.minimum(closest, self._squared_distances(centroids[i : i + 1])[:, 0])
        return centroids

    def _assign(self, centroids):
        distances = self._squared_distances(centroids)
        # argmin returns the lowest index on ties
        labels = distances.argmin(axis=1)
        return labels, float(distances[np.arange(len(labels)), labels].sum())

    def _update(self, labels, centroids):
        new = np.empty_like(centroids)
        counts = np.bincount(labels, minlength=self.k)
        for j in range(self.k):
            if counts[j]:
                new[j] = self.points[labels == j].mean(axis=0)
            else:
                new[j] = centroids[j]
        empty = np.flatnonzero(counts == 0)
        if len(empty):
            own = ((self.points - new[labels]) ** 2).sum(axis=1)
            for j in empty:
                # re-seed to the point farthest from its own centroid
                farthest = int(own.argmax())
                logger.debug("cluster %s empty, re-seeded to point %s", j, farthest)
                new[j] = self.points[farthest]
                own[farthest] = 0.0
        return new

    def run(self):
        centroids = self._init_plusplus()
        labels, inertia = self._assign(centroids)
        self.inertia_history = [inertia]
        for iteration in range(self.iters):
            centroids = self._update(labels, centroids)
            new_labels, inertia = self._assign(centroids)
            if inertia > self.inertia_history[-1] * (1 + 1e-12) + 1e-12:
                raise RuntimeError(
                    "k-means inertia increased from %s to %s"
                    % (self.inertia_history[-1], inertia)
                )
            self.inertia_history.append(inertia)
            self.iterations = iteration + 1
            logger.debug("k-means iteration %s, inertia %.6f", self.iterations, inertia)
            converged = np.array_equal(new_labels, labels)
            labels = new_labels
            if converged:
                break
        self.centroids = centroids
        self.labels = labels
        return self


def build_vocabulary(trajs, K: int, iters: int, seed, restarts: int = 10):
    """Clusters trajectories into K anchors with k-means.

    Distances are Euclidean over flattened (x, y) waypoints; headings of the
    anchors are rebuilt from consecutive centroid waypoints.

    Args:
        trajs (list): Trajectories sharing one horizon.
        K (int): Number of anchors, at most the number of distinct inputs.
        iters (int): Maximum Lloyd iterations, >= 1.
        seed (int or RandomState): Seed for k-means++.
        restarts (int, optional): Seeded initialisations; the lowest inertia
            run is kept. Defaults to 10.

    Returns:
        TrajectoryVocabulary
    """
    if not isinstance(iters, int) or iters < 1:
        raise ValueError("iters must be an integer >= 1, got %s." % iters)
    if not isinstance(restarts, int) or restarts < 1:
        raise ValueError("restarts must be an integer >= 1, got %s." % restarts)
    if not isinstance(K, int) or K < 1:
        raise ValueError("K must be a positive integer, got %s." % K)
    if not trajs:
        raise ValueError("No trajectories to cluster.")
    horizon, dt = trajs[0].horizon, trajs[0].dt
    for traj in trajs:
        check_horizon(horizon, traj.horizon)
    points = np.stack([t.flat() for t in trajs])
    distinct = len(np.unique(points, axis=0))
    if K > distinct:
        raise ValueError("K=%s exceeds the %s distinct input trajectories." % (K, distinct))

    random_state = check_seed(seed)
    if K == 1:
        centroids = points.mean(axis=0, keepdims=True)
        inertia = float(((points - centroids) ** 2).sum())
        iterations = 1
    else:
        best = None
        for restart in range(restarts):
            run = _KMeans(points, K, iters, random_state).run()
            logger.info(
                "k-means restart %s: %s iterations, inertia %.6f",
                restart,
                run.iterations,
                run.inertia_history[-1],
            )
            if best is None or run.inertia_history[-1] < best.inertia_history[-1]:
                best = run
        centroids = best.centroids
        inertia = float(((points - centroids[best.labels]) ** 2).sum())
        iterations = best.iterations

    anchors = [Trajectory.from_waypoints(c.reshape(horizon, 2), dt) for c in centroids]
    source = {
        "seed": seed if isinstance(seed, int) else None,
        "sample_count": len(trajs),
        "kmeans_iterations": iterations,
        "restarts": restarts,
        "inertia": inertia,
    }
    return TrajectoryVocabulary(anchors, source)


def nearest_anchor(traj: Trajectory, vocabulary) -> int:
    """Index of the anchor with the smallest squared waypoint distance.

    Maps a recorded trajectory onto the vocabulary, e.g. to turn a driven
    path into an anchor class. Ties are broken by the lowest index.
    """
    check_horizon(vocabulary.anchors[0].horizon, traj.horizon)
    stacked = np.stack([a.xy for a in vocabulary.anchors])
    distances = ((stacked - traj.xy[None, :, :]) ** 2).sum(axis=(1, 2))
    return int(np.argmin(distances))
