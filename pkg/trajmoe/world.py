"""Seeded synthetic driving scenarios and a geometric oracle.

A scenario is a 2D world: an ego vehicle, a corridor around a piecewise
linear centre path, and disc obstacles moving at constant velocity. The
oracle assigns every trajectory five sub-scores (no collision, drivable
area compliance, ego progress, time-to-collision margin, heading comfort)
and a multiplicative aggregate.
"""
import json
import logging
from math import pi

import numpy as np

from trajmoe.checks import check_horizon, check_seed
from trajmoe.csv_table import CsvTable
from trajmoe.vocab import Trajectory, wrap_angle

logger = logging.getLogger(__name__)

FAMILIES = ["straight", "left", "right"]
METRIC_NAMES = ["nc", "dac", "ep", "ttc", "hc"]

# weighted metrics, multiplied by the nc * dac gate
W_EP = 0.5
W_TTC = 0.3
W_HC = 0.2
D_SAFE = 2.0
DELTA_MAX = 0.3

SCHEMA_VERSION = 1
T_CAM = 16
D_CAM = 12
MAX_OBSTACLES = 12
CORRIDOR_LOOKAHEAD = (10.0, 20.0, 35.0)
POSITION_SCALE = 20.0
SPEED_SCALE = 10.0
# half-widths and radii
SIZE_SCALE = 4.0


class Obstacle:
    """Disc moving at constant velocity.

    Args:
        x, y (float): Centre at t=0 in meters.
        radius (float): Radius in meters, > 0.
        vx, vy (float, optional): Velocity in m/s. Default to 0.
    """

    def __init__(self, x, y, radius, vx=0.0, vy=0.0):
        if radius <= 0:
            raise ValueError("Obstacle radius must be positive, got %s." % radius)
        self.x = float(x)
        self.y = float(y)
        self.radius = float(radius)
        self.vx = float(vx)
        self.vy = float(vy)

    def centres(self, times):
        """Centres at the given times, shape len(times) x 2."""
        times = np.asarray(times, dtype=np.float64)
        return np.column_stack([self.x + self.vx * times, self.y + self.vy * times])

    def to_dict(self):
        return {"x": self.x, "y": self.y, "radius": self.radius, "vx": self.vx, "vy": self.vy}


def project_onto_polyline(points, polyline):
    """Distance to, and arclength along, a polyline for each point.

    Args:
        points (ndarray): P x 2.
        polyline (ndarray): M x 2 with M >= 2.

    Returns:
        tuple: (distance, arclength), both of length P.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    start = polyline[:-1]
    segment = polyline[1:] - start
    length = np.linalg.norm(segment, axis=1)
    cumulative = np.concatenate([[0.0], np.cumsum(length)])[:-1]
    relative = points[:, None, :] - start[None, :, :]
    t = (relative * segment[None]).sum(axis=2) / np.maximum(length ** 2, 1e-300)
    t = np.clip(t, 0.0, 1.0)
    foot = start[None] + t[:, :, None] * segment[None]
    distance = np.linalg.norm(points[:, None, :] - foot, axis=2)
    # lowest segment index wins ties
    nearest = distance.argmin(axis=1)
    rows = np.arange(len(points))
    return distance[rows, nearest], cumulative[nearest] + t[rows, nearest] * length[nearest]


def point_at_arclength(polyline, s):
    """Point and unit tangent at arclength ``s`` (clamped to the path)."""
    segment = np.diff(polyline, axis=0)
    length = np.linalg.norm(segment, axis=1)
    cumulative = np.concatenate([[0.0], np.cumsum(length)])
    s = min(max(float(s), 0.0), cumulative[-1])
    i = min(int(np.searchsorted(cumulative, s, side="right")) - 1, len(segment) - 1)
    t = (s - cumulative[i]) / length[i]
    tangent = segment[i] / length[i]
    return polyline[i] + t * segment[i], tangent


def _rotation(heading):
    c, s = np.cos(heading), np.sin(heading)
    return np.array([[c, -s], [s, c]])


class Scenario:
    """Synthetic 2D world.

    Args:
        ego (tuple): Initial pose (x, y, heading) in world coordinates.
        speed (float): Initial ego speed in m/s.
        center (array_like): M x 2 centre path of the corridor.
        half_width (float): Corridor half-width in meters.
        obstacles (list): Obstacles.
        goal_arclength (float): Progress target along the centre path, > 0.
        seed (int, optional): Generating seed. Defaults to None.
        family (str, optional): Corridor family. Defaults to "straight".
        dt (float, optional): Time step in seconds. Defaults to 0.5.
        horizon (int, optional): Waypoints per trajectory. Defaults to 8.
    """

    def __init__(
        self,
        ego,
        speed,
        center,
        half_width,
        obstacles,
        goal_arclength,
        seed=None,
        family="straight",
        dt=0.5,
        horizon=8,
    ):
        self.ego = tuple(float(v) for v in ego)
        self.speed = float(speed)
        self.center = np.array(center, dtype=np.float64)
        self.center.setflags(write=False)
        self.half_width = float(half_width)
        self.obstacles = list(obstacles)
        self.goal_arclength = float(goal_arclength)
        self.seed = seed
        self.family = family
        self.dt = float(dt)
        self.horizon = int(horizon)
        if len(self.center) < 2:
            raise ValueError("The centre path needs at least two points.")
        if self.goal_arclength <= 0:
            raise ValueError("goal_arclength must be positive, got %s." % goal_arclength)
        distance, self.ego_arclength = project_onto_polyline(self.ego[:2], self.center)
        self.ego_arclength = float(self.ego_arclength[0])
        if distance[0] > self.half_width:
            raise ValueError("Ego starts outside the corridor.")

    def times(self):
        """Timestamps of the waypoints, (1..T) * dt."""
        return self.dt * np.arange(1, self.horizon + 1)

    def transformed(self, x: float, y: float, heading: float):
        """Rigid transform of the whole scenario: rotate by ``heading``, then translate."""
        rotation = _rotation(heading)
        shift = np.array([x, y])
        ego_xy = rotation @ np.array(self.ego[:2]) + shift
        obstacles = []
        for obstacle in self.obstacles:
            centre = rotation @ np.array([obstacle.x, obstacle.y]) + shift
            velocity = rotation @ np.array([obstacle.vx, obstacle.vy])
            obstacles.append(Obstacle(centre[0], centre[1], obstacle.radius, velocity[0], velocity[1]))
        return Scenario(
            (ego_xy[0], ego_xy[1], float(wrap_angle(self.ego[2] + heading))),
            self.speed,
            self.center @ rotation.T + shift,
            self.half_width,
            obstacles,
            self.goal_arclength,
            self.seed,
            self.family,
            self.dt,
            self.horizon,
        )

    def to_world(self, trajectory: Trajectory):
        """Places an ego-frame trajectory at the ego pose."""
        return trajectory.transformed(*self.ego)

    def to_ego(self, points):
        """World points into the ego frame."""
        rotation = _rotation(-self.ego[2])
        return (np.asarray(points, dtype=np.float64) - np.array(self.ego[:2])) @ rotation.T

    def to_dict(self):
        return {
            "v": SCHEMA_VERSION,
            "seed": self.seed,
            "family": self.family,
            "ego": {"x": self.ego[0], "y": self.ego[1], "heading": self.ego[2], "speed": self.speed},
            "corridor": {"center": self.center.tolist(), "half_width": self.half_width},
            "obstacles": [o.to_dict() for o in self.obstacles],
            "goal_arclength": self.goal_arclength,
            "dt": self.dt,
            "horizon": self.horizon,
        }

    @classmethod
    def from_dict(cls, payload):
        if payload.get("v") != SCHEMA_VERSION:
            raise ValueError(
                "Unsupported scenario schema version %s (expected %s)."
                % (payload.get("v"), SCHEMA_VERSION)
            )
        ego = payload["ego"]
        return cls(
            (ego["x"], ego["y"], ego["heading"]),
            ego["speed"],
            payload["corridor"]["center"],
            payload["corridor"]["half_width"],
            [Obstacle(**o) for o in payload["obstacles"]],
            payload["goal_arclength"],
            payload.get("seed"),
            payload.get("family", "straight"),
            payload.get("dt", 0.5),
            payload.get("horizon", 8),
        )

    def __repr__(self):
        return "Scenario(seed=%s, family=%s, obstacles=%s)" % (
            self.seed,
            self.family,
            len(self.obstacles),
        )


class MetricVector:
    """Oracle sub-scores of one trajectory, each in [0, 1]."""

    __slots__ = ("nc", "dac", "ep", "ttc", "hc")

    def __init__(self, nc, dac, ep, ttc, hc):
        self.nc = float(nc)
        self.dac = float(dac)
        self.ep = float(ep)
        self.ttc = float(ttc)
        self.hc = float(hc)
        for name in METRIC_NAMES:
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError("Sub-score %s=%s outside [0, 1]." % (name, value))

    @property
    def aggregate(self):
        return aggregate(self.nc, self.dac, self.ep, self.ttc, self.hc)

    def as_array(self):
        return np.array([getattr(self, name) for name in METRIC_NAMES])

    def as_dict(self):
        values = {name: getattr(self, name) for name in METRIC_NAMES}
        values["aggregate"] = self.aggregate
        return values

    def __repr__(self):
        return "MetricVector(%s)" % ", ".join(
            "%s=%.3f" % (k, v) for k, v in self.as_dict().items()
        )


def aggregate(nc, dac, ep, ttc, hc):
    """(nc * dac) * (w_ep ep + w_ttc ttc + w_hc hc); works on arrays."""
    return (nc * dac) * (W_EP * ep + W_TTC * ttc + W_HC * hc)


class _OracleScorer:
    """Scores a batch of world-frame trajectories against one scenario.

    Args:
        scenario (Scenario): World to score in.
    """

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self._poses = None
        self._metrics = None

    def score(self, poses):
        """
        Args:
            poses (ndarray): P x T x 3 world-frame poses.

        Returns:
            ndarray: P x 5 sub-scores in METRIC_NAMES order.
        """
        poses = np.asarray(poses, dtype=np.float64)
        check_horizon(self.scenario.horizon, poses.shape[1])
        self._poses = poses
        self._metrics = np.zeros((len(poses), len(METRIC_NAMES)))
        self._calculate_no_collision_and_ttc()
        self._calculate_drivable_area_compliance()
        self._calculate_progress()
        self._calculate_heading_comfort()
        return self._metrics

    def _calculate_no_collision_and_ttc(self):
        xy = self._poses[:, :, :2]
        nc = np.ones(len(xy))
        ttc = np.ones(len(xy))
        times = self.scenario.times()
        for obstacle in self.scenario.obstacles:
            centres = obstacle.centres(times)
            distance = np.linalg.norm(xy - centres[None], axis=2)
            nc = np.where((distance <= obstacle.radius).any(axis=1), 0.0, nc)
            clearance = np.clip((distance - obstacle.radius) / D_SAFE, 0.0, 1.0)
            ttc = np.minimum(ttc, clearance.min(axis=1))
        self._metrics[:, 0] = nc
        self._metrics[:, 3] = ttc

    def _calculate_drivable_area_compliance(self):
        points = self._poses[:, :, :2].reshape(-1, 2)
        distance, _ = project_onto_polyline(points, self.scenario.center)
        inside = (distance <= self.scenario.half_width).reshape(self._poses.shape[:2])
        self._metrics[:, 1] = inside.all(axis=1).astype(np.float64)

    def _calculate_progress(self):
        _, arclength = project_onto_polyline(self._poses[:, -1, :2], self.scenario.center)
        progress = (arclength - self.scenario.ego_arclength) / self.scenario.goal_arclength
        self._metrics[:, 2] = np.clip(progress, 0.0, 1.0)

    def _calculate_heading_comfort(self):
        start = np.full((len(self._poses), 1), self.scenario.ego[2])
        headings = np.concatenate([start, self._poses[:, :, 2]], axis=1)
        change = np.abs(wrap_angle(np.diff(headings, axis=1))).max(axis=1)
        self._metrics[:, 4] = 1.0 - np.clip(change / DELTA_MAX, 0.0, 1.0)


def oracle_scores(traj: Trajectory, scenario: Scenario) -> MetricVector:
    """Ground-truth sub-scores of a world-frame trajectory."""
    check_horizon(scenario.horizon, traj.horizon)
    if abs(traj.dt - scenario.dt) > 1e-12:
        raise ValueError("Trajectory dt %s does not match scenario dt %s." % (traj.dt, scenario.dt))
    return MetricVector(*_OracleScorer(scenario).score(traj.poses[None])[0])


def anchors_to_world(vocabulary, scenario: Scenario):
    """K x T x 3 world-frame poses of the vocabulary anchors at the ego pose."""
    check_horizon(scenario.horizon, vocabulary.horizon, "vocabulary")
    poses = vocabulary.stacked()
    x, y, heading = scenario.ego
    rotation = _rotation(heading)
    xy = poses[:, :, :2] @ rotation.T + np.array([x, y])
    return np.concatenate([xy, wrap_angle(poses[:, :, 2:] + heading)], axis=2)


def label_array(vocabulary, scenario: Scenario):
    """K x 5 oracle sub-scores of the anchors, order-aligned with the vocabulary."""
    return _OracleScorer(scenario).score(anchors_to_world(vocabulary, scenario))


def label_vocabulary(vocabulary, scenario: Scenario):
    """One MetricVector per anchor, each scored at the scenario's ego pose."""
    return [MetricVector(*row) for row in label_array(vocabulary, scenario)]


def aggregate_array(labels):
    """Aggregate per row of a ... x 5 sub-score array."""
    labels = np.asarray(labels)
    return aggregate(*(labels[..., i] for i in range(len(METRIC_NAMES))))


def _centre_path(family, lead, curvature, behind=10.0, length=120.0):
    """1 m resampled centre path in the ego frame, starting ``behind`` meters back."""
    points = [(-behind, 0.0)]
    x, y, heading = -behind, 0.0, 0.0
    turn = {"straight": 0.0, "left": 1.0, "right": -1.0}[family] * curvature
    for step in range(int(length)):
        s = step + 0.5
        if s > behind + lead and abs(heading) < pi / 2:
            heading = heading + turn
        x += np.cos(heading)
        y += np.sin(heading)
        points.append((x, y))
    return np.array(points)


def generate_scenario(seed, dt: float = 0.5, horizon: int = 8) -> Scenario:
    """Deterministic scenario per seed; corridor family uniform over FAMILIES."""
    random_state = check_seed(seed)
    family = FAMILIES[random_state.randint(len(FAMILIES))]
    half_width = random_state.uniform(2.5, 4.0)
    lead = random_state.uniform(5.0, 20.0)
    curvature = random_state.uniform(0.03, 0.08)
    center = _centre_path(family, lead, curvature)
    offset = random_state.uniform(-0.3, 0.3) * half_width
    speed = random_state.uniform(3.0, 12.0)
    goal = max(5.0, horizon * dt * random_state.uniform(speed, speed + 3.0))

    obstacles = []
    for _ in range(random_state.randint(0, 5)):
        ahead = random_state.uniform(8.0, 60.0)
        lateral = random_state.uniform(-half_width, half_width)
        radius = random_state.uniform(0.5, 1.5)
        moving = random_state.uniform() < 0.5
        obstacle_speed = random_state.uniform(0.0, 5.0) if moving else 0.0
        point, tangent = point_at_arclength(center, 10.0 + ahead)
        normal = np.array([-tangent[1], tangent[0]])
        position = point + lateral * normal
        velocity = obstacle_speed * tangent
        obstacles.append(Obstacle(position[0], position[1], radius, velocity[0], velocity[1]))

    local = Scenario(
        (0.0, offset, 0.0), speed, center, half_width, obstacles, goal,
        seed if isinstance(seed, int) else None, family, dt, horizon,
    )
    # random world placement
    origin_x, origin_y = random_state.uniform(-100.0, 100.0, size=2)
    heading = random_state.uniform(-pi, pi)
    return local.transformed(origin_x, origin_y, heading)


def generate_scenarios(seed: int, count: int, dt: float = 0.5, horizon: int = 8):
    """``count`` scenarios with seeds seed, seed+1, ..."""
    return [generate_scenario(seed + i, dt, horizon) for i in range(count)]


def family_histogram(scenarios):
    histogram = {family: 0 for family in FAMILIES}
    for scenario in scenarios:
        histogram[scenario.family] = histogram.get(scenario.family, 0) + 1
    return histogram


def scene_features(scenario: Scenario):
    """T_cam x D_cam scene tokens in the ego frame.

    Layout: token 0 is the ego, tokens 1-3 sample the corridor 10, 20 and
    35 m ahead, tokens 4-15 are obstacle slots. Channels are
    [is_ego, is_corridor, is_obstacle, x, y, cos, sin, scalar, vx, vy,
    radius, pad]; ``scalar`` is the ego speed or the corridor half-width,
    positions are divided by 20 m, speeds by 10 m/s, half-widths and radii
    by 4 m. Padding tokens
    carry pad = 1 and zeros elsewhere.
    """
    if len(scenario.obstacles) > MAX_OBSTACLES:
        raise ValueError(
            "Scenario has %s obstacles, the token budget allows %s."
            % (len(scenario.obstacles), MAX_OBSTACLES)
        )
    tokens = np.zeros((T_CAM, D_CAM))
    tokens[0, [0, 5, 7]] = [1.0, 1.0, scenario.speed / SPEED_SCALE]

    rotation = _rotation(-scenario.ego[2])
    for slot, ahead in enumerate(CORRIDOR_LOOKAHEAD, start=1):
        point, tangent = point_at_arclength(scenario.center, scenario.ego_arclength + ahead)
        local = scenario.to_ego(point[None])[0] / POSITION_SCALE
        direction = rotation @ tangent
        tokens[slot, [1, 3, 4, 5, 6, 7]] = [
            1.0, local[0], local[1], direction[0], direction[1], scenario.half_width / SIZE_SCALE,
        ]

    first = 1 + len(CORRIDOR_LOOKAHEAD)
    for slot in range(first, T_CAM):
        index = slot - first
        if index >= len(scenario.obstacles):
            tokens[slot, 11] = 1.0
            continue
        obstacle = scenario.obstacles[index]
        local = scenario.to_ego(np.array([[obstacle.x, obstacle.y]]))[0] / POSITION_SCALE
        velocity = rotation @ np.array([obstacle.vx, obstacle.vy]) / SPEED_SCALE
        tokens[slot, [2, 3, 4, 8, 9, 10]] = [
            1.0, local[0], local[1], velocity[0], velocity[1], obstacle.radius / SIZE_SCALE,
        ]
    return tokens


def write_scenarios(path, scenarios):
    """JSON lines, one scenario per line, keys sorted."""
    with open(path, "w") as f:
        for scenario in scenarios:
            f.write(json.dumps(scenario.to_dict(), sort_keys=True))
            f.write("\n")


def read_scenarios(path):
    scenarios = []
    with open(path) as f:
        for number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                scenarios.append(Scenario.from_dict(json.loads(line)))
            except (KeyError, json.JSONDecodeError) as error:
                raise ValueError("%s line %s: malformed scenario (%s)" % (path, number, error))
    return scenarios


def write_metric_report(path, scenarios, vocabulary):
    """CSV with one row per (scenario, anchor)."""
    table = CsvTable(["scenario", "anchor"] + METRIC_NAMES + ["aggregate"])
    for position, scenario in enumerate(scenarios):
        labels = label_array(vocabulary, scenario)
        aggregates = aggregate_array(labels)
        for anchor, (row, total) in enumerate(zip(labels, aggregates)):
            record = dict(zip(METRIC_NAMES, row))
            record.update(
                scenario=scenario.seed if scenario.seed is not None else position,
                anchor=anchor,
                aggregate=total,
            )
            table.add_row(record)
    table.write_to_file(path)
    return table
