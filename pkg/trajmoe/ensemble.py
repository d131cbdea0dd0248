"""Trajectory ensembling across scorer checkpoints.

Each member selects one anchor; the plan is the waypoint-wise weighted
average of the selected anchors, with headings rebuilt from the averaged
waypoints.
"""
import json
import logging
from fractions import Fraction
from pathlib import Path

import numpy as np
import pulp

from trajmoe.checks import check_horizon, check_weights
from trajmoe.checkpoint import load_checkpoint
from trajmoe.model import composite_scores, score_vocabulary
from trajmoe.vocab import Trajectory
from trajmoe.world import scene_features

logger = logging.getLogger(__name__)


class EnsembleSpec:
    """Checkpoint paths with non-negative weights.

    Args:
        members (list): (checkpoint path, weight) pairs; weights need not sum to 1.
    """

    def __init__(self, members):
        self.members = [(str(path), float(weight)) for path, weight in members]
        check_weights(self.weights)

    @property
    def paths(self):
        return [path for path, _ in self.members]

    @property
    def weights(self):
        return [weight for _, weight in self.members]

    @classmethod
    def from_json(cls, text, base=None):
        """Parses {"members": [{"checkpoint": path, "weight": number}, ...]}.

        A missing weight counts as 1. Relative paths resolve against ``base``.
        """
        payload = json.loads(text)
        if "members" not in payload:
            raise KeyError("Ensemble file requires field members.")
        members = []
        for entry in payload["members"]:
            path = Path(entry["checkpoint"])
            if base is not None and not path.is_absolute():
                path = Path(base) / path
            members.append((path, entry.get("weight", 1.0)))
        return cls(members)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_json(f.read(), Path(path).parent)

    def to_json(self):
        return json.dumps(
            {"members": [{"checkpoint": p, "weight": w} for p, w in self.members]}, sort_keys=True
        )


def normalized_weights(weights):
    """Weights divided by their sum, computed exactly before rounding."""
    check_weights(weights)
    exact = [Fraction(w) for w in weights]
    total = sum(exact)
    return [float(w / total) for w in exact]


def weighted_average(trajectories, weights) -> Trajectory:
    """Waypoint-wise convex combination of ego-frame trajectories.

    Computed as x_p + sum_j w_j (x_j - x_p) around the heaviest member p, so
    a one-hot weighting or identical members reproduce x_p exactly. Headings
    are recomputed from consecutive averaged waypoints.
    """
    if len(trajectories) != len(weights):
        raise ValueError("Got %s trajectories and %s weights." % (len(trajectories), len(weights)))
    w = normalized_weights(weights)
    horizon = trajectories[0].horizon
    for trajectory in trajectories:
        check_horizon(horizon, trajectory.horizon)
        if trajectory.dt != trajectories[0].dt:
            raise ValueError("Trajectories disagree on dt.")
    pivot = int(np.argmax(w))
    base = trajectories[pivot].xy
    xy = base.copy()
    for j, (trajectory, weight) in enumerate(zip(trajectories, w)):
        if j != pivot and weight != 0:
            xy = xy + weight * (trajectory.xy - base)
    return Trajectory.from_waypoints(xy, trajectories[0].dt)


def in_convex_hull(point, vertices, tol: float = 1e-9):
    """Whether ``point`` is a convex combination of ``vertices`` (LP feasibility)."""
    vertices = np.asarray(vertices, dtype=np.float64)
    prob = pulp.LpProblem("ConvexHull", pulp.LpMinimize)
    lam = [pulp.LpVariable("lam_%s" % j, lowBound=0, upBound=1) for j in range(len(vertices))]
    prob += pulp.lpSum(lam)
    prob += pulp.lpSum(lam) == 1
    for d in range(vertices.shape[1]):
        combination = pulp.lpSum(float(vertices[j, d]) * lam[j] for j in range(len(vertices)))
        prob += combination <= float(point[d]) + tol
        prob += combination >= float(point[d]) - tol
    prob.solve(pulp.PULP_CBC_CMD(msg=False))
    logger.debug("Status: %s", pulp.LpStatus[prob.status])
    return pulp.LpStatus[prob.status] == "Optimal"


def check_hull(plan: Trajectory, trajectories, tol: float = 1e-9):
    """Indices of waypoints that leave the per-timestep hull of the members."""
    outside = []
    for t in range(plan.horizon):
        if not in_convex_hull(plan.xy[t], [traj.xy[t] for traj in trajectories], tol):
            outside.append(t)
    return outside


def load_members(spec: EnsembleSpec, vocabulary):
    """Loads every member checkpoint; errors name the failing member."""
    checkpoints = []
    for index, path in enumerate(spec.paths):
        try:
            checkpoint = load_checkpoint(path)
            check_horizon(checkpoint.config.horizon, vocabulary.horizon, "vocabulary")
        except OSError as error:
            raise OSError("Ensemble member %s (%s) failed to load: %s" % (index, path, error))
        except (ValueError, KeyError) as error:
            raise ValueError("Ensemble member %s (%s) is not usable: %s" % (index, path, error))
        checkpoints.append(checkpoint)
    return checkpoints


class MemberReport:
    """What one member chose."""

    def __init__(self, member, checkpoint, weight, selected, composite):
        self.member = member
        self.checkpoint = checkpoint
        self.weight = weight
        self.selected = selected
        self.composite = composite

    def as_dict(self):
        return {
            "member": self.member,
            "checkpoint": self.checkpoint,
            "weight": self.weight,
            "selected": self.selected,
            "composite": self.composite,
        }


def ensemble_plan(scenario, spec: EnsembleSpec, vocabulary, checkpoints=None):
    """Plans with every member and averages the selected anchors.

    Args:
        scenario (Scenario): World to plan in.
        spec (EnsembleSpec): Members and weights.
        vocabulary (TrajectoryVocabulary): Shared anchors.
        checkpoints (list, optional): Preloaded members, in spec order.

    Returns:
        tuple: (ego-frame Trajectory, list of MemberReport)
    """
    if checkpoints is None:
        checkpoints = load_members(spec, vocabulary)
    features = scene_features(scenario)
    reports = []
    selected = []
    for index, (checkpoint, (path, weight)) in enumerate(zip(checkpoints, spec.members)):
        output = score_vocabulary(features, vocabulary, checkpoint.params)
        composite = composite_scores(output.mu, checkpoint.metric_names)
        choice = int(np.argmax(composite))
        selected.append(vocabulary[choice])
        reports.append(MemberReport(index, path, weight, choice, float(composite[choice])))
        logger.debug("member %s selected anchor %s (composite %.4f)", index, choice, composite[choice])
    return weighted_average(selected, spec.weights), reports
