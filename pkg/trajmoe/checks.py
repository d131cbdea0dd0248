"""Functions to check input types and consistency.
"""
import logging

from numpy import isfinite
from numpy.random import RandomState

logger = logging.getLogger(__name__)


class StageError(ValueError):
    """Raised when a checkpoint carries the wrong stage tag."""


def check_seed(seed):
    """Check whether given seed can be used to seed a numpy.random.RandomState
    :return: numpy.random.RandomState (seeded if seed given)
    """
    if seed is None:
        return RandomState()
    elif isinstance(seed, (int,)) and not isinstance(seed, bool):
        return RandomState(seed)
    elif isinstance(seed, RandomState):
        return seed
    else:
        raise TypeError("{} cannot be used to seed".format(seed))


def check_kinematics(v_max: float = None, dt: float = None, horizon: int = None):
    """Checks kinematic sampling parameters."""
    if v_max is None or v_max <= 0:
        raise ValueError("v_max must be positive, got %s." % v_max)
    if dt is None or dt <= 0:
        raise ValueError("dt must be positive, got %s." % dt)
    if not isinstance(horizon, int) or horizon < 1:
        raise TypeError("Horizon must be a positive integer, got %s." % horizon)


def check_horizon(expected: int, found: int, what: str = "trajectory"):
    """Raises if two horizons disagree."""
    if expected != found:
        raise ValueError(
            "Horizon mismatch: %s has %s waypoints, expected %s."
            % (what, found, expected)
        )


def check_unit_interval(values, name: str = "values"):
    """Checks that every entry of an array lies in [0, 1]."""
    if not isfinite(values).all():
        raise ValueError("%s must be finite." % name)
    if (values < 0).any() or (values > 1).any():
        raise ValueError("%s must lie in [0, 1]." % name)


def check_stage(found: str, expected: str):
    """Checks the stage tag of a checkpoint."""
    if found != expected:
        raise StageError(
            "Checkpoint stage is '%s', this step requires '%s'." % (found, expected)
        )


def check_moe_arguments(num_experts: int = None, top_k: int = None, strict: bool = True):
    """Checks router arguments: 1 <= k < N, or 1 <= k <= N when not ``strict``."""
    if not isinstance(num_experts, int) or num_experts < 1:
        raise ValueError("Number of experts must be a positive integer.")
    upper = num_experts - 1 if strict else num_experts
    if not isinstance(top_k, int) or not 1 <= top_k <= upper:
        raise ValueError(
            "top_k must satisfy 1 <= k %s N, got k=%s, N=%s."
            % ("<" if strict else "<=", top_k, num_experts)
        )


def check_grpo_arguments(
    group_size: int = None,
    clip: float = None,
    kl_coeff: float = None,
    loss_kl_coeff: float = None,
    sigma_min: float = None,
    advantage_mode: str = None,
):
    """Checks GRPO hyper-parameters."""
    if not isinstance(group_size, int) or group_size < 2:
        raise ValueError("Group size must be an integer >= 2, got %s." % group_size)
    if not 0 < clip < 1:
        raise ValueError("Clip range must lie in (0, 1), got %s." % clip)
    if kl_coeff < 0 or loss_kl_coeff < 0:
        raise ValueError("KL coefficients must be non-negative.")
    if sigma_min <= 0:
        raise ValueError("sigma_min must be positive, got %s." % sigma_min)
    modes = ["per_sample", "suffix_sum"]
    if advantage_mode not in modes:
        raise ValueError(
            "Advantage mode %s is not valid. Pick one among %s"
            % (advantage_mode, modes)
        )


def check_weights(weights):
    """Checks ensemble weights: at least one, all >= 0, positive sum."""
    if len(weights) == 0:
        raise ValueError("An ensemble needs at least one member.")
    for value in weights:
        if not isfinite(value) or value < 0:
            raise ValueError("Ensemble weights must be finite and >= 0, got %s." % value)
    if sum(weights) <= 0:
        raise ValueError("Ensemble weights must not all be zero.")
