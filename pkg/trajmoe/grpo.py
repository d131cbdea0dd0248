"""Group relative policy optimisation of Gaussian score heads.

Each head predicts a Gaussian over the score of one (scenario, anchor,
metric). A rollout draws a group of candidate scores from the sampling
policy, rewards each by its distance to the oracle score and normalises the
rewards within the group. The heads then follow a clipped surrogate with a
KL penalty towards the frozen reference policy; the backbone stays fixed.
"""
import logging
from math import log, pi

import numpy as np

from trajmoe import numerics as nx
from trajmoe.checks import check_grpo_arguments, check_seed, check_stage
from trajmoe.checkpoint import Checkpoint
from trajmoe.csv_table import CsvTable
from trajmoe.model import apply_heads, fuse

logger = logging.getLogger(__name__)

HALF_LOG_2PI = 0.5 * log(2 * pi)
LOG_RATIO_CLAMP = 20.0
MAX_CLAMP_FRACTION = 0.01
DEGENERATE_STD = 1e-12
LOG_COLUMNS = ["iteration", "loss", "J", "KL", "clip_fraction", "mean_abs_err"]


class GrpoConfig:
    """Hyper-parameters of the fine-tuning stage.

    Args:
        group_size (int, optional): Samples N per rollout, >= 2. Defaults to 16.
        clip (float, optional): Clip range epsilon in (0, 1). Defaults to 0.2.
        kl_coeff (float, optional): KL weight beta inside the objective. Defaults to 0.01.
        loss_kl_coeff (float, optional): KL weight lambda in the loss. Defaults to 0.01.
        sigma_min (float, optional): Lower bound of sigma. Defaults to 0.01.
        iterations (int, optional): Outer iterations. Defaults to 200.
        lr (float, optional): Gradient descent step. Defaults to 1e-2.
        seed (int, optional): Rollout seed. Defaults to 0.
        advantage_mode (str, optional): "per_sample" or "suffix_sum".
            Defaults to "per_sample".
        batch (int, optional): Rollouts per iteration. Defaults to 32.
        max_grad_norm (float, optional): Global gradient norm bound; None
            disables clipping. Defaults to 1.0.
        updates_per_iteration (int, optional): Gradient steps per rollout
            batch. Defaults to 1.
    """

    FIELDS = [
        "group_size",
        "clip",
        "kl_coeff",
        "loss_kl_coeff",
        "sigma_min",
        "iterations",
        "lr",
        "seed",
        "advantage_mode",
        "batch",
        "max_grad_norm",
        "updates_per_iteration",
    ]

    def __init__(
        self,
        group_size: int = 16,
        clip: float = 0.2,
        kl_coeff: float = 0.01,
        loss_kl_coeff: float = 0.01,
        sigma_min: float = 0.01,
        iterations: int = 200,
        lr: float = 1e-2,
        seed: int = 0,
        advantage_mode: str = "per_sample",
        batch: int = 32,
        max_grad_norm: float = 1.0,
        updates_per_iteration: int = 1,
    ):
        check_grpo_arguments(group_size, clip, kl_coeff, loss_kl_coeff, sigma_min, advantage_mode)
        if iterations < 0 or batch < 1 or updates_per_iteration < 1:
            raise ValueError("iterations must be >= 0, batch and updates_per_iteration >= 1.")
        if lr <= 0:
            raise ValueError("Learning rate must be positive, got %s." % lr)
        self.group_size = group_size
        self.clip = clip
        self.kl_coeff = kl_coeff
        self.loss_kl_coeff = loss_kl_coeff
        self.sigma_min = sigma_min
        self.iterations = iterations
        self.lr = lr
        self.seed = seed
        self.advantage_mode = advantage_mode
        self.batch = batch
        self.max_grad_norm = max_grad_norm
        self.updates_per_iteration = updates_per_iteration

    def to_dict(self):
        return {field: getattr(self, field) for field in self.FIELDS}


def sample_group(mu: float, sigma: float, N: int, seed=None):
    """N seeded draws from N(mu, sigma^2)."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0, got %s." % sigma)
    random_state = check_seed(seed)
    return mu + sigma * random_state.standard_normal(N)


def group_rewards(samples, target: float):
    """Rewards r_i = -|s_i - s*| and their group-normalised form.

    A group whose rewards have population std below 1e-12 gets all-zero
    normalised rewards.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[-1] < 2:
        raise ValueError("A group needs at least two samples.")
    rewards = -np.abs(samples - target)
    std = rewards.std()
    if std < DEGENERATE_STD:
        logger.debug("degenerate group, rewards all equal")
        return rewards, np.zeros_like(rewards)
    return rewards, (rewards - rewards.mean()) / std


def advantages(normalized, mode: str = "per_sample"):
    """Per-sample advantages.

    ``per_sample`` keeps r~_i. ``suffix_sum`` sums r~_j over every j with
    r~_j >= r~_i, ties included.
    """
    normalized = np.asarray(normalized, dtype=np.float64)
    if not np.isfinite(normalized).all():
        raise ValueError("Normalised rewards must be finite.")
    if mode == "per_sample":
        return normalized.copy()
    if mode == "suffix_sum":
        return np.array([normalized[normalized >= value].sum() for value in normalized])
    raise ValueError("Advantage mode %s is not valid. Pick one among %s" % (mode, ["per_sample", "suffix_sum"]))


def _check_sigma(sigma, sigma_min, name="sigma"):
    value = sigma.value if isinstance(sigma, nx.Tensor) else np.asarray(sigma)
    if (value < sigma_min).any():
        raise ValueError("%s below sigma_min=%s." % (name, sigma_min))


def gaussian_log_prob(x, mu, sigma, sigma_min: float = 0.01):
    """-log(sigma) - 0.5 log(2 pi) - 0.5 ((x - mu) / sigma)^2, elementwise."""
    _check_sigma(sigma, sigma_min)
    z = nx.div(nx.sub(x, mu), sigma)
    return nx.sub(nx.mul(nx.log(sigma), -1.0) - HALF_LOG_2PI, nx.mul(nx.mul(z, z), 0.5))


def gaussian_kl(mu_theta, sigma_theta, mu_ref, sigma_ref, sigma_min: float = 0.01):
    """0.5 [log s_t^2 - log s_r^2 + (s_r^2 + (m_t - m_r)^2) / s_t^2 - 1], elementwise."""
    _check_sigma(sigma_theta, sigma_min, "sigma_theta")
    _check_sigma(sigma_ref, sigma_min, "sigma_ref")
    var_theta = nx.mul(sigma_theta, sigma_theta)
    var_ref = nx.mul(sigma_ref, sigma_ref)
    shift = nx.sub(mu_theta, mu_ref)
    ratio = nx.div(nx.add(var_ref, nx.mul(shift, shift)), var_theta)
    return nx.mul(nx.sub(nx.log(var_theta), nx.log(var_ref)) + ratio - 1.0, 0.5)


class GroupRollout:
    """One group of sampled scores with rewards and advantages.

    Args:
        mu_old, sigma_old (float): Sampling policy.
        mu_ref, sigma_ref (float): Frozen reference policy.
        samples (array_like): N sampled scores.
        target (float): Oracle score s*.
        advantage_mode (str, optional): Defaults to "per_sample".
    """

    def __init__(self, mu_old, sigma_old, mu_ref, sigma_ref, samples, target, advantage_mode="per_sample"):
        self.mu_old = float(mu_old)
        self.sigma_old = float(sigma_old)
        self.mu_ref = float(mu_ref)
        self.sigma_ref = float(sigma_ref)
        self.samples = np.asarray(samples, dtype=np.float64)
        self.target = float(target)
        self.rewards, self.normalized = group_rewards(self.samples, self.target)
        self.advantages = advantages(self.normalized, advantage_mode)

    @classmethod
    def collect(cls, mu_old, sigma_old, mu_ref, sigma_ref, target, config: GrpoConfig, seed=None):
        samples = sample_group(mu_old, sigma_old, config.group_size, seed)
        return cls(mu_old, sigma_old, mu_ref, sigma_ref, samples, target, config.advantage_mode)

    @property
    def group_size(self):
        return len(self.samples)


class ObjectiveDiagnostics:
    """Side results of the surrogate objective.

    Attributes:
        kl (Tensor): Mean KL to the reference policy, differentiable.
        mean_ratio (float): Mean probability ratio.
        clip_fraction (float): Share of ratios outside [1 - eps, 1 + eps].
        clamp_fraction (float): Share of log-ratios clamped at +-20.
    """

    def __init__(self, kl, mean_ratio, clip_fraction, clamp_fraction):
        self.kl = kl
        self.mean_ratio = mean_ratio
        self.clip_fraction = clip_fraction
        self.clamp_fraction = clamp_fraction

    def __repr__(self):
        return "ObjectiveDiagnostics(kl=%.6g, mean_ratio=%.6g, clip_fraction=%.4f)" % (
            self.kl.item(),
            self.mean_ratio,
            self.clip_fraction,
        )


def _surrogate(samples, adv, mu_old, sigma_old, mu_ref, sigma_ref, mu_theta, sigma_theta, config):
    """Per-rollout J over samples laid out N x R (or N for one rollout)."""
    sigma_min = config.sigma_min
    mu_theta_value = np.asarray(nx.as_tensor(mu_theta).value)
    sigma_theta_value = np.asarray(nx.as_tensor(sigma_theta).value)
    with np.errstate(all="ignore"):
        raw = (
            -np.log(sigma_theta_value) - 0.5 * ((samples - mu_theta_value) / sigma_theta_value) ** 2
            + np.log(sigma_old) + 0.5 * ((samples - mu_old) / sigma_old) ** 2
        )
    bad = np.argwhere(~np.isfinite(raw))
    if len(bad):
        raise nx.DivergenceError("Non-finite probability ratio at sample index %s." % bad[0].tolist())
    clamped = np.abs(raw) > LOG_RATIO_CLAMP

    log_ratio = gaussian_log_prob(samples, mu_theta, sigma_theta, sigma_min) - gaussian_log_prob(
        samples, mu_old, sigma_old, sigma_min
    )
    ratio = nx.exp(nx.clip(log_ratio, -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP))
    unclipped = nx.mul(ratio, adv)
    clipped = nx.mul(nx.clip(ratio, 1.0 - config.clip, 1.0 + config.clip), adv)
    kl = gaussian_kl(mu_theta, sigma_theta, mu_ref, sigma_ref, sigma_min)
    terms = nx.sub(nx.minimum(unclipped, clipped), nx.mul(kl, config.kl_coeff))
    J = nx.mean(terms, axis=0)

    outside = (ratio.value < 1.0 - config.clip) | (ratio.value > 1.0 + config.clip)
    return J, kl, float(ratio.value.mean()), float(outside.mean()), float(clamped.mean())


def grpo_objective(rollout: GroupRollout, mu_theta, sigma_theta, config: GrpoConfig):
    """J = (1/N) sum_i { min[ratio_i Adv_i, clip(ratio_i) Adv_i] - beta KL }.

    Args:
        rollout (GroupRollout): Samples, advantages and the old/reference policies.
        mu_theta, sigma_theta (Tensor or float): Current policy.
        config (GrpoConfig): clip, kl_coeff and sigma_min are used.

    Returns:
        tuple: (J, ObjectiveDiagnostics)
    """
    J, kl, mean_ratio, clip_fraction, clamp_fraction = _surrogate(
        rollout.samples,
        rollout.advantages,
        rollout.mu_old,
        rollout.sigma_old,
        rollout.mu_ref,
        rollout.sigma_ref,
        mu_theta,
        sigma_theta,
        config,
    )
    return J, ObjectiveDiagnostics(kl, mean_ratio, clip_fraction, clamp_fraction)


def batch_objective(rollouts, mu_theta, sigma_theta, config: GrpoConfig):
    """Mean J over rollouts; ``mu_theta`` and ``sigma_theta`` hold one entry per rollout."""
    columns = lambda name: np.array([getattr(r, name) for r in rollouts])
    J, kl, mean_ratio, clip_fraction, clamp_fraction = _surrogate(
        np.stack([r.samples for r in rollouts], axis=1),
        np.stack([r.advantages for r in rollouts], axis=1),
        columns("mu_old"),
        columns("sigma_old"),
        columns("mu_ref"),
        columns("sigma_ref"),
        mu_theta,
        sigma_theta,
        config,
    )
    return nx.mean(J), ObjectiveDiagnostics(nx.mean(kl), mean_ratio, clip_fraction, clamp_fraction)


def rl_loss(J, KL, loss_kl_coeff: float):
    """-J + lambda KL."""
    return nx.add(nx.mul(J, -1.0), nx.mul(KL, loss_kl_coeff))


def clip_gradients(grads: dict, max_norm):
    """Rescales all gradients so their global L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(np.sum([np.sum(g * g) for g in grads.values()])))
    if max_norm is None or norm <= max_norm:
        return grads, norm
    scale = max_norm / (norm + 1e-12)
    return {name: g * scale for name, g in grads.items()}, norm


class ScalarHead:
    """A single Gaussian head with free parameters (mu, sigma_raw).

    sigma = softplus(sigma_raw) + sigma_min; mu lives directly in score space.
    """

    def __init__(self, mu: float, sigma: float, sigma_min: float = 0.01):
        if sigma <= sigma_min:
            raise ValueError("Initial sigma must exceed sigma_min.")
        self.sigma_min = sigma_min
        self.arrays = {
            "mu": np.array(float(mu)),
            "sigma_raw": np.array(log(np.expm1(sigma - sigma_min))),
        }

    def evaluate(self, tensors, keys):
        ones = np.ones(len(keys))
        mu = nx.mul(ones, tensors["mu"])
        sigma = nx.softplus(nx.mul(ones, tensors["sigma_raw"])) + self.sigma_min
        return mu, sigma

    @property
    def mu(self):
        return float(self.arrays["mu"])

    @property
    def sigma(self):
        return float(np.logaddexp(0.0, self.arrays["sigma_raw"]) + self.sigma_min)


class ScorerHeads:
    """The scorer's metric heads over precomputed fused anchor tokens.

    The policy mean is the logistic map of the mu head, so it lives in the
    [0, 1] score space of the oracle.

    Args:
        params (MoEScorerParams): Scorer; only head arrays are trained.
        vocabulary (TrajectoryVocabulary): Anchors.
        scenes (list): LabelledScene items.
    """

    def __init__(self, params, vocabulary, scenes):
        self.config = params.config
        self.sigma_min = params.config.sigma_min
        self.arrays = {name: params.arrays[name] for name in params.head_names()}
        constants = params.tensors()
        self.fused = [
            fuse(scene.features, vocabulary, constants, self.config)[0].value for scene in scenes
        ]
        self.targets = [scene.targets for scene in scenes]

    def evaluate(self, tensors, keys):
        """keys: (scene, anchor, metric) triples."""
        rows = []
        for scene, anchor, metric in keys:
            name = self.config.metric_names[metric]
            token = nx.Tensor(self.fused[scene][anchor:anchor + 1])
            rows.append(token @ tensors["head.%s.w" % name] + tensors["head.%s.b" % name])
        out = nx.concat(rows, axis=0)
        count = len(keys)
        mu = nx.sigmoid(nx.reshape(nx.take_along(out, np.zeros((count, 1))), [count]))
        sigma = nx.softplus(nx.reshape(nx.take_along(out, np.ones((count, 1))), [count])) + self.sigma_min
        return mu, sigma

    def draw(self, random_state, batch):
        keys = []
        for _ in range(batch):
            scene = int(random_state.randint(len(self.fused)))
            anchor = int(random_state.randint(self.fused[scene].shape[0]))
            metric = int(random_state.randint(len(self.config.metric_names)))
            keys.append((scene, anchor, metric))
        targets = np.array([self.targets[s][a, m] for s, a, m in keys])
        return keys, targets

    def mean_abs_error(self):
        """Mean |logistic(mu) - oracle| over every scene, anchor and head."""
        errors = []
        for fused, targets in zip(self.fused, self.targets):
            out = np.stack(
                [
                    fused @ self.arrays["head.%s.w" % name][:, 0] + self.arrays["head.%s.b" % name][0]
                    for name in self.config.metric_names
                ],
                axis=1,
            )
            errors.append(np.abs(0.5 * (1.0 + np.tanh(0.5 * out)) - targets))
        return float(np.mean(errors))


def _values(policy, arrays, keys):
    tensors = {name: nx.Tensor(value) for name, value in arrays.items()}
    mu, sigma = policy.evaluate(tensors, keys)
    return mu.value, sigma.value


def run_grpo(policy, draw, config: GrpoConfig, log: CsvTable = None):
    """Runs the GRPO iterations on a policy in place.

    Args:
        policy: Object with ``arrays`` (dict of trainable arrays) and
            ``evaluate(tensors, keys) -> (mu, sigma)``.
        draw (callable): ``draw(random_state) -> (keys, targets)``, one key per rollout.
        config (GrpoConfig): Hyper-parameters.
        log (CsvTable, optional): Receives one row per iteration.

    Returns:
        The policy's final arrays.
    """
    random_state = check_seed(config.seed)
    reference = {name: np.array(value) for name, value in policy.arrays.items()}
    for iteration in range(1, config.iterations + 1):
        old = {name: np.array(value) for name, value in policy.arrays.items()}
        keys, targets = draw(random_state)
        mu_old, sigma_old = _values(policy, old, keys)
        mu_ref, sigma_ref = _values(policy, reference, keys)
        rollouts = [
            GroupRollout.collect(mu_old[i], sigma_old[i], mu_ref[i], sigma_ref[i], targets[i], config, random_state)
            for i in range(len(keys))
        ]
        for _ in range(config.updates_per_iteration):
            tape = nx.Tape()
            tensors = {name: tape.watch(value, name) for name, value in policy.arrays.items()}
            mu, sigma = policy.evaluate(tensors, keys)
            J, diagnostics = batch_objective(rollouts, mu, sigma, config)
            if diagnostics.clamp_fraction > MAX_CLAMP_FRACTION:
                raise nx.DivergenceError(
                    "Log-ratio clamp hit on %.1f%% of samples at iteration %s."
                    % (100 * diagnostics.clamp_fraction, iteration)
                )
            loss = rl_loss(J, diagnostics.kl, config.loss_kl_coeff)
            if not np.isfinite(loss.item()):
                raise nx.DivergenceError("GRPO loss is not finite at iteration %s." % iteration)
            grads, norm = clip_gradients(tape.backward(loss), config.max_grad_norm)
            policy.arrays = {name: policy.arrays[name] - config.lr * grads[name] for name in policy.arrays}
        mean_abs_err = float(np.mean(np.abs(mu_old - targets)))
        if log is not None:
            log.add_row(
                {
                    "iteration": iteration,
                    "loss": loss.item(),
                    "J": J.item(),
                    "KL": diagnostics.kl.item(),
                    "clip_fraction": diagnostics.clip_fraction,
                    "mean_abs_err": mean_abs_err,
                }
            )
        logger.info(
            "iteration %s: loss %.6f, J %.6f, KL %.6f, clip %.3f, |mu - s*| %.4f, grad norm %.3f",
            iteration,
            loss.item(),
            J.item(),
            diagnostics.kl.item(),
            diagnostics.clip_fraction,
            mean_abs_err,
            norm,
        )
    return policy.arrays


def finetune_scalar_head(head: ScalarHead, target: float, config: GrpoConfig, log: CsvTable = None):
    """GRPO on one scalar head towards a fixed oracle score."""
    run_grpo(
        head,
        lambda random_state: ([None] * config.batch, np.full(config.batch, float(target))),
        config,
        log,
    )
    return head


def finetune(checkpoint: Checkpoint, vocabulary, scenes, config: GrpoConfig, log: CsvTable = None):
    """Fine-tunes the score heads of a supervised checkpoint.

    Args:
        checkpoint (Checkpoint): Stage "sup"; its heads are also the frozen reference.
        vocabulary (TrajectoryVocabulary): Anchors.
        scenes (list): LabelledScene items supplying scene tokens and oracle targets.
        config (GrpoConfig): Hyper-parameters.
        log (CsvTable, optional): Training curve, one row per iteration.

    Returns:
        Checkpoint: Stage "grpo"; every non-head parameter is bit-identical.
    """
    check_stage(checkpoint.stage, "sup")
    if not scenes:
        raise ValueError("Fine-tuning needs at least one scenario.")
    params = checkpoint.params
    heads = ScorerHeads(params, vocabulary, scenes)
    logger.info(
        "fine-tuning %s head parameters on %s scenarios, mean |mu - s*| %.4f",
        int(np.sum([v.size for v in heads.arrays.values()])),
        len(scenes),
        heads.mean_abs_error(),
    )
    arrays = run_grpo(heads, lambda random_state: heads.draw(random_state, config.batch), config, log)
    logger.info("fine-tuned, mean |mu - s*| %.4f", heads.mean_abs_error())
    extra = dict(checkpoint.extra)
    extra["grpo"] = config.to_dict()
    return Checkpoint(params.replaced(arrays), "grpo", checkpoint.seed, extra)
