"""Trajectory scorer with sparse mixture-of-experts feed-forward layers.

Anchor trajectories and scene tokens are embedded into the model dimension
and fused by pre-norm transformer blocks: self-attention over anchors,
cross-attention to the scene, then a feed-forward layer. The feed-forward
layer is either a sparse MoE layer (router, N private experts, one shared
expert) or a dense map of the same parameter budget. Every metric head maps
the fused anchor token to a Gaussian score (mu, sigma).
"""
import logging
from math import exp, log, sqrt

import numpy as np

from trajmoe import numerics as nx
from trajmoe.checks import check_horizon, check_moe_arguments, check_seed, check_unit_interval
from trajmoe.world import D_CAM, METRIC_NAMES, POSITION_SCALE, W_EP, W_HC, W_TTC

logger = logging.getLogger(__name__)

MASK_VALUE = -1e9
SIGMA_INIT = 0.1
# floor of a selected expert weight
MIN_WEIGHT = np.finfo(np.float64).tiny


class ScorerConfig:
    """Architecture of the scorer.

    Args:
        horizon (int, optional): Waypoints per anchor. Defaults to 8.
        dim (int, optional): Model dimension. Defaults to 64.
        blocks (int, optional): Number of transformer blocks L >= 1. Defaults to 2.
        experts (int, optional): Private experts N per MoE layer. Defaults to 4.
        top_k (int, optional): Experts k selected per token, 1 <= k < N. Defaults to 2.
        heads (int, optional): Attention heads, must divide ``dim``. Defaults to 4.
        expert_hidden (int, optional): Hidden width of each expert. Defaults to 128.
        ffn (str, optional): "moe" or "dense". Defaults to "moe".
        moe_blocks (list, optional): Block indices with MoE layers. Defaults to None
            (every block).
        sigma_min (float, optional): Lower bound of sigma. Defaults to 0.01.
        metric_names (list, optional): One head per metric. Defaults to METRIC_NAMES.
        scene_dim (int, optional): Channels per scene token. Defaults to D_CAM.
    """

    FIELDS = [
        "horizon",
        "dim",
        "blocks",
        "experts",
        "top_k",
        "heads",
        "expert_hidden",
        "ffn",
        "moe_blocks",
        "sigma_min",
        "metric_names",
        "scene_dim",
    ]

    def __init__(
        self,
        horizon: int = 8,
        dim: int = 64,
        blocks: int = 2,
        experts: int = 4,
        top_k: int = 2,
        heads: int = 4,
        expert_hidden: int = 128,
        ffn: str = "moe",
        moe_blocks=None,
        sigma_min: float = 0.01,
        metric_names=None,
        scene_dim: int = D_CAM,
    ):
        self.horizon = horizon
        self.dim = dim
        self.blocks = blocks
        self.experts = experts
        self.top_k = top_k
        self.heads = heads
        self.expert_hidden = expert_hidden
        self.ffn = ffn
        self.moe_blocks = list(range(blocks)) if moe_blocks is None else sorted(moe_blocks)
        self.sigma_min = sigma_min
        self.metric_names = list(METRIC_NAMES if metric_names is None else metric_names)
        self.scene_dim = scene_dim
        self._check()

    def _check(self):
        if not isinstance(self.blocks, int) or self.blocks < 1:
            raise ValueError("Number of blocks must be an integer >= 1, got %s." % self.blocks)
        if self.dim % self.heads:
            raise ValueError("heads=%s does not divide dim=%s." % (self.heads, self.dim))
        if self.ffn not in ["moe", "dense"]:
            raise ValueError("ffn must be 'moe' or 'dense', got %s." % self.ffn)
        if self.ffn == "moe":
            check_moe_arguments(self.experts, self.top_k)
        for block in self.moe_blocks:
            if not 0 <= block < self.blocks:
                raise ValueError("MoE block index %s outside [0, %s)." % (block, self.blocks))
        if self.sigma_min <= 0:
            raise ValueError("sigma_min must be positive, got %s." % self.sigma_min)
        if not self.metric_names:
            raise ValueError("At least one metric head is required.")

    def uses_moe(self, block: int) -> bool:
        return self.ffn == "moe" and block in self.moe_blocks

    def to_dict(self):
        return {field: getattr(self, field) for field in self.FIELDS}

    @classmethod
    def from_dict(cls, payload):
        unknown = set(payload) - set(cls.FIELDS)
        if unknown:
            raise KeyError("Unknown scorer config fields %s" % sorted(unknown))
        return cls(**payload)

    def __eq__(self, other):
        return isinstance(other, ScorerConfig) and self.to_dict() == other.to_dict()

    def __repr__(self):
        return "ScorerConfig(%s)" % ", ".join("%s=%s" % kv for kv in self.to_dict().items())


class RoutingRecord:
    """Post-top-k router probabilities of one MoE layer over a token batch.

    Args:
        P (Tensor): B x N weights, zero at unselected experts.
        selected (ndarray): B x k selected expert indices, ascending per row.
    """

    def __init__(self, P, selected):
        self.P = P
        self.selected = np.asarray(selected, dtype=np.int64)

    @property
    def num_experts(self):
        return self.P.shape[-1]

    def importance(self):
        return self.P.value.sum(axis=0)

    def load(self):
        return np.bincount(self.selected.ravel(), minlength=self.num_experts).astype(np.float64)


class _FeedForward:
    """relu(x W1 + b1) W2 + b2."""

    def __init__(self, w1, b1, w2, b2):
        self.w1 = w1
        self.b1 = b1
        self.w2 = w2
        self.b2 = b2

    @classmethod
    def from_params(cls, params, prefix):
        return cls(*(params[prefix + name] for name in ("w1", "b1", "w2", "b2")))

    def __call__(self, x):
        return nx.relu(x @ self.w1 + self.b1) @ self.w2 + self.b2


class MoELayerParams:
    """Router, private experts and shared expert of one MoE layer.

    Args:
        router (tuple): (weight D x N, bias N).
        experts (list): N feed-forward maps.
        shared_expert (_FeedForward): Map applied to every token.
        top_k (int): Experts selected per token.
    """

    def __init__(self, router, experts, shared_expert, top_k: int):
        check_moe_arguments(len(experts), top_k, strict=False)
        self.router = router
        self.experts = experts
        self.shared_expert = shared_expert
        self.top_k = top_k

    @classmethod
    def from_params(cls, params, prefix, num_experts, top_k):
        return cls(
            (params[prefix + "router.w"], params[prefix + "router.b"]),
            [
                _FeedForward.from_params(params, "%sexpert%s." % (prefix, i))
                for i in range(num_experts)
            ],
            _FeedForward.from_params(params, prefix + "shared."),
            top_k,
        )

    @property
    def num_experts(self):
        return len(self.experts)


def _scale_rows(x, scale, divide=False):
    """Multiplies (or divides) row i of a 2D tensor by scale[i]."""
    columns = nx.transpose(x, (1, 0))
    columns = nx.div(columns, scale) if divide else nx.mul(columns, scale)
    return nx.transpose(columns, (1, 0))


def route(tokens, router, k: int, selected=None):
    """Top-k routing of tokens to experts.

    The k largest of the N logits are kept (ties to the lowest expert index),
    which are the k largest softmax probabilities. Their weights are the
    softmax over the selected logits alone, equal to the full softmax
    renormalised over the selection, floored at the smallest normal float so
    no selected weight is zero.

    Args:
        tokens (Tensor): B x D tokens, or a single token of length D.
        router (tuple): (weight D x N, bias N).
        k (int): Number of selected experts.
        selected (ndarray, optional): B x k selection to reuse instead of
            taking the top-k. Defaults to None.

    Returns:
        tuple: (S, w). S holds the selected indices sorted ascending, w the
        renormalised weights (Tensor) in the same order. Single-token input
        gives one-dimensional results.
    """
    tokens = nx.as_tensor(tokens)
    single = tokens.ndim == 1
    if single:
        tokens = nx.reshape(tokens, [1, tokens.shape[0]])
    weight, bias = (nx.as_tensor(t) for t in router)
    num_experts = weight.shape[-1]
    check_moe_arguments(num_experts, k, strict=False)
    logits = tokens @ weight + bias
    if selected is None:
        order = np.argsort(-logits.value, axis=-1, kind="stable")[:, :k]
        selected = np.sort(order, axis=-1)
    else:
        selected = np.asarray(selected, dtype=np.int64)
        if single:
            selected = selected.reshape(1, -1)
        if selected.shape != (tokens.shape[0], k):
            raise nx.ShapeError("route", tokens.shape, selected.shape)
    if logits.tape is not None:
        logits.tape.note_pattern("top_k", selected)
    weights = nx.clip(nx.softmax(nx.take_along(logits, selected)), MIN_WEIGHT, 1.0)
    if single:
        return selected[0], nx.reshape(weights, [k])
    return selected, weights


def moe_forward(tokens, layer: MoELayerParams, selected=None):
    """Sparse MoE layer: sum over selected experts of w_i e_i(x), plus e_0(x).

    Only the selected experts are evaluated; each sees just the tokens routed
    to it.

    Args:
        tokens (Tensor): B x D.
        layer (MoELayerParams): Layer parameters.
        selected (ndarray, optional): Frozen B x k selection. Defaults to None.

    Returns:
        tuple: (B x D output, RoutingRecord).
    """
    tokens = nx.as_tensor(tokens)
    batch = tokens.shape[0]
    selected, weights = route(tokens, layer.router, layer.top_k, selected)
    P = nx.put_along(weights, selected, layer.num_experts)
    output = layer.shared_expert(tokens)
    for i, expert in enumerate(layer.experts):
        rows = np.nonzero((selected == i).any(axis=1))[0]
        if not len(rows):
            continue
        column = nx.reshape(nx.take_along(P, np.full((batch, 1), i)), [batch])
        contribution = _scale_rows(expert(nx.gather(tokens, rows)), nx.gather(column, rows))
        output = output + nx.scatter_add(contribution, rows, batch)
    return output, RoutingRecord(P, selected)


def _squared_cv(values):
    centre = nx.mean(values)
    return nx.div(nx.mean(nx.mul(values - centre, values - centre)), nx.mul(centre, centre))


def balance_loss(record):
    """CV^2(importance) + CV^2(load) of one layer's routing matrix.

    Importance is the column sum of P. Load counts the tokens routed to each
    expert, taken from the selection of a RoutingRecord or from the nonzeros
    of a bare matrix. The load term carries no gradient.

    Args:
        record (RoutingRecord or array_like): The layer's B x E matrix P.

    Returns:
        Tensor: Scalar loss, zero when E = 1.
    """
    P = record.P if isinstance(record, RoutingRecord) else nx.as_tensor(record)
    if P.ndim != 2 or P.shape[0] < 1:
        raise ValueError("Routing matrix must be B x E with B >= 1, got %s." % P.shape)
    if P.shape[1] == 1:
        return nx.Tensor(0.0)
    importance = nx.sum(P, axis=0)
    if importance.value.mean() == 0:
        raise ValueError("Mean importance is zero; the routing batch is empty.")
    if isinstance(record, RoutingRecord):
        load = nx.Tensor(record.load())
    else:
        load = nx.Tensor((P.value != 0).sum(axis=0).astype(np.float64))
    return _squared_cv(importance) + _squared_cv(load)


def total_balance_loss(records):
    """Balance losses summed over every MoE layer."""
    total = nx.Tensor(0.0)
    for record in records:
        total = total + balance_loss(record)
    return total


class MoEScorerParams:
    """Named parameter arrays of the scorer.

    Args:
        config (ScorerConfig): Architecture.
        arrays (dict): Parameter name -> ndarray.
    """

    def __init__(self, config: ScorerConfig, arrays: dict):
        self.config = config
        self.arrays = {name: np.array(value, dtype=np.float64) for name, value in arrays.items()}
        expected = self.shapes(config)
        missing = set(expected) - set(self.arrays)
        unknown = set(self.arrays) - set(expected)
        if missing or unknown:
            raise KeyError("Parameter mismatch: missing %s, unknown %s" % (sorted(missing), sorted(unknown)))
        for name, shape in expected.items():
            if self.arrays[name].shape != shape:
                raise ValueError(
                    "Parameter %s has shape %s, expected %s" % (name, self.arrays[name].shape, shape)
                )

    @staticmethod
    def shapes(config: ScorerConfig):
        """Name -> shape manifest, in initialisation order."""
        D, H = config.dim, config.expert_hidden
        shapes = {
            "traj.w1": (4 * config.horizon, D),
            "traj.b1": (D,),
            "traj.w2": (D, D),
            "traj.b2": (D,),
            "scene.w": (config.scene_dim, D),
            "scene.b": (D,),
        }

        def feed_forward(prefix, hidden):
            shapes.update(
                {
                    prefix + "w1": (D, hidden),
                    prefix + "b1": (hidden,),
                    prefix + "w2": (hidden, D),
                    prefix + "b2": (D,),
                }
            )

        for block in range(config.blocks):
            for attention in ("self", "cross"):
                for matrix in ("wq", "wk", "wv", "wo"):
                    shapes["block%s.%s.%s" % (block, attention, matrix)] = (D, D)
            prefix = "block%s.ffn." % block
            if config.uses_moe(block):
                shapes[prefix + "router.w"] = (D, config.experts)
                shapes[prefix + "router.b"] = (config.experts,)
                for i in range(config.experts):
                    feed_forward("%sexpert%s." % (prefix, i), H)
                feed_forward(prefix + "shared.", H)
            else:
                feed_forward(prefix, (config.experts + 1) * H)
        for metric in config.metric_names:
            shapes["head.%s.w" % metric] = (D, 2)
            shapes["head.%s.b" % metric] = (2,)
        return shapes

    @classmethod
    def init(cls, config: ScorerConfig, seed=None):
        """Scaled normal weights, zero biases, sigma heads starting at 0.1."""
        random_state = check_seed(seed)
        arrays = {}
        sigma_bias = log(exp(SIGMA_INIT - config.sigma_min) - 1.0)
        for name, shape in cls.shapes(config).items():
            if len(shape) == 1:
                arrays[name] = np.zeros(shape)
            else:
                arrays[name] = random_state.normal(0.0, 1.0 / sqrt(shape[0]), size=shape)
            if name.startswith("head.") and name.endswith(".w"):
                arrays[name][:, 1] = 0.0
            if name.startswith("head.") and name.endswith(".b"):
                arrays[name][1] = sigma_bias
        return cls(config, arrays)

    def head_names(self):
        return [name for name in self.arrays if name.startswith("head.")]

    def backbone_names(self):
        return [name for name in self.arrays if not name.startswith("head.")]

    def num_parameters(self):
        return int(np.sum([value.size for value in self.arrays.values()]))

    def tensors(self, tape=None, trainable=None):
        """Parameters as tensors; names in ``trainable`` (default all) are watched on ``tape``."""
        trainable = set(self.arrays if trainable is None else trainable)
        tensors = {}
        for name, value in self.arrays.items():
            if tape is not None and name in trainable:
                tensors[name] = tape.watch(value, name)
            else:
                tensors[name] = nx.Tensor(value)
        return tensors

    def replaced(self, updates: dict):
        """Copy with some arrays replaced."""
        arrays = dict(self.arrays)
        arrays.update(updates)
        return MoEScorerParams(self.config, arrays)

    def copy(self):
        return MoEScorerParams(self.config, self.arrays)

    def equal(self, other, names=None):
        """Bit-exact comparison of the given (default all) arrays."""
        names = self.arrays if names is None else names
        return all(np.array_equal(self.arrays[n], other.arrays[n]) for n in names)


class ScoreOutput:
    """Per-anchor, per-metric Gaussian scores.

    Attributes:
        mu (Tensor): K x M means.
        sigma (Tensor): K x M standard deviations, >= sigma_min.
        routing (list): RoutingRecord of every MoE layer, block order.
        fused (Tensor): K x D fused anchor tokens fed to the heads.
    """

    def __init__(self, mu, sigma, routing, fused):
        self.mu = mu
        self.sigma = sigma
        self.routing = routing
        self.fused = fused


def trajectory_inputs(vocabulary):
    """K x 4T rows of (x/20, y/20, cos h, sin h) per waypoint."""
    poses = vocabulary.stacked()
    features = np.stack(
        [
            poses[:, :, 0] / POSITION_SCALE,
            poses[:, :, 1] / POSITION_SCALE,
            np.cos(poses[:, :, 2]),
            np.sin(poses[:, :, 2]),
        ],
        axis=2,
    )
    return features.reshape(len(poses), -1)


def _attention(queries, keys, params, prefix, heads, mask=None):
    rows, dim = queries.shape
    columns = keys.shape[0]
    head_dim = dim // heads
    q = nx.transpose(nx.reshape(queries @ params[prefix + "wq"], [rows, heads, head_dim]), (1, 0, 2))
    k = nx.transpose(nx.reshape(keys @ params[prefix + "wk"], [columns, heads, head_dim]), (1, 2, 0))
    v = nx.transpose(nx.reshape(keys @ params[prefix + "wv"], [columns, heads, head_dim]), (1, 0, 2))
    logits = nx.mul(q @ k, 1.0 / sqrt(head_dim))
    if mask is not None:
        logits = logits + mask
    attended = nx.softmax(logits) @ v
    merged = nx.reshape(nx.transpose(attended, (1, 0, 2)), [rows, dim])
    return merged @ params[prefix + "wo"]


def fuse(features, vocabulary, params, config: ScorerConfig, routing=None):
    """Runs the embeddings and transformer blocks.

    Args:
        features (ndarray): T_cam x D_cam scene tokens.
        vocabulary (TrajectoryVocabulary): Anchors, ego frame.
        params (dict): Parameter name -> Tensor.
        config (ScorerConfig): Architecture.
        routing (list, optional): Records whose selections are reused.

    Returns:
        tuple: (K x D normalised fused tokens, list of RoutingRecords).
    """
    check_horizon(config.horizon, vocabulary.horizon, "vocabulary")
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != config.scene_dim:
        raise nx.ShapeError("scene_embed", features.shape, [features.shape[0], config.scene_dim])
    mask = nx.Tensor(np.where(features[:, -1] > 0.5, MASK_VALUE, 0.0))
    scene = nx.Tensor(features) @ params["scene.w"] + params["scene.b"]
    x = nx.Tensor(trajectory_inputs(vocabulary))
    x = nx.relu(x @ params["traj.w1"] + params["traj.b1"]) @ params["traj.w2"] + params["traj.b2"]

    records = []
    for block in range(config.blocks):
        prefix = "block%s." % block
        normed = nx.layer_norm(x)
        x = x + _attention(normed, normed, params, prefix + "self.", config.heads)
        x = x + _attention(
            nx.layer_norm(x), scene, params, prefix + "cross.", config.heads, mask
        )
        normed = nx.layer_norm(x)
        if config.uses_moe(block):
            layer = MoELayerParams.from_params(
                params, prefix + "ffn.", config.experts, config.top_k
            )
            frozen = None if routing is None else routing[len(records)].selected
            update, record = moe_forward(normed, layer, frozen)
            records.append(record)
        else:
            update = _FeedForward.from_params(params, prefix + "ffn.")(normed)
        x = x + update
    return nx.layer_norm(x), records


def apply_heads(fused, params, config: ScorerConfig):
    """(mu, sigma), each K x M, from fused anchor tokens."""
    rows = fused.shape[0]
    first = np.zeros((rows, 1), dtype=np.int64)
    second = np.ones((rows, 1), dtype=np.int64)
    mus, sigmas = [], []
    for metric in config.metric_names:
        out = fused @ params["head.%s.w" % metric] + params["head.%s.b" % metric]
        mus.append(nx.take_along(out, first))
        sigmas.append(nx.softplus(nx.take_along(out, second)) + config.sigma_min)
    return nx.concat(mus, axis=-1), nx.concat(sigmas, axis=-1)


def score_vocabulary(features, vocabulary, params: MoEScorerParams, tape=None, trainable=None, routing=None):
    """Scores every anchor of the vocabulary in one scene.

    Args:
        features (ndarray): Scene tokens from ``world.scene_features``.
        vocabulary (TrajectoryVocabulary): Anchors, K >= 2.
        params (MoEScorerParams): Scorer parameters.
        tape (Tape, optional): Records the computation for gradients. Defaults to None.
        trainable (list, optional): Parameter names watched on the tape. Defaults to all.
        routing (list, optional): RoutingRecords whose expert selections are
            reused (frozen routing). Defaults to None.

    Returns:
        ScoreOutput
    """
    vocabulary.check_usable()
    tensors = params.tensors(tape, trainable)
    fused, records = fuse(features, vocabulary, tensors, params.config, routing)
    mu, sigma = apply_heads(fused, tensors, params.config)
    return ScoreOutput(mu, sigma, records, fused)


def supervised_loss(mu, targets, routing, w_bal: float):
    """Multi-task BCE on logistic-mapped mu plus the weighted balance loss.

    Args:
        mu (Tensor): K x M head means (logits).
        targets (ndarray): K x M oracle sub-scores in [0, 1].
        routing (list): RoutingRecords of every MoE layer.
        w_bal (float): Balance loss weight.

    Returns:
        tuple: (loss, bce, balance) scalar tensors; loss = bce + w_bal * balance,
        bce summed over metrics and averaged over anchors.
    """
    mu = nx.as_tensor(mu)
    targets = np.asarray(targets, dtype=np.float64)
    if list(targets.shape) != mu.shape:
        raise nx.ShapeError("supervised_loss", mu.shape, targets.shape)
    check_unit_interval(targets, "Oracle targets")
    bce = nx.sum(nx.mean(nx.softplus(mu) - nx.mul(mu, targets), axis=0))
    balance = total_balance_loss(routing)
    return bce + nx.mul(balance, w_bal), bce, balance


def composite_scores(mu, metric_names=None, weights=(W_EP, W_TTC, W_HC)):
    """Composite of logistic-mapped heads, one value per anchor."""
    mu = np.asarray(mu.value if isinstance(mu, nx.Tensor) else mu, dtype=np.float64)
    names = list(METRIC_NAMES if metric_names is None else metric_names)
    p = 0.5 * (1.0 + np.tanh(0.5 * mu))
    column = {name: p[:, names.index(name)] for name in METRIC_NAMES}
    w_ep, w_ttc, w_hc = weights
    return (column["nc"] * column["dac"]) * (
        w_ep * column["ep"] + w_ttc * column["ttc"] + w_hc * column["hc"]
    )


def select_trajectory(mu, weights=(W_EP, W_TTC, W_HC), metric_names=None) -> int:
    """Index of the anchor with the highest composite; ties to the lowest index."""
    return int(np.argmax(composite_scores(mu, metric_names, weights)))


def supervised_objective(tensors, features, vocabulary, config: ScorerConfig, targets, w_bal: float, routing=None):
    """Supervised loss as a function of parameter tensors, for gradient checks."""
    fused, records = fuse(features, vocabulary, tensors, config, routing)
    mu, _ = apply_heads(fused, tensors, config)
    loss, _, _ = supervised_loss(mu, targets, records, w_bal)
    return loss
