"""Supervised training of the scorer against oracle sub-scores."""
import logging

import numpy as np

from trajmoe import numerics as nx
from trajmoe.checks import check_seed
from trajmoe.csv_table import CsvTable
from trajmoe.model import MoEScorerParams, score_vocabulary, select_trajectory, supervised_loss
from trajmoe.world import METRIC_NAMES, aggregate_array, label_array, scene_features

logger = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "loss", "bce", "balance_loss", "holdout_aggregate"]


class LabelledScene:
    """Scene tokens and oracle labels of every anchor in one scenario.

    Args:
        scenario (Scenario): The world.
        vocabulary (TrajectoryVocabulary): Anchors.
        metric_names (list, optional): Head order. Defaults to METRIC_NAMES.
    """

    def __init__(self, scenario, vocabulary, metric_names=None):
        self.scenario = scenario
        self.features = scene_features(scenario)
        self.labels = label_array(vocabulary, scenario)
        self.aggregates = aggregate_array(self.labels)
        names = list(METRIC_NAMES if metric_names is None else metric_names)
        self.targets = self.labels[:, [METRIC_NAMES.index(n) for n in names]]


def prepare_scenes(scenarios, vocabulary, metric_names=None):
    return [LabelledScene(s, vocabulary, metric_names) for s in scenarios]


class Adam:
    """Adam over a dict of named arrays.

    Args:
        lr (float): Step size.
        beta1 (float, optional): Defaults to 0.9.
        beta2 (float, optional): Defaults to 0.999.
        eps (float, optional): Defaults to 1e-8.
    """

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("Learning rate must be positive, got %s." % lr)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m = {}
        self._v = {}
        self._t = 0

    def step(self, arrays: dict, grads: dict):
        """Returns updated copies of the arrays named in ``grads``."""
        self._t += 1
        updated = {}
        for name, grad in grads.items():
            m = self.beta1 * self._m.get(name, 0.0) + (1 - self.beta1) * grad
            v = self.beta2 * self._v.get(name, 0.0) + (1 - self.beta2) * grad * grad
            self._m[name] = m
            self._v[name] = v
            m_hat = m / (1 - self.beta1 ** self._t)
            v_hat = v / (1 - self.beta2 ** self._t)
            updated[name] = arrays[name] - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return updated


def selection_quality(params: MoEScorerParams, vocabulary, scenes):
    """Mean oracle aggregate of the selected anchors."""
    if not scenes:
        return None
    values = []
    for scene in scenes:
        output = score_vocabulary(scene.features, vocabulary, params)
        values.append(scene.aggregates[select_trajectory(output.mu, metric_names=params.config.metric_names)])
    return float(np.mean(values))


def scene_loss_and_grads(params: MoEScorerParams, vocabulary, scene, w_bal: float, trainable=None):
    """One scenario's supervised loss, its parts and the parameter gradients."""
    tape = nx.Tape()
    output = score_vocabulary(scene.features, vocabulary, params, tape, trainable)
    loss, bce, balance = supervised_loss(output.mu, scene.targets, output.routing, w_bal)
    if not np.isfinite(loss.item()):
        raise nx.DivergenceError("Supervised loss is not finite.")
    return (loss.item(), bce.item(), balance.item()), tape.backward(loss)


class SupervisedTrainer:
    """Minibatch Adam training of every scorer parameter.

    Args:
        params (MoEScorerParams): Initial parameters.
        vocabulary (TrajectoryVocabulary): Anchors shared by all scenarios.
        scenarios (list): Training scenarios; a seeded share is held out.
        w_bal (float, optional): Balance loss weight. Defaults to 0.01.
        epochs (int, optional): Passes over the training split. Defaults to 10.
        lr (float, optional): Adam step size. Defaults to 1e-3.
        batch (int, optional): Scenarios per update. Defaults to 8.
        holdout (float, optional): Held-out share in [0, 1). Defaults to 0.2.
        seed (int, optional): Split and shuffle seed. Defaults to None.
    """

    def __init__(
        self,
        params: MoEScorerParams,
        vocabulary,
        scenarios,
        w_bal: float = 0.01,
        epochs: int = 10,
        lr: float = 1e-3,
        batch: int = 8,
        holdout: float = 0.2,
        seed=None,
    ):
        if not 0 <= holdout < 1:
            raise ValueError("holdout must lie in [0, 1), got %s." % holdout)
        if batch < 1 or epochs < 0:
            raise ValueError("batch must be >= 1 and epochs >= 0.")
        if w_bal < 0:
            raise ValueError("w_bal must be non-negative, got %s." % w_bal)
        self.params = params
        self.vocabulary = vocabulary
        self.w_bal = w_bal
        self.epochs = epochs
        self.batch = batch
        self._random_state = check_seed(seed)
        self._optimizer = Adam(lr)

        scenes = prepare_scenes(scenarios, vocabulary, params.config.metric_names)
        order = self._random_state.permutation(len(scenes))
        n_holdout = int(round(holdout * len(scenes)))
        if scenes and n_holdout >= len(scenes):
            n_holdout = len(scenes) - 1
        self.holdout_scenes = [scenes[i] for i in sorted(order[:n_holdout])]
        self.train_scenes = [scenes[i] for i in sorted(order[n_holdout:])]
        if not self.train_scenes:
            raise ValueError("Training needs at least one scenario.")
        self.log = CsvTable(LOG_COLUMNS)

    def _epoch(self):
        totals = np.zeros(3)
        order = self._random_state.permutation(len(self.train_scenes))
        for start in range(0, len(order), self.batch):
            grads = {}
            for i in order[start:start + self.batch]:
                parts, scene_grads = scene_loss_and_grads(
                    self.params, self.vocabulary, self.train_scenes[i], self.w_bal
                )
                totals += parts
                for name, grad in scene_grads.items():
                    grads[name] = grads[name] + grad if name in grads else grad
            self.params = self.params.replaced(self._optimizer.step(self.params.arrays, grads))
        return totals / len(order)

    def run(self):
        """Trains for the configured epochs and returns the final parameters."""
        logger.info(
            "training on %s scenarios, %s held out, %s parameters",
            len(self.train_scenes),
            len(self.holdout_scenes),
            self.params.num_parameters(),
        )
        for epoch in range(1, self.epochs + 1):
            loss, bce, balance = self._epoch()
            quality = selection_quality(self.params, self.vocabulary, self.holdout_scenes)
            self.log.add_row(
                {
                    "epoch": epoch,
                    "loss": loss,
                    "bce": bce,
                    "balance_loss": balance,
                    "holdout_aggregate": quality,
                }
            )
            logger.info(
                "epoch %s: loss %.6f, bce %.6f, balance %.6f, holdout aggregate %s",
                epoch,
                loss,
                bce,
                balance,
                "n/a" if quality is None else "%.4f" % quality,
            )
        return self.params
